//! Trained model on disk: a directory holding `model.json` (class list,
//! scalar parameters, reference ids) and tensor files for the matrices.
//!
//! ```text
//! model.json
//! prototypes.sere        C x D enhanced anchors
//! initial.sere           C x D labeled-only anchors
//! projection.sere        optional head, D x input
//! references/NNN.sere    embeddings of each reference utterance
//! references/NNN.dyn     its normalized dynamics (T x 4)
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SereError};
use crate::idfe::IdfeParams;
use crate::irf::IrfParams;
use crate::model::{SereModel, TricParams, Utterance};
use crate::tensor_file;
use crate::trainer::Labeled;
use crate::tric::PrototypeSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SereModel,
    pub classes: Vec<String>,
    /// Labeled source samples the model resonates against when classifying.
    pub references: Vec<Labeled>,
    pub epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    classes: Vec<String>,
    epsilon: f64,
    idfe: IdfeParams,
    irf: IrfParams,
    tric: TricParams,
    projection: bool,
    labeled_counts: Vec<usize>,
    pseudo_counts: Vec<usize>,
    references: Vec<Reference>,
}

#[derive(Serialize, Deserialize)]
struct Reference {
    id: String,
    label: usize,
}

impl Checkpoint {
    pub fn references(&self) -> Vec<Utterance> {
        self.references.iter().map(|l| l.utterance.clone()).collect()
    }

    pub fn prototypes(&self) -> Result<&PrototypeSet> {
        self.model
            .prototypes
            .as_ref()
            .ok_or_else(|| SereError::Precondition("checkpoint model has no prototypes".into()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let protos = self.prototypes()?;
        if protos.num_classes() != self.classes.len() {
            return Err(SereError::Shape(format!(
                "{} prototypes for {} classes",
                protos.num_classes(),
                self.classes.len()
            )));
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            classes: self.classes.clone(),
            epsilon: self.epsilon,
            idfe: self.model.idfe.clone(),
            irf: self.model.irf,
            tric: self.model.tric,
            projection: self.model.projection.is_some(),
            labeled_counts: protos.labeled_counts.clone(),
            pseudo_counts: protos.pseudo_counts.clone(),
            references: self
                .references
                .iter()
                .map(|l| Reference {
                    id: l.utterance.id.clone(),
                    label: l.label,
                })
                .collect(),
        };
        tensor_file::write(&dir.join("prototypes.sere"), &protos.enhanced)?;
        tensor_file::write(&dir.join("initial.sere"), &protos.initial)?;
        if let Some(p) = &self.model.projection {
            tensor_file::write(&dir.join("projection.sere"), p)?;
        }
        for (i, l) in self.references.iter().enumerate() {
            let base = dir.join("references").join(format!("{i:03}"));
            tensor_file::write(&base.with_extension("sere"), &l.utterance.embeddings)?;
            tensor_file::write(&base.with_extension("dyn"), &l.utterance.dynamics)?;
        }
        let json = serde_json::to_string_pretty(&meta).expect("plain data serializes");
        tensor_file::write_atomic(&dir.join("model.json"), format!("{json}\n").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| SereError::io(&path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| SereError::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(SereError::Unsupported(format!(
                "checkpoint format {}",
                meta.format_version
            )));
        }
        let enhanced = tensor_file::read(&dir.join("prototypes.sere"))?;
        let initial = tensor_file::read(&dir.join("initial.sere"))?;
        let projection = if meta.projection {
            Some(tensor_file::read(&dir.join("projection.sere"))?)
        } else {
            None
        };
        let dim = meta.idfe.w.len();
        let c = meta.classes.len();
        let expect = |m: &Array2<f64>, rows, cols, what: &str| {
            if m.dim() != (rows, cols) {
                return Err(SereError::Shape(format!("{what} is {:?}, expected ({rows}, {cols})", m.dim())));
            }
            Ok(())
        };
        expect(&enhanced, c, dim + 4, "prototypes")?;
        expect(&initial, c, dim + 4, "initial prototypes")?;
        if let Some(p) = &projection {
            if p.nrows() != dim {
                return Err(SereError::Shape(format!("projection has {} rows, expected {dim}", p.nrows())));
            }
        }
        let references = meta
            .references
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let base = dir.join("references").join(format!("{i:03}"));
                let utterance = Utterance::new(
                    r.id.clone(),
                    tensor_file::read(&base.with_extension("sere"))?,
                    tensor_file::read(&base.with_extension("dyn"))?,
                )?;
                if r.label >= c {
                    return Err(SereError::Index { index: r.label, len: c });
                }
                Ok(Labeled { utterance, label: r.label })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SereModel {
            idfe: meta.idfe,
            irf: meta.irf,
            tric: meta.tric,
            projection,
            prototypes: Some(PrototypeSet {
                initial,
                enhanced,
                labeled_counts: meta.labeled_counts,
                pseudo_counts: meta.pseudo_counts,
            }),
        };
        Ok(Self {
            model,
            classes: meta.classes,
            references,
            epsilon: meta.epsilon,
        })
    }

    /// Fails unless the given class list matches the checkpoint's exactly.
    pub fn check_classes(&self, classes: &[String]) -> Result<()> {
        if self.classes != classes {
            return Err(SereError::Compatibility(format!(
                "checkpoint classes [{}] differ from manifest classes [{}]",
                self.classes.join(", "),
                classes.join(", ")
            )));
        }
        Ok(())
    }
}
