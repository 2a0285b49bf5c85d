//! Dataset manifests: one CSV row per utterance naming its embedding file,
//! language, role and (for labeled roles) emotion label.
//!
//! Static features of an utterance are read from the embedding path with the
//! extension replaced by `feat`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dsp::StaticFeatures;
use crate::error::{Result, SereError};
use crate::idfe::normalized_dynamics;
use crate::model::Utterance;
use crate::tensor_file;
use crate::trainer::{Dataset, Labeled};

pub const HEADER: [&str; 5] = ["id", "path", "language", "role", "label"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    LabeledSource,
    UnlabeledSource,
    UnlabeledTarget,
    EvalTarget,
}

impl Role {
    pub fn is_labeled(self) -> bool {
        matches!(self, Role::LabeledSource | Role::EvalTarget)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::LabeledSource => "labeled_source",
            Role::UnlabeledSource => "unlabeled_source",
            Role::UnlabeledTarget => "unlabeled_target",
            Role::EvalTarget => "eval_target",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "labeled_source" => Role::LabeledSource,
            "unlabeled_source" => Role::UnlabeledSource,
            "unlabeled_target" => Role::UnlabeledTarget,
            "eval_target" => Role::EvalTarget,
            other => return Err(format!("unknown role {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// 1-based line in the manifest file.
    pub line: usize,
    pub id: String,
    pub path: PathBuf,
    pub language: String,
    pub role: Role,
    pub label: Option<String>,
}

impl Entry {
    pub fn features_path(&self) -> PathBuf {
        self.path.with_extension("feat")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub source: PathBuf,
    pub entries: Vec<Entry>,
    /// Sorted labels of the labeled source rows.
    pub classes: Vec<String>,
}

impl Manifest {
    /// Parses manifest text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let err = |line: usize, message: String| SereError::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(err(1, format!("header must be {}", HEADER.join(","))));
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let role: Role = record[3].parse().map_err(|m| err(line, m))?;
            let id = record[0].to_string();
            if id.is_empty() {
                return Err(err(line, "empty id".into()));
            }
            if !seen.insert(id.clone()) {
                return Err(err(line, format!("duplicate id {id:?}")));
            }
            let label = match (&record[4], role.is_labeled()) {
                ("", true) => return Err(err(line, format!("role {role} requires a label"))),
                ("", false) => None,
                (l, true) => Some(l.to_string()),
                (_, false) => return Err(err(line, format!("role {role} must not carry a label"))),
            };
            let raw = Path::new(&record[1]);
            if record[1].is_empty() {
                return Err(err(line, "empty path".into()));
            }
            entries.push(Entry {
                line,
                id,
                path: if raw.is_absolute() { raw.to_path_buf() } else { base.join(raw) },
                language: record[2].to_string(),
                role,
                label,
            });
        }
        let classes: Vec<String> = entries
            .iter()
            .filter(|e| e.role == Role::LabeledSource)
            .filter_map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        // Evaluation-only manifests are checked against a model's class list later.
        let eval_rows = entries.iter().filter(|e| e.role == Role::EvalTarget && !classes.is_empty());
        for e in eval_rows {
            let label = e.label.as_deref().unwrap_or_default();
            if !classes.iter().any(|c| c == label) {
                return Err(err(e.line, format!("label {label:?} is not a labeled source class")));
            }
        }
        Ok(Self {
            source: source.to_path_buf(),
            entries,
            classes,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SereError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let manifest = Self::parse(&text, base, path)?;
        for e in &manifest.entries {
            for p in [e.path.clone(), e.features_path()] {
                if !p.is_file() {
                    return Err(SereError::Parse {
                        path: path.to_path_buf(),
                        line: e.line,
                        message: format!("{} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(manifest)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Reads every utterance and derives its normalized dynamics.
    pub fn load_dataset(&self, epsilon: f64) -> Result<Dataset> {
        self.load_dataset_with_classes(&self.classes, epsilon)
    }

    /// Like [`Manifest::load_dataset`] with labels indexed into `classes`.
    pub fn load_dataset_with_classes(&self, classes: &[String], epsilon: f64) -> Result<Dataset> {
        let labeled = |role| -> Result<Vec<Labeled>> {
            self.with_role(role)
                .map(|e| {
                    let name = e.label.as_deref().unwrap_or_default();
                    let label = classes.iter().position(|c| c == name).ok_or_else(|| {
                        SereError::Compatibility(format!(
                            "{}:{}: label {name:?} is not one of [{}]",
                            self.source.display(),
                            e.line,
                            classes.join(", ")
                        ))
                    })?;
                    Ok(Labeled {
                        utterance: load_utterance(e, epsilon)?,
                        label,
                    })
                })
                .collect()
        };
        let unlabeled = |role| -> Result<Vec<Utterance>> {
            self.with_role(role).map(|e| load_utterance(e, epsilon)).collect()
        };
        Ok(Dataset {
            classes: classes.to_vec(),
            labeled_source: labeled(Role::LabeledSource)?,
            unlabeled_source: unlabeled(Role::UnlabeledSource)?,
            unlabeled_target: unlabeled(Role::UnlabeledTarget)?,
            eval_target: labeled(Role::EvalTarget)?,
        })
    }
}

pub fn load_utterance(entry: &Entry, epsilon: f64) -> Result<Utterance> {
    let embeddings = tensor_file::read(&entry.path)?;
    let features = StaticFeatures::new(tensor_file::read(&entry.features_path())?)?;
    let dynamics = normalized_dynamics(&features, embeddings.nrows(), epsilon)?;
    Utterance::new(entry.id.clone(), embeddings, dynamics)
}

/// Renders manifest rows with the fixed header. Paths are written as given.
pub fn render(rows: &[(String, PathBuf, String, Role, Option<String>)]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| SereError::Format(e.to_string());
    w.write_record(HEADER).map_err(csv_err)?;
    for (id, path, language, role, label) in rows {
        w.write_record([
            id.as_str(),
            &path.to_string_lossy(),
            language.as_str(),
            role.as_str(),
            label.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| SereError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}
