use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SereError};
use crate::idfe::{sigmoid, IdfeParams};
use crate::irf::IrfParams;
use crate::tric::PrototypeSet;

/// Loss weights and ablation switches of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TricParams {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub disable_proto: bool,
    #[serde(default)]
    pub disable_dual: bool,
}

impl Default for TricParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            disable_proto: false,
            disable_dual: false,
        }
    }
}

impl TricParams {
    pub fn proto_weight(&self) -> f64 {
        if self.disable_proto {
            0.0
        } else {
            self.lambda1
        }
    }

    pub fn dual_weight(&self) -> f64 {
        if self.disable_dual {
            0.0
        } else {
            self.lambda2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(SereError::Config(format!(
                "loss weights must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Every learnable parameter plus the prototype set fitted at the end of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SereModel {
    pub idfe: IdfeParams,
    pub irf: IrfParams,
    pub tric: TricParams,
    /// Optional linear head applied to embeddings, `out x in`.
    #[serde(skip)]
    pub projection: Option<Array2<f64>>,
    #[serde(skip)]
    pub prototypes: Option<PrototypeSet>,
}

impl SereModel {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            idfe: IdfeParams::zeros(embedding_dim),
            irf: IrfParams::default(),
            tric: TricParams::default(),
            projection: None,
            prototypes: None,
        }
    }

    /// Adds an identity-initialized projection head.
    pub fn with_projection(mut self, input_dim: usize) -> Self {
        let out = self.idfe.w.len();
        self.projection = Some(Array2::from_shape_fn((out, input_dim), |(i, j)| {
            if i == j {
                1.0
            } else {
                0.0
            }
        }));
        self
    }

    pub fn input_dim(&self) -> usize {
        self.projection
            .as_ref()
            .map_or(self.idfe.w.len(), |p| p.ncols())
    }

    pub fn embedding_dim(&self) -> usize {
        self.idfe.w.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.idfe.w.len() + 5 + self.projection.as_ref().map_or(0, |p| p.len())
    }

    /// Flattened as `[w.., b, alpha, beta, gamma, delta, projection (row-major)..]`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = self.idfe.w.clone();
        out.extend([
            self.idfe.b,
            self.irf.alpha,
            self.irf.beta,
            self.irf.gamma,
            self.irf.delta,
        ]);
        if let Some(p) = &self.projection {
            out.extend(p.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(SereError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        let d = self.idfe.w.len();
        self.idfe.w.copy_from_slice(&values[..d]);
        self.idfe.b = values[d];
        self.irf.alpha = values[d + 1];
        self.irf.beta = values[d + 2];
        self.irf.gamma = values[d + 3];
        self.irf.delta = values[d + 4];
        if let Some(p) = &mut self.projection {
            for (dst, src) in p.iter_mut().zip(&values[d + 5..]) {
                *dst = *src;
            }
        }
        Ok(())
    }

    /// Keeps intensity weights non-negative and the temperature positive.
    pub fn clamp_constraints(&mut self) {
        self.irf.alpha = self.irf.alpha.max(0.0);
        self.irf.beta = self.irf.beta.max(0.0);
        self.irf.gamma = self.irf.gamma.max(0.0);
        self.irf.delta = self.irf.delta.max(MIN_TEMPERATURE);
    }

    /// Runs the gated dynamic feature extractor for one utterance.
    pub fn encode(&self, utt: &Utterance) -> Result<Encoded> {
        let h = match &self.projection {
            Some(p) => {
                if p.ncols() != utt.embeddings.ncols() {
                    return Err(SereError::Shape(format!(
                        "projection expects dimension {}, utterance {} has {}",
                        p.ncols(),
                        utt.id,
                        utt.embeddings.ncols()
                    )));
                }
                utt.embeddings.dot(&p.t())
            }
            None => utt.embeddings.clone(),
        };
        if h.ncols() != self.idfe.w.len() {
            return Err(SereError::Shape(format!(
                "gate expects dimension {}, utterance {} has {}",
                self.idfe.w.len(),
                utt.id,
                h.ncols()
            )));
        }
        let w = Array1::from(self.idfe.w.clone());
        let gate = h.dot(&w).mapv(|x| sigmoid(x + self.idfe.b));
        let base: Array1<f64> = utt
            .dynamics
            .rows()
            .into_iter()
            .map(|row| self.irf.weigh(row))
            .collect();
        let burst = &gate * &base;
        let r = &utt.dynamics * &gate.view().insert_axis(Axis(1));
        let u = concatenate![Axis(1), h.view(), r.view()];
        Ok(Encoded {
            h,
            gate,
            base,
            u,
            burst,
        })
    }
}

pub const MIN_TEMPERATURE: f64 = 1e-8;

/// An utterance reduced to what training consumes: its (frozen) embedding
/// sequence and its normalized frame deltas, which carry no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub embeddings: Array2<f64>,
    pub dynamics: Array2<f64>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, embeddings: Array2<f64>, dynamics: Array2<f64>) -> Result<Self> {
        let id = id.into();
        if embeddings.nrows() == 0 {
            return Err(SereError::Precondition(format!("utterance {id} has no frames")));
        }
        if dynamics.dim() != (embeddings.nrows(), 4) {
            return Err(SereError::Shape(format!(
                "utterance {id}: dynamics are {:?}, expected ({}, 4)",
                dynamics.dim(),
                embeddings.nrows()
            )));
        }
        if embeddings.iter().chain(dynamics.iter()).any(|v| !v.is_finite()) {
            return Err(SereError::Validation(format!("utterance {id} has non-finite values")));
        }
        Ok(Self {
            id,
            embeddings,
            dynamics,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.embeddings.nrows()
    }
}

/// Forward quantities of one utterance under a given model.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Embeddings after the optional projection head.
    pub h: Array2<f64>,
    pub gate: Array1<f64>,
    /// Ungated burst weight `alpha|n1| + beta|n2| + gamma(|n3| + |n4|)`.
    pub base: Array1<f64>,
    pub u: Array2<f64>,
    pub burst: Array1<f64>,
}

impl Encoded {
    pub fn pooled(&self) -> Array1<f64> {
        self.u.mean_axis(Axis(0)).expect("at least one frame")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parameter_round_trip() {
        let mut m = SereModel::new(3).with_projection(2);
        let mut p = m.parameters();
        assert_eq!(p.len(), 3 + 5 + 6);
        for (i, v) in p.iter_mut().enumerate() {
            *v = i as f64;
        }
        m.set_parameters(&p).unwrap();
        assert_eq!(m.parameters(), p);
        assert_eq!(m.irf.delta, 7.0);
        assert!(m.set_parameters(&p[1..]).is_err());
    }

    #[test]
    fn encode_matches_idfe_pipeline() {
        let utt = Utterance::new(
            "u",
            array![[1.0, 0.5], [0.0, -1.0]],
            array![[0.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.5, 0.25]],
        )
        .unwrap();
        let mut m = SereModel::new(2);
        m.idfe.w = vec![0.3, -0.2];
        m.idfe.b = 0.1;
        let e = m.encode(&utt).unwrap();
        let g1 = sigmoid(0.2 + 0.1);
        assert!((e.gate[1] - g1).abs() < 1e-15);
        assert!((e.u[[1, 3]] + 2.0 * g1).abs() < 1e-15);
        assert!((e.burst[1] - g1 * (1.0 + 2.0 + 0.75)).abs() < 1e-12);
        assert_eq!(e.u.row(0).to_vec()[..2], [1.0, 0.5]);
    }

    #[test]
    fn clamp_keeps_constraints() {
        let mut m = SereModel::new(1);
        m.irf.alpha = -0.1;
        m.irf.delta = -3.0;
        m.clamp_constraints();
        assert_eq!(m.irf.alpha, 0.0);
        assert_eq!(m.irf.delta, MIN_TEMPERATURE);
    }
}
