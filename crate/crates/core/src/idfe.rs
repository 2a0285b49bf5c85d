//! Instantaneous dynamic features: frame deltas of the static features,
//! normalized by their mean absolute variation, scaled by a sigmoid gate
//! driven by the utterance embedding, then appended to the embedding.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dsp::{StaticFeatures, NUM_STATIC};
use crate::error::{Result, SereError};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Context-aware embedding sequence of one utterance, `T x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub utterance_id: String,
    pub language: String,
    pub encoder: String,
    pub values: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn new(utterance_id: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SereError::Validation("non-finite embedding value".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            language: String::new(),
            encoder: String::new(),
            values,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfeParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl IdfeParams {
    /// Neutral gate: `w = 0, b = 0`, so every frame is weighted 0.5.
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFeatures {
    pub deltas: Array2<f64>,
    pub normalized: Array2<f64>,
    pub gate: Array1<f64>,
    /// Gated dynamics `r(t) = gate(t) * normalized(t)`.
    pub r: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedRepresentation {
    /// `T x (d + 4)`: embedding columns followed by the four gated dynamics.
    pub u: Array2<f64>,
    /// Burst intensity per frame; empty until computed by [`crate::irf`].
    pub burst: Option<Array1<f64>>,
}

impl EnhancedRepresentation {
    pub fn num_frames(&self) -> usize {
        self.u.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.u.ncols() - NUM_STATIC
    }

    pub fn dynamics(&self) -> ArrayView2<'_, f64> {
        self.u.slice(ndarray::s![.., self.embedding_dim()..])
    }
}

/// `Δf(t) = f(t) - f(t-1)`, with the first frame's delta set to zero.
pub fn frame_deltas(features: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(features.raw_dim());
    for t in 1..features.nrows() {
        let d = &features.row(t) - &features.row(t - 1);
        out.row_mut(t).assign(&d);
    }
    out
}

/// Mean absolute value of each column.
pub fn mean_abs_variation(deltas: &Array2<f64>) -> Array1<f64> {
    let t = deltas.nrows().max(1) as f64;
    deltas.map_axis(Axis(0), |col| col.iter().map(|v| v.abs()).sum::<f64>() / t)
}

pub fn normalize_deltas(deltas: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    if !(epsilon > 0.0) {
        return Err(SereError::Precondition(format!("epsilon must be > 0, got {epsilon}")));
    }
    let scale = mean_abs_variation(deltas).mapv(|v| v + epsilon);
    Ok(deltas / &scale)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn context_gate(h: &Array2<f64>, params: &IdfeParams) -> Result<Array1<f64>> {
    if params.w.len() != h.ncols() {
        return Err(SereError::Shape(format!(
            "gate weights have length {}, embeddings have dimension {}",
            params.w.len(),
            h.ncols()
        )));
    }
    let w = Array1::from(params.w.clone());
    Ok(h.dot(&w).mapv(|x| sigmoid(x + params.b)))
}

pub fn fuse(h: &Array2<f64>, r: &Array2<f64>) -> Result<EnhancedRepresentation> {
    if h.nrows() != r.nrows() {
        return Err(SereError::Shape(format!(
            "embedding has {} frames, dynamics have {}",
            h.nrows(),
            r.nrows()
        )));
    }
    if r.ncols() != NUM_STATIC {
        return Err(SereError::Shape(format!("dynamics need {NUM_STATIC} columns")));
    }
    Ok(EnhancedRepresentation {
        u: concatenate![Axis(1), h.view(), r.view()],
        burst: None,
    })
}

/// Linearly resamples rows of `x` along time to `frames` rows. Identity when
/// the row count already matches.
pub fn resample_frames(x: &Array2<f64>, frames: usize) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(SereError::Precondition("cannot resample an empty sequence".into()));
    }
    if n == frames {
        return Ok(x.clone());
    }
    let mut out = Array2::zeros((frames, x.ncols()));
    for t in 0..frames {
        let pos = if frames == 1 {
            0.0
        } else {
            (t * (n - 1)) as f64 / (frames - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        let row = &x.row(lo) * (1.0 - frac) + &x.row(hi) * frac;
        out.row_mut(t).assign(&row);
    }
    Ok(out)
}

/// Static features aligned to the embedding's frame count, differenced and
/// normalized. Depends on no learnable parameter.
pub fn normalized_dynamics(
    features: &StaticFeatures,
    frames: usize,
    epsilon: f64,
) -> Result<Array2<f64>> {
    let aligned = resample_frames(features.values(), frames)?;
    normalize_deltas(&frame_deltas(&aligned), epsilon)
}

pub fn run_idfe(
    features: &StaticFeatures,
    h: &EmbeddingSequence,
    params: &IdfeParams,
    epsilon: f64,
) -> Result<(DynamicFeatures, EnhancedRepresentation)> {
    let aligned = resample_frames(features.values(), h.num_frames())?;
    let deltas = frame_deltas(&aligned);
    let normalized = normalize_deltas(&deltas, epsilon)?;
    let gate = context_gate(&h.values, params)?;
    let r = &normalized * &gate.clone().insert_axis(Axis(1));
    let enhanced = fuse(&h.values, &r)?;
    Ok((
        DynamicFeatures {
            deltas,
            normalized,
            gate,
            r,
        },
        enhanced,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn deltas_cases() {
        let f = array![[1.0, 5.0, 0.0, 0.0], [3.0, 5.0, 0.0, 0.0], [0.0, 5.0, 0.0, 0.0]];
        let d = frame_deltas(&f);
        assert_eq!(d.column(0).to_vec(), vec![0.0, 2.0, -3.0]);
        assert_eq!(d.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(frame_deltas(&array![[7.0, 1.0, 2.0, 3.0]]), Array2::<f64>::zeros((1, 4)));
    }

    #[test]
    fn normalization_cases() {
        let zero = Array2::<f64>::zeros((5, 4));
        assert_eq!(normalize_deltas(&zero, 1e-3).unwrap(), zero);

        let d = array![[2.0, 0.0, 0.0, 0.0], [-2.0, 0.0, 0.0, 0.0]];
        let n = normalize_deltas(&d, 1e-3).unwrap();
        assert!((n[[0, 0]] - 2.0 / 2.001).abs() < 1e-15);
        assert!((n[[1, 0]] + 2.0 / 2.001).abs() < 1e-15);
        assert!((n[[0, 0]] - 0.99950).abs() < 1e-5);

        let c = -0.7;
        let n = normalize_deltas(&array![[c, 0.0, 0.0, 0.0]], 1e-3).unwrap();
        assert!((n[[0, 0]] - c / (c.abs() + 1e-3)).abs() < 1e-15);

        assert!(normalize_deltas(&d, 0.0).is_err());
    }

    #[test]
    fn gate_cases() {
        let h = array![[1.0, -2.0], [0.3, 0.4]];
        let g = context_gate(&h, &IdfeParams::zeros(2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.5));

        let p = IdfeParams { w: vec![1.0, 0.0], b: 0.0 };
        let g = context_gate(&array![[1.0, 9.0]], &p).unwrap();
        assert!((g[0] - 0.731_058_578_630_004_9).abs() < 1e-12);

        let p = IdfeParams { w: vec![0.0, 0.0], b: 20.0 };
        let g = context_gate(&h, &p).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-8 && v < 1.0));

        assert!(matches!(context_gate(&h, &IdfeParams::zeros(3)), Err(SereError::Shape(_))));
    }

    #[test]
    fn fuse_cases() {
        let u = fuse(&array![[1.0, 2.0]], &Array2::zeros((1, 4))).unwrap();
        assert_eq!(u.u, array![[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!(matches!(
            fuse(&Array2::zeros((3, 2)), &Array2::zeros((2, 4))),
            Err(SereError::Shape(_))
        ));
    }

    #[test]
    fn resampling() {
        let x = array![[0.0, 0.0, 0.0, 0.0], [2.0, 4.0, 6.0, 8.0]];
        let y = resample_frames(&x, 3).unwrap();
        assert_eq!(y.row(1).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resample_frames(&x, 2).unwrap(), x);
        assert_eq!(resample_frames(&x, 1).unwrap().row(0), x.row(0));
    }

    fn random_instance(seed: u64) -> (StaticFeatures, EmbeddingSequence, IdfeParams) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(2..10);
        let d = rng.random_range(1..6);
        let f = Array2::from_shape_fn((t, 4), |_| rng.random_range(-3.0..3.0));
        let h = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
        let p = IdfeParams {
            w: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: rng.random_range(-1.0..1.0),
        };
        (
            StaticFeatures::new(f).unwrap(),
            EmbeddingSequence::new("x", h).unwrap(),
            p,
        )
    }

    #[test]
    fn silence_has_no_dynamics() {
        let (_, h, p) = random_instance(3);
        let silent = StaticFeatures::new(Array2::zeros((h.num_frames(), 4))).unwrap();
        let (dy, u) = run_idfe(&silent, &h, &p, DEFAULT_EPSILON).unwrap();
        assert!(dy.r.iter().all(|&v| v == 0.0));
        assert_eq!(u.u.slice(s![.., ..h.dim()]), h.values);
        assert!(u.dynamics().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neutral_gate_halves_normalized_deltas() {
        let (f, h, _) = random_instance(5);
        let (dy, _) = run_idfe(&f, &h, &IdfeParams::zeros(h.dim()), DEFAULT_EPSILON).unwrap();
        assert_eq!(dy.r, dy.normalized.mapv(|v| 0.5 * v));
    }

    #[test]
    fn pipeline_matches_naive_composition() {
        for seed in 0..20 {
            let (f, h, p) = random_instance(seed);
            let (dy, u) = run_idfe(&f, &h, &p, DEFAULT_EPSILON).unwrap();
            let (t, d) = h.values.dim();
            let fv = f.values();
            for i in 0..4 {
                let deltas: Vec<f64> = (0..t)
                    .map(|k| if k == 0 { 0.0 } else { fv[[k, i]] - fv[[k - 1, i]] })
                    .collect();
                let var = deltas.iter().map(|v| v.abs()).sum::<f64>() / t as f64;
                for k in 0..t {
                    let z: f64 = (0..d).map(|j| p.w[j] * h.values[[k, j]]).sum::<f64>() + p.b;
                    let gate = 1.0 / (1.0 + (-z).exp());
                    let want = gate * deltas[k] / (var + DEFAULT_EPSILON);
                    assert!((dy.r[[k, i]] - want).abs() < 1e-12);
                    assert_eq!(u.u[[k, d + i]], dy.r[[k, i]]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mean_abs_normalized_is_var_over_var_plus_eps(col in proptest::collection::vec(-100.0f64..100.0, 1..50)) {
            let d = Array2::from_shape_fn((col.len(), 4), |(t, _)| col[t]);
            let n = normalize_deltas(&d, DEFAULT_EPSILON).unwrap();
            let var = col.iter().map(|v| v.abs()).sum::<f64>() / col.len() as f64;
            let mean_abs = n.column(0).iter().map(|v| v.abs()).sum::<f64>() / col.len() as f64;
            prop_assert!((mean_abs - var / (var + DEFAULT_EPSILON)).abs() <= 1e-9);
            prop_assert!(mean_abs <= 1.0);
            let bound = col.iter().fold(0.0f64, |m, v| m.max(v.abs())) / (var + DEFAULT_EPSILON);
            prop_assert!(n.column(0).iter().all(|v| v.abs() <= bound + 1e-12));
        }

        #[test]
        fn normalization_nearly_scale_invariant(col in proptest::collection::vec(1.0f64..10.0, 2..20), k in 1.0f64..100.0) {
            let d = Array2::from_shape_fn((col.len(), 4), |(t, _)| col[t]);
            let a = normalize_deltas(&d, DEFAULT_EPSILON).unwrap();
            let b = normalize_deltas(&d.mapv(|v| k * v), DEFAULT_EPSILON).unwrap();
            let var = col.iter().map(|v| v.abs()).sum::<f64>() / col.len() as f64;
            for (x, y) in a.column(0).iter().zip(b.column(0).iter()) {
                prop_assert!((x - y).abs() <= DEFAULT_EPSILON * x.abs() / var + 1e-12);
            }
        }

        #[test]
        fn gates_strictly_inside_unit_interval(seed in any::<u64>(), b in -30.0f64..30.0) {
            let (_, h, mut p) = random_instance(seed);
            p.b = b;
            let g = context_gate(&h.values, &p).unwrap();
            prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn fuse_then_project_recovers_parts(seed in any::<u64>()) {
            let (f, h, p) = random_instance(seed);
            let (dy, u) = run_idfe(&f, &h, &p, DEFAULT_EPSILON).unwrap();
            prop_assert_eq!(u.u.slice(s![.., ..h.dim()]).to_owned(), h.values.clone());
            prop_assert_eq!(u.dynamics().to_owned(), dy.r);
        }
    }

    #[test]
    fn dynamics_vanish_as_bias_goes_negative() {
        let (f, h, mut p) = random_instance(11);
        p.b = -60.0;
        let (dy, _) = run_idfe(&f, &h, &p, DEFAULT_EPSILON).unwrap();
        assert!(dy.r.iter().all(|v| v.abs() < 1e-20));
    }
}
