//! Synthetic two-language corpus with known class structure.
//!
//! Source embeddings are class-separated Gaussians; target embeddings are the
//! same distribution under a fixed random rotation plus noise. Every class
//! spikes one static feature column at a few random frames in both languages.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{StaticFeatures, NUM_STATIC};
use crate::error::Result;
use crate::idfe::normalized_dynamics;
use crate::manifest::{self, Role};
use crate::model::Utterance;
use crate::tensor_file;
use crate::trainer::{Dataset, Labeled};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub frames: usize,
    pub labeled_per_class: usize,
    pub unlabeled_source: usize,
    pub unlabeled_target: usize,
    pub eval_target: usize,
    /// Distance between class means in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Extra noise added to target embeddings after the rotation.
    pub target_noise: f64,
    pub bursts: usize,
    pub burst_height: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            embedding_dim: 8,
            frames: 16,
            labeled_per_class: 5,
            unlabeled_source: 40,
            unlabeled_target: 40,
            eval_target: 40,
            separation: 4.0,
            sigma: 0.1,
            target_noise: 0.02,
            bursts: 4,
            burst_height: 50.0,
            seed: 7,
        }
    }
}

// Static features in normalized units so f32 storage keeps the jitter.
const BASELINE: [f64; NUM_STATIC] = [1.0, 0.1, 0.5, 1.0];
const JITTER: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ToySample {
    pub id: String,
    pub language: &'static str,
    pub role: Role,
    pub label: usize,
    pub embeddings: Array2<f64>,
    pub features: StaticFeatures,
}

pub struct ToyCorpus {
    pub config: ToyConfig,
    pub classes: Vec<String>,
    pub samples: Vec<ToySample>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Haar-distributed orthogonal matrix.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)] * r[(j, j)].signum())
}

impl ToyCorpus {
    pub fn generate(config: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embedding_dim;
        // Means on scaled basis vectors: pairwise distance separation * sigma.
        let scale = config.separation * config.sigma / std::f64::consts::SQRT_2;
        let means: Vec<Array1<f64>> = (0..config.num_classes)
            .map(|c| Array1::from_shape_fn(d, |k| if k == c % d { scale } else { 0.0 }))
            .collect();
        let rotation = random_rotation(d, &mut rng);

        let mut samples = Vec::new();
        let mut push = |rng: &mut ChaCha8Rng, role: Role, index: usize, label: usize| {
            let target = matches!(role, Role::UnlabeledTarget | Role::EvalTarget);
            let mut h = Array2::from_shape_fn((config.frames, d), |(_, k)| {
                means[label][k] + config.sigma * normal(rng)
            });
            if target {
                h = h.dot(&rotation.t());
                h.mapv_inplace(|v| v + config.target_noise * normal(rng));
            }
            let mut f = Array2::from_shape_fn((config.frames, NUM_STATIC), |(_, k)| {
                BASELINE[k] + JITTER * normal(rng)
            });
            let column = label % NUM_STATIC;
            for _ in 0..config.bursts {
                let t = rng.random_range(1..config.frames);
                f[[t, column]] += config.burst_height;
            }
            // Stored as f32 on disk; keep memory and files identical.
            h.mapv_inplace(|v| v as f32 as f64);
            f.mapv_inplace(|v| v as f32 as f64);
            samples.push(ToySample {
                id: format!("{}_{index:03}", role.as_str()),
                language: if target { "tgt" } else { "src" },
                role,
                label,
                embeddings: h,
                features: StaticFeatures::new(f).expect("finite and four columns"),
            });
        };
        let c = config.num_classes;
        for i in 0..config.labeled_per_class * c {
            push(&mut rng, Role::LabeledSource, i, i % c);
        }
        for (role, n) in [
            (Role::UnlabeledSource, config.unlabeled_source),
            (Role::UnlabeledTarget, config.unlabeled_target),
            (Role::EvalTarget, config.eval_target),
        ] {
            for i in 0..n {
                push(&mut rng, role, i, i % c);
            }
        }
        Self {
            config: config.clone(),
            classes: (0..c).map(|k| format!("class{k}")).collect(),
            samples,
        }
    }

    pub fn dataset(&self, epsilon: f64) -> Result<Dataset> {
        let mut data = Dataset {
            classes: self.classes.clone(),
            labeled_source: Vec::new(),
            unlabeled_source: Vec::new(),
            unlabeled_target: Vec::new(),
            eval_target: Vec::new(),
        };
        for s in &self.samples {
            let dynamics = normalized_dynamics(&s.features, s.embeddings.nrows(), epsilon)?;
            let utterance = Utterance::new(s.id.clone(), s.embeddings.clone(), dynamics)?;
            match s.role {
                Role::LabeledSource => data.labeled_source.push(Labeled { utterance, label: s.label }),
                Role::UnlabeledSource => data.unlabeled_source.push(utterance),
                Role::UnlabeledTarget => data.unlabeled_target.push(utterance),
                Role::EvalTarget => data.eval_target.push(Labeled { utterance, label: s.label }),
            }
        }
        Ok(data)
    }

    /// Writes `<id>.sere` and `<id>.feat` per sample plus `manifest.csv`.
    /// Unlabeled rows carry no label. Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::SereError::io(dir, e))?;
        let mut rows = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let file = PathBuf::from(format!("{}.sere", s.id));
            tensor_file::write(&dir.join(&file), &s.embeddings)?;
            tensor_file::write(&dir.join(file.with_extension("feat")), s.features.values())?;
            rows.push((
                s.id.clone(),
                file,
                s.language.to_string(),
                s.role,
                s.role.is_labeled().then(|| self.classes[s.label].clone()),
            ));
        }
        let path = dir.join("manifest.csv");
        tensor_file::write_atomic(&path, manifest::render(&rows)?.as_bytes())?;
        Ok(path)
    }
}
