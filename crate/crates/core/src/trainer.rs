//! Semi-supervised training with Adam, stratified folds and UAR scoring.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SereError};
use crate::idfe::DEFAULT_EPSILON;
use crate::irf::IrfParams;
use crate::model::{SereModel, TricParams, Utterance};
use crate::tric::{self, Batch, LossTerms, Plan, PseudoLabel, SampleRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub disable_proto: bool,
    pub disable_dual: bool,
    pub shots_per_class: usize,
    /// Unlabeled samples per optimizer step; all of them when unset.
    pub batch_size: Option<usize>,
    /// Adds an identity-initialized linear head on the embeddings.
    pub projection: bool,
    /// Stabilizer of the delta normalization.
    pub epsilon: f64,
    /// Initial burst weights and temperature.
    pub irf: IrfParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            lambda1: 1.0,
            lambda2: 1.0,
            disable_proto: false,
            disable_dual: false,
            shots_per_class: 5,
            batch_size: None,
            projection: false,
            epsilon: DEFAULT_EPSILON,
            irf: IrfParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SereError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.shots_per_class == 0 {
            return bad("shots_per_class must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.epsilon > 0.0) {
            return bad("adam_eps and epsilon must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        self.tric().validate()?;
        self.irf.validate()
    }

    pub fn tric(&self) -> TricParams {
        TricParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            disable_proto: self.disable_proto,
            disable_dual: self.disable_dual,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SereError::Parse {
            path: "<config>".into(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(SereError::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// A labeled utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub utterance: Utterance,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub labeled_source: Vec<Labeled>,
    pub unlabeled_source: Vec<Utterance>,
    pub unlabeled_target: Vec<Utterance>,
    pub eval_target: Vec<Labeled>,
}

impl Dataset {
    pub fn embedding_dim(&self) -> Result<usize> {
        self.labeled_source
            .first()
            .map(|l| l.utterance.embeddings.ncols())
            .ok_or_else(|| SereError::Precondition("no labeled source samples".into()))
    }
}

/// Indices into `labels` of the first `shots` samples of each class, in the
/// order of a seeded permutation. Returned in ascending index order.
pub fn select_shots(labels: &[usize], num_classes: usize, shots: usize, seed: u64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![0; num_classes];
    let mut picked = Vec::with_capacity(shots * num_classes);
    for i in order {
        let y = labels[i];
        if y >= num_classes {
            return Err(SereError::Index { index: y, len: num_classes });
        }
        if taken[y] < shots {
            taken[y] += 1;
            picked.push(i);
        }
    }
    if let Some(c) = taken.iter().position(|&n| n < shots) {
        return Err(SereError::Precondition(format!(
            "class {} has {} labeled source samples, {shots} required",
            c, taken[c]
        )));
    }
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-batch objective at the start of the epoch, under its refreshed plan.
    pub loss: LossTerms,
    pub pseudo: Vec<PseudoLabel>,
    /// IRF of every pseudo-anchor and dual reference chosen this epoch.
    pub irf_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SereModel,
    pub epochs: Vec<EpochRecord>,
    /// Objective after the last update, under a refreshed plan.
    pub final_loss: LossTerms,
    /// Labeled source samples used for training, also the classification references.
    pub references: Vec<Labeled>,
    pub steps: usize,
}

fn check_finite(loss: &LossTerms, epoch: usize) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(SereError::Divergence { epoch, value: loss.total })
    }
}

pub fn initial_model(config: &TrainConfig, embedding_dim: usize) -> SereModel {
    let mut model = SereModel::new(embedding_dim);
    if config.projection {
        model = model.with_projection(embedding_dim);
    }
    model.irf = config.irf;
    model.tric = config.tric();
    model
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let num_classes = data.classes.len();
    let labels: Vec<usize> = data.labeled_source.iter().map(|l| l.label).collect();
    let shots = select_shots(&labels, num_classes, config.shots_per_class, config.seed)?;
    if data.unlabeled_source.is_empty() || data.unlabeled_target.is_empty() {
        return Err(SereError::Precondition(
            "unlabeled source and unlabeled target must be non-empty".into(),
        ));
    }
    let references: Vec<Labeled> = shots.iter().map(|&i| data.labeled_source[i].clone()).collect();
    let batch = Batch {
        labeled: references.iter().map(|l| l.utterance.clone()).collect(),
        labels: references.iter().map(|l| l.label).collect(),
        unlabeled_source: data.unlabeled_source.clone(),
        unlabeled_target: data.unlabeled_target.clone(),
        num_classes,
    };
    batch.validate()?;

    let mut model = initial_model(config, batch.embedding_dim());
    let mut adam = AdamState::new(model.num_parameters(), config.beta1, config.beta2, config.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unlabeled: Vec<SampleRef> = (0..batch.unlabeled_source.len())
        .map(SampleRef::Source)
        .chain((0..batch.unlabeled_target.len()).map(SampleRef::Target))
        .collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for epoch in 0..config.epochs {
        let plan = tric::make_plan(&batch, &model)?;
        let full = tric::evaluate(&batch, &model, &plan, None, config.batch_size.is_none())?;
        check_finite(&full.loss, epoch)?;
        records.push(EpochRecord {
            epoch,
            loss: full.loss,
            pseudo: plan.pseudo.clone(),
            irf_values: plan
                .pseudo
                .iter()
                .map(|p| p.irf)
                .chain(plan.pairs.iter().map(|p| p.irf))
                .collect(),
        });
        match config.batch_size {
            None => {
                let grad = full.gradient.expect("requested").to_vec();
                apply(&mut model, &grad, &mut adam, config.learning_rate)?;
                steps += 1;
            }
            Some(size) => {
                let mut order = unlabeled.clone();
                order.shuffle(&mut rng);
                for chunk in order.chunks(size) {
                    let sub: Plan = plan.subset(chunk);
                    let ev = tric::evaluate(&batch, &model, &sub, None, true)?;
                    check_finite(&ev.loss, epoch)?;
                    let grad = ev.gradient.expect("requested").to_vec();
                    apply(&mut model, &grad, &mut adam, config.learning_rate)?;
                    steps += 1;
                }
            }
        }
    }

    let plan = tric::make_plan(&batch, &model)?;
    let last = tric::evaluate(&batch, &model, &plan, None, false)?;
    check_finite(&last.loss, config.epochs)?;
    model.prototypes = Some(last.prototypes);
    Ok(TrainOutcome {
        model,
        epochs: records,
        final_loss: last.loss,
        references,
        steps,
    })
}

fn apply(model: &mut SereModel, grad: &[f64], adam: &mut AdamState, lr: f64) -> Result<()> {
    let mut params = model.parameters();
    adam_step(&mut params, grad, adam, lr)?;
    model.set_parameters(&params)?;
    model.clamp_constraints();
    Ok(())
}

/// Stratified partition of sample indices into `k` folds. Each class is
/// shuffled with the seed and dealt round-robin.
pub fn make_folds(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(SereError::Precondition(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(SereError::Index { index: y, len: num_classes });
        }
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(SereError::Stratification { class, count: members.len(), k });
        }
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fold: usize,
    /// `None` for classes without true samples.
    pub recall: Vec<Option<f64>>,
    pub uar: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Array2<usize>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize, fold: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(SereError::Precondition("empty evaluation set".into()));
        }
        if truth.len() != predicted.len() {
            return Err(SereError::Shape(format!(
                "{} labels, {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = Array2::zeros((num_classes, num_classes));
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(SereError::Index { index: t.max(p), len: num_classes });
            }
            confusion[[t, p]] += 1;
        }
        let recall: Vec<Option<f64>> = (0..num_classes)
            .map(|c| {
                let n: usize = confusion.row(c).sum();
                (n > 0).then(|| confusion[[c, c]] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = recall.iter().flatten().copied().collect();
        let uar = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self { fold, recall, uar, confusion })
    }
}

/// Classifies every sample against the references and scores the predictions.
pub fn evaluate(model: &SereModel, samples: &[Labeled], references: &[Utterance], fold: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(SereError::Precondition("empty evaluation set".into()));
    }
    let num_classes = model
        .prototypes
        .as_ref()
        .ok_or_else(|| SereError::Precondition("model has no prototypes".into()))?
        .num_classes();
    let predicted: Vec<usize> = samples
        .iter()
        .map(|s| tric::classify(&s.utterance, model, references))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    EvalReport::from_predictions(&truth, &predicted, num_classes, fold)
}

/// Scores a trained model on each stratified fold of the evaluation set.
pub fn evaluate_folds(
    model: &SereModel,
    samples: &[Labeled],
    references: &[Utterance],
    k: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if samples.is_empty() {
        return Err(SereError::Precondition("empty evaluation set".into()));
    }
    if k == 1 {
        return Ok(vec![evaluate(model, samples, references, 0)?]);
    }
    let c = model.prototypes.as_ref().map_or(0, |p| p.num_classes());
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    make_folds(&labels, c, k, seed)?
        .into_iter()
        .enumerate()
        .map(|(f, idx)| {
            let part: Vec<Labeled> = idx.iter().map(|&i| samples[i].clone()).collect();
            evaluate(model, &part, references, f)
        })
        .collect()
}

/// Trains once per fold of the evaluation set. The held-out fold is scored;
/// the remaining folds join the unlabeled target pool without labels.
pub fn cross_validate(config: &TrainConfig, data: &Dataset, k: usize) -> Result<Vec<EvalReport>> {
    let labels: Vec<usize> = data.eval_target.iter().map(|s| s.label).collect();
    let folds = make_folds(&labels, data.classes.len(), k, config.seed)?;
    folds
        .iter()
        .enumerate()
        .map(|(f, held)| {
            let mut fold_data = data.clone();
            fold_data.eval_target = held.iter().map(|&i| data.eval_target[i].clone()).collect();
            for (g, other) in folds.iter().enumerate() {
                if g != f {
                    fold_data
                        .unlabeled_target
                        .extend(other.iter().map(|&i| data.eval_target[i].utterance.clone()));
                }
            }
            let outcome = train(config, &fold_data)?;
            let refs: Vec<Utterance> = outcome.references.iter().map(|l| l.utterance.clone()).collect();
            evaluate(&outcome.model, &fold_data.eval_target, &refs, f)
        })
        .collect()
}

pub fn mean_uar(reports: &[EvalReport]) -> f64 {
    reports.iter().map(|r| r.uar).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        s.m = vec![0.5, 0.0];
        s.v = vec![0.25, 0.0];
        s.step = 3;
        let before = p.clone();
        // Moments alone still move the parameter; with empty moments nothing moves.
        let mut q = vec![0.3, -1.2];
        let mut fresh = AdamState::new(2, 0.9, 0.999, 1e-8);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, 1e-3).unwrap();
        assert_eq!(q, before);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        assert_eq!(s.m[0], 0.9 * 0.5);
        assert_eq!(s.v[0], 0.999 * 0.25);
        assert_eq!(p[1], before[1]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        for g in [3.7, -0.02, 1e-3] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1, 0.9, 0.999, 1e-8);
            adam_step(&mut p, &[g], &mut s, 1e-2).unwrap();
            assert!((p[0] - (1.0 - 1e-2 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let (g1, g2) = (0.4, -1.3);
        let mut p = vec![2.0];
        let mut s = AdamState::new(1, b1, b2, eps);
        adam_step(&mut p, &[g1], &mut s, lr).unwrap();
        adam_step(&mut p, &[g2], &mut s, lr).unwrap();

        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let x1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        assert!(adam_step(&mut [0.0], &[0.0], &mut s, 0.1).is_err());
    }

    #[test]
    fn folds_of_balanced_classes() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let folds = make_folds(&labels, 2, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.len(), 2);
            assert_eq!(labels[f[0]] + labels[f[1]], 1);
        }
        assert_eq!(folds, make_folds(&labels, 2, 5, 3).unwrap());
    }

    #[test]
    fn folds_need_k_per_class() {
        let labels = [0, 0, 0, 1, 1, 1, 1, 1];
        assert!(matches!(
            make_folds(&labels, 2, 5, 0),
            Err(SereError::Stratification { class: 0, count: 3, k: 5 })
        ));
    }

    #[test]
    fn report_cases() {
        let r = EvalReport::from_predictions(&[0, 1, 2], &[0, 1, 2], 3, 0).unwrap();
        assert_eq!(r.uar, 1.0);
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, 0).unwrap();
        assert_eq!(r.recall, vec![Some(0.5), Some(1.0)]);
        assert_eq!(r.uar, 0.75);
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[1, 1, 1, 1], 2, 0).unwrap();
        assert_eq!(r.uar, 0.5);
        let r = EvalReport::from_predictions(&[0, 0], &[0, 1], 3, 2).unwrap();
        assert_eq!(r.recall, vec![Some(0.5), None, None]);
        assert_eq!(r.uar, 0.5);
        assert!(EvalReport::from_predictions(&[], &[], 2, 0).is_err());
    }

    #[test]
    fn shots_are_seeded_and_per_class() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 2, 2];
        let a = select_shots(&labels, 3, 2, 4).unwrap();
        assert_eq!(a, select_shots(&labels, 3, 2, 4).unwrap());
        assert_eq!(a.len(), 6);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
        assert!(select_shots(&labels, 3, 3, 4).is_err());
    }

    #[test]
    fn config_defaults_and_rejections() {
        let c = TrainConfig::from_json("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        let c = TrainConfig::from_json(r#"{"epochs": 3, "disable_dual": true}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.disable_dual);
        assert!(matches!(
            TrainConfig::from_json("{\n\"epoch\": 3}"),
            Err(SereError::Parse { line: 2, .. })
        ));
        let c = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
        let truth = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred = (0..n).map(|_| rng.random_range(0..c)).collect();
        (truth, pred)
    }

    proptest! {
        #[test]
        fn duplicating_a_class_keeps_uar(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut truth, mut pred) = random_set(&mut rng, 30, 3);
            let before = EvalReport::from_predictions(&truth, &pred, 3, 0).unwrap();
            let extra: Vec<(usize, usize)> = truth.iter().zip(&pred).filter(|(t, _)| **t == 1).map(|(t, p)| (*t, *p)).collect();
            for (t, p) in extra {
                truth.push(t);
                pred.push(p);
            }
            let after = EvalReport::from_predictions(&truth, &pred, 3, 0).unwrap();
            prop_assert_eq!(before.recall, after.recall);
            prop_assert!((before.uar - after.uar).abs() < 1e-12);
        }

        #[test]
        fn folds_partition_the_set(seed in any::<u64>(), k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..40).map(|i| if i < 4 * k { i % 4 } else { rng.random_range(0..4) }).collect();
            let folds = make_folds(&labels, 4, k, seed).unwrap();
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..40).collect::<Vec<_>>());
            for c in 0..4 {
                let sizes: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }
}
