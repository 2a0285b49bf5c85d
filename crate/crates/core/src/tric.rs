//! Prototype anchors, IRF-driven pseudo-anchors and the three-way training
//! objective (prototype term plus dual instance term), with its analytic
//! gradient under frozen discrete choices.
//!
//! All argmax decisions (frame alignments, pseudo-anchors, dual references)
//! are treated as constants when differentiating.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Result, SereError};
use crate::idfe::EnhancedRepresentation;
use crate::irf::{self, IrfParams, ResonanceResult};
use crate::model::{Encoded, SereModel, Utterance};

/// Frame-mean of an enhanced representation.
pub fn pool_semantic(u: &Array2<f64>) -> Result<Array1<f64>> {
    u.mean_axis(Axis(0))
        .ok_or_else(|| SereError::Precondition("cannot pool an empty sequence".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub initial: Array2<f64>,
    pub enhanced: Array2<f64>,
    pub labeled_counts: Vec<usize>,
    pub pseudo_counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.enhanced.nrows()
    }
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<Vec<usize>> {
    if labels.len() != rows {
        return Err(SereError::Shape(format!(
            "{} labels for {rows} embeddings",
            labels.len()
        )));
    }
    let mut counts = vec![0; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(SereError::Index {
                index: y,
                len: num_classes,
            });
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(SereError::MissingClass(c));
    }
    Ok(counts)
}

/// Per-class mean of labeled semantic embeddings (one row per sample).
pub fn initial_prototypes(z: &Array2<f64>, labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let counts = check_labels(labels, z.nrows(), num_classes)?;
    let mut out = Array2::zeros((num_classes, z.ncols()));
    for (row, &y) in z.rows().into_iter().zip(labels) {
        out.row_mut(y).scaled_add(1.0, &row);
    }
    for (mut row, n) in out.rows_mut().into_iter().zip(counts) {
        row /= n as f64;
    }
    Ok(out)
}

/// Enhanced anchors: labeled embeddings pooled with the embeddings of the
/// pseudo-anchors chosen for each unlabeled sample. `pseudo` holds
/// `(pseudo_label, anchor_embedding)` per unlabeled sample.
pub fn enhanced_prototypes(
    z: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    pseudo: &[(usize, ArrayView1<'_, f64>)],
) -> Result<PrototypeSet> {
    let labeled_counts = check_labels(labels, z.nrows(), num_classes)?;
    let initial = initial_prototypes(z, labels, num_classes)?;
    let mut sums = Array2::zeros((num_classes, z.ncols()));
    for (row, &y) in z.rows().into_iter().zip(labels) {
        sums.row_mut(y).scaled_add(1.0, &row);
    }
    let mut pseudo_counts = vec![0; num_classes];
    for (y, anchor) in pseudo {
        if *y >= num_classes {
            return Err(SereError::Index {
                index: *y,
                len: num_classes,
            });
        }
        if anchor.len() != z.ncols() {
            return Err(SereError::Shape("anchor embedding dimension differs".into()));
        }
        sums.row_mut(*y).scaled_add(1.0, anchor);
        pseudo_counts[*y] += 1;
    }
    for (c, mut row) in sums.rows_mut().into_iter().enumerate() {
        row /= (labeled_counts[c] + pseudo_counts[c]) as f64;
    }
    Ok(PrototypeSet {
        initial,
        enhanced: sums,
        labeled_counts,
        pseudo_counts,
    })
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Prototype term. `targets` holds `(pseudo_label, resonance-aware vector)`
/// for each pseudo-labeled sample; classes without pseudo-labeled samples
/// contribute only their labeled term.
pub fn proto_loss(
    z: &Array2<f64>,
    labels: &[usize],
    targets: &[(usize, ArrayView1<'_, f64>)],
    prototypes: &PrototypeSet,
) -> Result<f64> {
    let c = prototypes.num_classes();
    let counts = check_labels(labels, z.nrows(), c)?;
    let mut labeled = vec![0.0; c];
    for (row, &y) in z.rows().into_iter().zip(labels) {
        labeled[y] += sq_dist(row, prototypes.enhanced.row(y));
    }
    let mut pseudo = vec![0.0; c];
    let mut pseudo_counts = vec![0usize; c];
    for (y, v) in targets {
        if *y >= c {
            return Err(SereError::Index { index: *y, len: c });
        }
        pseudo[*y] += sq_dist(*v, prototypes.enhanced.row(*y));
        pseudo_counts[*y] += 1;
    }
    let total: f64 = (0..c)
        .map(|k| {
            let mut term = labeled[k] / counts[k] as f64;
            if pseudo_counts[k] > 0 {
                term += pseudo[k] / pseudo_counts[k] as f64;
            }
            term
        })
        .sum();
    Ok(total / c as f64)
}

#[derive(Debug, Clone)]
pub struct DualTerm<'a> {
    pub irf: f64,
    pub v_unlabeled: ArrayView1<'a, f64>,
    pub v_reference: ArrayView1<'a, f64>,
}

/// Mean of `(1 - IRF) * |v_u - v_ref|^2` over the pairs; 0 for no pairs.
pub fn dual_loss(pairs: &[DualTerm<'_>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| (1.0 - p.irf) * sq_dist(p.v_unlabeled, p.v_reference))
        .sum::<f64>()
        / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoAnchor {
    pub anchor: usize,
    pub label: usize,
    pub irf: f64,
}

/// Highest-IRF member of `pool` against `x` (rows = `x`). Ties go to the lowest index.
pub fn best_reference(
    x: &EnhancedRepresentation,
    pool: &[EnhancedRepresentation],
    params: &IrfParams,
) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(SereError::Pairing("reference pool is empty".into()));
    }
    let bx = irf::burst_of(x, params)?;
    let scores: Vec<f64> = pool
        .iter()
        .map(|r| {
            let br = irf::burst_of(r, params)?;
            Ok(irf::resonance_with_bursts(&x.u, &bx, &r.u, &br, params)?.irf)
        })
        .collect::<Result<_>>()?;
    Ok(argmax_first(&scores))
}

pub fn select_pseudo_anchor(
    x: &EnhancedRepresentation,
    labeled: &[EnhancedRepresentation],
    labels: &[usize],
    params: &IrfParams,
) -> Result<PseudoAnchor> {
    if labels.len() != labeled.len() {
        return Err(SereError::Shape("one label per labeled sample required".into()));
    }
    let (anchor, irf) = best_reference(x, labeled, params)?;
    Ok(PseudoAnchor {
        anchor,
        label: labels[anchor],
        irf,
    })
}

fn argmax_first(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

/// Index of the closest prototype row; ties go to the lowest class.
pub fn nearest_prototype(v: ArrayView1<'_, f64>, prototypes: &Array2<f64>) -> Result<usize> {
    if prototypes.nrows() == 0 {
        return Err(SereError::Precondition("empty prototype set".into()));
    }
    let dists: Vec<f64> = prototypes
        .rows()
        .into_iter()
        .map(|p| -sq_dist(v, p))
        .collect();
    Ok(argmax_first(&dists).0)
}

/// Labeled source samples plus the two unlabeled pools.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Vec<Utterance>,
    pub labels: Vec<usize>,
    pub unlabeled_source: Vec<Utterance>,
    pub unlabeled_target: Vec<Utterance>,
    pub num_classes: usize,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(SereError::Precondition("no labeled samples".into()));
        }
        check_labels(&self.labels, self.labeled.len(), self.num_classes)?;
        let dim = self.labeled[0].embeddings.ncols();
        for u in self.all() {
            if u.embeddings.ncols() != dim {
                return Err(SereError::Shape(format!(
                    "utterance {} has embedding dimension {}, expected {dim}",
                    u.id,
                    u.embeddings.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.labeled.first().map_or(0, |u| u.embeddings.ncols())
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled_source.len() + self.unlabeled_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All utterances in the order labeled, unlabeled source, unlabeled target.
    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.labeled
            .iter()
            .chain(&self.unlabeled_source)
            .chain(&self.unlabeled_target)
    }

    pub fn index(&self, r: SampleRef) -> usize {
        match r {
            SampleRef::Labeled(i) => i,
            SampleRef::Source(i) => self.labeled.len() + i,
            SampleRef::Target(i) => self.labeled.len() + self.unlabeled_source.len() + i,
        }
    }

    pub fn get(&self, r: SampleRef) -> &Utterance {
        match r {
            SampleRef::Labeled(i) => &self.labeled[i],
            SampleRef::Source(i) => &self.unlabeled_source[i],
            SampleRef::Target(i) => &self.unlabeled_target[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleRef {
    Labeled(usize),
    Source(usize),
    Target(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    /// Index into `unlabeled_target`.
    pub target: usize,
    /// Index into `labeled`.
    pub anchor: usize,
    pub label: usize,
    pub irf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPair {
    pub unlabeled: SampleRef,
    pub reference: SampleRef,
    pub irf: f64,
}

/// Discrete choices of one refresh: pseudo-anchors of the unlabeled target
/// samples and the reference of every unlabeled sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    pub pseudo: Vec<PseudoLabel>,
    pub pairs: Vec<DualPair>,
}

impl Plan {
    /// Restricts the plan to the given unlabeled samples.
    pub fn subset(&self, keep: &[SampleRef]) -> Plan {
        Plan {
            pseudo: self
                .pseudo
                .iter()
                .filter(|p| keep.contains(&SampleRef::Target(p.target)))
                .copied()
                .collect(),
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(&p.unlabeled))
                .copied()
                .collect(),
        }
    }
}

fn encode_all(batch: &Batch, model: &SereModel) -> Result<Vec<Encoded>> {
    let all: Vec<&Utterance> = batch.all().collect();
    all.par_iter().map(|u| model.encode(u)).collect()
}

fn resonance(a: &Encoded, b: &Encoded, params: &IrfParams) -> Result<ResonanceResult> {
    irf::resonance_with_bursts(&a.u, &a.burst, &b.u, &b.burst, params)
}

fn best_in(
    x: &Encoded,
    pool: &[Encoded],
    params: &IrfParams,
) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(SereError::Pairing("reference pool is empty".into()));
    }
    let scores: Vec<f64> = pool
        .iter()
        .map(|r| Ok(resonance(x, r, params)?.irf))
        .collect::<Result<_>>()?;
    Ok(argmax_first(&scores))
}

/// Chooses pseudo-anchors and dual references under the current parameters.
pub fn make_plan(batch: &Batch, model: &SereModel) -> Result<Plan> {
    batch.validate()?;
    let enc = encode_all(batch, model)?;
    let nl = batch.labeled.len();
    let ns = batch.unlabeled_source.len();
    let (labeled, rest) = enc.split_at(nl);
    let (source, target) = rest.split_at(ns);
    let params = &model.irf;

    let target_refs: Vec<(PseudoLabel, DualPair)> = target
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let (anchor, irf) = best_in(x, labeled, params)?;
            let (src, irf_src) = best_in(x, source, params).map_err(|_| {
                SereError::Pairing(format!(
                    "unlabeled target {} needs an unlabeled source reference",
                    batch.unlabeled_target[j].id
                ))
            })?;
            Ok((
                PseudoLabel {
                    target: j,
                    anchor,
                    label: batch.labels[anchor],
                    irf,
                },
                DualPair {
                    unlabeled: SampleRef::Target(j),
                    reference: SampleRef::Source(src),
                    irf: irf_src,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let source_pairs: Vec<DualPair> = source
        .par_iter()
        .enumerate()
        .map(|(s, x)| {
            let (anchor, irf) = best_in(x, labeled, params)?;
            Ok(DualPair {
                unlabeled: SampleRef::Source(s),
                reference: SampleRef::Labeled(anchor),
                irf,
            })
        })
        .collect::<Result<_>>()?;

    let mut plan = Plan {
        pseudo: Vec::with_capacity(target_refs.len()),
        pairs: source_pairs,
    };
    for (p, d) in target_refs {
        plan.pseudo.push(p);
        plan.pairs.push(d);
    }
    Ok(plan)
}

/// Frame alignments of every resonance evaluated by the objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Alignments {
    pub pseudo: Vec<Vec<usize>>,
    pub pairs: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub proto: f64,
    pub dual: f64,
    pub total: f64,
}

/// Partial derivatives of the objective, laid out like [`SereModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Array1<f64>,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub projection: Option<Array2<f64>>,
}

impl Gradients {
    fn zeros(model: &SereModel) -> Self {
        Self {
            w: Array1::zeros(model.embedding_dim()),
            b: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            projection: model.projection.as_ref().map(|p| Array2::zeros(p.raw_dim())),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.w.to_vec();
        out.extend([self.b, self.alpha, self.beta, self.gamma, self.delta]);
        if let Some(p) = &self.projection {
            out.extend(p.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossTerms,
    pub alignments: Alignments,
    pub prototypes: PrototypeSet,
    pub gradient: Option<Gradients>,
}

/// Upstream gradients for one utterance's encoded frames.
struct FrameGrads {
    u: Array2<f64>,
    burst: Array1<f64>,
}

impl FrameGrads {
    fn zeros(e: &Encoded) -> Self {
        Self {
            u: Array2::zeros(e.u.raw_dim()),
            burst: Array1::zeros(e.burst.len()),
        }
    }

    fn add_pooled(&mut self, g: ArrayView1<'_, f64>) {
        let scale = 1.0 / self.u.nrows() as f64;
        for mut row in self.u.rows_mut() {
            row.scaled_add(scale, &g);
        }
    }
}

fn resolve_alignment(
    a: &Encoded,
    b: &Encoded,
    params: &IrfParams,
    frozen: Option<&Vec<usize>>,
) -> Result<ResonanceResult> {
    match frozen {
        None => resonance(a, b, params),
        Some(js) => {
            if js.len() != a.u.nrows() {
                return Err(SereError::Shape("frozen alignment length differs".into()));
            }
            let matrix = irf::resonance_matrix(&a.u, &a.burst, &b.u, &b.burst, params)?;
            Ok(ResonanceResult {
                irf: irf::irf_score(&matrix, js)?,
                pooled: irf::resonance_pool(&b.u, js)?,
                alignment: js.clone(),
                matrix,
            })
        }
    }
}

/// Backpropagates `g_irf * IRF + g_pooled . v` through one resonance with
/// fixed alignment, adding into the rows (`ga`) and columns (`gb`) owners.
#[allow(clippy::too_many_arguments)]
fn backprop_resonance(
    a: &Encoded,
    b: &Encoded,
    alignment: &[usize],
    params: &IrfParams,
    g_irf: f64,
    g_pooled: Option<ArrayView1<'_, f64>>,
    ga: &mut FrameGrads,
    gb: &mut FrameGrads,
    g_delta: &mut f64,
) {
    let ts = alignment.len() as f64;
    if let Some(gv) = g_pooled {
        for &j in alignment {
            gb.u.row_mut(j).scaled_add(1.0 / ts, &gv);
        }
    }
    if g_irf == 0.0 {
        return;
    }
    let w = g_irf / ts;
    for (i, &j) in alignment.iter().enumerate() {
        let x = a.u.row(i);
        let y = b.u.row(j);
        let nx = x.dot(&x).sqrt();
        let ny = y.dot(&y).sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let cos = x.dot(&y) / (nx * ny);
        let gap = a.burst[i] - b.burst[j];
        let e = (-params.delta * gap * gap).exp();
        let r = e * cos;
        *g_delta += w * (-gap * gap * r);
        ga.burst[i] += w * (-2.0 * params.delta * gap * r);
        gb.burst[j] += w * (2.0 * params.delta * gap * r);
        // d cos / dx = y/(|x||y|) - cos x/|x|^2, and symmetrically for y.
        let mut rx = ga.u.row_mut(i);
        rx.scaled_add(w * e / (nx * ny), &y);
        rx.scaled_add(-w * e * cos / (nx * nx), &x);
        let mut ry = gb.u.row_mut(j);
        ry.scaled_add(w * e / (nx * ny), &x);
        ry.scaled_add(-w * e * cos / (ny * ny), &y);
    }
}

fn two_mut<T>(xs: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = xs.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = xs.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Evaluates the objective for a plan. When `frozen` is given its frame
/// alignments are reused instead of recomputed.
pub fn evaluate(
    batch: &Batch,
    model: &SereModel,
    plan: &Plan,
    frozen: Option<&Alignments>,
    with_gradient: bool,
) -> Result<Evaluation> {
    batch.validate()?;
    model.irf.validate()?;
    model.tric.validate()?;
    let enc = encode_all(batch, model)?;
    let nl = batch.labeled.len();
    let c = batch.num_classes;
    let params = &model.irf;
    let wp = model.tric.proto_weight();
    let wd = model.tric.dual_weight();

    let mut z_labeled = Array2::zeros((nl, model.embedding_dim() + 4));
    for i in 0..nl {
        z_labeled.row_mut(i).assign(&enc[i].pooled());
    }

    if let Some(f) = frozen {
        if f.pseudo.len() != plan.pseudo.len() || f.pairs.len() != plan.pairs.len() {
            return Err(SereError::Shape("frozen alignments do not match the plan".into()));
        }
    }

    // Resonance of each pseudo-labeled target against its anchor.
    let pseudo_res: Vec<ResonanceResult> = plan
        .pseudo
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let a = &enc[batch.index(SampleRef::Target(p.target))];
            let b = &enc[p.anchor];
            resolve_alignment(a, b, params, frozen.map(|f| &f.pseudo[k]))
        })
        .collect::<Result<_>>()?;
    let pair_res: Vec<ResonanceResult> = plan
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let a = &enc[batch.index(p.unlabeled)];
            let b = &enc[batch.index(p.reference)];
            resolve_alignment(a, b, params, frozen.map(|f| &f.pairs[k]))
        })
        .collect::<Result<_>>()?;
    let ref_pooled: Vec<Array1<f64>> = plan
        .pairs
        .iter()
        .map(|p| enc[batch.index(p.reference)].pooled())
        .collect();

    let anchor_rows: Vec<(usize, ArrayView1<'_, f64>)> = plan
        .pseudo
        .iter()
        .map(|p| (p.label, z_labeled.row(p.anchor)))
        .collect();
    let prototypes = enhanced_prototypes(&z_labeled, &batch.labels, c, &anchor_rows)?;

    let proto = if wp != 0.0 {
        let targets: Vec<(usize, ArrayView1<'_, f64>)> = plan
            .pseudo
            .iter()
            .zip(&pseudo_res)
            .map(|(p, r)| (p.label, r.pooled.view()))
            .collect();
        proto_loss(&z_labeled, &batch.labels, &targets, &prototypes)?
    } else {
        0.0
    };
    let dual = if wd != 0.0 {
        let terms: Vec<DualTerm<'_>> = pair_res
            .iter()
            .zip(&ref_pooled)
            .map(|(r, v)| DualTerm {
                irf: r.irf,
                v_unlabeled: r.pooled.view(),
                v_reference: v.view(),
            })
            .collect();
        dual_loss(&terms)
    } else {
        0.0
    };
    let loss = LossTerms {
        proto,
        dual,
        total: wp * proto + wd * dual,
    };

    let gradient = if with_gradient {
        Some(backward(
            batch, model, plan, &enc, &z_labeled, &prototypes, &pseudo_res, &pair_res, &ref_pooled,
        ))
    } else {
        None
    };

    Ok(Evaluation {
        loss,
        alignments: Alignments {
            pseudo: pseudo_res.iter().map(|r| r.alignment.clone()).collect(),
            pairs: pair_res.iter().map(|r| r.alignment.clone()).collect(),
        },
        prototypes,
        gradient,
    })
}

#[allow(clippy::too_many_arguments)]
fn backward(
    batch: &Batch,
    model: &SereModel,
    plan: &Plan,
    enc: &[Encoded],
    z_labeled: &Array2<f64>,
    prototypes: &PrototypeSet,
    pseudo_res: &[ResonanceResult],
    pair_res: &[ResonanceResult],
    ref_pooled: &[Array1<f64>],
) -> Gradients {
    let params = &model.irf;
    let c = batch.num_classes;
    let wp = model.tric.proto_weight();
    let wd = model.tric.dual_weight();
    let mut grads: Vec<FrameGrads> = enc.iter().map(FrameGrads::zeros).collect();
    let mut g_delta = 0.0;
    let dim = z_labeled.ncols();

    if wp != 0.0 {
        let counts = &prototypes.labeled_counts;
        let mut pseudo_counts = vec![0usize; c];
        for p in &plan.pseudo {
            pseudo_counts[p.label] += 1;
        }
        let mut g_proto = Array2::<f64>::zeros((c, dim));
        let mut g_z = Array2::<f64>::zeros(z_labeled.raw_dim());
        for (i, &y) in batch.labels.iter().enumerate() {
            let coef = wp * 2.0 / (c as f64 * counts[y] as f64);
            let diff = &z_labeled.row(i) - &prototypes.enhanced.row(y);
            g_z.row_mut(i).scaled_add(coef, &diff);
            g_proto.row_mut(y).scaled_add(-coef, &diff);
        }
        for (p, res) in plan.pseudo.iter().zip(pseudo_res) {
            let coef = wp * 2.0 / (c as f64 * pseudo_counts[p.label] as f64);
            let diff = &res.pooled - &prototypes.enhanced.row(p.label);
            g_proto.row_mut(p.label).scaled_add(-coef, &diff);
            let gv = diff * coef;
            let anchor = p.anchor;
            let ti = batch.index(SampleRef::Target(p.target));
            let (ga, gb) = two_mut(&mut grads, ti, anchor);
            backprop_resonance(
                &enc[ti],
                &enc[anchor],
                &res.alignment,
                params,
                0.0,
                Some(gv.view()),
                ga,
                gb,
                &mut g_delta,
            );
        }
        // Prototypes are means over labeled embeddings and anchor embeddings.
        for (i, &y) in batch.labels.iter().enumerate() {
            let share = 1.0 / (counts[y] + pseudo_counts[y]) as f64;
            g_z.row_mut(i).scaled_add(share, &g_proto.row(y));
        }
        for p in &plan.pseudo {
            let y = p.label;
            let share = 1.0 / (counts[y] + pseudo_counts[y]) as f64;
            g_z.row_mut(p.anchor).scaled_add(share, &g_proto.row(y));
        }
        for (i, row) in g_z.rows().into_iter().enumerate() {
            grads[i].add_pooled(row);
        }
    }

    if wd != 0.0 && !plan.pairs.is_empty() {
        let k = plan.pairs.len() as f64;
        for ((p, res), v_ref) in plan.pairs.iter().zip(pair_res).zip(ref_pooled) {
            let diff = &res.pooled - v_ref;
            let dist = diff.dot(&diff);
            let g_irf = -wd * dist / k;
            let gv = &diff * (2.0 * wd * (1.0 - res.irf) / k);
            let ui = batch.index(p.unlabeled);
            let ri = batch.index(p.reference);
            let (ga, gb) = two_mut(&mut grads, ui, ri);
            backprop_resonance(
                &enc[ui],
                &enc[ri],
                &res.alignment,
                params,
                g_irf,
                Some(gv.view()),
                ga,
                gb,
                &mut g_delta,
            );
            gb.add_pooled((-&gv).view());
        }
    }

    let mut out = Gradients::zeros(model);
    out.delta = g_delta;
    let d = model.embedding_dim();
    let w = Array1::from(model.idfe.w.clone());
    for ((utt, e), g) in batch.all().zip(enc).zip(&grads) {
        for t in 0..e.u.nrows() {
            let n = utt.dynamics.row(t);
            let gr = g.u.slice(s![t, d..]);
            let gate = e.gate[t];
            let gb = g.burst[t];
            out.alpha += gb * gate * n[0].abs();
            out.beta += gb * gate * n[1].abs();
            out.gamma += gb * gate * (n[2].abs() + n[3].abs());
            let g_gate = gr.dot(&n) + gb * e.base[t];
            let g_pre = g_gate * gate * (1.0 - gate);
            out.w.scaled_add(g_pre, &e.h.row(t));
            out.b += g_pre;
            if let Some(gp) = out.projection.as_mut() {
                let mut gh = g.u.slice(s![t, ..d]).to_owned();
                gh.scaled_add(g_pre, &w);
                let x = utt.embeddings.row(t);
                for (r, &ghr) in gh.iter().enumerate() {
                    gp.row_mut(r).scaled_add(ghr, &x);
                }
            }
        }
    }
    out
}

/// Diagnostics of one full evaluation.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub plan: Plan,
    pub prototypes: PrototypeSet,
}

/// Plans under the current parameters and evaluates the objective.
pub fn total_loss(batch: &Batch, model: &SereModel) -> Result<(LossTerms, Diagnostics)> {
    let plan = make_plan(batch, model)?;
    let ev = evaluate(batch, model, &plan, None, false)?;
    Ok((
        ev.loss,
        Diagnostics {
            plan,
            prototypes: ev.prototypes,
        },
    ))
}

/// Analytic gradient of the objective with discrete choices frozen at the
/// given plan.
pub fn grad_total_loss(batch: &Batch, model: &SereModel, plan: &Plan) -> Result<Gradients> {
    Ok(evaluate(batch, model, plan, None, true)?
        .gradient
        .expect("requested"))
}

/// Fits the enhanced prototypes for the model from a batch.
pub fn fit_prototypes(batch: &Batch, model: &SereModel) -> Result<PrototypeSet> {
    let plan = make_plan(batch, model)?;
    Ok(evaluate(batch, model, &plan, None, false)?.prototypes)
}

/// Predicts the class of `x`: the resonance-aware vector of `x` against its
/// highest-IRF reference is matched to the nearest enhanced prototype.
pub fn classify(x: &Utterance, model: &SereModel, references: &[Utterance]) -> Result<usize> {
    let prototypes = model
        .prototypes
        .as_ref()
        .ok_or_else(|| SereError::Precondition("model has no prototypes".into()))?;
    let ex = model.encode(x)?;
    let refs: Vec<Encoded> = references
        .iter()
        .map(|r| model.encode(r))
        .collect::<Result<_>>()?;
    let (best, _) = best_in(&ex, &refs, &model.irf)?;
    let res = resonance(&ex, &refs[best], &model.irf)?;
    nearest_prototype(res.pooled.view(), &prototypes.enhanced)
}
