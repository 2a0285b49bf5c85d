//! Resonance between two enhanced representations: per-frame burst
//! intensity, the burst-synchrony-weighted cosine matrix, row-wise best
//! alignment, the aligned pooling of partner frames and the mean resonance.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::NUM_STATIC;
use crate::error::{Result, SereError};
use crate::idfe::EnhancedRepresentation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrfParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Burst-synchrony temperature, must be positive.
    pub delta: f64,
}

impl Default for IrfParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

impl IrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(SereError::Precondition(format!(
                "temperature must be positive, got {}",
                self.delta
            )));
        }
        if ![self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            return Err(SereError::Precondition("intensity weights must be finite".into()));
        }
        Ok(())
    }

    /// Per-frame weighted absolute dynamics without the gate, i.e. `B(t)` for
    /// a row of normalized dynamics.
    pub(crate) fn weigh(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.alpha * row[0].abs() + self.beta * row[1].abs() + self.gamma * (row[2].abs() + row[3].abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceResult {
    pub matrix: Array2<f64>,
    pub alignment: Vec<usize>,
    /// Mean of the partner's frames at the aligned positions.
    pub pooled: Array1<f64>,
    pub irf: f64,
}

pub fn burst_intensity(r: &ArrayView2<'_, f64>, params: &IrfParams) -> Result<Array1<f64>> {
    if r.ncols() != NUM_STATIC {
        return Err(SereError::Shape(format!(
            "dynamic features need {NUM_STATIC} columns, got {}",
            r.ncols()
        )));
    }
    Ok(r.rows().into_iter().map(|row| params.weigh(row)).collect())
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

pub fn resonance_matrix(
    u_s: &Array2<f64>,
    b_s: &Array1<f64>,
    u_t: &Array2<f64>,
    b_t: &Array1<f64>,
    params: &IrfParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    if u_s.ncols() != u_t.ncols() {
        return Err(SereError::Shape(format!(
            "feature dimensions differ: {} vs {}",
            u_s.ncols(),
            u_t.ncols()
        )));
    }
    if b_s.len() != u_s.nrows() || b_t.len() != u_t.nrows() {
        return Err(SereError::Shape("burst intensity length differs from frame count".into()));
    }
    let (ts, tt) = (u_s.nrows(), u_t.nrows());
    let norms_t: Vec<f64> = u_t.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let rows: Vec<f64> = (0..ts)
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = u_s.row(i);
            let na = a.dot(&a).sqrt();
            let norms_t = &norms_t;
            (0..tt).map(move |j| {
                let b = u_t.row(j);
                let cos = if na == 0.0 || norms_t[j] == 0.0 {
                    0.0
                } else {
                    a.dot(&b) / (na * norms_t[j])
                };
                let gap = b_s[i] - b_t[j];
                (-params.delta * gap * gap).exp() * cos
            })
        })
        .collect();
    Ok(Array2::from_shape_vec((ts, tt), rows).expect("ts * tt entries"))
}

/// Row-wise argmax; ties resolve to the lowest column.
pub fn align(matrix: &Array2<f64>) -> Result<Vec<usize>> {
    if matrix.ncols() == 0 {
        return Err(SereError::Precondition("alignment target has no frames".into()));
    }
    Ok(matrix
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn resonance_pool(u_t: &Array2<f64>, alignment: &[usize]) -> Result<Array1<f64>> {
    if alignment.is_empty() {
        return Err(SereError::Precondition("empty alignment".into()));
    }
    let mut acc = Array1::zeros(u_t.ncols());
    for &j in alignment {
        if j >= u_t.nrows() {
            return Err(SereError::Index {
                index: j,
                len: u_t.nrows(),
            });
        }
        acc += &u_t.row(j);
    }
    Ok(acc / alignment.len() as f64)
}

pub fn irf_score(matrix: &Array2<f64>, alignment: &[usize]) -> Result<f64> {
    if alignment.len() != matrix.nrows() || alignment.is_empty() {
        return Err(SereError::Shape(format!(
            "{} alignment indices for {} rows",
            alignment.len(),
            matrix.nrows()
        )));
    }
    let mut sum = 0.0;
    for (i, &j) in alignment.iter().enumerate() {
        if j >= matrix.ncols() {
            return Err(SereError::Index {
                index: j,
                len: matrix.ncols(),
            });
        }
        sum += matrix[[i, j]];
    }
    Ok(sum / alignment.len() as f64)
}

/// Burst intensity of a representation, computed from its dynamic columns.
pub fn burst_of(rep: &EnhancedRepresentation, params: &IrfParams) -> Result<Array1<f64>> {
    if rep.u.ncols() < NUM_STATIC {
        return Err(SereError::Shape("representation lacks dynamic columns".into()));
    }
    burst_intensity(&rep.dynamics(), params)
}

/// Resonance of `a` (rows) against `b` (columns). Stores the computed burst
/// intensities back into both representations.
pub fn resonate(
    a: &mut EnhancedRepresentation,
    b: &mut EnhancedRepresentation,
    params: &IrfParams,
) -> Result<ResonanceResult> {
    if a.u.ncols() != b.u.ncols() {
        return Err(SereError::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.u.ncols(),
            b.u.ncols()
        )));
    }
    let b_a = burst_of(a, params)?;
    let b_b = burst_of(b, params)?;
    let result = resonance_with_bursts(&a.u, &b_a, &b.u, &b_b, params)?;
    a.burst = Some(b_a);
    b.burst = Some(b_b);
    Ok(result)
}

pub fn resonance_with_bursts(
    u_a: &Array2<f64>,
    b_a: &Array1<f64>,
    u_b: &Array2<f64>,
    b_b: &Array1<f64>,
    params: &IrfParams,
) -> Result<ResonanceResult> {
    if u_a.nrows() == 0 {
        return Err(SereError::Precondition("source has no frames".into()));
    }
    let matrix = resonance_matrix(u_a, b_a, u_b, b_b, params)?;
    let alignment = align(&matrix)?;
    let pooled = resonance_pool(u_b, &alignment)?;
    let irf = irf_score(&matrix, &alignment)?;
    Ok(ResonanceResult {
        matrix,
        alignment,
        pooled,
        irf,
    })
}
