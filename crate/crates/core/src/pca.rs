//! Two-component principal component projection.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};

use crate::error::{Result, SereError};

/// Scores of the samples (rows) on the two leading principal axes. Each axis
/// is signed so that its largest-magnitude loading is positive.
pub fn project2(x: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(SereError::Projection(format!("need at least 3 samples, got {n}")));
    }
    if d == 0 {
        return Err(SereError::Projection("samples have no features".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Array2::zeros((d, 2));
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            axes[[i, k]] = sign * v[i];
        }
    }
    Ok(centered.dot(&axes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        (&a - &b).mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn planar_input_is_rotated_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((12, 2), |_| rng.random_range(-3.0..3.0));
        let y = project2(&x).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert!((dist(x.row(i), x.row(j)) - dist(y.row(i), y.row(j))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn collinear_input_has_flat_second_axis() {
        let x = array![[0.0, 0.0, 0.0], [1.0, 2.0, -1.0], [2.0, 4.0, -2.0], [-3.0, -6.0, 3.0]];
        let y = project2(&x).unwrap();
        assert!(y.column(1).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn matches_svd_up_to_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((10, 8), |_| rng.random_range(-1.0..1.0));
        let y = project2(&x).unwrap();
        let centered = &x - &x.mean_axis(Axis(0)).unwrap();
        let m = DMatrix::from_fn(10, 8, |i, j| centered[[i, j]]);
        let svd = m.svd(true, false);
        let u = svd.u.unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for k in 0..2 {
            let s = svd.singular_values[idx[k]];
            let sign = (y[[0, k]] * u[(0, idx[k])] * s).signum();
            for i in 0..10 {
                assert!((y[[i, k]] - sign * u[(i, idx[k])] * s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(project2(&Array2::zeros((2, 4))), Err(SereError::Projection(_))));
    }
}
