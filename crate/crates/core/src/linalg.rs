//! Small dense helpers; every system solved here is at most a few dozen wide.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Orthonormalizes the columns of `m` in place (modified Gram-Schmidt).
pub fn orthonormalize_columns(m: &mut Array2<f64>) -> Result<()> {
    let cols = m.ncols();
    for j in 0..cols {
        for k in 0..j {
            let proj = m.column(k).dot(&m.column(j));
            let ck = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &ck);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate("columns are linearly dependent".into()));
        }
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Solves `a x = b` for symmetric positive definite `a` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Degenerate("matrix is not positive definite".into()));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Ok(x)
}

/// Minimum-norm `u` with `rows . u = targets`, for linearly independent rows.
pub fn min_norm_solution(rows: &Array2<f64>, targets: &Array1<f64>) -> Result<Array1<f64>> {
    let gram = rows.dot(&rows.t());
    let coeffs = solve_spd(&gram, targets)?;
    Ok(rows.t().dot(&coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, normal_matrix};
    use approx::assert_abs_diff_eq;

    #[test]
    fn orthonormal_columns() {
        let mut rng = derive_stream(1, 1);
        let mut m = normal_matrix(&mut rng, 20, 5);
        orthonormalize_columns(&mut m).unwrap();
        let g = m.t().dot(&m);
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(g[[i, j]], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn min_norm_hits_targets() {
        let mut rng = derive_stream(1, 2);
        let rows = normal_matrix(&mut rng, 4, 10);
        let targets = Array1::from(vec![0.1, -2.0, 0.5, 3.0]);
        let u = min_norm_solution(&rows, &targets).unwrap();
        let got = rows.dot(&u);
        for (g, t) in got.iter().zip(targets.iter()) {
            assert_abs_diff_eq!(*g, *t, epsilon = 1e-10);
        }
    }

    #[test]
    fn dependent_columns_rejected() {
        let mut m = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 0.0, 0.0, 1.0, 2.0]).unwrap();
        assert!(orthonormalize_columns(&mut m).is_err());
    }
}
