//! Monte-Carlo checks for the concentration bound near an editing
//! hyperplane and the orthogonality of block-extended directions.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_task, derive_stream};
use crate::text::extended_direction;

/// Samples per Monte-Carlo chunk. Chunks own their streams, so estimates do
/// not depend on how many threads run them.
pub const CHUNK: usize = 1 << 14;

/// `2 alpha sqrt(d / (d - 2))`.
pub fn tau_threshold(alpha: f64, d: usize) -> Result<f64> {
    if d <= 2 {
        return Err(Error::InvalidParameter(format!("tau needs d > 2, got {d}")));
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidParameter("alpha must be finite".into()));
    }
    let d = d as f64;
    Ok(2.0 * alpha * (d / (d - 2.0)).sqrt())
}

/// `((1 - 3 e^{-c d}) (1 - (2 / alpha) e^{-alpha^2 / 2}))^m`.
pub fn concentration_bound(m: usize, d: usize, alpha: f64, c: f64) -> f64 {
    let first = 1.0 - 3.0 * (-c * d as f64).exp();
    let second = 1.0 - (2.0 / alpha) * (-alpha * alpha / 2.0).exp();
    (first * second).powi(m as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub m: usize,
    pub d: usize,
    pub alpha: f64,
    pub c: f64,
    pub samples: usize,
    pub tau: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// `erf(tau / sqrt(2 m))`
    pub analytic: f64,
    pub bound: f64,
    pub bound_holds: bool,
}

impl ConcentrationReport {
    /// `|estimate - analytic|` in standard errors of a binomial proportion
    /// at the analytic value. The floor of one sample keeps saturated cells
    /// (analytic within 1e-8 of 1) finite.
    pub fn z_score(&self) -> f64 {
        let n = self.samples as f64;
        let se = (self.analytic * (1.0 - self.analytic) / n).sqrt().max(1.0 / n);
        (self.estimate - self.analytic).abs() / se
    }

    pub fn summary(&self) -> String {
        format!(
            "m={} d={} alpha={} c={}: P(|sum| <= {:.5}) ~ {:.5} +/- {:.5} (gaussian {:.5}, bound {:.5}, {})",
            self.m,
            self.d,
            self.alpha,
            self.c,
            self.tau,
            self.estimate,
            self.std_error,
            self.analytic,
            self.bound,
            if self.bound_holds { "holds" } else { "violated" }
        )
    }
}

fn unit_vector(rng: &mut crate::rng::Stream, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Estimates `P(|sum_i n_i . z_i| <= tau)` for random unit `n_i` and
/// standard normal `z_i` in `R^d`.
pub fn concentration_mc(m: usize, d: usize, alpha: f64, c: f64, samples: usize, seed: u64) -> Result<ConcentrationReport> {
    if m == 0 || d < 4 || !(alpha >= 1.0) || samples < 10_000 || !(c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need m >= 1, d >= 4, alpha >= 1, c > 0 and at least 1e4 samples (m={m}, d={d}, alpha={alpha}, c={c}, samples={samples})"
        )));
    }
    let tau = tau_threshold(alpha, d)?;
    let mut dir_rng = derive_stream(seed, 0);
    let dirs: Vec<Vec<f64>> = (0..m).map(|_| unit_vector(&mut dir_rng, d)).collect();
    let chunks = samples.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let n = CHUNK.min(samples - k * CHUNK);
            let mut rng = derive_stream(seed, child_task(seed, k as u64 + 1));
            let mut count = 0u64;
            for _ in 0..n {
                let mut total = 0.0;
                for dir in &dirs {
                    for w in dir {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        total += w * z;
                    }
                }
                if total.abs() <= tau {
                    count += 1;
                }
            }
            count
        })
        .sum();
    let estimate = hits as f64 / samples as f64;
    let std_error = (estimate * (1.0 - estimate) / samples as f64).sqrt();
    let bound = concentration_bound(m, d, alpha, c);
    Ok(ConcentrationReport {
        m,
        d,
        alpha,
        c,
        samples,
        tau,
        estimate,
        std_error,
        analytic: libm::erf(tau / (2.0 * m as f64).sqrt()),
        bound,
        bound_holds: estimate >= bound,
    })
}

pub fn write_concentration_csv<W: Write>(reports: &[ConcentrationReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([
        "m", "d", "alpha", "c", "samples", "tau", "estimate", "std_error", "analytic", "bound", "bound_holds",
    ])?;
    for r in reports {
        w.write_record([
            r.m.to_string(),
            r.d.to_string(),
            r.alpha.to_string(),
            r.c.to_string(),
            r.samples.to_string(),
            format!("{:.10}", r.tau),
            format!("{:.10}", r.estimate),
            format!("{:.10}", r.std_error),
            format!("{:.10}", r.analytic),
            format!("{:.10}", r.bound),
            r.bound_holds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub max_inner: f64,
    pub max_norm_error: f64,
}

/// Extends each unit direction into its own block and measures pairwise
/// inner products and norm changes.
pub fn extension_check(directions: &[Vec<f64>]) -> Result<ExtensionReport> {
    let m = directions.len();
    for (i, n) in directions.iter().enumerate() {
        let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("direction {i} has norm {norm}")));
        }
    }
    let ext = directions
        .iter()
        .enumerate()
        .map(|(i, n)| extended_direction(n, i, m))
        .collect::<Result<Vec<_>>>()?;
    let mut max_inner: f64 = 0.0;
    let mut max_norm_error: f64 = 0.0;
    for i in 0..m {
        let own = ext[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        max_norm_error = max_norm_error.max((own - 1.0).abs());
        for j in 0..m {
            if i != j {
                let dot: f64 = ext[i].iter().zip(&ext[j]).map(|(a, b)| a * b).sum();
                max_inner = max_inner.max(dot.abs());
            }
        }
    }
    Ok(ExtensionReport {
        max_inner,
        max_norm_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn tau_values() {
        assert_abs_diff_eq!(tau_threshold(1.0, 4).unwrap(), 2.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(tau_threshold(2.0, 4).unwrap(), 4.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(tau_threshold(1.0, 1_000_000).unwrap(), 2.0, epsilon = 1e-5);
        assert!(tau_threshold(1.0, 2).is_err());
    }

    #[test]
    fn spot_values() {
        let r = concentration_mc(1, 4, 1.0, 0.1, 1_000_000, 1).unwrap();
        assert_abs_diff_eq!(r.analytic, 0.995_322_265, epsilon = 1e-8);
        assert!(r.z_score() < 3.0, "{}", r.summary());
        let r = concentration_mc(2, 4, 1.0, 0.1, 200_000, 2).unwrap();
        assert_abs_diff_eq!(r.analytic, 0.954_499_736, epsilon = 1e-8);
        assert!(r.z_score() < 4.0, "{}", r.summary());
    }

    #[test]
    fn chunking_does_not_change_estimates() {
        let a = concentration_mc(2, 8, 1.5, 0.1, 50_000, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| concentration_mc(2, 8, 1.5, 0.1, 50_000, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn domain_errors() {
        assert!(concentration_mc(1, 3, 1.0, 0.1, 10_000, 0).is_err());
        assert!(concentration_mc(1, 4, 0.5, 0.1, 10_000, 0).is_err());
        assert!(concentration_mc(1, 4, 1.0, 0.1, 100, 0).is_err());
        assert!(extension_check(&[vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn csv_has_header_and_lf() {
        let r = concentration_mc(1, 4, 1.0, 0.1, 10_000, 0).unwrap();
        let mut buf = Vec::new();
        write_concentration_csv(&[r], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(!s.contains('\r'));
    }

    proptest! {
        #[test]
        fn bound_shrinks_with_m(d in 4usize..128, alpha in 2.2f64..6.0, c in 0.01f64..1.0, m in 1usize..16) {
            // both factors lie in (0, 1) once alpha > 2 and 3 e^{-cd} < 1
            prop_assume!(3.0 * (-c * d as f64).exp() < 1.0);
            prop_assert!(concentration_bound(m + 1, d, alpha, c) < concentration_bound(m, d, alpha, c));
        }

        #[test]
        fn extensions_are_exactly_orthogonal(m in 1usize..64, d in 1usize..128, seed in 0u64..1000) {
            let mut rng = derive_stream(seed, 0);
            let dirs: Vec<Vec<f64>> = (0..m).map(|_| unit_vector(&mut rng, d)).collect();
            let r = extension_check(&dirs).unwrap();
            prop_assert_eq!(r.max_inner, 0.0);
            prop_assert!(r.max_norm_error < 1e-12);
        }
    }
}
