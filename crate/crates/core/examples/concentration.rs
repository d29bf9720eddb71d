//! Monte Carlo check of the projection concentration probability and the
//! orthogonality of block-extended directions.

use eimlab::rng::{derive_stream, standard_normal};
use eimlab::theory::{concentration_mc, extension_check};

fn main() -> eimlab::Result<()> {
    let samples = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200_000);
    println!("  m   d alpha  estimate  analytic     z");
    for m in [1, 2, 4] {
        for d in [4, 16, 64] {
            for alpha in [1.0, 2.0] {
                let r = concentration_mc(m, d, alpha, 0.1, samples, (m * 1000 + d) as u64)?;
                println!("{m:>3} {d:>3} {alpha:>5.1} {:>9.6} {:>9.6} {:>5.2}", r.estimate, r.analytic, r.z_score());
            }
        }
    }
    let mut rng = derive_stream(3, 0);
    let dirs: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..32).map(|_| standard_normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let r = extension_check(&dirs)?;
    println!("extended directions: max |<u_i, u_j>| = {}, max norm error = {:e}", r.max_inner, r.max_norm_error);
    Ok(())
}
