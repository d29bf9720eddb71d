//! PSNR, SSIM and background-only variants for `[0, 1]` rasters.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scene::{Raster, Scene};

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Raster, b: &Raster) -> Result<()> {
    if a.dim() != b.dim() {
        let (ah, aw, _) = a.dim();
        let (bh, bw, _) = b.dim();
        return Err(Error::ShapeMismatch {
            expected: (ah, aw),
            got: (bh, bw),
        });
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = w.sum();
    w / total
}

/// Mean SSIM over every window that fits inside the raster, averaged over
/// channels.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, ch) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "raster {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0.0;
    for k in 0..ch {
        for r0 in 0..=h - SSIM_WINDOW {
            for q0 in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my) = (0.0, 0.0);
                for ((i, j), wt) in win.indexed_iter() {
                    mx += wt * a[[r0 + i, q0 + j, k]];
                    my += wt * b[[r0 + i, q0 + j, k]];
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for ((i, j), wt) in win.indexed_iter() {
                    let dx = a[[r0 + i, q0 + j, k]] - mx;
                    let dy = b[[r0 + i, q0 + j, k]] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    Ok(total / count)
}

/// PSNR over background pixels, and SSIM after the object region of
/// `edited` is restored from the source so only background differences
/// count.
pub fn masked_background_metrics(source: &Scene, edited: &Raster) -> Result<(f64, f64)> {
    check_shapes(&source.raster, edited)?;
    let mask = &source.background_mask;
    let pixels = mask.iter().filter(|m| **m).count();
    if pixels == 0 {
        return Err(Error::Degenerate("background mask is empty".into()));
    }
    let (h, w, ch) = edited.dim();
    let mut sq = 0.0;
    let mut restored = source.raster.clone();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] {
                for k in 0..ch {
                    sq += (source.raster[[r, c, k]] - edited[[r, c, k]]).powi(2);
                    restored[[r, c, k]] = edited[[r, c, k]];
                }
            }
        }
    }
    let masked_psnr = psnr_from_mse(sq / (pixels * ch) as f64);
    Ok((masked_psnr, ssim(&source.raster, &restored)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use crate::scene::{render_scene, Color, FactorVector, ObjectKind};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;

    fn random_raster(seed: u64) -> Raster {
        let mut rng = derive_stream(seed, 0);
        Array3::from_shape_simple_fn((16, 16, 3), || rng.random::<f64>())
    }

    #[test]
    fn psnr_cases() {
        let a = random_raster(1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Array3::zeros((16, 16, 3));
        let b = Array3::from_elem((16, 16, 3), 0.1);
        assert_abs_diff_eq!(psnr(&z, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert!(psnr(&z, &Array3::zeros((8, 16, 3))).is_err());
    }

    #[test]
    fn psnr_matches_naive_loop() {
        for s in 0..10 {
            let (a, b) = (random_raster(2 * s), random_raster(2 * s + 1));
            let mut sq = 0.0;
            for r in 0..16 {
                for c in 0..16 {
                    for k in 0..3 {
                        sq += (a[[r, c, k]] - b[[r, c, k]]).powi(2);
                    }
                }
            }
            let expect = 10.0 * (1.0 / (sq / 768.0)).log10();
            assert_abs_diff_eq!(psnr(&a, &b).unwrap(), expect, epsilon = 1e-9);
        }
    }

    /// Independent SSIM: explicit per-window sums with unnormalized weights.
    fn naive_ssim(a: &Raster, b: &Raster) -> f64 {
        let mut scores = Vec::new();
        for k in 0..3 {
            for r0 in 0..=5 {
                for q0 in 0..=5 {
                    let mut ws = 0.0;
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / 4.5;
                            let wt = (-d2).exp();
                            let (x, y) = (a[[r0 + i, q0 + j, k]], b[[r0 + i, q0 + j, k]]);
                            ws += wt;
                            sx += wt * x;
                            sy += wt * y;
                            sxx += wt * x * x;
                            syy += wt * y * y;
                            sxy += wt * x * y;
                        }
                    }
                    let (mx, my) = (sx / ws, sy / ws);
                    let vx = sxx / ws - mx * mx;
                    let vy = syy / ws - my * my;
                    let cv = sxy / ws - mx * my;
                    let (c1, c2) = (1e-4, 9e-4);
                    scores.push(
                        ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                    );
                }
            }
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    #[test]
    fn ssim_matches_naive_and_is_symmetric() {
        for s in 0..100 {
            let (a, b) = (random_raster(100 + 2 * s), random_raster(101 + 2 * s));
            let ab = ssim(&a, &b).unwrap();
            assert_abs_diff_eq!(ab, ssim(&b, &a).unwrap(), epsilon = 1e-12);
            if s < 10 {
                assert_abs_diff_eq!(ab, naive_ssim(&a, &b), epsilon = 1e-9);
            }
        }
        let a = random_raster(7);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (p, q) = (0.2, 0.7);
        let a = Array3::from_elem((16, 16, 3), p);
        let b = Array3::from_elem((16, 16, 3), q);
        let c1 = 1e-4;
        let expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), expect, epsilon = 1e-12);
        assert!(ssim(&Array3::zeros((8, 8, 3)), &Array3::zeros((8, 8, 3))).is_err());
    }

    #[test]
    fn masked_metrics_cases() {
        let f = FactorVector {
            color: Color::Red,
            object: ObjectKind::Circle,
            size: 0.6,
            x: 0.5,
            y: 0.5,
        };
        let source = render_scene(&f).unwrap();
        assert_eq!(masked_background_metrics(&source, &source.raster).unwrap(), (PSNR_CAP, 1.0));

        let recolored = render_scene(&FactorVector { color: Color::Blue, ..f }).unwrap();
        let (mp, _) = masked_background_metrics(&source, &recolored.raster).unwrap();
        assert!(mp >= psnr(&source.raster, &recolored.raster).unwrap());

        let mut all_bg = source.clone();
        all_bg.background_mask.fill(true);
        let other = random_raster(9);
        let (mp, ms) = masked_background_metrics(&all_bg, &other).unwrap();
        assert_abs_diff_eq!(mp, psnr(&source.raster, &other).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(ms, ssim(&source.raster, &other).unwrap(), epsilon = 1e-12);

        let mut none = source.clone();
        none.background_mask.fill(false);
        assert!(masked_background_metrics(&none, &other).is_err());
    }
}
