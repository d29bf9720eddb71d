//! Variance-preserving DDPM substrate: schedules, forward noising,
//! classifier-free guidance and the ancestral reverse sampler.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{ensure_finite, ensure_shape, Error, Result};
use crate::rng::{normal_matrix, Stream};
use crate::text::TextEmbedding;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Linear beta schedule. `betas[t - 1]` is beta at step `t`, and
/// `alpha_bars[t]` is the cumulative product through step `t` with
/// `alpha_bars[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("step count must be positive".into()));
        }
        let in_range = |b: f64| b > 0.0 && b < 1.0;
        if !in_range(beta_min) || !in_range(beta_max) || beta_min > beta_max {
            return Err(Error::InvalidParameter(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Forward strength to timestep, `round(f * T)` with ties rounded up.
    pub fn timestep_for_strength(&self, fraction: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidParameter(format!(
                "forward fraction {fraction} outside [0, 1]"
            )));
        }
        let scaled = fraction * self.steps() as f64;
        // absorb representation error so that 0.15 * 50 still counts as a tie
        let t = (scaled + 0.5 + 1e-9).floor() as usize;
        Ok(t.min(self.steps()))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::build(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// Image-token matrix tagged with its diffusion timestep (0 means clean).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub tokens: Array2<f64>,
    pub timestep: usize,
}

impl LatentImage {
    pub fn new(tokens: Array2<f64>, timestep: usize) -> Result<Self> {
        ensure_finite(&tokens, "latent image")?;
        Ok(Self { tokens, timestep })
    }

    pub fn clean(tokens: Array2<f64>) -> Result<Self> {
        Self::new(tokens, 0)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tokens.dim()
    }

    pub fn is_clean(&self) -> bool {
        self.timestep == 0
    }
}

/// A standard-normal draw with the `(root seed, task id)` it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub values: Array2<f64>,
    pub lineage: (u64, u64),
}

impl NoiseDraw {
    pub fn sample(rng: &mut Stream, shape: (usize, usize), lineage: (u64, u64)) -> Self {
        Self {
            values: normal_matrix(rng, shape.0, shape.1),
            lineage,
        }
    }

    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        ensure_finite(&values, "noise draw")?;
        Ok(Self {
            values,
            lineage: (0, 0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Fresh noise with variance beta_t at every step except the last.
    #[default]
    Ancestral,
    /// Posterior mean only; deterministic given the start latent.
    PosteriorMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub total_steps: usize,
    pub forward_fraction: f64,
    #[serde(default)]
    pub variance: VarianceMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            total_steps: DEFAULT_STEPS,
            forward_fraction: 0.75,
            variance: VarianceMode::Ancestral,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidParameter(
                "guidance scale must be nonnegative".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidParameter("total steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.forward_fraction) {
            return Err(Error::InvalidParameter(
                "forward fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.total_steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    z0: &LatentImage,
    t: usize,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    if !z0.is_clean() {
        return Err(Error::TimestepMismatch(format!(
            "forward noising expects a clean latent, got timestep {}",
            z0.timestep
        )));
    }
    sched.check_timestep(t)?;
    ensure_shape(z0.shape(), eps.values.dim())?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let (a, b) = sched.coefficients(t);
    let tokens = &z0.tokens * a + &eps.values * b;
    Ok(LatentImage { tokens, timestep: t })
}

/// `eps_uncond + w (eps_cond - eps_uncond)`, returning either branch
/// verbatim at `w = 1` and `w = 0`.
pub fn cfg_combine(
    eps_cond: &Array2<f64>,
    eps_uncond: &Array2<f64>,
    w: f64,
) -> Result<Array2<f64>> {
    ensure_shape(eps_cond.dim(), eps_uncond.dim())?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_uncond + &((eps_cond - eps_uncond) * w))
}

/// Guided noise prediction; only the branches with nonzero weight are
/// evaluated.
pub fn guided_eps(
    den: &dyn Denoiser,
    z_t: &LatentImage,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    w: f64,
) -> Result<Array2<f64>> {
    if w == 1.0 {
        return den.predict(z_t, cond);
    }
    if w == 0.0 {
        return den.predict(z_t, uncond);
    }
    let c = den.predict(z_t, cond)?;
    let u = den.predict(z_t, uncond)?;
    cfg_combine(&c, &u, w)
}

/// One reverse step from `z.timestep` to `z.timestep - 1`.
pub fn reverse_step(
    z: &LatentImage,
    eps_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    variance: VarianceMode,
    rng: &mut Stream,
) -> Result<LatentImage> {
    let t = z.timestep;
    if t == 0 {
        return Err(Error::TimestepMismatch("cannot step below timestep 0".into()));
    }
    ensure_shape(z.shape(), eps_hat.dim())?;
    let beta = sched.beta(t);
    let (_, b) = sched.coefficients(t);
    let mut next = (&z.tokens - &(eps_hat * (beta / b))) / (1.0 - beta).sqrt();
    if t > 1 && variance == VarianceMode::Ancestral {
        let (rows, cols) = z.shape();
        let xi = normal_matrix(rng, rows, cols);
        next = next + xi * beta.sqrt();
    }
    ensure_finite(&next, "reverse sample")?;
    Ok(LatentImage {
        tokens: next,
        timestep: t - 1,
    })
}

/// Ancestral reverse loop from `z_t.timestep` down to 0 under guidance.
pub fn reverse_sample(
    z_t: &LatentImage,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    den: &dyn Denoiser,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Stream,
) -> Result<LatentImage> {
    reverse_sample_observed(z_t, cond, uncond, den, cfg, sched, rng, &mut |_| Ok(()))
}

/// As [`reverse_sample`], calling `observe` with the latent entering each step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample_observed(
    z_t: &LatentImage,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    den: &dyn Denoiser,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Stream,
    observe: &mut dyn FnMut(&LatentImage) -> Result<()>,
) -> Result<LatentImage> {
    cfg.validate()?;
    if z_t.timestep == 0 {
        return Err(Error::TimestepMismatch(
            "reverse sampling needs a noised latent (timestep > 0)".into(),
        ));
    }
    sched.check_timestep(z_t.timestep)?;
    let mut z = z_t.clone();
    while z.timestep > 0 {
        observe(&z)?;
        let eps = guided_eps(den, &z, cond, uncond, cfg.guidance_scale)?;
        z = reverse_step(&z, &eps, sched, cfg.variance, rng)?;
    }
    Ok(z)
}

/// Draws a fresh noise matrix from `rng`; convenience for pipelines.
pub fn draw_noise(rng: &mut Stream, shape: (usize, usize)) -> NoiseDraw {
    let lineage = (rng.random::<u64>(), 0);
    NoiseDraw::sample(rng, shape, lineage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::build(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn default_schedule_matches_reference_product() {
        // reference: product of (1 - beta) accumulated in compensated form
        let s = NoiseSchedule::default();
        let mut log_sum = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 49.0;
            let y = (-beta).ln_1p() - comp;
            let t = log_sum + y;
            comp = (t - log_sum) - y;
            log_sum = t;
        }
        assert_abs_diff_eq!(s.alpha_bar(50), log_sum.exp(), epsilon = 1e-12);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::build(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::build(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::build(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn strength_rounding_breaks_ties_upward() {
        let s = NoiseSchedule::default();
        assert_eq!(s.timestep_for_strength(0.75).unwrap(), 38);
        assert_eq!(s.timestep_for_strength(0.15).unwrap(), 8);
        assert_eq!(s.timestep_for_strength(0.0).unwrap(), 0);
        assert_eq!(s.timestep_for_strength(1.0).unwrap(), 50);
        assert!(s.timestep_for_strength(1.5).is_err());
    }

    #[test]
    fn forward_noise_at_zero_is_identity() {
        let s = NoiseSchedule::default();
        let z0 = LatentImage::clean(array![[0.3, -1.2], [2.0, 0.1]]).unwrap();
        let eps = NoiseDraw::from_values(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(forward_noise(&z0, 0, &eps, &s).unwrap(), z0);
    }

    #[test]
    fn forward_noise_symmetric_coefficients() {
        let s = NoiseSchedule::build(1, 0.5, 0.5).unwrap();
        let ones = Array2::<f64>::ones((2, 3));
        let z0 = LatentImage::clean(ones.clone()).unwrap();
        let eps = NoiseDraw::from_values(ones).unwrap();
        let zt = forward_noise(&z0, 1, &eps, &s).unwrap();
        for v in zt.tokens.iter() {
            assert_abs_diff_eq!(*v, 2.0 * 0.5f64.sqrt(), epsilon = 1e-15);
        }
        assert_eq!(zt.timestep, 1);
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::default();
        let z0 = LatentImage::clean(Array2::zeros((2, 2))).unwrap();
        let eps = NoiseDraw::from_values(Array2::zeros((2, 3))).unwrap();
        assert!(matches!(
            forward_noise(&z0, 3, &eps, &s),
            Err(Error::ShapeMismatch { .. })
        ));
        let eps = NoiseDraw::from_values(Array2::zeros((2, 2))).unwrap();
        assert!(matches!(
            forward_noise(&z0, 51, &eps, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn forward_noise_monte_carlo_moments() {
        let s = NoiseSchedule::default();
        let mut rng = derive_stream(5, 0);
        let z0 = LatentImage::clean(normal_matrix(&mut rng, 4, 3)).unwrap();
        let n = 10_000;
        let t = 37;
        let (a, b) = s.coefficients(t);
        let mut sum = Array2::<f64>::zeros((4, 3));
        let mut sq = Array2::<f64>::zeros((4, 3));
        for _ in 0..n {
            let eps = NoiseDraw::sample(&mut rng, (4, 3), (5, 0));
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            sum += &zt.tokens;
            sq += &zt.tokens.mapv(|v| v * v);
        }
        let mean = &sum / n as f64;
        let var = &sq / n as f64 - &mean.mapv(|m| m * m);
        // z0 is fixed, so the noised variance is (1 - abar) and the mean a*z0
        let se_mean = b / (n as f64).sqrt();
        let se_var = b * b * (2.0 / n as f64).sqrt();
        for ((m, v), z) in mean.iter().zip(var.iter()).zip(z0.tokens.iter()) {
            assert!((m - a * z).abs() < 3.0 * se_mean, "mean {m} vs {}", a * z);
            assert!((v - b * b).abs() < 3.0 * se_var, "var {v} vs {}", b * b);
        }
    }

    #[test]
    fn cfg_identities() {
        let c = array![[0.2, -1.0]];
        let u = array![[0.1, 4.0]];
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let g = cfg_combine(&array![[0.2]], &array![[0.1]], 7.5).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 0.85, epsilon = 1e-12);
        assert!(cfg_combine(&c, &array![[1.0]], 2.0).is_err());
    }

    proptest! {
        #[test]
        fn cfg_is_affine_in_scale(
            c in prop::collection::vec(-5.0f64..5.0, 6),
            u in prop::collection::vec(-5.0f64..5.0, 6),
            w1 in 0.0f64..10.0,
            w2 in 0.0f64..10.0,
            lam in 0.0f64..1.0,
        ) {
            let c = Array2::from_shape_vec((2, 3), c).unwrap();
            let u = Array2::from_shape_vec((2, 3), u).unwrap();
            let g1 = cfg_combine(&c, &u, w1).unwrap();
            let g2 = cfg_combine(&c, &u, w2).unwrap();
            let mixed = &g1 * lam + &g2 * (1.0 - lam);
            let direct = cfg_combine(&c, &u, lam * w1 + (1.0 - lam) * w2).unwrap();
            for (x, y) in mixed.iter().zip(direct.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
