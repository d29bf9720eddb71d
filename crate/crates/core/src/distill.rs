//! Score distillation directions (SDS, DDS, HSDS) over any [`Denoiser`] and
//! the fixed-timestep loop that turns HSDS into an image-space direction.
//!
//! Every operation here evaluates the denoiser at a single timestep and
//! never advances it.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{forward_noise, LatentImage, NoiseDraw, NoiseSchedule};
use crate::error::{ensure_finite, ensure_shape, Error, Result};
use crate::rng::Stream;
use crate::text::{EditDirection, Subspace, TextEmbedding};

/// Which way the identify loop moves `z'` along the HSDS direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateSign {
    /// `z' <- z' + eta * dHSDS`
    #[default]
    Ascent,
    /// `z' <- z' - eta * dHSDS`
    Descent,
}

impl UpdateSign {
    fn factor(self) -> f64 {
        match self {
            UpdateSign::Ascent => 1.0,
            UpdateSign::Descent => -1.0,
        }
    }
}

/// Noise used by the DDS loop: one draw for the whole run, or a fresh draw
/// per iteration shared by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoisePolicy {
    #[default]
    Fixed,
    PerIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HSDSConfig {
    pub lambda: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub iterations: usize,
    /// Required timestep of the latent being edited; `None` accepts any.
    pub timestep: Option<usize>,
    pub sign: UpdateSign,
    pub noise: NoisePolicy,
    /// Keep `z'` every this many iterations in the trace; 0 keeps none.
    pub snapshot_every: usize,
}

impl Default for HSDSConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            eta_start: 0.1,
            eta_end: 0.01,
            iterations: 50,
            timestep: None,
            sign: UpdateSign::Ascent,
            noise: NoisePolicy::Fixed,
            snapshot_every: 0,
        }
    }
}

impl HSDSConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter("lambda must be finite and nonnegative".into()));
        }
        if !(self.eta_start > 0.0 && self.eta_end > 0.0) || !self.eta_start.is_finite() || !self.eta_end.is_finite() {
            return Err(Error::InvalidParameter("step sizes must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("need at least one iteration".into()));
        }
        Ok(())
    }

    /// Step size at iteration `k`, linear from `eta_start` to `eta_end`.
    pub fn eta(&self, k: usize) -> f64 {
        if self.iterations <= 1 {
            return self.eta_start;
        }
        let w = k as f64 / (self.iterations - 1) as f64;
        self.eta_start + (self.eta_end - self.eta_start) * w
    }
}

/// Per-iteration record of a distillation loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillTrace {
    pub grad_norms: Vec<f64>,
    /// Norm of the target term, the part of the direction that compares
    /// the two prompts at `z'`.
    pub alignment: Vec<f64>,
    pub etas: Vec<f64>,
    pub snapshots: Vec<(usize, Array2<f64>)>,
}

impl DistillTrace {
    pub fn len(&self) -> usize {
        self.grad_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_norms.is_empty()
    }

    fn push(&mut self, grad_norm: f64, alignment: f64, eta: f64) {
        self.grad_norms.push(grad_norm);
        self.alignment.push(alignment);
        self.etas.push(eta);
    }

    /// Columns `iteration,grad_norm,alignment,eta`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["iteration", "grad_norm", "alignment", "eta"])?;
        for k in 0..self.len() {
            w.write_record([
                k.to_string(),
                format!("{:.12e}", self.grad_norms[k]),
                format!("{:.12e}", self.alignment[k]),
                format!("{:.12e}", self.etas[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A distillation loop that stopped on a non-finite gradient.
#[derive(Debug, Clone)]
pub struct DistillAbort {
    pub iteration: usize,
    pub trace: DistillTrace,
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_positive_t(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::TimestepMismatch(
            "score distillation needs a timestep of at least 1".into(),
        ));
    }
    Ok(())
}

/// `eps_hat(z_t, c) - eps` with `z_t = forward_noise(z, t, eps)` and unit
/// timestep weighting.
pub fn sds_grad(
    den: &dyn Denoiser,
    z: &LatentImage,
    c: &TextEmbedding,
    t: usize,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_positive_t(t)?;
    let z_t = forward_noise(z, t, eps, sched)?;
    Ok(den.predict(&z_t, c)? - &eps.values)
}

/// `eps_hat(z_t, c0) - eps_hat(z'_t, c1)` with one noise draw for both.
#[allow(clippy::too_many_arguments)]
pub fn dds_grad(
    den: &dyn Denoiser,
    z: &LatentImage,
    c0: &TextEmbedding,
    z_prime: &LatentImage,
    c1: &TextEmbedding,
    t: usize,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_positive_t(t)?;
    ensure_shape(z.shape(), z_prime.shape())?;
    let z_t = forward_noise(z, t, eps, sched)?;
    let zp_t = forward_noise(z_prime, t, eps, sched)?;
    Ok(den.predict(&z_t, c0)? - &den.predict(&zp_t, c1)?)
}

/// `2 (eps(z'_t, c~) - eps(z'_t, z_s)) + 2 lambda (eps(z_t, c~) - eps(z'_t, c~))`.
pub fn hsds_grad(
    den: &dyn Denoiser,
    z_t: &LatentImage,
    z_t_prime: &LatentImage,
    c_tilde: &TextEmbedding,
    z_s: &TextEmbedding,
    lambda: f64,
) -> Result<Array2<f64>> {
    Ok(hsds_terms(den, z_t, z_t_prime, c_tilde, z_s, lambda)?.0)
}

/// The HSDS direction together with the norm of its target term.
fn hsds_terms(
    den: &dyn Denoiser,
    z_t: &LatentImage,
    z_t_prime: &LatentImage,
    c_tilde: &TextEmbedding,
    z_s: &TextEmbedding,
    lambda: f64,
) -> Result<(Array2<f64>, f64)> {
    if z_t.timestep != z_t_prime.timestep {
        return Err(Error::TimestepMismatch(format!(
            "z_t at {} but z_t' at {}",
            z_t.timestep, z_t_prime.timestep
        )));
    }
    ensure_shape(z_t.shape(), z_t_prime.shape())?;
    let e_prime_tilde = den.predict(z_t_prime, c_tilde)?;
    let e_prime_s = den.predict(z_t_prime, z_s)?;
    let target = (&e_prime_tilde - &e_prime_s) * 2.0;
    let align = frobenius(&target);
    if lambda == 0.0 {
        return Ok((target, align));
    }
    let e_tilde = den.predict(z_t, c_tilde)?;
    let proximity = (e_tilde - &e_prime_tilde) * (2.0 * lambda);
    Ok((target + proximity, align))
}

/// `dds(z, c_attr, z', c0) - dds(z, c1, z', c0)`.
#[allow(clippy::too_many_arguments)]
pub fn hsds_dds_form_grad(
    den: &dyn Denoiser,
    z: &LatentImage,
    c_attr: &TextEmbedding,
    c0: &TextEmbedding,
    z_prime: &LatentImage,
    c1: &TextEmbedding,
    t: usize,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let a = dds_grad(den, z, c_attr, z_prime, c0, t, eps, sched)?;
    let b = dds_grad(den, z, c1, z_prime, c0, t, eps, sched)?;
    Ok(a - b)
}

/// Iterates `z' <- z' +/- eta_k dHSDS` from `z' = z_t` and returns
/// `n = z'_K - z_t`. On a non-finite gradient the partial trace comes back
/// in the error.
pub fn identify_image_direction(
    den: &dyn Denoiser,
    z_t: &LatentImage,
    c_tilde: &TextEmbedding,
    z_s: &TextEmbedding,
    cfg: &HSDSConfig,
) -> std::result::Result<(EditDirection, DistillTrace), IdentifyError> {
    cfg.validate()?;
    if let Some(t) = cfg.timestep {
        if t != z_t.timestep {
            return Err(Error::TimestepMismatch(format!(
                "config expects timestep {t}, latent is at {}",
                z_t.timestep
            ))
            .into());
        }
    }
    check_positive_t(z_t.timestep)?;
    let mut trace = DistillTrace::default();
    let mut z_prime = z_t.clone();
    let sign = cfg.sign.factor();
    for k in 0..cfg.iterations {
        let eta = cfg.eta(k);
        let (g, align) = hsds_terms(den, z_t, &z_prime, c_tilde, z_s, cfg.lambda)?;
        let norm = frobenius(&g);
        if !norm.is_finite() {
            trace.push(norm, align, eta);
            return Err(IdentifyError::Aborted(Box::new(DistillAbort { iteration: k, trace })));
        }
        z_prime.tokens.scaled_add(sign * eta, &g);
        trace.push(norm, align, eta);
        if cfg.snapshot_every > 0 && (k + 1) % cfg.snapshot_every == 0 {
            trace.snapshots.push((k + 1, z_prime.tokens.clone()));
        }
    }
    let delta = &z_prime.tokens - &z_t.tokens;
    let n = EditDirection::new(Subspace::Image, delta, 1.0)?;
    Ok((n, trace))
}

#[derive(Debug, thiserror::Error)]
pub enum IdentifyError {
    #[error(transparent)]
    Failed(#[from] Error),
    #[error("non-finite gradient at iteration {}", .0.iteration)]
    Aborted(Box<DistillAbort>),
}

impl From<IdentifyError> for Error {
    fn from(e: IdentifyError) -> Self {
        match e {
            IdentifyError::Failed(inner) => inner,
            IdentifyError::Aborted(a) => {
                Error::NonFinite(format!("HSDS gradient at iteration {}", a.iteration))
            }
        }
    }
}

/// Delta denoising loop on a clean latent: starting from `z' = z`, moves
/// `z'` by `+eta_k dds(z, c0, z', c1)` at fixed timestep `t`.
pub fn dds_optimize(
    den: &dyn Denoiser,
    z: &LatentImage,
    c0: &TextEmbedding,
    c1: &TextEmbedding,
    t: usize,
    cfg: &HSDSConfig,
    sched: &NoiseSchedule,
    rng: &mut Stream,
) -> Result<(LatentImage, DistillTrace)> {
    cfg.validate()?;
    check_positive_t(t)?;
    let mut eps = NoiseDraw::sample(rng, z.shape(), (t as u64, 0));
    let mut z_prime = z.clone();
    let mut trace = DistillTrace::default();
    for k in 0..cfg.iterations {
        if k > 0 && cfg.noise == NoisePolicy::PerIteration {
            eps = NoiseDraw::sample(rng, z.shape(), (t as u64, k as u64));
        }
        let eta = cfg.eta(k);
        let g = dds_grad(den, z, c0, &z_prime, c1, t, &eps, sched)?;
        ensure_finite(&g, "DDS gradient")?;
        let norm = frobenius(&g);
        z_prime.tokens.scaled_add(eta, &g);
        trace.push(norm, norm, eta);
        if cfg.snapshot_every > 0 && (k + 1) % cfg.snapshot_every == 0 {
            trace.snapshots.push((k + 1, z_prime.tokens.clone()));
        }
    }
    Ok((z_prime, trace))
}
