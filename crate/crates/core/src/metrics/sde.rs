//! Semantic disentanglement metric: how well a model reconstructs a scene
//! under its own label relative to how far it moves under a flipped label.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{forward_noise, reverse_sample, NoiseDraw, NoiseSchedule, SamplerConfig, VarianceMode};
use crate::error::{Error, Result};
use crate::pipeline::LatentCodec;
use crate::rng::{child_task, derive_stream};
use crate::scene::{Color, ObjectKind, Raster, Scene};
use crate::text::{SemanticVocabulary, TextEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SDEReport {
    /// `||x - h(f(x, t), c, t)||`, pixel RMS averaged over seeds.
    pub conditioned: f64,
    /// `||x - h(f(x, t), c~, t)||`
    pub edited: f64,
    /// `conditioned / edited`; infinite when `edited` is zero.
    pub ratio: f64,
    pub total: f64,
    pub normalization: String,
    pub degenerate: bool,
}

impl SDEReport {
    pub fn from_distances(conditioned: f64, edited: f64) -> Self {
        let degenerate = edited <= 0.0;
        let ratio = if degenerate { f64::INFINITY } else { conditioned / edited };
        Self {
            conditioned,
            edited,
            ratio,
            total: ratio + edited,
            normalization: "pixel-rms".into(),
            degenerate,
        }
    }

    /// Mean of the distances over reports, then the metric of those means.
    pub fn average(reports: &[SDEReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidParameter("nothing to average".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&SDEReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut out = Self::from_distances(mean(|r| r.conditioned), mean(|r| r.edited));
        out.ratio = mean(|r| r.ratio);
        out.total = out.ratio + out.edited;
        out.degenerate = reports.iter().any(|r| r.degenerate);
        Ok(out)
    }
}

pub fn pixel_rms(a: &Raster, b: &Raster) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidParameter("rasters differ in shape".into()));
    }
    Ok((a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Reconstructs `scene` from timestep `t` under `c` and under `c_tilde`,
/// `seeds` times each with shared noise per seed.
#[allow(clippy::too_many_arguments)]
pub fn sde_metric(
    scene: &Scene,
    c: &TextEmbedding,
    c_tilde: &TextEmbedding,
    vocab: &SemanticVocabulary,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    sched: &NoiseSchedule,
    t: usize,
    seeds: usize,
    sampler: &SamplerConfig,
    root_seed: u64,
) -> Result<SDEReport> {
    if seeds == 0 || t == 0 {
        return Err(Error::InvalidParameter("need seeds and a positive timestep".into()));
    }
    let z0 = codec.encode(scene)?;
    let uncond_c = vocab.null_embedding(c.len());
    let (mut cond, mut edit) = (0.0, 0.0);
    for s in 0..seeds as u64 {
        let task = child_task(root_seed, s);
        let eps = NoiseDraw::sample(&mut derive_stream(root_seed, task), z0.shape(), (root_seed, task));
        let z_t = forward_noise(&z0, t, &eps, sched)?;
        let run = |prompt: &TextEmbedding| -> Result<f64> {
            let mut rng = derive_stream(task, 1);
            let z = reverse_sample(&z_t, prompt, &uncond_c, den, sampler, sched, &mut rng)?;
            pixel_rms(&scene.raster, &codec.decode(&z)?)
        };
        cond += run(c)?;
        edit += run(c_tilde)?;
    }
    let n = seeds as f64;
    Ok(SDEReport::from_distances(cond / n, edit / n))
}

/// Knobs of [`sde_flip_average`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeConfig {
    pub forward_fraction: f64,
    pub guidance_scale: f64,
    pub seeds: usize,
    pub full_prompt: bool,
    pub variance: VarianceMode,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            forward_fraction: 0.75,
            guidance_scale: 7.5,
            seeds: 1,
            full_prompt: true,
            variance: VarianceMode::Ancestral,
        }
    }
}

fn flip_color(c: Color) -> Result<Color> {
    match c {
        Color::Red => Ok(Color::Blue),
        Color::Blue => Ok(Color::Red),
        Color::Green => Err(Error::InvalidParameter("green has no binary flip".into())),
    }
}

fn flip_object(o: ObjectKind) -> ObjectKind {
    match o {
        ObjectKind::Square => ObjectKind::Circle,
        ObjectKind::Circle => ObjectKind::Square,
    }
}

/// SDE averaged over the color flip (red and blue only) and the object flip.
pub fn sde_flip_average(
    scene: &Scene,
    vocab: &SemanticVocabulary,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    sched: &NoiseSchedule,
    cfg: &SdeConfig,
    root_seed: u64,
) -> Result<SDEReport> {
    let t = sched.timestep_for_strength(cfg.forward_fraction)?;
    let sampler = SamplerConfig {
        guidance_scale: cfg.guidance_scale,
        total_steps: sched.steps(),
        forward_fraction: cfg.forward_fraction,
        variance: cfg.variance,
    };
    let encode = |pairs: Vec<(String, String)>| {
        let names: Vec<(&str, &str)> = pairs.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
        crate::text::encode_prompt(vocab, &names)
    };
    let c = encode(scene.factors.prompt(cfg.full_prompt))?;
    let mut recolored = scene.factors;
    recolored.color = flip_color(scene.factors.color)?;
    let mut reshaped = scene.factors;
    reshaped.object = flip_object(scene.factors.object);
    let reports = [recolored, reshaped]
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let c_tilde = encode(f.prompt(cfg.full_prompt))?;
            sde_metric(scene, &c, &c_tilde, vocab, den, codec, sched, t, cfg.seeds, &sampler, child_task(root_seed, k as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    SDEReport::average(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn formula_cases() {
        let r = SDEReport::from_distances(0.0, 0.3);
        assert_eq!(r.total, 0.3);
        let r = SDEReport::from_distances(0.2, 0.2);
        assert_eq!(r.ratio, 1.0);
        assert_abs_diff_eq!(r.total, 1.2, epsilon = 1e-15);
        let r = SDEReport::from_distances(0.2, 0.0);
        assert!(r.degenerate && r.ratio.is_infinite());
        let avg = SDEReport::average(&[SDEReport::from_distances(0.1, 0.2), SDEReport::from_distances(0.3, 0.6)]).unwrap();
        assert_eq!(avg.total, avg.ratio + avg.edited);
    }

    #[test]
    fn identical_prompts_give_unit_ratio() {
        use crate::denoiser::{ConditionMap, GaussianFactorConfig, GaussianFactorModel};
        use crate::pipeline::AnalyticCodec;
        use crate::scene::{render_scene, FactorVector};
        let vocab = SemanticVocabulary::scene_default(0);
        let model = GaussianFactorModel::new(
            GaussianFactorConfig::disentangled(2),
            &vocab,
            ConditionMap::scene(&vocab).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let codec = AnalyticCodec { model: &model };
        let scene = render_scene(&FactorVector::from_coordinates(&[0.0, 0.0, 0.5, 0.5, 0.5]).unwrap()).unwrap();
        let c = crate::text::encode_prompt(
            &vocab,
            &[("color", "red"), ("object", "square"), ("size", "0.5"), ("x", "0.5"), ("y", "0.5")],
        )
        .unwrap();
        let sched = NoiseSchedule::default();
        let r = sde_metric(&scene, &c, &c, &vocab, &model, &codec, &sched, 38, 3, &SamplerConfig::default(), 1).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.total, 1.0 + r.conditioned);
    }
}
