//! Encode / identify / manipulate editing over a denoiser and a latent codec.
//!
//! Encode noises the source latent to `t* = round(f T)` and encodes the
//! source and target prompts. Identify takes the text direction
//! `n_c = Lambda (z_c1 - z_c0)` and runs HSDS from the source prompt toward
//! the manipulated prompt for the image direction `n_zt`. Manipulate shifts
//! both parts of the joint latent and samples back to a clean latent.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, GaussianFactorModel};
use crate::diffusion::{forward_noise, reverse_sample, LatentImage, NoiseDraw, NoiseSchedule, SamplerConfig};
use crate::distill::{identify_image_direction, DistillTrace, HSDSConfig};
use crate::error::{ensure_shape, Error, Result};
use crate::rng::derive_stream;
use crate::scene::{
    estimate_coordinates, patchify, render_coordinates, unpatchify, write_ppm, Raster, Scene, FACTOR_NAMES,
};
use crate::text::{
    multi_attr_manipulate, pool, EditDirection, EditPlan, Prompt, SemanticVocabulary, Subspace, TextEmbedding,
};
use crate::theory::tau_threshold;

/// Image tokens at some timestep next to text tokens; rows `..v` are image.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLatent {
    pub image: LatentImage,
    pub text: TextEmbedding,
}

impl JointLatent {
    pub fn partition(&self) -> usize {
        self.image.tokens.nrows()
    }

    /// The `(v + l) x d` concatenation; needs equal token widths.
    pub fn concat(&self) -> Result<Array2<f64>> {
        let (v, d) = self.image.shape();
        ensure_shape((self.text.len(), d), self.text.shape())?;
        let joint = concatenate(Axis(0), &[self.image.tokens.view(), self.text.tokens.view()])
            .expect("widths checked");
        debug_assert_eq!(joint.nrows(), v + self.text.len());
        Ok(joint)
    }

    pub fn split(joint: &Array2<f64>, image_tokens: usize, timestep: usize, template: &TextEmbedding) -> Result<Self> {
        if image_tokens > joint.nrows() {
            return Err(Error::InvalidParameter("partition beyond the joint latent".into()));
        }
        let image = LatentImage::new(joint.slice(ndarray::s![..image_tokens, ..]).to_owned(), timestep)?;
        let mut text = template.clone();
        let rows = joint.slice(ndarray::s![image_tokens.., ..]).to_owned();
        ensure_shape(template.shape(), rows.dim())?;
        text.tokens = rows;
        Ok(Self { image, text })
    }
}

/// Moves between scenes and a denoiser's latent space and reads factor
/// coordinates `[color, object, size, x, y]` back out.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, scene: &Scene) -> Result<LatentImage>;
    fn decode(&self, z: &LatentImage) -> Result<Raster>;
    fn factors(&self, z: &LatentImage) -> Result<Vec<f64>>;
}

/// Codec of the Gaussian factor model: factors are the loading coordinates
/// and rasters are rendered from them.
pub struct AnalyticCodec<'a> {
    pub model: &'a GaussianFactorModel,
}

impl LatentCodec for AnalyticCodec<'_> {
    fn encode(&self, scene: &Scene) -> Result<LatentImage> {
        self.model.encode_factors(&scene.factors.coordinates())
    }

    fn decode(&self, z: &LatentImage) -> Result<Raster> {
        render_coordinates(&self.factors(z)?)
    }

    fn factors(&self, z: &LatentImage) -> Result<Vec<f64>> {
        Ok(self.model.recover_factors(z)?.to_vec())
    }
}

/// Codec of the toy attention models: patch tokens, with factors estimated
/// from the decoded raster.
pub struct PatchCodec;

impl LatentCodec for PatchCodec {
    fn encode(&self, scene: &Scene) -> Result<LatentImage> {
        LatentImage::clean(patchify(&scene.raster)?)
    }

    fn decode(&self, z: &LatentImage) -> Result<Raster> {
        Ok(unpatchify(&z.tokens)?.mapv(|v| v.clamp(0.0, 1.0)))
    }

    fn factors(&self, z: &LatentImage) -> Result<Vec<f64>> {
        Ok(estimate_coordinates(&self.decode(z)?).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditOptions {
    /// Prompt with every factor rather than color and object only.
    pub full_prompt: bool,
    /// `z_s` keeps the context rows; off encodes only the planned tokens.
    pub context_target: bool,
    /// Also shift the pooled text vector by the mean row change.
    pub pooled_offset: bool,
    /// Scale the identified image direction by the largest plan degree.
    pub scale_image_by_degree: bool,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            full_prompt: true,
            context_target: true,
            pooled_offset: false,
            scale_image_by_degree: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub scene: Scene,
    pub plan: EditPlan,
    pub sampler: SamplerConfig,
    pub hsds: HSDSConfig,
    pub options: EditOptions,
    pub seed: u64,
}

/// Outcome of one edit. Factor vectors follow `FACTOR_NAMES`.
#[derive(Debug, Clone, Serialize)]
pub struct EditReport {
    pub source_prompt: String,
    pub target_prompt: String,
    pub timestep: usize,
    pub seed: u64,
    pub source_factors: Vec<f64>,
    pub recovered: Vec<f64>,
    /// `|recovered - source|` per factor.
    pub drift: Vec<f64>,
    pub targets: Vec<usize>,
    pub text_direction_norm: f64,
    pub image_direction_norm: f64,
    /// `n_c . z` before and after manipulation.
    pub signed_distance: (f64, f64),
    #[serde(skip)]
    pub source_raster: Raster,
    #[serde(skip)]
    pub edited_raster: Raster,
    #[serde(skip)]
    pub edited_latent: LatentImage,
    #[serde(skip)]
    pub edited_text: TextEmbedding,
    #[serde(skip)]
    pub text_direction: Option<EditDirection>,
    #[serde(skip)]
    pub image_direction: Option<EditDirection>,
    #[serde(skip)]
    pub trace: DistillTrace,
    #[serde(skip)]
    pub request: Option<Box<EditRequest>>,
}

impl EditReport {
    /// Largest drift over factors the plan does not touch.
    pub fn off_target_drift(&self) -> f64 {
        self.drift
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.targets.contains(i))
            .map(|(_, d)| *d)
            .fold(0.0, f64::max)
    }

    /// `report.json`, `source.ppm`, and `<name>.ppm` for the edited raster.
    pub fn write_artifacts(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        write_ppm(&dir.join("source.ppm"), &self.source_raster)?;
        write_ppm(&dir.join(format!("{name}.ppm")), &self.edited_raster)?;
        Ok(())
    }
}

fn factor_index(attribute: &str) -> Result<usize> {
    FACTOR_NAMES
        .iter()
        .position(|n| *n == attribute)
        .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
}

/// Oracle describer: the source prompt names the scene's factors, and the
/// target prompt swaps in the planned values.
pub fn describe(scene: &Scene, plan: &EditPlan, vocab: &SemanticVocabulary, full: bool) -> Result<(Prompt, Prompt)> {
    plan.validate()?;
    let source = scene.factors.prompt(full);
    let mut target = source.clone();
    for entry in &plan.entries {
        vocab.attribute_index(&entry.attribute)?;
        vocab.token(&entry.attribute, &entry.to)?;
        let row = target
            .iter_mut()
            .find(|(a, _)| *a == entry.attribute)
            .ok_or_else(|| Error::UnknownAttribute(entry.attribute.clone()))?;
        if row.1 != entry.from {
            return Err(Error::InvalidParameter(format!(
                "plan edits `{}` from `{}` but the scene has `{}`",
                entry.attribute, entry.from, row.1
            )));
        }
        row.1 = entry.to.clone();
    }
    let to_prompt = |pairs: &[(String, String)]| {
        let names: Vec<(&str, &str)> = pairs.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
        Prompt::from_names(vocab, &names)
    };
    Ok((to_prompt(&source)?, to_prompt(&target)?))
}

fn flat_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

struct Manipulated {
    z_c0: TextEmbedding,
    edited_text: TextEmbedding,
    n_c: EditDirection,
    n_zt: EditDirection,
    trace: DistillTrace,
    timestep: usize,
    z_t: LatentImage,
}

fn encode_and_identify(
    req: &EditRequest,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
) -> Result<(Manipulated, Prompt, Prompt)> {
    req.sampler.validate()?;
    let (p0, p1) = describe(&req.scene, &req.plan, vocab, req.options.full_prompt).map_err(|e| e.at_stage("describe"))?;
    let encode = || -> Result<_> {
        let z_c0 = vocab.encode(&p0)?;
        let z_c1 = vocab.encode(&p1)?;
        let z0 = codec.encode(&req.scene)?;
        let t = sched.timestep_for_strength(req.sampler.forward_fraction)?;
        if t == 0 {
            return Err(Error::InvalidParameter("forward fraction rounds to timestep 0".into()));
        }
        let eps = NoiseDraw::sample(&mut derive_stream(req.seed, 1), z0.shape(), (req.seed, 1));
        let z_t = forward_noise(&z0, t, &eps, sched)?;
        Ok((z_c0, z_c1, z_t, t))
    };
    let (z_c0, z_c1, z_t, t) = encode().map_err(|e| e.at_stage("encode"))?;
    let identify = || -> Result<_> {
        let mut edited_text = multi_attr_manipulate(vocab, &z_c0, &z_c1, &req.plan)?;
        if req.options.pooled_offset {
            edited_text.pooled_offset = Some(pool(&edited_text)?.vector - pool(&z_c0)?.vector);
        }
        let degree = req.plan.degrees().into_iter().fold(0.0, |m: f64, d| if d.abs() > m.abs() { d } else { m });
        let n_c = EditDirection::new(Subspace::Text, &edited_text.tokens - &z_c0.tokens, degree)?;
        let z_s = if req.options.context_target {
            edited_text.clone()
        } else {
            let pairs: Vec<(&str, &str)> =
                req.plan.entries.iter().map(|e| (e.attribute.as_str(), e.to.as_str())).collect();
            crate::text::encode_prompt(vocab, &pairs)?
        };
        let hsds = HSDSConfig {
            timestep: Some(t),
            ..req.hsds.clone()
        };
        let (mut n_zt, trace) = identify_image_direction(den, &z_t, &z_c0, &z_s, &hsds)?;
        if req.options.scale_image_by_degree {
            n_zt.delta *= degree;
            n_zt.degree = degree;
        }
        Ok(Manipulated {
            z_c0: z_c0.clone(),
            edited_text,
            n_c,
            n_zt,
            trace,
            timestep: t,
            z_t: z_t.clone(),
        })
    };
    let m = identify().map_err(|e| e.at_stage("identify"))?;
    Ok((m, p0, p1))
}

#[allow(clippy::too_many_arguments)]
fn sample_and_report(
    req: &EditRequest,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
    start: &LatentImage,
    cond: &TextEmbedding,
    stream: u64,
) -> Result<(LatentImage, Raster, Vec<f64>)> {
    let uncond = vocab.null_embedding(cond.len());
    let z = reverse_sample(start, cond, &uncond, den, &req.sampler, sched, &mut derive_stream(req.seed, stream))
        .map_err(|e| e.at_stage("sample"))?;
    let raster = codec.decode(&z).map_err(|e| e.at_stage("decode"))?;
    let factors = codec.factors(&z).map_err(|e| e.at_stage("decode"))?;
    Ok((z, raster, factors))
}

/// Runs one encode / identify / manipulate edit.
pub fn eim_edit(
    req: &EditRequest,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
) -> Result<EditReport> {
    let (m, p0, p1) = encode_and_identify(req, den, codec, vocab, sched)?;
    let manipulate = || -> Result<LatentImage> {
        let mut z = m.z_t.clone();
        z.tokens += &m.n_zt.delta;
        crate::error::ensure_finite(&z.tokens, "manipulated image latent")?;
        Ok(z)
    };
    let start = manipulate().map_err(|e| e.at_stage("manipulate"))?;
    let (z, raster, recovered) = sample_and_report(req, den, codec, vocab, sched, &start, &m.edited_text, 2)?;
    let source_factors = req.scene.factors.coordinates().to_vec();
    let drift = recovered.iter().zip(&source_factors).map(|(r, s)| (r - s).abs()).collect();
    let targets = req
        .plan
        .entries
        .iter()
        .map(|e| factor_index(&e.attribute))
        .collect::<Result<Vec<_>>>()?;
    Ok(EditReport {
        source_prompt: p0.render(vocab),
        target_prompt: p1.render(vocab),
        timestep: m.timestep,
        seed: req.seed,
        source_factors,
        recovered,
        drift,
        targets,
        text_direction_norm: m.n_c.norm(),
        image_direction_norm: m.n_zt.norm(),
        signed_distance: (
            flat_dot(&m.n_c.delta, &m.z_c0.tokens),
            flat_dot(&m.n_c.delta, &m.edited_text.tokens),
        ),
        source_raster: req.scene.raster.clone(),
        edited_raster: raster,
        edited_latent: z,
        edited_text: m.edited_text,
        text_direction: Some(m.n_c),
        image_direction: Some(m.n_zt),
        trace: m.trace,
        request: Some(Box::new(req.clone())),
    })
}

/// Applies the negated directions to an edited result and samples again,
/// reporting drift against the original scene.
pub fn reverse_edit(
    report: &EditReport,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
) -> Result<EditReport> {
    let (Some(n_c), Some(n_zt), Some(req)) = (&report.text_direction, &report.image_direction, &report.request) else {
        return Err(Error::InvalidParameter("report carries no edit directions".into()));
    };
    let (back_c, back_zt) = (n_c.negated(), n_zt.negated());
    let t = report.timestep;
    let eps = NoiseDraw::sample(&mut derive_stream(req.seed, 3), report.edited_latent.shape(), (req.seed, 3));
    let mut start = forward_noise(&report.edited_latent, t, &eps, sched).map_err(|e| e.at_stage("encode"))?;
    start.tokens += &back_zt.delta;
    let mut text = report.edited_text.clone();
    text.tokens += &back_c.delta;
    text.pooled_offset = None;
    let (z, raster, recovered) = sample_and_report(req, den, codec, vocab, sched, &start, &text, 4)?;
    let drift = recovered.iter().zip(&report.source_factors).map(|(r, s)| (r - s).abs()).collect();
    Ok(EditReport {
        source_prompt: report.target_prompt.clone(),
        target_prompt: report.source_prompt.clone(),
        timestep: t,
        seed: report.seed,
        source_factors: report.source_factors.clone(),
        recovered,
        drift,
        targets: report.targets.clone(),
        text_direction_norm: back_c.norm(),
        image_direction_norm: back_zt.norm(),
        signed_distance: (
            flat_dot(&back_c.delta, &report.edited_text.tokens),
            flat_dot(&back_c.delta, &text.tokens),
        ),
        source_raster: report.source_raster.clone(),
        edited_raster: raster,
        edited_latent: z,
        edited_text: text,
        text_direction: Some(back_c),
        image_direction: Some(back_zt),
        trace: DistillTrace::default(),
        request: report.request.clone(),
    })
}

/// One row of a degree sweep. Deltas and drifts are seed means of the
/// change against the unedited (`alpha = 0`) run with the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub alpha: f64,
    pub target_delta: f64,
    pub max_drift: f64,
    /// `|u . z~_c|` with `u` the unit text direction.
    pub projection: f64,
    pub tau: f64,
    pub within_bound: bool,
}

/// Sweeps the plan degree over `alphas` with `seeds` seeds per degree.
pub fn threshold_sweep(
    template: &EditRequest,
    alphas: &[f64],
    seeds: usize,
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
) -> Result<Vec<ThresholdRow>> {
    if alphas.is_empty() || seeds == 0 {
        return Err(Error::InvalidParameter("sweep needs degrees and seeds".into()));
    }
    if template.plan.is_empty() {
        return Err(Error::InvalidParameter("sweep needs a nonempty plan".into()));
    }
    let run = |alpha: f64| -> Result<Vec<EditReport>> {
        (0..seeds as u64)
            .map(|s| {
                let req = EditRequest {
                    plan: template.plan.with_degree(alpha),
                    seed: crate::rng::child_task(template.seed, s),
                    ..template.clone()
                };
                eim_edit(&req, den, codec, vocab, sched)
            })
            .collect()
    };
    let base = run(0.0)?;
    let target = factor_index(&template.plan.entries[0].attribute)?;
    let width = vocab.width();
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let reports = if alpha == 0.0 { base.clone() } else { run(alpha)? };
        let n = seeds as f64;
        let factors = base[0].recovered.len();
        let mut delta = vec![0.0; factors];
        for (r, b) in reports.iter().zip(&base) {
            for i in 0..factors {
                delta[i] += (r.recovered[i] - b.recovered[i]) / n;
            }
        }
        let max_drift = (0..factors)
            .filter(|i| !reports[0].targets.contains(i))
            .map(|i| {
                reports
                    .iter()
                    .zip(&base)
                    .map(|(r, b)| (r.recovered[i] - b.recovered[i]).abs())
                    .sum::<f64>()
                    / n
            })
            .fold(0.0, f64::max);
        let unit = {
            let full = &reports[0].edited_text;
            let (p0, p1) = describe(&template.scene, &template.plan, vocab, template.options.full_prompt)?;
            let diff = &vocab.encode(&p1)?.tokens - &vocab.encode(&p0)?.tokens;
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                flat_dot(&diff, &full.tokens).abs() / norm
            } else {
                0.0
            }
        };
        let tau = if alpha > 0.0 { tau_threshold(alpha, width)? } else { 0.0 };
        rows.push(ThresholdRow {
            alpha,
            target_delta: delta[target],
            max_drift,
            projection: unit,
            tau,
            within_bound: unit <= tau,
        });
    }
    Ok(rows)
}
