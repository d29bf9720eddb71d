//! Linear probes on per-token attention maps.
//!
//! Records come from guided reverse runs of a toy model. Each record holds
//! the step-averaged, head-averaged attention map toward one prompt token
//! per layer, labeled by the scene color. Probes are one-vs-rest logistic
//! regressions per color and per layer; accuracy is balanced so chance is
//! 0.5 regardless of class ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{extract_attention_maps, Denoiser, ToyAttentionModel};
use crate::diffusion::{
    forward_noise, guided_eps, reverse_step, LatentImage, NoiseDraw, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::rng::{child_task, derive_stream};
use crate::scene::{patchify, render_scene, sample_dataset, Color};
use crate::text::{encode_prompt, SemanticVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    /// Attribute of the token the maps attend to.
    pub token: String,
    /// `maps[layer][image token]`
    pub maps: Vec<Vec<f64>>,
    /// Color index of the scene.
    pub label: usize,
    pub scene: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub tolerance: f64,
    /// Standardize evaluation features with their own statistics instead
    /// of the training statistics.
    pub restandardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            learning_rate: 0.5,
            max_steps: 5000,
            tolerance: 1e-6,
            restandardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub steps: usize,
}

impl LinearProbe {
    fn score(&self, x: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(mean)
                .zip(scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }
}

/// One-vs-rest probes, `probes[layer][class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub token: String,
    pub classes: usize,
    pub probes: Vec<Vec<LinearProbe>>,
    pub config: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: String,
    pub train_token: String,
    pub eval_token: String,
    pub per_layer: Vec<f64>,
    pub average: f64,
}

fn column_stats(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in scale.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    // constant features carry no signal; a unit scale leaves them at zero
    let scale = scale.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// L2-regularized logistic regression by full-batch gradient descent.
fn fit_logistic(rows: &[&[f64]], labels: &[bool], cfg: &ProbeConfig) -> LinearProbe {
    let (mean, scale) = column_stats(rows);
    let xs: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let dim = mean.len();
    let n = rows.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        steps = step + 1;
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(labels) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let r = (p - if *y { 1.0 } else { 0.0 }) / n;
            gb += r;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if norm < cfg.tolerance {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * gb;
    }
    LinearProbe {
        mean,
        scale,
        weights: w,
        bias: b,
        steps,
    }
}

fn layer_count(records: &[ProbeRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Degenerate("no probe records".into()))?;
    if records.iter().any(|r| r.maps.len() != first.maps.len()) {
        return Err(Error::InvalidParameter("records disagree on layer count".into()));
    }
    Ok(first.maps.len())
}

pub fn train_probe(records: &[ProbeRecord], classes: usize, cfg: &ProbeConfig) -> Result<ProbeSet> {
    let layers = layer_count(records)?;
    let mut present = vec![false; classes];
    for r in records {
        if r.label >= classes {
            return Err(Error::InvalidParameter(format!("label {} out of range", r.label)));
        }
        present[r.label] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Degenerate("probe training needs at least two classes".into()));
    }
    let probes = (0..layers)
        .into_par_iter()
        .map(|layer| {
            let rows: Vec<&[f64]> = records.iter().map(|r| r.maps[layer].as_slice()).collect();
            (0..classes)
                .map(|c| {
                    let labels: Vec<bool> = records.iter().map(|r| r.label == c).collect();
                    fit_logistic(&rows, &labels, cfg)
                })
                .collect()
        })
        .collect();
    Ok(ProbeSet {
        token: records[0].token.clone(),
        classes,
        probes,
        config: cfg.clone(),
    })
}

/// Mean of true-positive and true-negative rates; 0.5 when a class is absent.
fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        if *t {
            pos += 1.0;
            if *p {
                tp += 1.0;
            }
        } else {
            neg += 1.0;
            if !*p {
                tn += 1.0;
            }
        }
    }
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    0.5 * (tp / pos + tn / neg)
}

/// Per-layer accuracy of `probes` on `records`, averaged over the
/// one-vs-rest classes present.
pub fn eval_transfer(probes: &ProbeSet, records: &[ProbeRecord], mode: &str) -> Result<ProbeResult> {
    let layers = layer_count(records)?;
    if layers != probes.probes.len() {
        return Err(Error::InvalidParameter("probe and record layer counts differ".into()));
    }
    let per_layer: Vec<f64> = (0..layers)
        .map(|layer| {
            let rows: Vec<&[f64]> = records.iter().map(|r| r.maps[layer].as_slice()).collect();
            let own = column_stats(&rows);
            let mut accs = Vec::new();
            for (c, probe) in probes.probes[layer].iter().enumerate() {
                let truth: Vec<bool> = records.iter().map(|r| r.label == c).collect();
                if !truth.iter().any(|t| *t) {
                    continue;
                }
                let (mean, scale) = if probes.config.restandardize {
                    (&own.0, &own.1)
                } else {
                    (&probe.mean, &probe.scale)
                };
                let pred: Vec<bool> = rows.iter().map(|x| probe.score(x, mean, scale) > 0.0).collect();
                accs.push(balanced_accuracy(&pred, &truth));
            }
            accs.iter().sum::<f64>() / accs.len().max(1) as f64
        })
        .collect();
    let average = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(ProbeResult {
        mode: mode.into(),
        train_token: probes.token.clone(),
        eval_token: records[0].token.clone(),
        per_layer,
        average,
    })
}

/// Deterministic interleaved split: every `k`-th record is held out.
pub fn split_holdout(records: &[ProbeRecord], k: usize) -> (Vec<ProbeRecord>, Vec<ProbeRecord>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if i % k == k - 1 {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, test)
}

/// Guided reverse runs over `per_color` scenes of each color, recording the
/// step-averaged maps toward the color and object tokens. Returns
/// `(color records, object records)`.
pub fn build_probe_dataset(
    model: &ToyAttentionModel,
    vocab: &SemanticVocabulary,
    colors: &[Color],
    per_color: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<ProbeRecord>, Vec<ProbeRecord>)> {
    if model.is_untrained() {
        return Err(Error::Untrained);
    }
    if colors.is_empty() || per_color == 0 {
        return Err(Error::InvalidParameter("need at least one color and scene".into()));
    }
    let sched = sampler.schedule()?;
    let jobs: Vec<(usize, Color, usize)> = colors
        .iter()
        .flat_map(|c| (0..per_color).map(move |i| (*c, i)))
        .enumerate()
        .map(|(k, (c, i))| (k, c, i))
        .collect();
    let results: Vec<(ProbeRecord, ProbeRecord)> = jobs
        .par_iter()
        .map(|&(k, color, _)| probe_run(model, vocab, &sched, sampler, color, k, seed))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

fn probe_run(
    model: &ToyAttentionModel,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    color: Color,
    index: usize,
    seed: u64,
) -> Result<(ProbeRecord, ProbeRecord)> {
    let task = child_task(seed, index as u64);
    let mut rng = derive_stream(seed, task);
    let mut scene = sample_dataset(1, &mut rng)?.remove(0);
    scene.factors.color = color;
    let scene = render_scene(&scene.factors)?;
    let object = scene.factors.object.name();
    let cond = encode_prompt(vocab, &[("color", color.name()), ("object", object)])?;
    let uncond = vocab.null_embedding(cond.len());
    let t = sched.timestep_for_strength(sampler.forward_fraction)?;
    let x0 = LatentImage::clean(patchify(&scene.raster)?)?;
    let eps = NoiseDraw::sample(&mut rng, x0.shape(), (seed, task));
    let mut z = forward_noise(&x0, t, &eps, sched)?;
    let layers = model.config().layers;
    let v = model.config().image_tokens;
    let mut sums = [vec![vec![0.0; v]; layers], vec![vec![0.0; v]; layers]];
    let mut steps = 0.0;
    while z.timestep > 0 {
        let (_, taps) = model.predict_with_taps(&z, &cond)?;
        let taps = taps.expect("toy models always tap");
        for (slot, id) in cond.ids.iter().enumerate() {
            for map in extract_attention_maps(&taps, *id)? {
                for (s, m) in sums[slot][map.layer].iter_mut().zip(&map.values) {
                    *s += m;
                }
            }
        }
        steps += 1.0;
        let e = guided_eps(model, &z, &cond, &uncond, sampler.guidance_scale)?;
        z = reverse_step(&z, &e, sched, sampler.variance, &mut rng)?;
    }
    let [color_maps, object_maps] = sums.map(|layers| {
        layers
            .into_iter()
            .map(|m| m.into_iter().map(|x| x / steps).collect())
            .collect::<Vec<Vec<f64>>>()
    });
    Ok((
        ProbeRecord {
            token: "color".into(),
            maps: color_maps,
            label: color.index(),
            scene: index,
        },
        ProbeRecord {
            token: "object".into(),
            maps: object_maps,
            label: color.index(),
            scene: index,
        },
    ))
}
