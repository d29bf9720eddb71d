//! How much of each factor survives forward noising and reverse sampling,
//! with and without the prompt.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{forward_noise, reverse_sample, NoiseDraw, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::pipeline::LatentCodec;
use crate::rng::{child_task, derive_stream};
use crate::scene::{Scene, FACTOR_NAMES};
use crate::text::{encode_prompt, SemanticVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticLossRow {
    pub strength: f64,
    pub timestep: usize,
    pub conditioned: bool,
    /// Across-seed mean of each recovered factor.
    pub mean: Vec<f64>,
    /// Across-seed standard deviation (n - 1 denominator).
    pub std: Vec<f64>,
}

/// For each strength, noises `scene` to `round(strength T)`, samples back
/// `seeds` times under the full prompt (or the null prompt) and reports the
/// spread of the recovered factors.
#[allow(clippy::too_many_arguments)]
pub fn semantic_loss_sweep(
    scene: &Scene,
    strengths: &[f64],
    den: &dyn Denoiser,
    codec: &dyn LatentCodec,
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    conditioned: bool,
    full_prompt: bool,
    seeds: usize,
    root_seed: u64,
) -> Result<Vec<SemanticLossRow>> {
    if seeds < 2 {
        return Err(Error::InvalidParameter("need at least two seeds for a spread".into()));
    }
    let prompt = scene.factors.prompt(full_prompt);
    let names: Vec<(&str, &str)> = prompt.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
    let cond = if conditioned {
        encode_prompt(vocab, &names)?
    } else {
        vocab.null_embedding(names.len())
    };
    let uncond = vocab.null_embedding(names.len());
    let z0 = codec.encode(scene)?;
    strengths
        .iter()
        .map(|&strength| {
            let t = sched.timestep_for_strength(strength)?;
            let samples = (0..seeds as u64)
                .map(|s| {
                    if t == 0 {
                        return codec.factors(&z0);
                    }
                    let task = child_task(root_seed, s);
                    let eps = NoiseDraw::sample(&mut derive_stream(root_seed, task), z0.shape(), (root_seed, task));
                    let z_t = forward_noise(&z0, t, &eps, sched)?;
                    let z = reverse_sample(&z_t, &cond, &uncond, den, sampler, sched, &mut derive_stream(task, 1))?;
                    codec.factors(&z)
                })
                .collect::<Result<Vec<_>>>()?;
            let k = samples[0].len();
            let n = samples.len() as f64;
            let mean: Vec<f64> = (0..k).map(|i| samples.iter().map(|f| f[i]).sum::<f64>() / n).collect();
            let std = (0..k)
                .map(|i| (samples.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
                .collect();
            Ok(SemanticLossRow {
                strength,
                timestep: t,
                conditioned,
                mean,
                std,
            })
        })
        .collect()
}

/// One line per row: strength, timestep, conditioned, then `std_<factor>`.
pub fn write_semantic_loss_csv<W: Write>(rows: &[SemanticLossRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["strength".to_string(), "timestep".into(), "conditioned".into()];
    header.extend(FACTOR_NAMES.iter().map(|n| format!("std_{n}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.strength.to_string(), r.timestep.to_string(), r.conditioned.to_string()];
        rec.extend(r.std.iter().map(|v| format!("{v:.10}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
