//! Mean SDE of the disentangled and entangled analytic models over batches
//! of grid scenes.

use eimlab::denoiser::{ConditionMap, GaussianFactorConfig, GaussianFactorModel};
use eimlab::diffusion::NoiseSchedule;
use eimlab::metrics::{sde_flip_average, SdeConfig};
use eimlab::pipeline::AnalyticCodec;
use eimlab::rng::derive_stream;
use eimlab::scene::{sample_grid_scenes, Color};
use eimlab::text::SemanticVocabulary;

fn main() -> eimlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let batches: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let per_batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let build = |cfg| GaussianFactorModel::new(cfg, &vocab, ConditionMap::scene(&vocab)?, sched.clone());
    let clean = build(GaussianFactorConfig::disentangled(2))?;
    let mixed = build(GaussianFactorConfig::entangled(2))?;
    let cfg = SdeConfig::default();
    let mut wins = 0;
    for b in 0..batches {
        let scenes = sample_grid_scenes(per_batch, &[Color::Red, Color::Blue], &mut derive_stream(b, 0))?;
        let mean = |model: &GaussianFactorModel| -> eimlab::Result<f64> {
            let codec = AnalyticCodec { model };
            let mut total = 0.0;
            for (i, s) in scenes.iter().enumerate() {
                total += sde_flip_average(s, &vocab, model, &codec, &sched, &cfg, b * 1000 + i as u64)?.total;
            }
            Ok(total / scenes.len() as f64)
        };
        let (d, e) = (mean(&clean)?, mean(&mixed)?);
        wins += (d < e) as u32;
        println!("batch {b}: disentangled {d:.4}  entangled {e:.4}");
    }
    println!("disentangled lower in {wins}/{batches} batches");
    Ok(())
}
