//! Spread of recovered factors after noising to increasing strengths and
//! sampling back with and without the scene prompt.

use eimlab::denoiser::{ConditionMap, GaussianFactorConfig, GaussianFactorModel};
use eimlab::diffusion::{NoiseSchedule, SamplerConfig};
use eimlab::metrics::semantic_loss_sweep;
use eimlab::pipeline::AnalyticCodec;
use eimlab::scene::{render_scene, FactorVector};
use eimlab::text::SemanticVocabulary;

fn main() -> eimlab::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let model = GaussianFactorModel::new(
        GaussianFactorConfig::disentangled(2),
        &vocab,
        ConditionMap::scene(&vocab)?,
        sched.clone(),
    )?;
    let codec = AnalyticCodec { model: &model };
    let scene = render_scene(&FactorVector::from_coordinates(&[0.0, 1.0, 0.2, 0.4, 0.6])?)?;
    let sampler = SamplerConfig {
        guidance_scale: 1.0,
        ..SamplerConfig::default()
    };
    println!("strength  t  prompt  std(color object size x y)");
    for conditioned in [false, true] {
        let rows = semantic_loss_sweep(
            &scene,
            &[0.15, 0.35, 0.55, 0.75],
            &model,
            &codec,
            &vocab,
            &sched,
            &sampler,
            conditioned,
            true,
            seeds,
            0,
        )?;
        for r in rows {
            let std: Vec<String> = r.std.iter().map(|s| format!("{s:.3}")).collect();
            println!("{:>8.2} {:>2}  {:<6}  {}", r.strength, r.timestep, if conditioned { "yes" } else { "null" }, std.join(" "));
        }
    }
    Ok(())
}
