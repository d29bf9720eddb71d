//! Identifies an image-space direction with HSDS on a noised latent and
//! compares it with plain DDS optimization.

use eimlab::denoiser::{ConditionMap, GaussianFactorConfig, GaussianFactorModel};
use eimlab::diffusion::{forward_noise, NoiseDraw, NoiseSchedule};
use eimlab::distill::{dds_optimize, identify_image_direction, HSDSConfig};
use eimlab::rng::derive_stream;
use eimlab::scene::{render_scene, FactorVector};
use eimlab::text::{encode_prompt, SemanticVocabulary};

fn main() -> eimlab::Result<()> {
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let model = GaussianFactorModel::new(
        GaussianFactorConfig::disentangled(2),
        &vocab,
        ConditionMap::scene(&vocab)?,
        sched.clone(),
    )?;
    let scene = render_scene(&FactorVector::from_coordinates(&[0.0, 1.0, 0.2, 0.4, 0.6])?)?;
    let z0 = model.encode_factors(&scene.factors.coordinates())?;
    let t = sched.timestep_for_strength(0.75)?;
    let mut rng = derive_stream(0, 0);
    let eps = NoiseDraw::sample(&mut rng, z0.shape(), (0, 0));
    let zt = forward_noise(&z0, t, &eps, &sched)?;
    let src = encode_prompt(&vocab, &[("color", "red"), ("object", "circle"), ("size", "0.2")])?;
    let dst = encode_prompt(&vocab, &[("color", "red"), ("object", "circle"), ("size", "0.9")])?;

    for lambda in [0.0, 0.5, 1.0] {
        let cfg = HSDSConfig {
            lambda,
            ..HSDSConfig::default()
        };
        let (dir, trace) = identify_image_direction(&model, &zt, &src, &dst, &cfg)?;
        let along = model.loading().column(2).iter().zip(dir.delta.iter()).map(|(a, b)| a * b).sum::<f64>();
        let norm = dir.delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "hsds lambda {lambda:.1}: |n| {norm:.3}, along size column {along:.3}, last grad {:.3e}",
            trace.grad_norms.last().unwrap_or(&0.0)
        );
    }
    let (moved, trace) = dds_optimize(&model, &z0, &src, &dst, t, &HSDSConfig::default(), &sched, &mut rng)?;
    let shift = model.recover_factors(&moved)?;
    println!("dds: recovered size {:.3} after {} steps", shift[2], trace.len());
    Ok(())
}
