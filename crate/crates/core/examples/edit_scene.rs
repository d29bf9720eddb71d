//! Edits one attribute of a scene with the closed-form disentangled model,
//! reverses the edit, and sweeps the edit degree.
//!
//! `cargo run --example edit_scene -- size 0.9 out_dir`

use eimlab::denoiser::{ConditionMap, GaussianFactorConfig, GaussianFactorModel};
use eimlab::diffusion::{NoiseSchedule, SamplerConfig};
use eimlab::distill::HSDSConfig;
use eimlab::pipeline::{eim_edit, reverse_edit, threshold_sweep, AnalyticCodec, EditOptions, EditRequest};
use eimlab::scene::{render_scene, FactorVector, FACTOR_NAMES};
use eimlab::text::{EditPlan, SemanticVocabulary};

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn main() -> eimlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let attr = args.get(1).map(String::as_str).unwrap_or("size");
    let to = args.get(2).map(String::as_str).unwrap_or("0.9");
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
    let from = scene.factors.value_name(attr)?;
    let req = EditRequest {
        scene,
        plan: EditPlan::single(attr, &from, to, 1.0),
        sampler: SamplerConfig {
            guidance_scale: 1.0,
            ..SamplerConfig::default()
        },
        hsds: HSDSConfig::default(),
        options: EditOptions::default(),
        seed: 0,
    };
    let report = eim_edit(&req, &model, &codec, &vocab, &sched)?;
    println!("factors  {}", FACTOR_NAMES.join(" "));
    println!("source   {}", fmt(&report.source_factors));
    println!("edited   {}", fmt(&report.recovered));
    let back = reverse_edit(&report, &model, &codec, &vocab, &sched)?;
    println!("reversed {}", fmt(&back.recovered));
    if let Some(dir) = args.get(3) {
        report.write_artifacts(std::path::Path::new(dir), "edit")?;
        println!("wrote {dir}/edit.*");
    }
    println!("alpha target_delta max_drift");
    for row in threshold_sweep(&req, &[0.2, 0.4, 0.6, 0.8, 1.0], 8, &model, &codec, &vocab, &sched)? {
        println!("{:.1}   {:.3}        {:.3}", row.alpha, row.target_delta, row.max_drift);
    }
    Ok(())
}
