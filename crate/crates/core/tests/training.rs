use eimlab::denoiser::{ConditioningMode, ToyAttentionModel, ToyConfig};
use eimlab::diffusion::{forward_noise, reverse_sample, NoiseDraw, NoiseSchedule, SamplerConfig};
use eimlab::metrics::psnr;
use eimlab::pipeline::{LatentCodec, PatchCodec};
use eimlab::rng::{child_task, derive_stream};
use eimlab::scene::{sample_dataset, Scene};
use eimlab::text::{Prompt, SemanticVocabulary};
use eimlab::train::{train_denoiser, TrainConfig, TrainReport};

fn train(mode: ConditioningMode, vocab: &SemanticVocabulary) -> (ToyAttentionModel, ToyAttentionModel, TrainReport) {
    let data = sample_dataset(600, &mut derive_stream(7, 0)).unwrap();
    let fresh = ToyAttentionModel::new(ToyConfig::new(mode, 1)).unwrap();
    let (trained, report) =
        train_denoiser(fresh.clone(), &data, vocab, &NoiseSchedule::default(), &TrainConfig::default()).unwrap();
    (fresh, trained, report)
}

/// Mean PSNR of conditioned reconstructions from 0.75 of the schedule.
fn reconstruction_psnr(model: &ToyAttentionModel, scenes: &[Scene], vocab: &SemanticVocabulary) -> f64 {
    let sched = NoiseSchedule::default();
    let sampler = SamplerConfig::default();
    let t = sched.timestep_for_strength(sampler.forward_fraction).unwrap();
    let full = TrainConfig::default().full_prompt;
    let mut total = 0.0;
    for (i, scene) in scenes.iter().enumerate() {
        let task = child_task(5, i as u64);
        let z0 = PatchCodec.encode(scene).unwrap();
        let eps = NoiseDraw::sample(&mut derive_stream(5, task), z0.shape(), (5, task));
        let zt = forward_noise(&z0, t, &eps, &sched).unwrap();
        let pairs = scene.factors.prompt(full);
        let names: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let cond = vocab.encode(&Prompt::from_names(vocab, &names).unwrap()).unwrap();
        let uncond = vocab.null_embedding(cond.len());
        let out = reverse_sample(&zt, &cond, &uncond, model, &sampler, &sched, &mut derive_stream(task, 1)).unwrap();
        total += psnr(&scene.raster, &PatchCodec.decode(&out).unwrap()).unwrap();
    }
    total / scenes.len() as f64
}

#[test]
fn training_improves_reconstruction_and_modes_are_comparable() {
    let vocab = SemanticVocabulary::scene_default(0);
    let held_out = sample_dataset(50, &mut derive_stream(99, 0)).unwrap();
    let (fresh, joint, joint_report) = train(ConditioningMode::Joint, &vocab);
    let before = reconstruction_psnr(&fresh, &held_out, &vocab);
    let after = reconstruction_psnr(&joint, &held_out, &vocab);
    assert!(after >= before + 5.0, "psnr {before:.2} -> {after:.2}");

    let (_, _, cross_report) = train(ConditioningMode::Cross, &vocab);
    let (a, b) = (joint_report.final_loss(), cross_report.final_loss());
    assert!(a.max(b) <= 2.0 * a.min(b), "final losses {a} and {b}");
}
