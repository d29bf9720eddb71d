//! Trains the joint- and cross-attention toy denoisers on the same scenes
//! and prints their loss curves.

use std::time::Instant;

use eimlab::denoiser::{ConditioningMode, ToyAttentionModel, ToyConfig};
use eimlab::diffusion::NoiseSchedule;
use eimlab::rng::derive_stream;
use eimlab::scene::sample_dataset;
use eimlab::text::SemanticVocabulary;
use eimlab::train::{train_denoiser, TrainConfig};

fn main() -> eimlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let data = sample_dataset(600, &mut derive_stream(7, 0))?;
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    for mode in [ConditioningMode::Joint, ConditioningMode::Cross] {
        let start = Instant::now();
        let model = ToyAttentionModel::new(ToyConfig::new(mode, 1))?;
        let (_, report) = train_denoiser(model, &data, &vocab, &sched, &cfg)?;
        println!(
            "{:>5}: initial {:.4} final {:.4} ({:.1}s)",
            mode.name(),
            report.initial_loss,
            report.final_loss(),
            start.elapsed().as_secs_f64()
        );
        let curve: Vec<String> = report.epoch_losses.iter().map(|l| format!("{l:.3}")).collect();
        println!("       {}", curve.join(" "));
    }
    Ok(())
}
