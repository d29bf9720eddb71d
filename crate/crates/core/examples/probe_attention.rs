//! Trains both toy denoisers, probes their color-token attention maps, and
//! reports how well the color probes transfer to the object token.

use eimlab::denoiser::{ConditioningMode, ToyAttentionModel, ToyConfig};
use eimlab::diffusion::{NoiseSchedule, SamplerConfig};
use eimlab::metrics::{build_probe_dataset, eval_transfer, split_holdout, train_probe, ProbeConfig};
use eimlab::rng::derive_stream;
use eimlab::scene::{sample_dataset, Color};
use eimlab::text::SemanticVocabulary;
use eimlab::train::{train_denoiser, TrainConfig};

fn main() -> eimlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let per_color = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let restandardize = args.get(2).map(|s| s != "shared").unwrap_or(true);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(40);
    let train_cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let data = sample_dataset(600, &mut derive_stream(7, 0))?;
    let probe_cfg = ProbeConfig {
        restandardize,
        ..ProbeConfig::default()
    };
    for mode in [ConditioningMode::Joint, ConditioningMode::Cross] {
        let model = ToyAttentionModel::new(ToyConfig::new(mode, seed))?;
        let (model, report) = train_denoiser(model, &data, &vocab, &sched, &train_cfg)?;
        let (color, object) =
            build_probe_dataset(&model, &vocab, &Color::ALL, per_color, &SamplerConfig::default(), 11)?;
        let (train, held) = split_holdout(&color, 4);
        let probes = train_probe(&train, 3, &probe_cfg)?;
        let own = eval_transfer(&probes, &held, mode.name())?;
        let all = train_probe(&color, 3, &probe_cfg)?;
        let transfer = eval_transfer(&all, &object, mode.name())?;
        println!(
            "{:>5}: loss {:.3} -> {:.3}; color self {:.3} {:?}",
            mode.name(),
            report.initial_loss,
            report.final_loss(),
            own.average,
            own.per_layer.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
        println!(
            "       transfer to object {:.3} {:?} (distance from chance {:.3})",
            transfer.average,
            transfer.per_layer.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            (transfer.average - 0.5).abs()
        );
    }
    Ok(())
}
