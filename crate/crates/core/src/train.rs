//! Denoising training for the toy attention models and a finite-difference
//! gradient check.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoisingExample, ToyAttentionModel};
use crate::diffusion::{forward_noise, LatentImage, NoiseDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, Stream};
use crate::scene::{patchify, Scene};
use crate::text::{encode_prompt, SemanticVocabulary, TextEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fraction of examples trained against the null prompt, for guidance.
    pub null_prompt_rate: f64,
    /// Condition on quantized size and position as well as color and object.
    pub full_prompt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            null_prompt_rate: 0.1,
            full_prompt: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(
                "learning rate must be nonnegative and momentum in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.null_prompt_rate) {
            return Err(Error::InvalidParameter("null prompt rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&self.initial_loss)
    }
}

/// The text condition the toy models see for a scene.
pub fn scene_condition(vocab: &SemanticVocabulary, scene: &Scene, full: bool) -> Result<TextEmbedding> {
    let prompt = scene.factors.prompt(full);
    let pairs: Vec<(&str, &str)> = prompt.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
    encode_prompt(vocab, &pairs)
}

/// One noised example per scene with a uniform timestep in `1..=T`.
pub fn denoising_examples(
    scenes: &[&Scene],
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<Vec<DenoisingExample>> {
    scenes
        .iter()
        .map(|scene| {
            let x0 = LatentImage::clean(patchify(&scene.raster)?)?;
            let t = rng.random_range(1..=sched.steps());
            let eps = NoiseDraw::sample(rng, x0.shape(), (cfg.seed, t as u64));
            let z_t = forward_noise(&x0, t, &eps, sched)?;
            let cond = if rng.random::<f64>() < cfg.null_prompt_rate {
                let len = scene.factors.prompt(cfg.full_prompt).len();
                vocab.null_embedding(len)
            } else {
                scene_condition(vocab, scene, cfg.full_prompt)?
            };
            Ok(DenoisingExample {
                z_t,
                cond,
                eps: eps.values,
            })
        })
        .collect()
}

/// SGD with momentum on the mean squared noise-prediction error.
pub fn train_denoiser(
    mut model: ToyAttentionModel,
    data: &[Scene],
    vocab: &SemanticVocabulary,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(ToyAttentionModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("training data is empty".into()));
    }
    let mut velocity: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.dim())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut initial = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = derive_stream(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<&Scene> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = denoising_examples(&scenes, vocab, sched, cfg, &mut rng)?;
            let (loss, grads) = model.loss_and_grad(&batch)?;
            let first = *initial.get_or_insert(loss);
            if !loss.is_finite() || loss > 10.0 * first {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    initial: first,
                });
            }
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                v.zip_mut_with(g, |vi, gi| *vi = cfg.momentum * *vi + gi);
                p.scaled_add(-cfg.learning_rate, v);
            }
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    let report = TrainReport {
        initial_loss: initial.unwrap_or(f64::NAN),
        epoch_losses,
    };
    model.set_training_record(serde_json::json!({ "config": cfg, "report": report }));
    Ok((model, report))
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h` over `probes` randomly chosen parameter
/// entries. Relative error is `|fd - an| / max(|fd|, |an|, 1e-6)`.
pub fn finite_diff_check(
    model: &ToyAttentionModel,
    batch: &[DenoisingExample],
    probes: usize,
    h: f64,
    rng: &mut Stream,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::InvalidParameter("probe count must be positive".into()));
    }
    let (_, grads) = model.loss_and_grad(batch)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut tensor = 0;
        while k >= sizes[tensor] {
            k -= sizes[tensor];
            tensor += 1;
        }
        let cols = model.params()[tensor].ncols();
        let idx = (k / cols, k % cols);
        let orig = model.params()[tensor][idx];
        probe.params_mut()[tensor][idx] = orig + h;
        let plus = probe.loss_and_grad(batch)?.0;
        probe.params_mut()[tensor][idx] = orig - h;
        let minus = probe.loss_and_grad(batch)?.0;
        probe.params_mut()[tensor][idx] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let an = grads[tensor][idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConditioningMode, ToyConfig};
    use crate::scene::sample_dataset;

    fn setup(layers: usize) -> (ToyAttentionModel, Vec<Scene>, SemanticVocabulary, NoiseSchedule) {
        let mut cfg = ToyConfig::new(ConditioningMode::Joint, 3);
        cfg.layers = layers;
        let model = ToyAttentionModel::new(cfg).unwrap();
        let data = sample_dataset(12, &mut derive_stream(1, 0)).unwrap();
        (model, data, SemanticVocabulary::scene_default(0), NoiseSchedule::default())
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (model, data, vocab, sched) = setup(1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (trained, report) = train_denoiser(model.clone(), &data, &vocab, &sched, &cfg).unwrap();
        assert_eq!(trained.params(), model.params());
        assert!(trained.is_untrained());
        assert_eq!(report.epoch_losses.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data, vocab, sched) = setup(1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train_denoiser(model.clone(), &data, &vocab, &sched, &cfg).unwrap();
        let (b, _) = train_denoiser(model, &data, &vocab, &sched, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(!a.is_untrained());
    }

    #[test]
    fn divergence_aborts() {
        let (model, data, vocab, sched) = setup(1);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 50.0,
            ..TrainConfig::default()
        };
        let err = train_denoiser(model, &data, &vocab, &sched, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn linear_model_gradients_are_exact() {
        let (model, data, vocab, sched) = setup(0);
        let refs: Vec<&Scene> = data.iter().take(3).collect();
        let batch =
            denoising_examples(&refs, &vocab, &sched, &TrainConfig::default(), &mut derive_stream(2, 2)).unwrap();
        let err = finite_diff_check(&model, &batch, 40, 1e-3, &mut derive_stream(2, 3)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn full_model_gradients_match() {
        for mode in [ConditioningMode::Joint, ConditioningMode::Cross] {
            let model = ToyAttentionModel::new(ToyConfig::new(mode, 5)).unwrap();
            let data = sample_dataset(3, &mut derive_stream(1, 0)).unwrap();
            let refs: Vec<&Scene> = data.iter().collect();
            let vocab = SemanticVocabulary::scene_default(0);
            let batch = denoising_examples(
                &refs,
                &vocab,
                &NoiseSchedule::default(),
                &TrainConfig::default(),
                &mut derive_stream(2, 2),
            )
            .unwrap();
            let err = finite_diff_check(&model, &batch, 30, 1e-3, &mut derive_stream(2, 4)).unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (model, data, vocab, sched) = setup(1);
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train_denoiser(model.clone(), &data, &vocab, &sched, &cfg).is_err());
        assert!(finite_diff_check(&model, &[], 0, 1e-3, &mut derive_stream(0, 0)).is_err());
    }
}
