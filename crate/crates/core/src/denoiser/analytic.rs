//! Closed-form Gaussian factor denoiser.
//!
//! Clean latents are `z0 = b + A s` with orthonormal loadings `A` and
//! factors `s ~ N(mu_c, diag(1 / p_c))`, where the prompt `c` sets the
//! factor means and precisions. Because the prior is Gaussian and the
//! forward process is linear, the posterior of `z0` given `z_t` is exact
//! and factorizes over factors.
//!
//! The prompt is read as follows. Every row whose token identity belongs to
//! a factor's attribute is decoded by a linear readout that maps each value
//! token of that attribute to its target mean, so interpolated rows decode
//! to interpolated targets. Rows compete for conditioning strength through
//! a softmax over their norms (uniform for in-vocabulary rows); a row
//! pushed far off the token sphere starves the others, which is how large
//! edit degrees corrupt unrelated factors. The mixing matrix `M` routes
//! target offsets between factors: identity for the disentangled variant,
//! dense for the entangled one.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::diffusion::{LatentImage, NoiseSchedule};
use crate::error::{ensure_shape, Error, Result};
use crate::linalg::{min_norm_solution, orthonormalize_columns};
use crate::rng::{derive_stream, normal_matrix};
use crate::text::{SemanticVocabulary, TextEmbedding, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFactorConfig {
    pub image_tokens: usize,
    pub token_width: usize,
    pub sigma2_cond: f64,
    pub sigma2_free: f64,
    /// Prior mean of an unconditioned factor.
    pub free_mean: f64,
    /// Off-diagonal value of the mixing matrix; 0 gives the disentangled variant.
    pub entanglement: f64,
    /// Temperature of the softmax over prompt-row norms; 0 disables it.
    pub share_sharpness: f64,
    pub base_scale: f64,
    pub seed: u64,
}

impl GaussianFactorConfig {
    pub fn disentangled(seed: u64) -> Self {
        Self {
            image_tokens: 16,
            token_width: 32,
            sigma2_cond: 0.01,
            sigma2_free: 1.0,
            free_mean: 0.5,
            entanglement: 0.0,
            share_sharpness: 1.0,
            base_scale: 0.1,
            seed,
        }
    }

    pub fn entangled(seed: u64) -> Self {
        Self {
            entanglement: 0.35,
            ..Self::disentangled(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma2_cond > 0.0) || !(self.sigma2_free > 0.0) {
            return Err(Error::Degenerate("factor variances must be positive".into()));
        }
        if self.sigma2_cond >= self.sigma2_free {
            return Err(Error::InvalidParameter(
                "conditioned variance must be below the free variance".into(),
            ));
        }
        if self.image_tokens == 0 || self.token_width == 0 {
            return Err(Error::InvalidParameter("latent shape must be nonempty".into()));
        }
        Ok(())
    }
}

/// token -> (factor index, target mean), plus the tokens of each factor.
#[derive(Debug, Clone)]
pub struct ConditionMap {
    by_token: HashMap<TokenId, (usize, f64)>,
    factor_tokens: Vec<Vec<(TokenId, f64)>>,
}

impl ConditionMap {
    pub fn new(entries: &[(TokenId, usize, f64)], factor_count: usize) -> Result<Self> {
        let mut by_token = HashMap::new();
        let mut factor_tokens = vec![Vec::new(); factor_count];
        for &(id, factor, target) in entries {
            if factor >= factor_count {
                return Err(Error::InvalidParameter(format!(
                    "factor {factor} out of range for {factor_count} factors"
                )));
            }
            if id.is_null() {
                return Err(Error::InvalidParameter("the null token cannot condition".into()));
            }
            by_token.insert(id, (factor, target));
            factor_tokens[factor].push((id, target));
        }
        if factor_tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidParameter("every factor needs a token".into()));
        }
        Ok(Self {
            by_token,
            factor_tokens,
        })
    }

    /// Factors `[color, object, size, x, y]` of the scene vocabulary, with
    /// targets equal to the normalized factor coordinates.
    pub fn scene(vocab: &SemanticVocabulary) -> Result<Self> {
        let mut entries = Vec::new();
        for (f, (attr, value, target)) in [
            ("color", "red", 0.0),
            ("color", "green", 0.5),
            ("color", "blue", 1.0),
            ("object", "square", 0.0),
            ("object", "circle", 1.0),
        ]
        .iter()
        .map(|(a, v, t)| (if *a == "color" { 0 } else { 1 }, (a, v, t)))
        {
            entries.push((vocab.token(attr, value)?, f, *target));
        }
        for (f, attr) in ["size", "x", "y"].iter().enumerate() {
            let a = vocab.attribute_index(attr)?;
            for (v, id) in vocab.values(a).iter().zip(vocab.value_tokens(a)) {
                let target: f64 = v
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("value `{v}` is not numeric")))?;
                entries.push((id, f + 2, target));
            }
        }
        Self::new(&entries, 5)
    }

    /// One factor per listed attribute; value names are parsed as targets.
    pub fn levels(vocab: &SemanticVocabulary, attributes: &[&str]) -> Result<Self> {
        let mut entries = Vec::new();
        for (f, attr) in attributes.iter().enumerate() {
            let a = vocab.attribute_index(attr)?;
            for (v, id) in vocab.values(a).iter().zip(vocab.value_tokens(a)) {
                let target: f64 = v
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("value `{v}` is not numeric")))?;
                entries.push((id, f, target));
            }
        }
        Self::new(&entries, attributes.len())
    }

    pub fn factor_count(&self) -> usize {
        self.factor_tokens.len()
    }

    pub fn lookup(&self, id: TokenId) -> Option<(usize, f64)> {
        self.by_token.get(&id).copied()
    }
}

/// Per-factor prior implied by a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCondition {
    pub means: Array1<f64>,
    pub precisions: Array1<f64>,
    pub conditioned: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPosterior {
    /// `E[z0 | z_t]`, flattened row-major.
    pub mean: Array1<f64>,
    pub factor_mean: Array1<f64>,
    /// Posterior covariance, diagonal in factor coordinates.
    pub factor_variance: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianFactorModel {
    config: GaussianFactorConfig,
    loading: Array2<f64>,
    base: Array1<f64>,
    mixing: Array2<f64>,
    readouts: Vec<Array1<f64>>,
    conditions: ConditionMap,
    sched: NoiseSchedule,
}

impl GaussianFactorModel {
    pub fn new(
        config: GaussianFactorConfig,
        vocab: &SemanticVocabulary,
        conditions: ConditionMap,
        sched: NoiseSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let m = conditions.factor_count();
        let dim = config.image_tokens * config.token_width;
        if m > dim {
            return Err(Error::InvalidParameter("more factors than latent dimensions".into()));
        }
        let mut loading = normal_matrix(&mut derive_stream(config.seed, 1), dim, m);
        orthonormalize_columns(&mut loading)?;
        let base = normal_matrix(&mut derive_stream(config.seed, 2), dim, 1)
            .column(0)
            .mapv(|v| v * config.base_scale);
        let mixing = mixing_matrix(m, config.entanglement);
        Self::from_parts(config, loading, base, mixing, vocab, conditions, sched)
    }

    pub fn from_parts(
        config: GaussianFactorConfig,
        loading: Array2<f64>,
        base: Array1<f64>,
        mixing: Array2<f64>,
        vocab: &SemanticVocabulary,
        conditions: ConditionMap,
        sched: NoiseSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let m = conditions.factor_count();
        let dim = config.image_tokens * config.token_width;
        ensure_shape((dim, m), loading.dim())?;
        ensure_shape((m, m), mixing.dim())?;
        if base.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: (dim, 1),
                got: (base.len(), 1),
            });
        }
        let gram = loading.t().dot(&loading);
        for i in 0..m {
            for j in 0..m {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (gram[[i, j]] - expect).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(
                        "loading columns must be orthonormal".into(),
                    ));
                }
            }
        }
        let readouts = conditions
            .factor_tokens
            .iter()
            .map(|tokens| {
                let mut rows = Array2::zeros((tokens.len(), vocab.width()));
                for (r, (id, _)) in tokens.iter().enumerate() {
                    rows.row_mut(r).assign(&vocab.vector(*id));
                }
                let targets = Array1::from_iter(tokens.iter().map(|(_, t)| *t));
                min_norm_solution(&rows, &targets)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            loading,
            base,
            mixing,
            readouts,
            conditions,
            sched,
        })
    }

    pub fn config(&self) -> &GaussianFactorConfig {
        &self.config
    }

    pub fn factor_count(&self) -> usize {
        self.conditions.factor_count()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn loading(&self) -> &Array2<f64> {
        &self.loading
    }

    pub fn base(&self) -> &Array1<f64> {
        &self.base
    }

    pub fn mixing(&self) -> &Array2<f64> {
        &self.mixing
    }

    pub fn conditions(&self) -> &ConditionMap {
        &self.conditions
    }

    fn flatten(&self, z: &LatentImage) -> Result<Array1<f64>> {
        ensure_shape(self.latent_shape(), z.shape())?;
        Ok(Array1::from_iter(z.tokens.iter().copied()))
    }

    fn unflatten(&self, flat: Array1<f64>) -> Array2<f64> {
        Array2::from_shape_vec(self.latent_shape(), flat.to_vec()).expect("length matches")
    }

    /// Clean latent for the given factor values.
    pub fn encode_factors(&self, factors: &[f64]) -> Result<LatentImage> {
        if factors.len() != self.factor_count() {
            return Err(Error::InvalidParameter(format!(
                "expected {} factors, got {}",
                self.factor_count(),
                factors.len()
            )));
        }
        let s = Array1::from(factors.to_vec());
        let flat = &self.base + &self.loading.dot(&s);
        LatentImage::clean(self.unflatten(flat))
    }

    /// Factor coordinates of a latent, `A^T (z - b)`.
    pub fn recover_factors(&self, z: &LatentImage) -> Result<Array1<f64>> {
        let flat = self.flatten(z)?;
        Ok(self.loading.t().dot(&(flat - &self.base)))
    }

    pub fn loading_column(&self, factor: usize) -> Array2<f64> {
        self.unflatten(self.loading.column(factor).to_owned())
    }

    /// Reads the per-factor prior out of a (possibly manipulated) prompt.
    pub fn condition(&self, cond: &TextEmbedding) -> Result<PromptCondition> {
        let m = self.factor_count();
        let l = cond.len();
        if cond.width() != self.readouts[0].len() {
            return Err(Error::ShapeMismatch {
                expected: (l, self.readouts[0].len()),
                got: cond.shape(),
            });
        }
        let norms: Vec<f64> = cond
            .tokens
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let k = self.config.share_sharpness;
        let top = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = norms.iter().map(|n| (k * (n - top)).exp()).collect();
        let total: f64 = weights.iter().sum();
        let shares: Vec<f64> = weights.iter().map(|w| w * l as f64 / total).collect();

        let free = self.config.free_mean;
        let mut targets = Array1::from_elem(m, free);
        let mut strength = vec![0.0; m];
        let mut conditioned = vec![false; m];
        for (r, id) in cond.ids.iter().enumerate() {
            if let Some((f, _)) = self.conditions.lookup(*id) {
                if conditioned[f] {
                    continue;
                }
                conditioned[f] = true;
                targets[f] = self.readouts[f].dot(&cond.tokens.row(r));
                strength[f] = shares[r];
            }
        }
        let offsets = targets.mapv(|t| t - free);
        let means = self.mixing.dot(&offsets).mapv(|o| o + free);
        let p_free = 1.0 / self.config.sigma2_free;
        let p_cond = 1.0 / self.config.sigma2_cond;
        let precisions = Array1::from_iter(
            strength
                .iter()
                .map(|w| p_free + w * (p_cond - p_free)),
        );
        Ok(PromptCondition {
            means,
            precisions,
            conditioned,
        })
    }

    /// Exact Gaussian posterior of `z0` given `z_t` under the prompt's prior.
    pub fn posterior(&self, z_t: &LatentImage, cond: &TextEmbedding) -> Result<FactorPosterior> {
        self.sched.check_timestep(z_t.timestep)?;
        let flat = self.flatten(z_t)?;
        let prior = self.condition(cond)?;
        if z_t.timestep == 0 {
            let factor_mean = self.loading.t().dot(&(&flat - &self.base));
            return Ok(FactorPosterior {
                mean: flat,
                factor_mean,
                factor_variance: Array1::zeros(self.factor_count()),
            });
        }
        let (a, b) = self.sched.coefficients(z_t.timestep);
        let y = self.loading.t().dot(&(&flat - &(&self.base * a)));
        let snr = a * a / (b * b);
        let precision = &prior.precisions + snr;
        let factor_mean = Array1::from_iter(
            (0..self.factor_count())
                .map(|i| (prior.precisions[i] * prior.means[i] + a / (b * b) * y[i]) / precision[i]),
        );
        let factor_variance = precision.mapv(|p| 1.0 / p);
        let mean = &self.base + &self.loading.dot(&factor_mean);
        Ok(FactorPosterior {
            mean,
            factor_mean,
            factor_variance,
        })
    }
}

/// Identity plus `entanglement` on every off-diagonal entry.
pub(crate) fn mixing_matrix(m: usize, entanglement: f64) -> Array2<f64> {
    Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { entanglement })
}

impl Denoiser for GaussianFactorModel {
    /// `eps = (z_t - a E[z0 | z_t]) / b`.
    fn predict(&self, z_t: &LatentImage, cond: &TextEmbedding) -> Result<Array2<f64>> {
        if z_t.timestep == 0 {
            return Err(Error::TimestepMismatch(
                "noise prediction is undefined at timestep 0".into(),
            ));
        }
        let post = self.posterior(z_t, cond)?;
        let (a, b) = self.sched.coefficients(z_t.timestep);
        let flat = self.flatten(z_t)?;
        let eps = (flat - &post.mean * a) / b;
        Ok(self.unflatten(eps))
    }

    fn latent_shape(&self) -> (usize, usize) {
        (self.config.image_tokens, self.config.token_width)
    }
}

pub fn analytic_posterior(
    model: &GaussianFactorModel,
    z_t: &LatentImage,
    cond: &TextEmbedding,
) -> Result<FactorPosterior> {
    model.posterior(z_t, cond)
}

pub fn analytic_eps(
    model: &GaussianFactorModel,
    z_t: &LatentImage,
    cond: &TextEmbedding,
) -> Result<Array2<f64>> {
    model.predict(z_t, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, reverse_sample, NoiseDraw, SamplerConfig, VarianceMode};
    use crate::rng::standard_normal;
    use crate::text::{AttributeSpec, Prompt, VocabularySpec};
    use approx::assert_abs_diff_eq;

    fn level_vocab(attrs: &[&str]) -> SemanticVocabulary {
        SemanticVocabulary::new(VocabularySpec {
            seed: 4,
            width: 16,
            attributes: attrs
                .iter()
                .map(|a| AttributeSpec {
                    name: a.to_string(),
                    values: (0..=10).map(crate::text::level_name).collect(),
                })
                .collect(),
        })
        .unwrap()
    }

    fn small_config(v: usize, d: usize) -> GaussianFactorConfig {
        GaussianFactorConfig {
            image_tokens: v,
            token_width: d,
            ..GaussianFactorConfig::disentangled(0)
        }
    }

    /// D = m = 1, A = 1, b = 0, unconditioned prior N(0, 1).
    fn scalar_model(sched: NoiseSchedule) -> (GaussianFactorModel, TextEmbedding) {
        let vocab = level_vocab(&["f"]);
        let mut cfg = small_config(1, 1);
        cfg.free_mean = 0.0;
        let model = GaussianFactorModel::from_parts(
            cfg,
            Array2::ones((1, 1)),
            Array1::zeros(1),
            Array2::eye(1),
            &vocab,
            ConditionMap::levels(&vocab, &["f"]).unwrap(),
            sched,
        )
        .unwrap();
        (model, vocab.null_embedding(1))
    }

    #[test]
    fn scalar_symmetric_posterior() {
        let (model, null) = scalar_model(NoiseSchedule::build(1, 0.5, 0.5).unwrap());
        let z = LatentImage::new(Array2::from_elem((1, 1), 1.3), 1).unwrap();
        let post = model.posterior(&z, &null).unwrap();
        // a = b = sqrt(0.5): E = a C (a^2 C + b^2)^-1 z = z / sqrt(2)
        assert_abs_diff_eq!(post.mean[0], 1.3 / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(post.factor_variance[0], 0.5, epsilon = 1e-12);
        let eps = model.predict(&z, &null).unwrap();
        assert_abs_diff_eq!(eps[[0, 0]], 1.3 / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn clean_latent_posterior_is_itself() {
        let (model, null) = scalar_model(NoiseSchedule::default());
        let z = LatentImage::clean(Array2::from_elem((1, 1), -0.4)).unwrap();
        let post = model.posterior(&z, &null).unwrap();
        assert_eq!(post.mean[0], -0.4);
        assert_eq!(post.factor_variance[0], 0.0);
        assert!(matches!(model.predict(&z, &null), Err(Error::TimestepMismatch(_))));
    }

    #[test]
    fn zero_variance_rejected() {
        let vocab = level_vocab(&["f"]);
        let mut cfg = small_config(1, 1);
        cfg.sigma2_cond = 0.0;
        let r = GaussianFactorModel::new(
            cfg,
            &vocab,
            ConditionMap::levels(&vocab, &["f"]).unwrap(),
            NoiseSchedule::default(),
        );
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn readout_decodes_value_tokens_and_interpolations() {
        let vocab = level_vocab(&["f", "g"]);
        let model = GaussianFactorModel::new(
            small_config(4, 4),
            &vocab,
            ConditionMap::levels(&vocab, &["f", "g"]).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let p0 = vocab.encode(&Prompt::from_names(&vocab, &[("f", "0.2"), ("g", "0.7")]).unwrap()).unwrap();
        let p1 = vocab.encode(&Prompt::from_names(&vocab, &[("f", "0.9"), ("g", "0.7")]).unwrap()).unwrap();
        let c0 = model.condition(&p0).unwrap();
        assert_abs_diff_eq!(c0.means[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(c0.means[1], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(c0.precisions[0], 100.0, epsilon = 1e-9);
        let mid = crate::text::apply_text_direction(
            &p0,
            &crate::text::text_direction(&p0, &p1, 0.5).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(model.condition(&mid).unwrap().means[0], 0.55, epsilon = 1e-12);
        let null = model.condition(&vocab.null_embedding(2)).unwrap();
        assert_eq!(null.conditioned, vec![false, false]);
        assert_abs_diff_eq!(null.precisions[0], 1.0, epsilon = 1e-12);
    }

    /// D = 4, m = 2: exact posterior vs self-normalized importance sampling
    /// from the prior.
    #[test]
    fn posterior_matches_importance_sampling() {
        let vocab = level_vocab(&["f", "g"]);
        let mut cfg = small_config(2, 2);
        cfg.sigma2_cond = 0.25;
        let model = GaussianFactorModel::new(
            cfg,
            &vocab,
            ConditionMap::levels(&vocab, &["f", "g"]).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let cond = vocab.encode(&Prompt::from_names(&vocab, &[("f", "0.3")]).unwrap()).unwrap();
        let sched = model.schedule().clone();
        let mut rng = derive_stream(77, 0);
        let z0 = model.encode_factors(&[0.6, -0.4]).unwrap();
        let eps = NoiseDraw::sample(&mut rng, (2, 2), (77, 0));
        let t = 30;
        let zt = forward_noise(&z0, t, &eps, &sched).unwrap();
        let exact = model.posterior(&zt, &cond).unwrap();

        let prior = model.condition(&cond).unwrap();
        let (a, b) = sched.coefficients(t);
        let obs: Vec<f64> = zt.tokens.iter().copied().collect();
        let n = 1_000_000;
        let mut wsum = 0.0;
        let mut acc = [0.0; 4];
        for _ in 0..n {
            let s: Vec<f64> = (0..2)
                .map(|i| prior.means[i] + standard_normal(&mut rng) / prior.precisions[i].sqrt())
                .collect();
            let z: Vec<f64> = (0..4)
                .map(|k| model.base[k] + model.loading[[k, 0]] * s[0] + model.loading[[k, 1]] * s[1])
                .collect();
            let sq: f64 = (0..4).map(|k| (obs[k] - a * z[k]).powi(2)).sum();
            let w = (-sq / (2.0 * b * b)).exp();
            wsum += w;
            for k in 0..4 {
                acc[k] += w * z[k];
            }
        }
        for k in 0..4 {
            assert_abs_diff_eq!(acc[k] / wsum, exact.mean[k], epsilon = 1e-2);
        }
    }

    #[test]
    fn eps_reconstruction_identity() {
        let vocab = SemanticVocabulary::scene_default(1);
        let model = GaussianFactorModel::new(
            GaussianFactorConfig::entangled(3),
            &vocab,
            ConditionMap::scene(&vocab).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let cond = vocab
            .encode(&Prompt::from_names(&vocab, &[("color", "blue"), ("size", "0.4")]).unwrap())
            .unwrap();
        let mut rng = derive_stream(1, 9);
        let zt = LatentImage::new(normal_matrix(&mut rng, 16, 32), 21).unwrap();
        let eps = model.predict(&zt, &cond).unwrap();
        let post = model.posterior(&zt, &cond).unwrap();
        let (a, b) = model.schedule().coefficients(21);
        for (k, (z, e)) in zt.tokens.iter().zip(eps.iter()).enumerate() {
            assert_abs_diff_eq!(*z, a * post.mean[k] + b * e, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_prior_predicts_the_true_noise() {
        let vocab = level_vocab(&["f"]);
        let mut cfg = small_config(2, 2);
        cfg.sigma2_cond = 1e-14;
        let model = GaussianFactorModel::new(
            cfg,
            &vocab,
            ConditionMap::levels(&vocab, &["f"]).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let cond = vocab.encode(&Prompt::from_names(&vocab, &[("f", "0.8")]).unwrap()).unwrap();
        let z0 = model.encode_factors(&[0.8]).unwrap();
        let mut rng = derive_stream(3, 3);
        let eps = NoiseDraw::sample(&mut rng, (2, 2), (3, 3));
        // the complement of the loading column carries no prior variance
        let zt = forward_noise(&z0, 38, &eps, model.schedule()).unwrap();
        let hat = model.predict(&zt, &cond).unwrap();
        let col = model.loading_column(0);
        let along: f64 = (&hat - &eps.values).iter().zip(col.iter()).map(|(x, c)| x * c).sum();
        assert!(along.abs() < 1e-6, "{along}");
    }

    #[test]
    fn disentangled_token_edit_moves_only_its_column() {
        let vocab = SemanticVocabulary::scene_default(2);
        let model = GaussianFactorModel::new(
            GaussianFactorConfig::disentangled(5),
            &vocab,
            ConditionMap::scene(&vocab).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let full = |size: &str| {
            vocab
                .encode(
                    &Prompt::from_names(
                        &vocab,
                        &[("color", "red"), ("object", "circle"), ("size", size), ("x", "0.5"), ("y", "0.3")],
                    )
                    .unwrap(),
                )
                .unwrap()
        };
        let mut rng = derive_stream(4, 4);
        let zt = LatentImage::new(normal_matrix(&mut rng, 16, 32), 38).unwrap();
        let a = model.posterior(&zt, &full("0.2")).unwrap();
        let b = model.posterior(&zt, &full("0.9")).unwrap();
        let delta = &b.mean - &a.mean;
        let col = model.loading.column(2);
        let on = delta.dot(&col);
        let off = &delta - &(&col * on);
        assert!(on.abs() > 0.1);
        assert!(off.iter().all(|v| v.abs() < 1e-10));

        let ent = GaussianFactorModel::new(
            GaussianFactorConfig::entangled(5),
            &vocab,
            ConditionMap::scene(&vocab).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let a = ent.posterior(&zt, &full("0.2")).unwrap();
        let b = ent.posterior(&zt, &full("0.9")).unwrap();
        let df = &b.factor_mean - &a.factor_mean;
        for j in [0usize, 1, 3, 4] {
            assert!(df[j].abs() >= 0.3 * df[2].abs(), "factor {j}: {} vs {}", df[j], df[2]);
        }
    }

    #[test]
    fn unconditioned_posterior_std_grows_with_timestep() {
        let (model, null) = scalar_model(NoiseSchedule::default());
        let z = Array2::zeros((1, 1));
        let mut last = 0.0;
        for t in 1..=50 {
            let post = model.posterior(&LatentImage::new(z.clone(), t).unwrap(), &null).unwrap();
            let sd = post.factor_variance[0].sqrt();
            assert!(sd > last);
            last = sd;
        }
    }

    /// With unit prior variance the posterior-mean chain lands exactly on
    /// `E[z0 | z_t]`.
    #[test]
    fn posterior_mean_chain_reaches_exact_posterior_mean() {
        let vocab = level_vocab(&["f"]);
        let cfg = small_config(2, 4);
        let model = GaussianFactorModel::new(
            cfg,
            &vocab,
            ConditionMap::levels(&vocab, &["f"]).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let null = vocab.null_embedding(1);
        let mut rng = derive_stream(8, 8);
        let zt = LatentImage::new(normal_matrix(&mut rng, 2, 4), 38).unwrap();
        let expect = model.posterior(&zt, &null).unwrap().mean;
        let cfg = SamplerConfig {
            guidance_scale: 1.0,
            variance: VarianceMode::PosteriorMean,
            ..SamplerConfig::default()
        };
        let out = reverse_sample(&zt, &null, &null, &model, &cfg, model.schedule(), &mut rng).unwrap();
        assert_eq!(out.timestep, 0);
        for (x, y) in out.tokens.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-6);
        }
    }

    #[test]
    fn large_row_starves_other_factors() {
        let vocab = SemanticVocabulary::scene_default(2);
        let model = GaussianFactorModel::new(
            GaussianFactorConfig::disentangled(5),
            &vocab,
            ConditionMap::scene(&vocab).unwrap(),
            NoiseSchedule::default(),
        )
        .unwrap();
        let p = |s: &str| {
            vocab
                .encode(&Prompt::from_names(&vocab, &[("color", "red"), ("size", s)]).unwrap())
                .unwrap()
        };
        let (a, b) = (p("0.2"), p("0.9"));
        let big = crate::text::apply_text_direction(&a, &crate::text::text_direction(&a, &b, 5.0).unwrap()).unwrap();
        let c = model.condition(&big).unwrap();
        assert!(c.precisions[0] < 5.0, "{}", c.precisions[0]);
        assert!(c.precisions[2] > 100.0);
    }
}
