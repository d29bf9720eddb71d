//! Tiny attention denoisers over patchified scene latents.
//!
//! Both variants share the patch embedding, timestep table, pooled-text
//! injection and output head. `Joint` concatenates image and text tokens and
//! runs one self-attention per layer over the union; `Cross` runs image
//! self-attention followed by image-to-text cross-attention. Neither uses
//! normalization layers.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttentionTaps, Denoiser};
use crate::autodiff::{Tape, Var};
use crate::diffusion::{LatentImage, DEFAULT_STEPS};
use crate::error::{ensure_shape, Error, Result};
use crate::rng::{derive_stream, normal_matrix};
use crate::text::TextEmbedding;

/// Features per 4 x 4 x 3 patch.
pub const PATCH_FEATURES: usize = 48;

const MAGIC: &[u8; 4] = b"EIMT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    Joint,
    Cross,
}

impl ConditioningMode {
    fn code(self) -> u32 {
        match self {
            ConditioningMode::Joint => 0,
            ConditioningMode::Cross => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ConditioningMode::Joint),
            1 => Ok(ConditioningMode::Cross),
            other => Err(Error::Format(format!("unknown conditioning mode {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::Joint => "joint",
            ConditioningMode::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub mode: ConditioningMode,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub image_tokens: usize,
    pub text_width: usize,
    pub steps: usize,
    /// Learned positions for text rows; off keeps the model invariant to
    /// text-token order.
    pub text_positions: bool,
    pub max_text_tokens: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(mode: ConditioningMode, seed: u64) -> Self {
        Self {
            mode,
            layers: 4,
            heads: 2,
            width: 32,
            ffn_width: 64,
            image_tokens: 16,
            text_width: 32,
            steps: DEFAULT_STEPS,
            text_positions: false,
            max_text_tokens: 8,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.ffn_width == 0 || self.image_tokens == 0 || self.text_width == 0 || self.steps == 0 {
            return Err(Error::InvalidParameter("toy model sizes must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.width;
        let mut out: Vec<(String, (usize, usize))> = vec![
            ("w_in".into(), (PATCH_FEATURES, d)),
            ("b_in".into(), (1, d)),
            ("pos".into(), (self.image_tokens, d)),
            ("time".into(), (self.steps + 1, d)),
            ("w_txt".into(), (self.text_width, d)),
            ("b_txt".into(), (1, d)),
            ("w_pool".into(), (self.text_width, d)),
        ];
        if self.text_positions {
            out.push(("txt_pos".into(), (self.max_text_tokens, d)));
        }
        let blocks: &[&str] = match self.mode {
            ConditioningMode::Joint => &["attn"],
            ConditioningMode::Cross => &["self", "cross"],
        };
        for l in 0..self.layers {
            for b in blocks {
                for p in ["q", "k", "v", "o"] {
                    out.push((format!("l{l}.{b}.{p}"), (d, d)));
                }
            }
            out.push((format!("l{l}.ffn.w1"), (d, self.ffn_width)));
            out.push((format!("l{l}.ffn.b1"), (1, self.ffn_width)));
            out.push((format!("l{l}.ffn.w2"), (self.ffn_width, d)));
            out.push((format!("l{l}.ffn.b2"), (1, d)));
        }
        out.push(("w_out".into(), (d, PATCH_FEATURES)));
        out.push(("b_out".into(), (1, PATCH_FEATURES)));
        out
    }
}

/// Provenance carried with a model: its config, the hash of its initial
/// parameters, and the training config once trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelMeta {
    pub config: ToyConfig,
    pub init_hash: String,
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct ToyForward {
    pub eps: Array2<f64>,
    pub taps: AttentionTaps,
}

/// One supervised denoising target.
#[derive(Debug, Clone)]
pub struct DenoisingExample {
    pub z_t: LatentImage,
    pub cond: TextEmbedding,
    pub eps: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyAttentionModel {
    meta: ToyModelMeta,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
}

struct Built {
    out: Var,
    attention: Vec<Vec<Var>>,
}

impl ToyAttentionModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_stream(config.seed, 0);
        let depth_scale = 1.0 / ((2 * config.layers.max(1)) as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, (r, c)) in config.layout() {
            let fan_in = (r as f64).sqrt();
            let m = if name.starts_with("b_") || name.ends_with(".b1") || name.ends_with(".b2") {
                Array2::zeros((r, c))
            } else if name == "pos" || name == "time" || name == "txt_pos" {
                normal_matrix(&mut rng, r, c) * 0.5
            } else if name.ends_with(".o") || name.ends_with(".w2") {
                normal_matrix(&mut rng, r, c) * (depth_scale / fan_in)
            } else if name == "w_txt" || name == "w_pool" {
                // token vectors are unit-norm, so unit-variance weights give
                // text rows the same per-entry scale as image tokens
                normal_matrix(&mut rng, r, c)
            } else if name == "w_out" {
                normal_matrix(&mut rng, r, c) * (0.5 / fan_in)
            } else {
                normal_matrix(&mut rng, r, c) / fan_in
            };
            names.push(name);
            params.push(m);
        }
        let mut model = Self {
            meta: ToyModelMeta {
                config,
                init_hash: String::new(),
                training: None,
            },
            names,
            params,
        };
        model.meta.init_hash = model.param_hash();
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.meta.config
    }

    pub fn meta(&self) -> &ToyModelMeta {
        &self.meta
    }

    pub fn set_training_record(&mut self, record: serde_json::Value) {
        self.meta.training = Some(record);
    }

    pub fn mode(&self) -> ConditioningMode {
        self.meta.config.mode
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// sha256 over the parameters rounded to their stored f32 form.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.iter() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_untrained(&self) -> bool {
        self.param_hash() == self.meta.init_hash
    }

    fn check_inputs(&self, z_t: &LatentImage, cond: &TextEmbedding) -> Result<()> {
        let cfg = &self.meta.config;
        ensure_shape((cfg.image_tokens, PATCH_FEATURES), z_t.shape())?;
        if cond.width() != cfg.text_width {
            return Err(Error::ShapeMismatch {
                expected: (cond.len(), cfg.text_width),
                got: cond.shape(),
            });
        }
        if cfg.text_positions && cond.len() > cfg.max_text_tokens {
            return Err(Error::InvalidParameter(format!(
                "prompt of {} tokens exceeds {} positions",
                cond.len(),
                cfg.max_text_tokens
            )));
        }
        if z_t.timestep > cfg.steps {
            return Err(Error::TimestepOutOfRange {
                t: z_t.timestep,
                max: cfg.steps,
            });
        }
        Ok(())
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &[Var],
        base: usize,
        queries: Var,
        keys: Var,
        record: &mut Vec<Var>,
    ) -> Var {
        let cfg = &self.meta.config;
        let dh = cfg.width / cfg.heads;
        let q = tape.matmul(queries, p[base]);
        let k = tape.matmul(keys, p[base + 1]);
        let v = tape.matmul(keys, p[base + 2]);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax_rows(scores);
            record.push(a);
            heads.push(tape.matmul(a, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        tape.matmul(joined, p[base + 3])
    }

    fn ffn(&self, tape: &mut Tape, p: &[Var], base: usize, x: Var) -> Var {
        let h = tape.matmul(x, p[base]);
        let h = tape.add_row(h, p[base + 1]);
        let h = tape.silu(h);
        let h = tape.matmul(h, p[base + 2]);
        tape.add_row(h, p[base + 3])
    }

    fn build(&self, tape: &mut Tape, p: &[Var], z_t: &LatentImage, cond: &TextEmbedding) -> Built {
        let cfg = &self.meta.config;
        let v = cfg.image_tokens;
        let l = cond.len();
        let x = tape.leaf(z_t.tokens.clone());
        let h = tape.matmul(x, p[0]);
        let h = tape.add_row(h, p[1]);
        let mut h = tape.add(h, p[2]);
        let time = tape.gather(p[3], &[z_t.timestep]);
        h = tape.add_row(h, time);
        let pooled = tape.leaf(cond.pooled().vector.insert_axis(ndarray::Axis(0)));
        let pooled = tape.matmul(pooled, p[6]);
        h = tape.add_row(h, pooled);

        let c = tape.leaf(cond.tokens.clone());
        let c = tape.matmul(c, p[4]);
        let mut text = tape.add_row(c, p[5]);
        let mut next = 7;
        if cfg.text_positions {
            let idx: Vec<usize> = (0..l).collect();
            let tp = tape.gather(p[next], &idx);
            text = tape.add(text, tp);
            next += 1;
        }

        let mut attention = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut record = Vec::new();
            match cfg.mode {
                ConditioningMode::Joint => {
                    let u = tape.concat_rows(h, text);
                    let a = self.attention(tape, p, next, u, u, &mut record);
                    let u = tape.add(u, a);
                    let f = self.ffn(tape, p, next + 4, u);
                    let u = tape.add(u, f);
                    h = tape.slice_rows(u, 0, v);
                    text = tape.slice_rows(u, v, l);
                    next += 8;
                }
                ConditioningMode::Cross => {
                    let mut discard = Vec::new();
                    let a = self.attention(tape, p, next, h, h, &mut discard);
                    h = tape.add(h, a);
                    let a = self.attention(tape, p, next + 4, h, text, &mut record);
                    h = tape.add(h, a);
                    let f = self.ffn(tape, p, next + 8, h);
                    h = tape.add(h, f);
                    next += 12;
                }
            }
            attention.push(record);
        }
        let out = tape.matmul(h, p[next]);
        let out = tape.add_row(out, p[next + 1]);
        Built { out, attention }
    }

    fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn forward(&self, z_t: &LatentImage, cond: &TextEmbedding) -> Result<ToyForward> {
        self.check_inputs(z_t, cond)?;
        let mut tape = Tape::new();
        let p = self.param_leaves(&mut tape);
        let built = self.build(&mut tape, &p, z_t, cond);
        let eps = tape.value(built.out).clone();
        if eps.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("toy model output".into()));
        }
        let layers = built
            .attention
            .iter()
            .map(|heads| heads.iter().map(|a| tape.value(*a).clone()).collect())
            .collect();
        Ok(ToyForward {
            eps,
            taps: AttentionTaps {
                mode: self.mode(),
                image_tokens: self.meta.config.image_tokens,
                text_ids: cond.ids.clone(),
                layers,
            },
        })
    }

    /// Mean over examples of the per-entry squared error, and its gradient
    /// for every parameter tensor.
    pub fn loss_and_grad(&self, batch: &[DenoisingExample]) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let mut tape = Tape::new();
        let p = self.param_leaves(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_inputs(&ex.z_t, &ex.cond)?;
            ensure_shape(ex.z_t.shape(), ex.eps.dim())?;
            let built = self.build(&mut tape, &p, &ex.z_t, &ex.cond);
            losses.push(tape.mse(built.out, ex.eps.clone()));
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = tape.add(total, *l);
        }
        let total = tape.scale(total, 1.0 / batch.len() as f64);
        let loss = tape.value(total)[[0, 0]];
        let mut grads = tape.backward(total);
        let out = p
            .iter()
            .zip(&self.params)
            .map(|(v, param)| grads[v.index()].take().unwrap_or_else(|| Array2::zeros(param.dim())))
            .collect();
        Ok((loss, out))
    }

    pub fn loss(&self, batch: &[DenoisingExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let f = self.forward(&ex.z_t, &ex.cond)?;
            total += (&f.eps - &ex.eps).mapv(|d| d * d).mean().unwrap_or(0.0);
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Writes the binary parameter file and its JSON sidecar
    /// (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.meta.config;
        let mut buf = Vec::with_capacity(24 + 4 * self.param_count());
        buf.extend_from_slice(MAGIC);
        for word in [
            FORMAT_VERSION,
            cfg.mode.code(),
            cfg.layers as u32,
            cfg.heads as u32,
            cfg.width as u32,
        ] {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        for p in &self.params {
            for v in p.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        let shapes: Vec<_> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| serde_json::json!({ "name": n, "shape": [p.nrows(), p.ncols()] }))
            .collect();
        let sidecar = serde_json::json!({ "meta": self.meta, "tensors": shapes });
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let meta: ToyModelMeta = serde_json::from_value(sidecar["meta"].clone())?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing EIMT header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", word(0))));
        }
        let cfg = &meta.config;
        let header = [
            ConditioningMode::from_code(word(1))?.code(),
            word(2),
            word(3),
            word(4),
        ];
        if header != [cfg.mode.code(), cfg.layers as u32, cfg.heads as u32, cfg.width as u32] {
            return Err(Error::Format("header disagrees with sidecar config".into()));
        }
        let layout = cfg.layout();
        let expected: usize = layout.iter().map(|(_, (r, c))| r * c).sum();
        if bytes.len() != 24 + 4 * expected {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                4 * expected,
                bytes.len() - 24
            )));
        }
        let mut offset = 24;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, (r, c)) in layout {
            let vals: Vec<f64> = bytes[offset..offset + 4 * r * c]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            offset += 4 * r * c;
            names.push(name);
            params.push(Array2::from_shape_vec((r, c), vals).expect("sized"));
        }
        Ok(Self { meta, names, params })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Denoiser for ToyAttentionModel {
    fn predict(&self, z_t: &LatentImage, cond: &TextEmbedding) -> Result<Array2<f64>> {
        Ok(self.forward(z_t, cond)?.eps)
    }

    fn latent_shape(&self) -> (usize, usize) {
        (self.meta.config.image_tokens, PATCH_FEATURES)
    }

    fn predict_with_taps(
        &self,
        z_t: &LatentImage,
        cond: &TextEmbedding,
    ) -> Result<(Array2<f64>, Option<AttentionTaps>)> {
        let f = self.forward(z_t, cond)?;
        Ok((f.eps, Some(f.taps)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::extract_attention_maps;
    use crate::text::{Prompt, SemanticVocabulary};
    use approx::assert_abs_diff_eq;

    fn inputs(seed: u64) -> (SemanticVocabulary, LatentImage, TextEmbedding) {
        let vocab = SemanticVocabulary::scene_default(3);
        let mut rng = derive_stream(seed, 1);
        let z = LatentImage::new(normal_matrix(&mut rng, 16, PATCH_FEATURES), 20).unwrap();
        let cond = vocab
            .encode(&Prompt::from_names(&vocab, &[("color", "red"), ("object", "circle"), ("size", "0.5")]).unwrap())
            .unwrap();
        (vocab, z, cond)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for mode in [ConditioningMode::Joint, ConditioningMode::Cross] {
            let model = ToyAttentionModel::new(ToyConfig::new(mode, 1)).unwrap();
            let (_, z, cond) = inputs(2);
            let f = model.forward(&z, &cond).unwrap();
            assert_eq!(f.taps.layers.len(), 4);
            for heads in &f.taps.layers {
                assert_eq!(heads.len(), 2);
                for a in heads {
                    let expect = match mode {
                        ConditioningMode::Joint => (19, 19),
                        ConditioningMode::Cross => (16, 3),
                    };
                    assert_eq!(a.dim(), expect);
                    for row in a.rows() {
                        assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn joint_mass_accounting() {
        let model = ToyAttentionModel::new(ToyConfig::new(ConditioningMode::Joint, 4)).unwrap();
        let (_, z, cond) = inputs(3);
        let f = model.forward(&z, &cond).unwrap();
        let maps: Vec<_> = cond
            .ids
            .iter()
            .map(|id| extract_attention_maps(&f.taps, *id).unwrap())
            .collect();
        for layer in 0..4 {
            let heads = &f.taps.layers[layer];
            for i in 0..16 {
                let image_mass: f64 = heads
                    .iter()
                    .map(|a| (0..16).map(|j| a[[i, j]]).sum::<f64>())
                    .sum::<f64>()
                    / heads.len() as f64;
                let text_mass: f64 = maps.iter().map(|m| m[layer].values[i]).sum();
                assert_abs_diff_eq!(image_mass + text_mass, 1.0, epsilon = 1e-12);
                assert!(maps.iter().all(|m| (0.0..=1.0).contains(&m[layer].values[i])));
            }
        }
    }

    #[test]
    fn text_permutation_invariance_without_positions() {
        for mode in [ConditioningMode::Joint, ConditioningMode::Cross] {
            let model = ToyAttentionModel::new(ToyConfig::new(mode, 9)).unwrap();
            let (vocab, z, cond) = inputs(4);
            let perm = [2usize, 0, 1];
            let mut rows = Array2::zeros(cond.shape());
            let mut ids = Vec::new();
            for (i, &p) in perm.iter().enumerate() {
                rows.row_mut(i).assign(&cond.tokens.row(p));
                ids.push(cond.ids[p]);
            }
            let shuffled = TextEmbedding::new(rows, ids).unwrap();
            let a = model.predict(&z, &cond).unwrap();
            let b = model.predict(&z, &shuffled).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
            let _ = vocab;
        }
    }

    #[test]
    fn forward_is_deterministic_and_width_checked() {
        let model = ToyAttentionModel::new(ToyConfig::new(ConditioningMode::Joint, 2)).unwrap();
        let (vocab, z, cond) = inputs(5);
        let a = model.predict(&z, &cond).unwrap();
        let b = model.predict(&z, &cond).unwrap();
        assert_eq!(a, b);
        let narrow = TextEmbedding::new(Array2::zeros((1, 8)), vec![crate::text::TokenId::NULL]).unwrap();
        assert!(matches!(model.predict(&z, &narrow), Err(Error::ShapeMismatch { .. })));
        let _ = vocab;
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.eimt");
        let model = ToyAttentionModel::new(ToyConfig::new(ConditioningMode::Cross, 6)).unwrap();
        model.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EIMT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let back = ToyAttentionModel::load(&path).unwrap();
        assert_eq!(back.param_hash(), model.param_hash());
        assert!(back.is_untrained());
        for (a, b) in back.params().iter().zip(model.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, (*y as f32) as f64);
            }
        }
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(ToyAttentionModel::load(&path), Err(Error::Format(_))));
    }
}
