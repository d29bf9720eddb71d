//! Flat JSON run configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::VarianceMode;
use crate::distill::HSDSConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Command {
    Edit,
    Sde,
    Probe,
    Theory,
    Train,
    Sweep,
    SemanticLoss,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Edit => "edit",
            Command::Sde => "sde",
            Command::Probe => "probe",
            Command::Theory => "theory",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::SemanticLoss => "semantic-loss",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Closed-form factor model with an identity mixing matrix.
    Disentangled,
    /// Closed-form factor model whose prompts leak into other factors.
    Entangled,
    /// Toy transformer with joint self-attention over image and text.
    Joint,
    /// Toy transformer with cross-attention from image to text.
    Cross,
}

impl ModelKind {
    pub fn is_analytic(self) -> bool {
        matches!(self, ModelKind::Disentangled | ModelKind::Entangled)
    }
}

/// Every knob of every command. Keys a command does not read are still
/// validated and hashed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    /// Run directory; `--out` and `EIMLAB_OUT` take over when absent.
    pub output_dir: Option<String>,
    /// Worker threads; 1 is single-stream mode.
    pub jobs: Option<usize>,
    pub deterministic: bool,

    pub model: ModelKind,
    pub model_seed: u64,
    /// Saved toy model to load instead of training one.
    pub model_path: Option<String>,

    /// Factor coordinates `[color, object, size, x, y]` of the source scene.
    pub scene: [f64; 5],
    pub attribute: String,
    pub to: String,
    pub degree: f64,
    /// Also run the edit backwards and report the round trip.
    pub reverse: bool,
    /// Degrees for a threshold table next to the edit.
    pub alphas: Vec<f64>,

    /// Defaults to 1 for edits and 7.5 elsewhere.
    pub guidance_scale: Option<f64>,
    pub forward_fraction: f64,
    pub variance: VarianceMode,
    pub full_prompt: bool,
    pub context_target: bool,
    pub pooled_offset: bool,

    pub lambda: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub iterations: usize,

    pub seeds: usize,
    pub scenes: usize,
    pub strengths: Vec<f64>,

    pub m_values: Vec<usize>,
    pub d_values: Vec<usize>,
    pub alpha_values: Vec<f64>,
    /// Constants the concentration bound is evaluated at.
    pub c_values: Vec<f64>,
    pub samples: usize,

    pub train_scenes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub per_color: usize,
    pub restandardize: bool,

    pub sweep_command: Option<Command>,
    pub grid: BTreeMap<String, Vec<serde_json::Value>>,
    pub sweep_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hsds = HSDSConfig::default();
        Self {
            command: Command::Edit,
            seed: 0,
            output_dir: None,
            jobs: None,
            deterministic: false,
            model: ModelKind::Disentangled,
            model_seed: 2,
            model_path: None,
            scene: [0.0, 1.0, 0.2, 0.4, 0.6],
            attribute: "size".into(),
            to: "0.9".into(),
            degree: 1.0,
            reverse: false,
            alphas: Vec::new(),
            guidance_scale: None,
            forward_fraction: 0.75,
            variance: VarianceMode::Ancestral,
            full_prompt: true,
            context_target: true,
            pooled_offset: false,
            lambda: hsds.lambda,
            eta_start: hsds.eta_start,
            eta_end: hsds.eta_end,
            iterations: hsds.iterations,
            seeds: 1,
            scenes: 100,
            strengths: vec![0.15, 0.35, 0.55, 0.75],
            m_values: vec![1, 2, 4],
            d_values: vec![4, 16, 64],
            alpha_values: vec![1.0, 2.0],
            c_values: vec![0.01, 0.1, 0.5, 1.0],
            samples: 100_000,
            train_scenes: 600,
            epochs: 40,
            learning_rate: 0.05,
            batch_size: 16,
            per_color: 200,
            restandardize: true,
            sweep_command: None,
            grid: BTreeMap::new(),
            sweep_seeds: 1,
        }
    }
}

/// Keys left out of the hash: where and how fast a run happens, not what
/// it computes.
const UNHASHED: [&str; 3] = ["output_dir", "jobs", "deterministic"];

impl RunConfig {
    /// Parses and validates. Every failure here is a schema error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}`: {why}")));
        if self.jobs == Some(0) {
            return bad("jobs", "must be positive");
        }
        if let Some(g) = self.guidance_scale {
            if !(g >= 0.0) {
                return bad("guidance_scale", "must be nonnegative");
            }
        }
        if !(0.0..=1.0).contains(&self.forward_fraction) {
            return bad("forward_fraction", "must lie in [0, 1]");
        }
        if !self.degree.is_finite() {
            return bad("degree", "must be finite");
        }
        if self.seeds == 0 {
            return bad("seeds", "must be positive");
        }
        if self.command == Command::SemanticLoss && self.seeds < 2 {
            return bad("seeds", "semantic-loss needs at least two");
        }
        if self.command == Command::SemanticLoss && self.strengths.is_empty() {
            return bad("strengths", "must be nonempty");
        }
        if self.command == Command::Sde && self.scenes == 0 {
            return bad("scenes", "must be positive");
        }
        if self.command == Command::Theory
            && (self.m_values.is_empty() || self.d_values.is_empty() || self.alpha_values.is_empty())
        {
            return bad("m_values", "theory needs nonempty m, d and alpha lists");
        }
        if self.command == Command::Theory && (self.c_values.is_empty() || self.c_values.iter().any(|c| !(*c > 0.0))) {
            return bad("c_values", "need at least one positive constant");
        }
        if self.command == Command::Probe && self.model.is_analytic() {
            return bad("model", "probing needs a toy model (joint or cross)");
        }
        if self.command == Command::Train && self.model.is_analytic() {
            return bad("model", "training needs a toy model (joint or cross)");
        }
        if self.command == Command::Probe && self.per_color < 5 {
            return bad("per_color", "need at least five scenes per color");
        }
        if self.hsds().validate().is_err() {
            return bad("lambda", "HSDS settings are out of range");
        }
        if self.command == Command::Sweep {
            if self.grid.is_empty() || self.grid.values().any(|v| v.is_empty()) {
                return bad("grid", "must be nonempty");
            }
            match self.sweep_command {
                None => return bad("sweep_command", "required for sweeps"),
                Some(Command::Sweep) => return bad("sweep_command", "sweeps do not nest"),
                Some(_) => {}
            }
            if self.sweep_seeds == 0 {
                return bad("sweep_seeds", "must be positive");
            }
            for point in self.grid_points() {
                self.point_config(&point, 0)?;
            }
        }
        Ok(())
    }

    pub fn hsds(&self) -> HSDSConfig {
        HSDSConfig {
            lambda: self.lambda,
            eta_start: self.eta_start,
            eta_end: self.eta_end,
            iterations: self.iterations,
            ..HSDSConfig::default()
        }
    }

    pub fn guidance(&self) -> f64 {
        self.guidance_scale.unwrap_or(match self.command {
            Command::Edit => 1.0,
            _ => 7.5,
        })
    }

    /// Hex SHA-256 of the canonical JSON, sans the unhashed keys.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            for k in UNHASHED {
                map.remove(k);
            }
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }

    /// Cartesian product of the grid, keys in sorted order.
    pub fn grid_points(&self) -> Vec<BTreeMap<String, serde_json::Value>> {
        let mut points = vec![BTreeMap::new()];
        for (key, values) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(key.clone(), v.clone());
                        q
                    })
                })
                .collect();
        }
        points
    }

    /// The child config for one grid point and replicate.
    pub fn point_config(&self, point: &BTreeMap<String, serde_json::Value>, replicate: u64) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in point {
            if matches!(k.as_str(), "command" | "grid" | "sweep_command" | "sweep_seeds" | "output_dir") {
                return Err(Error::Config(format!("`{k}` cannot be swept")));
            }
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown field `{k}` in grid")));
            }
            map.insert(k.clone(), v.clone());
        }
        map.insert("command".into(), serde_json::to_value(self.sweep_command)?);
        map.insert("grid".into(), serde_json::json!({}));
        map.insert("sweep_command".into(), serde_json::Value::Null);
        map.insert("output_dir".into(), serde_json::Value::Null);
        map.insert("seed".into(), serde_json::json!(crate::rng::child_task(self.seed, replicate)));
        let child: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("grid: {e}")))?;
        child.validate()?;
        Ok(child)
    }
}
