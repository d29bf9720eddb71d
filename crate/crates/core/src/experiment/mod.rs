//! Config-driven experiment runs: dispatch, artifacts, manifests, sweeps.

mod config;
mod output;

pub use config::{Command, ModelKind, RunConfig};
pub use output::{bar_chart, line_chart, write_manifest_atomic, ArtifactEntry, OutputDir, RunManifest, MANIFEST_VERSION};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::denoiser::{
    ConditionMap, ConditioningMode, Denoiser, GaussianFactorConfig, GaussianFactorModel, ToyAttentionModel, ToyConfig,
};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::distill::DistillTrace;
use crate::error::{Error, Result};
use crate::metrics::{
    build_probe_dataset, eval_transfer, sde_flip_average, semantic_loss_sweep, split_holdout, train_probe,
    write_semantic_loss_csv, ProbeConfig, SdeConfig,
};
use crate::pipeline::{eim_edit, reverse_edit, threshold_sweep, AnalyticCodec, EditOptions, EditRequest, LatentCodec, PatchCodec};
use crate::rng::{child_task, derive_stream};
use crate::scene::{render_scene, sample_dataset, sample_grid_scenes, Color, FactorVector, FACTOR_NAMES};
use crate::text::{EditPlan, SemanticVocabulary};
use crate::theory::{concentration_bound, concentration_mc, extension_check, write_concentration_csv, ConcentrationReport};
use crate::train::{train_denoiser, TrainConfig, TrainReport};

/// Scalar results of a run, keyed by name.
pub type Summary = BTreeMap<String, f64>;

/// A failed run: exit code 2 for schema problems, 1 for runtime ones.
#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub exit_code: i32,
    pub stage: String,
    pub error: String,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl RunFailure {
    pub fn schema(error: impl ToString) -> Self {
        Self {
            exit_code: 2,
            stage: "config".into(),
            error: error.to_string(),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: Summary,
    pub manifest: RunManifest,
}

/// Reads a config file. Any problem is a schema failure.
pub fn load_config(path: &Path) -> std::result::Result<RunConfig, RunFailure> {
    let text = std::fs::read_to_string(path).map_err(|e| RunFailure::schema(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text).map_err(RunFailure::schema)
}

/// `--out`, then the config's `output_dir`, then `$EIMLAB_OUT/<command>-<hash>`
/// (or `runs/` when the variable is unset).
pub fn resolve_out_dir(cfg: &RunConfig, cli_out: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = cli_out {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = &cfg.output_dir {
        return Ok(PathBuf::from(p));
    }
    let root = std::env::var_os("EIMLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    Ok(root.join(format!("{}-{}", cfg.command, &cfg.hash()?[..12])))
}

fn stage_of(e: &Error, fallback: &str) -> String {
    match e {
        Error::Stage { stage, .. } => (*stage).to_string(),
        _ => fallback.to_string(),
    }
}

/// Runs `cfg` into `out_dir` on a pool of `cfg.jobs` threads (one in
/// deterministic mode). Writes `manifest.json` on success and failure, and
/// `error.json` on failure.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> std::result::Result<RunOutcome, RunFailure> {
    cfg.validate().map_err(RunFailure::schema)?;
    let jobs = if cfg.deterministic { 1 } else { cfg.jobs.unwrap_or_else(rayon::current_num_threads) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunFailure::schema(format!("`jobs`: {e}")))?;
    pool.install(|| run_in(cfg, out_dir, jobs))
}

fn run_in(cfg: &RunConfig, out_dir: &Path, jobs: usize) -> std::result::Result<RunOutcome, RunFailure> {
    let start = Instant::now();
    let runtime = |e: Error, stage: String| RunFailure {
        exit_code: 1,
        stage,
        error: e.to_string(),
        out_dir: Some(out_dir.to_path_buf()),
    };
    let hash = cfg.hash().map_err(|e| runtime(e, "config".into()))?;
    let mut out = OutputDir::create(out_dir).map_err(|e| runtime(e, "output".into()))?;
    let result = out
        .json("config.json", cfg)
        .and_then(|_| dispatch(cfg, &mut out))
        .and_then(|summary| {
            out.json("summary.json", &summary)?;
            Ok(summary)
        });
    let (status, failure) = match &result {
        Ok(_) => ("ok", None),
        Err(e) => {
            let f = RunFailure {
                exit_code: if matches!(e, Error::Config(_)) { 2 } else { 1 },
                stage: stage_of(e, cfg.command.name()),
                error: e.to_string(),
                out_dir: Some(out_dir.to_path_buf()),
            };
            let _ = out.json("error.json", &f);
            ("failed", Some(f))
        }
    };
    let manifest = out
        .checksums()
        .map(|outputs| RunManifest {
            command: cfg.command.name().into(),
            config_hash: hash,
            manifest_version: MANIFEST_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            jobs,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            status: status.into(),
            outputs,
        })
        .and_then(|m| write_manifest_atomic(out.path(), &m).map(|_| m))
        .map_err(|e| runtime(e, "manifest".into()))?;
    match (result, failure) {
        (Ok(summary), _) => Ok(RunOutcome {
            out_dir: out_dir.to_path_buf(),
            summary,
            manifest,
        }),
        (Err(_), Some(f)) => Err(f),
        (Err(e), None) => Err(runtime(e, cfg.command.name().into())),
    }
}

fn dispatch(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    match cfg.command {
        Command::Edit => run_edit(cfg, out),
        Command::Sde => run_sde(cfg, out),
        Command::Probe => run_probe(cfg, out),
        Command::Theory => run_theory(cfg, out),
        Command::Train => run_train(cfg, out),
        Command::SemanticLoss => run_semantic_loss(cfg, out),
        Command::Sweep => run_sweep(cfg, out),
    }
}

fn sampler(cfg: &RunConfig, sched: &NoiseSchedule) -> SamplerConfig {
    SamplerConfig {
        guidance_scale: cfg.guidance(),
        total_steps: sched.steps(),
        forward_fraction: cfg.forward_fraction,
        variance: cfg.variance,
    }
}

enum Model {
    Analytic(GaussianFactorModel),
    Toy(ToyAttentionModel),
}

impl Model {
    fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Model::Analytic(m) => m,
            Model::Toy(m) => m,
        }
    }

    fn codec(&self) -> Box<dyn LatentCodec + '_> {
        match self {
            Model::Analytic(m) => Box::new(AnalyticCodec { model: m }),
            Model::Toy(_) => Box::new(PatchCodec),
        }
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed: cfg.model_seed,
        ..TrainConfig::default()
    }
}

fn train_toy(cfg: &RunConfig, vocab: &SemanticVocabulary, sched: &NoiseSchedule) -> Result<(ToyAttentionModel, TrainReport)> {
    let mode = match cfg.model {
        ModelKind::Joint => ConditioningMode::Joint,
        ModelKind::Cross => ConditioningMode::Cross,
        _ => return Err(Error::Config("`model`: expected joint or cross".into())),
    };
    let data = sample_dataset(cfg.train_scenes, &mut derive_stream(cfg.model_seed, 7)).map_err(|e| e.at_stage("data"))?;
    let model = ToyAttentionModel::new(ToyConfig::new(mode, cfg.model_seed))?;
    train_denoiser(model, &data, vocab, sched, &train_config(cfg)).map_err(|e| e.at_stage("train"))
}

fn write_losses(out: &mut OutputDir, report: &TrainReport) -> Result<()> {
    out.csv("train_loss.csv", |w| {
        w.write_record(["epoch", "loss"])?;
        for (i, l) in report.epoch_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:.10}")])?;
        }
        Ok(())
    })?;
    let pts = report.epoch_losses.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect();
    out.svg("train_loss.svg", &line_chart("training loss", "epoch", "loss", &[("loss".into(), pts)]))
}

fn load_model(cfg: &RunConfig, vocab: &SemanticVocabulary, sched: &NoiseSchedule, out: &mut OutputDir) -> Result<Model> {
    match cfg.model {
        ModelKind::Disentangled | ModelKind::Entangled => {
            let gc = if cfg.model == ModelKind::Disentangled {
                GaussianFactorConfig::disentangled(cfg.model_seed)
            } else {
                GaussianFactorConfig::entangled(cfg.model_seed)
            };
            Ok(Model::Analytic(GaussianFactorModel::new(gc, vocab, ConditionMap::scene(vocab)?, sched.clone())?))
        }
        ModelKind::Joint | ModelKind::Cross => {
            if let Some(path) = &cfg.model_path {
                return ToyAttentionModel::load(Path::new(path)).map(Model::Toy).map_err(|e| e.at_stage("load"));
            }
            let (model, report) = train_toy(cfg, vocab, sched)?;
            write_losses(out, &report)?;
            Ok(Model::Toy(model))
        }
    }
}

fn source_scene(cfg: &RunConfig) -> Result<crate::scene::Scene> {
    render_scene(&FactorVector::from_coordinates(&cfg.scene)?).map_err(|e| e.at_stage("scene"))
}

fn trace_artifacts(out: &mut OutputDir, trace: &DistillTrace) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    out.bytes("trace.csv", &buf)?;
    let pts = |v: &[f64]| v.iter().enumerate().map(|(i, g)| (i as f64, *g)).collect::<Vec<_>>();
    out.svg(
        "trace.svg",
        &line_chart(
            "direction search",
            "iteration",
            "value",
            &[("gradient norm".into(), pts(&trace.grad_norms)), ("alignment".into(), pts(&trace.alignment))],
        ),
    )
}

fn run_edit(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let model = load_model(cfg, &vocab, &sched, out)?;
    let codec = model.codec();
    let scene = source_scene(cfg)?;
    let from = scene.factors.value_name(&cfg.attribute).map_err(|e| e.at_stage("describe"))?;
    let template = EditRequest {
        scene,
        plan: EditPlan::single(&cfg.attribute, &from, &cfg.to, cfg.degree),
        sampler: sampler(cfg, &sched),
        hsds: cfg.hsds(),
        options: EditOptions {
            full_prompt: cfg.full_prompt,
            context_target: cfg.context_target,
            pooled_offset: cfg.pooled_offset,
            ..EditOptions::default()
        },
        seed: cfg.seed,
    };
    let reports = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let req = EditRequest {
                seed: child_task(cfg.seed, s),
                ..template.clone()
            };
            eim_edit(&req, model.denoiser(), codec.as_ref(), &vocab, &sched)
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &reports[0];
    out.json("edit.json", first)?;
    out.ppm("source.ppm", &first.source_raster)?;
    out.ppm("edited.ppm", &first.edited_raster)?;
    trace_artifacts(out, &first.trace)?;
    out.csv("edits.csv", |w| {
        let mut header = vec!["seed".to_string(), "off_target_drift".into()];
        header.extend(FACTOR_NAMES.iter().map(|n| format!("recovered_{n}")));
        w.write_record(&header)?;
        for r in &reports {
            let mut rec = vec![r.seed.to_string(), format!("{:.10}", r.off_target_drift())];
            rec.extend(r.recovered.iter().map(|v| format!("{v:.10}")));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    let n = reports.len() as f64;
    let target = first.targets[0];
    let mean: Vec<f64> = (0..first.recovered.len())
        .map(|i| reports.iter().map(|r| r.recovered[i]).sum::<f64>() / n)
        .collect();
    let mean_drift = (0..mean.len())
        .filter(|i| *i != target)
        .map(|i| (mean[i] - first.source_factors[i]).abs())
        .fold(0.0, f64::max);
    let mut summary = Summary::new();
    summary.insert("target_factor".into(), mean[target]);
    summary.insert("off_target_drift_of_mean".into(), mean_drift);
    summary.insert("mean_off_target_drift".into(), reports.iter().map(|r| r.off_target_drift()).sum::<f64>() / n);
    summary.insert("image_direction_norm".into(), first.image_direction_norm);
    if cfg.reverse {
        let back = reverse_edit(first, model.denoiser(), codec.as_ref(), &vocab, &sched)?;
        out.json("reverse.json", &back)?;
        out.ppm("reversed.ppm", &back.edited_raster)?;
        summary.insert("reverse_max_error".into(), back.drift.iter().copied().fold(0.0, f64::max));
    }
    if !cfg.alphas.is_empty() {
        let rows = threshold_sweep(&template, &cfg.alphas, cfg.seeds, model.denoiser(), codec.as_ref(), &vocab, &sched)?;
        out.csv("threshold.csv", |w| {
            w.write_record(["alpha", "target_delta", "max_drift", "projection", "tau", "within_bound"])?;
            for r in &rows {
                w.write_record([
                    r.alpha.to_string(),
                    format!("{:.10}", r.target_delta),
                    format!("{:.10}", r.max_drift),
                    format!("{:.10}", r.projection),
                    format!("{:.10}", r.tau),
                    r.within_bound.to_string(),
                ])?;
            }
            Ok(())
        })?;
        let series = |f: fn(&crate::pipeline::ThresholdRow) -> f64| rows.iter().map(|r| (r.alpha, f(r))).collect();
        out.svg(
            "threshold.svg",
            &line_chart(
                "degree sweep",
                "alpha",
                "change",
                &[("target delta".into(), series(|r| r.target_delta)), ("max drift".into(), series(|r| r.max_drift))],
            ),
        )?;
    }
    Ok(summary)
}

fn run_sde(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let model = load_model(cfg, &vocab, &sched, out)?;
    let codec = model.codec();
    let scenes = sample_grid_scenes(cfg.scenes, &[Color::Red, Color::Blue], &mut derive_stream(cfg.seed, 0))?;
    let sde_cfg = SdeConfig {
        forward_fraction: cfg.forward_fraction,
        guidance_scale: cfg.guidance(),
        seeds: cfg.seeds,
        full_prompt: cfg.full_prompt,
        variance: cfg.variance,
    };
    let reports = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| sde_flip_average(s, &vocab, model.denoiser(), codec.as_ref(), &sched, &sde_cfg, child_task(cfg.seed, i as u64 + 1)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("sde"))?;
    out.csv("sde.csv", |w| {
        w.write_record(["scene", "color", "object", "conditioned", "edited", "ratio", "total"])?;
        for (i, (s, r)) in scenes.iter().zip(&reports).enumerate() {
            w.write_record([
                i.to_string(),
                s.factors.color.name().to_string(),
                s.factors.object.name().to_string(),
                format!("{:.10}", r.conditioned),
                format!("{:.10}", r.edited),
                format!("{:.10}", r.ratio),
                format!("{:.10}", r.total),
            ])?;
        }
        Ok(())
    })?;
    let n = reports.len() as f64;
    let mean = |f: fn(&crate::metrics::SDEReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut summary = Summary::new();
    summary.insert("sde_conditioned".into(), mean(|r| r.conditioned));
    summary.insert("sde_edited".into(), mean(|r| r.edited));
    summary.insert("sde_ratio".into(), mean(|r| r.ratio));
    summary.insert("sde_total".into(), mean(|r| r.total));
    let labels: Vec<String> = summary.keys().map(|k| k.trim_start_matches("sde_").to_string()).collect();
    out.svg("sde.svg", &bar_chart("SDE", "mean", &labels, &[("mean".into(), summary.values().copied().collect())]))?;
    Ok(summary)
}

fn run_semantic_loss(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let model = load_model(cfg, &vocab, &sched, out)?;
    let codec = model.codec();
    let scene = source_scene(cfg)?;
    let smp = sampler(cfg, &sched);
    let sweep = |conditioned| {
        semantic_loss_sweep(
            &scene,
            &cfg.strengths,
            model.denoiser(),
            codec.as_ref(),
            &vocab,
            &sched,
            &smp,
            conditioned,
            cfg.full_prompt,
            cfg.seeds,
            cfg.seed,
        )
        .map_err(|e| e.at_stage("semantic-loss"))
    };
    let (free, pinned) = (sweep(false)?, sweep(true)?);
    let rows: Vec<_> = free.iter().chain(&pinned).cloned().collect();
    let mut buf = Vec::new();
    write_semantic_loss_csv(&rows, &mut buf)?;
    out.bytes("semantic_loss.csv", &buf)?;
    let avg = |r: &crate::metrics::SemanticLossRow| r.std.iter().sum::<f64>() / r.std.len() as f64;
    let line = |rs: &[crate::metrics::SemanticLossRow]| rs.iter().map(|r| (r.strength, avg(r))).collect();
    out.svg(
        "semantic_loss.svg",
        &line_chart(
            "factor spread after resampling",
            "strength",
            "mean factor std",
            &[("unconditioned".into(), line(&free)), ("conditioned".into(), line(&pinned))],
        ),
    )?;
    let (f, p) = (avg(free.last().expect("strengths are nonempty")), avg(pinned.last().expect("strengths are nonempty")));
    let mut summary = Summary::new();
    summary.insert("unconditioned_std".into(), f);
    summary.insert("conditioned_std".into(), p);
    summary.insert("std_ratio".into(), if p > 0.0 { f / p } else { f64::INFINITY });
    Ok(summary)
}

fn run_probe(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let Model::Toy(model) = load_model(cfg, &vocab, &sched, out)? else {
        return Err(Error::Config("`model`: probing needs a toy model".into()));
    };
    let probe_cfg = ProbeConfig {
        restandardize: cfg.restandardize,
        ..ProbeConfig::default()
    };
    let (color, object) = build_probe_dataset(&model, &vocab, &Color::ALL, cfg.per_color, &sampler(cfg, &sched), cfg.seed)
        .map_err(|e| e.at_stage("probe-data"))?;
    let (train, held) = split_holdout(&color, 4);
    let own = eval_transfer(&train_probe(&train, 3, &probe_cfg)?, &held, "self").map_err(|e| e.at_stage("probe"))?;
    let all = train_probe(&color, 3, &probe_cfg).map_err(|e| e.at_stage("probe"))?;
    let transfer = eval_transfer(&all, &object, "transfer").map_err(|e| e.at_stage("probe"))?;
    out.csv("probe.csv", |w| {
        w.write_record(["layer", "self_accuracy", "transfer_accuracy"])?;
        for (l, (a, b)) in own.per_layer.iter().zip(&transfer.per_layer).enumerate() {
            w.write_record([l.to_string(), format!("{a:.10}"), format!("{b:.10}")])?;
        }
        Ok(())
    })?;
    out.json("probe.json", &serde_json::json!({ "self": own, "transfer": transfer }))?;
    let labels: Vec<String> = (0..own.per_layer.len()).map(|l| format!("layer {l}")).collect();
    out.svg(
        "probe.svg",
        &bar_chart(
            "color probe accuracy",
            "balanced accuracy",
            &labels,
            &[("color token".into(), own.per_layer.clone()), ("object token".into(), transfer.per_layer.clone())],
        ),
    )?;
    let mut summary = Summary::new();
    summary.insert("self_accuracy".into(), own.average);
    summary.insert("transfer_accuracy".into(), transfer.average);
    summary.insert("transfer_distance_from_chance".into(), (transfer.average - 0.5).abs());
    Ok(summary)
}

fn run_theory(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let mut grid = Vec::new();
    for &m in &cfg.m_values {
        for &d in &cfg.d_values {
            for &a in &cfg.alpha_values {
                grid.push((m, d, a));
            }
        }
    }
    let first_c = cfg.c_values[0];
    let base = grid
        .iter()
        .enumerate()
        .map(|(i, &(m, d, a))| concentration_mc(m, d, a, first_c, cfg.samples, child_task(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("concentration"))?;
    // the estimate does not depend on c; only the bound is re-evaluated
    let all: Vec<_> = cfg
        .c_values
        .iter()
        .flat_map(|&c| {
            base.iter().map(move |r| {
                let bound = concentration_bound(r.m, r.d, r.alpha, c);
                ConcentrationReport {
                    c,
                    bound,
                    bound_holds: r.estimate >= bound,
                    ..r.clone()
                }
            })
        })
        .collect();
    let mut buf = Vec::new();
    write_concentration_csv(&all, &mut buf)?;
    out.bytes("concentration.csv", &buf)?;
    let text: String = all.iter().map(|r| r.summary() + "\n").collect();
    out.bytes("concentration.txt", text.as_bytes())?;
    let reports = base;
    let mut series = Vec::new();
    for &m in &cfg.m_values {
        for &d in &cfg.d_values {
            let pts = reports.iter().filter(|r| r.m == m && r.d == d).map(|r| (r.alpha, r.estimate)).collect();
            series.push((format!("m={m} d={d}"), pts));
        }
    }
    out.svg("concentration.svg", &line_chart("P(|sum| <= tau)", "alpha", "estimate", &series))?;
    let m = *cfg.m_values.iter().max().expect("validated nonempty");
    let d = *cfg.d_values.iter().max().expect("validated nonempty");
    let mut rng = derive_stream(cfg.seed, u64::MAX);
    let dirs: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| crate::rng::standard_normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let ext = extension_check(&dirs).map_err(|e| e.at_stage("extension"))?;
    out.json("extension.json", &ext)?;
    let mut summary = Summary::new();
    summary.insert("max_z_score".into(), reports.iter().map(|r| r.z_score()).fold(0.0, f64::max));
    summary.insert(
        "bound_hold_fraction".into(),
        all.iter().filter(|r| r.bound_holds).count() as f64 / all.len() as f64,
    );
    summary.insert("extension_max_inner".into(), ext.max_inner);
    Ok(summary)
}

fn run_train(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let vocab = SemanticVocabulary::scene_default(0);
    let sched = NoiseSchedule::default();
    let (model, report) = train_toy(cfg, &vocab, &sched)?;
    write_losses(out, &report)?;
    model.save(&out.path().join("model.eimt")).map_err(|e| e.at_stage("save"))?;
    out.register("model.eimt")?;
    out.register("model.eimt.json")?;
    let mut summary = Summary::new();
    summary.insert("initial_loss".into(), report.initial_loss);
    summary.insert("final_loss".into(), report.final_loss());
    Ok(summary)
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn run_sweep(cfg: &RunConfig, out: &mut OutputDir) -> Result<Summary> {
    let points = cfg.grid_points();
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| (0..cfg.sweep_seeds as u64).map(move |r| (p, r))).collect();
    let root = out.path().to_path_buf();
    let results: Vec<(String, std::result::Result<RunOutcome, RunFailure>)> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let name = format!("points/point-{p:03}-r{r}");
            let child = match cfg.point_config(&points[p], r) {
                Ok(c) => c,
                Err(e) => return (name, Err(RunFailure::schema(e))),
            };
            let jobs = rayon::current_num_threads();
            (name.clone(), run_in(&child, &root.join(&name), jobs))
        })
        .collect();
    let keys: Vec<&String> = cfg.grid.keys().collect();
    let metrics: BTreeSet<String> = results
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .flat_map(|o| o.summary.keys().cloned())
        .collect();
    let mut failures = 0;
    out.csv("sweep.csv", |w| {
        let mut header: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
        header.extend(["replicate", "seed", "status", "stage", "error"].map(String::from));
        header.extend(metrics.iter().cloned());
        w.write_record(&header)?;
        for (&(p, r), (_, res)) in jobs.iter().zip(&results) {
            let mut rec: Vec<String> = keys.iter().map(|k| cell(&points[p][*k])).collect();
            rec.push(r.to_string());
            rec.push(child_task(cfg.seed, r).to_string());
            match res {
                Ok(o) => {
                    rec.extend(["ok".into(), String::new(), String::new()]);
                    rec.extend(metrics.iter().map(|m| o.summary.get(m).map(|v| format!("{v:.10}")).unwrap_or_default()));
                }
                Err(f) => {
                    failures += 1;
                    rec.extend(["failed".into(), f.stage.clone(), f.error.clone()]);
                    rec.extend(metrics.iter().map(|_| String::new()));
                }
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    for (name, res) in &results {
        let sub = match res {
            Ok(o) => o.manifest.outputs.clone(),
            Err(_) => continue,
        };
        for entry in sub {
            out.register(&format!("{name}/{}", entry.name))?;
        }
    }
    let primary = cfg.sweep_command.map(primary_metric).unwrap_or("");
    if metrics.contains(primary) {
        let numeric_x = keys.first().filter(|k| points.iter().all(|p| p[**k].is_number()));
        let mut series = Vec::new();
        for r in 0..cfg.sweep_seeds as u64 {
            let pts = jobs
                .iter()
                .zip(&results)
                .filter(|((_, rr), _)| *rr == r)
                .filter_map(|((p, _), (_, res))| {
                    let y = *res.as_ref().ok()?.summary.get(primary)?;
                    let x = numeric_x.map(|k| points[*p][*k].as_f64().unwrap_or(0.0)).unwrap_or(*p as f64);
                    Some((x, y))
                })
                .collect();
            series.push((format!("replicate {r}"), pts));
        }
        let x_label = numeric_x.map(|k| k.as_str()).unwrap_or("grid point");
        out.svg("sweep.svg", &line_chart(primary, x_label, primary, &series))?;
    }
    let mut summary = Summary::new();
    summary.insert("runs".into(), results.len() as f64);
    summary.insert("failures".into(), failures as f64);
    Ok(summary)
}

/// The summary value plotted for a command in sweeps.
pub fn primary_metric(cmd: Command) -> &'static str {
    match cmd {
        Command::Edit => "target_factor",
        Command::Sde => "sde_total",
        Command::Probe => "transfer_accuracy",
        Command::Theory => "max_z_score",
        Command::Train => "final_loss",
        Command::SemanticLoss => "unconditioned_std",
        Command::Sweep => "runs",
    }
}
