//! Subcommand implementations. Every command reads from and writes to
//! stage subdirectories of the run directory given by `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use vortex_nri::io::{self, Checkpoint, FieldManifest};
use vortex_nri::markers::{marker_report, EdgeTypeStats, LabeledSample, MarkerReport};
use vortex_nri::nri::{encode, Ablation, Model, Sample};
use vortex_nri::synth::simulate;
use vortex_nri::track::{track_sequence, TrajectoryTensor, CONTINUOUS_NAMES};
use vortex_nri::train::{evaluate, split, train as fit, Metrics, Preprocessing, TrainState};
use vortex_nri::Error;

use crate::config::{ExperimentConfig, MarkerSplit};
use crate::plot;
use crate::Common;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const VERSION_FILE: &str = "version.txt";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const SPLIT_FILE: &str = "split.json";
pub const MARKERS_CSV: &str = "markers.csv";
pub const EDGE_PROBS_CSV: &str = "edge_probs.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_HEADER: [&str; 8] = [
    "Ablation",
    "Existence Accuracy",
    "MAE",
    "MSE",
    "ρ",
    "p-value",
    "R²",
    "Monotonicity",
];

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<String> for CliError {
    fn from(message: String) -> Self {
        CliError::usage(message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Missing(_) | Error::Format { .. } => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub command: &'static str,
    pub cfg: ExperimentConfig,
    pub run: PathBuf,
    pub force: bool,
    pub dry_run: bool,
}

impl Context {
    pub fn new(command: &'static str, common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = Some(s);
        }
        Ok(Context {
            command,
            cfg,
            run: common.out.clone(),
            force: common.force,
            dry_run: common.dry_run,
        })
    }

    /// Creates (or, with `--force`, recreates) a stage directory and records
    /// the resolved configuration and tool version in it.
    fn prepare(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.run.join(stage);
        if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
            if !self.force {
                return Err(CliError::usage(format!(
                    "{} exists and is not empty (use --force to replace it)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let mut text = format!("# {}\n# command: {}\n", io::TOOL_VERSION, self.command);
        text.push_str(&self.cfg.to_text());
        fs::write(dir.join(RESOLVED_CONFIG), text)?;
        fs::write(dir.join(VERSION_FILE), format!("{}\n", io::TOOL_VERSION))?;
        Ok(dir)
    }

    fn tracks_dir(&self) -> PathBuf {
        self.cfg.tracks_dir.clone().unwrap_or_else(|| self.run.join("tracks"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.run.join("train").join(CHECKPOINT))
    }
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.iter().map(|h| h.as_ref()).collect::<Vec<_>>().join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

trait Cell {
    fn cell(&self) -> String;
}

impl Cell for usize {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for u64 {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for f64 {
    /// Shortest round-trip form; exponent notation outside [1e-4, 1e15).
    fn cell(&self) -> String {
        let a = self.abs();
        if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
            format!("{self:e}")
        } else {
            self.to_string()
        }
    }
}

fn cell<T: Cell>(x: T) -> String {
    x.cell()
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(cell).unwrap_or_default()
}

pub fn gen(ctx: &Context) -> Result<()> {
    let items = ctx.cfg.sweep()?.items()?;
    let target = ctx.run.join("data");
    if ctx.dry_run {
        println!("gen: {} simulations -> {}", items.len(), target.display());
        for it in &items {
            println!(
                "  {} severity={} noise_sigma={} seed={}",
                it.id, it.config.severity, it.config.noise_sigma, it.config.seed
            );
        }
        return Ok(());
    }
    let dir = ctx.prepare("data")?;
    let counts = items
        .par_iter()
        .map(|it| {
            let sim = simulate(&it.config)?;
            let d = dir.join(&it.id);
            io::write_field_sequence(&d, &FieldManifest::synthetic(&it.id, &it.config), &sim.fields)?;
            io::write_latent(&d, &sim.vortices)?;
            Ok(sim.vortices.len())
        })
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    let rows: Vec<Vec<String>> = items
        .iter()
        .zip(&counts)
        .map(|(it, &c)| {
            vec![
                it.id.clone(),
                cell(it.config.severity),
                cell(it.config.noise_sigma),
                cell(it.config.seed),
                cell(c),
            ]
        })
        .collect();
    write_csv(
        &dir.join("index.csv"),
        &["id", "severity", "noise_sigma", "seed", "latent_vortices"],
        &rows,
    )?;
    println!("gen: wrote {} simulations to {}", items.len(), dir.display());
    Ok(())
}

pub fn track(ctx: &Context) -> Result<()> {
    let src = ctx.cfg.dataset_dir.clone().unwrap_or_else(|| ctx.run.join("data"));
    let dirs = io::list_dirs_with(&src, io::FIELD_MANIFEST)?;
    if dirs.is_empty() {
        return Err(Error::Missing(src.join("<simulation>").join(io::FIELD_MANIFEST)).into());
    }
    if ctx.dry_run {
        println!(
            "track: {} field sequences in {} -> {}",
            dirs.len(),
            src.display(),
            ctx.run.join("tracks").display()
        );
        return Ok(());
    }
    ctx.cfg.detect.validate()?;
    let dir = ctx.prepare("tracks")?;
    let rows = dirs
        .par_iter()
        .map(|d| {
            let (m, fields) = io::read_field_sequence(d)?;
            let (tracks, tensor) = track_sequence(&fields, &ctx.cfg.detect, m.severity, m.noise_sigma)?;
            io::write_tensor(&dir.join(&m.id), &m.id, &tensor)?;
            Ok(vec![m.id, cell(m.severity), cell(m.noise_sigma), cell(tracks.len())])
        })
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    write_csv(&dir.join("tracks.csv"), &["id", "severity", "noise_sigma", "tracks"], &rows)?;
    println!("track: wrote {} trajectory tensors to {}", rows.len(), dir.display());
    Ok(())
}

struct Dataset {
    ids: Vec<String>,
    tensors: Vec<TrajectoryTensor>,
}

impl Dataset {
    fn load(dir: &Path) -> Result<Self> {
        let dirs = io::list_dirs_with(dir, io::TENSOR_MANIFEST)?;
        if dirs.is_empty() {
            return Err(Error::Missing(dir.join("<simulation>").join(io::TENSOR_MANIFEST)).into());
        }
        let loaded = dirs
            .par_iter()
            .map(|d| io::read_tensor(d))
            .collect::<std::result::Result<Vec<_>, Error>>()?;
        let (ids, tensors) = loaded.into_iter().map(|(m, t)| (m.id, t)).unzip();
        Ok(Dataset { ids, tensors })
    }

    fn labels(&self) -> Vec<(f64, f64)> {
        self.tensors.iter().map(|t| (t.severity, t.noise_sigma)).collect()
    }

    fn timesteps(&self) -> Result<usize> {
        let t = self.tensors[0].t;
        if self.tensors.iter().any(|x| x.t != t) {
            return Err(CliError::usage("trajectory tensors have different lengths"));
        }
        Ok(t)
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Missing(PathBuf::from(id).join(io::TENSOR_MANIFEST)).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitRecord {
    seed: u64,
    train: Vec<String>,
    eval: Vec<String>,
}

fn make_split(ctx: &Context, data: &Dataset) -> Result<SplitRecord> {
    let seed = ctx.cfg.require_seed()?;
    let s = split(&data.labels(), ctx.cfg.eval_count, seed)?;
    Ok(SplitRecord {
        seed,
        train: s.train.iter().map(|&i| data.ids[i].clone()).collect(),
        eval: s.eval.iter().map(|&i| data.ids[i].clone()).collect(),
    })
}

fn samples(data: &Dataset, ids: &[String], pre: &Preprocessing, ablation: &Ablation) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| Ok(pre.sample(&data.tensors[data.index(id)?], ablation)?))
        .collect()
}

fn log_row(epoch: usize, loss: &vortex_nri::nri::LossBreakdown, eval: Option<&Metrics>) -> Vec<String> {
    let mut r = vec![
        cell(epoch),
        cell(loss.rec_continuous),
        cell(loss.rec_orientation),
        cell(loss.exist),
        cell(loss.kl),
        cell(loss.lambda_kl),
        cell(loss.total),
    ];
    match eval {
        Some(m) => r.extend([cell(m.mse), cell(m.mae), cell(m.existence_accuracy)]),
        None => r.extend([String::new(), String::new(), String::new()]),
    }
    r
}

const LOG_HEADER: [&str; 10] = [
    "epoch",
    "rec_continuous",
    "rec_orientation",
    "exist",
    "kl",
    "lambda_kl",
    "total",
    "eval_mse",
    "eval_mae",
    "eval_accuracy",
];

struct Trained {
    model: Model,
    pre: Preprocessing,
    state: TrainState,
    log: Vec<Vec<String>>,
    eval_samples: Vec<Sample>,
}

/// Fits preprocessing on the training split and trains one variant.
fn train_variant(
    ctx: &Context,
    data: &Dataset,
    split: &SplitRecord,
    ablation: Ablation,
    mut on_checkpoint: impl FnMut(&Model, &Preprocessing, &TrainState) -> Result<()>,
) -> Result<Trained> {
    let train_tensors: Vec<&TrajectoryTensor> = split
        .train
        .iter()
        .map(|id| data.index(id).map(|i| &data.tensors[i]))
        .collect::<Result<_>>()?;
    let pre = Preprocessing::fit(&train_tensors, ctx.cfg.convention, ctx.cfg.model.distance_eps)?;
    let train_samples = samples(data, &split.train, &pre, &ablation)?;
    let eval_samples = samples(data, &split.eval, &pre, &ablation)?;
    let model = Model::new(
        vortex_nri::nri::ModelConfig {
            timesteps: data.timesteps()?,
            ..ctx.cfg.model.clone()
        },
        ablation,
    )?;
    let tcfg = ctx.cfg.train_config(ablation)?;
    let mut log = Vec::new();
    let every = ctx.cfg.checkpoint_every;
    let mut hook_err = None;
    let outcome = fit(&model, &train_samples, &eval_samples, &tcfg, |rec, state| {
        log.push(log_row(rec.epoch, &rec.loss, rec.eval.as_ref()));
        if every > 0 && state.epoch % every == 0 {
            if let Err(e) = on_checkpoint(&model, &pre, state) {
                hook_err = Some(e);
                return Err(Error::Numerical("checkpoint hook failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = hook_err {
        return Err(e);
    }
    let outcome = outcome?;
    Ok(Trained {
        model,
        pre,
        state: outcome.state,
        log,
        eval_samples,
    })
}

pub fn train(ctx: &Context) -> Result<()> {
    let seed = ctx.cfg.require_seed()?;
    let data = Dataset::load(&ctx.tracks_dir())?;
    let split = make_split(ctx, &data)?;
    if ctx.dry_run {
        println!(
            "train: {} training and {} held-out simulations, {} epochs, seed {} -> {}",
            split.train.len(),
            split.eval.len(),
            ctx.cfg.train.epochs,
            seed,
            ctx.run.join("train").display()
        );
        return Ok(());
    }
    let dir = ctx.prepare("train")?;
    io::write_json(&dir.join(SPLIT_FILE), &split)?;
    let ablation = ctx.cfg.train.ablation;
    let trained = train_variant(ctx, &data, &split, ablation, |model, pre, state| {
        let ckpt = Checkpoint {
            model: model.clone(),
            preprocessing: *pre,
            state: state.clone(),
            seed,
        };
        io::write_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", state.epoch)), &ckpt)?;
        Ok(())
    })?;
    write_csv(&dir.join("train_log.csv"), &LOG_HEADER, &trained.log)?;
    let ckpt = Checkpoint {
        model: trained.model,
        preprocessing: trained.pre,
        state: trained.state,
        seed,
    };
    io::write_checkpoint(&dir.join(CHECKPOINT), &ckpt)?;
    if let Some(last) = trained.log.last() {
        println!("train: epoch {} total loss {}", last[0], last[6]);
    }
    println!("train: wrote {}", dir.join(CHECKPOINT).display());
    Ok(())
}

fn load_checkpoint(ctx: &Context) -> Result<(Checkpoint, SplitRecord)> {
    let path = ctx.checkpoint_path();
    let ckpt = io::read_checkpoint(&path)?;
    let split_path = path.parent().unwrap_or(Path::new(".")).join(SPLIT_FILE);
    let split: SplitRecord = io::read_json(&split_path)?;
    Ok((ckpt, split))
}

fn metrics_row(name: &str, count: usize, m: &Metrics) -> Vec<String> {
    let mut r = vec![
        name.to_string(),
        cell(count),
        cell(m.existence_accuracy),
        cell(m.mse),
        cell(m.mae),
    ];
    r.extend(m.feature_mse.iter().map(|x| cell(*x)));
    r.extend(m.feature_mae.iter().map(|x| cell(*x)));
    r.extend([cell(m.existing_entries), cell(m.timeline_entries)]);
    r
}

pub fn eval(ctx: &Context) -> Result<()> {
    let (ckpt, split) = load_checkpoint(ctx)?;
    let data = Dataset::load(&ctx.tracks_dir())?;
    if ctx.dry_run {
        println!(
            "eval: {} with {} training and {} held-out simulations -> {}",
            ctx.checkpoint_path().display(),
            split.train.len(),
            split.eval.len(),
            ctx.run.join("eval").display()
        );
        return Ok(());
    }
    let ablation = ckpt.model.ablation;
    let mut summary = Vec::new();
    let mut per_sim = Vec::new();
    for (name, ids) in [("train", &split.train), ("eval", &split.eval)] {
        let s = samples(&data, ids, &ckpt.preprocessing, &ablation)?;
        let (m, preds) = evaluate(&ckpt.model, &ckpt.state.params, &s)?;
        summary.push(metrics_row(name, ids.len(), &m));
        for ((id, sample), pred) in ids.iter().zip(&s).zip(&preds) {
            let one = vortex_nri::train::compute_metrics(std::slice::from_ref(sample), std::slice::from_ref(pred));
            per_sim.push(vec![
                id.clone(),
                name.to_string(),
                cell(sample.severity),
                cell(data.tensors[data.index(id)?].noise_sigma),
                cell(one.existence_accuracy),
                cell(one.mse),
                cell(one.mae),
            ]);
        }
    }
    let dir = ctx.prepare("eval")?;
    let mut header: Vec<String> = ["split", "simulations", "existence_accuracy", "mse", "mae"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(CONTINUOUS_NAMES.iter().map(|f| format!("mse_{f}")));
    header.extend(CONTINUOUS_NAMES.iter().map(|f| format!("mae_{f}")));
    header.extend(["existing_entries".to_string(), "timeline_entries".to_string()]);
    write_csv(&dir.join("metrics.csv"), &header, &summary)?;
    write_csv(
        &dir.join("per_simulation.csv"),
        &["id", "split", "severity", "noise_sigma", "existence_accuracy", "mse", "mae"],
        &per_sim,
    )?;
    for r in &summary {
        println!("eval: {} accuracy {} mse {} mae {}", r[0], r[2], r[3], r[4]);
    }
    Ok(())
}

fn stats_json(s: &EdgeTypeStats) -> serde_json::Value {
    json!({
        "rho": s.rho,
        "p_value": s.p_value,
        "monotonicity": s.monotonicity,
        "r_squared": s.r_squared,
    })
}

/// Mean `|ΔH|` of the interaction type at the lowest and highest severity
/// levels present in the perturbation table.
fn perturbation_extremes(report: &MarkerReport) -> Option<serde_json::Value> {
    let mut by_level: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for (_, p) in &report.perturbations {
        let e = by_level.entry(p.severity.to_bits()).or_insert((p.severity, 0.0, 0));
        e.1 += p.magnitude(1);
        e.2 += 1;
    }
    let mut levels: Vec<(f64, f64)> = by_level.values().map(|&(s, sum, n)| (s, sum / n as f64)).collect();
    levels.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (lo, hi) = (levels.first()?, levels.last()?);
    Some(json!({
        "lowest_severity": lo.0,
        "lowest_mean_abs_delta_h": lo.1,
        "highest_severity": hi.0,
        "highest_mean_abs_delta_h": hi.1,
    }))
}

pub fn markers(ctx: &Context) -> Result<()> {
    let (ckpt, split) = load_checkpoint(ctx)?;
    let data = Dataset::load(&ctx.tracks_dir())?;
    let ids: Vec<String> = match ctx.cfg.marker_split {
        MarkerSplit::Eval => split.eval.clone(),
        MarkerSplit::All => split.train.iter().chain(&split.eval).cloned().collect(),
    };
    if ctx.dry_run {
        println!(
            "markers: {} simulations with {} -> {}",
            ids.len(),
            ctx.checkpoint_path().display(),
            ctx.run.join("markers").display()
        );
        return Ok(());
    }
    let model = &ckpt.model;
    let params = &ckpt.state.params;
    let s = samples(&data, &ids, &ckpt.preprocessing, &model.ablation)?;
    let items: Vec<LabeledSample> = ids
        .iter()
        .zip(&s)
        .map(|(id, sample)| {
            Ok(LabeledSample {
                id,
                noise_sigma: data.tensors[data.index(id)?].noise_sigma,
                sample,
            })
        })
        .collect::<Result<_>>()?;
    let delta = model.ablation.severity_conditioning().then_some(ctx.cfg.perturbation_delta);
    let report = marker_report(model, params, &items, ctx.cfg.direction, delta, ckpt.preprocessing.convention)?;

    let perturb: BTreeMap<&str, _> = report.perturbations.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let p = perturb.get(r.id.as_str());
            vec![
                r.id.clone(),
                cell(r.severity),
                cell(r.noise_sigma),
                cell(r.num_edges),
                cell(r.entropy[0]),
                cell(r.entropy[1]),
                cell(r.mean_prob[0]),
                cell(r.mean_prob[1]),
                opt_cell(p.map(|p| p.delta_down()[1])),
                opt_cell(p.map(|p| p.delta_up()[1])),
            ]
        })
        .collect();
    let mut edge_rows = Vec::new();
    for (id, sample) in ids.iter().zip(&s) {
        let post = encode(model, params, sample)?;
        for k in 0..post.num_edges() {
            edge_rows.push(vec![
                id.clone(),
                cell(sample.severity),
                cell(post.senders[k]),
                cell(post.receivers[k]),
                cell(post.probs[[k, 0]]),
                cell(post.probs[[k, 1]]),
            ]);
        }
    }
    let summary = json!({
        "generator": io::TOOL_VERSION,
        "direction": report.direction,
        "perturbation_delta": report.delta,
        "simulations": report.rows.len(),
        "skipped": report.skipped,
        "edge_types": {
            "no_interaction": stats_json(&report.stats[0]),
            "interaction": stats_json(&report.stats[1]),
        },
        "perturbation": perturbation_extremes(&report),
    });

    let dir = ctx.prepare("markers")?;
    write_csv(
        &dir.join(MARKERS_CSV),
        &[
            "id",
            "severity",
            "noise_sigma",
            "num_edges",
            "entropy_no_interaction",
            "entropy_interaction",
            "mean_prob_no_interaction",
            "mean_prob_interaction",
            "delta_h_down",
            "delta_h_up",
        ],
        &rows,
    )?;
    write_csv(
        &dir.join(EDGE_PROBS_CSV),
        &["id", "severity", "sender", "receiver", "p_no_interaction", "p_interaction"],
        &edge_rows,
    )?;
    io::write_json(&dir.join(SUMMARY_JSON), &summary)?;
    let st = &report.stats[1];
    println!(
        "markers: interaction entropy vs severity rho {} p {} monotonicity {} R² {}",
        opt_cell(st.rho),
        opt_cell(st.p_value),
        opt_cell(st.monotonicity),
        opt_cell(st.r_squared)
    );
    Ok(())
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace(' ', "_")
}

pub fn ablate(ctx: &Context) -> Result<()> {
    ctx.cfg.require_seed()?;
    let data = Dataset::load(&ctx.tracks_dir())?;
    let split = make_split(ctx, &data)?;
    let grid = Ablation::grid();
    if ctx.dry_run {
        println!(
            "ablate: {} variants x {} epochs on {} training / {} held-out simulations -> {}",
            grid.len(),
            ctx.cfg.train.epochs,
            split.train.len(),
            split.eval.len(),
            ctx.run.join("ablate").display()
        );
        return Ok(());
    }
    let results = grid
        .par_iter()
        .map(|(name, ablation)| {
            let trained = train_variant(ctx, &data, &split, *ablation, |_, _, _| Ok(()))?;
            let (m, _) = evaluate(&trained.model, &trained.state.params, &trained.eval_samples)?;
            let items: Vec<LabeledSample> = split
                .eval
                .iter()
                .zip(&trained.eval_samples)
                .map(|(id, sample)| {
                    Ok(LabeledSample {
                        id,
                        noise_sigma: data.tensors[data.index(id)?].noise_sigma,
                        sample,
                    })
                })
                .collect::<Result<_>>()?;
            let report = marker_report(
                &trained.model,
                &trained.state.params,
                &items,
                ctx.cfg.direction,
                None,
                trained.pre.convention,
            )?;
            Ok((name, m, report.stats[1], trained.log))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = ctx.prepare("ablate")?;
    io::write_json(&dir.join(SPLIT_FILE), &split)?;
    let mut rows = Vec::new();
    for (name, m, st, log) in &results {
        rows.push(vec![
            name.to_string(),
            cell(m.existence_accuracy),
            cell(m.mae),
            cell(m.mse),
            opt_cell(st.rho),
            opt_cell(st.p_value),
            opt_cell(st.r_squared),
            opt_cell(st.monotonicity),
        ]);
        write_csv(&dir.join(format!("{}_train_log.csv", slug(name))), &LOG_HEADER, log)?;
    }
    write_csv(&dir.join(ABLATION_CSV), &ABLATION_HEADER, &rows)?;
    for r in &rows {
        println!("ablate: {}", r.join(", "));
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = String::from_utf8(io::read_bytes(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "empty table".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

fn column(path: &Path, header: &[String], rows: &[Vec<String>], name: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| -> CliError {
        Error::Format {
            path: path.to_path_buf(),
            msg,
        }
        .into()
    };
    let k = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| bad(format!("missing column '{name}'")))?;
    rows.iter()
        .map(|r| {
            r.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad value in column '{name}'")))
        })
        .collect()
}

pub fn report(ctx: &Context) -> Result<()> {
    let src = ctx.run.join("markers");
    let markers_path = src.join(MARKERS_CSV);
    let (mh, mrows) = read_table(&markers_path)?;
    let probs_path = src.join(EDGE_PROBS_CSV);
    let (ph, prows) = read_table(&probs_path)?;
    if ctx.dry_run {
        println!(
            "report: {} simulations from {} -> {}",
            mrows.len(),
            src.display(),
            ctx.run.join("report").display()
        );
        return Ok(());
    }
    let sev = column(&markers_path, &mh, &mrows, "severity")?;
    let h0 = column(&markers_path, &mh, &mrows, "entropy_no_interaction")?;
    let h1 = column(&markers_path, &mh, &mrows, "entropy_interaction")?;
    let psev = column(&probs_path, &ph, &prows, "severity")?;
    let p1 = column(&probs_path, &ph, &prows, "p_interaction")?;

    let dir = ctx.prepare("report")?;
    let scatter = plot::scatter(
        "Edge-type entropy vs severity",
        "severity",
        "entropy H",
        &[
            plot::Series {
                label: "no interaction",
                color: "#1f77b4",
                points: sev.iter().copied().zip(h0.iter().copied()).collect(),
            },
            plot::Series {
                label: "interaction",
                color: "#d62728",
                points: sev.iter().copied().zip(h1.iter().copied()).collect(),
            },
        ],
    );
    fs::write(dir.join("entropy_vs_severity.svg"), scatter)?;
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for (s, p) in psev.iter().zip(&p1) {
        groups.entry(s.to_bits()).or_insert((*s, Vec::new())).1.push(*p);
    }
    let mut groups: Vec<(f64, Vec<f64>)> = groups.into_values().collect();
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let boxes = plot::boxplot(
        "Interaction edge probability by severity",
        "severity",
        "p(interaction)",
        &groups,
    );
    fs::write(dir.join("edge_probability_boxplot.svg"), boxes)?;
    println!("report: wrote 2 plots to {}", dir.display());
    Ok(())
}
