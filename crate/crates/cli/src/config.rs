//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vortex_nri::detect::DetectConfig;
use vortex_nri::markers::Direction;
use vortex_nri::nri::{Ablation, ModelConfig};
use vortex_nri::synth::{SeverityConvention, Sweep, SynthConfig};
use vortex_nri::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub convention: SeverityConvention,
    pub severity_levels: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub replicates: usize,
    pub synth: SynthConfig,
    pub detect: DetectConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_count: usize,
    pub checkpoint_every: usize,
    pub direction: Direction,
    pub perturbation_delta: f64,
    pub marker_split: MarkerSplit,
    pub dataset_dir: Option<PathBuf>,
    pub tracks_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerSplit {
    Eval,
    All,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            convention: SeverityConvention::Coa,
            severity_levels: (3..=10).map(|k| k as f64 * 10.0).collect(),
            noise_levels: vec![5.0, 10.0],
            replicates: 3,
            synth: SynthConfig::default(),
            detect: DetectConfig {
                threshold: 0.2,
                smoothing_passes: 3,
                ..DetectConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                eval_every: 10,
                ..TrainConfig::default()
            },
            eval_count: 8,
            checkpoint_every: 0,
            direction: Direction::Decreasing,
            perturbation_delta: 10.0,
            marker_split: MarkerSplit::Eval,
            dataset_dir: None,
            tracks_dir: None,
            checkpoint: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{v}'")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", n + 1))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_text(&text)?;
        // relative inputs are taken relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset_dir, &mut cfg.tracks_dir, &mut cfg.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let s = &mut self.synth;
        let d = &mut self.detect;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "convention" => {
                self.convention = match v {
                    "coa" => SeverityConvention::Coa,
                    "lvad" => SeverityConvention::Lvad,
                    _ => return Err(format!("{key}: expected coa or lvad, got '{v}'")),
                }
            }
            "severity_levels" => self.severity_levels = parse_list(key, v)?,
            "noise_levels" => self.noise_levels = parse_list(key, v)?,
            "replicates" => self.replicates = parse(key, v)?,
            "grid_nx" => s.grid.nx = parse(key, v)?,
            "grid_ny" => s.grid.ny = parse(key, v)?,
            "grid_dx" => s.grid.dx = parse(key, v)?,
            "grid_dy" => s.grid.dy = parse(key, v)?,
            "origin_x" => s.grid.origin.0 = parse(key, v)?,
            "origin_y" => s.grid.origin.1 = parse(key, v)?,
            "num_frames" => s.num_frames = parse(key, v)?,
            "dt" => s.dt = parse(key, v)?,
            "substeps" => s.substeps = parse(key, v)?,
            "birth_rate" => s.birth_rate = parse(key, v)?,
            "shedding_exponent" => s.shedding_exponent = parse(key, v)?,
            "mean_lifetime" => s.mean_lifetime = parse(key, v)?,
            "circulation" => s.circulation = parse(key, v)?,
            "core_radius" => s.core_radius = parse(key, v)?,
            "full_half_width" => s.full_half_width = parse(key, v)?,
            "walls" => s.walls = parse_bool(key, v)?,
            "detect_threshold" => d.threshold = parse(key, v)?,
            "detect_min_area" => d.min_area = parse(key, v)?,
            "detect_connectivity" => d.connectivity = parse(key, v)?,
            "detect_smoothing" => d.smoothing_passes = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "prior_interaction" => {
                let p: f64 = parse(key, v)?;
                m.prior = [1.0 - p, p];
            }
            "tau" => m.tau = parse(key, v)?,
            "output_variance" => m.output_variance = parse(key, v)?,
            "teacher_forcing" => m.teacher_forcing = parse(key, v)?,
            "distance_eps" => m.distance_eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "anneal_epochs" => t.anneal_epochs = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "no_ordering" => t.ablation.no_ordering = parse_bool(key, v)?,
            "no_physics_gating" => t.ablation.no_physics_gating = parse_bool(key, v)?,
            "no_severity_conditioning" => t.ablation.no_severity_conditioning = parse_bool(key, v)?,
            "original_nri" => t.ablation.original_nri = parse_bool(key, v)?,
            "eval_count" => self.eval_count = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "direction" => {
                self.direction = match v {
                    "decreasing" => Direction::Decreasing,
                    "increasing" => Direction::Increasing,
                    _ => return Err(format!("{key}: expected increasing or decreasing, got '{v}'")),
                }
            }
            "perturbation_delta" => self.perturbation_delta = parse(key, v)?,
            "marker_split" => {
                self.marker_split = match v {
                    "eval" => MarkerSplit::Eval,
                    "all" => MarkerSplit::All,
                    _ => return Err(format!("{key}: expected eval or all, got '{v}'")),
                }
            }
            "dataset_dir" => self.dataset_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "tracks_dir" => self.tracks_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let d = &self.detect;
        let m = &self.model;
        let t = &self.train;
        let conv = match self.convention {
            SeverityConvention::Coa => "coa",
            SeverityConvention::Lvad => "lvad",
        };
        let dir = match self.direction {
            Direction::Decreasing => "decreasing",
            Direction::Increasing => "increasing",
        };
        let split = match self.marker_split {
            MarkerSplit::Eval => "eval",
            MarkerSplit::All => "all",
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.map(|x| x.to_string()).unwrap_or_default()),
            ("convention", conv.into()),
            ("severity_levels", join(&self.severity_levels)),
            ("noise_levels", join(&self.noise_levels)),
            ("replicates", self.replicates.to_string()),
            ("grid_nx", s.grid.nx.to_string()),
            ("grid_ny", s.grid.ny.to_string()),
            ("grid_dx", s.grid.dx.to_string()),
            ("grid_dy", s.grid.dy.to_string()),
            ("origin_x", s.grid.origin.0.to_string()),
            ("origin_y", s.grid.origin.1.to_string()),
            ("num_frames", s.num_frames.to_string()),
            ("dt", s.dt.to_string()),
            ("substeps", s.substeps.to_string()),
            ("birth_rate", s.birth_rate.to_string()),
            ("shedding_exponent", s.shedding_exponent.to_string()),
            ("mean_lifetime", s.mean_lifetime.to_string()),
            ("circulation", s.circulation.to_string()),
            ("core_radius", s.core_radius.to_string()),
            ("full_half_width", s.full_half_width.to_string()),
            ("walls", s.walls.to_string()),
            ("detect_threshold", d.threshold.to_string()),
            ("detect_min_area", d.min_area.to_string()),
            ("detect_connectivity", d.connectivity.to_string()),
            ("detect_smoothing", d.smoothing_passes.to_string()),
            ("hidden", m.hidden.to_string()),
            ("prior_interaction", m.prior[1].to_string()),
            ("tau", m.tau.to_string()),
            ("output_variance", m.output_variance.to_string()),
            ("teacher_forcing", m.teacher_forcing.to_string()),
            ("distance_eps", m.distance_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("anneal_epochs", t.anneal_epochs.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("no_ordering", t.ablation.no_ordering.to_string()),
            ("no_physics_gating", t.ablation.no_physics_gating.to_string()),
            ("no_severity_conditioning", t.ablation.no_severity_conditioning.to_string()),
            ("original_nri", t.ablation.original_nri.to_string()),
            ("eval_count", self.eval_count.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("direction", dir.into()),
            ("perturbation_delta", self.perturbation_delta.to_string()),
            ("marker_split", split.into()),
            ("dataset_dir", opt_path(&self.dataset_dir)),
            ("tracks_dir", opt_path(&self.tracks_dir)),
            ("checkpoint", opt_path(&self.checkpoint)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn require_seed(&self) -> Result<u64, String> {
        self.seed
            .ok_or_else(|| "this command is randomized and needs an explicit seed (config key 'seed' or --seed)".into())
    }

    /// Generator settings with the convention applied; severity, noise and
    /// seed are filled in per sweep item.
    pub fn synth_base(&self) -> SynthConfig {
        SynthConfig {
            convention: self.convention,
            ..self.synth.clone()
        }
    }

    pub fn sweep(&self) -> Result<Sweep, String> {
        Ok(Sweep {
            base: self.synth_base(),
            severity_levels: self.severity_levels.clone(),
            noise_levels: self.noise_levels.clone(),
            replicates: self.replicates,
            seed: self.require_seed()?,
        })
    }

    pub fn train_config(&self, ablation: Ablation) -> Result<TrainConfig, String> {
        Ok(TrainConfig {
            seed: self.require_seed()?,
            ablation,
            ..self.train.clone()
        })
    }
}
