//! Dataset splits, preprocessing, the optimisation loop, evaluation
//! metrics and the gradient-check harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nri::{
    draw_gumbel, evaluate_loss, fit_energy_stats, loss_and_grad, Ablation, EdgeMode, EnergyStats, ForwardOptions,
    LossBreakdown, Model, ModelConfig, ModelParams, Predictions, Sample,
};
use crate::seed;
use crate::synth::SeverityConvention;
use crate::track::{fit_scaling, ScalingParams, TrajectoryTensor, EXIST_INDEX, NUM_CONTINUOUS, NUM_FEATURES, ORIENT_OFFSET};

const STREAM_SPLIT: u64 = 0x7370_6c74;
const STREAM_SHUFFLE: u64 = 0x7368_7566;
const STREAM_GUMBEL: u64 = 0x6775_6d62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub anneal_epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            anneal_epochs: 20,
            seed: 0,
            ablation: Ablation::NONE,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.anneal_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, anneal epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("moment decays must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `min(1, epoch / E_a)`.
pub fn lambda_kl(epoch: usize, anneal_epochs: usize) -> f64 {
    (epoch as f64 / anneal_epochs.max(1) as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

fn distinct_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Stratified hold-out over `(severity, noise)` labels.
///
/// Each severity level receives `eval_count / levels` held-out items (the
/// remainder goes to seeded-random levels); within a level the noise strata
/// are visited in rotation so noise levels stay balanced across the split.
/// Every level keeps at least one training item.
pub fn split(labels: &[(f64, f64)], eval_count: usize, seed_value: u64) -> Result<Split> {
    if eval_count == 0 {
        return Err(Error::config("evaluation split must hold at least one simulation"));
    }
    if eval_count >= labels.len() {
        return Err(Error::config(format!(
            "evaluation split of {eval_count} leaves no training data out of {}",
            labels.len()
        )));
    }
    let levels = distinct_sorted(labels.iter().map(|l| l.0));
    let noises = distinct_sorted(labels.iter().map(|l| l.1));
    let mut rng = seed::rng(seed_value, &[STREAM_SPLIT]);
    let mut quota = vec![eval_count / levels.len(); levels.len()];
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.shuffle(&mut rng);
    for &k in order.iter().take(eval_count % levels.len()) {
        quota[k] += 1;
    }
    let offset = rng.random_range(0..noises.len());
    let mut is_eval = vec![false; labels.len()];
    for (k, &level) in levels.iter().enumerate() {
        let mut strata: Vec<Vec<usize>> = noises
            .iter()
            .map(|&nz| (0..labels.len()).filter(|&i| labels[i].0 == level && labels[i].1 == nz).collect())
            .collect();
        let size: usize = strata.iter().map(Vec::len).sum();
        if quota[k] >= size {
            return Err(Error::config(format!(
                "severity level {level} has {size} simulations, too few to hold out {} and still train",
                quota[k]
            )));
        }
        let mut cursor = k + offset;
        for _ in 0..quota[k] {
            let stratum = (0..noises.len())
                .map(|d| (cursor + d) % noises.len())
                .find(|&s| !strata[s].is_empty())
                .expect("level has items left");
            let pick = rng.random_range(0..strata[stratum].len());
            is_eval[strata[stratum].swap_remove(pick)] = true;
            cursor = stratum + 1;
        }
    }
    Ok(Split {
        train: (0..labels.len()).filter(|&i| !is_eval[i]).collect(),
        eval: (0..labels.len()).filter(|&i| is_eval[i]).collect(),
    })
}

/// Feature scaling and energy standardisation fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub scaling: ScalingParams,
    pub energy: EnergyStats,
    pub convention: SeverityConvention,
    pub distance_eps: f64,
}

impl Preprocessing {
    pub fn fit(train: &[&TrajectoryTensor], convention: SeverityConvention, distance_eps: f64) -> Result<Self> {
        Ok(Preprocessing {
            scaling: fit_scaling(train.iter().copied())?,
            energy: fit_energy_stats(train.iter().copied(), distance_eps),
            convention,
            distance_eps,
        })
    }

    pub fn sample(&self, tensor: &TrajectoryTensor, ablation: &Ablation) -> Result<Sample> {
        Sample::new(tensor, &self.scaling, &self.energy, self.convention, ablation, self.distance_eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let n = params.values.len();
        TrainState {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            epoch: 0,
        }
    }

    fn adam(&mut self, grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.step as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.step as i32);
        for k in 0..grad.len() {
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * grad[k];
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / b1t;
            let vh = self.v[k] / b2t;
            self.params.values[k] -= cfg.learning_rate * mh / (vh.sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over training samples, measured before each batch update.
    pub loss: LossBreakdown,
    pub eval: Option<Metrics>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

fn training_options(model: &Model, cfg: &TrainConfig, epoch: usize, index: usize, edges: usize) -> ForwardOptions {
    let mut rng = seed::rng(cfg.seed, &[STREAM_GUMBEL, epoch as u64, index as u64]);
    ForwardOptions {
        edges: EdgeMode::Soft(draw_gumbel(&mut rng, edges)),
        teacher_forcing: model.config.teacher_forcing,
        lambda_kl: lambda_kl(epoch, cfg.anneal_epochs),
    }
}

/// Runs `cfg.epochs` epochs from `state`. `on_epoch` sees every record and
/// the state after that epoch's updates.
pub fn train_from(
    model: &Model,
    mut state: TrainState,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    if model.ablation != cfg.ablation {
        return Err(Error::config("model and training configuration disagree on ablation flags"));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let first = state.epoch;
    for epoch in first..first + cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let opts = training_options(model, cfg, epoch, i, train_set[i].edges.len());
                    loss_and_grad(model, &state.params, &train_set[i], &opts)
                })
                .collect();
            let mut grad = vec![0.0; model.layout.len()];
            let w = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, g) = r.map_err(|e| Error::numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
                epoch_loss.accumulate(&loss, 1.0 / train_set.len() as f64);
                for (acc, x) in grad.iter_mut().zip(&g) {
                    *acc += w * x;
                }
            }
            state.adam(&grad, cfg);
            if let Some(k) = state.params.values.iter().position(|x| !x.is_finite()) {
                return Err(Error::numerical(format!(
                    "epoch {epoch}, batch {b}: parameter {k} became non-finite"
                )));
            }
        }
        state.epoch = epoch + 1;
        let eval = if cfg.eval_every > 0 && !eval_set.is_empty() && (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(model, &state.params, eval_set)?.0)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: epoch_loss,
            eval,
        };
        on_epoch(&record, &state)?;
        log.push(record);
    }
    Ok(TrainOutcome { state, log })
}

pub fn train(
    model: &Model,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    let state = TrainState::new(model.init_params(cfg.seed));
    train_from(model, state, train_set, eval_set, cfg, on_epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Over every timestep of real rows.
    pub existence_accuracy: f64,
    /// Over existing entries and the four continuous features, scaled units.
    pub mse: f64,
    pub mae: f64,
    pub feature_mse: [f64; NUM_CONTINUOUS],
    pub feature_mae: [f64; NUM_CONTINUOUS],
    pub existing_entries: usize,
    pub timeline_entries: usize,
}

/// Pooled metrics over predicted timesteps `1..T`.
pub fn compute_metrics(samples: &[Sample], preds: &[Predictions]) -> Metrics {
    let mut se = [0.0; NUM_CONTINUOUS];
    let mut ae = [0.0; NUM_CONTINUOUS];
    let mut existing = 0usize;
    let mut correct = 0usize;
    let mut timeline = 0usize;
    for (sample, pred) in samples.iter().zip(preds) {
        for (s, cont) in pred.continuous.iter().enumerate() {
            let t = s + 1;
            for i in 0..sample.n {
                if !sample.real[i] {
                    continue;
                }
                let present = sample.exist[[i, t]] == 1.0;
                timeline += 1;
                if (pred.exist[s][[i, 0]] >= 0.5) == present {
                    correct += 1;
                }
                if present {
                    existing += 1;
                    for f in 0..NUM_CONTINUOUS {
                        let d = cont[[i, f]] - sample.features[[i, t * NUM_FEATURES + f]];
                        se[f] += d * d;
                        ae[f] += d.abs();
                    }
                }
            }
        }
    }
    let per = |v: [f64; NUM_CONTINUOUS]| {
        let mut out = [0.0; NUM_CONTINUOUS];
        if existing > 0 {
            for f in 0..NUM_CONTINUOUS {
                out[f] = v[f] / existing as f64;
            }
        }
        out
    };
    let feature_mse = per(se);
    let feature_mae = per(ae);
    Metrics {
        existence_accuracy: if timeline > 0 {
            correct as f64 / timeline as f64
        } else {
            0.0
        },
        mse: feature_mse.iter().sum::<f64>() / NUM_CONTINUOUS as f64,
        mae: feature_mae.iter().sum::<f64>() / NUM_CONTINUOUS as f64,
        feature_mse,
        feature_mae,
        existing_entries: existing,
        timeline_entries: timeline,
    }
}

/// Argmax edges and free-running rollout after the first step.
pub fn evaluate(model: &Model, params: &ModelParams, samples: &[Sample]) -> Result<(Metrics, Vec<Predictions>)> {
    let opts = ForwardOptions::evaluation();
    let preds = samples
        .par_iter()
        .map(|s| evaluate_loss(model, params, s, &opts).map(|(_, p)| p))
        .collect::<Result<Vec<_>>>()?;
    Ok((compute_metrics(samples, &preds), preds))
}

/// Ground-truth predictions for `sample`; scores 1 where present.
pub fn oracle_predictions(sample: &Sample) -> Predictions {
    let steps = 1..sample.t;
    let col = |t: usize, f: usize| t * NUM_FEATURES + f;
    Predictions {
        n: sample.n,
        t: sample.t,
        continuous: steps
            .clone()
            .map(|t| ndarray::Array2::from_shape_fn((sample.n, NUM_CONTINUOUS), |(i, f)| sample.features[[i, col(t, f)]]))
            .collect(),
        orientation: steps
            .clone()
            .map(|t| ndarray::Array2::from_shape_fn((sample.n, 3), |(i, k)| sample.features[[i, col(t, ORIENT_OFFSET + k)]]))
            .collect(),
        exist: steps
            .map(|t| ndarray::Array2::from_shape_fn((sample.n, 1), |(i, _)| sample.features[[i, col(t, EXIST_INDEX)]]))
            .collect(),
        edges: ndarray::Array2::zeros((sample.edges.len(), 2)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_slice: String,
    pub per_slice: Vec<(String, f64)>,
    pub num_params: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic against central-difference gradients of the total loss, per
/// parameter slice. `opts` must not draw fresh randomness between calls,
/// which holds for every [`EdgeMode`] since noise is supplied by value.
pub fn grad_check_sample(
    model: &Model,
    params: &ModelParams,
    sample: &Sample,
    opts: &ForwardOptions,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(model, params, sample, opts)?;
    let mut numeric = vec![0.0; analytic.len()];
    let mut probe = params.clone();
    for k in 0..numeric.len() {
        let x = probe.values[k];
        probe.values[k] = x + h;
        let up = evaluate_loss(model, &probe, sample, opts)?.0.total;
        probe.values[k] = x - h;
        let down = evaluate_loss(model, &probe, sample, opts)?.0.total;
        probe.values[k] = x;
        numeric[k] = (up - down) / (2.0 * h);
    }
    let mut per_slice = Vec::new();
    let mut worst = (0.0, String::new());
    for s in &model.layout.slices {
        let e = relative_error(&analytic[s.range()], &numeric[s.range()]);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, s.name.clone());
        }
        per_slice.push((s.name.clone(), e));
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_slice: worst.1,
        per_slice,
        num_params: analytic.len(),
    })
}

/// Random physical tensor with `n` rows of contiguous lifetimes, sorted by
/// birth.
pub fn random_fixture<R: Rng>(rng: &mut R, n: usize, t: usize, severity: f64) -> TrajectoryTensor {
    use crate::detect::{Orientation, VortexObservation};
    use crate::track::{assemble_tensor, VortexTrack};
    let tracks: Vec<VortexTrack> = (0..n)
        .map(|id| {
            let birth = rng.random_range(0..t.div_ceil(2));
            let death = rng.random_range(birth + 2..=t);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (mut x, mut y) = (rng.random_range(0.0..10.0), rng.random_range(-2.0..2.0));
            let observations = (birth..death)
                .map(|frame| {
                    x += rng.random_range(0.0..0.5);
                    y += rng.random_range(-0.2..0.2);
                    VortexObservation {
                        frame,
                        center: (x, y),
                        radius: rng.random_range(0.1..0.6),
                        orientation: if sign > 0.0 { Orientation::Ccw } else { Orientation::Cw },
                        vorticity: sign * rng.random_range(0.5..2.0),
                    }
                })
                .collect();
            VortexTrack { id, observations }
        })
        .collect();
    assemble_tensor(&tracks, t, severity, 0.0).expect("fixture frames lie inside T")
}

/// Gradient check of the configured model on a random `N = 3` instance with
/// perturbed parameters and fixed soft Gumbel noise.
pub fn grad_check(config: &ModelConfig, ablation: Ablation, seed_value: u64) -> Result<GradCheckReport> {
    if config.timesteps > 8 {
        return Err(Error::config("gradient check expects a small instance (T ≤ 8)"));
    }
    let model = Model::new(config.clone(), ablation)?;
    let mut rng = seed::rng(seed_value, &[0x6763]);
    let tensor = random_fixture(&mut rng, 3, config.timesteps, 60.0);
    let pre = Preprocessing::fit(&[&tensor], SeverityConvention::Coa, config.distance_eps)?;
    let sample = pre.sample(&tensor, &ablation)?;
    let mut params = model.init_params(seed_value);
    params.perturb(&mut rng, 0.3);
    let opts = ForwardOptions {
        edges: EdgeMode::Soft(draw_gumbel(&mut rng, sample.edges.len())),
        teacher_forcing: config.teacher_forcing,
        lambda_kl: 0.7,
    };
    grad_check_sample(&model, &params, &sample, &opts, 1e-5)
}
