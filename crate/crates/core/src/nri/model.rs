//! Forward pass, loss and gradients on the autodiff tape.

use rand::RngCore;

use super::{LatentEdgePosterior, LossBreakdown, Model, ModelParams, ParamLayout, Sample, INTERACTION};
use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};
use crate::track::{EXIST_INDEX, NUM_CONTINUOUS, NUM_FEATURES, ORIENT_OFFSET};

/// How edge types are chosen for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeMode {
    /// Relaxed Gumbel-softmax sample using the supplied `P×2` noise.
    Soft(Mat),
    /// Straight-through one-hot of the relaxed sample.
    Hard(Mat),
    /// One-hot argmax of the posterior (the `τ → 0` limit without noise).
    Argmax,
    /// Dense `n×n` interaction weights, `w[[j, i]]` for `j → i`. Entries on
    /// disallowed pairs are ignored.
    Fixed(Mat),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub edges: EdgeMode,
    pub teacher_forcing: usize,
    pub lambda_kl: f64,
}

impl ForwardOptions {
    /// Argmax edges, ground truth only at the first step.
    pub fn evaluation() -> Self {
        ForwardOptions {
            edges: EdgeMode::Argmax,
            teacher_forcing: usize::MAX,
            lambda_kl: 1.0,
        }
    }
}

/// Decoder outputs for timesteps `1..T`; entry `s` predicts time `s + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub n: usize,
    pub t: usize,
    /// `n×4` scaled continuous features.
    pub continuous: Vec<Mat>,
    /// `n×3` orientation logits.
    pub orientation: Vec<Mat>,
    /// `n×1` existence score; present when at least 0.5.
    pub exist: Vec<Mat>,
    /// `P×2` edge weights the decoder used.
    pub edges: Mat,
}

/// Tape handles for one forward pass.
pub struct Graph {
    /// `n × (T·8)` decoder and encoder input.
    pub data: Var,
    /// `n × (T·8)` reconstruction target; same values as `data`.
    pub target: Var,
    pub params: Vec<Var>,
    pub logits: Option<Var>,
    pub probs: Option<Var>,
    pub edges: Option<Var>,
    pub steps: Vec<Step>,
    pub rec_continuous: Var,
    pub rec_orientation: Var,
    pub exist: Var,
    pub kl: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub continuous: Var,
    pub orientation: Var,
    /// Logit in the mixed-head model, raw score in the plain one.
    pub exist: Var,
}

struct Net<'a> {
    layout: &'a ParamLayout,
    vars: Vec<Var>,
}

impl Net<'_> {
    fn get(&self, name: &str) -> Var {
        let k = self
            .layout
            .position(name)
            .unwrap_or_else(|| panic!("parameter slice '{name}' missing from layout"));
        self.vars[k]
    }

    fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Var {
        let w = self.get(&format!("{prefix}.w"));
        let b = self.get(&format!("{prefix}.b"));
        tape.affine(x, w, b)
    }

    /// Two ELU layers.
    fn mlp(&self, tape: &mut Tape, prefix: &str, x: Var) -> Var {
        let h = self.linear(tape, &format!("{prefix}.fc1"), x);
        let h = tape.elu(h);
        let h = self.linear(tape, &format!("{prefix}.fc2"), h);
        tape.elu(h)
    }

    /// First layer over concatenated `[x_sender, x_receiver]`, computed as
    /// two projections gathered onto the edges. `skip` rows precede the
    /// node blocks in the weight matrix when present.
    fn pair_layer(&self, tape: &mut Tape, prefix: &str, x: Var, skip: Option<Var>, sample: &Sample) -> Var {
        let w = self.get(&format!("{prefix}.w"));
        let b = self.get(&format!("{prefix}.b"));
        let d = tape.value(x).ncols();
        let mut start = 0;
        let mut terms = Vec::new();
        if let Some(e) = skip {
            let k = tape.value(e).ncols();
            let ws = tape.rows(w, 0, k);
            terms.push(tape.matmul(e, ws));
            start = k;
        }
        let w_send = tape.rows(w, start, start + d);
        let w_recv = tape.rows(w, start + d, start + 2 * d);
        let hs = tape.matmul(x, w_send);
        let hr = tape.matmul(x, w_recv);
        terms.push(tape.gather(hs, &sample.edges.senders));
        terms.push(tape.gather(hr, &sample.edges.receivers));
        let sum = tape.combine(&terms.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>());
        tape.add_row(sum, b)
    }

    fn pair_mlp(&self, tape: &mut Tape, prefix: &str, x: Var, skip: Option<Var>, sample: &Sample) -> Var {
        let h = self.pair_layer(tape, &format!("{prefix}.fc1"), x, skip, sample);
        let h = tape.elu(h);
        let h = self.linear(tape, &format!("{prefix}.fc2"), h);
        tape.elu(h)
    }
}

fn param_leaves(tape: &mut Tape, layout: &ParamLayout, params: &ModelParams) -> Vec<Var> {
    layout.slices.iter().map(|s| tape.leaf(params.matrix(s))).collect()
}

fn zero_scalar(tape: &mut Tape) -> Var {
    tape.leaf(Mat::zeros((1, 1)))
}

/// Conditioned logits, probabilities and log-probabilities; `None` without
/// valid pairs.
fn encoder(tape: &mut Tape, model: &Model, net: &Net, data: Var, sample: &Sample) -> Option<(Var, Var, Var)> {
    if sample.edges.is_empty() {
        return None;
    }
    let h1 = net.mlp(tape, "enc.node", data);
    let e1 = net.pair_mlp(tape, "enc.edge1", h1, None, sample);
    let agg = tape.scatter_add(e1, &sample.edges.receivers, sample.n);
    let h2 = net.mlp(tape, "enc.node2", agg);
    let mut e2 = net.pair_mlp(tape, "enc.edge2", h2, Some(e1), sample);
    if model.ablation.physics_gating() {
        let energy = tape.leaf(sample.energy.clone());
        let g = net.linear(tape, "g_e", energy);
        e2 = tape.add(e2, g);
    }
    let mut logits = net.linear(tape, "enc.out", e2);
    if model.ablation.severity_conditioning() {
        let s = tape.leaf(Mat::from_elem((1, 1), sample.severity_norm));
        let g = net.linear(tape, "g_s", s);
        logits = tape.mul_row(logits, g);
    }
    let probs = tape.softmax(logits);
    let logq = tape.log_softmax(logits);
    Some((logits, probs, logq))
}

fn one_hot_argmax(p: &Mat) -> Mat {
    let mut out = Mat::zeros(p.raw_dim());
    for (r, row) in p.rows().into_iter().enumerate() {
        let mut best = 0;
        for (c, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = c;
            }
        }
        out[[r, best]] = 1.0;
    }
    out
}

fn edge_weights(
    tape: &mut Tape,
    model: &Model,
    mode: &EdgeMode,
    enc: Option<(Var, Var, Var)>,
    sample: &Sample,
) -> Result<Option<Var>> {
    let Some((_, probs, logq)) = enc else {
        return Ok(None);
    };
    let p = sample.edges.len();
    let check_noise = |noise: &Mat| {
        if noise.dim() != (p, 2) {
            return Err(Error::input(format!("Gumbel noise must be {p}×2, got {:?}", noise.dim())));
        }
        Ok(())
    };
    let v = match mode {
        EdgeMode::Soft(noise) | EdgeMode::Hard(noise) => {
            check_noise(noise)?;
            let z = tape.shift(logq, noise);
            let z = tape.scale(z, 1.0 / model.config.tau);
            let y = tape.softmax(z);
            if matches!(mode, EdgeMode::Hard(_)) {
                tape.straight_through(y)
            } else {
                y
            }
        }
        EdgeMode::Argmax => {
            let onehot = one_hot_argmax(tape.value(probs));
            tape.leaf(onehot)
        }
        EdgeMode::Fixed(dense) => {
            if dense.dim() != (sample.n, sample.n) {
                return Err(Error::input("fixed edge weights must be n×n"));
            }
            let m = Mat::from_shape_fn((p, 2), |(k, c)| {
                let w = dense[[sample.edges.senders[k], sample.edges.receivers[k]]];
                if c == INTERACTION {
                    w
                } else {
                    1.0 - w
                }
            });
            tape.leaf(m)
        }
    };
    Ok(Some(v))
}

/// Builds the full forward pass and loss on `tape`.
pub fn build_graph(
    tape: &mut Tape,
    model: &Model,
    params: &ModelParams,
    sample: &Sample,
    opts: &ForwardOptions,
) -> Result<Graph> {
    params.validate(&model.layout)?;
    if !(0.0..=1.0).contains(&opts.lambda_kl) {
        return Err(Error::config(format!("lambda_kl {} outside [0, 1]", opts.lambda_kl)));
    }
    if opts.teacher_forcing == 0 {
        return Err(Error::config("teacher forcing period must be at least 1"));
    }
    if sample.t != model.config.timesteps {
        return Err(Error::input(format!(
            "sample has {} timesteps, model expects {}",
            sample.t, model.config.timesteps
        )));
    }
    let cfg = &model.config;
    let plain = model.ablation.plain_loss();
    let (n, t) = (sample.n, sample.t);
    let f = NUM_FEATURES;

    let vars = param_leaves(tape, &model.layout, params);
    let net = Net {
        layout: &model.layout,
        vars,
    };
    let data = tape.leaf(sample.features.clone());
    let target = tape.leaf(sample.features.clone());

    let enc = encoder(tape, model, &net, data, sample);
    let edges = edge_weights(tape, model, &opts.edges, enc, sample)?;
    // interaction weight divided by the receiver's number of valid senders
    let interaction = edges.map(|e| {
        let w = tape.cols(e, INTERACTION, INTERACTION + 1);
        let mut degree = vec![0usize; n];
        for &r in sample.edges.receivers.iter() {
            degree[r] += 1;
        }
        let inv = Mat::from_shape_fn((sample.edges.len(), 1), |(k, _)| 1.0 / degree[sample.edges.receivers[k]] as f64);
        let inv = tape.leaf(inv);
        tape.mul(w, inv)
    });

    let n_real = sample.num_real();
    let existing: f64 = (1..t).map(|s| sample.exist.column(s).sum()).sum();
    let sigma2 = cfg.output_variance;

    let mut steps = Vec::with_capacity(t - 1);
    let mut rec_terms = Vec::new();
    let mut ce_terms = Vec::new();
    let mut bce_terms = Vec::new();
    let mut state: Option<Var> = None;
    for s in 0..t - 1 {
        let input = match state {
            Some(prev) if s % opts.teacher_forcing != 0 => prev,
            _ => tape.cols(data, s * f, (s + 1) * f),
        };
        let agg = match interaction {
            Some(w) => {
                let m = net.pair_mlp(tape, "dec.msg", input, None, sample);
                let m = tape.mul_col(m, w);
                tape.scatter_add(m, &sample.edges.receivers, n)
            }
            None => tape.leaf(Mat::zeros((n, cfg.hidden))),
        };
        let x = tape.concat(&[input, agg]);
        let h = net.linear(tape, "dec.out.fc1", x);
        let h = tape.elu(h);
        let h = net.linear(tape, "dec.out.fc2", h);
        let h = tape.elu(h);
        let out = net.linear(tape, "dec.out.fc3", h);
        let tgt = tape.cols(target, (s + 1) * f, (s + 2) * f);
        let next_exist = sample.exist.column(s + 1).to_owned();

        if plain {
            let pred = tape.add(input, out);
            let step = Step {
                continuous: tape.cols(pred, 0, NUM_CONTINUOUS),
                orientation: tape.cols(pred, ORIENT_OFFSET, ORIENT_OFFSET + 3),
                exist: tape.cols(pred, EXIST_INDEX, EXIST_INDEX + 1),
            };
            let diff = tape.sub(pred, tgt);
            let sq = tape.square(diff);
            let denom = 2.0 * sigma2 * (n_real * (t - 1)).max(1) as f64;
            let w = Mat::from_shape_fn((n, f), |(i, _)| if sample.real[i] { 1.0 / denom } else { 0.0 });
            rec_terms.push(tape.weighted_sum(sq, w));
            steps.push(step);
            state = Some(pred);
            continue;
        }

        let delta = tape.cols(out, 0, NUM_CONTINUOUS);
        let orient = tape.cols(out, ORIENT_OFFSET, ORIENT_OFFSET + 3);
        let exist = tape.cols(out, EXIST_INDEX, EXIST_INDEX + 1);
        let last = tape.cols(input, 0, NUM_CONTINUOUS);
        let cont = tape.add(last, delta);

        if existing > 0.0 {
            let tgt_cont = tape.cols(tgt, 0, NUM_CONTINUOUS);
            let diff = tape.sub(cont, tgt_cont);
            let sq = tape.square(diff);
            let scale = 1.0 / (2.0 * sigma2 * existing);
            let w = Mat::from_shape_fn((n, NUM_CONTINUOUS), |(i, _)| next_exist[i] * scale);
            rec_terms.push(tape.weighted_sum(sq, w));

            let tgt_o = tape.cols(tgt, ORIENT_OFFSET, ORIENT_OFFSET + 3);
            let ls = tape.log_softmax(orient);
            let prod = tape.mul(tgt_o, ls);
            let w = Mat::from_shape_fn((n, 3), |(i, _)| -next_exist[i] / existing);
            ce_terms.push(tape.weighted_sum(prod, w));
        }
        if n_real > 0 {
            let y = Mat::from_shape_fn((n, 1), |(i, _)| next_exist[i]);
            let denom = (n_real * (t - 1)) as f64;
            let w = Mat::from_shape_fn((n, 1), |(i, _)| if sample.real[i] { 1.0 / denom } else { 0.0 });
            bce_terms.push(tape.bce_logits(exist, y, w));
        }

        // categorical parts are fed back as hard values, like the data
        let hard = {
            let o = tape.value(orient);
            let e = tape.value(exist);
            Mat::from_shape_fn((n, 4), |(i, k)| {
                if k == 3 {
                    return if e[[i, 0]] >= 0.0 { 1.0 } else { 0.0 };
                }
                let row = o.row(i);
                let best = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                if best == k { 1.0 } else { 0.0 }
            })
        };
        let hard = tape.leaf(hard);
        state = Some(tape.concat(&[cont, hard]));
        steps.push(Step {
            continuous: cont,
            orientation: orient,
            exist,
        });
    }

    let sum = |tape: &mut Tape, terms: &[Var]| {
        if terms.is_empty() {
            zero_scalar(tape)
        } else {
            tape.combine(&terms.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>())
        }
    };
    let rec_continuous = sum(tape, &rec_terms);
    let rec_orientation = sum(tape, &ce_terms);
    let exist = sum(tape, &bce_terms);

    let kl = match enc {
        Some((_, probs, logq)) => {
            let p = sample.edges.len() as f64;
            let qlogq = tape.mul(probs, logq);
            let a = tape.weighted_sum(qlogq, Mat::from_elem((sample.edges.len(), 2), 1.0 / p));
            let log_prior =
                Mat::from_shape_fn((sample.edges.len(), 2), |(_, k)| model.config.prior[k].ln() / p);
            let b = tape.weighted_sum(probs, log_prior);
            tape.combine(&[(a, 1.0), (b, -1.0)])
        }
        None => zero_scalar(tape),
    };
    let total = tape.combine(&[
        (rec_continuous, 1.0),
        (rec_orientation, 1.0),
        (exist, 1.0),
        (kl, opts.lambda_kl),
    ]);

    Ok(Graph {
        data,
        target,
        params: net.vars,
        logits: enc.map(|e| e.0),
        probs: enc.map(|e| e.1),
        edges,
        steps,
        rec_continuous,
        rec_orientation,
        exist,
        kl,
        total,
    })
}

fn breakdown(tape: &Tape, g: &Graph, lambda_kl: f64) -> Result<LossBreakdown> {
    let b = LossBreakdown {
        rec_continuous: tape.scalar(g.rec_continuous),
        rec_orientation: tape.scalar(g.rec_orientation),
        exist: tape.scalar(g.exist),
        kl: tape.scalar(g.kl),
        lambda_kl,
        total: tape.scalar(g.total),
    };
    if !b.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite loss (rec {}, ce {}, bce {}, kl {})",
            b.rec_continuous, b.rec_orientation, b.exist, b.kl
        )));
    }
    Ok(b)
}

fn predictions(tape: &Tape, g: &Graph, sample: &Sample, plain: bool) -> Predictions {
    let p = sample.edges.len();
    Predictions {
        n: sample.n,
        t: sample.t,
        continuous: g.steps.iter().map(|s| tape.value(s.continuous).clone()).collect(),
        orientation: g.steps.iter().map(|s| tape.value(s.orientation).clone()).collect(),
        exist: g
            .steps
            .iter()
            .map(|s| {
                let v = tape.value(s.exist);
                if plain {
                    v.clone()
                } else {
                    v.mapv(|z| 1.0 / (1.0 + (-z).exp()))
                }
            })
            .collect(),
        edges: g.edges.map_or_else(|| Mat::zeros((p, 2)), |e| tape.value(e).clone()),
    }
}

pub fn evaluate_loss(
    model: &Model,
    params: &ModelParams,
    sample: &Sample,
    opts: &ForwardOptions,
) -> Result<(LossBreakdown, Predictions)> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, model, params, sample, opts)?;
    let b = breakdown(&tape, &g, opts.lambda_kl)?;
    Ok((b, predictions(&tape, &g, sample, model.ablation.plain_loss())))
}

/// Loss and its gradient with respect to the flat parameter vector.
pub fn loss_and_grad(
    model: &Model,
    params: &ModelParams,
    sample: &Sample,
    opts: &ForwardOptions,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, model, params, sample, opts)?;
    let b = breakdown(&tape, &g, opts.lambda_kl)?;
    let grads = tape.backward(g.total);
    let mut flat = Vec::with_capacity(model.layout.len());
    for &v in &g.params {
        match grads.get(v) {
            Some(m) => flat.extend(m.iter()),
            None => flat.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
        }
    }
    if let Some(k) = flat.iter().position(|x| !x.is_finite()) {
        return Err(Error::numerical(format!("non-finite gradient at parameter {k}")));
    }
    Ok((b, flat))
}

pub fn encode(model: &Model, params: &ModelParams, sample: &Sample) -> Result<LatentEdgePosterior> {
    params.validate(&model.layout)?;
    let mut tape = Tape::new();
    let vars = param_leaves(&mut tape, &model.layout, params);
    let net = Net {
        layout: &model.layout,
        vars,
    };
    let data = tape.leaf(sample.features.clone());
    let p = sample.edges.len();
    let (logits, probs) = match encoder(&mut tape, model, &net, data, sample) {
        Some((l, pr, _)) => (tape.value(l).clone(), tape.value(pr).clone()),
        None => (Mat::zeros((0, 2)), Mat::zeros((0, 2))),
    };
    if probs.iter().chain(logits.iter()).any(|x| !x.is_finite()) {
        return Err(Error::numerical("encoder produced non-finite edge logits"));
    }
    debug_assert_eq!(probs.nrows(), p);
    Ok(LatentEdgePosterior {
        n: sample.n,
        senders: sample.edges.senders.to_vec(),
        receivers: sample.edges.receivers.to_vec(),
        logits,
        probs,
    })
}

/// Standard Gumbel noise, `rows × 2`.
pub fn draw_gumbel<R: RngCore>(rng: &mut R, rows: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, 2), || {
        // strictly inside (0, 1)
        let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        -(-u.ln()).ln()
    })
}

/// Relaxed one-hot samples `softmax((log p + g)/τ)`, or their argmax when
/// `hard`.
pub fn sample_edges(posterior: &LatentEdgePosterior, tau: f64, noise: &Mat, hard: bool) -> Result<Mat> {
    if !(tau > 0.0) {
        return Err(Error::config("Gumbel temperature must be positive"));
    }
    if noise.dim() != posterior.probs.dim() {
        return Err(Error::input("noise shape does not match the posterior"));
    }
    let mut out = Mat::zeros(posterior.probs.raw_dim());
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let z: Vec<f64> = (0..2).map(|k| (posterior.probs[[r, k]].ln() + noise[[r, k]]) / tau).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..2 {
            row[k] = e[k] / s;
        }
        if hard {
            let best = if row[1] > row[0] { 1 } else { 0 };
            row.fill(0.0);
            row[best] = 1.0;
        }
    }
    Ok(out)
}

/// Decoder rollout with fixed edge weights (`P×2`, rows in
/// [`Sample::edges`] order).
pub fn decode(
    model: &Model,
    params: &ModelParams,
    sample: &Sample,
    edges: &Mat,
    teacher_forcing: usize,
) -> Result<Predictions> {
    if edges.dim() != (sample.edges.len(), 2) {
        return Err(Error::input("edge samples must be P×2 over valid pairs"));
    }
    let mut dense = Mat::zeros((sample.n, sample.n));
    for k in 0..sample.edges.len() {
        dense[[sample.edges.senders[k], sample.edges.receivers[k]]] = edges[[k, INTERACTION]];
    }
    let opts = ForwardOptions {
        edges: EdgeMode::Fixed(dense),
        teacher_forcing,
        lambda_kl: 0.0,
    };
    evaluate_loss(model, params, sample, &opts).map(|(_, p)| p)
}
