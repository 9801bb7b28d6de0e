//! Acceptance suite. Prints one PASS/FAIL line per check and exits
//! non-zero if any fails. Pass substrings as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- determinism`.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vortex_nri::detect::{
    detect_frame, rortex, rortex_field, velocity_gradient, DetectConfig, Orientation, VortexObservation,
};
use vortex_nri::field::{Grid, VelocityField};
use vortex_nri::markers::{edge_entropy, monotonicity, perturb_severity, r_squared, spearman, weight_entropy, Direction};
use vortex_nri::nri::{
    build_graph, draw_gumbel, encode, evaluate_loss, sample_edges, Ablation, CausalMask, EdgeMode, ForwardOptions,
    LatentEdgePosterior, Model, ModelConfig, ModelParams, Sample,
};
use vortex_nri::synth::{lamb_oseen_velocity, simulate_with, SeedVortex, SeverityConvention, SynthConfig};
use vortex_nri::tape::Tape;
use vortex_nri::track::{assemble_tensor, associate, track_sequence, TrajectoryTensor, VortexTrack};
use vortex_nri::train::{evaluate, grad_check, random_fixture, train, Preprocessing, TrainConfig};

type Outcome = Result<String, Box<dyn StdError>>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), Box<dyn StdError>> {
    if ok {
        Ok(())
    } else {
        Err(msg().into())
    }
}

fn small_config(t: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        timesteps: t,
        teacher_forcing: 3,
        ..ModelConfig::default()
    }
}

fn prepare(tensor: &TrajectoryTensor, ablation: Ablation) -> Result<Sample, Box<dyn StdError>> {
    let pre = Preprocessing::fit(&[tensor], SeverityConvention::Coa, 1e-6)?;
    Ok(pre.sample(tensor, &ablation)?)
}

fn perturbed(model: &Model, seed: u64) -> ModelParams {
    let mut p = model.init_params(seed);
    p.perturb(&mut ChaCha8Rng::seed_from_u64(seed), 0.3);
    p
}

fn drifting_track(id: usize, frames: std::ops::Range<usize>, x0: f64, y0: f64, sign: f64) -> VortexTrack {
    VortexTrack {
        id,
        observations: frames
            .map(|f| VortexObservation {
                frame: f,
                center: (x0 + 0.3 * f as f64, y0 + 0.05 * f as f64 * sign),
                radius: 0.3 + 0.02 * id as f64,
                orientation: if sign > 0.0 { Orientation::Ccw } else { Orientation::Cw },
                vorticity: sign * (1.0 + 0.1 * id as f64),
            })
            .collect(),
    }
}

// 1

fn rortex_closed_forms() -> Outcome {
    let omega = 1.3;
    let analytic = rortex([0.0, -omega, omega, 0.0]);
    ensure(((analytic - 2.0 * omega) / (2.0 * omega)).abs() <= 1e-10, || format!("analytic R = {analytic}"))?;
    ensure(rortex([0.0, 0.7, 0.0, 0.0]) == 0.0, || "analytic shear R != 0".into())?;

    let g = Grid::new(48, 48, 0.125, 0.125, (-3.0, -3.0))?;
    let rigid = VelocityField::from_fn(g, |x, y| (-omega * y, omega * x));
    let r = rortex_field(&velocity_gradient(&rigid)?);
    let mut worst: f64 = 0.0;
    for iy in 1..g.ny - 1 {
        for ix in 1..g.nx - 1 {
            worst = worst.max(((r[g.index(ix, iy)] - 2.0 * omega) / (2.0 * omega)).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("rigid rotation rel. error {worst:e}"))?;

    let shear = VelocityField::from_fn(g, |_, y| (0.7 * y, 0.0));
    let r = rortex_field(&velocity_gradient(&shear)?);
    ensure(r.iter().all(|&v| v == 0.0), || "shear field has non-zero R".into())?;

    // u = −sin y, v = sin x: rotation-dominated where |x|, |y| < π/2
    let err = |n: usize| -> Result<f64, Box<dyn StdError>> {
        let d = 3.0 / n as f64;
        let g = Grid::new(n, n, d, d, (-1.5, -1.5))?;
        let f = VelocityField::from_fn(g, |x, y| (-y.sin(), x.sin()));
        let r = rortex_field(&velocity_gradient(&f)?);
        let mut worst: f64 = 0.0;
        for iy in 1..n - 1 {
            for ix in 1..n - 1 {
                let (x, y) = g.center(ix, iy);
                if x.abs() < 1.0 && y.abs() < 1.0 {
                    let exact = rortex([0.0, -y.cos(), x.cos(), 0.0]);
                    worst = worst.max((r[g.index(ix, iy)] - exact).abs());
                }
            }
        }
        Ok(worst)
    };
    let (coarse, fine) = (err(40)?, err(80)?);
    let order = (coarse / fine).log2();
    ensure(order >= 1.9, || format!("finite-difference order {order:.3}"))?;
    Ok(format!("rigid rel. error {worst:.1e}, FD order {order:.3}, shear R = 0"))
}

// 2

fn detection_oracle() -> Outcome {
    let g = Grid::new(80, 80, 0.1, 0.1, (0.0, 0.0))?;
    let cfg = DetectConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let c = (rng.random_range(2.5..5.5), rng.random_range(2.5..5.5));
        let sign: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let f = VelocityField::from_fn(g, |x, y| lamb_oseen_velocity(c, sign * 2.0 * PI, 1.0, (x, y)));
        let obs = detect_frame(&f, &cfg, 0)?;
        ensure(obs.len() == 1, || format!("placement {k} at {c:?}: {} detections", obs.len()))?;
        let d = ((obs[0].center.0 - c.0).powi(2) + (obs[0].center.1 - c.1).powi(2)).sqrt();
        worst = worst.max(d);
        ensure(d <= g.dx, || format!("placement {k}: centre error {d}"))?;
        let want = if sign > 0.0 { Orientation::Ccw } else { Orientation::Cw };
        ensure(obs[0].orientation == want, || format!("placement {k}: wrong orientation"))?;
    }
    Ok(format!("100/100 placements, worst centre error {worst:.4} (dx = 0.1)"))
}

// 3

fn obs(frame: usize, x: f64, y: f64, r: f64, w: f64) -> VortexObservation {
    VortexObservation {
        frame,
        center: (x, y),
        radius: r,
        orientation: if w > 0.0 { Orientation::Ccw } else { Orientation::Cw },
        vorticity: w,
    }
}

fn tracking_fixtures() -> Outcome {
    // A (ccw) and B (cw) cross at frame 2, B dies after frame 3, C is born at
    // frame 2, D lives one frame and a core reappears at its spot at frame 3.
    let frames: Vec<Vec<VortexObservation>> = vec![
        vec![obs(0, 0.0, 0.0, 0.6, 1.0), obs(0, 4.0, 0.2, 0.6, -1.0)],
        vec![obs(1, 1.0, 0.0, 0.6, 1.0), obs(1, 3.0, 0.2, 0.6, -1.0), obs(1, 20.0, 0.0, 0.6, 1.0)],
        vec![obs(2, 2.0, 0.0, 0.6, 1.0), obs(2, 2.0, 0.2, 0.6, -1.0), obs(2, 10.0, 0.0, 0.6, 1.5)],
        vec![
            obs(3, 3.0, 0.0, 0.6, 1.0),
            obs(3, 1.0, 0.2, 0.6, -1.0),
            obs(3, 10.1, 0.0, 0.6, 1.5),
            obs(3, 20.0, 0.0, 0.6, 1.0),
        ],
        vec![obs(4, 4.0, 0.0, 0.6, 1.0), obs(4, 20.0, 0.1, 0.6, 1.0)],
    ];
    let tracks = associate(&frames);
    let summary: Vec<(usize, Vec<usize>, Vec<f64>)> = tracks
        .iter()
        .map(|t| {
            (
                t.id,
                t.observations.iter().map(|o| o.frame).collect(),
                t.observations.iter().map(|o| o.center.0).collect(),
            )
        })
        .collect();
    let expected = vec![
        (0, vec![0, 1, 2, 3, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0]),
        (1, vec![0, 1, 2, 3], vec![4.0, 3.0, 2.0, 1.0]),
        (2, vec![1], vec![20.0]),
        (3, vec![2, 3], vec![10.0, 10.1]),
        (4, vec![3, 4], vec![20.0, 20.0]),
    ];
    ensure(summary == expected, || format!("tracks {summary:?}"))?;

    let tensor = assemble_tensor(&tracks, 5, 50.0, 5.0)?;
    tensor.validate()?;
    ensure(tensor.n == 5 && tensor.births == vec![0, 0, 1, 2, 3], || format!("births {:?}", tensor.births))?;
    let ccw = |x: f64, y: f64, w: f64| [x, y, 0.6, w, 1.0, 0.0, 0.0, 1.0];
    let cw = |x: f64, y: f64| [x, y, 0.6, -1.0, 0.0, 1.0, 0.0, 1.0];
    let absent = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let rows: [[[f64; 8]; 5]; 5] = [
        [ccw(0.0, 0.0, 1.0), ccw(1.0, 0.0, 1.0), ccw(2.0, 0.0, 1.0), ccw(3.0, 0.0, 1.0), ccw(4.0, 0.0, 1.0)],
        [cw(4.0, 0.2), cw(3.0, 0.2), cw(2.0, 0.2), cw(1.0, 0.2), absent],
        [absent, ccw(20.0, 0.0, 1.0), absent, absent, absent],
        [absent, absent, ccw(10.0, 0.0, 1.5), ccw(10.1, 0.0, 1.5), absent],
        [absent, absent, absent, ccw(20.0, 0.0, 1.0), ccw(20.0, 0.1, 1.0)],
    ];
    for (i, row) in rows.iter().enumerate() {
        for (t, want) in row.iter().enumerate() {
            ensure(tensor.row(i, t) == want, || format!("row {i} frame {t}: {:?}", tensor.row(i, t)))?;
            ensure(tensor.exists(i, t) == (want[7] == 1.0), || format!("mask {i} {t}"))?;
        }
    }

    let mut padded = tensor.clone();
    padded.pad_to(7);
    padded.validate()?;
    for i in 5..7 {
        ensure(!padded.is_real(i), || format!("padded row {i} exists"))?;
        for t in 0..5 {
            ensure(padded.row(i, t) == absent, || format!("padded row {i} frame {t}"))?;
        }
    }
    Ok("crossing, birth, death and reappearance fixtures match; rows padded with absent entries".into())
}

// 4

fn gradient_check() -> Outcome {
    let r = grad_check(&small_config(6), Ablation::NONE, 11)?;
    for gate in ["g_e.w", "g_s.w", "dec.out.fc3.w", "enc.out.w"] {
        ensure(r.per_slice.iter().any(|(n, _)| n == gate), || format!("{gate} missing from the model"))?;
    }
    ensure(r.max_rel_error < 1e-4, || format!("worst slice {} at {:e}", r.worst_slice, r.max_rel_error))?;
    Ok(format!(
        "{} parameters, max rel. error {:.2e} ({})",
        r.num_params, r.max_rel_error, r.worst_slice
    ))
}

// 5

fn three_tracks(t: usize) -> Result<TrajectoryTensor, Box<dyn StdError>> {
    let tracks = vec![
        drifting_track(0, 0..t, 0.0, 0.0, 1.0),
        drifting_track(1, 0..t - 1, 2.0, 1.0, -1.0),
        drifting_track(2, 2..t, 4.0, -1.0, 1.0),
    ];
    Ok(assemble_tensor(&tracks, t, 50.0, 0.0)?)
}

fn masking_and_causality() -> Outcome {
    let mut tensor = three_tracks(6)?;
    tensor.pad_to(5);
    let model = Model::new(small_config(6), Ablation::NONE)?;
    let params = perturbed(&model, 2);
    let sample = prepare(&tensor, Ablation::NONE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = ForwardOptions {
        edges: EdgeMode::Soft(draw_gumbel(&mut rng, sample.edges.len())),
        teacher_forcing: 2,
        lambda_kl: 0.5,
    };
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, &model, &params, &sample, &opts)?;
    let grads = tape.backward(g.total);
    let gd = grads.get_or_zeros(&tape, g.data);
    let gt = grads.get_or_zeros(&tape, g.target);
    for i in 3..5 {
        ensure(gd.row(i).iter().all(|&x| x == 0.0), || format!("padded input row {i} has gradient"))?;
        ensure(gt.row(i).iter().all(|&x| x == 0.0), || format!("padded target row {i} has gradient"))?;
    }
    ensure(gd.row(0).iter().any(|&x| x != 0.0), || "real row has no gradient".into())?;

    // births 0 and 2 allow only 0 → 1
    let tracks = vec![drifting_track(0, 0..6, 0.0, 0.0, 1.0), drifting_track(1, 2..6, 1.5, 0.5, -1.0)];
    let tensor = assemble_tensor(&tracks, 6, 50.0, 0.0)?;
    let params = perturbed(&model, 6);
    let sample = prepare(&tensor, Ablation::NONE)?;
    ensure(sample.edges.len() == 1 && !sample.mask.allowed(1, 0), || "unexpected causal mask".into())?;
    let opts = ForwardOptions {
        edges: EdgeMode::Soft(draw_gumbel(&mut rng, 1)),
        teacher_forcing: 2,
        lambda_kl: 1.0,
    };
    let row_gradient = |target: usize| -> Result<Array2<f64>, Box<dyn StdError>> {
        let mut tape = Tape::new();
        let g = build_graph(&mut tape, &model, &params, &sample, &opts)?;
        let mut terms = Vec::new();
        for step in &g.steps {
            let w = Array2::from_shape_fn((2, 4), |(i, _)| if i == target { 1.0 } else { 0.0 });
            terms.push((tape.weighted_sum(step.continuous, w), 1.0));
            let w = Array2::from_shape_fn((2, 1), |(i, _)| if i == target { 1.0 } else { 0.0 });
            terms.push((tape.weighted_sum(step.exist, w), 1.0));
        }
        let obj = tape.combine(&terms);
        Ok(tape.backward(obj).get_or_zeros(&tape, g.data))
    };
    let g0 = row_gradient(0)?;
    ensure(g0.row(1).iter().all(|&x| x == 0.0), || "masked direction 1 → 0 carries gradient".into())?;
    let g1 = row_gradient(1)?;
    ensure(g1.row(0).iter().any(|&x| x != 0.0), || "allowed direction 0 → 1 carries no gradient".into())?;
    Ok("padded rows and the masked direction receive exactly zero gradient".into())
}

// 6

fn kl_oracle(q: &[f64; 2], prior: &[f64; 2]) -> f64 {
    q[0] * (q[0].ln() - prior[0].ln()) + q[1] * (q[1].ln() - prior[1].ln())
}

fn posterior(probs: &[[f64; 2]]) -> LatentEdgePosterior {
    let p = probs.len();
    LatentEdgePosterior {
        n: p + 1,
        senders: vec![0; p],
        receivers: (1..=p).collect(),
        logits: Array2::from_shape_fn((p, 2), |(r, k)| probs[r][k].ln()),
        probs: Array2::from_shape_fn((p, 2), |(r, k)| probs[r][k]),
    }
}

fn kl_and_sampling() -> Outcome {
    let tracks = vec![drifting_track(0, 0..5, 0.0, 0.0, 1.0), drifting_track(1, 0..5, 2.0, 1.0, -1.0)];
    let tensor = assemble_tensor(&tracks, 5, 60.0, 0.0)?;
    let sample = prepare(&tensor, Ablation::NONE)?;
    let model = Model::new(small_config(5), Ablation::NONE)?;
    let mut worst_kl: f64 = 0.0;
    for bias in [[0.0, 0.0], [30.0, -30.0], [0.7f64.ln(), 0.3f64.ln()], [-1.3, 2.2], [4.0, 0.5]] {
        let mut params = ModelParams::zeros(&model.layout);
        params.slice_mut(model.layout.get("enc.out.b").ok_or("no enc.out.b")?).copy_from_slice(&bias);
        params.slice_mut(model.layout.get("g_s.b").ok_or("no g_s.b")?).copy_from_slice(&[1.0, 1.0]);
        let opts = ForwardOptions {
            edges: EdgeMode::Argmax,
            teacher_forcing: 1,
            lambda_kl: 1.0,
        };
        let (loss, _) = evaluate_loss(&model, &params, &sample, &opts)?;
        let z = (bias[0] - bias[1]).exp();
        let q = [z / (1.0 + z), 1.0 / (1.0 + z)];
        let err = (loss.kl - kl_oracle(&q, &model.config.prior)).abs();
        worst_kl = worst_kl.max(err);
        ensure(err < 1e-12, || format!("KL off by {err:e} at logits {bias:?}"))?;
    }

    let targets = [[0.7, 0.3], [0.1, 0.9], [0.5, 0.5], [0.97, 0.03]];
    let post = posterior(&targets);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 100_000;
    let mut ones = [0.0; 4];
    for _ in 0..draws {
        let noise = draw_gumbel(&mut rng, targets.len());
        let y = sample_edges(&post, 0.5, &noise, true)?;
        for (e, c) in ones.iter_mut().enumerate() {
            *c += y[[e, 1]];
        }
    }
    let mut worst_freq: f64 = 0.0;
    for (e, c) in ones.iter().enumerate() {
        let err = (c / draws as f64 - targets[e][1]).abs();
        worst_freq = worst_freq.max(err);
        ensure(err <= 0.01, || format!("edge {e}: frequency off by {err}"))?;
    }
    Ok(format!("KL error {worst_kl:.1e}, worst hard-sample frequency error {worst_freq:.4}"))
}

// 7

fn entropy_reference(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        return 0.0;
    }
    s.ln() - w.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>() / s
}

fn rank_reference(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let below = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn correlation_reference(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt()
}

fn monotonicity_reference(levels: &[i64], values: &[f64]) -> f64 {
    let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (l, v) in levels.iter().zip(values) {
        groups.entry(*l).or_default().push(*v);
    }
    let means: Vec<f64> = groups.values().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let mut down = 0;
    for k in 1..means.len() {
        if means[k] < means[k - 1] {
            down += 1;
        }
    }
    down as f64 / (means.len() - 1) as f64
}

fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut track = |what: &str, got: f64, want: f64| -> Result<(), Box<dyn StdError>> {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-10, || format!("{what}: {got} vs reference {want}"))
    };
    for _ in 0..100 {
        let n = rng.random_range(5..40);
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() })
            .collect();
        track("entropy", weight_entropy(w.iter().copied()), entropy_reference(&w))?;

        // small integer ranges force ties
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.3 + rng.random_range(0..4) as f64).collect();
        if xs.iter().all(|x| *x == xs[0]) || ys.iter().all(|y| *y == ys[0]) {
            continue;
        }
        let (rho, _) = spearman(&xs, &ys)?;
        track("spearman", rho, correlation_reference(&rank_reference(&xs), &rank_reference(&ys)))?;

        let levels: Vec<i64> = (0..n).map(|_| 10 * rng.random_range(3..11)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sev: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
        if levels.iter().all(|l| *l == levels[0]) {
            continue;
        }
        track(
            "monotonicity",
            monotonicity(&sev, &values, Direction::Decreasing)?,
            monotonicity_reference(&levels, &values),
        )?;

        let fx: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fy: Vec<f64> = fx.iter().map(|x| 0.8 * x + rng.random_range(-3.0..3.0)).collect();
        track("r_squared", r_squared(&fx, &fy)?, correlation_reference(&fx, &fy).powi(2))?;
    }

    ensure(weight_entropy([0.25; 4].into_iter()) == 4f64.ln(), || "entropy of four equal weights != ln 4".into())?;
    let (rho, _) = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?;
    ensure(rho == 0.8, || format!("ρ((1,2,3,4),(1,3,2,4)) = {rho}"))?;
    let m = monotonicity(&[1.0, 2.0, 3.0, 4.0], &[3.0, 2.0, 2.5, 1.0], Direction::Decreasing)?;
    ensure(m == 2.0 / 3.0, || format!("monotonicity {m}"))?;
    Ok(format!("100 random instances, worst deviation {worst:.1e}; worked examples exact"))
}

// 8

fn severity_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tensor = random_fixture(&mut rng, 5, 8, 50.0);
    let model = Model::new(
        ModelConfig {
            hidden: 16,
            timesteps: 8,
            ..ModelConfig::default()
        },
        Ablation::NONE,
    )?;
    let params = model.init_params(9);
    let sample = prepare(&tensor, Ablation::NONE)?;
    let conv = SeverityConvention::Coa;
    let reference = encode(&model, &params, &sample.with_severity(30.0, conv))?;
    let h_ref = [edge_entropy(&reference, 0)?, edge_entropy(&reference, 1)?];
    for s in [40.0, 55.5, 70.0, 100.0] {
        let p = encode(&model, &params, &sample.with_severity(s, conv))?;
        ensure(p == reference, || format!("posterior changes at severity {s}"))?;
        let h = [edge_entropy(&p, 0)?, edge_entropy(&p, 1)?];
        ensure(h[0].to_bits() == h_ref[0].to_bits() && h[1].to_bits() == h_ref[1].to_bits(), || {
            format!("entropy changes at severity {s}")
        })?;
    }
    for s in [30.0, 65.0, 100.0] {
        let pert = perturb_severity(&model, &params, &sample.with_severity(s, conv), 10.0, conv)?;
        ensure(pert.delta_up() == [0.0, 0.0] && pert.delta_down() == [0.0, 0.0], || {
            format!("ΔH = {:?} / {:?} at severity {s}", pert.delta_down(), pert.delta_up())
        })?;
    }
    Ok(format!("{} edges, posteriors bitwise identical over 5 severities, ΔH = 0", reference.num_edges()))
}

// 9

fn overfit_smoke() -> Outcome {
    let cfg = SynthConfig {
        severity: 100.0,
        noise_sigma: 0.0,
        seed: 1,
        birth_rate: 0.0,
        ..SynthConfig::default()
    };
    let core = |x: f64, y: f64, circulation: f64, core_radius: f64| SeedVortex {
        center: (x, y),
        circulation,
        core_radius,
    };
    let seeded = [
        core(4.0, 0.8, 1.0, 0.3),
        core(8.0, -0.8, -2.0, 0.5),
        core(12.0, 0.5, 3.0, 0.7),
        core(14.6, 0.4, -2.0, 0.3),
        core(14.6, -0.4, 2.0, 0.3),
    ];
    let sim = simulate_with(&cfg, &seeded)?;
    let (_, tensor) = track_sequence(&sim.fields, &DetectConfig::default(), cfg.severity, cfg.noise_sigma)?;
    let sample = prepare(&tensor, Ablation::NONE)?;
    let model = Model::new(
        ModelConfig {
            timesteps: tensor.t,
            ..ModelConfig::default()
        },
        Ablation::NONE,
    )?;
    let tc = TrainConfig {
        epochs: 500,
        batch_size: 1,
        eval_every: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let items = [sample];
    let out = train(&model, &items, &[], &tc, |_, _| Ok(()))?;
    let (m, _) = evaluate(&model, &out.state.params, &items)?;
    ensure(m.mse < 0.01 && m.existence_accuracy > 0.95, || {
        format!("MSE {:.5}, existence accuracy {:.4}", m.mse, m.existence_accuracy)
    })?;
    Ok(format!(
        "{} tracks, MSE {:.5}, existence accuracy {:.4}",
        tensor.n, m.mse, m.existence_accuracy
    ))
}

// CLI helpers

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(stage: &str, config: &Path, out: &Path, extra: &[&str]) -> Result<(), Box<dyn StdError>> {
    let output = Command::new(env!("CARGO_BIN_EXE_vortex-nri"))
        .arg(stage)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()?;
    ensure(output.status.success(), || {
        format!(
            "`{stage}` exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )
    })
}

fn pipeline(config: &Path, out: &Path, stages: &[&str]) -> Result<(), Box<dyn StdError>> {
    for stage in stages {
        cli(stage, config, out, &[])?;
    }
    Ok(())
}

// 10

fn trend_analogue() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let out = tmp.path().join("run");
    pipeline(&configs_dir().join("trend.conf"), &out, &["gen", "track", "train", "markers"])?;
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("markers/summary.json"))?)?;
    let st = &summary["edge_types"]["interaction"];
    let rho = st["rho"].as_f64().ok_or("no ρ in summary")?;
    let mono = st["monotonicity"].as_f64().ok_or("no monotonicity in summary")?;
    let held_out = summary["simulations"].as_u64().unwrap_or(0);
    ensure(held_out == 8, || format!("{held_out} held-out simulations scored"))?;
    ensure(rho.abs() >= 0.8 && mono >= 0.75, || format!("ρ = {rho:.4}, monotonicity {mono:.3}"))?;
    Ok(format!(
        "ρ = {rho:.4} (p = {:.2e}), monotonicity {mono:.3} on 8 held-out simulations",
        st["p_value"].as_f64().unwrap_or(f64::NAN)
    ))
}

// 11

fn ablation_harness() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let out = tmp.path().join("run");
    pipeline(&configs_dir().join("ablation.conf"), &out, &["gen", "track", "ablate"])?;
    let text = fs::read_to_string(out.join("ablate/ablation.csv"))?;
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines.len() == 6, || format!("{} lines in ablation.csv", lines.len()))?;
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap_or("")).collect();
    let want: Vec<&str> = Ablation::grid().iter().map(|(n, _)| *n).collect();
    ensure(names == want, || format!("rows {names:?}"))?;
    for line in &lines {
        let cols: Vec<&str> = line.split(',').collect();
        ensure(cols.len() == 8, || format!("{} columns in `{line}`", cols.len()))?;
    }
    for line in &lines[1..] {
        for c in line.split(',').skip(1).take(3) {
            ensure(c.parse::<f64>().map(f64::is_finite).unwrap_or(false), || format!("bad metric in `{line}`"))?;
        }
    }

    // introspection of the original NRI rewiring against the full model
    let tensor = three_tracks(6)?;
    let full = Model::new(small_config(6), Ablation::NONE)?;
    let original_flags = Ablation::grid()[4].1;
    let original = Model::new(small_config(6), original_flags)?;
    let s_full = prepare(&tensor, Ablation::NONE)?;
    let s_orig = prepare(&tensor, original_flags)?;
    let real = vec![true; tensor.n];
    ensure(s_orig.mask == CausalMask::unordered(&real), || "original NRI mask is not all-pairs".into())?;
    ensure(s_full.mask == CausalMask::from_births(&tensor.births, &real), || "full mask is not causal".into())?;
    ensure(s_orig.edges.len() > s_full.edges.len(), || "masks do not differ".into())?;
    for gate in ["g_e.w", "g_e.b", "g_s.w", "g_s.b"] {
        ensure(full.layout.has(gate) && !original.layout.has(gate), || format!("gate {gate} layout"))?;
    }
    let opts = ForwardOptions::evaluation();
    let (lf, _) = evaluate_loss(&full, &perturbed(&full, 3), &s_full, &opts)?;
    let (lo, _) = evaluate_loss(&original, &perturbed(&original, 3), &s_orig, &opts)?;
    ensure(lf.rec_orientation > 0.0 && lf.exist > 0.0, || "full loss lacks CE/BCE terms".into())?;
    ensure(lo.rec_orientation == 0.0 && lo.exist == 0.0, || "original NRI loss has CE/BCE terms".into())?;
    Ok(format!("5 rows x 7 metrics; original NRI: {} vs {} edges, no gates, plain loss", s_orig.edges.len(), s_full.edges.len()))
}

// 12

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, Box<dyn StdError>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let config = tmp.path().join("small.conf");
    fs::write(
        &config,
        "seed = 99\nseverity_levels = 30,100\nnoise_levels = 5,10\nreplicates = 1\neval_count = 2\n\
         num_frames = 8\nhidden = 16\nepochs = 2\nanneal_epochs = 2\nbatch_size = 2\neval_every = 1\n\
         checkpoint_every = 1\n",
    )?;
    let stages = ["gen", "track", "train", "eval", "markers"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&config, &a, &stages)?;
    pipeline(&config, &b, &stages)?;
    let (fa, fb) = (files_under(&a)?, files_under(&b)?);
    ensure(fa.keys().eq(fb.keys()), || "runs wrote different file sets".into())?;
    for stage in ["data", "train", "eval", "markers"] {
        ensure(fa.keys().any(|p| p.starts_with(stage)), || format!("no {stage} output"))?;
    }
    for (path, bytes) in &fa {
        ensure(fb[path] == *bytes, || format!("{} differs between runs", path.display()))?;
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 12] = [
        ("rortex closed forms", rortex_closed_forms),
        ("detection oracle", detection_oracle),
        ("tracking fixtures", tracking_fixtures),
        ("gradient check", gradient_check),
        ("masking and causality", masking_and_causality),
        ("KL and sampling", kl_and_sampling),
        ("statistics oracles", statistics_oracles),
        ("severity-conditioning identity", severity_identity),
        ("overfit smoke test", overfit_smoke),
        ("synthetic trend analogue", trend_analogue),
        ("ablation harness", ablation_harness),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let secs = Duration::as_secs_f64(&start.elapsed());
        let (ok, detail) = match result {
            Ok(Ok(d)) => (true, d),
            Ok(Err(e)) => (false, e.to_string()),
            Err(_) => (false, "panicked".to_string()),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name} ({secs:.1} s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            k + 1
        );
    }
    if failed > 0 {
        println!("{failed} checks failed");
        std::process::exit(1);
    }
}
