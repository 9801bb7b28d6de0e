use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vortex_nri::detect::{Orientation, VortexObservation};
use vortex_nri::nri::{
    build_graph, decode, draw_gumbel, encode, evaluate_loss, sample_edges, Ablation, EdgeMode, ForwardOptions,
    LatentEdgePosterior, Model, ModelConfig, ModelParams, Sample,
};
use vortex_nri::synth::SeverityConvention;
use vortex_nri::tape::Tape;
use vortex_nri::track::{assemble_tensor, TrajectoryTensor, VortexTrack, NUM_FEATURES};
use vortex_nri::train::{grad_check, random_fixture, Preprocessing};

fn small_config(t: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        timesteps: t,
        teacher_forcing: 3,
        ..ModelConfig::default()
    }
}

fn prepare(tensor: &TrajectoryTensor, ablation: Ablation) -> Sample {
    let pre = Preprocessing::fit(&[tensor], SeverityConvention::Coa, 1e-6).unwrap();
    pre.sample(tensor, &ablation).unwrap()
}

fn perturbed(model: &Model, seed: u64) -> ModelParams {
    let mut p = model.init_params(seed);
    p.perturb(&mut ChaCha8Rng::seed_from_u64(seed), 0.3);
    p
}

fn track(id: usize, frames: std::ops::Range<usize>, x0: f64, y0: f64, sign: f64) -> VortexTrack {
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

#[test]
fn gradient_matches_finite_differences() {
    let r = grad_check(&small_config(6), Ablation::NONE, 11).unwrap();
    assert!(r.max_rel_error < 1e-4, "worst slice {} at {:e}", r.worst_slice, r.max_rel_error);
    assert!(r.per_slice.iter().any(|(n, _)| n == "g_e.w"));
    assert!(r.per_slice.iter().any(|(n, _)| n == "g_s.w"));
}

#[test]
fn gradient_check_under_ablations() {
    for (name, ab) in Ablation::grid().into_iter().skip(1) {
        let r = grad_check(&small_config(5), ab, 5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{name}: {} at {:e}", r.worst_slice, r.max_rel_error);
    }
}

#[test]
fn severity_has_no_effect_at_initialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tensor = random_fixture(&mut rng, 4, 6, 50.0);
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let params = model.init_params(9);
    let sample = prepare(&tensor, Ablation::NONE);
    let a = encode(&model, &params, &sample.with_severity(30.0, SeverityConvention::Coa)).unwrap();
    let b = encode(&model, &params, &sample.with_severity(90.0, SeverityConvention::Coa)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_network_gives_biased_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tensor = random_fixture(&mut rng, 3, 6, 70.0);
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let mut params = ModelParams::zeros(&model.layout);
    let b = [0.4, -1.1];
    let gw = [0.5, 2.0];
    params.slice_mut(model.layout.get("enc.out.b").unwrap()).copy_from_slice(&b);
    params.slice_mut(model.layout.get("g_s.w").unwrap()).copy_from_slice(&gw);
    params.slice_mut(model.layout.get("g_s.b").unwrap()).copy_from_slice(&[1.0, 1.0]);
    let sample = prepare(&tensor, Ablation::NONE);
    let post = encode(&model, &params, &sample).unwrap();
    let s = 0.7;
    let z = [b[0] * (gw[0] * s + 1.0), b[1] * (gw[1] * s + 1.0)];
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    for p in 0..post.num_edges() {
        for k in 0..2 {
            assert!((post.probs[[p, k]] - e[k] / (e[0] + e[1])).abs() < 1e-15);
        }
    }
}

#[test]
fn same_birth_permutation_permutes_posterior() {
    let tracks = vec![track(0, 0..6, 0.0, 0.0, 1.0), track(1, 0..5, 2.0, 1.0, -1.0), track(2, 1..6, 4.0, -1.0, 1.0)];
    let swapped = vec![tracks[1].clone(), tracks[0].clone(), tracks[2].clone()];
    let ta = assemble_tensor(&tracks, 6, 60.0, 0.0).unwrap();
    let tb = assemble_tensor(&swapped, 6, 60.0, 0.0).unwrap();
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let params = perturbed(&model, 4);
    let pre = Preprocessing::fit(&[&ta], SeverityConvention::Coa, 1e-6).unwrap();
    let pa = encode(&model, &params, &pre.sample(&ta, &Ablation::NONE).unwrap()).unwrap();
    let pb = encode(&model, &params, &pre.sample(&tb, &Ablation::NONE).unwrap()).unwrap();
    let perm = [1, 0, 2];
    for e in 0..pa.num_edges() {
        let (s, r) = (pa.senders[e], pa.receivers[e]);
        for k in 0..2 {
            let q = pb.prob(perm[s], perm[r], k).unwrap();
            assert!((q - pa.probs[[e, k]]).abs() < 1e-12);
        }
    }
}

fn kl_oracle(q: &[f64; 2], prior: &[f64; 2]) -> f64 {
    q[0] * (q[0].ln() - prior[0].ln()) + q[1] * (q[1].ln() - prior[1].ln())
}

#[test]
fn kl_matches_two_term_sum() {
    let tracks = vec![track(0, 0..5, 0.0, 0.0, 1.0), track(1, 0..5, 2.0, 1.0, -1.0)];
    let tensor = assemble_tensor(&tracks, 5, 60.0, 0.0).unwrap();
    let sample = prepare(&tensor, Ablation::NONE);
    let model = Model::new(small_config(5), Ablation::NONE).unwrap();
    for bias in [[0.0, 0.0], [30.0, -30.0], [0.7f64.ln(), 0.3f64.ln()], [-1.3, 2.2]] {
        let mut params = ModelParams::zeros(&model.layout);
        params.slice_mut(model.layout.get("enc.out.b").unwrap()).copy_from_slice(&bias);
        params.slice_mut(model.layout.get("g_s.b").unwrap()).copy_from_slice(&[1.0, 1.0]);
        let opts = ForwardOptions {
            edges: EdgeMode::Argmax,
            teacher_forcing: 1,
            lambda_kl: 1.0,
        };
        let (loss, _) = evaluate_loss(&model, &params, &sample, &opts).unwrap();
        let z = (bias[0] - bias[1]).exp();
        let q = [z / (1.0 + z), 1.0 / (1.0 + z)];
        let expect = kl_oracle(&q, &model.config.prior);
        assert!((loss.kl - expect).abs() < 1e-12, "{bias:?}: {} vs {expect}", loss.kl);
    }
    assert!((kl_oracle(&[1.0 - 1e-300, 1e-300], &[0.7, 0.3]) - (1.0f64 / 0.7).ln()).abs() < 1e-12);
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

#[test]
fn hard_samples_follow_posterior() {
    let post = posterior(&[[0.7, 0.3]]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 100_000;
    let mut ones = 0.0;
    for _ in 0..draws {
        let noise = draw_gumbel(&mut rng, 1);
        ones += sample_edges(&post, 0.5, &noise, true).unwrap()[[0, 1]];
    }
    let freq = ones / draws as f64;
    assert!((freq - 0.3).abs() < 0.01, "{freq}");
}

#[test]
fn soft_samples_are_distributions() {
    let post = posterior(&[[0.7, 0.3], [0.1, 0.9], [0.5, 0.5]]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = draw_gumbel(&mut rng, 3);
    let y = sample_edges(&post, 0.5, &noise, false).unwrap();
    for row in y.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-15);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    let certain = posterior(&[[1.0, 0.0]]);
    for _ in 0..100 {
        let noise = draw_gumbel(&mut rng, 1);
        assert_eq!(sample_edges(&certain, 1e-3, &noise, true).unwrap()[[0, 0]], 1.0);
    }
    assert_eq!(sample_edges(&post, 0.5, &noise, true).unwrap(), sample_edges(&post, 0.5, &noise, true).unwrap());
}

fn three_tracks(t: usize) -> TrajectoryTensor {
    let tracks = vec![
        track(0, 0..t, 0.0, 0.0, 1.0),
        track(1, 0..t - 1, 2.0, 1.0, -1.0),
        track(2, 2..t, 4.0, -1.0, 1.0),
    ];
    assemble_tensor(&tracks, t, 50.0, 0.0).unwrap()
}

#[test]
fn zero_interaction_isolates_vortices() {
    let tensor = three_tracks(6);
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let params = perturbed(&model, 8);
    let sample = prepare(&tensor, Ablation::NONE);
    let zeros = Array2::zeros((sample.edges.len(), 2));
    let base = decode(&model, &params, &sample, &zeros, 2).unwrap();
    let mut other = sample.clone();
    for c in 0..6 * NUM_FEATURES {
        other.features[[1, c]] += 0.37;
    }
    let moved = decode(&model, &params, &other, &zeros, 2).unwrap();
    for s in 0..5 {
        for i in [0, 2] {
            assert_eq!(base.continuous[s].row(i), moved.continuous[s].row(i));
            assert_eq!(base.exist[s].row(i), moved.exist[s].row(i));
        }
    }
}

#[test]
fn zero_delta_head_copies_last_state() {
    let tensor = three_tracks(6);
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let mut params = perturbed(&model, 8);
    for name in ["dec.out.fc3.w", "dec.out.fc3.b"] {
        let spec = model.layout.get(name).unwrap().clone();
        let slice = params.slice_mut(&spec);
        for r in 0..spec.rows {
            for c in 0..4 {
                slice[r * spec.cols + c] = 0.0;
            }
        }
    }
    let sample = prepare(&tensor, Ablation::NONE);
    let edges = Array2::from_elem((sample.edges.len(), 2), 0.5);
    let p = decode(&model, &params, &sample, &edges, 1).unwrap();
    for s in 0..5 {
        for i in 0..3 {
            for f in 0..4 {
                assert_eq!(p.continuous[s][[i, f]], sample.features[[i, s * NUM_FEATURES + f]]);
            }
        }
    }
}

#[test]
fn disallowed_pairs_carry_no_message() {
    let tensor = three_tracks(6);
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let params = perturbed(&model, 8);
    let sample = prepare(&tensor, Ablation::NONE);
    assert!(!sample.mask.allowed(2, 0));
    let mut dense = Array2::from_elem((3, 3), 0.5);
    let opts = |d: Array2<f64>| ForwardOptions {
        edges: EdgeMode::Fixed(d),
        teacher_forcing: 2,
        lambda_kl: 0.0,
    };
    let a = evaluate_loss(&model, &params, &sample, &opts(dense.clone())).unwrap().1;
    dense[[2, 0]] = 1.0;
    dense[[2, 1]] = 1.0;
    let b = evaluate_loss(&model, &params, &sample, &opts(dense)).unwrap().1;
    assert_eq!(a, b);
}

#[test]
fn perfect_continuous_prediction_has_zero_loss() {
    let tracks = vec![
        VortexTrack {
            id: 0,
            observations: (0..5)
                .map(|f| VortexObservation {
                    frame: f,
                    center: (1.0, 0.5),
                    radius: 0.3,
                    orientation: Orientation::Ccw,
                    vorticity: 2.0,
                })
                .collect(),
        },
        VortexTrack {
            id: 1,
            observations: (0..5)
                .map(|f| VortexObservation {
                    frame: f,
                    center: (3.0, -0.5),
                    radius: 0.4,
                    orientation: Orientation::Cw,
                    vorticity: -1.0,
                })
                .collect(),
        },
    ];
    let tensor = assemble_tensor(&tracks, 5, 50.0, 0.0).unwrap();
    let model = Model::new(small_config(5), Ablation::NONE).unwrap();
    let mut params = perturbed(&model, 1);
    for name in ["dec.out.fc3.w", "dec.out.fc3.b"] {
        let spec = model.layout.get(name).unwrap().clone();
        params.slice_mut(&spec).fill(0.0);
    }
    let sample = prepare(&tensor, Ablation::NONE);
    let (loss, _) = evaluate_loss(&model, &params, &sample, &ForwardOptions::evaluation()).unwrap();
    assert_eq!(loss.rec_continuous, 0.0);
}

#[test]
fn lambda_outside_unit_interval_rejected() {
    let tensor = three_tracks(5);
    let model = Model::new(small_config(5), Ablation::NONE).unwrap();
    let sample = prepare(&tensor, Ablation::NONE);
    let mut opts = ForwardOptions::evaluation();
    opts.lambda_kl = 1.5;
    assert!(evaluate_loss(&model, &model.init_params(0), &sample, &opts).is_err());
}

#[test]
fn padded_rows_receive_no_gradient() {
    let mut tensor = three_tracks(6);
    tensor.pad_to(5);
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let params = perturbed(&model, 2);
    let sample = prepare(&tensor, Ablation::NONE);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = ForwardOptions {
        edges: EdgeMode::Soft(draw_gumbel(&mut rng, sample.edges.len())),
        teacher_forcing: 2,
        lambda_kl: 0.5,
    };
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, &model, &params, &sample, &opts).unwrap();
    let grads = tape.backward(g.total);
    let gd = grads.get_or_zeros(&tape, g.data);
    let gt = grads.get_or_zeros(&tape, g.target);
    for i in 3..5 {
        assert!(gd.row(i).iter().all(|&x| x == 0.0));
        assert!(gt.row(i).iter().all(|&x| x == 0.0));
    }
    assert!(gd.row(0).iter().any(|&x| x != 0.0));

    // reconstruction targets at absent timesteps carry no gradient
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, &model, &params, &sample, &opts).unwrap();
    let rec = tape.combine(&[(g.rec_continuous, 1.0), (g.rec_orientation, 1.0)]);
    let gt = tape.backward(rec).get_or_zeros(&tape, g.target);
    for i in 0..5 {
        for t in 0..6 {
            if sample.exist[[i, t]] == 0.0 {
                for f in 0..7 {
                    assert_eq!(gt[[i, t * NUM_FEATURES + f]], 0.0);
                }
            }
        }
    }
}

#[test]
fn masked_direction_blocks_cross_gradient() {
    // births 0 and 2: only 0 → 1 is allowed
    let tracks = vec![track(0, 0..6, 0.0, 0.0, 1.0), track(1, 2..6, 1.5, 0.5, -1.0)];
    let tensor = assemble_tensor(&tracks, 6, 50.0, 0.0).unwrap();
    let model = Model::new(small_config(6), Ablation::NONE).unwrap();
    let params = perturbed(&model, 6);
    let sample = prepare(&tensor, Ablation::NONE);
    assert_eq!(sample.edges.len(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = ForwardOptions {
        edges: EdgeMode::Soft(draw_gumbel(&mut rng, 1)),
        teacher_forcing: 2,
        lambda_kl: 1.0,
    };
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, &model, &params, &sample, &opts).unwrap();
    // vortex 0's reconstruction across all steps
    let mut terms = Vec::new();
    for step in &g.steps {
        let w = Array2::from_shape_fn((2, 4), |(i, _)| if i == 0 { 1.0 } else { 0.0 });
        terms.push((tape.weighted_sum(step.continuous, w), 1.0));
        let w = Array2::from_shape_fn((2, 1), |(i, _)| if i == 0 { 1.0 } else { 0.0 });
        terms.push((tape.weighted_sum(step.exist, w), 1.0));
    }
    let obj = tape.combine(&terms);
    let gd = tape.backward(obj).get_or_zeros(&tape, g.data);
    assert!(gd.row(1).iter().all(|&x| x == 0.0));
    assert!(gd.row(0).iter().any(|&x| x != 0.0));

    // and the allowed direction does couple
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, &model, &params, &sample, &opts).unwrap();
    let mut terms = Vec::new();
    for step in &g.steps {
        let w = Array2::from_shape_fn((2, 4), |(i, _)| if i == 1 { 1.0 } else { 0.0 });
        terms.push((tape.weighted_sum(step.continuous, w), 1.0));
    }
    let obj = tape.combine(&terms);
    let gd = tape.backward(obj).get_or_zeros(&tape, g.data);
    assert!(gd.row(0).iter().any(|&x| x != 0.0));
}

#[test]
fn single_vortex_runs() {
    let tensor = assemble_tensor(&[track(0, 0..5, 0.0, 0.0, 1.0)], 5, 40.0, 0.0).unwrap();
    let mut physical = tensor.clone();
    // scaling needs spread in every feature
    physical.features[NUM_FEATURES + 2] = 0.5;
    physical.features[NUM_FEATURES + 3] = 3.0;
    let model = Model::new(small_config(5), Ablation::NONE).unwrap();
    let sample = prepare(&physical, Ablation::NONE);
    assert_eq!(sample.edges.len(), 0);
    let (loss, preds) =
        evaluate_loss(&model, &model.init_params(0), &sample, &ForwardOptions::evaluation()).unwrap();
    assert_eq!(loss.kl, 0.0);
    assert!(loss.is_finite());
    assert_eq!(preds.continuous.len(), 4);
}
