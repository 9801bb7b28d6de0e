use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vortex_nri::detect::{Orientation, VortexObservation};
use vortex_nri::markers::{monotonicity, r_squared, spearman, Direction};
use vortex_nri::nri::{Ablation, Model, ModelConfig, Predictions, Sample};
use vortex_nri::synth::SeverityConvention;
use vortex_nri::track::{assemble_tensor, fit_scaling, TrajectoryTensor, VortexTrack, NUM_CONTINUOUS, NUM_FEATURES};
use vortex_nri::train::{compute_metrics, evaluate, oracle_predictions, random_fixture, train, Preprocessing, TrainConfig};

fn fixture(seed: u64, n: usize, t: usize) -> TrajectoryTensor {
    random_fixture(&mut ChaCha8Rng::seed_from_u64(seed), n, t, 60.0)
}

fn sample_of(tensor: &TrajectoryTensor, fit_on: &TrajectoryTensor) -> Sample {
    let pre = Preprocessing::fit(&[fit_on], SeverityConvention::Coa, 1e-6).unwrap();
    pre.sample(tensor, &Ablation::NONE).unwrap()
}

fn static_fixture(t: usize) -> TrajectoryTensor {
    let track = |id: usize, x: f64, y: f64, r: f64, w: f64| VortexTrack {
        id,
        observations: (0..t)
            .map(|frame| VortexObservation {
                frame,
                center: (x, y),
                radius: r,
                orientation: if w > 0.0 { Orientation::Ccw } else { Orientation::Cw },
                vorticity: w,
            })
            .collect(),
    };
    let tracks = [track(0, 1.0, 0.5, 0.3, 2.0), track(1, 4.0, -1.0, 0.5, -1.0), track(2, 7.0, 0.0, 0.4, 0.5)];
    assemble_tensor(&tracks, t, 50.0, 0.0).unwrap()
}

/// Predicts the state at `t` as the observed state at `t − 1`.
fn copy_last(sample: &Sample) -> Predictions {
    let mut p = oracle_predictions(sample);
    for (s, cont) in p.continuous.iter_mut().enumerate() {
        *cont = Array2::from_shape_fn((sample.n, NUM_CONTINUOUS), |(i, f)| sample.features[[i, s * NUM_FEATURES + f]]);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scaling_round_trips(seed in 0u64..10_000, n in 2usize..7, t in 3usize..10) {
        let tensor = fixture(seed, n, t);
        let scaling = fit_scaling([&tensor]).unwrap();
        let scaled = scaling.apply(&tensor);
        let back = scaling.invert(&scaled);
        for i in 0..tensor.n {
            for s in 0..tensor.t {
                for f in 0..NUM_CONTINUOUS {
                    let (a, b) = (tensor.row(i, s)[f], back.row(i, s)[f]);
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
                    if tensor.exists(i, s) {
                        prop_assert!(scaled.row(i, s)[f].abs() <= 1.0 + 1e-12);
                    }
                }
                prop_assert_eq!(&tensor.row(i, s)[NUM_CONTINUOUS..], &scaled.row(i, s)[NUM_CONTINUOUS..]);
            }
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        pairs in prop::collection::vec((-3.0f64..3.0, 0u8..5), 4..30),
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        prop_assume!(ys.iter().any(|y| *y != ys[0]));
        let (rho, p) = spearman(&xs, &ys).unwrap();
        let ex: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| 3.0 * y + 1.0).collect();
        let (rho2, p2) = spearman(&ex, &ly).unwrap();
        prop_assert!((rho - rho2).abs() < 1e-12);
        prop_assert!((p - p2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn monotonicity_ignores_item_order(
        items in prop::collection::vec((3u8..11, 0.0f64..1.0), 3..40),
        seed in 0u64..1000,
    ) {
        prop_assume!(items.iter().any(|it| it.0 != items[0].0));
        let sev: Vec<f64> = items.iter().map(|it| 10.0 * it.0 as f64).collect();
        let h: Vec<f64> = items.iter().map(|it| it.1).collect();
        let m = monotonicity(&sev, &h, Direction::Decreasing).unwrap();
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let sev2: Vec<f64> = shuffled.iter().map(|it| 10.0 * it.0 as f64).collect();
        let h2: Vec<f64> = shuffled.iter().map(|it| it.1).collect();
        let m2 = monotonicity(&sev2, &h2, Direction::Decreasing).unwrap();
        prop_assert!((m - m2).abs() < 1e-12);
        let up = monotonicity(&sev, &h, Direction::Increasing).unwrap();
        prop_assert!(m + up <= 1.0 + 1e-12);
    }

    #[test]
    fn r_squared_is_affine_invariant(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
        a in prop::sample::select(vec![-2.5, -0.3, 0.7, 4.0]),
        b in -10.0f64..10.0,
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = r_squared(&xs, &ys).unwrap();
        let ax: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ay: Vec<f64> = ys.iter().map(|y| b - a * y).collect();
        prop_assert!((r - r_squared(&ax, &ay).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn padded_rows_do_not_change_metrics() {
    let t = 6;
    let model = Model::new(
        ModelConfig {
            hidden: 8,
            timesteps: t,
            ..ModelConfig::default()
        },
        Ablation::NONE,
    )
    .unwrap();
    let params = model.init_params(4);
    for seed in 0..5 {
        let tensor = fixture(seed, 4, t);
        let mut padded = tensor.clone();
        padded.pad_to(7);
        let a = evaluate(&model, &params, &[sample_of(&tensor, &tensor)]).unwrap().0;
        let b = evaluate(&model, &params, &[sample_of(&padded, &tensor)]).unwrap().0;
        assert_eq!(a, b);
    }
}

#[test]
fn oracle_scores_perfectly() {
    let tensor = fixture(3, 5, 7);
    let s = sample_of(&tensor, &tensor);
    let m = compute_metrics(std::slice::from_ref(&s), &[oracle_predictions(&s)]);
    assert_eq!(m.mse, 0.0);
    assert_eq!(m.mae, 0.0);
    assert_eq!(m.existence_accuracy, 1.0);
}

#[test]
fn copy_last_is_exact_on_static_tracks() {
    let tensor = static_fixture(6);
    let s = sample_of(&tensor, &tensor);
    let m = compute_metrics(std::slice::from_ref(&s), &[copy_last(&s)]);
    assert_eq!(m.mse, 0.0);
    assert_eq!(m.existing_entries, 3 * 5);
}

#[test]
fn neutral_existence_score_matches_base_rate() {
    for seed in 0..5 {
        let tensor = fixture(seed, 5, 8);
        let s = sample_of(&tensor, &tensor);
        let mut p = oracle_predictions(&s);
        for e in p.exist.iter_mut() {
            e.fill(0.5);
        }
        let m = compute_metrics(std::slice::from_ref(&s), &[p]);
        let (mut present, mut total) = (0, 0);
        for i in 0..tensor.n {
            for t in 1..tensor.t {
                total += 1;
                present += tensor.exists(i, t) as usize;
            }
        }
        assert_eq!(m.existence_accuracy, present as f64 / total as f64);
    }
}

#[test]
fn training_reduces_loss() {
    let t = 6;
    let tensors: Vec<TrajectoryTensor> = (0..4).map(|s| fixture(s, 4, t)).collect();
    let pre = Preprocessing::fit(&tensors.iter().collect::<Vec<_>>(), SeverityConvention::Coa, 1e-6).unwrap();
    let samples: Vec<Sample> = tensors.iter().map(|x| pre.sample(x, &Ablation::NONE).unwrap()).collect();
    let model = Model::new(
        ModelConfig {
            hidden: 16,
            timesteps: t,
            ..ModelConfig::default()
        },
        Ablation::NONE,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 21,
        batch_size: 2,
        learning_rate: 1e-3,
        anneal_epochs: 1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let out = train(&model, &samples, &[], &cfg, |_, _| Ok(())).unwrap();
    let totals: Vec<f64> = out.log.iter().map(|r| r.loss.total).collect();
    let drops = totals.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 18, "loss fell in {drops} of 20 epochs: {totals:?}");
}
