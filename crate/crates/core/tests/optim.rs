use densify::cloud::{Point, PointCloud};
use densify::losses::LossWeights;
use densify::optim::{adam_step, initial_dense, upsample_direct, AdamConfig, AdamState, OptimConfig};
use densify::render::make_view_ring;
use proptest::prelude::*;

#[test]
fn adam_follows_reference_trajectory() {
    let expected = [
        [0.99900000002, -1.9990000000099999],
        [0.9981969590638465, -1.9993661035347206],
        [0.9979862461176351, -1.9996491026200092],
    ];
    let grads = [[0.5, -1.0], [0.1, 2.0], [-0.3, 0.0]];
    let mut x = vec![1.0, -2.0];
    let mut state = AdamState::new(2);
    for (g, want) in grads.iter().zip(expected) {
        state.step(&mut x, g, &AdamConfig::default()).unwrap();
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
    assert_eq!(state.t, 3);
}

proptest! {
    #[test]
    fn constant_gradient_moves_at_learning_rate(g in -5.0f64..5.0, steps in 1usize..40, x0 in -3.0f64..3.0) {
        prop_assume!(g.abs() > 1e-3);
        let config = AdamConfig::default();
        let mut x = vec![x0];
        let mut state = AdamState::new(1);
        for _ in 0..steps {
            state.step(&mut x, &[g], &config).unwrap();
        }
        let want = x0 - steps as f64 * config.learning_rate * g / (g.abs() + config.epsilon);
        prop_assert!((x[0] - want).abs() < 1e-12);
    }

    #[test]
    fn functional_step_matches_in_place(values in prop::collection::vec(-2.0f64..2.0, 1..8), seed in 0u64..1000) {
        let grads: Vec<f64> = values.iter().enumerate().map(|(i, v)| v * 0.5 + (seed + i as u64) as f64 * 1e-3).collect();
        let state = AdamState::new(values.len());
        let (next, next_state) = adam_step(&values, &grads, &state, &AdamConfig::default()).unwrap();
        let mut inplace = values.clone();
        let mut s = state.clone();
        s.step(&mut inplace, &grads, &AdamConfig::default()).unwrap();
        prop_assert_eq!(next, inplace);
        prop_assert_eq!(next_state, s);
    }
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut state = AdamState::new(2);
    assert!(state.step(&mut [0.0, 0.0], &[1.0], &AdamConfig::default()).is_err());
}

fn circle(n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                Point::new(t.cos(), t.sin(), 0.0)
            })
            .collect(),
    )
    .unwrap()
}

fn small_config(iterations: usize) -> OptimConfig {
    OptimConfig {
        iterations,
        ..OptimConfig::default()
    }
}

#[test]
fn zero_weights_leave_the_initial_cloud() {
    let sparse = circle(16);
    let rig = make_view_ring(2, 2.5, 20.0, (16, 16)).unwrap();
    let config = OptimConfig {
        weights: LossWeights::zero(),
        ..small_config(5)
    };
    let (dense, trace) = upsample_direct(&sparse, 2, &rig, &config).unwrap();
    assert_eq!(dense, initial_dense(&sparse, 2, config.init_jitter, config.seed).unwrap());
    assert_eq!(trace.len(), 5);
}

#[test]
fn direct_upsampling_is_deterministic() {
    let sparse = circle(24);
    let rig = make_view_ring(2, 2.5, 20.0, (16, 16)).unwrap();
    let (a, ta) = upsample_direct(&sparse, 2, &rig, &small_config(10)).unwrap();
    let (b, tb) = upsample_direct(&sparse, 2, &rig, &small_config(10)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.reports, tb.reports);
}

#[test]
fn unit_circle_loss_decreases() {
    let sparse = circle(64);
    let rig = make_view_ring(4, 2.5, 20.0, (32, 32)).unwrap();
    let (dense, trace) = upsample_direct(&sparse, 4, &rig, &small_config(200)).unwrap();
    assert_eq!(dense.len(), 256);
    let first = trace.reports[0].joint;
    let last = trace.final_report.unwrap().joint;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn direct_upsampling_rejects_bad_inputs() {
    let rig = make_view_ring(2, 2.5, 20.0, (8, 8)).unwrap();
    let one = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).unwrap();
    assert!(upsample_direct(&one, 2, &rig, &small_config(1)).is_err());
    assert!(upsample_direct(&circle(4), 5, &rig, &small_config(1)).is_err());
    let bad = OptimConfig {
        adam: AdamConfig {
            learning_rate: -1.0,
            ..AdamConfig::default()
        },
        ..small_config(1)
    };
    assert!(upsample_direct(&circle(4), 2, &rig, &bad).is_err());
}

#[test]
fn trace_csv_has_one_row_per_iteration() {
    let rig = make_view_ring(2, 2.5, 20.0, (8, 8)).unwrap();
    let (_, trace) = upsample_direct(&circle(8), 2, &rig, &small_config(3)).unwrap();
    let csv = trace.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,sc,ic,hd,un,joint,millis");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,"));
}
