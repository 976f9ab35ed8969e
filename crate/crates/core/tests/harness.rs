use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapectl::controller::{ControllerConfig, ControllerKind};
use shapectl::harness::*;
use shapectl::kinematics::RobotGeometry;
use shapectl::nn::{NetConfig, SpatioCoupledNet};
use shapectl::plant::DisturbanceProfile;
use shapectl::Error;

fn first_difference(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

#[test]
fn chatter_of_a_cubic_is_six() {
    let q: Vec<Vec<f64>> = (0..50).map(|t| vec![(t as f64).powi(3), 0.0, 0.0, 0.0]).collect();
    let m = metrics_from_series(&[1.0; 49], &q).unwrap();
    assert_eq!(m.chatter, 6.0);
    assert!(third_differences(&q).iter().all(|d| *d == 6.0));
}

#[test]
fn constant_racks_cost_nothing() {
    let q = vec![vec![70.0; 10]; 30];
    let m = metrics_from_series(&[2.0; 29], &q).unwrap();
    assert_eq!(m.chatter, 0.0);
    assert_eq!(m.cost, 0.0);
    assert_eq!(m.e_mean, 2.0);
    assert_eq!(m.t95, 0);
}

#[test]
fn t95_of_a_step_is_the_step_index() {
    for k in [1usize, 5, 37, 79] {
        let errors: Vec<f64> = (0..100).map(|t| if t < k { 12.0 } else { 0.0 }).collect();
        assert_eq!(t95(&errors, steady_state(&errors)), k);
    }
}

#[test]
fn t95_ignores_truncation_after_convergence() {
    let errors: Vec<f64> = (0..400).map(|t| 30.0 * (-(t as f64) / 20.0).exp()).collect();
    let full = t95(&errors, steady_state(&errors));
    let cut = &errors[..300];
    assert_eq!(t95(cut, steady_state(cut)), full);
    assert!(full > 0 && full < 100);
}

#[test]
fn cost_is_the_l1_travel() {
    let q = vec![vec![0.0, 0.0], vec![1.0, -2.0], vec![1.0, 0.0], vec![0.0, 0.0]];
    assert_eq!(metrics_from_series(&[1.0], &q).unwrap().cost, 6.0);
}

#[test]
fn short_logs_are_rejected() {
    let q = vec![vec![0.0]; 3];
    assert!(matches!(metrics_from_series(&[1.0; 3], &q), Err(Error::InvalidInput(_))));
    assert!(metrics_from_series(&[], &vec![vec![0.0]; 5]).is_err());
}

#[test]
fn steady_state_uses_the_last_fifth() {
    let e: Vec<f64> = (0..10).map(|t| t as f64).collect();
    assert_eq!(steady_state(&e), 8.5);
}

#[test]
fn chatter_matches_repeated_first_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let len = rng.gen_range(4..60);
        let dims = rng.gen_range(1..11);
        let q: Vec<Vec<f64>> = (0..len).map(|_| (0..dims).map(|_| rng.gen_range(-100.0..100.0)).collect()).collect();
        let per_dim: Vec<Vec<f64>> = (0..dims)
            .map(|j| {
                let col: Vec<f64> = q.iter().map(|r| r[j]).collect();
                first_difference(&first_difference(&first_difference(&col)))
            })
            .collect();
        let oracle: Vec<f64> = (0..len - 3)
            .map(|t| per_dim.iter().map(|d| d[t] * d[t]).sum::<f64>().sqrt())
            .collect();
        for (a, b) in third_differences(&q).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn metrics_are_non_negative_and_bounded(errors in prop::collection::vec(0.0f64..50.0, 4..80), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Vec<f64>> = (0..=errors.len()).map(|_| vec![rng.gen_range(10.0..150.0); 4]).collect();
        let m = metrics_from_series(&errors, &q).unwrap();
        prop_assert!(m.e_mean >= 0.0 && m.chatter >= 0.0 && m.cost >= 0.0);
        prop_assert!(m.t95 <= errors.len());
        prop_assert_eq!(m, metrics_from_series(&errors, &q).unwrap());
    }
}

#[test]
fn analytic_control_is_exact_without_disturbance() {
    let geo = RobotGeometry::default();
    let profile = DisturbanceProfile::zero();
    let target = Difficulty::Easy.target_shape(&geo, &profile);
    let setup = TrackingSetup {
        steps: 200,
        ..Default::default()
    };
    let log = run_tracking(ControllerKind::Phy, None, None, &ControllerConfig::default(), &geo, &profile, &target, &setup)
        .unwrap();
    let m = compute_metrics(&log).unwrap();
    assert!(m.e_mean < 0.5, "{m:?}");
    assert_eq!(log.faults(), 0);
}

#[test]
fn difficulty_targets_are_graded() {
    let geo = RobotGeometry::default();
    for d in Difficulty::ALL {
        let q = d.target_configuration(&geo);
        assert!(geo.is_feasible(&q));
        let bends: Vec<f64> = (0..5).map(|i| (q.0[2 * i] - q.0[2 * i + 1]).abs() / 40.0 / geo.bend_limit(i)).collect();
        let peak = bends.iter().cloned().fold(0.0, f64::max);
        assert!((peak - d.curvature_fraction()).abs() < 1e-9, "{d:?} {bends:?}");
        if d == Difficulty::Extreme {
            assert!(bends.iter().filter(|b| **b >= 0.9).count() >= 3);
        }
    }
    assert_eq!(Difficulty::parse("Extreme").unwrap(), Difficulty::Extreme);
    assert!(Difficulty::parse("hard").is_err());
}

#[test]
fn heatmap_files_have_segment_rows_and_step_columns() {
    let geo = RobotGeometry::default();
    let profile = DisturbanceProfile::default();
    let net = SpatioCoupledNet::new(NetConfig::reduced(), 5, 2).unwrap();
    let target = Difficulty::Medium.target_shape(&geo, &profile);
    let setup = TrackingSetup {
        steps: 25,
        ..Default::default()
    };
    let cfg = ControllerConfig::default();
    let dir = tempfile::tempdir().unwrap();

    let forced = run_tracking(ControllerKind::Hybrid, Some(&net), Some(1.0), &cfg, &geo, &profile, &target, &setup).unwrap();
    let [bx, by, png] = export_gate_heatmap(&forced, dir.path()).unwrap();
    for path in [&bx, &by] {
        let m = read_heatmap_csv(path).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|r| r.len() == 25 && r.iter().all(|v| *v == 1.0)));
    }
    assert!(std::fs::metadata(&png).unwrap().len() > 0);

    let free = run_tracking(ControllerKind::Hybrid, Some(&net), None, &cfg, &geo, &profile, &target, &setup).unwrap();
    let [bx, _, _] = export_gate_heatmap(&free, dir.path()).unwrap();
    let m = read_heatmap_csv(&bx).unwrap();
    for (seg, row) in m.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            assert!((v - free.steps[t].beta[seg][0]).abs() <= 1e-6);
        }
    }
}

#[test]
fn gate_colors_run_from_learned_to_analytic() {
    assert_eq!(gate_color(1.0), [30, 80, 200]);
    assert_eq!(gate_color(0.0), [200, 30, 30]);
    assert_eq!(gate_color(0.5), [245, 245, 245]);
}

#[test]
fn benchmark_grid_and_report() {
    let geo = RobotGeometry::default();
    let profile = DisturbanceProfile::default();
    let cfg = ControllerConfig::default();
    let setup = TrackingSetup {
        steps: 12,
        ..Default::default()
    };
    let err = run_benchmark(&ControllerKind::ALL, &Difficulty::ALL, &[1], None, &cfg, &geo, &profile, &setup);
    assert!(matches!(err, Err(Error::Config(_))));

    let net = SpatioCoupledNet::new(NetConfig::reduced(), 5, 2).unwrap();
    let res = run_benchmark(&ControllerKind::ALL, &Difficulty::ALL, &[1, 2], Some(&net), &cfg, &geo, &profile, &setup)
        .unwrap();
    assert_eq!(res.rows.len(), 9);
    assert_eq!(res.logs.len(), 18);
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("report.csv");
    write_report_csv(&res.rows, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(report_text(&res.rows).contains("HYBRID"));
    let plots = write_plots(&res, &dir.path().join("plots")).unwrap();
    assert_eq!(plots.len(), 6);
    assert!(plots.iter().all(|p| std::fs::read_to_string(p).unwrap().contains("<svg")));

    // seeds only change the noise stream
    let again = run_benchmark(&[ControllerKind::Phy], &[Difficulty::Easy], &[1, 2], None, &cfg, &geo, &profile, &setup)
        .unwrap();
    assert_eq!(again.rows[0], res.rows[0]);
    assert_ne!(again.logs[0].3.steps, again.logs[1].3.steps);
}

#[test]
fn telemetry_csv_has_one_row_per_step() {
    let geo = RobotGeometry::default();
    let profile = DisturbanceProfile::default();
    let target = Difficulty::Easy.target_shape(&geo, &profile);
    let setup = TrackingSetup {
        steps: 7,
        ..Default::default()
    };
    let log =
        run_tracking(ControllerKind::Phy, None, None, &ControllerConfig::default(), &geo, &profile, &target, &setup).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.csv");
    write_run_csv(&log, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 5 + 15 + 3);
}
