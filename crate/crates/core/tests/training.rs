use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapectl::kinematics::{compose_chain, decompose_chain, RobotGeometry, SegmentPose};
use shapectl::nn::{NetConfig, SpatioCoupledNet, Tape, Tensor};
use shapectl::plant::DisturbanceProfile;
use shapectl::training::*;
use shapectl::validate::{gradient_suite, sample_batch};

fn small_config(n: usize) -> DatasetConfig {
    DatasetConfig {
        n_samples: n,
        episode_len: 60,
        ..DatasetConfig::default()
    }
}

#[test]
fn labels_are_consistent_with_their_frames() {
    let geo = RobotGeometry::default();
    let ds = generate_dataset(&DisturbanceProfile::default(), &geo, &small_config(3000), 4).unwrap();
    assert_eq!(ds.len(), 3000);
    for (k, s) in ds.iter().enumerate() {
        assert!(s.label_inconsistency() < 1e-9, "sample {k}");
    }
}

#[test]
fn boundary_aware_mix_hits_the_target_share_of_strong_bends() {
    let geo = RobotGeometry::default();
    let ds = generate_dataset(&DisturbanceProfile::default(), &geo, &DatasetConfig::default(), 1).unwrap();
    let frac = high_curvature_fraction(&ds, &geo, 0.8);
    assert!((0.3..=0.5).contains(&frac), "fraction {frac}");
}

#[test]
fn exact_plant_residual_vanishes_with_the_step() {
    // Without disturbance the only mismatch is the linearization, which is
    // second order in the step size.
    let geo = RobotGeometry::default();
    let mean_residual = |dq_max: f64| {
        let cfg = DatasetConfig {
            dq_max,
            ..small_config(1500)
        };
        let ds = generate_dataset(&DisturbanceProfile::zero(), &geo, &cfg, 2).unwrap();
        let mut total = 0.0;
        for s in &ds {
            for (a, b) in s.dx_nom_local.iter().zip(&s.dx_gt_local) {
                total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            }
        }
        total / (5 * ds.len()) as f64
    };
    let (coarse, fine) = (mean_residual(2.0), mean_residual(0.2));
    assert!(coarse < 0.05, "coarse {coarse}");
    assert!(fine < 0.03 * coarse, "fine {fine} vs coarse {coarse}");
}

#[test]
fn generation_is_deterministic() {
    let geo = RobotGeometry::default();
    let a = generate_dataset(&DisturbanceProfile::default(), &geo, &small_config(400), 9).unwrap();
    let b = generate_dataset(&DisturbanceProfile::default(), &geo, &small_config(400), 9).unwrap();
    let c = generate_dataset(&DisturbanceProfile::default(), &geo, &small_config(400), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dataset_csv_round_trip() {
    let geo = RobotGeometry::default();
    let ds = generate_dataset(&DisturbanceProfile::default(), &geo, &small_config(50), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_dataset(&ds, &path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    let first = header.lines().next().unwrap();
    assert!(first.starts_with("s0_q_l,s0_q_r,s0_dq_hist_l"));
    assert!(first.contains("s4_j21") && first.ends_with("g_t14_theta"));
    assert_eq!(read_dataset(&path).unwrap(), ds);
}

#[test]
fn fk_with_true_increments_reproduces_the_label() {
    for s in sample_batch(30, 5).unwrap() {
        let pred = differentiable_fk(&s.x_gt_global_t, &s.dx_gt_local);
        for (p, t) in pred.iter().zip(&s.x_gt_global_t1) {
            for c in 0..3 {
                assert!((p[c] - t[c]).abs() < 1e-9);
            }
        }
        let still = differentiable_fk(&s.x_gt_global_t, &vec![[0.0; 3]; 5]);
        for (p, t) in still.iter().zip(&s.x_gt_global_t) {
            for c in 0..3 {
                assert!((p[c] - t[c]).abs() < 1e-9);
            }
        }
    }
}

/// Independent recomposition: accumulate angles and rotate by hand.
fn recompose(anchor: &[[f64; 3]], dx: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let g: Vec<SegmentPose> = anchor.iter().map(|p| SegmentPose::new(p[0], p[1], p[2])).collect();
    let local = decompose_chain(&g);
    let moved: Vec<SegmentPose> = local
        .iter()
        .zip(dx)
        .map(|(l, d)| SegmentPose::new(l.x + d[0], l.y + d[1], l.theta + d[2]))
        .collect();
    compose_chain(&moved).iter().map(|p| p.as_array()).collect()
}

#[test]
fn recorded_fk_gradient_matches_finite_differences() {
    let s = &sample_batch(1, 6).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dx: Vec<[f64; 3]> = (0..5)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.05..0.05)])
        .collect();
    let norm_sq = |dx: &[[f64; 3]]| recompose(&s.x_gt_global_t, dx).iter().flatten().map(|v| v * v).sum::<f64>();

    let mut tape = Tape::new();
    let flat: Vec<f64> = dx.iter().flatten().copied().collect();
    let v = tape.constant(Tensor::from_vec(5, 3, flat));
    let pred = fk_on_tape(&mut tape, &[s.x_gt_global_t.as_slice()], v);
    let sq = tape.mul(pred, pred);
    let total = tape.sum(sq);
    assert!((tape.value(total).data()[0] - norm_sq(&dx)).abs() < 1e-6);
    let g = tape.backward(total).unwrap();
    let analytic = g.get(v).unwrap();

    let h = 1e-6;
    for i in 0..5 {
        for c in 0..3 {
            let mut up = dx.clone();
            up[i][c] += h;
            let mut down = dx.clone();
            down[i][c] -= h;
            let fd = (norm_sq(&up) - norm_sq(&down)) / (2.0 * h);
            let a = analytic.get(i, c);
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(1.0), "({i},{c}): {a} vs {fd}");
        }
    }
}

#[test]
fn perfect_prediction_costs_nothing() {
    let w = LossWeights::default();
    for s in sample_batch(10, 7).unwrap() {
        assert!(sample_loss(&s, &s.dx_gt_local, &w) < 1e-20);
    }
    // and through the recorded graph: a constant prediction equal to the truth
    let s = &sample_batch(1, 8).unwrap()[0];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(5, 3, s.dx_gt_local.iter().flatten().copied().collect()));
    let pred = fk_on_tape(&mut tape, &[s.x_gt_global_t.as_slice()], v);
    let t1 = tape.constant(Tensor::from_vec(5, 3, s.x_gt_global_t1.iter().flatten().copied().collect()));
    let err = tape.sub(pred, t1);
    let hub = tape.huber(err, &w.huber_delta);
    let total = tape.sum(hub);
    let g = tape.backward(total).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|x| x.abs() < 1e-9));
}

#[test]
fn doubling_orientation_weight_doubles_its_term() {
    let residuals = [[0.3, -2.0, 0.01], [1.5, 0.2, -0.07], [-0.4, 0.9, 0.03]];
    let w = LossWeights::default();
    let w2 = LossWeights {
        w_theta: 2.0 * w.w_theta,
        ..w.clone()
    };
    let (a, b) = (local_loss_terms(&residuals, &w), local_loss_terms(&residuals, &w2));
    assert_eq!(b[2], 2.0 * a[2]);
    assert_eq!((a[0], a[1]), (b[0], b[1]));
    // Huber branches, channel by channel
    assert_eq!(a[0], 0.5 * 0.09 + 1.0 * (1.5 - 0.5) + 0.5 * 0.16);
}

#[test]
fn proximal_orientation_errors_cost_more_than_distal_ones() {
    let w = LossWeights::default();
    for s in sample_batch(10, 9).unwrap() {
        let cost = |segment: usize| {
            let mut dx = s.dx_gt_local.clone();
            dx[segment][2] += 0.05;
            global_loss(&differentiable_fk(&s.x_gt_global_t, &dx), &s.x_gt_global_t1, &w)
        };
        assert!(cost(0) > cost(4), "{} vs {}", cost(0), cost(4));
    }
}

#[test]
fn loss_weights_must_favour_orientation() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        w_theta: 1.0,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let report = gradient_suite(4, 11, 1e-4).unwrap();
    assert!(report.passed, "{report}");
}

fn overfit_net() -> SpatioCoupledNet {
    let cfg = NetConfig {
        hidden: 32,
        gru_hidden: 32,
        head_hidden: 32,
        ..NetConfig::default()
    };
    SpatioCoupledNet::new(cfg, 5, 1).unwrap()
}

#[test]
fn memorizes_a_small_set_with_steadily_falling_loss() {
    let data = sample_batch(32, 12).unwrap();
    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 32,
        learning_rate: 1e-2,
        final_lr_fraction: 0.01,
        val_fraction: 0.0,
        lr_warmup_steps: 100,
        gate_warmup_epochs: 0,
        max_steps: Some(2000),
        ..TrainConfig::default()
    };
    let out = train(&data, overfit_net(), &LossWeights::default(), &cfg, 1, None).unwrap();
    let losses = &out.step_losses;
    assert_eq!(losses.len(), 2000);
    assert!(losses[1999] < 1e-4 * losses[0], "{} -> {}", losses[0], losses[1999]);
    let windows: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    // the first window holds the step-size ramp
    for k in 2..windows.len() {
        assert!(windows[k] < windows[k - 1], "window {k}: {} !< {}", windows[k], windows[k - 1]);
    }
}

#[test]
fn log_is_deterministic_and_tracks_the_gate() {
    let data = sample_batch(120, 13).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        gate_warmup_epochs: 1,
        ..TrainConfig::default()
    };
    let run = || train(&data, overfit_net(), &LossWeights::default(), &cfg, 5, None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);
    // during the warm-up the correction passes through untouched
    let warm = &a.log[0];
    assert!(warm.mean_beta_x.max(warm.mean_beta_y).max(warm.mean_beta_theta) < 1e-12);
    assert!(a.best_epoch >= 1);

    let mut fresh = overfit_net();
    let refs: Vec<&TrainingSample> = data.iter().collect();
    fit_scaling(&mut fresh, &refs);
    let (_, beta0) = evaluate(&fresh, &refs, &LossWeights::default(), 64).unwrap();
    let mean0 = beta0.iter().sum::<f64>() / 3.0;
    assert!((0.8..=0.95).contains(&mean0), "initial mean beta {mean0}");
    let last = a.log.last().unwrap();
    let mean1 = (last.mean_beta_x + last.mean_beta_y + last.mean_beta_theta) / 3.0;
    assert!((mean1 - mean0).abs() > 1e-3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_log(&a.log, &cfg, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# optimizer=adam"));
    assert!(text.lines().nth(1).unwrap() == "epoch,train_loss,val_loss,mean_beta_x,mean_beta_y,mean_beta_theta");
    assert_eq!(read_log(&path).unwrap(), a.log);
}

#[test]
fn empty_dataset_is_rejected() {
    let r = train(&[], overfit_net(), &LossWeights::default(), &TrainConfig::default(), 0, None);
    assert!(r.is_err());
}

#[test]
fn gate_warmup_must_leave_epochs_to_select_from() {
    let cfg = TrainConfig { epochs: 3, gate_warmup_epochs: 3, ..TrainConfig::default() };
    assert!(cfg.validate().is_err());
    assert!(TrainConfig { gate_warmup_epochs: 2, ..cfg }.validate().is_ok());
}

#[test]
fn step_size_ramps_then_decays() {
    let cfg = TrainConfig { learning_rate: 1.0, final_lr_fraction: 0.1, lr_warmup_steps: 4, ..TrainConfig::default() };
    let lr: Vec<f64> = (0..20).map(|s| cosine_lr(&cfg, s, 20)).collect();
    for s in 0..4 {
        assert!((lr[s] - (s + 1) as f64 / 5.0).abs() < 1e-12, "{s}: {}", lr[s]);
    }
    assert!((lr[4] - 1.0).abs() < 1e-12);
    assert!(lr[4..].windows(2).all(|w| w[1] < w[0]));
    assert!((lr[19] - 0.1).abs() < 1e-12, "{}", lr[19]);
    let plain = TrainConfig { lr_warmup_steps: 0, ..cfg };
    assert!((cosine_lr(&plain, 0, 20) - 1.0).abs() < 1e-12);
}

#[test]
fn gate_tie_pulls_translational_gates_together() {
    let data = sample_batch(96, 21).unwrap();
    let gap = |tie: f64| {
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: 3e-3,
            gate_warmup_epochs: 0,
            gate_tie: tie,
            ..TrainConfig::default()
        };
        let out = train(&data, overfit_net(), &LossWeights::default(), &cfg, 2, None).unwrap();
        let states: Vec<_> = data.iter().map(|s| s.states.clone()).collect();
        let preds = out.net.predict(&states).unwrap();
        let n = (preds.len() * 5) as f64;
        preds.iter().flat_map(|p| p.beta.iter()).map(|b| (b[0] - b[1]).abs()).sum::<f64>() / n
    };
    let (free, tied) = (gap(0.0), gap(100.0));
    assert!(tied < 0.5 * free, "free {free} tied {tied}");
    assert!(TrainConfig { gate_tie: -1.0, ..TrainConfig::default() }.validate().is_err());
}
