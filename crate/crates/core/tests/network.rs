use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapectl::features::{encode_state, Normalizer, StateVector15, STATE_WIDTH};
use shapectl::kinematics::{forward_kinematics, physical_jacobian, JointVector, RobotGeometry};
use shapectl::nn::{load_checkpoint, save_checkpoint, NetConfig, SpatioCoupledNet, Tape, Tensor};
use shapectl::Error;

/// Physically consistent per-segment states at random in-bound configurations.
fn random_chains(count: usize, seed: u64) -> Vec<Vec<StateVector15>> {
    let geo = RobotGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let bends: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.95..0.95)).collect();
            let q = JointVector::from_bends(&geo, &bends, rng.gen_range(40.0..120.0));
            let hist: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cmd: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shape = forward_kinematics(&q, &geo).unwrap();
            let jac = physical_jacobian(&q, &geo).unwrap();
            encode_state(&q, &hist, &cmd, &shape, &jac).unwrap()
        })
        .collect()
}

fn fitted(mut net: SpatioCoupledNet, chains: &[Vec<StateVector15>]) -> SpatioCoupledNet {
    let rows: Vec<[f64; STATE_WIDTH]> = chains.iter().flatten().map(|s| s.to_array()).collect();
    net.input_norm = Normalizer::fit(rows.iter().map(|r| r.as_slice()), STATE_WIDTH);
    net
}

fn nominal(chains: &[Vec<StateVector15>]) -> Vec<Vec<[f64; 3]>> {
    chains.iter().map(|c| c.iter().map(|s| s.nominal_step()).collect()).collect()
}

/// `sum(w1 * dx_hybrid) + sum(w2 * beta)` with fixed random weights.
fn probe_loss(net: &SpatioCoupledNet, chains: &[Vec<StateVector15>], w: &(Tensor, Tensor)) -> f64 {
    let nom = nominal(chains);
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, chains, Some(&nom)).unwrap();
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    dot(tape.value(f.dx_hybrid.unwrap()), &w.0) + dot(tape.value(f.beta), &w.1)
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let chains = random_chains(3, 5);
    let mut net = fitted(SpatioCoupledNet::new(NetConfig::reduced(), 5, 9).unwrap(), &chains);
    net.output_scale = [0.7, 1.3, 0.02];
    let rows = 5 * chains.len();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = (Tensor::uniform(rows, 3, 1.0, &mut rng), Tensor::uniform(rows, 3, 1.0, &mut rng));

    let nom = nominal(&chains);
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &chains, Some(&nom)).unwrap();
        let g = tape
            .backward_from(&[(f.dx_hybrid.unwrap(), w.0.clone()), (f.beta, w.1.clone())])
            .unwrap();
        f.params
            .iter()
            .zip(net.params().tensors())
            .map(|(v, t)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..net.params().len() {
        for e in 0..net.params().tensors()[k].len() {
            let orig = net.params().tensors()[k].data()[e];
            net.params_mut().tensors_mut()[k].data_mut()[e] = orig + h;
            let up = probe_loss(&net, &chains, &w);
            net.params_mut().tensors_mut()[k].data_mut()[e] = orig - h;
            let down = probe_loss(&net, &chains, &w);
            net.params_mut().tensors_mut()[k].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[k].data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{}[{e}]: analytic {a:e} vs fd {fd:e}", net.params().names()[k]);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let chains = random_chains(2, 6);
    let net = fitted(SpatioCoupledNet::new(NetConfig::reduced(), 5, 1).unwrap(), &chains);
    let nom = nominal(&chains);
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &chains, Some(&nom)).unwrap();
    let g = tape.backward_from(&[(f.dx_hybrid.unwrap(), Tensor::zeros(10, 3))]).unwrap();
    for v in &f.params {
        if let Some(t) = g.get(*v) {
            assert!(t.data().iter().all(|x| *x == 0.0));
        }
    }
}

#[test]
fn gate_gradients_vanish_when_both_predictions_agree() {
    let chains = random_chains(2, 7);
    let net = fitted(SpatioCoupledNet::new(NetConfig::reduced(), 5, 2).unwrap(), &chains);
    let same: Vec<Vec<[f64; 3]>> = net.predict(&chains).unwrap().into_iter().map(|p| p.dx_net).collect();
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &chains, Some(&same)).unwrap();
    let g = tape.backward_from(&[(f.dx_hybrid.unwrap(), Tensor::filled(10, 3, 1.0))]).unwrap();
    for (name, v) in net.params().names().iter().zip(&f.params) {
        if name.starts_with("gate.") {
            let gt = g.get(*v).unwrap();
            assert!(gt.data().iter().all(|x| *x == 0.0), "{name}");
        }
    }
}

#[test]
fn gate_bias_limits_select_one_source() {
    let chains = random_chains(4, 8);
    let nom = nominal(&chains);
    let mut net = fitted(SpatioCoupledNet::new(NetConfig::reduced(), 5, 3).unwrap(), &chains);
    for (bias, want_nominal) in [(1e3, true), (-1e3, false)] {
        net.set_gate_bias(bias);
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &chains, Some(&nom)).unwrap();
        let (hy, dx) = (tape.value(f.dx_hybrid.unwrap()), tape.value(f.dx_net));
        for s in 0..chains.len() {
            for i in 0..5 {
                let r = f.row(i, s);
                for c in 0..3 {
                    let want = if want_nominal { nom[s][i][c] } else { dx.get(r, c) };
                    assert!((hy.get(r, c) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn reversing_the_segment_order_changes_the_coupled_features() {
    let chains = random_chains(1, 9);
    let net = fitted(SpatioCoupledNet::new(NetConfig::default(), 5, 4).unwrap(), &chains);
    let reversed: Vec<Vec<StateVector15>> = chains.iter().map(|c| c.iter().rev().copied().collect()).collect();
    let big_h = |input: &[Vec<StateVector15>]| {
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, input, None).unwrap();
        tape.value(f.big_h).clone()
    };
    let (a, b) = (big_h(&chains), big_h(&reversed));
    let differs = (0..5).any(|i| {
        a.row(i)
            .iter()
            .zip(b.row(4 - i))
            .any(|(x, y)| (x - y).abs() > 1e-6)
    });
    assert!(differs);
}

#[test]
fn fresh_gate_leans_on_the_analytic_model() {
    let chains = random_chains(100, 10);
    let net = fitted(SpatioCoupledNet::new(NetConfig::default(), 5, 11).unwrap(), &chains);
    let preds = net.predict(&chains).unwrap();
    let all: Vec<f64> = preds.iter().flat_map(|p| p.beta.iter().flatten().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((0.80..=0.95).contains(&mean), "mean beta {mean}");
}

#[test]
fn head_input_is_390_wide() {
    assert_eq!(NetConfig::default().z_width(), 390);
    let chains = random_chains(2, 12);
    let net = SpatioCoupledNet::new(NetConfig::default(), 5, 0).unwrap();
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &chains, None).unwrap();
    assert_eq!(tape.value(f.z).shape(), [10, 390]);
    assert_eq!(tape.value(f.h).cols(), 128);
    assert_eq!(tape.value(f.big_h).cols(), 256);
}

#[test]
fn initialization_is_deterministic_in_the_seed() {
    let chains = random_chains(3, 13);
    let a = SpatioCoupledNet::new(NetConfig::default(), 5, 21).unwrap();
    let b = SpatioCoupledNet::new(NetConfig::default(), 5, 21).unwrap();
    let c = SpatioCoupledNet::new(NetConfig::default(), 5, 22).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(a.predict(&chains).unwrap(), b.predict(&chains).unwrap());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let chains = random_chains(3, 14);
    let mut net = fitted(SpatioCoupledNet::new(NetConfig::reduced(), 5, 5).unwrap(), &chains);
    net.output_scale = [0.3, 0.9, 0.011];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(back.input_norm, net.input_norm);
    assert_eq!(back.predict(&chains).unwrap(), net.predict(&chains).unwrap());
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.json")),
        Err(Error::CheckpointNotFound(_))
    ));
}

#[test]
fn non_finite_input_is_a_numeric_fault() {
    let mut chains = random_chains(1, 15);
    chains[0][2].q[0] = f64::NAN;
    let net = SpatioCoupledNet::new(NetConfig::reduced(), 5, 0).unwrap();
    match net.predict(&chains) {
        Err(Error::NumericFault { stage, index }) => assert_eq!((stage, index), ("expert", 2)),
        other => panic!("expected a numeric fault, got {other:?}"),
    }
}

#[test]
fn zeroed_prediction_head_outputs_zero() {
    let chains = random_chains(2, 16);
    let mut net = SpatioCoupledNet::new(NetConfig::reduced(), 5, 0).unwrap();
    net.zero_pred_head();
    for p in net.predict(&chains).unwrap() {
        assert!(p.dx_net.iter().flatten().all(|v| *v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_stays_between_its_sources(seed in 0u64..10_000, bias in -4.0f64..4.0) {
        let chains = random_chains(2, seed);
        let mut net = fitted(SpatioCoupledNet::new(NetConfig::reduced(), 5, seed).unwrap(), &chains);
        net.set_gate_bias(bias);
        let nom = nominal(&chains);
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &chains, Some(&nom)).unwrap();
        let (hy, dx, beta) = (tape.value(f.dx_hybrid.unwrap()), tape.value(f.dx_net), tape.value(f.beta));
        for s in 0..2 {
            for i in 0..5 {
                let r = f.row(i, s);
                for c in 0..3 {
                    let (lo, hi) = (nom[s][i][c].min(dx.get(r, c)), nom[s][i][c].max(dx.get(r, c)));
                    let v = hy.get(r, c);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    prop_assert!(beta.get(r, c) > 0.0 && beta.get(r, c) < 1.0);
                }
            }
        }
    }
}
