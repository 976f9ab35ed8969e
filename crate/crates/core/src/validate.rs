//! Self-checks that compare the analytic pieces against independent
//! numerical oracles. Shared by the `validate` command and the test suites.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{ControllerConfig, ControllerKind};
use crate::harness::{compute_metrics, metrics_from_series, run_tracking, steady_state, t95, Difficulty, TrackingSetup};
use crate::kinematics::{forward_kinematics, physical_jacobian, JointVector, RobotGeometry};
use crate::nn::{NetConfig, SpatioCoupledNet, Tape};
use crate::plant::DisturbanceProfile;
use crate::training::{generate_dataset, record_loss, DatasetConfig, LossWeights, TrainingSample};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed deviation, in the suite's own measure.
    pub worst: f64,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} worst={:.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.detail
        )
    }
}

/// In-bound configuration with bends spread over the whole admissible range,
/// including exactly straight segments.
pub fn random_configuration(geo: &RobotGeometry, rng: &mut impl Rng) -> JointVector {
    let bends: Vec<f64> = (0..geo.n_segments)
        .map(|i| match rng.gen_range(0..6) {
            0 => 0.0,
            1 => rng.gen_range(-1e-5..1e-5),
            _ => rng.gen_range(-0.95..0.95) * geo.bend_limit(i),
        })
        .collect();
    let ext = rng.gen_range(geo.q_min + 20.0..geo.q_max - 20.0);
    JointVector::from_bends(geo, &bends, ext)
}

/// Analytic `J_phy` against central differences of forward kinematics
/// (Frobenius-relative), plus exact zeros above the block diagonal.
pub fn jacobian_suite(geo: &RobotGeometry, configs: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = geo.n_segments;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut triangular = true;
    for _ in 0..configs {
        let q = random_configuration(geo, &mut rng);
        let jac = physical_jacobian(&q, geo)?;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for j in 0..2 * n {
            let mut up = q.clone();
            up.0[j] += h;
            let mut down = q.clone();
            down.0[j] -= h;
            let (a, b) = (
                crate::kinematics::shape_unchecked(&up, geo),
                crate::kinematics::shape_unchecked(&down, geo),
            );
            for k in 0..n {
                let fd = [
                    (a.global[k].x - b.global[k].x) / (2.0 * h),
                    (a.global[k].y - b.global[k].y) / (2.0 * h),
                    (a.global[k].theta - b.global[k].theta) / (2.0 * h),
                ];
                for (r, v) in fd.iter().enumerate() {
                    let an = jac.full[(3 * k + r, j)];
                    diff += (an - v).powi(2);
                    norm += an * an;
                    if j / 2 > k && an != 0.0 {
                        triangular = false;
                    }
                }
            }
        }
        forward_kinematics(&q, geo)?;
        worst = worst.max((diff / norm.max(f64::MIN_POSITIVE)).sqrt());
    }
    Ok(SuiteReport {
        name: "jacobian",
        passed: worst <= tol && triangular,
        worst,
        detail: format!("{configs} configurations, block-triangular: {triangular}"),
    })
}

/// Relative deviation; magnitudes below `1e-4` are compared absolutely,
/// since central differences of an O(10) loss carry ~1e-9 of roundoff.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Samples from the default plant, for checks that need realistic inputs.
pub fn sample_batch(count: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let cfg = DatasetConfig {
        n_samples: count * 7,
        episode_len: 40,
        ..DatasetConfig::default()
    };
    let all = generate_dataset(&DisturbanceProfile::default(), &RobotGeometry::default(), &cfg, seed)?;
    Ok(all.into_iter().step_by(7).take(count).collect())
}

/// Gradient of the full training loss (fusion and chain composition
/// included) against central differences for every parameter of a narrow
/// network.
pub fn gradient_suite(samples: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
    let batch = sample_batch(samples, seed)?;
    let refs: Vec<&TrainingSample> = batch.iter().collect();
    let mut net = SpatioCoupledNet::new(NetConfig::reduced(), 5, seed)?;
    crate::training::fit_scaling(&mut net, &refs);
    let w = LossWeights::default();
    let loss = |net: &SpatioCoupledNet| -> Result<f64> {
        let mut tape = Tape::new();
        let (v, _) = record_loss(&mut tape, net, &refs, &w)?;
        Ok(tape.value(v.total).data()[0])
    };
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let (v, f) = record_loss(&mut tape, &net, &refs, &w)?;
        let g = tape.backward(v.total)?;
        f.params
            .iter()
            .zip(net.params().tensors())
            .map(|(p, t)| g.get(*p).map_or(vec![0.0; t.len()], |x| x.data().to_vec()))
            .collect()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    let mut checked = 0usize;
    for k in 0..net.params().len() {
        for e in 0..net.params().tensors()[k].len() {
            let orig = net.params().tensors()[k].data()[e];
            net.params_mut().tensors_mut()[k].data_mut()[e] = orig + h;
            let up = loss(&net)?;
            net.params_mut().tensors_mut()[k].data_mut()[e] = orig - h;
            let down = loss(&net)?;
            net.params_mut().tensors_mut()[k].data_mut()[e] = orig;
            let rel = relative_error(analytic[k][e], (up - down) / (2.0 * h));
            if rel > worst {
                worst = rel;
                where_ = format!("{}[{e}]", net.params().names()[k]);
            }
            checked += 1;
        }
    }
    Ok(SuiteReport {
        name: "loss-gradient",
        passed: worst <= tol,
        worst,
        detail: format!("{checked} parameters over {samples} samples, worst at {where_}"),
    })
}

/// Forcing the gate to 1 must reproduce PHY and forcing it to 0 must
/// reproduce PURE_NN, bit for bit, on every difficulty.
pub fn reduction_suite(seed: u64) -> Result<SuiteReport> {
    let geo = RobotGeometry::default();
    let profile = DisturbanceProfile::default().with_seed(seed);
    let net = SpatioCoupledNet::new(NetConfig::reduced(), geo.n_segments, seed)?;
    let cfg = ControllerConfig::default();
    let setup = TrackingSetup {
        steps: 60,
        ..TrackingSetup::default()
    };
    let mut mismatches = Vec::new();
    for d in Difficulty::ALL {
        let scaled = profile.scaled(d.disturbance_scale());
        let target = d.target_shape(&geo, &scaled);
        let run = |kind, force| run_tracking(kind, Some(&net), force, &cfg, &geo, &scaled, &target, &setup);
        let pairs = [
            (run(ControllerKind::Hybrid, Some(1.0))?, run(ControllerKind::Phy, None)?, "beta=1 vs PHY"),
            (run(ControllerKind::Hybrid, Some(0.0))?, run(ControllerKind::PureNn, None)?, "beta=0 vs PURE_NN"),
        ];
        for (forced, base, label) in pairs {
            if forced.q_series() != base.q_series() || forced.errors() != base.errors() {
                mismatches.push(format!("{} {label}", d.name()));
            }
        }
    }
    Ok(SuiteReport {
        name: "reductions",
        passed: mismatches.is_empty(),
        worst: mismatches.len() as f64,
        detail: if mismatches.is_empty() {
            "3 difficulties x 2 forced gates identical".into()
        } else {
            format!("differs: {}", mismatches.join(", "))
        },
    })
}

/// Chatter of a cubic is exactly 6; t95 of a step is exactly its index.
pub fn metrics_suite() -> Result<SuiteReport> {
    let cubic: Vec<Vec<f64>> = (0..40).map(|t| vec![(t as f64).powi(3)]).collect();
    let chatter = metrics_from_series(&[1.0; 39], &cubic)?.chatter;
    let mut worst = (chatter - 6.0).abs();
    for k in [1usize, 10, 50, 99] {
        let errors: Vec<f64> = (0..120).map(|t| if t < k { 10.0 } else { 0.0 }).collect();
        worst = worst.max((t95(&errors, steady_state(&errors)) as f64 - k as f64).abs());
    }
    Ok(SuiteReport {
        name: "metrics",
        passed: worst == 0.0,
        worst,
        detail: format!("cubic chatter {chatter}"),
    })
}

/// On the disturbance-free plant the analytic controller must reach the
/// Easy target: mean error below `tol` mm over 200 cycles.
pub fn exactness_suite(tol: f64) -> Result<SuiteReport> {
    let geo = RobotGeometry::default();
    let profile = DisturbanceProfile::zero();
    let target = Difficulty::Easy.target_shape(&geo, &profile);
    let setup = TrackingSetup {
        steps: 200,
        ..TrackingSetup::default()
    };
    let log = run_tracking(ControllerKind::Phy, None, None, &ControllerConfig::default(), &geo, &profile, &target, &setup)?;
    let m = compute_metrics(&log)?;
    Ok(SuiteReport {
        name: "kinematics-exactness",
        passed: m.e_mean < tol && log.faults() == 0,
        worst: m.e_mean,
        detail: format!("PHY on the exact plant, e_mean {:.4} mm", m.e_mean),
    })
}

/// Every self-check at its acceptance tolerance.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        jacobian_suite(&RobotGeometry::default(), 200, seed, 1e-5)?,
        gradient_suite(20, seed, 1e-4)?,
        reduction_suite(seed)?,
        metrics_suite()?,
        exactness_suite(0.5)?,
    ])
}
