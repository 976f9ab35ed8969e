//! Simulated plant: nominal constant-curvature response plus a synthetic
//! unmodeled-dynamics term.
//!
//! The disturbance acts in joint-effect space. The true shape is the nominal
//! forward kinematics of an effective configuration `q_eff = q + d`, so the
//! plant always stays on a curvature-reachable manifold while the nominal
//! Jacobian stops describing it. `d` has three parts:
//!
//! * **coupling**: every segment picks up bending from all other segments,
//!   weighted `coupling_gain * 0.5^|i-j|`, in both directions along the chain;
//! * **friction**: inside the low-tension band `|theta| < neutral_width` part
//!   of the recent motion is withheld and a parasitic bend is added in the
//!   direction of that motion;
//! * **hysteresis**: `q_eff` lags behind `q` by `hysteresis_decay` times an
//!   exponential moving average of the applied increments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kinematics::{clamp_to_bounds, shape_unchecked, JointVector, RobotGeometry, SegmentPose, ShapeState};

/// Geometric decay of coupling with segment distance.
pub const COUPLING_DECAY: f64 = 0.5;
/// Bend memory (mm) at which the parasitic friction offset saturates.
const FRICTION_SATURATION: f64 = 0.5;
/// Ratio of position noise (mm) to orientation noise (rad).
const THETA_NOISE_RATIO: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceProfile {
    pub coupling_gain: f64,
    /// Parasitic bend offset (mm of rack differential) in near-neutral states.
    pub friction_scale: f64,
    pub hysteresis_decay: f64,
    /// Half-width (rad) of the low-tension band around a straight segment.
    pub neutral_width: f64,
    /// Observation noise (mm) on node positions.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DisturbanceProfile {
    fn default() -> Self {
        DisturbanceProfile {
            coupling_gain: 0.35,
            friction_scale: 1.5,
            hysteresis_decay: 0.6,
            neutral_width: 0.2,
            noise_std: 0.1,
            seed: 7,
        }
    }
}

impl DisturbanceProfile {
    /// A profile under which the plant is exactly nominal kinematics.
    pub fn zero() -> Self {
        DisturbanceProfile {
            coupling_gain: 0.0,
            friction_scale: 0.0,
            hysteresis_decay: 0.0,
            neutral_width: 0.0,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.coupling_gain,
            self.friction_scale,
            self.neutral_width,
            self.noise_std,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("disturbance scales must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.hysteresis_decay) {
            return Err(invalid("hysteresis_decay must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Scales the mechanical disturbance magnitudes; noise is left alone.
    pub fn scaled(&self, factor: f64) -> Self {
        DisturbanceProfile {
            coupling_gain: self.coupling_gain * factor,
            friction_scale: self.friction_scale * factor,
            hysteresis_decay: (self.hysteresis_decay * factor).min(0.999),
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DisturbanceProfile { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: JointVector,
    /// True (disturbed, noise-free) shape.
    pub shape: ShapeState,
    /// Exponential moving average of applied increments, one per rack (mm).
    pub hysteresis_memory: Vec<f64>,
    pub step_index: u64,
}

impl PlantState {
    /// Plant at rest at `q` (clamped into bounds), with empty memory.
    pub fn at_rest(q: &JointVector, profile: &DisturbanceProfile, geo: &RobotGeometry) -> Self {
        let q = clamp_to_bounds(q, geo);
        let memory = vec![0.0; geo.n_joints()];
        let shape = shape_unchecked(&effective_configuration(&q, &memory, profile, geo), geo);
        PlantState {
            q,
            shape,
            hysteresis_memory: memory,
            step_index: 0,
        }
    }
}

/// Smooth bump, 1 at zero and 0 outside `|x| >= 1`.
#[inline]
fn neutral_weight(theta: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return 0.0;
    }
    let s = theta / width;
    if s.abs() >= 1.0 {
        0.0
    } else {
        let t = 1.0 - s * s;
        t * t
    }
}

/// The configuration the plant actually realizes for commanded `q`.
pub fn effective_configuration(q: &JointVector, memory: &[f64], profile: &DisturbanceProfile, geo: &RobotGeometry) -> JointVector {
    let n = geo.n_segments;
    let bend: Vec<f64> = (0..n).map(|i| 0.5 * (q.0[2 * i] - q.0[2 * i + 1])).collect();
    let withheld_fraction = profile.friction_scale / (1.0 + profile.friction_scale);
    let h = profile.hysteresis_decay;
    let mut out = q.0.clone();
    for i in 0..n {
        let coupling: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| COUPLING_DECAY.powi((i as i32 - j as i32).abs()) * bend[j])
            .sum::<f64>()
            * profile.coupling_gain;
        let theta = 2.0 * bend[i] / geo.widths[i];
        let nu = neutral_weight(theta, profile.neutral_width);
        let (ml, mr) = (memory[2 * i], memory[2 * i + 1]);
        let parasitic = nu * profile.friction_scale * (0.5 * (ml - mr) / FRICTION_SATURATION).tanh();
        let lag = h + nu * withheld_fraction;
        out[2 * i] += coupling + parasitic - lag * ml;
        out[2 * i + 1] += -coupling - parasitic - lag * mr;
    }
    JointVector(out)
}

/// Advances the plant by one command. Commands are clamped, never rejected.
pub fn plant_step(state: &PlantState, dq_cmd: &[f64], profile: &DisturbanceProfile, geo: &RobotGeometry) -> PlantState {
    let q = clamp_to_bounds(&state.q.added(dq_cmd), geo);
    let applied = q.diff(&state.q);
    let h = profile.hysteresis_decay;
    let memory: Vec<f64> = state
        .hysteresis_memory
        .iter()
        .zip(&applied)
        .map(|(m, d)| h * m + (1.0 - h) * d)
        .collect();
    let shape = shape_unchecked(&effective_configuration(&q, &memory, profile, geo), geo);
    PlantState {
        q,
        shape,
        hysteresis_memory: memory,
        step_index: state.step_index + 1,
    }
}

/// Noisy measurement of the true shape, reproducible from `(seed, step_index)`.
pub fn observe(state: &PlantState, profile: &DisturbanceProfile) -> ShapeState {
    if profile.noise_std == 0.0 {
        return state.shape.clone();
    }
    let stream = profile
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(state.step_index);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let pos = Normal::new(0.0, profile.noise_std).expect("finite noise");
    let ang = Normal::new(0.0, profile.noise_std / THETA_NOISE_RATIO).expect("finite noise");
    let global: Vec<SegmentPose> = state
        .shape
        .global
        .iter()
        .map(|p| {
            SegmentPose::new(
                p.x + pos.sample(&mut rng),
                p.y + pos.sample(&mut rng),
                p.theta + ang.sample(&mut rng),
            )
        })
        .collect();
    ShapeState::from_global(global)
}
