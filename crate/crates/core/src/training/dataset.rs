//! Boundary-aware rollouts through the simulated plant.
//!
//! Episodes come in three kinds: ones steered toward strongly bent
//! configurations near the coupled bounds, ones that dither inside the
//! low-tension band around straight segments, and unbiased ones. Each
//! consecutive pair of plant states becomes one sample.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::{encode_from_parts, StateVector15, STATE_FIELDS, STATE_WIDTH};
use crate::kinematics::{
    clamp_to_bounds, compose_chain, local_block, JointVector, RobotGeometry, SegmentPose,
};
use crate::plant::{plant_step, DisturbanceProfile, PlantState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub states: Vec<StateVector15>,
    pub dx_nom_local: Vec<[f64; 3]>,
    pub dx_gt_local: Vec<[f64; 3]>,
    pub x_gt_global_t: Vec<[f64; 3]>,
    pub x_gt_global_t1: Vec<[f64; 3]>,
}

impl TrainingSample {
    pub fn n_segments(&self) -> usize {
        self.states.len()
    }

    /// Largest deviation between the stored post-step poses and the pre-step
    /// frames recomposed with the true local increments.
    pub fn label_inconsistency(&self) -> f64 {
        let local_t = decompose(&self.x_gt_global_t);
        let moved: Vec<SegmentPose> = local_t
            .iter()
            .zip(&self.dx_gt_local)
            .map(|(p, d)| SegmentPose::new(p.x + d[0], p.y + d[1], p.theta + d[2]))
            .collect();
        compose_chain(&moved)
            .iter()
            .zip(&self.x_gt_global_t1)
            .flat_map(|(a, b)| [(a.x - b[0]).abs(), (a.y - b[1]).abs(), (a.theta - b[2]).abs()])
            .fold(0.0, f64::max)
    }
}

pub(crate) fn decompose(global: &[[f64; 3]]) -> Vec<SegmentPose> {
    let g: Vec<SegmentPose> = global.iter().map(|p| SegmentPose::new(p[0], p[1], p[2])).collect();
    crate::kinematics::decompose_chain(&g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpisodeKind {
    NearBound,
    NearNeutral,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub episode_len: usize,
    /// Fractions of near-bound and near-neutral episodes; the rest is uniform.
    pub near_bound_fraction: f64,
    pub near_neutral_fraction: f64,
    /// Per-joint command cap (mm), matching the controller's.
    pub dq_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_samples: 24_000,
            episode_len: 120,
            near_bound_fraction: 0.4,
            near_neutral_fraction: 0.3,
            dq_max: 2.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_samples > 0
            && self.episode_len > 0
            && self.near_bound_fraction >= 0.0
            && self.near_neutral_fraction >= 0.0
            && self.near_bound_fraction + self.near_neutral_fraction <= 1.0
            && self.dq_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config("invalid dataset settings".into()))
        }
    }
}

/// Per-segment bend goals (fractions of the bend limit) for an episode kind.
fn draw_bends(kind: EpisodeKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        EpisodeKind::NearBound => {
            let mut b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // at least two segments pushed against the limit
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let k = rng.gen_range(2..=n.max(2)).min(n);
            for &i in &idx[..k] {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                b[i] = sign * rng.gen_range(0.85..1.0);
            }
            b
        }
        EpisodeKind::NearNeutral => (0..n).map(|_| rng.gen_range(-0.15..0.15)).collect(),
        EpisodeKind::Uniform => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn goal(kind: EpisodeKind, geo: &RobotGeometry, rng: &mut ChaCha8Rng) -> JointVector {
    let n = geo.n_segments;
    let bends: Vec<f64> = draw_bends(kind, n, rng)
        .iter()
        .enumerate()
        .map(|(i, f)| f * geo.bend_limit(i))
        .collect();
    let margin = 0.5 * geo.widths.iter().cloned().fold(0.0, f64::max) * geo.bend_limit(0);
    let ext = rng.gen_range(geo.q_min + margin..geo.q_max - margin);
    clamp_to_bounds(&JointVector::from_bends(geo, &bends, ext), geo)
}

/// One command: a proportional pull toward the goal plus exploration noise,
/// with random joints held still so single-joint effects are represented.
fn command(q: &JointVector, goal: &JointVector, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gain = rng.gen_range(0.02..0.15);
    let hold = rng.gen_range(0.0..0.5);
    q.0.iter()
        .zip(&goal.0)
        .map(|(a, g)| {
            if rng.gen_bool(hold) {
                0.0
            } else {
                (gain * (g - a) + rng.gen_range(-1.0..1.0) * cfg.dq_max * 0.6).clamp(-cfg.dq_max, cfg.dq_max)
            }
        })
        .collect()
}

fn emit(prev: &PlantState, next: &PlantState, dq_hist: &[f64], geo: &RobotGeometry) -> TrainingSample {
    let dq = next.q.diff(&prev.q);
    let blocks: Vec<_> = (0..geo.n_segments)
        .map(|i| {
            let (l, r) = prev.q.pair(i);
            local_block(l, r, geo.widths[i])
        })
        .collect();
    let states = encode_from_parts(&prev.q, dq_hist, &dq, &prev.shape.local, &blocks);
    let dx_nom_local = states.iter().map(|s| s.nominal_step()).collect();
    let dx_gt_local = prev
        .shape
        .local
        .iter()
        .zip(&next.shape.local)
        .map(|(a, b)| [b.x - a.x, b.y - a.y, b.theta - a.theta])
        .collect();
    TrainingSample {
        states,
        dx_nom_local,
        dx_gt_local,
        x_gt_global_t: prev.shape.global.iter().map(|p| p.as_array()).collect(),
        x_gt_global_t1: next.shape.global.iter().map(|p| p.as_array()).collect(),
    }
}

/// Rolls out episodes until `cfg.n_samples` samples exist. Deterministic in `seed`.
pub fn generate_dataset(
    profile: &DisturbanceProfile,
    geo: &RobotGeometry,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_samples);
    let mut episode = 0usize;
    while out.len() < cfg.n_samples {
        // kinds are interleaved so any prefix keeps the mix
        let slot = (episode % 10) as f64 / 10.0;
        let kind = if slot < cfg.near_bound_fraction {
            EpisodeKind::NearBound
        } else if slot < cfg.near_bound_fraction + cfg.near_neutral_fraction {
            EpisodeKind::NearNeutral
        } else {
            EpisodeKind::Uniform
        };
        episode += 1;
        let start = goal(kind, geo, &mut rng);
        let mut state = PlantState::at_rest(&start, profile, geo);
        let mut target = goal(kind, geo, &mut rng);
        let mut hist = vec![0.0; geo.n_joints()];
        for _ in 0..cfg.episode_len {
            if out.len() >= cfg.n_samples {
                break;
            }
            if rng.gen_bool(0.02) {
                target = goal(kind, geo, &mut rng);
            }
            let dq = command(&state.q, &target, cfg, &mut rng);
            let next = plant_step(&state, &dq, profile, geo);
            out.push(emit(&state, &next, &hist, geo));
            hist = next.q.diff(&state.q);
            state = next;
        }
    }
    Ok(out)
}

fn header(n: usize) -> Vec<String> {
    let mut h = Vec::new();
    for i in 0..n {
        for f in STATE_FIELDS {
            h.push(format!("s{i}_{f}"));
        }
    }
    for group in ["dx_nom", "dx_gt", "g_t", "g_t1"] {
        for i in 0..n {
            for c in ["x", "y", "theta"] {
                h.push(format!("{group}{i}_{c}"));
            }
        }
    }
    h
}

pub fn write_dataset(samples: &[TrainingSample], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let n = samples.first().map_or(0, |s| s.n_segments());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(n))?;
    let mut row: Vec<String> = Vec::new();
    for s in samples {
        row.clear();
        for st in &s.states {
            row.extend(st.to_array().iter().map(|v| v.to_string()));
        }
        for group in [&s.dx_nom_local, &s.dx_gt_local, &s.x_gt_global_t, &s.x_gt_global_t1] {
            row.extend(group.iter().flatten().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let per_segment = STATE_WIDTH + 12;
    if width == 0 || width % per_segment != 0 {
        return Err(invalid(format!("dataset has {width} columns, not a multiple of {per_segment}")));
    }
    let n = width / per_segment;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| invalid(format!("bad number {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        let states = (0..n)
            .map(|i| {
                let a: [f64; STATE_WIDTH] = v[i * STATE_WIDTH..(i + 1) * STATE_WIDTH].try_into().expect("width");
                StateVector15::from_array(&a)
            })
            .collect();
        let group = |g: usize| -> Vec<[f64; 3]> {
            let base = n * STATE_WIDTH + g * 3 * n;
            (0..n).map(|i| [v[base + 3 * i], v[base + 3 * i + 1], v[base + 3 * i + 2]]).collect()
        };
        out.push(TrainingSample {
            states,
            dx_nom_local: group(0),
            dx_gt_local: group(1),
            x_gt_global_t: group(2),
            x_gt_global_t1: group(3),
        });
    }
    Ok(out)
}

/// Fraction of samples in which some segment bends beyond `fraction` of its limit.
pub fn high_curvature_fraction(samples: &[TrainingSample], geo: &RobotGeometry, fraction: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| {
            s.states
                .iter()
                .enumerate()
                .any(|(i, st)| st.x_loc[2].abs() > fraction * geo.bend_limit(i))
        })
        .count();
    hits as f64 / samples.len() as f64
}
