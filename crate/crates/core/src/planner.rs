//! Obstacle avoidance with a fixed tip: a repulsive field around a single
//! disc obstacle plus a restoring pull toward the nominal straight posture,
//! descended in joint space and projected back onto the tip constraint after
//! every step. The planned shape becomes the controller's target.

use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, ControllerKind, DisplacementModel};
use crate::error::{invalid, Error, Result};
use crate::kinematics::{
    arc_pose, clamp_to_bounds, physical_jacobian, rotate, shape_unchecked, JointVector, RobotGeometry, SegmentPose,
    ShapeState,
};
use crate::plant::{observe, plant_step, DisturbanceProfile, PlantState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    /// Distance from the center beyond which the field vanishes.
    pub influence: f64,
}

impl Obstacle {
    /// Obstacle with the default field reach of three radii.
    pub fn new(center: [f64; 2], radius: f64) -> Self {
        Obstacle {
            center,
            radius,
            influence: 3.0 * radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.influence > self.radius && self.center.iter().all(|c| c.is_finite())) {
            return Err(invalid("obstacle needs radius > 0 and influence > radius"));
        }
        Ok(())
    }

    /// Signed distance from `p` to the disc surface.
    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) - self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub k_rep: f64,
    pub k_rest: f64,
    /// Rack value of the straight rest posture.
    pub q_nom: f64,
    pub tip_target: [f64; 2],
    pub tip_tol: f64,
    pub iters: usize,
    /// Largest rack change of one descent step (mm).
    pub step_max: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            k_rep: 5e4,
            k_rest: 0.1,
            q_nom: 100.0,
            tip_target: [0.0, 500.0],
            tip_tol: 1.0,
            iters: 50,
            step_max: 2.0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_rep >= 0.0 && self.k_rest >= 0.0 && self.tip_tol > 0.0 && self.step_max > 0.0) {
            return Err(invalid("planner gains must be non-negative, tip_tol and step_max positive"));
        }
        if !self.tip_target.iter().all(|v| v.is_finite()) {
            return Err(invalid("tip target must be finite"));
        }
        Ok(())
    }

    pub fn nominal(&self, geo: &RobotGeometry) -> JointVector {
        JointVector::uniform(geo.n_segments, self.q_nom)
    }
}

/// Nodes and the arc midpoint of every segment, base to tip.
pub fn envelope_points(q: &JointVector, geo: &RobotGeometry) -> Vec<[f64; 2]> {
    backbone_samples(q, geo, 2)
}

/// `per_segment` evenly spaced points along every arc (the last one is the
/// node), base excluded.
pub fn backbone_samples(q: &JointVector, geo: &RobotGeometry, per_segment: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(per_segment * geo.n_segments);
    let mut frame = SegmentPose::default();
    for i in 0..geo.n_segments {
        let (l, r) = q.pair(i);
        let (theta, len) = ((l - r) / geo.widths[i], 0.5 * (l + r));
        for k in 1..=per_segment {
            let s = k as f64 / per_segment as f64;
            let p = arc_pose(s * theta, s * len);
            let (dx, dy) = rotate(frame.theta, p.x, p.y);
            out.push([frame.x + dx, frame.y + dy]);
        }
        let p = arc_pose(theta, len);
        let (dx, dy) = rotate(frame.theta, p.x, p.y);
        frame = SegmentPose::new(frame.x + dx, frame.y + dy, frame.theta + theta);
    }
    out
}

/// Smallest clearance of a densely sampled backbone (16 points per segment).
pub fn backbone_clearance(q: &JointVector, geo: &RobotGeometry, obstacle: &Obstacle) -> f64 {
    backbone_samples(q, geo, 16)
        .into_iter()
        .map(|p| obstacle.clearance(p))
        .fold(f64::INFINITY, f64::min)
}

/// `k_rep * sum max(0, 1/d - 1/d0)^2 + k_rest * |q - q_nom|^2` with `d` the
/// clearance of each envelope point and `d0 = influence - radius`.
pub fn potential(q: &JointVector, obstacle: Option<&Obstacle>, cfg: &PlanConfig, geo: &RobotGeometry) -> f64 {
    let rest: f64 = q.0.iter().map(|v| (v - cfg.q_nom).powi(2)).sum::<f64>() * cfg.k_rest;
    let Some(o) = obstacle else { return rest };
    let rep: f64 = envelope_points(q, geo).into_iter().map(|p| barrier(o.clearance(p), o)).sum();
    rest + cfg.k_rep * rep
}

/// `max(0, 1/d - 1/d0)^2`, continued linearly below `d0 / 1000` so that
/// penetrating points still see a finite, outward-pointing gradient.
fn barrier(d: f64, o: &Obstacle) -> f64 {
    let d0 = o.influence - o.radius;
    let d_min = 1e-3 * d0;
    if d >= d0 {
        0.0
    } else if d >= d_min {
        (1.0 / d - 1.0 / d0).powi(2)
    } else {
        let a = 1.0 / d_min - 1.0 / d0;
        a * a + 2.0 * a / (d_min * d_min) * (d_min - d)
    }
}

fn tip(q: &JointVector, geo: &RobotGeometry) -> [f64; 2] {
    let t = shape_unchecked(q, geo).tip();
    [t.x, t.y]
}

/// Newton projection onto `tip(q) = tip_target` through the tip rows of the
/// analytic Jacobian (minimum-norm steps, bounds enforced after each step).
pub fn project_tip(q: &JointVector, target: [f64; 2], tol: f64, geo: &RobotGeometry) -> Result<JointVector> {
    let mut q = clamp_to_bounds(q, geo);
    let tip_row = 3 * (geo.n_segments - 1);
    let mut last = f64::INFINITY;
    for _ in 0..30 {
        let t = tip(&q, geo);
        let e = Vector2::new(target[0] - t[0], target[1] - t[1]);
        let err = e.norm();
        if err <= 0.01 * tol || (err <= tol && err > 0.9 * last) {
            return Ok(q);
        }
        last = err;
        let jac = physical_jacobian(&q, geo)?.full;
        let j = jac.rows(tip_row, 2).into_owned();
        let jjt: Matrix2<f64> = (&j * j.transpose()).fixed_view::<2, 2>(0, 0).into_owned() + Matrix2::identity() * 1e-9;
        let y = jjt
            .try_inverse()
            .ok_or_else(|| Error::InfeasiblePlan("tip Jacobian is singular".into()))?
            * e;
        let dq = j.transpose() * nalgebra::DVector::from_column_slice(y.as_slice());
        q = clamp_to_bounds(&q.added(dq.as_slice()), geo);
    }
    let t = tip(&q, geo);
    let err = (target[0] - t[0]).hypot(target[1] - t[1]);
    if err <= tol {
        Ok(q)
    } else {
        Err(Error::InfeasiblePlan(format!("tip stays {err:.2} mm from its target")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub q: JointVector,
    pub shape: ShapeState,
    /// Potential after each accepted step, starting with the projected start.
    pub potentials: Vec<f64>,
    /// Smallest envelope clearance of the result (infinite without obstacle).
    pub clearance: f64,
}

fn gradient(q: &JointVector, obstacle: Option<&Obstacle>, cfg: &PlanConfig, geo: &RobotGeometry) -> Vec<f64> {
    let h = 1e-4;
    (0..q.len())
        .map(|k| {
            let (mut a, mut b) = (q.clone(), q.clone());
            a.0[k] += h;
            b.0[k] -= h;
            (potential(&a, obstacle, cfg, geo) - potential(&b, obstacle, cfg, geo)) / (2.0 * h)
        })
        .collect()
}

/// Pushes an exactly symmetric configuration off the obstacle's axis toward
/// +x: moves the envelope point nearest to the obstacle sideways by about
/// one millimetre.
fn break_symmetry(q: &JointVector, o: &Obstacle, geo: &RobotGeometry) -> Option<JointVector> {
    let pts = envelope_points(q, geo);
    let (k, p) = pts
        .iter()
        .enumerate()
        .min_by(|a, b| o.clearance(*a.1).total_cmp(&o.clearance(*b.1)))?;
    if o.clearance(*p) >= o.influence - o.radius || (p[0] - o.center[0]).abs() > 1e-9 {
        return None;
    }
    let h = 1e-4;
    let grad: Vec<f64> = (0..q.len())
        .map(|j| {
            let (mut a, mut b) = (q.clone(), q.clone());
            a.0[j] += h;
            b.0[j] -= h;
            (envelope_points(&a, geo)[k][0] - envelope_points(&b, geo)[k][0]) / (2.0 * h)
        })
        .collect();
    let norm_sq: f64 = grad.iter().map(|g| g * g).sum();
    if norm_sq == 0.0 {
        return None;
    }
    let step: Vec<f64> = grad.iter().map(|g| g / norm_sq).collect();
    Some(q.added(&step))
}

/// One planning cycle from `start` (normally the previous plan).
pub fn plan_shape(start: &JointVector, obstacle: Option<&Obstacle>, cfg: &PlanConfig, geo: &RobotGeometry) -> Result<PlanResult> {
    cfg.validate()?;
    if let Some(o) = obstacle {
        o.validate()?;
        if o.clearance(cfg.tip_target) <= 0.0 {
            return Err(Error::InfeasiblePlan("obstacle covers the tip target".into()));
        }
    }
    let reach = cfg.tip_target[0].hypot(cfg.tip_target[1]);
    if reach > geo.n_segments as f64 * geo.q_max {
        return Err(Error::InfeasiblePlan("tip target beyond the arm's reach".into()));
    }
    let mut q = project_tip(start, cfg.tip_target, cfg.tip_tol, geo)?;
    if let Some(o) = obstacle {
        if let Some(nudged) = break_symmetry(&q, o, geo) {
            q = project_tip(&nudged, cfg.tip_target, cfg.tip_tol, geo)?;
        }
    }
    let mut u = potential(&q, obstacle, cfg, geo);
    let mut potentials = vec![u];
    for _ in 0..cfg.iters {
        let g = gradient(&q, obstacle, cfg, geo);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(gmax > 1e-12) {
            break;
        }
        let mut alpha = cfg.step_max / gmax;
        let mut accepted = None;
        for _ in 0..12 {
            let cand = q.added(&g.iter().map(|v| -alpha * v).collect::<Vec<_>>());
            if let Ok(cand) = project_tip(&cand, cfg.tip_target, cfg.tip_tol, geo) {
                let uc = potential(&cand, obstacle, cfg, geo);
                if uc <= u {
                    accepted = Some((cand, uc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, uc)) => {
                q = cand;
                u = uc;
                potentials.push(u);
            }
            None => break,
        }
    }
    let clearance = obstacle.map_or(f64::INFINITY, |o| {
        envelope_points(&q, geo).into_iter().map(|p| o.clearance(p)).fold(f64::INFINITY, f64::min)
    });
    if clearance < 0.0 {
        return Err(Error::InfeasiblePlan(format!("planned backbone intersects the obstacle by {:.2} mm", -clearance)));
    }
    Ok(PlanResult {
        shape: shape_unchecked(&q, geo),
        q,
        potentials,
        clearance,
    })
}

/// One row of an obstacle trace. A non-positive radius means "no obstacle".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ObstacleTrace {
    pub rows: Vec<TraceRow>,
}

impl ObstacleTrace {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows: Vec<TraceRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let trace = ObstacleTrace { rows };
        trace.validate()?;
        Ok(trace)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.windows(2).any(|w| !(w[1].t >= w[0].t)) {
            return Err(invalid("obstacle trace times must be non-decreasing"));
        }
        Ok(())
    }

    /// Obstacle at time `t`: linear interpolation of the centre between the
    /// surrounding rows, radius of the earlier row.
    pub fn at(&self, t: f64) -> Option<Obstacle> {
        let k = self.rows.iter().rposition(|r| r.t <= t)?;
        let a = self.rows[k];
        if a.radius <= 0.0 {
            return None;
        }
        let (x, y) = match self.rows.get(k + 1) {
            Some(b) if b.t > a.t && b.radius > 0.0 => {
                let s = (t - a.t) / (b.t - a.t);
                (a.x + s * (b.x - a.x), a.y + s * (b.y - a.y))
            }
            _ => (a.x, a.y),
        };
        Some(Obstacle::new([x, y], a.radius))
    }

    /// The scripted sweep used by the demo and the acceptance run: approach
    /// from -x, press against the straight arm, slide along it, retreat.
    pub fn scripted_sweep() -> Self {
        let pts = [
            (0.0, -160.0, 250.0),
            (1.0, -160.0, 250.0),
            (4.0, -20.0, 250.0),
            (5.5, -20.0, 170.0),
            (8.0, -20.0, 330.0),
            (9.5, -20.0, 250.0),
            (11.5, -160.0, 250.0),
            (14.0, -160.0, 250.0),
        ];
        ObstacleTrace {
            rows: pts
                .iter()
                .map(|&(t, x, y)| TraceRow { t, x, y, radius: 25.0 })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStep {
    pub step: usize,
    pub t: f64,
    /// True (noise-free) node positions after the step.
    pub positions: Vec<f64>,
    pub tip_error: f64,
    /// Backbone clearance after the step (infinite without obstacle).
    pub min_clearance: f64,
    pub beta: Vec<[f64; 3]>,
    pub q: Vec<f64>,
    pub obstacle: Option<Obstacle>,
    /// Set when the plan was infeasible and the previous target was held.
    pub plan_note: Option<String>,
    pub fault: Option<String>,
}

/// Plant, controller and planner stepped together; shared by the headless
/// session and the live service.
pub struct AvoidanceSession<'a> {
    geo: RobotGeometry,
    profile: DisturbanceProfile,
    plan_cfg: PlanConfig,
    controller: Controller<'a>,
    plant: PlantState,
    delayed: ShapeState,
    plan_q: JointVector,
    target: Vec<f64>,
    step: usize,
    period: f64,
}

impl<'a> AvoidanceSession<'a> {
    pub fn new(
        kind: ControllerKind,
        model: Option<&'a dyn DisplacementModel>,
        ctrl_cfg: &ControllerConfig,
        plan_cfg: &PlanConfig,
        geo: &RobotGeometry,
        profile: &DisturbanceProfile,
    ) -> Result<Self> {
        plan_cfg.validate()?;
        let controller = Controller::new(kind, model, ctrl_cfg.clone(), geo.clone())?;
        let nominal = plan_cfg.nominal(geo);
        let plant = PlantState::at_rest(&nominal, profile, geo);
        let delayed = observe(&plant, profile);
        let plan = plan_shape(&nominal, None, plan_cfg, geo)?;
        Ok(AvoidanceSession {
            geo: geo.clone(),
            profile: profile.clone(),
            plan_cfg: plan_cfg.clone(),
            controller,
            delayed,
            target: plan.shape.positions(),
            plan_q: plan.q,
            plant,
            step: 0,
            period: ctrl_cfg.control_period,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    pub fn tip_target(&self) -> [f64; 2] {
        self.plan_cfg.tip_target
    }

    pub fn set_tip_target(&mut self, tip: [f64; 2]) {
        self.plan_cfg.tip_target = tip;
    }

    /// Back to the nominal posture with empty histories.
    pub fn reset(&mut self) -> Result<()> {
        let nominal = self.plan_cfg.nominal(&self.geo);
        self.plant = PlantState::at_rest(&nominal, &self.profile, &self.geo);
        self.delayed = observe(&self.plant, &self.profile);
        self.controller.reset();
        let plan = plan_shape(&nominal, None, &self.plan_cfg, &self.geo)?;
        self.target = plan.shape.positions();
        self.plan_q = plan.q;
        self.step = 0;
        Ok(())
    }

    /// The present plant state as a record, without stepping: `step` counts
    /// completed cycles and the gate is left empty.
    pub fn current(&self, obstacle: Option<Obstacle>) -> SessionStep {
        let tip = self.plant.shape.tip();
        let target = self.plan_cfg.tip_target;
        SessionStep {
            step: self.step,
            t: self.step as f64 * self.period,
            positions: self.plant.shape.positions(),
            tip_error: (tip.x - target[0]).hypot(tip.y - target[1]),
            min_clearance: obstacle.map_or(f64::INFINITY, |o| {
                let eff = crate::plant::effective_configuration(
                    &self.plant.q,
                    &self.plant.hysteresis_memory,
                    &self.profile,
                    &self.geo,
                );
                backbone_clearance(&eff, &self.geo, &o)
            }),
            beta: Vec::new(),
            q: self.plant.q.0.clone(),
            obstacle,
            plan_note: None,
            fault: None,
        }
    }

    /// Plans against `obstacle`, runs one control cycle and advances the plant.
    pub fn advance(&mut self, obstacle: Option<Obstacle>) -> SessionStep {
        let plan_note = match plan_shape(&self.plan_q, obstacle.as_ref(), &self.plan_cfg, &self.geo) {
            Ok(plan) => {
                self.target = plan.shape.positions();
                self.plan_q = plan.q;
                None
            }
            Err(e) => Some(e.to_string()),
        };
        let now = observe(&self.plant, &self.profile);
        let out = self.controller.cycle(&self.plant.q, &self.delayed, &self.target);
        self.plant = plant_step(&self.plant, &out.dq, &self.profile, &self.geo);
        self.delayed = now;
        let mut rec = self.current(obstacle);
        rec.step = self.step;
        rec.beta = out.telemetry.beta;
        rec.plan_note = plan_note;
        rec.fault = out.telemetry.fault;
        self.step += 1;
        rec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionSummary {
    pub mean_tip_error: f64,
    pub final_tip_error: f64,
    pub min_clearance: f64,
    pub infeasible_plans: usize,
}

pub fn summarize(log: &[SessionStep]) -> Result<SessionSummary> {
    let last = log.last().ok_or_else(|| invalid("empty session log"))?;
    Ok(SessionSummary {
        mean_tip_error: log.iter().map(|s| s.tip_error).sum::<f64>() / log.len() as f64,
        final_tip_error: last.tip_error,
        min_clearance: log.iter().map(|s| s.min_clearance).fold(f64::INFINITY, f64::min),
        infeasible_plans: log.iter().filter(|s| s.plan_note.is_some()).count(),
    })
}

/// Runs a whole session against an obstacle trace, one control cycle per
/// `control_period` until `duration` seconds have elapsed.
#[allow(clippy::too_many_arguments)]
pub fn avoidance_session(
    kind: ControllerKind,
    model: Option<&dyn DisplacementModel>,
    ctrl_cfg: &ControllerConfig,
    plan_cfg: &PlanConfig,
    geo: &RobotGeometry,
    profile: &DisturbanceProfile,
    trace: &ObstacleTrace,
    duration: f64,
) -> Result<Vec<SessionStep>> {
    trace.validate()?;
    let mut session = AvoidanceSession::new(kind, model, ctrl_cfg, plan_cfg, geo, profile)?;
    let steps = (duration / ctrl_cfg.control_period).round() as usize;
    Ok((0..steps)
        .map(|k| session.advance(trace.at(k as f64 * ctrl_cfg.control_period)))
        .collect())
}

pub fn write_session_csv(log: &[SessionStep], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "tip_error", "min_clearance", "obstacle_x", "obstacle_y", "obstacle_r", "plan_note", "fault"])?;
    for s in log {
        let (ox, oy, or) = s
            .obstacle
            .map_or((String::new(), String::new(), String::new()), |o| {
                (o.center[0].to_string(), o.center[1].to_string(), o.radius.to_string())
            });
        w.write_record([
            s.step.to_string(),
            format!("{:.3}", s.t),
            s.tip_error.to_string(),
            s.min_clearance.to_string(),
            ox,
            oy,
            or,
            s.plan_note.clone().unwrap_or_default(),
            s.fault.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
