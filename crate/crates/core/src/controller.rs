//! Closed-loop shape controller: neural Jacobian by input perturbation,
//! per-dimension gated fusion with the analytic Jacobian, latency
//! compensation and a Gaussian-weighted damped-least-squares step.
//!
//! The controller works on node positions only; orientations are left to the
//! network's training objective.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{encode_from_parts, StateVector15};
use crate::kinematics::{
    chain_jacobian, clamp_to_bounds, physical_jacobian, translational_rows, JointVector, RobotGeometry, ShapeState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Damping of the inverse solve (mm^2).
    pub lambda_dls: f64,
    /// Probe size (mm) for the numerical neural Jacobian.
    pub perturb_eps: f64,
    /// Spread of the node weighting, in node-index units.
    pub gauss_sigma: f64,
    pub w_floor: f64,
    pub step_gain: f64,
    /// Per-cycle actuation cap (mm).
    pub dq_max: f64,
    /// Assumed measurement latency (s).
    pub dt_delay: f64,
    /// Control period (s); converts the last increment into a joint velocity.
    pub control_period: f64,
    /// Probe the network on both sides of zero instead of one.
    #[serde(default)]
    pub central_differences: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda_dls: 0.01,
            perturb_eps: 0.5,
            gauss_sigma: 1.5,
            w_floor: 0.2,
            step_gain: 0.5,
            dq_max: 2.0,
            dt_delay: 0.033,
            control_period: 0.02,
            central_differences: false,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dls > 0.0) {
            return Err(invalid("lambda_dls must be positive"));
        }
        if !(self.perturb_eps > 0.0) {
            return Err(invalid("perturb_eps must be positive"));
        }
        if !(self.step_gain > 0.0 && self.step_gain <= 1.0) {
            return Err(invalid("step_gain must lie in (0, 1]"));
        }
        if !(self.w_floor > 0.0 && self.w_floor <= 1.0) {
            return Err(invalid("w_floor must lie in (0, 1]"));
        }
        if !(self.gauss_sigma > 0.0 && self.dq_max > 0.0 && self.control_period > 0.0 && self.dt_delay >= 0.0) {
            return Err(invalid("gauss_sigma, dq_max and control_period must be positive, dt_delay non-negative"));
        }
        Ok(())
    }
}

/// Output of a displacement model for one candidate command.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Learned local displacement per segment.
    pub dx_net: Vec<[f64; 3]>,
    /// Gate per segment, `(beta_x, beta_y, beta_theta)`.
    pub beta: Vec<[f64; 3]>,
}

/// Anything that predicts per-segment local displacements from encoded states.
pub trait DisplacementModel {
    /// Evaluates several candidate inputs (each one full chain) at once.
    fn predict_batch(&self, batch: &[Vec<StateVector15>]) -> Result<Vec<Prediction>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralJacobian {
    /// `3N x 2N` in global pose coordinates.
    pub full: DMatrix<f64>,
    /// `2N x 2N` translational rows.
    pub translational: DMatrix<f64>,
    /// Model output at the zero command.
    pub at_rest: Prediction,
}

/// Differentiates the model's local prediction with respect to the commanded
/// increment by probing, then lifts it through the current frame chain.
pub fn neural_jacobian(
    model: &dyn DisplacementModel,
    base: &[StateVector15],
    shape: &ShapeState,
    eps: f64,
    central: bool,
) -> Result<NeuralJacobian> {
    let n = base.len();
    let m = 2 * n;
    let mut batch = Vec::with_capacity(if central { 2 * m + 1 } else { m + 1 });
    let mut rest = base.to_vec();
    for s in &mut rest {
        s.dq_cmd = [0.0; 2];
    }
    batch.push(rest.clone());
    for k in 0..m {
        let mut probe = rest.clone();
        probe[k / 2].dq_cmd[k % 2] = eps;
        batch.push(probe);
        if central {
            let mut probe = rest.clone();
            probe[k / 2].dq_cmd[k % 2] = -eps;
            batch.push(probe);
        }
    }
    let preds = model.predict_batch(&batch)?;
    if preds.len() != batch.len() {
        return Err(Error::Internal("model returned a short batch".into()));
    }
    let flat = |p: &Prediction| -> Vec<f64> { p.dx_net.iter().flat_map(|d| d.iter().copied()).collect() };
    let zero = flat(&preds[0]);
    let mut local = DMatrix::zeros(3 * n, m);
    for k in 0..m {
        let column: Vec<f64> = if central {
            let (p, q) = (flat(&preds[1 + 2 * k]), flat(&preds[2 + 2 * k]));
            p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        } else {
            flat(&preds[1 + k]).iter().zip(&zero).map(|(a, b)| (a - b) / eps).collect()
        };
        for (r, v) in column.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NumericFault {
                    stage: "neural_jacobian",
                    index: k,
                });
            }
            local[(r, k)] = *v;
        }
    }
    let full = chain_jacobian(&shape.local) * local;
    let translational = translational_rows(&full);
    Ok(NeuralJacobian {
        full,
        translational,
        at_rest: preds.into_iter().next().expect("non-empty batch"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedJacobian {
    pub j_phy_p: DMatrix<f64>,
    pub j_net_p: DMatrix<f64>,
    /// Diagonal of the translational gate matrix.
    pub b_beta: Vec<f64>,
    pub j_fused: DMatrix<f64>,
}

/// `B J_phy + (I - B) J_net` with `B` holding each node's `(beta_x, beta_y)`.
pub fn fuse_jacobian(j_phy_p: &DMatrix<f64>, j_net_p: &DMatrix<f64>, beta: &[[f64; 3]]) -> Result<FusedJacobian> {
    let rows = 2 * beta.len();
    if j_phy_p.shape() != j_net_p.shape() || j_phy_p.nrows() != rows {
        return Err(invalid("fuse_jacobian: non-conformable matrices"));
    }
    let mut b_beta = Vec::with_capacity(rows);
    for b in beta {
        for v in [b[0], b[1]] {
            if !(v >= 0.0 && v <= 1.0) {
                return Err(invalid(format!("gate value {v} outside [0, 1]")));
            }
            b_beta.push(v);
        }
    }
    let mut j_fused = DMatrix::zeros(rows, j_phy_p.ncols());
    for r in 0..rows {
        let b = b_beta[r];
        for c in 0..j_phy_p.ncols() {
            j_fused[(r, c)] = b * j_phy_p[(r, c)] + (1.0 - b) * j_net_p[(r, c)];
        }
    }
    Ok(FusedJacobian {
        j_phy_p: j_phy_p.clone(),
        j_net_p: j_net_p.clone(),
        b_beta,
        j_fused,
    })
}

/// First-order prediction of the present positions from a delayed measurement.
pub fn compensate_latency(p_vision: &[f64], j_fused: &DMatrix<f64>, qdot: &[f64], dt_delay: f64) -> Vec<f64> {
    let mut out = p_vision.to_vec();
    for (r, o) in out.iter_mut().enumerate() {
        let v: f64 = (0..qdot.len()).map(|c| j_fused[(r, c)] * qdot[c]).sum();
        *o += v * dt_delay;
    }
    out
}

/// Node weights peaked at the node with the largest error (ties go to the
/// proximal node), and that node's index.
pub fn gaussian_weights(node_errors: &[f64], cfg: &ControllerConfig) -> (Vec<f64>, usize) {
    let mut k_star = 0;
    for (k, e) in node_errors.iter().enumerate() {
        if *e > node_errors[k_star] {
            k_star = k;
        }
    }
    let two_sigma_sq = 2.0 * cfg.gauss_sigma * cfg.gauss_sigma;
    let weights = (0..node_errors.len())
        .map(|k| {
            let d = k as f64 - k_star as f64;
            cfg.w_floor + (1.0 - cfg.w_floor) * (-d * d / two_sigma_sq).exp()
        })
        .collect();
    (weights, k_star)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DlsStep {
    pub dq: Vec<f64>,
    pub k_star: usize,
    pub weights: Vec<f64>,
}

/// `step_gain * (J^T W J + lambda I)^-1 J^T W e`, clipped to `+-dq_max`.
pub fn dls_step(j_fused: &DMatrix<f64>, e_step: &[f64], cfg: &ControllerConfig, node_errors: &[f64]) -> Result<DlsStep> {
    if e_step.iter().any(|v| !v.is_finite()) {
        return Err(invalid("dls_step: non-finite error vector"));
    }
    let (weights, k_star) = gaussian_weights(node_errors, cfg);
    let m = j_fused.ncols();
    let mut jtw = j_fused.transpose();
    for (r, w) in weights.iter().enumerate() {
        for c in 0..m {
            jtw[(c, 2 * r)] *= w;
            jtw[(c, 2 * r + 1)] *= w;
        }
    }
    let mut a = &jtw * j_fused;
    for d in 0..m {
        a[(d, d)] += cfg.lambda_dls;
    }
    let b = &jtw * nalgebra::DVector::from_column_slice(e_step);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Internal("damped normal matrix is not positive definite".into()))?;
    let x = chol.solve(&b);
    let dq = x
        .iter()
        .map(|v| (cfg.step_gain * v).clamp(-cfg.dq_max, cfg.dq_max))
        .collect();
    Ok(DlsStep { dq, k_star, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerKind {
    Phy,
    PureNn,
    Hybrid,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Phy, ControllerKind::PureNn, ControllerKind::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Phy => "PHY",
            ControllerKind::PureNn => "PURE_NN",
            ControllerKind::Hybrid => "HYBRID",
        }
    }

    pub fn needs_model(&self) -> bool {
        !matches!(self, ControllerKind::Phy)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "phy" => Ok(ControllerKind::Phy),
            "pure_nn" | "pure-nn" | "nn" => Ok(ControllerKind::PureNn),
            "hybrid" => Ok(ControllerKind::Hybrid),
            other => Err(invalid(format!("unknown controller '{other}'"))),
        }
    }
}

/// Per-cycle record published to the harness and the live service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub step: u64,
    pub node_errors: Vec<f64>,
    pub beta: Vec<[f64; 3]>,
    pub dq_norm: f64,
    pub k_star: usize,
    pub cond_phy: f64,
    pub cond_fused: f64,
    pub fault: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutput {
    /// Bound-feasible increment to send to the plant.
    pub dq: Vec<f64>,
    pub telemetry: Telemetry,
}

/// Stateful closed-loop controller for one robot.
pub struct Controller<'a> {
    kind: ControllerKind,
    gate_override: Option<f64>,
    model: Option<&'a dyn DisplacementModel>,
    cfg: ControllerConfig,
    geo: RobotGeometry,
    prev_q: Option<JointVector>,
    step: u64,
}

impl<'a> Controller<'a> {
    pub fn new(
        kind: ControllerKind,
        model: Option<&'a dyn DisplacementModel>,
        cfg: ControllerConfig,
        geo: RobotGeometry,
    ) -> Result<Self> {
        if kind.needs_model() && model.is_none() {
            return Err(Error::Config(format!("{} controller needs a trained model", kind.name())));
        }
        let gate_override = match kind {
            ControllerKind::Phy => Some(1.0),
            ControllerKind::PureNn => Some(0.0),
            ControllerKind::Hybrid => None,
        };
        Ok(Controller {
            kind,
            gate_override,
            model,
            cfg,
            geo,
            prev_q: None,
            step: 0,
        })
    }

    /// Pins every gate to `beta` (1 = analytic only, 0 = learned only).
    pub fn force_gate(mut self, beta: f64) -> Self {
        self.gate_override = Some(beta);
        self
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    /// Forgets the joint history (used on session reset).
    pub fn reset(&mut self) {
        self.prev_q = None;
        self.step = 0;
    }

    /// One control cycle toward `target` node positions (`[x_1, y_1, ...]`).
    /// Faults yield a zero command and a fault note in the telemetry.
    pub fn cycle(&mut self, q: &JointVector, observation: &ShapeState, target: &[f64]) -> CycleOutput {
        let dq_hist = match &self.prev_q {
            Some(prev) => q.diff(prev),
            None => vec![0.0; q.len()],
        };
        self.prev_q = Some(q.clone());
        let step = self.step;
        self.step += 1;
        match self.try_cycle(q, observation, target, &dq_hist) {
            Ok(mut out) => {
                out.telemetry.step = step;
                out
            }
            Err(err) => {
                let n = self.geo.n_segments;
                CycleOutput {
                    dq: vec![0.0; q.len()],
                    telemetry: Telemetry {
                        step,
                        node_errors: node_errors(&observation.positions(), target),
                        beta: vec![[f64::NAN; 3]; n],
                        dq_norm: 0.0,
                        k_star: 0,
                        cond_phy: f64::NAN,
                        cond_fused: f64::NAN,
                        fault: Some(err.to_string()),
                    },
                }
            }
        }
    }

    fn try_cycle(&self, q: &JointVector, observation: &ShapeState, target: &[f64], dq_hist: &[f64]) -> Result<CycleOutput> {
        let n = self.geo.n_segments;
        if target.len() != 2 * n {
            return Err(invalid("target must hold 2N node coordinates"));
        }
        let jac = physical_jacobian(q, &self.geo)?;
        let j_phy_p = jac.translational();
        let skip_model = self.gate_override == Some(1.0) || self.model.is_none();
        let (j_net_p, beta) = if skip_model {
            (DMatrix::zeros(2 * n, 2 * n), vec![[1.0; 3]; n])
        } else {
            let model = self.model.expect("checked above");
            let zero = vec![0.0; 2 * n];
            let states = encode_from_parts(q, dq_hist, &zero, &observation.local, &jac.local_blocks);
            let nj = neural_jacobian(model, &states, observation, self.cfg.perturb_eps, self.cfg.central_differences)?;
            let beta = match self.gate_override {
                Some(b) => vec![[b; 3]; n],
                None => nj.at_rest.beta.clone(),
            };
            (nj.translational, beta)
        };
        let fused = if skip_model {
            FusedJacobian {
                j_fused: j_phy_p.clone(),
                j_net_p,
                b_beta: vec![1.0; 2 * n],
                j_phy_p,
            }
        } else {
            fuse_jacobian(&j_phy_p, &j_net_p, &beta)?
        };
        let qdot: Vec<f64> = dq_hist.iter().map(|d| d / self.cfg.control_period).collect();
        let p_current = compensate_latency(&observation.positions(), &fused.j_fused, &qdot, self.cfg.dt_delay);
        let e_step: Vec<f64> = target.iter().zip(&p_current).map(|(t, p)| t - p).collect();
        let errors = node_errors(&p_current, target);
        let step = dls_step(&fused.j_fused, &e_step, &self.cfg, &errors)?;
        let commanded = clamp_to_bounds(&q.added(&step.dq), &self.geo);
        let dq = commanded.diff(q);
        if dq.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault {
                stage: "control_cycle",
                index: 0,
            });
        }
        let dq_norm = dq.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(CycleOutput {
            dq,
            telemetry: Telemetry {
                step: 0,
                node_errors: node_errors(&observation.positions(), target),
                beta,
                dq_norm,
                k_star: step.k_star,
                cond_phy: condition_number(&fused.j_phy_p),
                cond_fused: condition_number(&fused.j_fused),
                fault: None,
            },
        })
    }
}

/// Euclidean error per node between stacked position vectors.
pub fn node_errors(positions: &[f64], target: &[f64]) -> Vec<f64> {
    positions
        .chunks(2)
        .zip(target.chunks(2))
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .collect()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}
