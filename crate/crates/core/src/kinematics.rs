//! Piecewise-constant-curvature kinematics of the planar rack-driven robot.
//!
//! Frame convention: every segment's base frame has its tangent along local
//! `+y`; a positive bending angle swings the tip toward local `+x`. Global
//! orientations are kept unwrapped (the sum of the local angles along the
//! chain), which keeps differences well defined for strongly curled shapes.

use nalgebra::{DMatrix, Matrix3x2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Curvature below which the arc formulas switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-6;
/// Same switch for the derivatives, whose closed forms cancel earlier.
const SMALL_ANGLE_DERIV: f64 = 1e-4;
/// Samples used to check `f_min <= f_max` when a geometry is built.
const BOUND_CHECK_SAMPLES: usize = 1001;
/// Maximum alternating-projection passes in [`clamp_to_bounds`].
const CLAMP_ITERATIONS: usize = 8;

/// Polynomial with ascending coefficients: `c[0] + c[1] r + c[2] r^2 + ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn eval(&self, r: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * r + c)
    }
}

/// Coupled rack bounds: one rack's extension is confined to
/// `[lower(partner), upper(partner)]`, both clipped to the hard limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RackBounds {
    pub lower: Polynomial,
    pub upper: Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotGeometry {
    pub n_segments: usize,
    /// Structural width of each segment (mm).
    pub widths: Vec<f64>,
    pub q_min: f64,
    pub q_max: f64,
    pub bounds: RackBounds,
}

impl Default for RobotGeometry {
    fn default() -> Self {
        Self::uniform(5, 40.0, 10.0, 150.0, 0.9)
    }
}

impl RobotGeometry {
    /// Geometry with identical segments and linear bounds `|q_L - q_R| <= bend * width`.
    pub fn uniform(n_segments: usize, width: f64, q_min: f64, q_max: f64, bend: f64) -> Self {
        let span = bend * width;
        RobotGeometry {
            n_segments,
            widths: vec![width; n_segments],
            q_min,
            q_max,
            bounds: RackBounds {
                lower: Polynomial(vec![-span, 1.0]),
                upper: Polynomial(vec![span, 1.0]),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(invalid("geometry needs at least one segment"));
        }
        if self.widths.len() != self.n_segments {
            return Err(invalid(format!(
                "expected {} widths, got {}",
                self.n_segments,
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid("segment widths must be positive"));
        }
        if !(self.q_min.is_finite() && self.q_max.is_finite() && self.q_min < self.q_max) {
            return Err(invalid("hard limits must satisfy q_min < q_max"));
        }
        if self.bounds.lower.0.is_empty() || self.bounds.upper.0.is_empty() {
            return Err(invalid("bound polynomials need at least one coefficient"));
        }
        for k in 0..BOUND_CHECK_SAMPLES {
            let r = self.q_min
                + (self.q_max - self.q_min) * k as f64 / (BOUND_CHECK_SAMPLES - 1) as f64;
            let (lo, hi) = (self.f_min(r), self.f_max(r));
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(invalid(format!("bound polynomials cross at r = {r}")));
            }
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        2 * self.n_segments
    }

    pub fn f_min(&self, partner: f64) -> f64 {
        self.bounds.lower.eval(partner).clamp(self.q_min, self.q_max)
    }

    pub fn f_max(&self, partner: f64) -> f64 {
        self.bounds.upper.eval(partner).clamp(self.q_min, self.q_max)
    }

    /// Largest admissible bend (rad) of a segment at mid-range extension.
    pub fn bend_limit(&self, segment: usize) -> f64 {
        let mid = 0.5 * (self.q_min + self.q_max);
        (self.f_max(mid) - mid) / self.widths[segment]
    }

    /// Whether `q` satisfies the hard limits and every coupled bound.
    pub fn is_feasible(&self, q: &JointVector) -> bool {
        q.len() == self.n_joints()
            && (0..self.n_segments).all(|i| {
                let (l, r) = q.pair(i);
                self.pair_feasible(l, r)
            })
    }

    fn pair_feasible(&self, l: f64, r: f64) -> bool {
        let hard = |v: f64| v >= self.q_min && v <= self.q_max;
        hard(l)
            && hard(r)
            && l >= self.f_min(r)
            && l <= self.f_max(r)
            && r >= self.f_min(l)
            && r <= self.f_max(l)
    }
}

/// Rack extensions ordered `[q_1L, q_1R, ..., q_NL, q_NR]` (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn uniform(n_segments: usize, value: f64) -> Self {
        JointVector(vec![value; 2 * n_segments])
    }

    /// Builds a vector from per-segment (bend angle, mean extension) pairs.
    pub fn from_bends(geo: &RobotGeometry, bends: &[f64], extension: f64) -> Self {
        let mut q = Vec::with_capacity(2 * bends.len());
        for (i, theta) in bends.iter().enumerate() {
            let half = 0.5 * theta * geo.widths[i];
            q.push(extension + half);
            q.push(extension - half);
        }
        JointVector(q)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn pair(&self, segment: usize) -> (f64, f64) {
        (self.0[2 * segment], self.0[2 * segment + 1])
    }

    pub fn added(&self, dq: &[f64]) -> JointVector {
        JointVector(self.0.iter().zip(dq).map(|(a, b)| a + b).collect())
    }

    pub fn diff(&self, other: &JointVector) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl SegmentPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        SegmentPose { x, y, theta }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Node poses of the whole chain; node `i` is the distal end of segment `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeState {
    pub local: Vec<SegmentPose>,
    pub global: Vec<SegmentPose>,
}

impl ShapeState {
    pub fn from_local(local: Vec<SegmentPose>) -> Self {
        let global = compose_chain(&local);
        ShapeState { local, global }
    }

    pub fn from_global(global: Vec<SegmentPose>) -> Self {
        let local = decompose_chain(&global);
        ShapeState { local, global }
    }

    pub fn tip(&self) -> SegmentPose {
        *self.global.last().expect("shape has at least one segment")
    }

    /// Global node positions flattened as `[x_1, y_1, ..., x_N, y_N]`.
    pub fn positions(&self) -> Vec<f64> {
        self.global.iter().flat_map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalJacobian {
    /// `3N x 2N` map from joint increments to global node pose increments.
    pub full: DMatrix<f64>,
    /// Per-segment `3 x 2` map from `(dq_L, dq_R)` to the local pose increment.
    pub local_blocks: Vec<Matrix3x2<f64>>,
}

impl PhysicalJacobian {
    /// The `2N x 2N` rows acting on node positions.
    pub fn translational(&self) -> DMatrix<f64> {
        translational_rows(&self.full)
    }
}

/// Keeps the `x`/`y` rows of a `3N x m` pose Jacobian.
pub fn translational_rows(full: &DMatrix<f64>) -> DMatrix<f64> {
    let n = full.nrows() / 3;
    let mut out = DMatrix::zeros(2 * n, full.ncols());
    for k in 0..n {
        out.row_mut(2 * k).copy_from(&full.row(3 * k));
        out.row_mut(2 * k + 1).copy_from(&full.row(3 * k + 1));
    }
    out
}

/// Bending angle and central arc length of one segment.
pub fn segment_arc(q_left: f64, q_right: f64, width: f64) -> Result<(f64, f64)> {
    if !(q_left.is_finite() && q_right.is_finite() && width.is_finite()) {
        return Err(invalid("segment_arc: non-finite input"));
    }
    if width <= 0.0 {
        return Err(invalid("segment_arc: width must be positive"));
    }
    Ok(arc(q_left, q_right, width))
}

#[inline]
fn arc(q_left: f64, q_right: f64, width: f64) -> (f64, f64) {
    ((q_left - q_right) / width, 0.5 * (q_left + q_right))
}

/// Tip pose of a constant-curvature arc in its base frame.
pub fn segment_pose(theta: f64, length: f64) -> Result<SegmentPose> {
    if !(theta.is_finite() && length.is_finite()) {
        return Err(invalid("segment_pose: non-finite input"));
    }
    if length < 0.0 {
        return Err(invalid("segment_pose: negative arc length"));
    }
    Ok(arc_pose(theta, length))
}

/// `(1 - cos t) / t` and `sin t / t`, stable at small `t`.
#[inline]
fn arc_shape(theta: f64) -> (f64, f64) {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        (theta * (0.5 - t2 / 24.0), 1.0 - t2 / 6.0)
    } else {
        let s = (0.5 * theta).sin();
        (2.0 * s * s / theta, theta.sin() / theta)
    }
}

/// Derivatives of [`arc_shape`] with respect to the angle.
#[inline]
fn arc_shape_deriv(theta: f64) -> (f64, f64) {
    if theta.abs() < SMALL_ANGLE_DERIV {
        let t2 = theta * theta;
        (
            0.5 - t2 / 8.0 + t2 * t2 / 144.0,
            theta * (-1.0 / 3.0 + t2 / 30.0),
        )
    } else {
        let s = (0.5 * theta).sin();
        let t2 = theta * theta;
        (
            (theta * theta.sin() - 2.0 * s * s) / t2,
            (theta * theta.cos() - theta.sin()) / t2,
        )
    }
}

#[inline]
pub(crate) fn arc_pose(theta: f64, length: f64) -> SegmentPose {
    let (fx, fy) = arc_shape(theta);
    SegmentPose::new(length * fx, length * fy, theta)
}

/// `d(x, y, theta) / d(theta, length)` of [`arc_pose`] as two columns.
#[inline]
fn arc_pose_partials(theta: f64, length: f64) -> ([f64; 3], [f64; 3]) {
    let (fx, fy) = arc_shape(theta);
    let (dfx, dfy) = arc_shape_deriv(theta);
    ([length * dfx, length * dfy, 1.0], [fx, fy, 0.0])
}

/// Maps a vector expressed in a frame of orientation `phi` to the world frame.
#[inline]
pub(crate) fn rotate(phi: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    (x * c + y * s, -x * s + y * c)
}

/// Left-to-right composition of local segment poses from a base at the origin.
pub fn compose_chain(local: &[SegmentPose]) -> Vec<SegmentPose> {
    let mut out = Vec::with_capacity(local.len());
    let (mut px, mut py, mut phi) = (0.0, 0.0, 0.0);
    for p in local {
        let (dx, dy) = rotate(phi, p.x, p.y);
        px += dx;
        py += dy;
        phi += p.theta;
        out.push(SegmentPose::new(px, py, phi));
    }
    out
}

/// Inverse of [`compose_chain`].
pub fn decompose_chain(global: &[SegmentPose]) -> Vec<SegmentPose> {
    let mut out = Vec::with_capacity(global.len());
    let mut prev = SegmentPose::default();
    for g in global {
        let (x, y) = rotate(-prev.theta, g.x - prev.x, g.y - prev.y);
        out.push(SegmentPose::new(x, y, g.theta - prev.theta));
        prev = *g;
    }
    out
}

/// Local segment poses for a joint vector, without limit checks.
pub fn local_poses(q: &JointVector, geo: &RobotGeometry) -> Vec<SegmentPose> {
    (0..geo.n_segments)
        .map(|i| {
            let (l, r) = q.pair(i);
            let (theta, len) = arc(l, r, geo.widths[i]);
            arc_pose(theta, len)
        })
        .collect()
}

/// Forward kinematics without limit checks (used for effective, disturbed
/// configurations that may leave the commanded range).
pub fn shape_unchecked(q: &JointVector, geo: &RobotGeometry) -> ShapeState {
    ShapeState::from_local(local_poses(q, geo))
}

fn check_limits(q: &JointVector, geo: &RobotGeometry) -> Result<()> {
    if q.len() != geo.n_joints() {
        return Err(invalid(format!(
            "joint vector has {} entries, geometry needs {}",
            q.len(),
            geo.n_joints()
        )));
    }
    if q.0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("joint vector contains non-finite entries"));
    }
    let indices: Vec<usize> = q
        .0
        .iter()
        .enumerate()
        .filter(|(_, v)| **v < geo.q_min || **v > geo.q_max)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        Ok(())
    } else {
        Err(Error::BoundViolation { indices })
    }
}

pub fn forward_kinematics(q: &JointVector, geo: &RobotGeometry) -> Result<ShapeState> {
    check_limits(q, geo)?;
    Ok(shape_unchecked(q, geo))
}

/// Jacobian of [`compose_chain`]: maps stacked local pose increments
/// `(dx_i, dy_i, dtheta_i)` to stacked global node pose increments.
/// Block `(k, i)` is zero for `i > k`.
pub fn chain_jacobian(local: &[SegmentPose]) -> DMatrix<f64> {
    let global = compose_chain(local);
    let n = local.len();
    let mut g = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..n {
        let phi_base = if i == 0 { 0.0 } else { global[i - 1].theta };
        let (s, c) = phi_base.sin_cos();
        for k in i..n {
            let (r, col) = (3 * k, 3 * i);
            g[(r, col)] = c;
            g[(r, col + 1)] = s;
            g[(r + 1, col)] = -s;
            g[(r + 1, col + 1)] = c;
            // Rotating segment i swings every node distal to it.
            g[(r, col + 2)] = global[k].y - global[i].y;
            g[(r + 1, col + 2)] = -(global[k].x - global[i].x);
            g[(r + 2, col + 2)] = 1.0;
        }
    }
    g
}

/// Local `3 x 2` Jacobian of one segment's pose with respect to its racks.
pub fn local_block(q_left: f64, q_right: f64, width: f64) -> Matrix3x2<f64> {
    let (theta, len) = arc(q_left, q_right, width);
    let (d_theta, d_len) = arc_pose_partials(theta, len);
    let mut m = Matrix3x2::zeros();
    for row in 0..3 {
        m[(row, 0)] = d_theta[row] / width + 0.5 * d_len[row];
        m[(row, 1)] = -d_theta[row] / width + 0.5 * d_len[row];
    }
    m
}

fn jacobian_unchecked(q: &JointVector, geo: &RobotGeometry) -> PhysicalJacobian {
    let n = geo.n_segments;
    let local = local_poses(q, geo);
    let chain = chain_jacobian(&local);
    let local_blocks: Vec<_> = (0..n)
        .map(|i| {
            let (l, r) = q.pair(i);
            local_block(l, r, geo.widths[i])
        })
        .collect();
    let mut full = DMatrix::zeros(3 * n, 2 * n);
    for k in 0..n {
        for (i, block) in local_blocks.iter().enumerate().take(k + 1) {
            let g = chain.fixed_view::<3, 3>(3 * k, 3 * i);
            full.fixed_view_mut::<3, 2>(3 * k, 2 * i).copy_from(&(g * block));
        }
    }
    PhysicalJacobian { full, local_blocks }
}

pub fn physical_jacobian(q: &JointVector, geo: &RobotGeometry) -> Result<PhysicalJacobian> {
    check_limits(q, geo)?;
    Ok(jacobian_unchecked(q, geo))
}

/// Projects `q` onto the feasible set: hard limits plus the coupled rack
/// bounds, by alternating per-rack projection. Total; the output always
/// satisfies [`RobotGeometry::is_feasible`] for a valid geometry.
pub fn clamp_to_bounds(q: &JointVector, geo: &RobotGeometry) -> JointVector {
    let mut out = q.0.clone();
    for i in 0..geo.n_segments {
        let (l, r) = clamp_pair(q.0[2 * i], q.0[2 * i + 1], geo);
        out[2 * i] = l;
        out[2 * i + 1] = r;
    }
    JointVector(out)
}

fn clamp_pair(l: f64, r: f64, geo: &RobotGeometry) -> (f64, f64) {
    let sanitize = |v: f64| {
        if v.is_nan() {
            0.5 * (geo.q_min + geo.q_max)
        } else {
            v.clamp(geo.q_min, geo.q_max)
        }
    };
    let (mut l, mut r) = (sanitize(l), sanitize(r));
    for _ in 0..CLAMP_ITERATIONS {
        if geo.pair_feasible(l, r) {
            return (l, r);
        }
        l = l.clamp(geo.f_min(r), geo.f_max(r));
        r = r.clamp(geo.f_min(l), geo.f_max(l));
    }
    if geo.pair_feasible(l, r) {
        return (l, r);
    }
    // Non-converging polynomial bounds: walk toward the equal-extension point.
    let m = 0.5 * (l + r);
    if !geo.pair_feasible(m, m) {
        return (m, m);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let t = 0.5 * (lo + hi);
        if geo.pair_feasible(m + t * (l - m), m + t * (r - m)) {
            lo = t;
        } else {
            hi = t;
        }
    }
    (m + lo * (l - m), m + lo * (r - m))
}

/// A point at arc fraction `tau` along segment `segment` (tau = 1 is the node).
pub fn backbone_point(
    global: &[SegmentPose],
    q: &JointVector,
    geo: &RobotGeometry,
    segment: usize,
    tau: f64,
) -> (f64, f64) {
    let base = if segment == 0 {
        SegmentPose::default()
    } else {
        global[segment - 1]
    };
    let (l, r) = q.pair(segment);
    let (theta, len) = arc(l, r, geo.widths[segment]);
    let p = arc_pose(tau * theta, tau * len);
    let (dx, dy) = rotate(base.theta, p.x, p.y);
    (base.x + dx, base.y + dy)
}

/// Position Jacobian (`2 x 2N`) of [`backbone_point`] with respect to `q`.
pub fn backbone_point_jacobian(global: &[SegmentPose], q: &JointVector, geo: &RobotGeometry, segment: usize, tau: f64, point: (f64, f64)) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(2, geo.n_joints());
    // Proximal segments: own arc motion plus rotation of everything beyond.
    for j in 0..segment {
        let base_phi = if j == 0 { 0.0 } else { global[j - 1].theta };
        let (l, r) = q.pair(j);
        let c = geo.widths[j];
        let (theta, len) = arc(l, r, c);
        let (d_theta, d_len) = arc_pose_partials(theta, len);
        let node = global[j];
        let swing = (point.1 - node.y, -(point.0 - node.x));
        for (col, (a, b)) in [(2 * j, (1.0 / c, 0.5)), (2 * j + 1, (-1.0 / c, 0.5))] {
            let lx = a * d_theta[0] + b * d_len[0];
            let ly = a * d_theta[1] + b * d_len[1];
            let (gx, gy) = rotate(base_phi, lx, ly);
            jac[(0, col)] = gx + a * swing.0;
            jac[(1, col)] = gy + a * swing.1;
        }
    }
    let base_phi = if segment == 0 { 0.0 } else { global[segment - 1].theta };
    let (l, r) = q.pair(segment);
    let c = geo.widths[segment];
    let (theta, len) = arc(l, r, c);
    let (d_theta, d_len) = arc_pose_partials(tau * theta, tau * len);
    for (col, (a, b)) in [(2 * segment, (1.0 / c, 0.5)), (2 * segment + 1, (-1.0 / c, 0.5))] {
        let lx = tau * (a * d_theta[0] + b * d_len[0]);
        let ly = tau * (a * d_theta[1] + b * d_len[1]);
        let (gx, gy) = rotate(base_phi, lx, ly);
        jac[(0, col)] = gx;
        jac[(1, col)] = gy;
    }
    jac
}
