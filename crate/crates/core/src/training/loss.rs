//! Physics-constrained objective: a weighted local Huber term on per-segment
//! increments plus a global term that pushes the predicted increments
//! through the frame chain, anchored at the measured pre-step pose.

use serde::{Deserialize, Serialize};

use super::dataset::{decompose, TrainingSample};
use crate::error::{Error, Result};
use crate::kinematics::{compose_chain, SegmentPose};
use crate::nn::tape::huber;
use crate::nn::{Forward, SpatioCoupledNet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_x: f64,
    pub w_y: f64,
    pub w_theta: f64,
    pub lambda_local: f64,
    /// Huber transition per channel: mm, mm, rad.
    pub huber_delta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_x: 1.0,
            w_y: 1.0,
            w_theta: 10.0,
            lambda_local: 0.5,
            huber_delta: [1.0, 1.0, 0.02],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.w_x, self.w_y, self.w_theta, self.lambda_local]
            .iter()
            .chain(&self.huber_delta)
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(Error::Config("loss weights and Huber deltas must be positive".into()));
        }
        if self.w_theta <= self.w_x || self.w_theta <= self.w_y {
            return Err(Error::Config("w_theta must exceed w_x and w_y".into()));
        }
        Ok(())
    }

    pub fn channel_weights(&self) -> [f64; 3] {
        [self.w_x, self.w_y, self.w_theta]
    }
}

/// Next global poses from the measured pre-step poses and predicted local
/// increments. Plain-number version of [`fk_on_tape`].
pub fn differentiable_fk(x_gt_global_t: &[[f64; 3]], dx_local_pred: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let moved: Vec<SegmentPose> = decompose(x_gt_global_t)
        .iter()
        .zip(dx_local_pred)
        .map(|(p, d)| SegmentPose::new(p.x + d[0], p.y + d[1], p.theta + d[2]))
        .collect();
    compose_chain(&moved).iter().map(|p| p.as_array()).collect()
}

/// Recorded version: `dx` is `NB x 3` segment-major; returns `NB x 3` poses.
pub fn fk_on_tape(tape: &mut Tape, x_gt_global_t: &[&[[f64; 3]]], dx: Var) -> Var {
    let b = x_gt_global_t.len();
    let n = x_gt_global_t.first().map_or(0, |g| g.len());
    let locals: Vec<Vec<SegmentPose>> = x_gt_global_t.iter().map(|g| decompose(g)).collect();
    let mut phi = tape.constant(Tensor::zeros(b, 1));
    let mut px = tape.constant(Tensor::zeros(b, 1));
    let mut py = tape.constant(Tensor::zeros(b, 1));
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut base = Tensor::zeros(b, 3);
        for (s, l) in locals.iter().enumerate() {
            base.set(s, 0, l[i].x);
            base.set(s, 1, l[i].y);
            base.set(s, 2, l[i].theta);
        }
        let base = tape.constant(base);
        let d = tape.slice_rows(dx, i * b, b);
        let local = tape.add(base, d);
        let (lx, ly, lt) = (
            tape.slice_cols(local, 0, 1),
            tape.slice_cols(local, 1, 1),
            tape.slice_cols(local, 2, 1),
        );
        let (s, c) = (tape.sin(phi), tape.cos(phi));
        // rotate by the accumulated angle: (x c + y s, -x s + y c)
        let xc = tape.mul(lx, c);
        let ys = tape.mul(ly, s);
        let xs = tape.mul(lx, s);
        let yc = tape.mul(ly, c);
        let gx = tape.add(xc, ys);
        let gy = tape.sub(yc, xs);
        px = tape.add(px, gx);
        py = tape.add(py, gy);
        phi = tape.add(phi, lt);
        rows.push(tape.concat_cols(&[px, py, phi]));
    }
    tape.concat_rows(&rows)
}

/// Weighted local Huber contributions per channel, summed over segments.
pub fn local_loss_terms(residuals: &[[f64; 3]], w: &LossWeights) -> [f64; 3] {
    let cw = w.channel_weights();
    let mut out = [0.0; 3];
    for e in residuals {
        for c in 0..3 {
            out[c] += cw[c] * huber(e[c], w.huber_delta[c]);
        }
    }
    out
}

/// Huber over every node and channel of the global pose error.
pub fn global_loss(predicted: &[[f64; 3]], truth: &[[f64; 3]], w: &LossWeights) -> f64 {
    predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (0..3).map(|c| huber(p[c] - t[c], w.huber_delta[c])).sum::<f64>())
        .sum()
}

/// Total loss of one sample given hybrid local increments.
pub fn sample_loss(sample: &TrainingSample, dx_hybrid: &[[f64; 3]], w: &LossWeights) -> f64 {
    let residuals: Vec<[f64; 3]> = dx_hybrid
        .iter()
        .zip(&sample.dx_gt_local)
        .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
        .collect();
    let pred = differentiable_fk(&sample.x_gt_global_t, dx_hybrid);
    global_loss(&pred, &sample.x_gt_global_t1, w) + w.lambda_local * local_loss_terms(&residuals, w).iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub global: Var,
    pub local: Var,
}

/// Records the batch-mean loss of `batch` on `tape`.
pub fn record_loss<'p>(
    tape: &mut Tape<'p>,
    net: &'p SpatioCoupledNet,
    batch: &[&TrainingSample],
    w: &LossWeights,
) -> Result<(LossVars, Forward)> {
    let states: Vec<_> = batch.iter().map(|s| s.states.clone()).collect();
    let nom: Vec<_> = batch.iter().map(|s| s.dx_nom_local.clone()).collect();
    let f = net.forward(tape, &states, Some(&nom))?;
    let hybrid = f.dx_hybrid.expect("nominal supplied");
    let b = batch.len();
    let n = f.n_segments;
    let seg_major = |get: &dyn Fn(&TrainingSample) -> &Vec<[f64; 3]>| {
        let mut t = Tensor::zeros(n * b, 3);
        for (s, smp) in batch.iter().enumerate() {
            for (i, v) in get(smp).iter().enumerate() {
                for c in 0..3 {
                    t.set(i * b + s, c, v[c]);
                }
            }
        }
        t
    };
    let gt = tape.constant(seg_major(&|s| &s.dx_gt_local));
    let g1 = tape.constant(seg_major(&|s| &s.x_gt_global_t1));

    let res = tape.sub(hybrid, gt);
    let hub = tape.huber(res, &w.huber_delta);
    let weighted = tape.scale_cols(hub, &w.channel_weights());
    let local = tape.sum(weighted);
    let local = tape.affine(local, 1.0 / b as f64, 0.0);

    let anchors: Vec<&[[f64; 3]]> = batch.iter().map(|s| s.x_gt_global_t.as_slice()).collect();
    let pred = fk_on_tape(tape, &anchors, hybrid);
    let gerr = tape.sub(pred, g1);
    let ghub = tape.huber(gerr, &w.huber_delta);
    let global = tape.sum(ghub);
    let global = tape.affine(global, 1.0 / b as f64, 0.0);

    let scaled_local = tape.affine(local, w.lambda_local, 0.0);
    let total = tape.add(global, scaled_local);
    let value = tape.value(total).data()[0];
    if !value.is_finite() {
        let index = (0..b)
            .find(|&s| {
                let row = |i: usize| tape.value(hybrid).row(i * b + s).iter().all(|v| v.is_finite());
                !(0..n).all(row)
            })
            .unwrap_or(0);
        return Err(Error::NumericFault { stage: "loss", index });
    }
    Ok((LossVars { total, global, local }, f))
}
