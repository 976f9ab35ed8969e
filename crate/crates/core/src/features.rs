//! Per-segment network input and its fixed affine normalization.

use nalgebra::Matrix3x2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kinematics::{JointVector, PhysicalJacobian, SegmentPose, ShapeState};

pub const STATE_WIDTH: usize = 15;

/// Field names in encoding order, used for dataset headers.
pub const STATE_FIELDS: [&str; STATE_WIDTH] = [
    "q_l", "q_r", "dq_hist_l", "dq_hist_r", "x_loc", "y_loc", "theta_loc", "dq_cmd_l", "dq_cmd_r",
    "j00", "j01", "j10", "j11", "j20", "j21",
];

/// Offset of the commanded-increment pair inside the encoded vector.
pub const DQ_CMD_OFFSET: usize = 7;
/// Offset of the flattened local Jacobian inside the encoded vector.
pub const JACOBIAN_OFFSET: usize = 9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateVector15 {
    pub q: [f64; 2],
    pub dq_hist: [f64; 2],
    pub x_loc: [f64; 3],
    pub dq_cmd: [f64; 2],
    /// Row-major `3 x 2` local Jacobian block.
    pub j_phy: [f64; 6],
}

impl StateVector15 {
    pub fn to_array(&self) -> [f64; STATE_WIDTH] {
        let mut a = [0.0; STATE_WIDTH];
        a[0..2].copy_from_slice(&self.q);
        a[2..4].copy_from_slice(&self.dq_hist);
        a[4..7].copy_from_slice(&self.x_loc);
        a[7..9].copy_from_slice(&self.dq_cmd);
        a[9..15].copy_from_slice(&self.j_phy);
        a
    }

    pub fn from_array(a: &[f64; STATE_WIDTH]) -> Self {
        StateVector15 {
            q: [a[0], a[1]],
            dq_hist: [a[2], a[3]],
            x_loc: [a[4], a[5], a[6]],
            dq_cmd: [a[7], a[8]],
            j_phy: [a[9], a[10], a[11], a[12], a[13], a[14]],
        }
    }

    /// Nominal local displacement predicted by the embedded Jacobian block.
    pub fn nominal_step(&self) -> [f64; 3] {
        let j = &self.j_phy;
        let [a, b] = self.dq_cmd;
        [j[0] * a + j[1] * b, j[2] * a + j[3] * b, j[4] * a + j[5] * b]
    }
}

pub fn flatten_block(block: &Matrix3x2<f64>) -> [f64; 6] {
    [
        block[(0, 0)],
        block[(0, 1)],
        block[(1, 0)],
        block[(1, 1)],
        block[(2, 0)],
        block[(2, 1)],
    ]
}

/// Assembles one [`StateVector15`] per segment, base to tip.
pub fn encode_state(
    q: &JointVector,
    dq_hist: &[f64],
    dq_cmd: &[f64],
    shape: &ShapeState,
    jac: &PhysicalJacobian,
) -> Result<Vec<StateVector15>> {
    let n = shape.local.len();
    if q.len() != 2 * n || dq_hist.len() != 2 * n || dq_cmd.len() != 2 * n || jac.local_blocks.len() != n {
        return Err(invalid(format!(
            "encode_state: inconsistent sizes (q {}, hist {}, cmd {}, segments {}, blocks {})",
            q.len(),
            dq_hist.len(),
            dq_cmd.len(),
            n,
            jac.local_blocks.len()
        )));
    }
    Ok(encode_from_parts(q, dq_hist, dq_cmd, &shape.local, &jac.local_blocks))
}

pub(crate) fn encode_from_parts(
    q: &JointVector,
    dq_hist: &[f64],
    dq_cmd: &[f64],
    local: &[SegmentPose],
    blocks: &[Matrix3x2<f64>],
) -> Vec<StateVector15> {
    (0..local.len())
        .map(|i| StateVector15 {
            q: [q.0[2 * i], q.0[2 * i + 1]],
            dq_hist: [dq_hist[2 * i], dq_hist[2 * i + 1]],
            x_loc: local[i].as_array(),
            dq_cmd: [dq_cmd[2 * i], dq_cmd[2 * i + 1]],
            j_phy: flatten_block(&blocks[i]),
        })
        .collect()
}

/// Per-feature standardization `(v - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Normalizer {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    /// Mean and standard deviation per column; near-constant columns keep scale 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Self {
        let mut sum = vec![0.0; width];
        let mut sum_sq = vec![0.0; width];
        let mut count = 0usize;
        for row in rows {
            for (k, v) in row.iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Self::identity(width);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var.sqrt() > 1e-9 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, scale }
    }

    pub fn normalize(&self, v: &[f64], out: &mut [f64]) {
        for k in 0..v.len() {
            out[k] = (v[k] - self.mean[k]) / self.scale[k];
        }
    }

    pub fn denormalize(&self, v: &[f64], out: &mut [f64]) {
        for k in 0..v.len() {
            out[k] = v[k] * self.scale[k] + self.mean[k];
        }
    }
}
