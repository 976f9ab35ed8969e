//! SpatioCoupledNet: independent per-segment experts, a bidirectional GRU
//! across the segment sequence, and two shared heads (displacement and
//! confidence gate) over `z = [h, H, vec(J_phy)]`.
//!
//! Batches are laid out segment-major: row `i * B + b` holds segment `i` of
//! sample `b`, so every recurrent step reads a contiguous block of rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::controller::{DisplacementModel, Prediction};
use crate::error::{invalid, Error, Result};
use crate::features::{Normalizer, StateVector15, JACOBIAN_OFFSET, STATE_WIDTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Expert feature width `h`.
    pub hidden: usize,
    /// Hidden width of each GRU direction.
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub expert_blocks: usize,
    /// Added to the gate pre-activation; positive values favour the analytic model.
    pub gate_bias: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 128,
            gru_hidden: 128,
            head_hidden: 64,
            expert_blocks: 2,
            gate_bias: 2.0,
        }
    }
}

impl NetConfig {
    /// The narrow variant used for finite-difference checks.
    pub fn reduced() -> Self {
        NetConfig {
            hidden: 8,
            gru_hidden: 8,
            head_hidden: 8,
            ..Self::default()
        }
    }

    pub fn z_width(&self) -> usize {
        self.hidden + 2 * self.gru_hidden + 6
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.gru_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !self.gate_bias.is_finite() {
            return Err(Error::Config("gate_bias must be finite".into()));
        }
        Ok(())
    }
}

/// Named weight tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    lin: Linear,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct Expert {
    input: Linear,
    blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug)]
struct GruCell {
    ih: Linear,
    hh: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    experts: Vec<Expert>,
    fwd: GruCell,
    bwd: GruCell,
    pred: Head,
    gate: Head,
}

#[derive(Clone, Debug)]
pub struct SpatioCoupledNet {
    cfg: NetConfig,
    n_segments: usize,
    params: ParamStore,
    layout: Layout,
    /// Fixed input standardization (training-set statistics).
    pub input_norm: Normalizer,
    /// Per-channel scale applied to the displacement head (mm, mm, rad).
    pub output_scale: [f64; 3],
}

/// Handles into the tape for one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub n_segments: usize,
    /// Expert features, `NB x h`.
    pub h: Var,
    /// Concatenated GRU states, `NB x 2G`.
    pub big_h: Var,
    /// Head input, `NB x (h + 2G + 6)`.
    pub z: Var,
    /// Learned local displacement, `NB x 3`.
    pub dx_net: Var,
    /// Gate, `NB x 3`.
    pub beta: Var,
    /// Fused displacement, when a nominal prediction was supplied.
    pub dx_hybrid: Option<Var>,
    /// One leaf per stored tensor, aligned with [`ParamStore::tensors`].
    pub params: Vec<Var>,
}

impl Forward {
    pub fn row(&self, segment: usize, sample: usize) -> usize {
        segment * self.batch + sample
    }
}

fn layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Linear {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.push(format!("{name}.w"), Tensor::uniform(fan_in, fan_out, bound, rng));
    let b = store.push(format!("{name}.b"), Tensor::uniform(1, fan_out, bound, rng));
    Linear { w, b }
}

fn gru(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> GruCell {
    // Both matrices use the recurrent width for their bound, as is customary.
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut lin = |suffix: &str, rows: usize| {
        let w = store.push(format!("{name}.{suffix}.w"), Tensor::uniform(rows, 3 * hidden, bound, rng));
        let b = store.push(format!("{name}.{suffix}.b"), Tensor::uniform(1, 3 * hidden, bound, rng));
        Linear { w, b }
    };
    let ih = lin("ih", input);
    let hh = lin("hh", hidden);
    GruCell { ih, hh }
}

impl SpatioCoupledNet {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn new(cfg: NetConfig, n_segments: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_segments == 0 {
            return Err(invalid("network needs at least one segment"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let experts = (0..n_segments)
            .map(|i| {
                let input = layer(&mut store, &mut rng, &format!("expert.{i}.in"), STATE_WIDTH, h);
                let blocks = (0..cfg.expert_blocks)
                    .map(|k| {
                        let lin = layer(&mut store, &mut rng, &format!("expert.{i}.block{k}"), h, h);
                        let gamma = store.push(format!("expert.{i}.block{k}.ln.gamma"), Tensor::filled(1, h, 1.0));
                        let beta = store.push(format!("expert.{i}.block{k}.ln.beta"), Tensor::zeros(1, h));
                        Block { lin, gamma, beta }
                    })
                    .collect();
                Expert { input, blocks }
            })
            .collect();
        let fwd = gru(&mut store, &mut rng, "gru.fwd", h, cfg.gru_hidden);
        let bwd = gru(&mut store, &mut rng, "gru.bwd", h, cfg.gru_hidden);
        let z = cfg.z_width();
        let pred = Head {
            l1: layer(&mut store, &mut rng, "pred.l1", z, cfg.head_hidden),
            l2: layer(&mut store, &mut rng, "pred.l2", cfg.head_hidden, 3),
        };
        let gate = Head {
            l1: layer(&mut store, &mut rng, "gate.l1", z, cfg.head_hidden),
            l2: layer(&mut store, &mut rng, "gate.l2", cfg.head_hidden, 3),
        };
        Ok(SpatioCoupledNet {
            cfg,
            n_segments,
            params: store,
            layout: Layout {
                experts,
                fwd,
                bwd,
                pred,
                gate,
            },
            input_norm: Normalizer::identity(STATE_WIDTH),
            output_scale: [1.0; 3],
        })
    }

    /// Rebuilds a network from stored tensors; names and shapes must match
    /// what `new` would produce for the same configuration.
    pub fn from_parts(
        cfg: NetConfig,
        n_segments: usize,
        named: Vec<(String, Tensor)>,
        input_norm: Normalizer,
        output_scale: [f64; 3],
    ) -> Result<Self> {
        let mut net = Self::new(cfg, n_segments, 0)?;
        if named.len() != net.params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                named.len()
            )));
        }
        for (k, (name, t)) in named.into_iter().enumerate() {
            if name != net.params.names[k] || t.shape() != net.params.tensors[k].shape() {
                return Err(invalid(format!("unexpected parameter {name} {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(invalid(format!("parameter {name} is not finite")));
            }
            net.params.tensors[k] = t;
        }
        if input_norm.mean.len() != STATE_WIDTH || input_norm.scale.len() != STATE_WIDTH {
            return Err(invalid("input normalizer must have 15 entries"));
        }
        net.input_norm = input_norm;
        net.output_scale = output_scale;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_gate_bias(&mut self, b: f64) {
        self.cfg.gate_bias = b;
    }

    /// Zeroes the last displacement layer, so `dx_net` is identically zero.
    pub fn zero_pred_head(&mut self) {
        let l2 = self.layout.pred.l2;
        for idx in [l2.w, l2.b] {
            self.params.tensors[idx].data_mut().fill(0.0);
        }
    }

    fn input_matrix(&self, batch: &[Vec<StateVector15>]) -> Result<Tensor> {
        let b = batch.len();
        let n = self.n_segments;
        let mut x = Tensor::zeros(n * b, STATE_WIDTH);
        for (s, sample) in batch.iter().enumerate() {
            if sample.len() != n {
                return Err(invalid(format!("sample {s} has {} segments, expected {n}", sample.len())));
            }
            for (i, st) in sample.iter().enumerate() {
                let r = i * b + s;
                self.input_norm.normalize(&st.to_array(), &mut x.data_mut()[r * STATE_WIDTH..(r + 1) * STATE_WIDTH]);
            }
        }
        Ok(x)
    }

    /// Records one forward pass on `tape`. `dx_nom` (one `N x 3` block per
    /// sample) enables the fused output.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        batch: &[Vec<StateVector15>],
        dx_nom: Option<&[Vec<[f64; 3]>]>,
    ) -> Result<Forward> {
        let b = batch.len();
        let n = self.n_segments;
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        let x = self.input_matrix(batch)?;
        let params: Vec<Var> = self.params.tensors.iter().map(|t| tape.param(t)).collect();
        let p = |idx: usize| params[idx];
        let x = tape.constant(x);

        let mut hs = Vec::with_capacity(n);
        for (i, ex) in self.layout.experts.iter().enumerate() {
            let xi = tape.slice_rows(x, i * b, b);
            let mut hcur = tape.linear(xi, p(ex.input.w), p(ex.input.b));
            for blk in &ex.blocks {
                let y = tape.linear(hcur, p(blk.lin.w), p(blk.lin.b));
                let y = tape.layer_norm(y, p(blk.gamma), p(blk.beta));
                let y = tape.gelu(y);
                hcur = tape.add(hcur, y);
            }
            check(tape, hcur, "expert", i)?;
            hs.push(hcur);
        }
        let h_all = tape.concat_rows(&hs);

        let g = self.cfg.gru_hidden;
        let run = |tape: &mut Tape<'p>, cell: &GruCell, order: &mut dyn Iterator<Item = usize>| -> Vec<(usize, Var)> {
            let gi = tape.linear(h_all, p(cell.ih.w), p(cell.ih.b));
            let mut state = tape.constant(Tensor::zeros(b, g));
            let mut out = Vec::with_capacity(n);
            for i in order {
                let gi_i = tape.slice_rows(gi, i * b, b);
                let gh = tape.linear(state, p(cell.hh.w), p(cell.hh.b));
                let (ir, hr) = (tape.slice_cols(gi_i, 0, 2 * g), tape.slice_cols(gh, 0, 2 * g));
                let rz = tape.add(ir, hr);
                let rz = tape.sigmoid(rz);
                let r = tape.slice_cols(rz, 0, g);
                let u = tape.slice_cols(rz, g, g);
                let (inn, hn) = (tape.slice_cols(gi_i, 2 * g, g), tape.slice_cols(gh, 2 * g, g));
                let rh = tape.mul(r, hn);
                let cand = tape.add(inn, rh);
                let cand = tape.tanh(cand);
                // h' = (1 - u) * cand + u * h
                let d = tape.sub(state, cand);
                let ud = tape.mul(u, d);
                state = tape.add(cand, ud);
                out.push((i, state));
            }
            out
        };
        let fwd = run(tape, &self.layout.fwd, &mut (0..n));
        let mut bwd = run(tape, &self.layout.bwd, &mut (0..n).rev());
        bwd.sort_by_key(|(i, _)| *i);
        let mut zs = Vec::with_capacity(n);
        let mut big = Vec::with_capacity(n);
        for i in 0..n {
            let hi = tape.concat_cols(&[fwd[i].1, bwd[i].1]);
            check(tape, hi, "gru", i)?;
            big.push(hi);
            let xi = tape.slice_rows(x, i * b, b);
            let jac = tape.slice_cols(xi, JACOBIAN_OFFSET, 6);
            zs.push(tape.concat_cols(&[hs[i], hi, jac]));
        }
        let big_h = tape.concat_rows(&big);
        let z = tape.concat_rows(&zs);

        let head = |tape: &mut Tape<'p>, hd: &Head| {
            let a = tape.linear(z, p(hd.l1.w), p(hd.l1.b));
            let a = tape.gelu(a);
            tape.linear(a, p(hd.l2.w), p(hd.l2.b))
        };
        let raw = head(tape, &self.layout.pred);
        let dx_net = tape.scale_cols(raw, &self.output_scale);
        check(tape, dx_net, "pred_head", 0)?;
        let logits = head(tape, &self.layout.gate);
        let logits = tape.affine(logits, 1.0, self.cfg.gate_bias);
        let beta = tape.sigmoid(logits);
        check(tape, beta, "gate_head", 0)?;

        let dx_hybrid = match dx_nom {
            None => None,
            Some(nom) => {
                if nom.len() != b || nom.iter().any(|v| v.len() != n) {
                    return Err(invalid("dx_nom must hold N x 3 values per sample"));
                }
                let mut t = Tensor::zeros(n * b, 3);
                for (s, rows) in nom.iter().enumerate() {
                    for (i, d) in rows.iter().enumerate() {
                        for c in 0..3 {
                            t.set(i * b + s, c, d[c]);
                        }
                    }
                }
                let nom = tape.constant(t);
                Some(fuse(tape, nom, dx_net, beta))
            }
        };
        Ok(Forward {
            batch: b,
            n_segments: n,
            h: h_all,
            big_h,
            z,
            dx_net,
            beta,
            dx_hybrid,
            params,
        })
    }

    /// Inference on frozen weights.
    pub fn predict(&self, batch: &[Vec<StateVector15>]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, None)?;
        let (dx, beta) = (tape.value(f.dx_net), tape.value(f.beta));
        Ok((0..f.batch)
            .map(|s| {
                let mut p = Prediction {
                    dx_net: Vec::with_capacity(f.n_segments),
                    beta: Vec::with_capacity(f.n_segments),
                };
                for i in 0..f.n_segments {
                    let r = f.row(i, s);
                    p.dx_net.push([dx.get(r, 0), dx.get(r, 1), dx.get(r, 2)]);
                    p.beta.push([beta.get(r, 0), beta.get(r, 1), beta.get(r, 2)]);
                }
                p
            })
            .collect())
    }
}

/// `beta * nom + (1 - beta) * net`, written as `net + beta * (nom - net)`.
pub fn fuse(tape: &mut Tape, nom: Var, net: Var, beta: Var) -> Var {
    let d = tape.sub(nom, net);
    let bd = tape.mul(beta, d);
    tape.add(net, bd)
}

fn check(tape: &Tape, v: Var, stage: &'static str, index: usize) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault { stage, index })
    }
}

impl DisplacementModel for SpatioCoupledNet {
    fn predict_batch(&self, batch: &[Vec<StateVector15>]) -> Result<Vec<Prediction>> {
        self.predict(batch)
    }
}
