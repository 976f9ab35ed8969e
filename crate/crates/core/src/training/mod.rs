//! Data generation, the physics-constrained loss and the optimization loop.

pub mod dataset;
pub mod loss;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, high_curvature_fraction, read_dataset, write_dataset, DatasetConfig, TrainingSample,
};
pub use loss::{differentiable_fk, fk_on_tape, global_loss, local_loss_terms, record_loss, sample_loss, LossWeights};

use crate::error::{invalid, Error, Result};
use crate::features::{Normalizer, STATE_WIDTH};
use crate::nn::{save_checkpoint, SpatioCoupledNet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final step size as a fraction of the initial one.
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    pub val_fraction: f64,
    /// Linear step-size ramp before the cosine decay starts.
    #[serde(default)]
    pub lr_warmup_steps: usize,
    /// Epochs at the start during which the gate is held shut (beta = 0),
    /// so the learned branch is fitted as a standalone predictor before the
    /// gate starts sharing authority with the analytic model.
    #[serde(default)]
    pub gate_warmup_epochs: usize,
    /// Penalty on the gap between a segment's two translational gates. The
    /// controller applies them to global rows, so a gate that trusts the
    /// analytic model along one local axis only mixes the two Jacobians
    /// unevenly once the segment is rotated.
    #[serde(default)]
    pub gate_tie: f64,
    /// Stops early after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            final_lr_fraction: 0.02,
            clip_norm: 1.0,
            val_fraction: 0.1,
            lr_warmup_steps: 0,
            gate_warmup_epochs: 10,
            gate_tie: 10.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..=1.0).contains(&self.final_lr_fraction)
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.gate_warmup_epochs < self.epochs
            && self.gate_tie.is_finite()
            && self.gate_tie >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid training settings".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_beta_x: f64,
    pub mean_beta_y: f64,
    pub mean_beta_theta: f64,
}

pub struct TrainOutcome {
    /// Parameters with the best validation loss.
    pub net: SpatioCoupledNet,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Mini-batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (e, (p, g)) in params[k].data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[e] = Self::B1 * m[e] + (1.0 - Self::B1) * g;
                v[e] = Self::B2 * v[e] + (1.0 - Self::B2) * g * g;
                *p -= lr * (m[e] / c1) / ((v[e] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Step size at `step` of `total`: linear ramp, then cosine decay to the floor.
pub fn cosine_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let ramp = cfg.lr_warmup_steps.min(total.saturating_sub(1));
    if step < ramp {
        return cfg.learning_rate * (step + 1) as f64 / (ramp + 1) as f64;
    }
    let (step, total) = (step - ramp, total - ramp);
    let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    let floor = cfg.learning_rate * cfg.final_lr_fraction;
    floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Freezes input standardization and output scaling from training data.
pub fn fit_scaling(net: &mut SpatioCoupledNet, samples: &[&TrainingSample]) {
    let rows: Vec<[f64; STATE_WIDTH]> = samples.iter().flat_map(|s| s.states.iter().map(|st| st.to_array())).collect();
    net.input_norm = Normalizer::fit(rows.iter().map(|r| r.as_slice()), STATE_WIDTH);
    let out = Normalizer::fit(
        samples.iter().flat_map(|s| s.dx_gt_local.iter().map(|d| d.as_slice())),
        3,
    );
    net.output_scale = [out.scale[0], out.scale[1], out.scale[2]];
}

/// Batch-mean loss and mean gate over `samples`, evaluated in chunks.
pub fn evaluate(net: &SpatioCoupledNet, samples: &[&TrainingSample], w: &LossWeights, chunk: usize) -> Result<(f64, [f64; 3])> {
    let mut total = 0.0;
    let mut beta = [0.0; 3];
    let mut rows = 0usize;
    for part in samples.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let (vars, f) = record_loss(&mut tape, net, part, w)?;
        total += tape.value(vars.total).data()[0] * part.len() as f64;
        let b = tape.value(f.beta);
        for r in 0..b.rows() {
            for c in 0..3 {
                beta[c] += b.get(r, c);
            }
        }
        rows += b.rows();
    }
    let n = samples.len().max(1) as f64;
    let rows = rows.max(1) as f64;
    Ok((total / n, [beta[0] / rows, beta[1] / rows, beta[2] / rows]))
}

/// Logit offset that pins the gate to exactly zero.
const GATE_SHUT: f64 = -1e3;

/// `weight` times the mean squared difference between the two translational
/// gates of every segment.
fn gate_tie(tape: &mut Tape<'_>, beta: Var, weight: f64) -> Var {
    let rows = tape.value(beta).rows();
    let bx = tape.slice_cols(beta, 0, 1);
    let by = tape.slice_cols(beta, 1, 1);
    let d = tape.sub(bx, by);
    let sq = tape.mul(d, d);
    let sum = tape.sum(sq);
    tape.affine(sum, weight / rows as f64, 0.0)
}

/// Mini-batch Adam with global-norm clipping and a cosine schedule. Keeps
/// the parameters of the best validation epoch after the gate warm-up
/// (written to `checkpoint` whenever they improve). A non-finite validation loss aborts with
/// [`Error::Diverged`]; the last good checkpoint stays on disk.
pub fn train(
    dataset: &[TrainingSample],
    mut net: SpatioCoupledNet,
    weights: &LossWeights,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training needs a non-empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_set: Vec<&TrainingSample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&TrainingSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    fit_scaling(&mut net, &train_set);

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs * steps_per_epoch);
    let epochs = total_steps.div_ceil(steps_per_epoch);
    let warmup = cfg.gate_warmup_epochs.min(epochs - 1);
    let gate_bias = net.config().gate_bias;
    if warmup > 0 {
        net.set_gate_bias(GATE_SHUT);
    }
    let mut adam = Adam::new(net.params().tensors());
    let mut best: Option<(f64, usize, SpatioCoupledNet)> = None;
    let mut log = Vec::with_capacity(epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut batch_order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..epochs {
        if epoch == warmup {
            net.set_gate_bias(gate_bias);
        }
        batch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in batch_order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let (vars, f) = record_loss(&mut tape, &net, &batch, weights)?;
                let total = if cfg.gate_tie > 0.0 {
                    let tie = gate_tie(&mut tape, f.beta, cfg.gate_tie);
                    tape.add(vars.total, tie)
                } else {
                    vars.total
                };
                let loss = tape.value(total).data()[0];
                step_losses.push(loss);
                epoch_loss += loss * batch.len() as f64;
                seen += batch.len();
                let mut g = tape.backward(total)?;
                f.params
                    .iter()
                    .zip(net.params().tensors())
                    .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
                    .collect::<Vec<_>>()
            };
            let mut grads = grads;
            let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grads.iter_mut().for_each(|g| g.scale_assign(s));
            }
            let lr = cosine_lr(cfg, step, total_steps);
            adam.step(net.params_mut().tensors_mut(), &grads, lr);
            step += 1;
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
        let (val_loss, beta) = match evaluate(&net, eval_set, weights, 256) {
            Ok(v) => v,
            Err(Error::NumericFault { .. }) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            mean_beta_x: beta[0],
            mean_beta_y: beta[1],
            mean_beta_theta: beta[2],
        });
        if epoch >= warmup && best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            if let Some(path) = checkpoint {
                save_checkpoint(&net, path)?;
            }
            best = Some((val_loss, epoch, net.clone()));
        }
    }
    let (_, best_epoch, best_net) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        net: best_net,
        log,
        best_epoch,
        step_losses,
    })
}

/// Writes the per-epoch log as CSV, preceded by a comment line with the
/// optimizer settings.
pub fn write_log(log: &[EpochRecord], cfg: &TrainConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "# optimizer=adam(0.9,0.999) lr={} schedule=linear({})+cosine(final={}) clip={} batch={} val_fraction={} gate_warmup={} gate_tie={}",
        cfg.learning_rate, cfg.lr_warmup_steps, cfg.final_lr_fraction, cfg.clip_norm, cfg.batch_size, cfg.val_fraction, cfg.gate_warmup_epochs, cfg.gate_tie
    )?;
    let mut w = csv::Writer::from_writer(file);
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
