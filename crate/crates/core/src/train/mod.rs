//! Segment-level training with Adam, plateau scheduling and checkpoints.

mod checkpoint;
mod export;
mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use magtrack_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use export::{export_hidden_features, heading_bin, HEADING_BINS};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, PlateauScheduler, StepOutcome};

use crate::error::{Error, Result};
use crate::loss::{segment_losses, weighted_total, LossState, SegmentLosses};
use crate::preprocess::{augment_rotation, NormStats, SegmentSample};
use crate::tfbrt::{forward, init_state, Bound, ForwardCtx, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub loss_eps: f64,
    pub loss_warmup: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Windows per segment.
    pub segment_windows: usize,
    /// Samples between segment starts.
    pub segment_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 72,
            lr: 3e-4,
            plateau_factor: 0.75,
            plateau_patience: 10,
            max_epochs: 100,
            seed: 0,
            augment: true,
            loss_eps: crate::loss::ORIENTATION_EPS,
            loss_warmup: 50,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            segment_windows: 15,
            segment_step: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.segment_windows == 0 || self.segment_step == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch size, segment sizes and patience must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.loss_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr, loss eps and clip norm must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {} must lie in (0, 1)", self.plateau_factor)));
        }
        Ok(())
    }
}

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub l_v: f64,
    pub l_p: f64,
    pub l_o: f64,
    pub weights: [f64; 3],
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub kind: String,
    pub epoch: u64,
    pub steps: usize,
    pub skipped: usize,
    pub lr: f64,
    pub l_v: f64,
    pub l_p: f64,
    pub l_o: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

/// JSON-lines sink; a no-op when constructed without a file.
pub struct TrainLog {
    out: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn none() -> Self {
        Self { out: None }
    }

    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    /// Appends to an existing log, creating it if needed.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Fits input standardization and the output velocity scale on `segments`.
pub fn fit_normalization(params: &mut ModelParams, segments: &[SegmentSample]) -> Result<()> {
    let rows = segments.iter().flat_map(|s| &s.windows).flat_map(|w| &w.features);
    params.norm = NormStats::fit(rows)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for v in segments.iter().flat_map(|s| &s.windows).flat_map(|w| &w.gt_vel) {
        sum += v[0] * v[0] + v[1] * v[1];
        n += 2;
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    params.vel_scale = if rms > 1e-6 { rms } else { 1.0 };
    Ok(())
}

/// Records one segment's forward pass and averaged losses on `tape`.
pub fn segment_forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    segment: &SegmentSample,
    ctx: &ForwardCtx,
    first_window: usize,
    eps: f64,
) -> Result<SegmentLosses> {
    segment.check_contiguous()?;
    let inputs = segment
        .windows
        .iter()
        .map(|w| params.input_tensor(w).map(|t| tape.constant(t)))
        .collect::<Result<Vec<_>>>()?;
    let s0 = init_state(bound)?;
    let (outs, _) = forward(tape, bound, &params.config, &inputs, s0, ctx, first_window)?;
    let mut pairs = Vec::with_capacity(outs.len());
    for (o, w) in outs.iter().zip(&segment.windows) {
        let gt = Tensor::new(&[w.len(), 2], w.gt_vel.iter().flatten().copied().collect())?;
        pairs.push((o.velocity, tape.constant(gt)));
    }
    let dt = segment_dt(segment);
    segment_losses(tape, &pairs, dt, eps)
}

fn segment_dt(segment: &SegmentSample) -> f64 {
    let w = &segment.windows;
    let l = w[0].len();
    if w.len() > 1 {
        (w[1].t0 - w[0].t0) / l as f64
    } else {
        1.0 / crate::ingest::NOMINAL_FS
    }
}

fn collect_grads(tape: &Tape, bound: &Bound, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let mut g = tape.backward(loss)?;
    Ok(bound
        .vars
        .iter()
        .map(|(k, &v)| {
            let t = g.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (k.clone(), t)
        })
        .collect())
}

/// Per-parameter gradients, keyed like [`ModelParams::arrays`].
pub type Grads = BTreeMap<String, Tensor>;

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub loss_state: LossState,
    pub scheduler: PlateauScheduler,
    pub epoch: u64,
    pub step: u64,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            scheduler: PlateauScheduler::new(config.lr, config.plateau_factor, config.plateau_patience)?,
            loss_state: LossState::new(config.loss_warmup),
            adam: AdamState::default(),
            params,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        Ok(Self {
            params: ckpt.model,
            config: ckpt.train,
            adam: ckpt.adam,
            loss_state: ckpt.loss_state,
            scheduler: ckpt.scheduler,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.params.clone(),
            train: self.config.clone(),
            adam: self.adam.clone(),
            loss_state: self.loss_state.clone(),
            scheduler: self.scheduler.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    /// Rotation applied to the `index`-th segment of the current step.
    fn augment_angle(&self, index: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_a06d);
        rng.set_stream(self.step.wrapping_mul(1 << 20).wrapping_add(index as u64));
        rng.random_range(0.0..std::f64::consts::TAU)
    }

    /// Gradients of the CoV-weighted batch loss, the raw batch means, the
    /// weights and the weighted total. The loss statistics are updated with
    /// the current raw values before the weights are formed.
    pub fn batch_gradients(&mut self, batch: &[SegmentSample]) -> Result<(Grads, [f64; 3], [f64; 3], f64)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let segs: Vec<SegmentSample> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| if self.config.augment { augment_rotation(s, self.augment_angle(i)) } else { s.clone() })
            .collect();
        let ctx = ForwardCtx::train(self.config.seed, self.step);
        let stride = self.config.segment_windows.max(segs[0].windows.len());
        let eps = self.config.loss_eps;
        let inv = 1.0 / segs.len() as f64;
        let mut tape = Tape::new();

        if segs.len() == 1 {
            let bound = self.params.bind(&mut tape, true);
            let l = segment_forward(&mut tape, &self.params, &bound, &segs[0], &ctx, 0, eps)?;
            let raw = l.values(&tape);
            self.loss_state.update(raw)?;
            let w = self.loss_state.weights();
            let total = weighted_total(&mut tape, l.as_array(), w)?;
            let tv = tape.value(total).data()[0];
            return Ok((collect_grads(&tape, &bound, total)?, raw, w, tv));
        }

        // Pass 1: loss values only. Dropout masks are keyed, so pass 2 sees
        // the same network.
        let mut raw = [0.0; 3];
        for (i, s) in segs.iter().enumerate() {
            tape.reset();
            let bound = self.params.bind(&mut tape, false);
            let l = segment_forward(&mut tape, &self.params, &bound, s, &ctx, i * stride, eps)?;
            for (r, v) in raw.iter_mut().zip(l.values(&tape)) {
                *r += v * inv;
            }
        }
        self.loss_state.update(raw)?;
        let w = self.loss_state.weights();

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut tv = 0.0;
        for (i, s) in segs.iter().enumerate() {
            tape.reset();
            let bound = self.params.bind(&mut tape, true);
            let l = segment_forward(&mut tape, &self.params, &bound, s, &ctx, i * stride, eps)?;
            let total = weighted_total(&mut tape, l.as_array(), w)?;
            tv += tape.value(total).data()[0] * inv;
            for (k, g) in collect_grads(&tape, &bound, total)? {
                match grads.get_mut(&k) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * inv),
                    None => {
                        let mut g = g;
                        g.data_mut().iter_mut().for_each(|x| *x *= inv);
                        grads.insert(k, g);
                    }
                }
            }
        }
        Ok((grads, raw, w, tv))
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[SegmentSample]) -> Result<StepRecord> {
        let (mut grads, raw, weights, total) = self.batch_gradients(batch)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = self.scheduler.lr;
        let outcome = adam_step(&mut self.params, &grads, lr, &self.config.adam, &mut self.adam)?;
        let rec = StepRecord {
            kind: "step".into(),
            epoch: self.epoch,
            step: self.step,
            lr,
            l_v: raw[0],
            l_p: raw[1],
            l_o: raw[2],
            weights,
            total,
            grad_norm,
            skipped: outcome == StepOutcome::SkippedNonFinite,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Shuffles `segments` with a seed derived from the epoch number and runs
    /// one pass of optimizer steps. Validation, when given, feeds the
    /// learning-rate scheduler.
    pub fn train_epoch(&mut self, segments: &[SegmentSample], validation: Option<&[SegmentSample]>, log: &mut TrainLog) -> Result<EpochStats> {
        if segments.is_empty() {
            return Err(Error::invalid("training split has no segments"));
        }
        let mut order: Vec<usize> = (0..segments.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let (mut steps, mut skipped) = (0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<SegmentSample> = chunk.iter().map(|&i| segments[i].clone()).collect();
            let rec = self.train_step(&batch)?;
            log.write(&rec)?;
            for (s, v) in sums.iter_mut().zip([rec.l_v, rec.l_p, rec.l_o, rec.total]) {
                *s += v;
            }
            steps += 1;
            skipped += rec.skipped as usize;
        }
        let val_total = match validation {
            Some(v) if !v.is_empty() => {
                let val = validation_loss(&self.params, v, &self.loss_state, self.config.loss_eps)?;
                self.scheduler.observe(val);
                Some(val)
            }
            _ => None,
        };
        let n = steps as f64;
        let stats = EpochStats {
            kind: "epoch".into(),
            epoch: self.epoch,
            steps,
            skipped,
            lr: self.scheduler.lr,
            l_v: sums[0] / n,
            l_p: sums[1] / n,
            l_o: sums[2] / n,
            total: sums[3] / n,
            val_total,
        };
        log.write(&stats)?;
        self.epoch += 1;
        Ok(stats)
    }
}

/// Mean of the weighted total over `segments` in eval mode, using the current
/// weights of `state` without updating it.
pub fn validation_loss(params: &ModelParams, segments: &[SegmentSample], state: &LossState, eps: f64) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::invalid("validation split has no segments"));
    }
    let w = state.weights();
    let mut tape = Tape::new();
    let mut total = 0.0;
    for s in segments {
        tape.reset();
        let bound = params.bind(&mut tape, false);
        let l = segment_forward(&mut tape, params, &bound, s, &ForwardCtx::eval(), 0, eps)?;
        let v = l.values(&tape);
        total += w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
    }
    Ok(total / segments.len() as f64)
}

/// Raw `[L_v, L_p, L_o]` averaged over `segments` in eval mode.
pub fn evaluate_losses(params: &ModelParams, segments: &[SegmentSample], eps: f64) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let mut acc = [0.0; 3];
    for s in segments {
        tape.reset();
        let bound = params.bind(&mut tape, false);
        let l = segment_forward(&mut tape, params, &bound, s, &ForwardCtx::eval(), 0, eps)?;
        for (a, v) in acc.iter_mut().zip(l.values(&tape)) {
            *a += v / segments.len() as f64;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests;
