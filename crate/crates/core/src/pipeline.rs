//! End-to-end steps shared by the command-line tool and the examples:
//! dataset synthesis, training runs, tracking, evaluation and exports.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{ekf_track, ndi_track};
use crate::config::{RunConfig, SynthSetConfig};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::ingest::{load_sequence, save_sequence, split_manifest, synth_sequence, DatasetManifest, SequenceRecord, Split, SynthParams};
use crate::metrics::{evaluate, integrate_velocity, summarize, EvalInput, MetricsReport, MetricsSummary};
use crate::preprocess::{compute_features, segments_from, windows_from, SegmentSample, SequenceFeatures};
use crate::tfbrt::ModelParams;
use crate::train::{export_hidden_features, fit_normalization, Checkpoint, EpochStats, TrainLog, Trainer};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tfbrt,
    Ndi,
    Ekf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tfbrt => "tfbrt",
            Method::Ndi => "ndi",
            Method::Ekf => "ekf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Tfbrt, Method::Ndi, Method::Ekf]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}; expected tfbrt, ndi or ekf")))
    }
}

/// Parameters of the `index`-th sequence of a synthetic dataset: its own
/// speed, sensor biases and generator seed.
pub fn synth_params_for(set: &SynthSetConfig, seed: u64, index: usize) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let speed = if set.speed_max > set.speed_min {
        rng.random_range(set.speed_min..=set.speed_max)
    } else {
        set.speed_min
    };
    let mut draw = |std: f64| {
        let n = Normal::new(0.0, std).expect("spread validated as non-negative");
        Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng))
    };
    let bias_acc = set.params.bias_acc + draw(set.acc_bias_std);
    let bias_gyro = set.params.bias_gyro + draw(set.gyro_bias_std);
    SynthParams {
        id: Some(format!("seq_{index:03}")),
        speed,
        bias_acc,
        bias_gyro,
        seed: rng.random(),
        ..set.params.clone()
    }
}

/// Writes `set.count` sequences and a split manifest into `dir`.
pub fn synth_dataset(set: &SynthSetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    if set.count == 0 {
        return Err(Error::invalid("synth needs at least one sequence"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(set.count);
    for i in 0..set.count {
        let p = synth_params_for(set, seed, i);
        let name = PathBuf::from(format!("{}.csv", p.id.as_deref().unwrap_or("seq")));
        save_sequence(&synth_sequence(&p)?, dir.join(&name))?;
        names.push(name);
    }
    let manifest = split_manifest(&names, set.ratios, seed)?;
    let path = dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    DatasetManifest::load(path)
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<SequenceRecord>> {
    let paths = manifest.get(split);
    if paths.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    paths.iter().map(load_sequence).collect()
}

pub fn manifest_from_config(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    DatasetManifest::load(path)
}

pub fn features(record: &SequenceRecord, cfg: &RunConfig) -> Result<SequenceFeatures> {
    compute_features(record, &cfg.features)
}

/// Training segments from every record, using the model window and the
/// segment shape of the training config.
pub fn build_segments(records: &[SequenceRecord], cfg: &RunConfig) -> Result<Vec<SegmentSample>> {
    let mut out = Vec::new();
    for r in records {
        let f = features(r, cfg)?;
        out.extend(segments_from(&f, cfg.model.window, cfg.train.segment_windows, cfg.train.segment_step)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub best: PathBuf,
    pub last: PathBuf,
}

/// Trains on the manifest's train split, validating on its validation split.
/// Writes `best.ckpt`, `last.ckpt`, the JSON-lines log and the effective
/// config into `out`. With `resume`, continues from `out/last.ckpt`.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = manifest_from_config(cfg)?;
    let train = build_segments(&load_split(&manifest, Split::Train)?, cfg)?;
    let val = build_segments(&load_split(&manifest, Split::Validation)?, cfg)?;
    if train.is_empty() {
        return Err(Error::invalid("training split yields no segments; sequences are shorter than one segment"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (best, last) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));
    let (mut trainer, mut log) = if resume {
        let ckpt = Checkpoint::load(&last)?;
        ckpt.require_config(&cfg.model)?;
        let mut t = Trainer::from_checkpoint(ckpt)?;
        // The stored config governs the run; only the epoch budget may grow.
        t.config.max_epochs = cfg.train.max_epochs;
        (t, TrainLog::append(out.join(TRAIN_LOG))?)
    } else {
        let mut params = ModelParams::init(&cfg.model, cfg.train.seed)?;
        fit_normalization(&mut params, &train)?;
        (Trainer::new(params, cfg.train.clone())?, TrainLog::create(out.join(TRAIN_LOG))?)
    };
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()?).map_err(|e| Error::io(&cfg_path, e))?;
    let val = (!val.is_empty()).then_some(val.as_slice());
    let mut epochs = Vec::new();
    while (trainer.epoch as usize) < trainer.config.max_epochs {
        let stats = trainer.train_epoch(&train, val, &mut log)?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&last)?;
        let improved = match stats.val_total {
            Some(v) => trainer.scheduler.best == Some(v),
            None => true,
        };
        if improved || !best.exists() {
            ckpt.save(&best)?;
        }
        epochs.push(stats);
    }
    if !best.exists() {
        trainer.checkpoint().save(&best)?;
    }
    Ok(TrainOutcome { epochs, best, last })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    Ok(Checkpoint::load(path)?.model)
}

/// Planar estimate for one sequence, aligned with ground truth when present.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub sequence: String,
    pub method: Method,
    pub fs: f64,
    pub t: Vec<f64>,
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub gt_pos: Option<Vec<[f64; 2]>>,
    pub gt_vel: Option<Vec<[f64; 2]>>,
}

/// Largest multiple of `window` not exceeding `n`.
pub fn processed_len(n: usize, window: usize) -> usize {
    n / window * window
}

/// Runs `method` on `record`. TF-BRT consumes whole windows only, so its
/// output stops at the last full window; positions start at the first
/// ground-truth position (or the origin).
pub fn track(method: Method, model: Option<&ModelParams>, record: &SequenceRecord, cfg: &RunConfig) -> Result<TrackResult> {
    let feats = features(record, cfg)?;
    let origin = feats.gt_pos.as_ref().map_or([0.0; 2], |g| g[0]);
    let (n, pos, vel) = match method {
        Method::Tfbrt => {
            let model = model.ok_or_else(|| Error::invalid("tfbrt tracking needs a checkpoint"))?;
            let l = model.config.window;
            let n = processed_len(record.len(), l);
            if n == 0 {
                return Err(Error::invalid(format!(
                    "sequence {} has {} samples, fewer than one {l}-sample window",
                    record.id,
                    record.len()
                )));
            }
            let windows = windows_from(&feats, l, l)?;
            let vel: Vec<[f64; 2]> = model.predict(&windows, cfg.eval.chunk)?.into_iter().flat_map(|(v, _)| v).collect();
            let pos = integrate_velocity(&vel, record.dt(), origin)?.pos;
            (n, pos, vel)
        }
        Method::Ndi | Method::Ekf => {
            let tr = if method == Method::Ndi { ndi_track(record)? } else { ekf_track(record, &cfg.ekf)? };
            let pos = tr.pos.iter().map(|p| [p[0] + origin[0], p[1] + origin[1]]).collect();
            (record.len(), pos, tr.vel)
        }
    };
    Ok(TrackResult {
        sequence: record.id.clone(),
        method,
        fs: record.fs(),
        t: feats.t[..n].to_vec(),
        pos,
        vel,
        gt_pos: feats.gt_pos.map(|g| g[..n].to_vec()),
        gt_vel: feats.gt_vel.map(|g| g[..n].to_vec()),
    })
}

impl TrackResult {
    pub fn metrics(&self, cfg: &RunConfig) -> Result<MetricsReport> {
        let (Some(gp), Some(gv)) = (&self.gt_pos, &self.gt_vel) else {
            return Err(Error::invalid(format!("sequence {} has no ground truth to score against", self.sequence)));
        };
        let x = EvalInput {
            pred_pos: &self.pos,
            pred_vel: &self.vel,
            gt_pos: gp,
            gt_vel: gv,
            fs: self.fs,
        };
        evaluate(&self.sequence, self.method.name(), &x, cfg.eval.aye_eps, cfg.eval.rte_interval)
    }

    /// CSV with columns `t,x,y,vx,vy`, plus `gx,gy` when ground truth exists.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let wr = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
        let mut header = vec!["t", "x", "y", "vx", "vy"];
        if self.gt_pos.is_some() {
            header.extend(["gx", "gy"]);
        }
        w.write_record(&header).map_err(wr)?;
        for i in 0..self.pos.len() {
            let mut row = vec![self.t[i], self.pos[i][0], self.pos[i][1], self.vel[i][0], self.vel[i][1]];
            if let Some(g) = &self.gt_pos {
                row.extend(g[i]);
            }
            w.write_record(row.iter().map(f64::to_string)).map_err(wr)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<MetricsReport>,
    pub aggregate: MetricsSummary,
}

/// Scores `method` on every record. Baselines are cut to the same whole
/// number of windows as the model so that all methods see the same samples.
pub fn evaluate_records(method: Method, model: Option<&ModelParams>, records: &[SequenceRecord], cfg: &RunConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let window = model.map_or(cfg.model.window, |m| m.config.window);
    let sequences = records
        .par_iter()
        .map(|r| {
            let n = processed_len(r.len(), window);
            let r = if method == Method::Tfbrt || n == r.len() || n < 2 { r.clone() } else { r.truncated(n)? };
            track(method, model, &r, cfg)?.metrics(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = summarize(&sequences)?;
    Ok(EvalReport { sequences, aggregate })
}

/// One CSV row per sample: time, the nine model inputs and, when present,
/// the ground-truth planar velocity.
pub fn write_features(f: &SequenceFeatures, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let names = ["ax", "ay", "az", "wx", "wy", "wz", "dmx", "dmy", "dmz"];
    write!(w, "t,{}", names.join(",")).map_err(io)?;
    if f.gt_vel.is_some() {
        write!(w, ",gvx,gvy").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for i in 0..f.len() {
        write!(w, "{}", f.t[i]).map_err(io)?;
        for x in f.features[i] {
            write!(w, ",{x}").map_err(io)?;
        }
        if let Some(v) = &f.gt_vel {
            write!(w, ",{},{}", v[i][0], v[i][1]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Hidden-feature table for every record; see [`export_hidden_features`].
pub fn export_features(model: &ModelParams, records: &[SequenceRecord], cfg: &RunConfig, path: impl AsRef<Path>) -> Result<usize> {
    let mut windows = Vec::new();
    for r in records {
        let l = model.config.window;
        windows.extend(windows_from(&features(r, cfg)?, l, l)?);
    }
    if windows.is_empty() {
        return Err(Error::invalid("no full windows to export"));
    }
    export_hidden_features(model, &windows, cfg.eval.chunk, path)
}
