//! Feature extraction, windowing and rotation augmentation.
//!
//! Features per sample are `[a^g(3), w^g(3), ṁ^b(3)]`: gravity-free world
//! acceleration, world angular rate and the time derivative of the body-frame
//! magnetometer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotate_planar, Vec3};
use crate::ingest::SequenceRecord;

pub const FEATURES: usize = 9;

/// Options shared by feature extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    /// Zero-phase first-order low-pass applied to the magnetometer before
    /// differentiation, in Hz. `None` disables it.
    pub mag_lowpass: Option<f64>,
    /// Half-span, in samples, of the ground-truth velocity difference.
    pub gt_stride: usize,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            mag_lowpass: None,
            gt_stride: 1,
        }
    }
}

/// Rotates body acceleration and rate into the world frame and removes gravity
/// from the acceleration.
pub fn to_heading_agnostic(record: &SequenceRecord) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let mut acc = Vec::with_capacity(record.len());
    let mut gyro = Vec::with_capacity(record.len());
    for (i, s) in record.samples().iter().enumerate() {
        if !s.orient.is_finite() || (s.orient.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("sample {i} of {} lacks a valid orientation", record.id)));
        }
        acc.push(s.orient.rotate(s.acc) - Vec3::gravity());
        gyro.push(s.orient.rotate(s.gyro));
    }
    Ok((acc, gyro))
}

fn lowpass_zero_phase(x: &[Vec3], cutoff: f64, fs: f64) -> Vec<Vec3> {
    let rc = 1.0 / (std::f64::consts::TAU * cutoff);
    let dt = 1.0 / fs;
    let a = dt / (rc + dt);
    let mut fwd = Vec::with_capacity(x.len());
    let mut y = x[0];
    for &v in x {
        y = y + (v - y) * a;
        fwd.push(y);
    }
    let mut y = fwd[fwd.len() - 1];
    for v in fwd.iter_mut().rev() {
        y = y + (*v - y) * a;
        *v = y;
    }
    fwd
}

/// Derivative of the body-frame magnetometer in µT/s: central differences
/// inside, one-sided differences at the two ends.
pub fn mag_body_derivative(record: &SequenceRecord, lowpass: Option<f64>) -> Result<Vec<Vec3>> {
    let n = record.len();
    if n < 3 {
        return Err(Error::invalid(format!("magnetometer derivative needs 3 samples, got {n}")));
    }
    let raw: Vec<Vec3> = record.samples().iter().map(|s| s.mag).collect();
    let m = match lowpass {
        Some(fc) if fc > 0.0 && fc.is_finite() => lowpass_zero_phase(&raw, fc, record.fs()),
        Some(fc) => return Err(Error::invalid(format!("low-pass cutoff must be positive, got {fc}"))),
        None => raw,
    };
    let fs = record.fs();
    let mut out = Vec::with_capacity(n);
    out.push((m[1] - m[0]) * fs);
    for i in 1..n - 1 {
        out.push((m[i + 1] - m[i - 1]) * (0.5 * fs));
    }
    out.push((m[n - 1] - m[n - 2]) * fs);
    Ok(out)
}

/// Planar world velocity from ground-truth positions by differencing over
/// `stride` samples either side, narrowing the span at the sequence ends.
pub fn gt_velocity(record: &SequenceRecord, stride: usize) -> Result<Vec<[f64; 2]>> {
    if stride == 0 {
        return Err(Error::invalid("velocity stride must be positive"));
    }
    let pos: Vec<Vec3> = record
        .samples()
        .iter()
        .map(|s| s.gt_pos)
        .collect::<Option<_>>()
        .ok_or_else(|| Error::invalid(format!("sequence {} has no ground-truth positions", record.id)))?;
    let n = pos.len();
    if n < 2 {
        return Err(Error::invalid("velocity needs at least 2 samples"));
    }
    let t: Vec<f64> = record.samples().iter().map(|s| s.t).collect();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(stride);
            let hi = (i + stride).min(n - 1);
            let d = pos[hi] - pos[lo];
            let span = t[hi] - t[lo];
            [d.x / span, d.y / span]
        })
        .collect())
}

/// Per-sample features and targets of a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatures {
    pub id: String,
    pub fs: f64,
    pub t: Vec<f64>,
    pub features: Vec<[f64; FEATURES]>,
    pub gt_vel: Option<Vec<[f64; 2]>>,
    pub gt_pos: Option<Vec<[f64; 2]>>,
}

impl SequenceFeatures {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn compute_features(record: &SequenceRecord, opts: &FeatureOptions) -> Result<SequenceFeatures> {
    let (acc, gyro) = to_heading_agnostic(record)?;
    let dmag = mag_body_derivative(record, opts.mag_lowpass)?;
    let features = (0..record.len())
        .map(|i| {
            let (a, w, m) = (acc[i], gyro[i], dmag[i]);
            [a.x, a.y, a.z, w.x, w.y, w.z, m.x, m.y, m.z]
        })
        .collect();
    let (gt_vel, gt_pos) = if record.has_ground_truth() {
        let pos = record
            .samples()
            .iter()
            .map(|s| s.gt_pos.map(|p| [p.x, p.y]).unwrap_or_default())
            .collect();
        (Some(gt_velocity(record, opts.gt_stride)?), Some(pos))
    } else {
        (None, None)
    };
    Ok(SequenceFeatures {
        id: record.id.clone(),
        fs: record.fs(),
        t: record.samples().iter().map(|s| s.t).collect(),
        features,
        gt_vel,
        gt_pos,
    })
}

/// An `L × 9` slice of features with aligned planar velocity targets
/// (zeros when the sequence has no ground truth).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub features: Vec<[f64; FEATURES]>,
    pub gt_vel: Vec<[f64; 2]>,
    pub t0: f64,
    pub sequence: String,
    pub index: usize,
    /// Offset of the first sample within the sequence.
    pub start: usize,
}

impl FeatureWindow {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn window_at(seq: &SequenceFeatures, start: usize, len: usize, index: usize) -> FeatureWindow {
    FeatureWindow {
        features: seq.features[start..start + len].to_vec(),
        gt_vel: match &seq.gt_vel {
            Some(v) => v[start..start + len].to_vec(),
            None => vec![[0.0; 2]; len],
        },
        t0: seq.t[start],
        sequence: seq.id.clone(),
        index,
        start,
    }
}

/// Windows of length `len` at offsets `0, step, 2·step, …`.
pub fn windows_from(seq: &SequenceFeatures, len: usize, step: usize) -> Result<Vec<FeatureWindow>> {
    if len == 0 || step == 0 {
        return Err(Error::invalid(format!("window length and step must be positive, got {len} and {step}")));
    }
    if seq.len() < len {
        return Ok(Vec::new());
    }
    Ok((0..=(seq.len() - len) / step)
        .map(|k| window_at(seq, k * step, len, k))
        .collect())
}

pub fn make_windows(record: &SequenceRecord, len: usize, step: usize) -> Result<Vec<FeatureWindow>> {
    windows_from(&compute_features(record, &FeatureOptions::default())?, len, step)
}

/// S adjacent windows of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSample {
    pub windows: Vec<FeatureWindow>,
}

impl SegmentSample {
    pub fn window_len(&self) -> usize {
        self.windows.first().map_or(0, FeatureWindow::len)
    }

    /// Fails unless the windows have equal length and tile time without gaps.
    pub fn check_contiguous(&self) -> Result<()> {
        let l = self.window_len();
        if l == 0 {
            return Err(Error::invalid("segment has no windows"));
        }
        for w in self.windows.windows(2) {
            if w[1].len() != l || w[1].sequence != w[0].sequence || w[1].start != w[0].start + l {
                return Err(Error::invalid(format!(
                    "windows at {} and {} of {} are not adjacent",
                    w[0].start, w[1].start, w[0].sequence
                )));
            }
        }
        Ok(())
    }
}

/// Segments of `count` adjacent windows of length `len`, starting every
/// `seg_step` samples.
pub fn segments_from(seq: &SequenceFeatures, len: usize, count: usize, seg_step: usize) -> Result<Vec<SegmentSample>> {
    if len == 0 || count == 0 || seg_step == 0 {
        return Err(Error::invalid("segment length, window count and step must be positive"));
    }
    let span = len * count;
    if seq.len() < span {
        return Err(Error::invalid(format!(
            "sequence {} has {} samples, fewer than one {len}x{count} segment",
            seq.id,
            seq.len()
        )));
    }
    Ok((0..=(seq.len() - span) / seg_step)
        .map(|k| {
            let start = k * seg_step;
            SegmentSample {
                windows: (0..count).map(|j| window_at(seq, start + j * len, len, j)).collect(),
            }
        })
        .collect())
}

pub fn make_segments(record: &SequenceRecord, len: usize, count: usize, seg_step: usize) -> Result<Vec<SegmentSample>> {
    segments_from(&compute_features(record, &FeatureOptions::default())?, len, count, seg_step)
}

/// Rotates the planar parts of `a^g`, `w^g` and the velocity targets by `phi`
/// about the world vertical. `ṁ^b` is body-frame and stays as is.
pub fn augment_rotation(segment: &SegmentSample, phi: f64) -> SegmentSample {
    let rotate_row = |r: &[f64; FEATURES]| {
        let a = rotate_planar([r[0], r[1]], phi);
        let w = rotate_planar([r[3], r[4]], phi);
        [a[0], a[1], r[2], w[0], w[1], r[5], r[6], r[7], r[8]]
    };
    SegmentSample {
        windows: segment
            .windows
            .iter()
            .map(|w| FeatureWindow {
                features: w.features.iter().map(rotate_row).collect(),
                gt_vel: w.gt_vel.iter().map(|&v| rotate_planar(v, phi)).collect(),
                ..w.clone()
            })
            .collect(),
    }
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; FEATURES],
            std: [1.0; FEATURES],
        }
    }
}

impl NormStats {
    /// Mean and population standard deviation over all rows. Channels with
    /// negligible spread get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64; FEATURES]>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = [0.0; FEATURES];
        let mut m2 = [0.0; FEATURES];
        for r in rows {
            n += 1;
            for c in 0..FEATURES {
                let d = r[c] - mean[c];
                mean[c] += d / n as f64;
                m2[c] += d * (r[c] - mean[c]);
            }
        }
        if n == 0 {
            return Err(Error::invalid("normalization needs at least one row"));
        }
        let std = m2.map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-8 {
                s
            } else {
                1.0
            }
        });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64; FEATURES]) -> [f64; FEATURES] {
        std::array::from_fn(|c| (row[c] - self.mean[c]) / self.std[c])
    }
}
