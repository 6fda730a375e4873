//! Sequence records, CSV persistence and dataset manifests.
//!
//! A sequence file is UTF-8 CSV with the header
//!
//! ```text
//! t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,mag_x,mag_y,mag_z,qw,qx,qy,qz,pos_x,pos_y,pos_z
//! ```
//!
//! where the three `pos_*` columns may be omitted as a group.

mod manifest;
mod synth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Quaternion, Vec3};

pub use manifest::{split_manifest, DatasetManifest, Split};
pub use synth::{synth_sequence, synth_with_truth, DistortionPatch, SynthParams, SynthTruth};

/// Nominal sample rate.
pub const NOMINAL_FS: f64 = 200.0;

/// Allowed deviation of any sample interval from the sequence's nominal one.
pub const RATE_TOLERANCE: f64 = 0.05;

const BASE_HEADER: [&str; 14] = [
    "t", "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "mag_x", "mag_y", "mag_z", "qw", "qx", "qy", "qz",
];
const POS_HEADER: [&str; 3] = ["pos_x", "pos_y", "pos_z"];

/// One timestamped IMU reading. Vectors are body-frame except `gt_pos`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force, m/s², gravity included.
    pub acc: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
    /// Magnetic field, µT.
    pub mag: Vec3,
    /// Body-to-world orientation.
    pub orient: Quaternion,
    /// Ground-truth world position, m.
    pub gt_pos: Option<Vec3>,
}

/// One recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    samples: Vec<ImuSample>,
    fs: f64,
}

impl SequenceRecord {
    /// Validates timestamps, finiteness, orientation norms and ground-truth
    /// presence. The sample rate is taken from the median interval.
    pub fn new(id: impl Into<String>, samples: Vec<ImuSample>) -> Result<Self> {
        let id = id.into();
        if samples.is_empty() {
            return Err(Error::invalid(format!("sequence {id} has no samples")));
        }
        let has_pos = samples[0].gt_pos.is_some();
        for (i, s) in samples.iter().enumerate() {
            let finite = s.t.is_finite()
                && s.acc.is_finite()
                && s.gyro.is_finite()
                && s.mag.is_finite()
                && s.orient.is_finite()
                && s.gt_pos.is_none_or(|p| p.is_finite());
            if !finite {
                return Err(Error::invalid(format!("sequence {id}: non-finite value at sample {i}")));
            }
            if (s.orient.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("sequence {id}: orientation at sample {i} is not unit-norm")));
            }
            if s.gt_pos.is_some() != has_pos {
                return Err(Error::invalid(format!("sequence {id}: ground truth missing at sample {i}")));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(Error::invalid(format!("sequence {id}: time not increasing at sample {i}")));
            }
        }
        let fs = if samples.len() > 1 {
            let mut dts: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
            dts.sort_by(f64::total_cmp);
            let nominal = dts[dts.len() / 2];
            if let Some(i) = samples
                .windows(2)
                .position(|w| ((w[1].t - w[0].t) / nominal - 1.0).abs() > RATE_TOLERANCE)
            {
                return Err(Error::invalid(format!(
                    "sequence {id}: interval after sample {i} deviates more than {}% from {nominal} s",
                    RATE_TOLERANCE * 100.0
                )));
            }
            1.0 / nominal
        } else {
            NOMINAL_FS
        };
        Ok(Self { id, samples, fs })
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample rate in Hz.
    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn has_ground_truth(&self) -> bool {
        self.samples[0].gt_pos.is_some()
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].t - self.samples[0].t
    }

    /// Applies `f` to every sample and revalidates.
    pub fn map_samples(&self, f: impl FnMut(&ImuSample) -> ImuSample) -> Result<Self> {
        Self::new(self.id.clone(), self.samples.iter().map(f).collect())
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.id.clone(), self.samples[..n.min(self.samples.len())].to_vec())
    }
}

fn parse_err(path: &Path, row: usize, column: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        msg: msg.into(),
    }
}

/// Reads a sequence CSV. Rows are numbered from 1 for the first data line.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<SequenceRecord> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    for (i, name) in BASE_HEADER.iter().enumerate() {
        if headers.get(i).map(String::as_str) != Some(*name) {
            return Err(parse_err(path, 0, name, "missing or misplaced column"));
        }
    }
    let has_pos = match headers.len() {
        14 => false,
        17 if headers[14..] == POS_HEADER => true,
        _ => {
            let col = headers.get(14).cloned().unwrap_or_default();
            return Err(parse_err(path, 0, &col, "expected no position columns or exactly pos_x,pos_y,pos_z"));
        }
    };

    let mut samples = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != headers.len() {
            return Err(parse_err(path, row, "*", format!("expected {} fields, got {}", headers.len(), record.len())));
        }
        let mut vals = [0.0; 17];
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, row, &headers[c], format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, row, &headers[c], "non-finite value"));
            }
            vals[c] = v;
        }
        if let Some(prev) = samples.last().map(|s: &ImuSample| s.t) {
            if vals[0] <= prev {
                return Err(parse_err(path, row, "t", format!("time {} does not increase after {prev}", vals[0])));
            }
        }
        let orient = Quaternion::new(vals[10], vals[11], vals[12], vals[13]);
        if (orient.norm() - 1.0).abs() > 1e-6 {
            return Err(parse_err(path, row, "qw", "orientation is not unit-norm"));
        }
        samples.push(ImuSample {
            t: vals[0],
            acc: Vec3::new(vals[1], vals[2], vals[3]),
            gyro: Vec3::new(vals[4], vals[5], vals[6]),
            mag: Vec3::new(vals[7], vals[8], vals[9]),
            orient,
            gt_pos: has_pos.then(|| Vec3::new(vals[14], vals[15], vals[16])),
        });
    }
    if samples.is_empty() {
        return Err(parse_err(path, 1, "*", "no samples"));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SequenceRecord::new(id, samples).map_err(|e| parse_err(path, 0, "*", e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, row, "*", format!("{other:?}")),
    }
}

/// Writes a sequence CSV; values use shortest round-trip formatting.
pub fn save_sequence(record: &SequenceRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if record.is_empty() {
        return Err(Error::invalid("refusing to write a sequence without samples"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let has_pos = record.has_ground_truth();
    let mut header = BASE_HEADER.join(",");
    if has_pos {
        header.push(',');
        header.push_str(&POS_HEADER.join(","));
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for s in record.samples() {
        let q = s.orient;
        write!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t, s.acc.x, s.acc.y, s.acc.z, s.gyro.x, s.gyro.y, s.gyro.z, s.mag.x, s.mag.y, s.mag.z, q.w, q.x, q.y, q.z
        )
        .map_err(io)?;
        if let Some(p) = s.gt_pos {
            write!(w, ",{},{},{}", p.x, p.y, p.z).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
