use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::FeatureWindow;
use crate::tfbrt::ModelParams;

pub const HEADING_BINS: usize = 10;

/// Bin of a planar direction: `[0°, 36°)` is 0, …, `[324°, 360°)` is 9.
pub fn heading_bin(v: [f64; 2]) -> usize {
    let deg = v[1].atan2(v[0]).to_degrees().rem_euclid(360.0);
    ((deg / (360.0 / HEADING_BINS as f64)) as usize).min(HEADING_BINS - 1)
}

/// Writes one CSV row per window: identifiers, the heading bin of the mean
/// ground-truth velocity, and the time-averaged activations that feed the
/// output projection. Each sequence's windows are run in groups of `chunk`
/// from the initial state. Returns the number of rows.
pub fn export_hidden_features(params: &ModelParams, windows: &[FeatureWindow], chunk: usize, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let mut preds = Vec::with_capacity(windows.len());
    for run in windows.chunk_by(|a, b| a.sequence == b.sequence) {
        preds.extend(params.predict(run, chunk)?);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let d = params.config.hidden;
    let mut header = String::from("sequence,window,start,bin");
    for k in 0..d {
        header.push_str(&format!(",h{k}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for (win, (_, hidden)) in windows.iter().zip(&preds) {
        let n = win.gt_vel.len() as f64;
        let mean_v = win.gt_vel.iter().fold([0.0; 2], |a, v| [a[0] + v[0] / n, a[1] + v[1] / n]);
        let l = hidden.shape()[0] as f64;
        let mut feat = vec![0.0; d];
        for row in hidden.data().chunks(d) {
            for (f, x) in feat.iter_mut().zip(row) {
                *f += x / l;
            }
        }
        write!(w, "{},{},{},{}", win.sequence, win.index, win.start, heading_bin(mean_v)).map_err(io)?;
        for f in feat {
            write!(w, ",{f}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(windows.len())
}
