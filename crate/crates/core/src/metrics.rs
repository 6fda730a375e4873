//! Trajectory reconstruction and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RTE_INTERVAL: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub pos: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(t: Vec<f64>, pos: Vec<[f64; 2]>) -> Result<Self> {
        if t.len() != pos.len() || t.is_empty() {
            return Err(Error::invalid(format!("trajectory needs matching non-empty series, got {} times and {} positions", t.len(), pos.len())));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("trajectory times must increase"));
        }
        if pos.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("trajectory has non-finite positions".into()));
        }
        Ok(Self { t, pos })
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Cumulative trapezoid integral of `vel` starting at `origin`, with
/// `t_i = i·dt`.
pub fn integrate_velocity(vel: &[[f64; 2]], dt: f64, origin: [f64; 2]) -> Result<Trajectory> {
    if vel.is_empty() {
        return Err(Error::invalid("cannot integrate an empty velocity series"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let mut pos = Vec::with_capacity(vel.len());
    let mut p = origin;
    pos.push(p);
    for w in vel.windows(2) {
        p[0] += 0.5 * dt * (w[0][0] + w[1][0]);
        p[1] += 0.5 * dt * (w[0][1] + w[1][1]);
        pos.push(p);
    }
    Trajectory::new((0..vel.len()).map(|i| i as f64 * dt).collect(), pos)
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: predicted {a}, ground truth {b}")));
    }
    if a == 0 {
        return Err(Error::invalid("empty trajectory"));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `pred` translated so that it starts where `gt` starts.
pub fn rebase(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let off = [gt[0][0] - pred[0][0], gt[0][1] - pred[0][1]];
    pred.iter().map(|p| [p[0] + off[0], p[1] + off[1]]).collect()
}

/// Absolute trajectory error after rebasing, m.
pub fn ate(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let pred = rebase(pred, gt);
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| dist(*p, *g).powi(2)).sum();
    Ok((s / gt.len() as f64).sqrt())
}

/// Relative trajectory error over `interval` seconds at sample rate `fs`, m.
pub fn rte(pred: &[[f64; 2]], gt: &[[f64; 2]], fs: f64, interval: f64) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    if !(fs > 0.0 && interval > 0.0) {
        return Err(Error::invalid(format!("rte needs positive fs and interval, got {fs} and {interval}")));
    }
    let delta = (interval * fs).round() as usize;
    if delta == 0 || delta >= gt.len() {
        return Err(Error::invalid(format!(
            "sequence of {:.1} s is shorter than the {interval} s RTE interval; report ATE instead",
            (gt.len() - 1) as f64 / fs
        )));
    }
    let n = gt.len() - delta;
    let s: f64 = (0..n)
        .map(|i| {
            let dp = [pred[i + delta][0] - pred[i][0], pred[i + delta][1] - pred[i][1]];
            let dg = [gt[i + delta][0] - gt[i][0], gt[i + delta][1] - gt[i][1]];
            dist(dp, dg).powi(2)
        })
        .sum();
    Ok((s / n as f64).sqrt())
}

/// Polyline length, m.
pub fn path_length(pos: &[[f64; 2]]) -> f64 {
    pos.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Final drift over ground-truth path length, after rebasing.
pub fn pde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let d = path_length(gt);
    if !(d > 0.0) {
        return Err(Error::invalid("ground-truth path has zero length"));
    }
    let pred = rebase(pred, gt);
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]) / d)
}

/// Heading error between velocity series: RMSE of the signed angle in
/// degrees, and RMSE of the unit-vector difference. Rows with
/// `‖v^g‖ < eps` are skipped.
pub fn aye(pred: &[[f64; 2]], gt: &[[f64; 2]], eps: f64) -> Result<(f64, f64)> {
    same_len(pred.len(), gt.len())?;
    let (mut sa, mut su, mut n) = (0.0, 0.0, 0usize);
    for (v, g) in pred.iter().zip(gt) {
        let ng = g[0].hypot(g[1]);
        if ng < eps {
            continue;
        }
        let nv = v[0].hypot(v[1]).max(f64::MIN_POSITIVE);
        let ang = (v[0] * g[1] - v[1] * g[0]).atan2(v[0] * g[0] + v[1] * g[1]);
        sa += ang.to_degrees().powi(2);
        su += dist([v[0] / nv, v[1] / nv], [g[0] / ng, g[1] / ng]).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!("all rows have ground-truth speed below {eps}")));
    }
    Ok(((sa / n as f64).sqrt(), (su / n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sequence: String,
    pub method: String,
    pub ate: f64,
    /// `None` when the sequence is shorter than the interval.
    pub rte: Option<f64>,
    pub pde: f64,
    pub aye_deg: f64,
    pub aye_unitvec: f64,
    pub length: f64,
    pub duration: f64,
}

/// Inputs to [`evaluate`]: aligned prediction and ground truth at rate `fs`.
pub struct EvalInput<'a> {
    pub pred_pos: &'a [[f64; 2]],
    pub pred_vel: &'a [[f64; 2]],
    pub gt_pos: &'a [[f64; 2]],
    pub gt_vel: &'a [[f64; 2]],
    pub fs: f64,
}

pub fn evaluate(sequence: &str, method: &str, x: &EvalInput<'_>, eps: f64, rte_interval: f64) -> Result<MetricsReport> {
    let (aye_deg, aye_unitvec) = aye(x.pred_vel, x.gt_vel, eps)?;
    let rte = match rte(x.pred_pos, x.gt_pos, x.fs, rte_interval) {
        Ok(v) => Some(v),
        Err(Error::InvalidArgument(_)) if (x.gt_pos.len() as f64) <= rte_interval * x.fs => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        sequence: sequence.to_string(),
        method: method.to_string(),
        ate: ate(x.pred_pos, x.gt_pos)?,
        rte,
        pde: pde(x.pred_pos, x.gt_pos)?,
        aye_deg,
        aye_unitvec,
        length: path_length(x.gt_pos),
        duration: (x.gt_pos.len() - 1) as f64 / x.fs,
    })
}

/// Means over sequences; RTE averages only the sequences that have one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: String,
    pub sequences: usize,
    pub ate: f64,
    pub rte: Option<f64>,
    pub pde: f64,
    pub aye_deg: f64,
    pub aye_unitvec: f64,
}

pub fn summarize(reports: &[MetricsReport]) -> Result<MetricsSummary> {
    let first = reports.first().ok_or_else(|| Error::invalid("no metrics to summarize"))?;
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let rtes: Vec<f64> = reports.iter().filter_map(|r| r.rte).collect();
    Ok(MetricsSummary {
        method: first.method.clone(),
        sequences: reports.len(),
        ate: mean(|r| r.ate),
        rte: (!rtes.is_empty()).then(|| rtes.iter().sum::<f64>() / rtes.len() as f64),
        pde: mean(|r| r.pde),
        aye_deg: mean(|r| r.aye_deg),
        aye_unitvec: mean(|r| r.aye_unitvec),
    })
}
