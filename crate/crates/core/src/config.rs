//! Run configuration as flat `section.key = value` text.
//!
//! ```text
//! # comment
//! model.hidden = 32
//! train.lr = 1e-3
//! data.manifest = runs/data/manifest.tsv
//! synth.ratios = 15,3,3,4
//! ```
//!
//! Keys are the serialized field paths of [`RunConfig`]. Unknown keys are
//! rejected; values are parsed according to the type of the default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::baseline::EkfConfig;
use crate::error::{Error, Result};
use crate::ingest::SynthParams;
use crate::metrics::RTE_INTERVAL;
use crate::preprocess::FeatureOptions;
use crate::tfbrt::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
}

/// How `synth` draws a dataset: per-sequence speeds are uniform in
/// `[speed_min, speed_max]`, everything else comes from the embedded params.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSetConfig {
    pub count: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-axis standard deviation of a per-sequence accelerometer bias, m/s².
    pub acc_bias_std: f64,
    /// Per-axis standard deviation of a per-sequence gyro bias, rad/s.
    pub gyro_bias_std: f64,
    /// Train, validation, seen-test and unseen-test proportions.
    pub ratios: [f64; 4],
    #[serde(flatten)]
    pub params: SynthParams,
}

impl Default for SynthSetConfig {
    fn default() -> Self {
        Self {
            count: 25,
            speed_min: 0.5,
            speed_max: 1.5,
            acc_bias_std: 0.05,
            gyro_bias_std: 0.001,
            ratios: [15.0, 3.0, 3.0, 4.0],
            params: SynthParams {
                duration: 90.0,
                waypoints: 25,
                ..SynthParams::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Windows per state reset during inference.
    pub chunk: usize,
    /// Ground-truth speed below which heading error is not scored, m/s.
    pub aye_eps: f64,
    pub rte_interval: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chunk: 15,
            aye_eps: 0.1,
            rte_interval: RTE_INTERVAL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureOptions,
    pub data: DataConfig,
    pub synth: SynthSetConfig,
    pub ekf: EkfConfig,
    pub eval: EvalConfig,
}

fn parse_scalar(key: &str, old: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match old {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(v).ok_or_else(|| bad("a finite number"))?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null => match raw {
            "none" | "null" | "" => Value::Null,
            _ => match raw.parse::<f64>().ok().and_then(Number::from_f64) {
                Some(n) => Value::Number(n),
                None => Value::String(raw.to_string()),
            },
        },
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            if parts.len() != items.len() {
                return Err(bad(&format!("{} comma-separated values", items.len())));
            }
            let elems = items
                .iter()
                .zip(parts)
                .map(|(o, p)| parse_scalar(key, o, p))
                .collect::<Result<Vec<_>>>()?;
            Value::Array(elems)
        }
        Value::Object(_) => return Err(Error::Config(format!("{key} is a section, not a value"))),
    })
}

fn set_path(root: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = root;
    while let Some(p) = parts.next() {
        let slot = cur
            .get_mut(p)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if parts.peek().is_none() {
            *slot = parse_scalar(key, slot, raw)?;
            return Ok(());
        }
        cur = match slot {
            Value::Object(m) => m,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
    }
    Err(Error::Config("empty config key".into()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(a) if !a.is_empty() && a.iter().all(|x| !x.is_object() && !x.is_array()) => {
            let s: Vec<String> = a.iter().map(scalar_text).collect();
            out.push((prefix.to_string(), s.join(",")));
        }
        Value::Array(_) => {}
        x => out.push((prefix.to_string(), scalar_text(x))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        x => x.to_string(),
    }
}

impl RunConfig {
    /// Applies `key = value` assignments in order.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let Value::Object(mut root) = serde_json::to_value(self)? else {
            unreachable!("config serializes to an object")
        };
        for (k, v) in pairs {
            set_path(&mut root, k.trim(), v.trim())?;
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k, v));
        }
        Self::default().with_overrides(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every settable key with its current value, one per line.
    pub fn to_text(&self) -> Result<String> {
        let mut rows = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut rows);
        Ok(rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.model.validate());
        check(self.train.validate());
        check(self.ekf.validate());
        check(if self.eval.chunk == 0 || !(self.eval.aye_eps > 0.0) || !(self.eval.rte_interval > 0.0) {
            Err(Error::Config("eval.chunk, eval.aye_eps and eval.rte_interval must be positive".into()))
        } else {
            Ok(())
        });
        check(if self.features.gt_stride == 0 {
            Err(Error::Config("features.gt_stride must be positive".into()))
        } else {
            Ok(())
        });
        let s = &self.synth;
        check(if !(s.speed_min >= 0.0 && s.speed_min <= s.speed_max && s.speed_max <= s.params.max_speed) {
            Err(Error::Config(format!(
                "synth speeds need 0 <= speed_min <= speed_max <= max_speed, got {} {} {}",
                s.speed_min, s.speed_max, s.params.max_speed
            )))
        } else if !(s.acc_bias_std >= 0.0 && s.gyro_bias_std >= 0.0) {
            Err(Error::Config("synth bias spreads must be non-negative".into()))
        } else if s.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            Err(Error::Config("synth.ratios must be positive".into()))
        } else {
            Ok(())
        });
        check(s.params.validate());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
