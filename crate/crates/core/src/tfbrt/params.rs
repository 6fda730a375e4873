use std::collections::BTreeMap;

use magtrack_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{NormStats, FEATURES};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Window length L.
    pub window: usize,
    /// Hidden width D_h.
    pub hidden: usize,
    pub heads: usize,
    /// Depthwise kernel size; odd.
    pub kernel: usize,
    /// Number of (conv, MHA, feedforward) repetitions.
    pub depth: usize,
    pub dropout: f64,
    /// Clip radius of the relative-position bias; 0 disables it.
    pub rpe_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 200,
            hidden: 128,
            heads: 4,
            kernel: 5,
            depth: 2,
            dropout: 0.1,
            rpe_radius: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 || self.hidden == 0 || self.heads == 0 || self.kernel == 0 {
            return bad("window, hidden, heads and kernel must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden width {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Every parameter array with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, l, h) = (self.hidden, self.window, self.heads);
        let rpe = 2 * self.rpe_radius + 1;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| v.push((name, shape));
        let attention = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for m in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{m}"), vec![d, d]);
            }
            if self.rpe_radius > 0 {
                push(format!("{p}.rpe"), vec![h, rpe]);
            }
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.g"), vec![d]);
            push(format!("{p}.b"), vec![d]);
        };

        push("in.time.w".into(), vec![FEATURES, d]);
        push("in.time.b".into(), vec![d]);
        push("in.freq.w".into(), vec![FEATURES, d]);
        push("in.freq.b".into(), vec![d]);
        push("state.s0".into(), vec![l, d]);

        norm(&mut push, "br.ln_e");
        norm(&mut push, "br.ln_s");
        attention(&mut push, "br.cross");
        attention(&mut push, "br.self");
        push("br.proj.w".into(), vec![2 * d, d]);
        push("br.proj.b".into(), vec![d]);
        push("br.mlp.w1".into(), vec![d, 4 * d]);
        push("br.mlp.b1".into(), vec![4 * d]);
        push("br.mlp.w2".into(), vec![4 * d, d]);
        push("br.mlp.b2".into(), vec![d]);
        attention(&mut push, "br.state.cross");
        attention(&mut push, "br.state.self");
        push("br.state.proj.w".into(), vec![2 * d, d]);
        push("br.state.proj.b".into(), vec![d]);
        push("br.gate.w".into(), vec![2 * d, 3 * d]);
        push("br.gate.b".into(), vec![3 * d]);

        for i in 0..self.depth {
            norm(&mut push, &format!("blk{i}.conv.ln"));
            push(format!("blk{i}.conv.dw"), vec![self.kernel, d]);
            push(format!("blk{i}.conv.pw"), vec![d, d]);
            norm(&mut push, &format!("blk{i}.mha.ln"));
            attention(&mut push, &format!("blk{i}.mha"));
            norm(&mut push, &format!("blk{i}.ff.ln"));
            push(format!("blk{i}.ff.w1"), vec![d, 4 * d]);
            push(format!("blk{i}.ff.b1"), vec![4 * d]);
            push(format!("blk{i}.ff.w2"), vec![4 * d, d]);
            push(format!("blk{i}.ff.b2"), vec![d]);
        }
        push("out.w".into(), vec![d, 2]);
        push("out.b".into(), vec![2]);
        v
    }
}

/// Learned arrays plus the input/output scaling fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub arrays: BTreeMap<String, Tensor>,
    pub norm: NormStats,
    /// Network outputs are multiplied by this to give m/s.
    pub vel_scale: f64,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases and relative-position tables, unit
    /// layer-norm gains, a small random initial state and a forget-gate bias
    /// of one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let mut arrays = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let leaf = name.rsplit('.').next().unwrap_or("");
            let t = match leaf {
                "g" => Tensor::ones(&shape),
                "s0" => Tensor::from_fn(&shape, |_| rng.random_range(-0.1..0.1)),
                "b" if name == "br.gate.b" => Tensor::from_fn(&shape, |i| if i < d { 1.0 } else { 0.0 }),
                _ if shape.len() == 2 && !name.ends_with("rpe") => {
                    let (fan_in, fan_out) = if leaf == "dw" { (shape[0], shape[0]) } else { (shape[0], shape[1]) };
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-a..a))
                }
                _ => Tensor::zeros(&shape),
            };
            arrays.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            arrays,
            norm: NormStats::default(),
            vel_scale: 1.0,
        })
    }

    /// Checks that the arrays match `config` exactly and are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        if expected.len() != self.arrays.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                self.arrays.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .arrays
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("parameter {name} is not finite")));
            }
        }
        if !(self.vel_scale.is_finite() && self.vel_scale > 0.0) {
            return Err(Error::Config(format!("velocity scale {} must be positive", self.vel_scale)));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.arrays.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }

    /// Records every array on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .arrays
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound {
            vars,
            vel_scale: self.vel_scale,
        }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
    pub vel_scale: f64,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}
