//! Time-frequency block-recurrent transformer.
//!
//! Per window: a time plus DCT-domain projection lifts `L × 9` features to
//! `L × D_h`; a block-recurrent attention layer mixes them with the carried
//! state and updates that state through LSTM-style gates; `depth` pre-norm
//! residual (conv, MHA, feedforward) stacks follow; an affine head emits
//! planar velocity.

mod params;

use magtrack_tensor::{DropoutKey, Tape, Tensor, Var};

pub use params::{Bound, ModelConfig, ModelParams};

use crate::error::{Error, Result};
use crate::preprocess::{FeatureWindow, FEATURES};

pub const LN_EPS: f64 = 1e-5;

/// Dropout bookkeeping for one forward call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardCtx {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self { train: true, seed, step }
    }

    fn key(&self, window: usize, site: usize) -> DropoutKey {
        DropoutKey::new(self.seed, self.step, ((window as u64) << 16) | site as u64)
    }
}

/// Outputs of one window.
#[derive(Clone, Copy, Debug)]
pub struct WindowOutput {
    /// `L × 2`, m/s.
    pub velocity: Var,
    /// `L × D_h` activations entering the output projection.
    pub hidden: Var,
}

fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], heads, s[1] / heads])?;
    Ok(tape.permute(r, &[1, 0, 2])?)
}

/// Multi-head attention of `queries` over `keys_values`. Returns the output
/// `[Lq, D]` and the attention weights `[H, Lq, Lk]`.
pub fn attention(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    queries: Var,
    keys_values: Var,
) -> Result<(Var, Var)> {
    let w = |m: &str| p.get(&format!("{prefix}.{m}"));
    let (lq, lk) = (tape.shape(queries)[0], tape.shape(keys_values)[0]);
    let q = tape.matmul(queries, w("wq")?)?;
    let k = tape.matmul(keys_values, w("wk")?)?;
    let v = tape.matmul(keys_values, w("wv")?)?;
    let q = split_heads(tape, q, cfg.heads)?;
    let k = split_heads(tape, k, cfg.heads)?;
    let v = split_heads(tape, v, cfg.heads)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (cfg.head_dim() as f64).sqrt());
    let rpe = format!("{prefix}.rpe");
    if p.has(&rpe) {
        let bias = tape.relative_bias(p.get(&rpe)?, lq, lk)?;
        logits = tape.add(logits, bias)?;
    }
    let weights = tape.softmax(logits)?;
    let o = tape.matmul(weights, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[lq, cfg.hidden])?;
    Ok((tape.matmul(o, w("wo")?)?, weights))
}

/// `X W_t + b_t + DCT(X) W_f + b_f`.
pub fn input_projection(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != FEATURES {
        return Err(Error::invalid(format!("input window must be L x {FEATURES}, got {s:?}")));
    }
    let time = affine(tape, x, p.get("in.time.w")?, p.get("in.time.b")?)?;
    let freq_in = tape.dct2(x)?;
    let freq = affine(tape, freq_in, p.get("in.freq.w")?, p.get("in.freq.b")?)?;
    Ok(tape.add(time, freq)?)
}

/// Block-recurrent attention over projected input `m` and state `s`.
/// Returns the block output and the next state.
pub fn br_attention(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, m: Var, s: Var) -> Result<(Var, Var)> {
    if tape.shape(s) != tape.shape(m) {
        return Err(Error::invalid(format!(
            "state shape {:?} does not match block shape {:?}",
            tape.shape(s),
            tape.shape(m)
        )));
    }
    let d = cfg.hidden;
    let e = layer_norm(tape, p, "br.ln_e", m)?;
    let sn = layer_norm(tape, p, "br.ln_s", s)?;

    let (cross, _) = attention(tape, p, cfg, "br.cross", e, sn)?;
    let (own, _) = attention(tape, p, cfg, "br.self", e, e)?;
    let h = tape.concat(&[cross, own], 1)?;
    let proj = affine(tape, h, p.get("br.proj.w")?, p.get("br.proj.b")?)?;
    let r = tape.add(proj, e)?;
    let inner = affine(tape, r, p.get("br.mlp.w1")?, p.get("br.mlp.b1")?)?;
    let inner = tape.gelu(inner);
    let mlp = affine(tape, inner, p.get("br.mlp.w2")?, p.get("br.mlp.b2")?)?;
    let out = tape.add(mlp, r)?;

    let (s_cross, _) = attention(tape, p, cfg, "br.state.cross", sn, e)?;
    let (s_own, _) = attention(tape, p, cfg, "br.state.self", sn, sn)?;
    let hs = tape.concat(&[s_cross, s_own], 1)?;
    let attended = affine(tape, hs, p.get("br.state.proj.w")?, p.get("br.state.proj.b")?)?;
    let gate_in = tape.concat(&[attended, s], 1)?;
    let z = affine(tape, gate_in, p.get("br.gate.w")?, p.get("br.gate.b")?)?;
    let f = tape.slice(z, 1, 0, d)?;
    let f = tape.sigmoid(f);
    let i = tape.slice(z, 1, d, d)?;
    let i = tape.sigmoid(i);
    let c = tape.slice(z, 1, 2 * d, d)?;
    let c = tape.tanh(c);
    let keep = tape.mul(f, s)?;
    let write = tape.mul(i, c)?;
    Ok((out, tape.add(keep, write)?))
}

fn residual(tape: &mut Tape, x: Var, branch: Var, ctx: &ForwardCtx, cfg: &ModelConfig, window: usize, site: usize) -> Result<Var> {
    let dropped = tape.dropout(branch, cfg.dropout, ctx.train, ctx.key(window, site))?;
    Ok(tape.add(x, dropped)?)
}

/// `x + dropout(pointwise(depthwise(LN(x))))`.
pub fn conv_module(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, block: usize, x: Var, ctx: &ForwardCtx, window: usize) -> Result<Var> {
    let pre = format!("blk{block}.conv");
    let n = layer_norm(tape, p, &format!("{pre}.ln"), x)?;
    let dw = tape.depthwise_conv1d(n, p.get(&format!("{pre}.dw"))?)?;
    let pw = tape.pointwise_conv1d(dw, p.get(&format!("{pre}.pw"))?)?;
    residual(tape, x, pw, ctx, cfg, window, 1 + 3 * block)
}

/// `x + dropout(MHA(LN(x)))`.
pub fn mha_module(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, block: usize, x: Var, ctx: &ForwardCtx, window: usize) -> Result<Var> {
    let pre = format!("blk{block}.mha");
    let n = layer_norm(tape, p, &format!("{pre}.ln"), x)?;
    let (a, _) = attention(tape, p, cfg, &pre, n, n)?;
    residual(tape, x, a, ctx, cfg, window, 2 + 3 * block)
}

/// `x + dropout(W₂ gelu(W₁ LN(x) + b₁) + b₂)`.
pub fn ff_module(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, block: usize, x: Var, ctx: &ForwardCtx, window: usize) -> Result<Var> {
    let pre = format!("blk{block}.ff");
    let n = layer_norm(tape, p, &format!("{pre}.ln"), x)?;
    let h = affine(tape, n, p.get(&format!("{pre}.w1"))?, p.get(&format!("{pre}.b1"))?)?;
    let h = tape.gelu(h);
    let y = affine(tape, h, p.get(&format!("{pre}.w2"))?, p.get(&format!("{pre}.b2"))?)?;
    residual(tape, x, y, ctx, cfg, window, 3 + 3 * block)
}

/// Affine map to two channels, scaled to m/s.
pub fn output_projection(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let v = affine(tape, x, p.get("out.w")?, p.get("out.b")?)?;
    Ok(tape.scale(v, p.vel_scale))
}

/// The trainable initial state.
pub fn init_state(p: &Bound) -> Result<Var> {
    p.get("state.s0")
}

/// Runs consecutive windows, threading the recurrent state from `state`.
/// `first_window` numbers the windows for dropout keys.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    inputs: &[Var],
    state: Var,
    ctx: &ForwardCtx,
    first_window: usize,
) -> Result<(Vec<WindowOutput>, Var)> {
    let mut s = state;
    let mut outs = Vec::with_capacity(inputs.len());
    for (j, &x) in inputs.iter().enumerate() {
        let w = first_window + j;
        let m = input_projection(tape, p, x)?;
        let (e, s_next) = br_attention(tape, p, cfg, m, s)?;
        s = s_next;
        let mut h = tape.dropout(e, cfg.dropout, ctx.train, ctx.key(w, 0))?;
        for b in 0..cfg.depth {
            h = conv_module(tape, p, cfg, b, h, ctx, w)?;
            h = mha_module(tape, p, cfg, b, h, ctx, w)?;
            h = ff_module(tape, p, cfg, b, h, ctx, w)?;
        }
        outs.push(WindowOutput {
            velocity: output_projection(tape, p, h)?,
            hidden: h,
        });
    }
    Ok((outs, s))
}

impl ModelParams {
    /// Standardized `L × 9` input tensor of a window.
    pub fn input_tensor(&self, window: &FeatureWindow) -> Result<Tensor> {
        if window.len() != self.config.window {
            return Err(Error::invalid(format!(
                "window has {} rows, model expects {}",
                window.len(),
                self.config.window
            )));
        }
        let data = window.features.iter().flat_map(|r| self.norm.apply(r)).collect();
        Ok(Tensor::new(&[window.len(), FEATURES], data)?)
    }

    /// Eval-mode velocities for consecutive windows, restarting from the
    /// initial state every `chunk` windows. Returns one `L × [vx, vy]` block
    /// and one hidden `L × D_h` tensor per window.
    pub fn predict(&self, windows: &[FeatureWindow], chunk: usize) -> Result<Vec<(Vec<[f64; 2]>, Tensor)>> {
        if chunk == 0 {
            return Err(Error::invalid("chunk must be positive"));
        }
        let mut out = Vec::with_capacity(windows.len());
        let mut tape = Tape::new();
        for (c, group) in windows.chunks(chunk).enumerate() {
            tape.reset();
            let bound = self.bind(&mut tape, false);
            let inputs = group
                .iter()
                .map(|w| self.input_tensor(w).map(|t| tape.constant(t)))
                .collect::<Result<Vec<_>>>()?;
            let s0 = init_state(&bound)?;
            let (res, _) = forward(&mut tape, &bound, &self.config, &inputs, s0, &ForwardCtx::eval(), c * chunk)?;
            for r in res {
                let v = tape.value(r.velocity).data().chunks(2).map(|c| [c[0], c[1]]).collect();
                out.push((v, tape.value(r.hidden).clone()));
            }
        }
        Ok(out)
    }
}
