//! Velocity, position and direction losses and their coefficient-of-variation
//! weighting.

use magtrack_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ORIENTATION_EPS: f64 = 0.05;

fn check_pair(tape: &Tape, v: Var, vg: Var) -> Result<()> {
    let (a, b) = (tape.shape(v), tape.shape(vg));
    if a != b || a.len() != 2 || a[1] != 2 {
        return Err(Error::invalid(format!("velocity shapes {a:?} and {b:?} must both be L x 2")));
    }
    Ok(())
}

/// `sqrt(x)` for a non-negative scalar, with a zero gradient at zero.
fn root(tape: &mut Tape, x: Var) -> Var {
    if tape.value(x).data()[0] <= 0.0 {
        tape.scale(x, 0.0)
    } else {
        tape.sqrt(x)
    }
}

fn rms_rows(tape: &mut Tape, d: Var) -> Result<Var> {
    let sq = tape.square(d);
    let per_row = tape.sum(sq, 1, false)?;
    let m = tape.mean_all(per_row);
    Ok(root(tape, m))
}

/// Root mean squared row distance between predicted and true velocity.
pub fn velocity_loss(tape: &mut Tape, v: Var, vg: Var) -> Result<Var> {
    check_pair(tape, v, vg)?;
    let d = tape.sub(v, vg)?;
    rms_rows(tape, d)
}

/// Root mean squared distance between positions obtained by cumulative
/// summation of `v·dt` and `vg·dt`.
pub fn position_loss(tape: &mut Tape, v: Var, vg: Var, dt: f64) -> Result<Var> {
    check_pair(tape, v, vg)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let d = tape.sub(v, vg)?;
    let p = tape.cumsum(d)?;
    let p = tape.scale(p, dt);
    rms_rows(tape, p)
}

/// Direction loss and whether every row was masked.
#[derive(Clone, Copy, Debug)]
pub struct OrientationLoss {
    pub value: Var,
    pub masked_all: bool,
}

/// Root mean squared distance between unit directions. Rows whose true speed
/// is below `eps` are left out; remaining norms are floored at `eps`.
pub fn orientation_loss(tape: &mut Tape, v: Var, vg: Var, eps: f64) -> Result<OrientationLoss> {
    check_pair(tape, v, vg)?;
    let rows = tape.shape(v)[0];
    let g = tape.value(vg).data().to_vec();
    let mask: Vec<f64> = g
        .chunks(2)
        .map(|r| if r[0].hypot(r[1]) >= eps { 1.0 } else { 0.0 })
        .collect();
    let kept: f64 = mask.iter().sum();
    if kept == 0.0 {
        let z = tape.scale(v, 0.0);
        let value = tape.sum_all(z);
        return Ok(OrientationLoss { value, masked_all: true });
    }
    let ug: Vec<f64> = g
        .chunks(2)
        .flat_map(|r| {
            // same arithmetic as the tape path so equal inputs cancel exactly
            let n = (r[0] * r[0] + r[1] * r[1]).max(eps * eps).sqrt();
            [r[0] / n, r[1] / n]
        })
        .collect();
    let ug = tape.constant(Tensor::new(&[rows, 2], ug)?);
    let sq = tape.square(v);
    let n2 = tape.sum(sq, 1, true)?;
    let n2 = tape.clamp_min(n2, eps * eps);
    let n = tape.sqrt(n2);
    let u = tape.div(v, n)?;
    let d = tape.sub(u, ug)?;
    let mask = tape.constant(Tensor::new(&[rows, 1], mask)?);
    let d = tape.mul(d, mask)?;
    let sq = tape.square(d);
    let total = tape.sum_all(sq);
    let m = tape.scale(total, 1.0 / kept);
    Ok(OrientationLoss {
        value: root(tape, m),
        masked_all: false,
    })
}

/// Running statistics of the three raw losses over training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossState {
    pub count: u64,
    pub mean: [f64; 3],
    pub m2: [f64; 3],
    pub warmup: u64,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for LossState {
    fn default() -> Self {
        Self::new(50)
    }
}

impl LossState {
    pub fn new(warmup: u64) -> Self {
        Self {
            count: 0,
            mean: [0.0; 3],
            m2: [0.0; 3],
            warmup,
            w_min: 0.01,
            w_max: 10.0,
        }
    }

    /// Adds one step's raw `[L_v, L_p, L_o]`.
    pub fn update(&mut self, raw: [f64; 3]) -> Result<()> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss values {raw:?}")));
        }
        self.count += 1;
        let n = self.count as f64;
        for k in 0..3 {
            let d = raw[k] - self.mean[k];
            self.mean[k] += d / n;
            self.m2[k] += d * (raw[k] - self.mean[k]);
        }
        Ok(())
    }

    /// Population standard deviation of each loss.
    pub fn std(&self) -> [f64; 3] {
        if self.count == 0 {
            return [0.0; 3];
        }
        self.m2.map(|m| (m.max(0.0) / self.count as f64).sqrt())
    }

    /// `clamp(σ/μ, w_min, w_max)`, or ones while warming up.
    pub fn weights(&self) -> [f64; 3] {
        if self.count <= self.warmup {
            return [1.0; 3];
        }
        let std = self.std();
        std::array::from_fn(|k| {
            let (s, m) = (std[k], self.mean[k]);
            let w = if s == 0.0 {
                self.w_min
            } else if m <= 0.0 {
                self.w_max
            } else {
                s / m
            };
            w.clamp(self.w_min, self.w_max)
        })
    }
}

/// `Σ w_k L_k` with the weights entering as constants.
pub fn weighted_total(tape: &mut Tape, losses: [Var; 3], weights: [f64; 3]) -> Result<Var> {
    let a = tape.scale(losses[0], weights[0]);
    let b = tape.scale(losses[1], weights[1]);
    let c = tape.scale(losses[2], weights[2]);
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

/// Updates `state` with the current raw values, then weights them.
pub fn total_loss(tape: &mut Tape, losses: [Var; 3], state: &mut LossState) -> Result<(Var, [f64; 3])> {
    let raw = losses.map(|l| tape.value(l).data()[0]);
    state.update(raw)?;
    let w = state.weights();
    Ok((weighted_total(tape, losses, w)?, w))
}

/// Per-window losses averaged over a segment. Windows whose direction loss is
/// fully masked are left out of that average.
#[derive(Clone, Copy, Debug)]
pub struct SegmentLosses {
    pub velocity: Var,
    pub position: Var,
    pub orientation: Var,
}

impl SegmentLosses {
    pub fn as_array(&self) -> [Var; 3] {
        [self.velocity, self.position, self.orientation]
    }

    pub fn values(&self, tape: &Tape) -> [f64; 3] {
        self.as_array().map(|v| tape.value(v).data()[0])
    }
}

pub fn segment_losses(tape: &mut Tape, pairs: &[(Var, Var)], dt: f64, eps: f64) -> Result<SegmentLosses> {
    if pairs.is_empty() {
        return Err(Error::invalid("segment has no windows"));
    }
    let mut lv = Vec::new();
    let mut lp = Vec::new();
    let mut lo = Vec::new();
    for &(v, vg) in pairs {
        lv.push(velocity_loss(tape, v, vg)?);
        lp.push(position_loss(tape, v, vg, dt)?);
        let o = orientation_loss(tape, v, vg, eps)?;
        if !o.masked_all {
            lo.push(o.value);
        }
    }
    let mean = |tape: &mut Tape, xs: &[Var]| -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x)?;
        }
        Ok(tape.scale(acc, 1.0 / xs.len() as f64))
    };
    let velocity = mean(tape, &lv)?;
    let position = mean(tape, &lp)?;
    let orientation = if lo.is_empty() {
        tape.scale(velocity, 0.0)
    } else {
        mean(tape, &lo)?
    };
    Ok(SegmentLosses {
        velocity,
        position,
        orientation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use magtrack_tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    fn random(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, 2], |_| rng.random_range(-2.0..2.0))
    }

    fn eval(f: impl Fn(&mut Tape, Var, Var) -> Var, v: &Tensor, vg: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let a = tape.param(v.clone());
        let b = tape.constant(vg.clone());
        let l = f(&mut tape, a, b);
        let val = tape.value(l).item().unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get_or_zeros(a).is_finite());
        val
    }

    fn vel(t: &mut Tape, a: Var, b: Var) -> Var {
        velocity_loss(t, a, b).unwrap()
    }

    fn pos(t: &mut Tape, a: Var, b: Var) -> Var {
        position_loss(t, a, b, 1.0).unwrap()
    }

    fn ori(t: &mut Tape, a: Var, b: Var) -> Var {
        orientation_loss(t, a, b, ORIENTATION_EPS).unwrap().value
    }

    #[test]
    fn velocity_examples() {
        let g = random(6, 1);
        assert_eq!(eval(vel, &g, &g), 0.0);
        let shifted = Tensor::from_fn(&[6, 2], |i| g.data()[i] + if i % 2 == 0 { 1.0 } else { 0.0 });
        assert!((eval(vel, &shifted, &g) - 1.0).abs() < 1e-12);
        let v = random(6, 2);
        let direct = (v
            .data()
            .chunks(2)
            .zip(g.data().chunks(2))
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum::<f64>()
            / 6.0)
            .sqrt();
        assert!((eval(vel, &v, &g) - direct).abs() < 1e-12);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(velocity_loss(&mut tape, a, b).is_err());
    }

    #[test]
    fn position_examples() {
        let g = Tensor::zeros(&[3, 2]);
        assert_eq!(eval(pos, &g, &g), 0.0);
        let v = t(&[[1.0, 0.0]; 3]);
        assert!((eval(pos, &v, &g) - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let vg = random(5, 3);
        let v = random(5, 4);
        let base = eval(pos, &v, &vg);
        let scaled = Tensor::from_fn(&[5, 2], |i| vg.data()[i] + -3.0 * (v.data()[i] - vg.data()[i]));
        assert!((eval(pos, &scaled, &vg) - 3.0 * base).abs() < 1e-12);
        let mut tape = Tape::new();
        let a = tape.constant(v.clone());
        assert!(position_loss(&mut tape, a, a, 0.0).is_err());
    }

    #[test]
    fn orientation_examples() {
        let g = t(&[[1.0, 2.0], [-0.5, 0.3]]);
        let parallel = t(&[[2.0, 4.0], [-5.0, 3.0]]);
        assert!(eval(ori, &parallel, &g).abs() < 1e-12);
        assert!((eval(ori, &t(&[[1.0, 0.0]]), &t(&[[0.0, 1.0]])) - 2f64.sqrt()).abs() < 1e-12);
        assert!((eval(ori, &t(&[[-1.0, 0.0]]), &t(&[[1.0, 0.0]])) - 2.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let v = tape.param(t(&[[1.0, 0.0], [0.0, 1.0]]));
        let slow = tape.constant(t(&[[0.01, 0.0], [0.0, -0.02]]));
        let o = orientation_loss(&mut tape, v, slow, ORIENTATION_EPS).unwrap();
        assert!(o.masked_all);
        assert_eq!(tape.value(o.value).item().unwrap(), 0.0);
        // a stopped prediction against a moving target stays finite
        assert!(eval(ori, &Tensor::zeros(&[2, 2]), &g).is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let vg = random(7, 10 + seed);
            let v = random(7, 20 + seed);
            for f in [vel, pos, ori] {
                let err = grad_check(
                    |tape, x| {
                        let g = tape.constant(vg.clone());
                        Ok(f(tape, x, g))
                    },
                    &v,
                )
                .unwrap();
                assert!(err < 1e-4, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn warmup_and_constant_history() {
        let mut s = LossState::new(50);
        for _ in 0..50 {
            s.update([1.0, 2.0, 3.0]).unwrap();
            assert_eq!(s.weights(), [1.0; 3]);
        }
        s.update([1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.weights(), [0.01; 3]);
        assert!(s.update([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn weights_match_two_pass_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hist: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.random_range(0.5..1.5), rng.random_range(1.0..4.0), rng.random_range(0.9..1.1)])
            .collect();
        let mut s = LossState::new(50);
        for h in &hist {
            s.update(*h).unwrap();
        }
        let w = s.weights();
        for k in 0..3 {
            let mean = hist.iter().map(|h| h[k]).sum::<f64>() / 200.0;
            let var = hist.iter().map(|h| (h[k] - mean).powi(2)).sum::<f64>() / 200.0;
            let expect = (var.sqrt() / mean).clamp(0.01, 10.0);
            assert!((w[k] - expect).abs() < 1e-12, "{k}: {} vs {expect}", w[k]);
        }
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        let vg = random(6, 30);
        let v = random(6, 31);
        let mut state = LossState::new(0);
        state.update([0.5, 1.0, 2.0]).unwrap();
        state.update([1.5, 1.5, 1.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(v.clone());
        let b = tape.constant(vg.clone());
        let ls = [vel(&mut tape, a, b), pos(&mut tape, a, b), ori(&mut tape, a, b)];
        let (total, w) = total_loss(&mut tape, ls, &mut state).unwrap();
        assert_eq!(state.count, 3);
        let g = tape.backward(total).unwrap().get_or_zeros(a);
        let mut manual = vec![0.0; 12];
        for (k, f) in [vel, pos, ori].into_iter().enumerate() {
            let mut t2 = Tape::new();
            let a2 = t2.param(v.clone());
            let b2 = t2.constant(vg.clone());
            let l = f(&mut t2, a2, b2);
            let gk = t2.backward(l).unwrap().get_or_zeros(a2);
            for (m, x) in manual.iter_mut().zip(gk.data()) {
                *m += w[k] * x;
            }
        }
        for (x, y) in g.data().iter().zip(&manual) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn losses_non_negative(seed in 0u64..500, rows in 1usize..12) {
            let v = random(rows, seed);
            let vg = random(rows, seed + 1000);
            for f in [vel, pos, ori] {
                prop_assert!(eval(f, &v, &vg) >= 0.0);
                prop_assert_eq!(eval(f, &vg, &vg), 0.0);
            }
        }
    }
}
