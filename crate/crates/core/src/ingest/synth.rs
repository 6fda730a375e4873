//! Synthetic planar trajectories with analytically consistent IMU streams.
//!
//! The path is a natural cubic spline `p(u)` through random unit-step
//! waypoints. Time enters through a warp `u(t)` whose rate ramps up from rest
//! and is modulated sinusoidally, so velocity and acceleration are available in
//! closed form and the sensor streams are exact up to the injected noise.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImuSample, SequenceRecord};
use crate::error::{Error, Result};
use crate::geom::{yaw_rotation, Quaternion, Vec3};

/// Minimum time, in seconds, allotted to each spline segment.
const MIN_SEGMENT_TIME: f64 = 0.5;

/// Localized dipole perturbation of the world magnetic field. The dipole sits
/// `depth` metres below the floor point `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionPatch {
    pub center: [f64; 2],
    pub depth: f64,
    /// Dipole moment in µT·m³.
    pub moment: Vec3,
}

impl DistortionPatch {
    pub fn field_at(&self, p: Vec3) -> Vec3 {
        let r = p - Vec3::new(self.center[0], self.center[1], -self.depth);
        let d = r.norm();
        if d < 1e-9 {
            return Vec3::ZERO;
        }
        let rh = r * (1.0 / d);
        (rh * (3.0 * self.moment.dot(rh)) - self.moment) * (1.0 / (d * d * d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Sequence id; defaults to `synth_<seed>`.
    pub id: Option<String>,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub fs: f64,
    /// Mean speed target in m/s; zero gives a stationary record.
    pub speed: f64,
    /// Upper bound on instantaneous speed, m/s.
    pub max_speed: f64,
    pub waypoints: usize,
    /// Largest heading change between consecutive waypoints, rad.
    pub turn_max: f64,
    /// Seconds spent accelerating from rest.
    pub ramp: f64,
    /// Relative amplitude of the speed modulation, in [0, 1).
    pub speed_mod: f64,
    pub speed_mod_freq: f64,
    /// Relative amplitude of the step-rate speed surge.
    pub surge: f64,
    /// Step rate of the surge, Hz. The surge has a second harmonic so that
    /// its waveform is not symmetric under sign flips.
    pub step_freq: f64,
    /// Amplitude of the heading oscillation around the path tangent, rad.
    pub yaw_osc: f64,
    /// Heading oscillation cycles per metre travelled.
    pub gait_freq: f64,
    /// Roll/pitch sway amplitude, rad.
    pub tilt_amp: f64,
    pub tilt_freq: f64,
    pub sigma_acc: f64,
    pub sigma_gyro: f64,
    pub sigma_mag: f64,
    pub bias_acc: Vec3,
    pub bias_gyro: Vec3,
    /// Hard-iron offset added to the body-frame magnetometer.
    pub bias_mag: Vec3,
    /// World magnetic field, µT (x east, y north, z up).
    pub mag_world: Vec3,
    pub patches: Vec<DistortionPatch>,
    /// Extra patches placed at random points along the path.
    pub random_patches: usize,
    pub patch_moment: f64,
    /// Yaw drift, rad/s, of the recorded orientation stream relative to truth.
    pub orient_yaw_drift: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            id: None,
            duration: 60.0,
            fs: 200.0,
            speed: 1.0,
            max_speed: 1.5,
            waypoints: 12,
            turn_max: 1.0,
            ramp: 1.0,
            speed_mod: 0.3,
            speed_mod_freq: 0.05,
            surge: 0.1,
            step_freq: 1.8,
            yaw_osc: 0.1,
            gait_freq: 0.8,
            tilt_amp: 0.0,
            tilt_freq: 0.5,
            sigma_acc: 0.05,
            sigma_gyro: 0.005,
            sigma_mag: 0.3,
            bias_acc: Vec3::ZERO,
            bias_gyro: Vec3::ZERO,
            bias_mag: Vec3::ZERO,
            mag_world: Vec3::new(0.0, 20.0, -40.0),
            patches: Vec::new(),
            random_patches: 0,
            patch_moment: 5.0,
            orient_yaw_drift: 0.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    /// Noise-free, bias-free copy.
    pub fn noiseless(&self) -> Self {
        Self {
            sigma_acc: 0.0,
            sigma_gyro: 0.0,
            sigma_mag: 0.0,
            bias_acc: Vec3::ZERO,
            bias_gyro: Vec3::ZERO,
            bias_mag: Vec3::ZERO,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("duration", self.duration), ("fs", self.fs), ("max_speed", self.max_speed)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("speed", self.speed),
            ("sigma_acc", self.sigma_acc),
            ("sigma_gyro", self.sigma_gyro),
            ("sigma_mag", self.sigma_mag),
            ("ramp", self.ramp),
            ("turn_max", self.turn_max),
            ("speed_mod_freq", self.speed_mod_freq),
            ("surge", self.surge),
            ("step_freq", self.step_freq),
            ("gait_freq", self.gait_freq),
            ("tilt_freq", self.tilt_freq),
            ("patch_moment", self.patch_moment),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.speed_mod) {
            return Err(Error::invalid(format!("speed_mod must lie in [0, 1), got {}", self.speed_mod)));
        }
        if self.speed_mod + SURGE_PEAK * self.surge >= 1.0 {
            return Err(Error::invalid(format!(
                "speed_mod + {SURGE_PEAK}·surge must stay below 1, got {} and {}",
                self.speed_mod, self.surge
            )));
        }
        let n = (self.duration * self.fs).round() as usize;
        if n < 2 {
            return Err(Error::invalid("duration too short for a single sample interval"));
        }
        if self.speed > 0.0 {
            if self.waypoints < 2 {
                return Err(Error::invalid("a moving trajectory needs at least 2 waypoints"));
            }
            let travel = (n - 1) as f64 / self.fs - self.ramp;
            let need = MIN_SEGMENT_TIME * (self.waypoints - 1) as f64;
            if travel < need {
                return Err(Error::invalid(format!(
                    "duration too short for {} waypoints: {travel:.3} s after the ramp, need {need:.3} s",
                    self.waypoints
                )));
            }
        }
        Ok(())
    }
}

/// Noise-free quantities behind a synthetic record.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub acc_world: Vec<Vec3>,
    pub vel_world: Vec<Vec3>,
    pub omega_body: Vec<Vec3>,
    pub orient: Vec<Quaternion>,
    /// Local world field including distortion.
    pub mag_world: Vec<Vec3>,
    pub patches: Vec<DistortionPatch>,
}

/// Generates a record from `params`.
pub fn synth_sequence(params: &SynthParams) -> Result<SequenceRecord> {
    synth_with_truth(params).map(|(r, _)| r)
}

// 5-point Gauss–Legendre on [-1, 1].
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn integrate(a: f64, b: f64, pieces: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / pieces as f64;
    let mut total = 0.0;
    for p in 0..pieces {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * total
}

/// Natural cubic spline through points at integer parameters.
struct Spline {
    pts: Vec<[f64; 2]>,
    m: Vec<[f64; 2]>,
    seg_len: Vec<f64>,
    cum_len: Vec<f64>,
}

impl Spline {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let n = pts.len();
        let mut m = vec![[0.0; 2]; n];
        if n > 2 {
            // Thomas algorithm on M[i-1] + 4 M[i] + M[i+1] = 6 Δ²P[i].
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![[0.0; 2]; k];
            for i in 0..k {
                let rhs = [0, 1].map(|a| 6.0 * (pts[i + 2][a] - 2.0 * pts[i + 1][a] + pts[i][a]));
                let denom = if i == 0 { 4.0 } else { 4.0 - c[i - 1] };
                c[i] = 1.0 / denom;
                d[i] = if i == 0 {
                    rhs.map(|r| r / denom)
                } else {
                    [0, 1].map(|a| (rhs[a] - d[i - 1][a]) / denom)
                };
            }
            for i in (0..k).rev() {
                let next = if i + 1 < k { m[i + 2] } else { [0.0; 2] };
                m[i + 1] = [0, 1].map(|a| d[i][a] - c[i] * next[a]);
            }
        }
        let mut s = Self {
            pts,
            m,
            seg_len: Vec::new(),
            cum_len: vec![0.0],
        };
        for i in 0..n - 1 {
            let len = integrate(0.0, 1.0, 8, |x| norm2(s.eval_local(i, x).1));
            s.seg_len.push(len);
            let last = s.cum_len[i];
            s.cum_len.push(last + len);
        }
        s
    }

    fn locate(&self, u: f64) -> (usize, f64) {
        let last = self.pts.len() - 2;
        let u = u.clamp(0.0, (last + 1) as f64);
        let i = (u.floor() as usize).min(last);
        (i, u - i as f64)
    }

    fn eval_local(&self, i: usize, s: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let (p0, p1, m0, m1) = (self.pts[i], self.pts[i + 1], self.m[i], self.m[i + 1]);
        let r = 1.0 - s;
        let p = [0, 1].map(|a| r * p0[a] + s * p1[a] + ((r * r * r - r) * m0[a] + (s * s * s - s) * m1[a]) / 6.0);
        let dp = [0, 1].map(|a| p1[a] - p0[a] + ((1.0 - 3.0 * r * r) * m0[a] + (3.0 * s * s - 1.0) * m1[a]) / 6.0);
        let ddp = [0, 1].map(|a| r * m0[a] + s * m1[a]);
        (p, dp, ddp)
    }

    fn eval(&self, u: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let (i, s) = self.locate(u);
        self.eval_local(i, s)
    }

    fn arc_length(&self, u: f64) -> f64 {
        let (i, s) = self.locate(u);
        self.cum_len[i] + integrate(0.0, s, 2, |x| norm2(self.eval_local(i, x).1))
    }

    fn total_length(&self) -> f64 {
        self.cum_len[self.cum_len.len() - 1]
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

const SURGE_PHASE: f64 = PI / 4.0;
/// Bound on `|sin x + 0.5 sin(2x + φ)|`.
const SURGE_PEAK: f64 = 1.5;

/// `u'(t) = c · s(t) · m(t)` with `s` a quintic ramp from rest and
/// `m(t) = 1 + α sin ωt + β (sin ω_s t + ½ sin(2 ω_s t + φ))`.
struct Warp {
    c: f64,
    ramp: f64,
    alpha: f64,
    omega: f64,
    beta: f64,
    omega_s: f64,
    g_ramp: f64,
}

/// `∫_a^b sin(k t + φ) dt`.
fn sin_integral(k: f64, phi: f64, a: f64, b: f64) -> f64 {
    if k > 0.0 {
        ((k * a + phi).cos() - (k * b + phi).cos()) / k
    } else {
        phi.sin() * (b - a)
    }
}

impl Warp {
    fn new(ramp: f64, (alpha, omega): (f64, f64), (beta, omega_s): (f64, f64), end: f64, u_end: f64) -> Self {
        let mut w = Self {
            c: 1.0,
            ramp,
            alpha,
            omega,
            beta,
            omega_s,
            g_ramp: 0.0,
        };
        w.g_ramp = w.g_inside(ramp);
        w.c = u_end / w.g(end);
        w
    }

    fn ramp_value(&self, t: f64) -> (f64, f64) {
        if self.ramp <= 0.0 || t >= self.ramp {
            return (1.0, 0.0);
        }
        let x = t / self.ramp;
        let s = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
        let ds = 30.0 * x * x * (1.0 - x) * (1.0 - x) / self.ramp;
        (s, ds)
    }

    fn modulation(&self, t: f64) -> f64 {
        let ws = self.omega_s * t;
        1.0 + self.alpha * (self.omega * t).sin() + self.beta * (ws.sin() + 0.5 * (2.0 * ws + SURGE_PHASE).sin())
    }

    fn modulation_rate(&self, t: f64) -> f64 {
        let ws = self.omega_s * t;
        self.alpha * self.omega * (self.omega * t).cos()
            + self.beta * self.omega_s * (ws.cos() + (2.0 * ws + SURGE_PHASE).cos())
    }

    fn g_inside(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        integrate(0.0, t, 24, |x| self.ramp_value(x).0 * self.modulation(x))
    }

    fn g(&self, t: f64) -> f64 {
        if t <= self.ramp {
            return self.g_inside(t);
        }
        let r = self.ramp;
        let periodic = self.alpha * sin_integral(self.omega, 0.0, r, t)
            + self.beta
                * (sin_integral(self.omega_s, 0.0, r, t) + 0.5 * sin_integral(2.0 * self.omega_s, SURGE_PHASE, r, t));
        self.g_ramp + (t - r) + periodic
    }

    /// (u, u', u'').
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (s, ds) = self.ramp_value(t);
        let m = self.modulation(t);
        let dm = self.modulation_rate(t);
        (self.c * self.g(t), self.c * s * m, self.c * (ds * m + s * dm))
    }
}

struct Kinematics {
    pos: Vec3,
    vel: Vec3,
    acc: Vec3,
    yaw: f64,
    yaw_rate: f64,
}

/// Generates a record together with its noise-free truth.
pub fn synth_with_truth(params: &SynthParams) -> Result<(SequenceRecord, SynthTruth)> {
    params.validate()?;
    let n = (params.duration * params.fs).round() as usize;
    let dt = 1.0 / params.fs;
    let end = (n - 1) as f64 * dt;
    let mut path_rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.seed);
    noise_rng.set_stream(1);

    let heading0 = path_rng.random_range(0.0..TAU);
    let mut pts = vec![[0.0, 0.0]];
    let mut heading = heading0;
    for _ in 1..params.waypoints.max(2) {
        let last = pts[pts.len() - 1];
        pts.push([last[0] + heading.cos(), last[1] + heading.sin()]);
        heading += if params.turn_max > 0.0 {
            path_rng.random_range(-params.turn_max..=params.turn_max)
        } else {
            0.0
        };
    }
    let spline = Spline::new(pts);
    let u_end = (spline.pts.len() - 1) as f64;
    let warp = Warp::new(
        params.ramp,
        (params.speed_mod, TAU * params.speed_mod_freq),
        (params.surge, TAU * params.step_freq),
        end,
        u_end,
    );
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();

    let mut scale = params.speed * end / spline.total_length();
    if scale > 0.0 {
        let peak = times
            .iter()
            .map(|&t| {
                let (u, du, _) = warp.eval(t);
                norm2(spline.eval(u).1) * du * scale
            })
            .fold(0.0, f64::max);
        if peak > params.max_speed {
            scale *= 0.999 * params.max_speed / peak;
        }
    }
    let moving = scale > 0.0;

    let kin = |t: f64| -> Kinematics {
        if !moving {
            return Kinematics {
                pos: Vec3::ZERO,
                vel: Vec3::ZERO,
                acc: Vec3::ZERO,
                yaw: heading0,
                yaw_rate: 0.0,
            };
        }
        let (u, du, ddu) = warp.eval(t);
        let (p, dp, ddp) = spline.eval(u);
        let vel = [0, 1].map(|a| scale * dp[a] * du);
        let acc = [0, 1].map(|a| scale * (ddp[a] * du * du + dp[a] * ddu));
        let speed = norm2(vel);
        let phase = TAU * params.gait_freq * scale * spline.arc_length(u);
        let tangent = dp[1].atan2(dp[0]);
        let tangent_rate = (dp[0] * ddp[1] - dp[1] * ddp[0]) / (dp[0] * dp[0] + dp[1] * dp[1]) * du;
        Kinematics {
            pos: Vec3::new(scale * p[0], scale * p[1], 0.0),
            vel: Vec3::new(vel[0], vel[1], 0.0),
            acc: Vec3::new(acc[0], acc[1], 0.0),
            yaw: tangent + params.yaw_osc * phase.sin(),
            yaw_rate: tangent_rate + params.yaw_osc * phase.cos() * TAU * params.gait_freq * speed,
        }
    };

    let mut patches = params.patches.clone();
    for _ in 0..params.random_patches {
        let u = path_rng.random_range(0.0..=u_end);
        let (p, _, _) = spline.eval(u);
        let jitter = [path_rng.random_range(-0.5..0.5), path_rng.random_range(-0.5..0.5)];
        let dir = Vec3::new(
            path_rng.random_range(-1.0..1.0),
            path_rng.random_range(-1.0..1.0),
            path_rng.random_range(-1.0..1.0),
        );
        let dir = dir * (1.0 / dir.norm().max(1e-9));
        patches.push(DistortionPatch {
            center: [scale * p[0] + jitter[0], scale * p[1] + jitter[1]],
            depth: path_rng.random_range(0.3..0.8),
            moment: dir * params.patch_moment,
        });
    }

    let normal = |sigma: f64| Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()));
    let (n_acc, n_gyro, n_mag) = (normal(params.sigma_acc)?, normal(params.sigma_gyro)?, normal(params.sigma_mag)?);
    let mut draw = |d: &Normal<f64>| Vec3::new(d.sample(&mut noise_rng), d.sample(&mut noise_rng), d.sample(&mut noise_rng));

    let tilt_w = TAU * params.tilt_freq;
    let mut samples = Vec::with_capacity(n);
    let mut truth = SynthTruth {
        acc_world: Vec::with_capacity(n),
        vel_world: Vec::with_capacity(n),
        omega_body: Vec::with_capacity(n),
        orient: Vec::with_capacity(n),
        mag_world: Vec::with_capacity(n),
        patches: patches.clone(),
    };
    for &t in &times {
        let k = kin(t);
        let roll = params.tilt_amp * (tilt_w * t).sin();
        let droll = params.tilt_amp * tilt_w * (tilt_w * t).cos();
        let pw = 0.6 * tilt_w;
        let pitch = params.tilt_amp * (pw * t + PI / 3.0).sin();
        let dpitch = params.tilt_amp * pw * (pw * t + PI / 3.0).cos();
        let q = Quaternion::from_euler(roll, pitch, k.yaw).canonical();
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let omega = Vec3::new(
            droll - k.yaw_rate * sp,
            dpitch * cr + k.yaw_rate * sr * cp,
            -dpitch * sr + k.yaw_rate * cr * cp,
        );
        let field = patches.iter().fold(params.mag_world, |f, p| f + p.field_at(k.pos));
        let inv = q.conjugate();
        let acc_b = inv.rotate(k.acc + Vec3::gravity());
        let mag_b = inv.rotate(field);
        let recorded = if params.orient_yaw_drift != 0.0 {
            (yaw_rotation(params.orient_yaw_drift * t) * q).canonical()
        } else {
            q
        };
        samples.push(ImuSample {
            t,
            acc: acc_b + params.bias_acc + draw(&n_acc),
            gyro: omega + params.bias_gyro + draw(&n_gyro),
            mag: mag_b + params.bias_mag + draw(&n_mag),
            orient: recorded,
            gt_pos: Some(k.pos),
        });
        truth.acc_world.push(k.acc);
        truth.vel_world.push(k.vel);
        truth.omega_body.push(omega);
        truth.orient.push(q);
        truth.mag_world.push(field);
    }
    let id = params.id.clone().unwrap_or_else(|| format!("synth_{:04}", params.seed));
    Ok((SequenceRecord::new(id, samples)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(seed: u64) -> SynthParams {
        SynthParams {
            duration: 20.0,
            waypoints: 8,
            seed,
            ..SynthParams::default()
        }
        .noiseless()
    }

    fn rms(v: impl Iterator<Item = f64>) -> f64 {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
        (s / n as f64).sqrt()
    }

    #[test]
    fn stationary_record() {
        let p = SynthParams {
            speed: 0.0,
            duration: 2.0,
            ..SynthParams::default()
        }
        .noiseless();
        let rec = synth_sequence(&p).unwrap();
        let m0 = rec.samples()[0].orient.rotate(rec.samples()[0].mag);
        for s in rec.samples() {
            assert!((s.orient.rotate(s.acc) - Vec3::gravity()).norm() < 1e-12);
            assert!(s.gyro.norm() < 1e-15);
            assert!((s.orient.rotate(s.mag) - m0).norm() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        let p = SynthParams {
            duration: 10.0,
            waypoints: 5,
            seed: 3,
            ..SynthParams::default()
        };
        assert_eq!(synth_sequence(&p).unwrap(), synth_sequence(&p).unwrap());
    }

    #[test]
    fn speed_bounded_and_starts_at_rest() {
        for seed in 0..5 {
            let p = SynthParams {
                speed: 1.4,
                ..short(seed)
            };
            let (_, truth) = synth_with_truth(&p).unwrap();
            assert!(truth.vel_world[0].norm() < 1e-12);
            for v in &truth.vel_world {
                assert!(v.norm() <= p.max_speed + 1e-9);
            }
        }
    }

    #[test]
    fn velocity_and_acceleration_match_finite_differences() {
        let p = short(11);
        let (rec, truth) = synth_with_truth(&p).unwrap();
        let dt = rec.dt();
        let s = rec.samples();
        let mut ev = Vec::new();
        let mut ea = Vec::new();
        // fourth-order central stencil; the step-rate surge makes the
        // three-point one too coarse at 200 Hz
        let d = |x: &dyn Fn(usize) -> Vec3, i: usize| (x(i - 2) - x(i - 1) * 8.0 + x(i + 1) * 8.0 - x(i + 2)) * (1.0 / (12.0 * dt));
        for i in 2..s.len() - 2 {
            ev.push((d(&|j| s[j].gt_pos.unwrap(), i) - truth.vel_world[i]).norm());
            ea.push((d(&|j| truth.vel_world[j], i) - truth.acc_world[i]).norm());
        }
        assert!(rms(ev.into_iter()) < 1e-4);
        assert!(rms(ea.into_iter()) < 1e-3);
    }

    #[test]
    fn gyro_matches_orientation_derivative() {
        let p = SynthParams {
            tilt_amp: 0.1,
            ..short(4)
        };
        let (rec, truth) = synth_with_truth(&p).unwrap();
        let dt = rec.dt();
        let mut err = Vec::new();
        for i in 1..rec.len() - 1 {
            // q(t+dt) ≈ q(t-dt) ⊗ exp(ω 2dt) for a body rate.
            let dq = truth.orient[i - 1].conjugate().hamilton(truth.orient[i + 1]);
            let dq = if dq.w < 0.0 { Quaternion::new(-dq.w, -dq.x, -dq.y, -dq.z) } else { dq };
            let half = Vec3::new(dq.x, dq.y, dq.z);
            let angle = 2.0 * half.norm().atan2(dq.w);
            let rate = if half.norm() > 0.0 { half * (angle / half.norm() / (2.0 * dt)) } else { Vec3::ZERO };
            err.push((rate - truth.omega_body[i]).norm());
        }
        assert!(rms(err.into_iter()) < 1e-4);
    }

    #[test]
    fn magnetometer_constant_in_world_without_distortion() {
        let rec = synth_sequence(&SynthParams {
            tilt_amp: 0.05,
            ..short(2)
        })
        .unwrap();
        let m0 = rec.samples()[0].orient.rotate(rec.samples()[0].mag);
        for s in rec.samples() {
            assert!((s.orient.rotate(s.mag) - m0).norm() < 1e-9);
        }
    }

    #[test]
    fn distortion_changes_field() {
        let p = SynthParams {
            random_patches: 3,
            ..short(2)
        };
        let (_, truth) = synth_with_truth(&p).unwrap();
        let dev = truth
            .mag_world
            .iter()
            .map(|m| (*m - p.mag_world).norm())
            .fold(0.0, f64::max);
        assert!(dev > 0.5, "max deviation {dev}");
    }

    #[test]
    fn rejects_bad_params() {
        assert!(synth_sequence(&SynthParams {
            max_speed: 0.0,
            ..SynthParams::default()
        })
        .is_err());
        assert!(synth_sequence(&SynthParams {
            sigma_acc: -1.0,
            ..SynthParams::default()
        })
        .is_err());
        assert!(synth_sequence(&SynthParams {
            duration: 3.0,
            waypoints: 50,
            ..SynthParams::default()
        })
        .is_err());
    }
}
