//! Classical trackers: naive double integration, an error-state EKF, and
//! gyro-only / magnetometer-only heading.

use nalgebra::{Cholesky, Matrix6, RowVector6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{skew, wrap_angle, Mat3, Quaternion, Vec3};
use crate::ingest::SequenceRecord;

/// Planar dead-reckoning output, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub orient: Vec<Quaternion>,
}

fn check(record: &SequenceRecord) -> Result<()> {
    if record.len() < 2 {
        return Err(Error::invalid(format!("sequence {} is too short to track", record.id)));
    }
    Ok(())
}

/// One gyro step: right-multiplies by the rotation of the mean body rate.
fn propagate(q: Quaternion, w0: Vec3, w1: Vec3, dt: f64) -> Quaternion {
    (q * Quaternion::from_rotation_vector((w0 + w1) * (0.5 * dt))).canonical()
}

/// Orientation from integrating the gyro, starting at the first recorded
/// orientation.
pub fn gyro_orientations(record: &SequenceRecord) -> Result<Vec<Quaternion>> {
    check(record)?;
    let s = record.samples();
    let mut q = s[0].orient;
    let mut out = Vec::with_capacity(s.len());
    out.push(q);
    for k in 1..s.len() {
        q = propagate(q, s[k - 1].gyro, s[k].gyro, s[k].t - s[k - 1].t);
        out.push(q);
    }
    Ok(out)
}

/// Rotates accelerations by `orient`, removes gravity and integrates twice
/// with the trapezoid rule from rest at the origin.
pub fn integrate_track(record: &SequenceRecord, orient: Vec<Quaternion>) -> Result<Track> {
    check(record)?;
    let s = record.samples();
    if orient.len() != s.len() {
        return Err(Error::invalid("orientation series length differs from the record"));
    }
    let acc: Vec<Vec3> = s.iter().zip(&orient).map(|(x, q)| q.rotate(x.acc) - Vec3::gravity()).collect();
    let mut v = Vec3::ZERO;
    let mut p = Vec3::ZERO;
    let mut pos = vec![[0.0; 2]];
    let mut vel = vec![[0.0; 2]];
    for k in 1..s.len() {
        let dt = s[k].t - s[k - 1].t;
        let v_next = v + (acc[k - 1] + acc[k]) * (0.5 * dt);
        p += (v + v_next) * (0.5 * dt);
        v = v_next;
        pos.push([p.x, p.y]);
        vel.push([v.x, v.y]);
    }
    Ok(Track { pos, vel, orient })
}

/// Naive double integration with gyro-propagated orientation.
pub fn ndi_track(record: &SequenceRecord) -> Result<Track> {
    integrate_track(record, gyro_orientations(record)?)
}

/// Yaw of the gyro-propagated orientation.
pub fn gyro_heading(record: &SequenceRecord) -> Result<Vec<f64>> {
    Ok(gyro_orientations(record)?.iter().map(Quaternion::yaw).collect())
}

/// Horizontal field direction in a level frame sharing the body's yaw.
fn level_field(q: &Quaternion, mag: Vec3) -> Vec3 {
    let (roll, pitch) = q.roll_pitch();
    Quaternion::from_euler(roll, pitch, 0.0).rotate(mag)
}

/// Yaw from the tilt-compensated magnetometer. Roll and pitch come from the
/// orientation stream; the reference field direction is taken from the first
/// sample so that local declination is absorbed.
pub fn mag_heading(record: &SequenceRecord) -> Result<Vec<f64>> {
    check(record)?;
    let s = record.samples();
    let reference = s[0].orient.rotate(s[0].mag);
    let ref_angle = reference.y.atan2(reference.x);
    Ok(s
        .iter()
        .map(|x| {
            let m = level_field(&x.orient, x.mag);
            wrap_angle(ref_angle - m.y.atan2(m.x))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// Gyro white noise per sample, rad/s.
    pub gyro_noise: f64,
    /// Gyro bias random walk, rad/s/√s.
    pub bias_walk: f64,
    /// Accelerometer noise for the gravity reference, m/s², including
    /// unmodelled linear acceleration.
    pub acc_noise: f64,
    /// Magnetometer yaw noise, rad.
    pub mag_noise: f64,
    pub init_angle_std: f64,
    pub init_bias_std: f64,
    /// Skip the gravity update when `| ‖a‖ − g |` exceeds this, m/s².
    pub acc_gate: f64,
    /// Skip the heading update when the field magnitude differs from the
    /// first sample's by more than this fraction.
    pub mag_gate: f64,
    pub use_acc: bool,
    pub use_mag: bool,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 0.005,
            bias_walk: 1e-5,
            acc_noise: 5.0,
            mag_noise: 0.2,
            init_angle_std: 0.01,
            init_bias_std: 0.01,
            acc_gate: 2.0,
            mag_gate: 0.05,
            use_acc: true,
            use_mag: true,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise,
            self.bias_walk,
            self.acc_noise,
            self.mag_noise,
            self.init_angle_std,
            self.init_bias_std,
            self.acc_gate,
            self.mag_gate,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("EKF noise parameters must be positive, got {all:?}")));
        }
        Ok(())
    }
}

fn na(v: Vec3) -> Vector3<f64> {
    Vector3::new(v.x, v.y, v.z)
}

fn na_mat(m: &Mat3) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::from_fn(|r, c| m.0[r][c])
}

/// Error-state filter over `[δθ, δb_g]`, with `q_true = q ⊗ exp(δθ)`.
struct Ekf<'a> {
    cfg: &'a EkfConfig,
    q: Quaternion,
    bias: Vec3,
    p: Matrix6<f64>,
}

impl Ekf<'_> {
    fn predict(&mut self, w0: Vec3, w1: Vec3, dt: f64) {
        let w0 = w0 - self.bias;
        let w1 = w1 - self.bias;
        self.q = propagate(self.q, w0, w1, dt);
        let w = (w0 + w1) * 0.5;
        let mut f = Matrix6::identity();
        let rot = na_mat(&skew(w)) * (-dt);
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(nalgebra::Matrix3::identity() + rot));
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(nalgebra::Matrix3::identity() * -dt));
        let qa = (self.cfg.gyro_noise * dt).powi(2);
        let qb = self.cfg.bias_walk.powi(2) * dt;
        let q = Matrix6::from_diagonal(&Vector6::new(qa, qa, qa, qb, qb, qb));
        self.p = f * self.p * f.transpose() + q;
        self.symmetrize();
    }

    fn symmetrize(&mut self) {
        self.p = (self.p + self.p.transpose()) * 0.5;
    }

    fn correct(&mut self, dx: Vector6<f64>) {
        self.q = (self.q * Quaternion::from_rotation_vector(Vec3::new(dx[0], dx[1], dx[2]))).canonical();
        self.bias += Vec3::new(dx[3], dx[4], dx[5]);
    }

    /// Sequential scalar updates; each row of `h` pairs with one residual.
    fn update(&mut self, h: &[RowVector6<f64>], residual: &[f64], var: f64) -> Result<()> {
        let mut dx = Vector6::zeros();
        for (row, &r) in h.iter().zip(residual) {
            let s = (row * self.p * row.transpose())[(0, 0)] + var;
            let k = self.p * row.transpose() / s;
            let innov = r - (row * dx)[(0, 0)];
            dx += k * innov;
            let ikh = Matrix6::identity() - k * row;
            self.p = ikh * self.p * ikh.transpose() + k * k.transpose() * var;
            self.symmetrize();
        }
        self.correct(dx);
        if Cholesky::new(self.p).is_none() {
            return Err(Error::Numerical("EKF covariance lost positive definiteness".into()));
        }
        Ok(())
    }
}

/// Orientation estimates of the error-state EKF.
pub fn ekf_orientations(record: &SequenceRecord, cfg: &EkfConfig) -> Result<Vec<Quaternion>> {
    cfg.validate()?;
    check(record)?;
    let s = record.samples();
    let g = Vec3::gravity();
    let reference = s[0].orient.rotate(s[0].mag);
    let ref_angle = reference.y.atan2(reference.x);
    let (a0, b0) = (cfg.init_angle_std.powi(2), cfg.init_bias_std.powi(2));
    let mut f = Ekf {
        cfg,
        q: s[0].orient,
        bias: Vec3::ZERO,
        p: Matrix6::from_diagonal(&Vector6::new(a0, a0, a0, b0, b0, b0)),
    };
    let mut out = Vec::with_capacity(s.len());
    out.push(f.q);
    for k in 1..s.len() {
        f.predict(s[k - 1].gyro, s[k].gyro, s[k].t - s[k - 1].t);
        if cfg.use_acc && (s[k].acc.norm() - g.norm()).abs() <= cfg.acc_gate {
            let pred = f.q.conjugate().rotate(g);
            let hm = na_mat(&skew(pred));
            let rows: Vec<RowVector6<f64>> = (0..3)
                .map(|r| RowVector6::new(hm[(r, 0)], hm[(r, 1)], hm[(r, 2)], 0.0, 0.0, 0.0))
                .collect();
            let r = na(s[k].acc - pred);
            f.update(&rows, &[r[0], r[1], r[2]], cfg.acc_noise.powi(2))?;
        }
        if cfg.use_mag && (s[k].mag.norm() / reference.norm() - 1.0).abs() <= cfg.mag_gate {
            let m = f.q.rotate(s[k].mag);
            let mh2 = m.x * m.x + m.y * m.y;
            if mh2 > 1e-12 {
                // Azimuth of the projected field; the vertical component still
                // enters through how tilt errors move the projection.
                let a = nalgebra::RowVector3::new(-m.y / mh2, m.x / mh2, 0.0);
                let j = a * na_mat(&skew(m)) * na_mat(&f.q.to_matrix());
                let h = RowVector6::new(j[0], j[1], j[2], 0.0, 0.0, 0.0);
                let d = wrap_angle(m.y.atan2(m.x) - ref_angle);
                f.update(&[h], &[d], cfg.mag_noise.powi(2))?;
            }
        }
        out.push(f.q);
    }
    Ok(out)
}

/// Double integration with EKF orientation.
pub fn ekf_track(record: &SequenceRecord, cfg: &EkfConfig) -> Result<Track> {
    integrate_track(record, ekf_orientations(record, cfg)?)
}

/// Smallest eigenvalue of a symmetric 6×6 matrix.
pub fn min_eigenvalue(p: &Matrix6<f64>) -> f64 {
    p.symmetric_eigenvalues().min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::yaw_rotation;
    use crate::ingest::{synth_sequence, synth_with_truth, ImuSample, SynthParams};

    fn planar_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    #[test]
    fn stationary_track_stays_put() {
        let rec = synth_sequence(
            &SynthParams {
                speed: 0.0,
                duration: 10.0,
                tilt_amp: 0.0,
                ..SynthParams::default()
            }
            .noiseless(),
        )
        .unwrap();
        let t = ndi_track(&rec).unwrap();
        assert!(t.pos.last().unwrap()[0].hypot(t.pos.last().unwrap()[1]) < 1e-6);
    }

    #[test]
    fn accelerometer_bias_drifts_quadratically() {
        let b = Vec3::new(0.02, -0.01, 0.0);
        let secs = 20.0;
        let rec = synth_sequence(&SynthParams {
            bias_acc: b,
            ..SynthParams {
                speed: 0.0,
                duration: secs,
                ..SynthParams::default()
            }
            .noiseless()
        })
        .unwrap();
        let t = ndi_track(&rec).unwrap();
        let end = *t.pos.last().unwrap();
        let horizon = rec.duration();
        // the bias is body-frame; rotate it into the world with the fixed orientation
        let bw = rec.samples()[0].orient.rotate(b);
        let expect = 0.5 * bw.x.hypot(bw.y) * horizon * horizon;
        assert!((end[0].hypot(end[1]) - expect).abs() < 1e-6 * expect, "{end:?} vs {expect}");
    }

    #[test]
    fn constant_rate_gyro_heading_is_linear() {
        let rate = 0.3;
        let samples = (0..400)
            .map(|i| {
                let t = i as f64 / 200.0;
                ImuSample {
                    t,
                    acc: Vec3::gravity(),
                    gyro: Vec3::new(0.0, 0.0, rate),
                    mag: yaw_rotation(-rate * t).rotate(Vec3::new(0.0, 20.0, -40.0)),
                    orient: yaw_rotation(rate * t),
                    gt_pos: None,
                }
            })
            .collect();
        let rec = SequenceRecord::new("spin", samples).unwrap();
        for (s, y) in rec.samples().iter().zip(gyro_heading(&rec).unwrap()) {
            assert!((wrap_angle(y - rate * s.t)).abs() < 1e-12);
        }
        for (s, y) in rec.samples().iter().zip(mag_heading(&rec).unwrap()) {
            assert!((wrap_angle(y - rate * s.t)).abs() < 1e-9);
        }
    }

    #[test]
    fn mag_heading_ignores_tilt() {
        let p = SynthParams {
            duration: 20.0,
            waypoints: 6,
            tilt_amp: 0.3,
            tilt_freq: 0.7,
            seed: 5,
            ..SynthParams::default()
        }
        .noiseless();
        let rec = synth_sequence(&p).unwrap();
        for (s, y) in rec.samples().iter().zip(mag_heading(&rec).unwrap()) {
            assert!(wrap_angle(y - s.orient.yaw()).abs() < 1e-9);
        }
    }

    #[test]
    fn gyro_bias_grows_mag_stays_bounded() {
        let p = SynthParams {
            duration: 120.0,
            waypoints: 30,
            bias_gyro: Vec3::new(0.0, 0.0, 0.002),
            seed: 2,
            ..SynthParams::default()
        };
        let (rec, truth) = synth_with_truth(&p).unwrap();
        let gyro = gyro_heading(&rec).unwrap();
        let mag = mag_heading(&rec).unwrap();
        let n = rec.len();
        let err_end = wrap_angle(gyro[n - 1] - truth.orient[n - 1].yaw()).abs();
        assert!((err_end - 0.002 * rec.duration()).abs() < 0.03, "gyro drift {err_end}");
        let worst_mag = (0..n)
            .map(|i| wrap_angle(mag[i] - truth.orient[i].yaw()).abs())
            .fold(0.0, f64::max);
        assert!(worst_mag < 0.1, "mag {worst_mag}");
    }

    #[test]
    fn field_magnitude_gate_rejects_distortion() {
        let (rec, truth) = synth_with_truth(&SynthParams {
            duration: 300.0,
            waypoints: 60,
            random_patches: 4,
            seed: 21,
            ..SynthParams::default()
        })
        .unwrap();
        let rmse = |cfg: EkfConfig| {
            let q = ekf_orientations(&rec, &cfg).unwrap();
            let s: f64 = q.iter().zip(&truth.orient).map(|(a, b)| wrap_angle(a.yaw() - b.yaw()).powi(2)).sum();
            (s / q.len() as f64).sqrt()
        };
        let gated = rmse(EkfConfig::default());
        let open = rmse(EkfConfig { mag_gate: 1e9, ..EkfConfig::default() });
        assert!(gated < open, "gated {gated}, ungated {open}");
    }

    #[test]
    fn ekf_without_trust_matches_ndi() {
        let rec = synth_sequence(&SynthParams {
            duration: 20.0,
            waypoints: 8,
            ..SynthParams::default()
        })
        .unwrap();
        let cfg = EkfConfig {
            acc_noise: 1e12,
            mag_noise: 1e12,
            acc_gate: 1e9,
            ..EkfConfig::default()
        };
        let a = ekf_track(&rec, &cfg).unwrap();
        let b = ndi_track(&rec).unwrap();
        for (x, y) in a.pos.iter().zip(&b.pos) {
            assert!(planar_dist(*x, *y) < 1e-6);
        }
    }

    #[test]
    fn ekf_without_mag_equals_acc_only_filter() {
        let rec = synth_sequence(&SynthParams {
            duration: 10.0,
            waypoints: 5,
            ..SynthParams::default()
        })
        .unwrap();
        let off = EkfConfig {
            use_mag: false,
            ..EkfConfig::default()
        };
        let huge = EkfConfig {
            use_mag: true,
            mag_noise: 1e15,
            ..EkfConfig::default()
        };
        let a = ekf_orientations(&rec, &off).unwrap();
        let b = ekf_orientations(&rec, &huge).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.angle_to(y) < 1e-9);
        }
    }

    #[test]
    fn ekf_heading_tracks_biased_gyro() {
        let p = SynthParams {
            bias_gyro: Vec3::new(0.0, 0.0, 0.002),
            ..SynthParams {
                duration: 60.0,
                waypoints: 20,
                seed: 8,
                ..SynthParams::default()
            }
            .noiseless()
        };
        let (rec, truth) = synth_with_truth(&p).unwrap();
        let rmse = |q: &[Quaternion]| {
            let s: f64 = q.iter().zip(&truth.orient).map(|(a, b)| wrap_angle(a.yaw() - b.yaw()).powi(2)).sum();
            (s / q.len() as f64).sqrt()
        };
        let e = rmse(&ekf_orientations(&rec, &EkfConfig::default()).unwrap());
        let g = rmse(&gyro_orientations(&rec).unwrap());
        assert!(e < 0.5 * g, "ekf {e}, gyro {g}");
    }

    /// Spins and rocks in place, so the accelerometer sees only gravity.
    fn rocking_record(bias: f64) -> (SequenceRecord, Vec<Quaternion>) {
        let field = Vec3::new(0.0, 20.0, -40.0);
        let (mut samples, mut truth) = (Vec::new(), Vec::new());
        for i in 0..4000 {
            let t = i as f64 / 200.0;
            let (psi, dpsi) = (0.8 * (0.3 * t).sin(), 0.24 * (0.3 * t).cos());
            let (r, dr) = (0.2 * (1.1 * t).sin(), 0.22 * (1.1 * t).cos());
            let roll = Quaternion::from_euler(r, 0.0, 0.0);
            let q = yaw_rotation(psi) * roll;
            let omega = roll.conjugate().rotate(Vec3::new(0.0, 0.0, dpsi)) + Vec3::new(dr, 0.0, 0.0);
            samples.push(ImuSample {
                t,
                acc: q.conjugate().rotate(Vec3::gravity()),
                gyro: omega + Vec3::new(0.0, 0.0, bias),
                mag: q.conjugate().rotate(field),
                orient: q,
                gt_pos: None,
            });
            truth.push(q);
        }
        (SequenceRecord::new("rock", samples).unwrap(), truth)
    }

    #[test]
    fn ekf_never_worse_than_gyro_without_linear_acceleration() {
        for bias in [0.0, 0.002] {
            let (rec, truth) = rocking_record(bias);
            let e = ekf_orientations(&rec, &EkfConfig::default()).unwrap();
            let g = gyro_orientations(&rec).unwrap();
            for i in 0..rec.len() {
                let ee = wrap_angle(e[i].yaw() - truth[i].yaw()).abs();
                let eg = wrap_angle(g[i].yaw() - truth[i].yaw()).abs();
                assert!(ee <= eg + 1e-5, "bias {bias}, sample {i}: ekf {ee}, gyro {eg}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let rec = synth_sequence(&SynthParams {
            duration: 2.0,
            waypoints: 2,
            ..SynthParams::default()
        })
        .unwrap();
        assert!(ekf_track(&rec, &EkfConfig { acc_noise: 0.0, ..EkfConfig::default() }).is_err());
        assert!(ndi_track(&rec.truncated(1).unwrap()).is_err());
    }

    #[test]
    fn eigenvalue_helper() {
        let p = Matrix6::from_diagonal(&Vector6::new(3.0, 2.0, 5.0, 1e-3, 4.0, 9.0));
        assert!((min_eigenvalue(&p) - 1e-3).abs() < 1e-15);
    }
}
