//! Quaternion and rotation primitives.
//!
//! Conventions shared by the whole crate:
//! - Hamilton product, scalar-first storage `(w, x, y, z)`.
//! - Active rotation: `q.rotate(v)` computes `q v q*`.
//! - A sample's orientation quaternion maps body-frame vectors into the
//!   world frame; its conjugate maps world into body.
//! - World frame is z-up, gravity `(0, 0, -9.81)` as a force on the body, so
//!   a resting accelerometer reads `+9.81` along world z.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gravity magnitude used throughout.
pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Vector from the world origin toward gravity's reaction, i.e. what a
    /// level accelerometer at rest measures.
    pub fn gravity() -> Vec3 {
        Vec3::new(0.0, 0.0, GRAVITY)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.0[i])
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

/// Cross-product matrix: `skew(w) v == w × v`.
pub fn skew(w: Vec3) -> Mat3 {
    Mat3([[0.0, -w.z, w.y], [w.z, 0.0, -w.x], [-w.y, w.x, 0.0]])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Same rotation with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Raw Hamilton product without renormalization.
    pub fn hamilton(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !n.is_finite() || !angle.is_finite() {
            return Err(Error::invalid(format!("axis {axis:?} / angle {angle} cannot define a rotation")));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self::new(c, axis.x / n * s, axis.y / n * s, axis.z / n * s))
    }

    /// Exponential map of a rotation vector (axis × angle).
    pub fn from_rotation_vector(rv: Vec3) -> Self {
        let angle = rv.norm();
        if angle < 1e-12 {
            // Second-order series keeps tiny increments unit-norm.
            let q = Self::new(1.0 - angle * angle / 8.0, 0.5 * rv.x, 0.5 * rv.y, 0.5 * rv.z);
            let n = q.norm();
            return Self::new(q.w / n, q.x / n, q.y / n, q.z / n);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / angle;
        Self::new(c, rv.x * k, rv.y * k, rv.z * k)
    }

    /// Intrinsic Z-Y-X (yaw, pitch, roll) composition: `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = (0.5 * roll).sin_cos();
        let (sp, cp) = (0.5 * pitch).sin_cos();
        let (sy, cy) = (0.5 * yaw).sin_cos();
        Self::new(
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        )
    }

    /// Rotates `v` by `q v q*` without validation.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // v + 2 u × (u × v + w v), with u the vector part.
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    /// Heading angle about world z (Z-Y-X convention), in `(-π, π]`.
    pub fn yaw(&self) -> f64 {
        let Quaternion { w, x, y, z } = *self;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    pub fn roll_pitch(&self) -> (f64, f64) {
        let Quaternion { w, x, y, z } = *self;
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
        (roll, pitch)
    }

    /// Rotation magnitude of `self* ⊗ other`, in radians.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let d = self.conjugate().hamilton(*other);
        2.0 * Vec3::new(d.x, d.y, d.z).norm().atan2(d.w.abs())
    }
}

/// Hamilton product, renormalized.
impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        let p = self.hamilton(b);
        let n = p.norm();
        Quaternion::new(p.w / n, p.x / n, p.y / n, p.z / n)
    }
}

fn check_quat(q: &Quaternion) -> Result<()> {
    if !q.is_finite() {
        return Err(Error::invalid(format!("non-finite quaternion {q:?}")));
    }
    Ok(())
}

/// Validated `q v q*`.
pub fn quat_rotate(q: Quaternion, v: Vec3) -> Result<Vec3> {
    check_quat(&q)?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("non-finite vector {v:?}")));
    }
    Ok(q.rotate(v))
}

/// Validated, renormalized Hamilton product.
pub fn quat_multiply(a: Quaternion, b: Quaternion) -> Result<Quaternion> {
    check_quat(&a)?;
    check_quat(&b)?;
    Ok(a * b)
}

pub fn quat_conjugate(q: Quaternion) -> Quaternion {
    q.conjugate()
}

pub fn quat_normalize(q: Quaternion) -> Result<Quaternion> {
    q.normalize()
}

pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Result<Quaternion> {
    Quaternion::from_axis_angle(axis, angle)
}

/// Rotation about world +z by `phi`.
pub fn yaw_rotation(phi: f64) -> Quaternion {
    let (s, c) = (0.5 * phi).sin_cos();
    Quaternion::new(c, 0.0, 0.0, s)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Rotates a planar vector counter-clockwise by `phi`.
pub fn rotate_planar(v: [f64; 2], phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}
