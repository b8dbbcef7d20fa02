//! Vectors, rotations and the triangle-local ↔ global Gaussian transform.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minimum triangle area accepted by [`face_transform`] and [`barycentric`].
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (T::one() / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn cast<U: Scalar>(self) -> Point3<U> {
        Point3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Scalar> Add for Point3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> AddAssign for Point3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> Sub for Point3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Neg for Point3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Scalar> Mul<T> for Point3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Scalar> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn from_cols(c0: Point3<T>, c1: Point3<T>, c2: Point3<T>) -> Self {
        Mat3([[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]])
    }

    pub fn col(&self, j: usize) -> Point3<T> {
        Point3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Point3<T>) -> Point3<T> {
        let m = &self.0;
        Point3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn max_abs_diff(&self, o: &Self) -> T {
        let mut d = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.0[i][j] - o.0[i][j]).abs());
            }
        }
        d
    }

    /// Rotation about a unit axis scaled by the angle (Rodrigues).
    pub fn from_axis_angle(aa: Point3<T>) -> Self {
        let angle = aa.norm();
        if angle < T::lit(1e-12) {
            return Self::identity();
        }
        let k = aa * (T::one() / angle);
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        Mat3([
            [t * k.x * k.x + c, t * k.x * k.y - s * k.z, t * k.x * k.z + s * k.y],
            [t * k.x * k.y + s * k.z, t * k.y * k.y + c, t * k.y * k.z - s * k.x],
            [t * k.x * k.z - s * k.y, t * k.y * k.z + s * k.x, t * k.z * k.z + c],
        ])
    }
}

/// Scalar-first Hamilton quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = T::one() / self.norm();
        Self::new(self.w * n, self.x * n, self.y * n, self.z * n)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ o`.
    pub fn mul(self, o: Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation matrix of the (normalized) quaternion.
    pub fn to_mat3(self) -> Mat3<T> {
        let q = self.normalized();
        let two = T::lit(2.0);
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        let o = T::one();
        Mat3([
            [o - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
            [two * (x * y + w * z), o - two * (x * x + z * z), two * (y * z - w * x)],
            [two * (x * z - w * y), two * (y * z + w * x), o - two * (x * x + y * y)],
        ])
    }

    /// Quaternion of a rotation matrix, canonicalized to `w ≥ 0`.
    pub fn from_mat3(m: &Mat3<T>) -> Self {
        let m = &m.0;
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            Self::new(
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            )
        };
        let q = q.normalized();
        if q.w < T::zero() {
            Self::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        }
    }

    pub fn rotate(self, v: Point3<T>) -> Point3<T> {
        self.to_mat3().mul_vec(v)
    }

    pub fn cast<U: Scalar>(self) -> Quat<U> {
        Quat::new(
            U::lit(self.w.to_f64_lossy()),
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

/// Rigid frame plus uniform scale of a mesh triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Point3<T>,
    pub scale: T,
}

impl<T: Scalar> FaceTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Point3::zero(),
            scale: T::one(),
        }
    }
}

/// Gaussian parameters expressed in the frame of its parent triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGaussian<T> {
    pub position: Point3<T>,
    pub rotation: Quat<T>,
    pub scale: Point3<T>,
}

/// Gaussian parameters in canonical (or posed) world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalGaussian<T> {
    pub position: Point3<T>,
    pub rotation: Quat<T>,
    pub scale: Point3<T>,
}

fn triangle_area<T: Scalar>(v0: Point3<T>, v1: Point3<T>, v2: Point3<T>) -> T {
    (v1 - v0).cross(v2 - v0).norm() * T::lit(0.5)
}

/// Frame of a triangle: columns `[ê₁, n̂, ê₁×n̂]`, centroid translation and
/// scale `(‖v1−v0‖ + h)/2` where `h` is the height of `v2` over edge `v0v1`.
pub fn face_transform<T: Scalar>(
    v0: Point3<T>,
    v1: Point3<T>,
    v2: Point3<T>,
) -> Result<FaceTransform<T>> {
    let area = triangle_area(v0, v1, v2);
    if !(area > T::lit(MIN_TRIANGLE_AREA)) {
        return Err(Error::DegenerateTriangle {
            area: area.to_f64_lossy(),
        });
    }
    let edge = v1 - v0;
    let edge_len = edge.norm();
    let e1 = edge * (T::one() / edge_len);
    let normal = edge.cross(v2 - v0).normalized();
    let e3 = e1.cross(normal);
    let height = T::lit(2.0) * area / edge_len;
    Ok(FaceTransform {
        rotation: Mat3::from_cols(e1, normal, e3),
        translation: (v0 + v1 + v2) * T::lit(1.0 / 3.0),
        scale: (edge_len + height) * T::lit(0.5),
    })
}

/// `μ' = kRμ + T`, `r' = quat(R)⊗r`, `s' = ks`.
pub fn local_to_global<T: Scalar>(g: &LocalGaussian<T>, f: &FaceTransform<T>) -> GlobalGaussian<T> {
    let frame = Quat::from_mat3(&f.rotation);
    GlobalGaussian {
        position: f.rotation.mul_vec(g.position) * f.scale + f.translation,
        rotation: frame.mul(g.rotation).normalized(),
        scale: g.scale * f.scale,
    }
}

/// Inverse of [`local_to_global`] for the same face transform.
pub fn global_to_local<T: Scalar>(g: &GlobalGaussian<T>, f: &FaceTransform<T>) -> LocalGaussian<T> {
    let frame = Quat::from_mat3(&f.rotation);
    let inv_k = T::one() / f.scale;
    LocalGaussian {
        position: f.rotation.transpose().mul_vec(g.position - f.translation) * inv_k,
        rotation: frame.conjugate().mul(g.rotation).normalized(),
        scale: g.scale * inv_k,
    }
}

/// Barycentric coordinates of the projection of `p` onto the triangle plane.
///
/// Weights are not clamped: points outside the triangle get negative weights.
pub fn barycentric<T: Scalar>(
    p: Point3<T>,
    v0: Point3<T>,
    v1: Point3<T>,
    v2: Point3<T>,
) -> Result<[T; 3]> {
    let area = triangle_area(v0, v1, v2);
    if !(area > T::lit(MIN_TRIANGLE_AREA)) {
        return Err(Error::DegenerateTriangle {
            area: area.to_f64_lossy(),
        });
    }
    let e0 = v1 - v0;
    let e1 = v2 - v0;
    let d = p - v0;
    let d00 = e0.dot(e0);
    let d01 = e0.dot(e1);
    let d11 = e1.dot(e1);
    let d20 = d.dot(e0);
    let d21 = d.dot(e1);
    let denom = d00 * d11 - d01 * d01;
    let b1 = (d11 * d20 - d01 * d21) / denom;
    let b2 = (d00 * d21 - d01 * d20) / denom;
    Ok([T::one() - b1 - b2, b1, b2])
}
