//! Renderable Gaussians and the `GAU1` binary format.

use std::io::{Read, Write};

use crate::binio::ByteCursor;
use crate::error::{Error, Result};
use crate::geometry::{Point3, Quat};
use crate::scalar::Scalar;

/// Global-space Gaussian with RGB color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian<T> {
    pub position: Point3<T>,
    pub rotation: Quat<T>,
    pub scale: Point3<T>,
    pub color: [T; 3],
    pub opacity: T,
}

impl<T: Scalar> Gaussian<T> {
    pub fn to_array(&self) -> [T; 14] {
        let p = self.position;
        let q = self.rotation;
        let s = self.scale;
        let c = self.color;
        [
            p.x, p.y, p.z, q.w, q.x, q.y, q.z, s.x, s.y, s.z, c[0], c[1], c[2], self.opacity,
        ]
    }

    pub fn from_array(a: [T; 14]) -> Self {
        Self {
            position: Point3::new(a[0], a[1], a[2]),
            rotation: Quat::new(a[3], a[4], a[5], a[6]),
            scale: Point3::new(a[7], a[8], a[9]),
            color: [a[10], a[11], a[12]],
            opacity: a[13],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Gaussian<U> {
        let a = self.to_array().map(|v| U::lit(v.to_f64_lossy()));
        Gaussian::from_array(a)
    }

    pub fn is_valid(&self) -> bool {
        let a = self.to_array();
        a.iter().all(|v| v.is_finite())
            && self.scale.x > T::zero()
            && self.scale.y > T::zero()
            && self.scale.z > T::zero()
            && self.opacity >= T::zero()
            && self.opacity <= T::one()
            && self.color.iter().all(|&c| c >= T::zero() && c <= T::one())
    }
}

const GAU_MAGIC: &[u8; 4] = b"GAU1";

/// `GAU1`: magic, u32 count, then 14 f32 per Gaussian
/// (position, quaternion wxyz, scale, color, opacity).
pub fn write_gau<T: Scalar, W: Write>(out: &mut W, gs: &[Gaussian<T>]) -> Result<()> {
    out.write_all(GAU_MAGIC)?;
    out.write_all(&(gs.len() as u32).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(gs.len() * 56);
    for g in gs {
        for v in g.to_array() {
            bytes.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_gau<T: Scalar, R: Read>(mut input: R) -> Result<Vec<Gaussian<T>>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = ByteCursor::new(&buf, "GAU1");
    if cur.take(4)? != GAU_MAGIC {
        return Err(Error::format("GAU1", "bad magic"));
    }
    let n = cur.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut a = [T::zero(); 14];
        for v in a.iter_mut() {
            *v = T::lit(cur.f32()? as f64);
        }
        out.push(Gaussian::from_array(a));
    }
    if !cur.is_empty() {
        return Err(Error::format("GAU1", "trailing bytes"));
    }
    Ok(out)
}
