//! Bound point clouds and the `BPC1` text format.

use std::io::{BufRead, Write};

use crate::codec::canonical_sort;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::scalar::Scalar;

/// Canonical-space point carrying the index of the template face it is bound to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint<T> {
    pub position: Point3<T>,
    pub binding: u32,
}

impl<T: Scalar> BoundPoint<T> {
    pub fn new(x: T, y: T, z: T, binding: u32) -> Self {
        Self {
            position: Point3::new(x, y, z),
            binding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundPointCloud<T> {
    pub points: Vec<BoundPoint<T>>,
}

impl<T: Scalar> BoundPointCloud<T> {
    pub fn new(points: Vec<BoundPoint<T>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the cloud invariants: non-empty, finite coordinates inside the
    /// canonical box and bindings below `faces`.
    pub fn validate(&self, faces: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::TooFewPoints { min: 1, got: 0 });
        }
        for p in &self.points {
            if !p.position.is_finite() || p.position.max_abs() > T::one() {
                return Err(Error::format(
                    "BPC1",
                    format!("point {:?} outside the canonical box", p.position),
                ));
            }
            if p.binding as usize >= faces {
                return Err(Error::BindingOutOfRange {
                    binding: p.binding as usize,
                    faces,
                });
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<Point3<T>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn cast<U: Scalar>(&self) -> BoundPointCloud<U> {
        BoundPointCloud::new(
            self.points
                .iter()
                .map(|p| BoundPoint {
                    position: p.position.cast(),
                    binding: p.binding,
                })
                .collect(),
        )
    }
}

/// Writes `BPC1`: header `BPC1 <N> <F>`, then `x y z b` per point in canonical order.
pub fn write_bpc<T: Scalar, W: Write>(
    out: &mut W,
    cloud: &BoundPointCloud<T>,
    faces: usize,
    levels: u32,
) -> Result<()> {
    let sorted = canonical_sort(cloud, levels);
    writeln!(out, "BPC1 {} {}", sorted.len(), faces)?;
    for p in &sorted.points {
        writeln!(
            out,
            "{:.8e} {:.8e} {:.8e} {}",
            p.position.x.to_f64_lossy(),
            p.position.y.to_f64_lossy(),
            p.position.z.to_f64_lossy(),
            p.binding
        )?;
    }
    Ok(())
}

/// Reads `BPC1`, returning the cloud and the face count from the header.
pub fn read_bpc<T: Scalar, R: BufRead>(input: R) -> Result<(BoundPointCloud<T>, usize)> {
    let bad = |r: String| Error::format("BPC1", r);
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let mut head = header.split_whitespace();
    if head.next() != Some("BPC1") {
        return Err(bad("missing magic".into()));
    }
    let n: usize = head
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad point count".into()))?;
    let faces: usize = head
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad face count".into()))?;
    let mut points = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(format!("line {}: expected 4 fields", i + 2)));
        }
        let coord = |s: &str| -> Result<T> {
            s.parse::<f64>()
                .map(T::lit)
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))
        };
        let binding: u32 = f[3]
            .parse()
            .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        if binding as usize >= faces {
            return Err(Error::BindingOutOfRange {
                binding: binding as usize,
                faces,
            });
        }
        points.push(BoundPoint::new(coord(f[0])?, coord(f[1])?, coord(f[2])?, binding));
    }
    if points.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: points.len(),
        });
    }
    Ok((BoundPointCloud::new(points), faces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpc_round_trip_keeps_nine_digits() {
        let cloud = BoundPointCloud::new(vec![
            BoundPoint::new(0.123456789, -0.5, 0.25, 3),
            BoundPoint::new(-0.75, -0.9, 0.0, 7),
        ]);
        let mut buf = Vec::new();
        write_bpc(&mut buf, &cloud, 10, 1024).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("BPC1 2 10\n"));
        let (back, faces) = read_bpc::<f64, _>(&buf[..]).unwrap();
        assert_eq!(faces, 10);
        // sorted by y: -0.9 first
        assert_eq!(back.points[0].binding, 7);
        assert!((back.points[1].position.x - 0.123456789).abs() < 1e-9);
    }

    #[test]
    fn bpc_rejects_bad_binding_and_count() {
        let text = "BPC1 1 4\n0 0 0 4\n";
        assert!(matches!(
            read_bpc::<f64, _>(text.as_bytes()),
            Err(Error::BindingOutOfRange { .. })
        ));
        let text = "BPC1 2 4\n0 0 0 1\n";
        assert!(matches!(
            read_bpc::<f64, _>(text.as_bytes()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn validate_checks_box_and_bindings() {
        let ok = BoundPointCloud::new(vec![BoundPoint::new(0.5f64, 0.5, 0.5, 1)]);
        assert!(ok.validate(2).is_ok());
        assert!(ok.validate(1).is_err());
        let out = BoundPointCloud::new(vec![BoundPoint::new(1.5f64, 0.0, 0.0, 0)]);
        assert!(out.validate(2).is_err());
        assert!(BoundPointCloud::<f64>::default().validate(2).is_err());
    }
}
