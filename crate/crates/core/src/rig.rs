//! Mini parametric head template, barycentric attribute binding and
//! blendshape + linear-blend-skinning animation.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::ByteCursor;
use crate::cloud::BoundPointCloud;
use crate::error::{Error, Result};
use crate::geometry::{
    barycentric, face_transform, global_to_local, local_to_global, FaceTransform, GlobalGaussian,
    LocalGaussian, Mat3, Point3,
};
use crate::scalar::Scalar;

pub const JOINT_ROOT: usize = 0;
pub const JOINT_NECK: usize = 1;
pub const JOINT_JAW: usize = 2;

/// Largest allowed `|ψ_k|`.
pub const MAX_EXPRESSION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Joint<T> {
    pub parent: Option<usize>,
    /// Rest position in canonical space; the joint rotates about this point.
    pub rest: Point3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigTemplate<T> {
    pub vertices: Vec<Point3<T>>,
    pub faces: Vec<[u32; 3]>,
    /// `V × J`, row-major.
    pub lbs_weights: Vec<T>,
    /// `V × K × 3`, row-major.
    pub blendshapes: Vec<T>,
    pub joints: Vec<Joint<T>>,
    pub num_expressions: usize,
}

impl<T: Scalar> RigTemplate<T> {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn weights(&self, v: usize) -> &[T] {
        let j = self.num_joints();
        &self.lbs_weights[v * j..(v + 1) * j]
    }

    /// Displacement of vertex `v` under blendshape `k`.
    pub fn blendshape(&self, v: usize, k: usize) -> Point3<T> {
        let base = (v * self.num_expressions + k) * 3;
        let s = &self.blendshapes[base..base + 3];
        Point3::new(s[0], s[1], s[2])
    }

    pub fn face_vertices(&self, f: usize) -> [Point3<T>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Checks face indices, weight rows and the canonical box.
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Error::format("RIG1", r);
        let v = self.num_vertices();
        let j = self.num_joints();
        if self.lbs_weights.len() != v * j || self.blendshapes.len() != v * self.num_expressions * 3 {
            return Err(bad("array sizes disagree with counts".into()));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&x| x as usize >= v) || f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(bad(format!("face {i} references invalid vertices")));
            }
        }
        for i in 0..v {
            let row = self.weights(i);
            let sum: T = row.iter().copied().sum();
            if row.iter().any(|&w| w < T::zero()) || (sum - T::one()).abs() > T::lit(1e-6) {
                return Err(bad(format!("weight row {i} is not a partition of unity")));
            }
            if self.vertices[i].max_abs() > T::one() {
                return Err(bad(format!("vertex {i} outside the canonical box")));
            }
        }
        for (i, jt) in self.joints.iter().enumerate() {
            if jt.parent.is_some_and(|p| p >= i) {
                return Err(bad(format!("joint {i} parent must precede it")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> RigTemplate<U> {
        let c = |v: &T| U::lit(v.to_f64_lossy());
        RigTemplate {
            vertices: self.vertices.iter().map(|p| p.cast()).collect(),
            faces: self.faces.clone(),
            lbs_weights: self.lbs_weights.iter().map(c).collect(),
            blendshapes: self.blendshapes.iter().map(c).collect(),
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    parent: j.parent,
                    rest: j.rest.cast(),
                })
                .collect(),
            num_expressions: self.num_expressions,
        }
    }

    pub fn face_area(&self, f: usize) -> T {
        let [a, b, c] = self.face_vertices(f);
        (b - a).cross(c - a).norm() * T::lit(0.5)
    }

    pub fn face_normal(&self, f: usize) -> Point3<T> {
        let [a, b, c] = self.face_vertices(f);
        (b - a).cross(c - a).normalized()
    }

    pub fn face_centroid(&self, f: usize) -> Point3<T> {
        let [a, b, c] = self.face_vertices(f);
        (a + b + c) * T::lit(1.0 / 3.0)
    }

    /// Face transforms of the canonical (rest) mesh.
    pub fn canonical_face_transforms(&self) -> Result<Vec<FaceTransform<T>>> {
        face_transforms(&self.vertices, &self.faces)
    }
}

pub fn face_transforms<T: Scalar>(
    vertices: &[Point3<T>],
    faces: &[[u32; 3]],
) -> Result<Vec<FaceTransform<T>>> {
    faces
        .iter()
        .map(|&[a, b, c]| {
            face_transform(vertices[a as usize], vertices[b as usize], vertices[c as usize])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseExpression<T> {
    /// Axis-angle rotation per joint, radians.
    pub pose: Vec<Point3<T>>,
    pub expression: Vec<T>,
}

impl<T: Scalar> PoseExpression<T> {
    pub fn rest(joints: usize, expressions: usize) -> Self {
        Self {
            pose: vec![Point3::zero(); joints],
            expression: vec![T::zero(); expressions],
        }
    }

    /// Clamps `|ψ_k| ≤ 3` and rotation angles to `π`.
    pub fn clamped(&self) -> Self {
        let lim = T::lit(MAX_EXPRESSION);
        Self {
            pose: self
                .pose
                .iter()
                .map(|&aa| {
                    let n = aa.norm();
                    if n > T::PI() {
                        aa * (T::PI() / n)
                    } else {
                        aa
                    }
                })
                .collect(),
            expression: self.expression.iter().map(|&e| e.max(-lim).min(lim)).collect(),
        }
    }
}

/// Per-point binding with interpolated rig attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBinding<T> {
    pub face: u32,
    pub barycentric: [T; 3],
    /// Interpolated LBS weights, length `J`.
    pub weights: Vec<T>,
    /// Interpolated blendshape rows, `K × 3`.
    pub blendshapes: Vec<Point3<T>>,
}

#[derive(Clone, Copy)]
struct Affine<T> {
    linear: Mat3<T>,
    offset: Point3<T>,
}

impl<T: Scalar> Affine<T> {
    fn apply(&self, p: Point3<T>) -> Point3<T> {
        self.linear.mul_vec(p) + self.offset
    }

    fn then(&self, outer: &Affine<T>) -> Affine<T> {
        Affine {
            linear: outer.linear.mul_mat(&self.linear),
            offset: outer.apply(self.offset),
        }
    }
}

/// Skinning transform of every joint: rotation about the joint's rest
/// position composed with all ancestors.
fn joint_transforms<T: Scalar>(tpl: &RigTemplate<T>, pose: &[Point3<T>]) -> Vec<Affine<T>> {
    let mut out: Vec<Affine<T>> = Vec::with_capacity(tpl.num_joints());
    for (j, joint) in tpl.joints.iter().enumerate() {
        let rot = pose.get(j).map_or_else(Mat3::identity, |&aa| Mat3::from_axis_angle(aa));
        let c = joint.rest;
        let local = Affine {
            linear: rot,
            offset: c - rot.mul_vec(c),
        };
        out.push(match joint.parent {
            Some(p) => local.then(&out[p]),
            None => local,
        });
    }
    out
}

/// `p + Σ_j w_j (G_j p − p) / Σ_j w_j`: exact at rest and insensitive to the
/// f32 rounding of stored weight rows.
fn blend<T: Scalar>(transforms: &[Affine<T>], weights: &[T], p: Point3<T>) -> Point3<T> {
    let total: T = weights.iter().copied().sum();
    let mut disp = Point3::zero();
    for (t, &w) in transforms.iter().zip(weights) {
        if w != T::zero() {
            disp += (t.apply(p) - p) * w;
        }
    }
    p + disp * (T::one() / total)
}

/// Blendshapes in canonical space, then LBS over the joint chain.
pub fn deform_template<T: Scalar>(tpl: &RigTemplate<T>, pe: &PoseExpression<T>) -> Vec<Point3<T>> {
    let pe = pe.clamped();
    let transforms = joint_transforms(tpl, &pe.pose);
    (0..tpl.num_vertices())
        .map(|v| {
            let mut p = tpl.vertices[v];
            for (k, &psi) in pe.expression.iter().enumerate().take(tpl.num_expressions) {
                if psi != T::zero() {
                    p += tpl.blendshape(v, k) * psi;
                }
            }
            blend(&transforms, tpl.weights(v), p)
        })
        .collect()
}

pub fn bind_point<T: Scalar>(
    position: Point3<T>,
    face: u32,
    tpl: &RigTemplate<T>,
) -> Result<PointBinding<T>> {
    if face as usize >= tpl.num_faces() {
        return Err(Error::BindingOutOfRange {
            binding: face as usize,
            faces: tpl.num_faces(),
        });
    }
    let idx = tpl.faces[face as usize];
    let [a, b, c] = tpl.face_vertices(face as usize);
    let bary = barycentric(position, a, b, c)?;
    let j = tpl.num_joints();
    let mut weights = vec![T::zero(); j];
    let mut shapes = vec![Point3::zero(); tpl.num_expressions];
    for (corner, &v) in idx.iter().enumerate() {
        let bw = bary[corner];
        for (w, &src) in weights.iter_mut().zip(tpl.weights(v as usize)) {
            *w = *w + bw * src;
        }
        for (k, s) in shapes.iter_mut().enumerate() {
            *s += tpl.blendshape(v as usize, k) * bw;
        }
    }
    Ok(PointBinding {
        face,
        barycentric: bary,
        weights,
        blendshapes: shapes,
    })
}

/// Barycentric binding of every point to its face, with interpolated
/// LBS weights and blendshape rows.
pub fn bind_points<T: Scalar>(
    cloud: &BoundPointCloud<T>,
    tpl: &RigTemplate<T>,
) -> Result<Vec<PointBinding<T>>> {
    cloud
        .points
        .iter()
        .map(|p| bind_point(p.position, p.binding, tpl))
        .collect()
}

/// Skins a point directly with its interpolated weights and blendshapes,
/// as if it were a template vertex.
pub fn skin_point<T: Scalar>(
    position: Point3<T>,
    binding: &PointBinding<T>,
    tpl: &RigTemplate<T>,
    pe: &PoseExpression<T>,
) -> Point3<T> {
    let pe = pe.clamped();
    let mut p = position;
    for (s, &psi) in binding.blendshapes.iter().zip(&pe.expression) {
        p += *s * psi;
    }
    blend(&joint_transforms(tpl, &pe.pose), &binding.weights, p)
}

/// Local Gaussians relative to the canonical faces they are bound to.
pub fn locals_from_canonical<T: Scalar>(
    globals: &[GlobalGaussian<T>],
    faces: &[u32],
    tpl: &RigTemplate<T>,
) -> Result<Vec<LocalGaussian<T>>> {
    let transforms = tpl.canonical_face_transforms()?;
    globals
        .iter()
        .zip(faces)
        .map(|(g, &f)| {
            let t = transforms.get(f as usize).ok_or(Error::BindingOutOfRange {
                binding: f as usize,
                faces: transforms.len(),
            })?;
            Ok(global_to_local(g, t))
        })
        .collect()
}

/// Poses the template and carries each local Gaussian with the transform of
/// its posed parent face.
pub fn animate_gaussians<T: Scalar>(
    bindings: &[PointBinding<T>],
    locals: &[LocalGaussian<T>],
    tpl: &RigTemplate<T>,
    pe: &PoseExpression<T>,
) -> Result<Vec<GlobalGaussian<T>>> {
    if bindings.len() != locals.len() {
        return Err(Error::LengthMismatch {
            expected: bindings.len(),
            got: locals.len(),
        });
    }
    let posed = deform_template(tpl, pe);
    let mut cache: HashMap<u32, FaceTransform<T>> = HashMap::new();
    bindings
        .iter()
        .zip(locals)
        .map(|(b, l)| {
            let f = match cache.get(&b.face) {
                Some(f) => *f,
                None => {
                    let [i, j, k] = tpl.faces[b.face as usize];
                    let f = face_transform(posed[i as usize], posed[j as usize], posed[k as usize])?;
                    cache.insert(b.face, f);
                    f
                }
            };
            Ok(local_to_global(l, &f))
        })
        .collect()
}

fn icosphere(min_faces: usize) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    verts.iter_mut().for_each(|v| *v = unit(*v));
    while faces.len() < min_faces {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<[f64; 3]>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a as usize], verts[b as usize]);
                verts.push(unit([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]));
                (verts.len() - 1) as u32
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Rounds through `f32` so a template survives the `RIG1` round trip bit-exactly.
fn f32_exact<T: Scalar>(v: f64) -> T {
    T::lit(v as f32 as f64)
}

/// Deterministic head template: a subdivided icosphere squashed into a
/// head-like ellipsoid, root/neck/jaw joints with smooth weight falloff and
/// `expressions` low-frequency blendshapes of amplitude at most 0.05.
pub fn build_template<T: Scalar>(
    seed: u64,
    min_faces: usize,
    joints: usize,
    expressions: usize,
) -> Result<RigTemplate<T>> {
    if min_faces < 20 {
        return Err(Error::InvalidConfig(format!("template needs at least 20 faces, got {min_faces}")));
    }
    if !(1..=3).contains(&joints) {
        return Err(Error::InvalidConfig(format!("template supports 1..=3 joints, got {joints}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sphere, faces) = icosphere(min_faces);

    // head ellipsoid with a seeded low-frequency bulge
    let radii = [0.62, 0.8, 0.7];
    let phase: [f64; 3] = [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)];
    let bulge = rng.gen_range(0.01..0.03);
    let verts: Vec<[f64; 3]> = sphere
        .iter()
        .map(|u| {
            let wobble = 1.0
                + bulge * ((2.0 * u[0] + phase[0]).sin() + (2.0 * u[1] + phase[1]).sin() * (u[2] + phase[2]).cos());
            // narrower chin: lower front taper
            let taper = 1.0 - 0.12 * smoothstep(0.0, -0.9, u[1]);
            [u[0] * radii[0] * wobble * taper, u[1] * radii[1] * wobble, u[2] * radii[2] * wobble]
        })
        .collect();

    let joint_list: Vec<Joint<T>> = [
        (None, [0.0, -0.55, -0.05]),
        (Some(JOINT_ROOT), [0.0, -0.35, 0.0]),
        (Some(JOINT_NECK), [0.0, -0.2, 0.15]),
    ]
    .iter()
    .take(joints)
    .map(|&(parent, r)| Joint {
        parent,
        rest: Point3::new(f32_exact(r[0]), f32_exact(r[1]), f32_exact(r[2])),
    })
    .collect();

    let mut weights = Vec::with_capacity(verts.len() * joints);
    for v in &verts {
        let mut raw = [1.0, 0.0, 0.0];
        if joints > 1 {
            raw[1] = 2.0 * smoothstep(-0.45, -0.7, v[1]);
        }
        if joints > 2 {
            raw[2] = 4.0 * smoothstep(-0.15, -0.4, v[1]) * smoothstep(0.0, 0.3, v[2]);
        }
        let mut row: Vec<f64> = raw[..joints].to_vec();
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= sum);
        // drop negligible influences so unaffected regions stay exactly rigid
        row.iter_mut().for_each(|w| {
            if *w < 1e-2 {
                *w = 0.0
            }
        });
        let row: Vec<f32> = {
            let sum: f64 = row.iter().sum();
            row.iter().map(|w| (w / sum) as f32).collect()
        };
        // absorb f32 rounding into the root weight
        let rest: f32 = row[1..].iter().sum();
        weights.push(T::lit((1.0f32 - rest) as f64));
        weights.extend(row[1..].iter().map(|&w| T::lit(w as f64)));
    }

    let mut shapes = vec![T::zero(); verts.len() * expressions * 3];
    for k in 0..expressions {
        let freq: Vec<[f64; 3]> = (0..3)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..6.28)).collect();
        let amplitude = rng.gen_range(0.02..0.05);
        let field: Vec<[f64; 3]> = verts
            .iter()
            .map(|v| {
                let front = smoothstep(-0.1, 0.4, v[2]);
                let mut d = [0.0; 3];
                for c in 0..3 {
                    let f = freq[c];
                    d[c] = front * (f[0] * v[0] + f[1] * v[1] + f[2] * v[2] + phases[c]).sin();
                }
                d
            })
            .collect();
        let peak = field
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
            .max(1e-9);
        for (v, d) in field.iter().enumerate() {
            for c in 0..3 {
                shapes[(v * expressions + k) * 3 + c] = f32_exact(d[c] * amplitude / peak);
            }
        }
    }

    let tpl = RigTemplate {
        vertices: verts
            .iter()
            .map(|v| Point3::new(f32_exact(v[0]), f32_exact(v[1]), f32_exact(v[2])))
            .collect(),
        faces,
        lbs_weights: weights,
        blendshapes: shapes,
        joints: joint_list,
        num_expressions: expressions,
    };
    tpl.validate()?;
    Ok(tpl)
}

const RIG_MAGIC: &[u8; 4] = b"RIG1";
const RIG_VERSION: u32 = 1;

/// `RIG1`: magic, version, counts (V, F, J, K), f32 vertices, weights and
/// blendshapes, u32 faces, then per joint an i32 parent (−1 for root) and
/// its f32 rest position.
pub fn write_rig<T: Scalar, W: Write>(out: &mut W, tpl: &RigTemplate<T>) -> Result<()> {
    out.write_all(RIG_MAGIC)?;
    for v in [
        RIG_VERSION,
        tpl.num_vertices() as u32,
        tpl.num_faces() as u32,
        tpl.num_joints() as u32,
        tpl.num_expressions as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    let f32s = |out: &mut W, vals: &mut dyn Iterator<Item = T>| -> Result<()> {
        for v in vals {
            out.write_all(&v.to_f32_lossy().to_le_bytes())?;
        }
        Ok(())
    };
    f32s(out, &mut tpl.vertices.iter().flat_map(|p| p.to_array()))?;
    f32s(out, &mut tpl.lbs_weights.iter().copied())?;
    f32s(out, &mut tpl.blendshapes.iter().copied())?;
    for f in &tpl.faces {
        for i in f {
            out.write_all(&i.to_le_bytes())?;
        }
    }
    for j in &tpl.joints {
        out.write_all(&j.parent.map_or(-1i32, |p| p as i32).to_le_bytes())?;
        f32s(out, &mut j.rest.to_array().into_iter())?;
    }
    Ok(())
}

pub fn read_rig<T: Scalar, R: Read>(mut input: R) -> Result<RigTemplate<T>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = ByteCursor::new(&buf, "RIG1");
    if cur.take(4)? != RIG_MAGIC {
        return Err(Error::format("RIG1", "bad magic"));
    }
    let version = cur.u32()?;
    if version != RIG_VERSION {
        return Err(Error::format("RIG1", format!("unsupported version {version}")));
    }
    let (v, f, j, k) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let mut vals = |n: usize| -> Result<Vec<T>> { (0..n).map(|_| cur.f32().map(|x| T::lit(x as f64))).collect() };
    let flat = vals(v * 3)?;
    let lbs_weights = vals(v * j)?;
    let blendshapes = vals(v * k * 3)?;
    let vertices = flat.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
    let faces = (0..f)
        .map(|_| Ok([cur.u32()?, cur.u32()?, cur.u32()?]))
        .collect::<Result<Vec<_>>>()?;
    let joints = (0..j)
        .map(|_| {
            let parent = cur.i32()?;
            let rest = Point3::new(
                T::lit(cur.f32()? as f64),
                T::lit(cur.f32()? as f64),
                T::lit(cur.f32()? as f64),
            );
            Ok(Joint {
                parent: (parent >= 0).then_some(parent as usize),
                rest,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !cur.is_empty() {
        return Err(Error::format("RIG1", "trailing bytes"));
    }
    let tpl = RigTemplate {
        vertices,
        faces,
        lbs_weights,
        blendshapes,
        joints,
        num_expressions: k,
    };
    tpl.validate()?;
    Ok(tpl)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::BoundPoint;
    use crate::geometry::Quat;

    fn tpl() -> RigTemplate<f64> {
        build_template(7, 320, 3, 8).unwrap()
    }

    fn random_bound_point(rng: &mut ChaCha8Rng, tpl: &RigTemplate<f64>) -> (Point3<f64>, u32) {
        let f = rng.gen_range(0..tpl.num_faces()) as u32;
        let [a, b, c] = tpl.face_vertices(f as usize);
        let (u, v) = (rng.gen_range(-0.2..1.0), rng.gen_range(-0.2..1.0));
        let n = tpl.face_normal(f as usize);
        (a + (b - a) * u + (c - a) * v + n * rng.gen_range(-0.05..0.05), f)
    }

    #[test]
    fn template_is_deterministic_and_valid() {
        let a = tpl();
        let b = tpl();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_rig(&mut ba, &a).unwrap();
        write_rig(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        assert!(a.num_faces() >= 320);
        assert_eq!(a.num_joints(), 3);
        a.validate().unwrap();
        for f in 0..a.num_faces() {
            assert!(a.face_area(f) > 1e-6);
        }
        let other = build_template::<f64>(8, 320, 3, 8).unwrap();
        assert_ne!(other.vertices, a.vertices);
    }

    #[test]
    fn template_meets_face_target() {
        for target in [20, 21, 100, 500] {
            let t = build_template::<f64>(1, target, 3, 2).unwrap();
            assert!(t.num_faces() >= target);
            t.validate().unwrap();
        }
        assert!(build_template::<f64>(1, 10, 3, 2).is_err());
    }

    #[test]
    fn blendshapes_are_bounded() {
        let t = tpl();
        for v in 0..t.num_vertices() {
            for k in 0..t.num_expressions {
                assert!(t.blendshape(v, k).norm() <= 0.05 + 1e-6);
            }
        }
    }

    #[test]
    fn rig_file_round_trip_is_exact() {
        let t = tpl();
        let mut buf = Vec::new();
        write_rig(&mut buf, &t).unwrap();
        let back: RigTemplate<f64> = read_rig(&buf[..]).unwrap();
        assert_eq!(back, t);
        buf.truncate(buf.len() - 1);
        assert!(read_rig::<f64, _>(&buf[..]).is_err());
    }

    #[test]
    fn binding_at_vertex_and_centroid() {
        let t = tpl();
        let f = 17;
        let [i0, i1, i2] = t.faces[f];
        let [a, b, c] = t.face_vertices(f);
        let at_v0 = bind_point(a, f as u32, &t).unwrap();
        for (w, &want) in at_v0.weights.iter().zip(t.weights(i0 as usize)) {
            assert!((w - want).abs() < 1e-12);
        }
        let centroid = bind_point((a + b + c) * (1.0 / 3.0), f as u32, &t).unwrap();
        for j in 0..3 {
            let want = (t.weights(i0 as usize)[j] + t.weights(i1 as usize)[j] + t.weights(i2 as usize)[j]) / 3.0;
            assert!((centroid.weights[j] - want).abs() < 1e-12);
        }
        assert!(matches!(
            bind_point(a, t.num_faces() as u32, &t),
            Err(Error::BindingOutOfRange { .. })
        ));
    }

    /// Dense oracle: a `V`-long barycentric selector vector times the full weight matrix.
    #[test]
    fn binding_matches_dense_oracle() {
        let t = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (p, f) = random_bound_point(&mut rng, &t);
            let got = bind_point(p, f, &t).unwrap();
            let mut sel = vec![0.0; t.num_vertices()];
            for (corner, &v) in t.faces[f as usize].iter().enumerate() {
                sel[v as usize] += got.barycentric[corner];
            }
            for j in 0..3 {
                let want: f64 = (0..t.num_vertices()).map(|v| sel[v] * t.lbs_weights[v * 3 + j]).sum();
                assert!((got.weights[j] - want).abs() < 1e-9);
            }
            for k in 0..t.num_expressions {
                let want: f64 = (0..t.num_vertices()).map(|v| sel[v] * t.blendshape(v, k).y).sum();
                assert!((got.blendshapes[k].y - want).abs() < 1e-9);
            }
            let sum: f64 = got.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_is_linear_in_barycentrics() {
        let t = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let f = rng.gen_range(0..t.num_faces()) as u32;
            let [a, b, c] = t.face_vertices(f as usize);
            let at = |u: f64, v: f64| a + (b - a) * u + (c - a) * v;
            let (u1, v1, u2, v2) = (rng.gen(), rng.gen(), rng.gen(), rng.gen());
            let mix = rng.gen::<f64>();
            let b1 = bind_point(at(u1, v1), f, &t).unwrap();
            let b2 = bind_point(at(u2, v2), f, &t).unwrap();
            let bm = bind_point(at(mix * u1 + (1.0 - mix) * u2, mix * v1 + (1.0 - mix) * v2), f, &t).unwrap();
            for j in 0..3 {
                let want = mix * b1.weights[j] + (1.0 - mix) * b2.weights[j];
                assert!((bm.weights[j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rest_pose_is_identity() {
        let t = tpl();
        let posed = deform_template(&t, &PoseExpression::rest(3, 8));
        for (p, v) in posed.iter().zip(&t.vertices) {
            assert!((*p - *v).max_abs() < 1e-6);
        }
    }

    #[test]
    fn single_blendshape_displaces_by_its_row() {
        let t = tpl();
        let mut pe = PoseExpression::rest(3, 8);
        pe.expression[2] = 1.0;
        let posed = deform_template(&t, &pe);
        for (v, p) in posed.iter().enumerate() {
            assert!((*p - (t.vertices[v] + t.blendshape(v, 2))).max_abs() < 1e-12);
        }
    }

    #[test]
    fn root_rotation_is_rigid_about_root() {
        let t = tpl();
        let mut pe = PoseExpression::rest(3, 8);
        pe.pose[JOINT_ROOT] = Point3::new(0.1, 0.4, -0.2);
        let q = Mat3::from_axis_angle(pe.pose[0]);
        let c = t.joints[0].rest;
        let posed = deform_template(&t, &pe);
        for (v, p) in posed.iter().enumerate() {
            let want = q.mul_vec(t.vertices[v] - c) + c;
            assert!((*p - want).max_abs() < 1e-12);
        }
    }

    #[test]
    fn expression_is_clamped() {
        let t = tpl();
        let mut pe = PoseExpression::rest(3, 8);
        pe.expression[0] = 10.0;
        let mut capped = pe.clone();
        capped.expression[0] = 3.0;
        assert_eq!(deform_template(&t, &pe), deform_template(&t, &capped));
    }

    #[test]
    fn animate_rest_pose_with_zero_locals_gives_centroids() {
        let t = tpl();
        let cloud = BoundPointCloud::new(
            (0..t.num_faces() as u32)
                .step_by(7)
                .map(|f| {
                    let c = t.face_centroid(f as usize);
                    BoundPoint::new(c.x, c.y, c.z, f)
                })
                .collect(),
        );
        let bindings = bind_points(&cloud, &t).unwrap();
        let locals = vec![
            LocalGaussian {
                position: Point3::zero(),
                rotation: Quat::identity(),
                scale: Point3::new(0.01, 0.01, 0.01),
            };
            bindings.len()
        ];
        let out = animate_gaussians(&bindings, &locals, &t, &PoseExpression::rest(3, 8)).unwrap();
        for (g, b) in out.iter().zip(&bindings) {
            assert!((g.position - t.face_centroid(b.face as usize)).max_abs() < 1e-12);
        }
        assert!(animate_gaussians(&bindings, &locals[1..], &t, &PoseExpression::rest(3, 8)).is_err());
    }

    #[test]
    fn rest_pose_round_trip_and_rigid_root_motion() {
        let t = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut points = Vec::new();
        let mut globals = Vec::new();
        for _ in 0..300 {
            let (p, f) = random_bound_point(&mut rng, &t);
            points.push(BoundPoint { position: p, binding: f });
            globals.push(GlobalGaussian {
                position: p,
                rotation: Quat::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()).normalized(),
                scale: Point3::new(rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05), 0.02),
            });
        }
        let cloud = BoundPointCloud::new(points);
        let bindings = bind_points(&cloud, &t).unwrap();
        let faces: Vec<u32> = cloud.points.iter().map(|p| p.binding).collect();
        let locals = locals_from_canonical(&globals, &faces, &t).unwrap();
        let rest = animate_gaussians(&bindings, &locals, &t, &PoseExpression::rest(3, 8)).unwrap();
        for (a, g) in rest.iter().zip(&globals) {
            assert!((a.position - g.position).max_abs() < 1e-6);
        }

        let mut pe = PoseExpression::rest(3, 8);
        pe.pose[JOINT_ROOT] = Point3::new(0.0, 0.7, 0.2);
        let q = Mat3::from_axis_angle(pe.pose[0]);
        let c = t.joints[0].rest;
        let moved = animate_gaussians(&bindings, &locals, &t, &pe).unwrap();
        for (m, g) in moved.iter().zip(&globals) {
            assert!((m.position - (q.mul_vec(g.position - c) + c)).max_abs() < 1e-9);
            assert!(m.rotation.to_mat3().max_abs_diff(&q.mul_mat(&g.rotation.to_mat3())) < 1e-9);
            assert!((m.scale - g.scale).max_abs() < 1e-9);
        }
    }

    #[test]
    fn jaw_pose_moves_only_jaw_weighted_faces() {
        let t = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pe = PoseExpression::rest(3, 8);
        pe.pose[JOINT_JAW] = Point3::new(0.35, 0.0, 0.0);
        let posed = deform_template(&t, &pe);
        let mut moved_faces = 0;
        for f in 0..t.num_faces() {
            let jaw: f64 = t.faces[f].iter().map(|&v| t.weights(v as usize)[JOINT_JAW]).sum();
            let disp = t.faces[f]
                .iter()
                .map(|&v| (posed[v as usize] - t.vertices[v as usize]).norm())
                .fold(0.0, f64::max);
            if jaw == 0.0 {
                assert!(disp < 1e-12, "face {f} moved without jaw weight");
            } else {
                moved_faces += 1;
            }
        }
        assert!(moved_faces > 0);
        // scales stay positive under arbitrary poses
        let (p, f) = random_bound_point(&mut rng, &t);
        let b = bind_points(&BoundPointCloud::new(vec![BoundPoint { position: p, binding: f }]), &t).unwrap();
        let l = vec![LocalGaussian {
            position: Point3::new(0.1, 0.0, 0.1),
            rotation: Quat::identity(),
            scale: Point3::new(0.02, 0.03, 0.04),
        }];
        for _ in 0..50 {
            let mut pe = PoseExpression::rest(3, 8);
            for j in 0..3 {
                pe.pose[j] = Point3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            }
            pe.expression.iter_mut().for_each(|e| *e = rng.gen_range(-3.0..3.0));
            let g = animate_gaussians(&b, &l, &t, &pe).unwrap();
            assert!(g[0].scale.x > 0.0 && g[0].scale.y > 0.0 && g[0].scale.z > 0.0);
            assert!((g[0].rotation.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn skinning_a_vertex_matches_the_template_deformation() {
        let t = tpl();
        let mut pe = PoseExpression::rest(3, 8);
        pe.pose[JOINT_JAW] = Point3::new(0.3, 0.0, 0.0);
        pe.pose[JOINT_NECK] = Point3::new(0.0, 0.2, 0.0);
        pe.expression[1] = 0.7;
        let posed = deform_template(&t, &pe);
        for f in [0usize, 50, 200] {
            let v = t.faces[f][1] as usize;
            let b = bind_point(t.vertices[v], f as u32, &t).unwrap();
            assert!((skin_point(t.vertices[v], &b, &t, &pe) - posed[v]).max_abs() < 1e-9);
        }
    }
}
