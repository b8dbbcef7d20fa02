//! Tile-based CPU splatting with an analytic backward pass.
//!
//! Cameras follow the OpenCV convention (x right, y down, z forward) and
//! pixel `(px, py)` is sampled at its center `(px + 0.5, py + 0.5)`.
//! Each Gaussian is cut off beyond three standard deviations (Mahalanobis²
//! above 9), the same support used for tile binning, so the tiled and
//! brute-force paths composite identical lists.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::geometry::{Mat3, Point3, Quat};
use crate::image::Image;
use crate::parallel::map_indexed;
use crate::scalar::Scalar;

pub const TILE: usize = 16;
pub const COV_FLOOR: f64 = 0.3;
pub const CUTOFF_MAHALANOBIS2: f64 = 9.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation.
    pub rotation: Mat3<T>,
    pub translation: Point3<T>,
    pub width: usize,
    pub height: usize,
    pub near: T,
    pub far: T,
}

impl<T: Scalar> Camera<T> {
    /// Camera at `eye` looking at `target` with `up` pointing up in the image.
    pub fn look_at(
        eye: Point3<T>,
        target: Point3<T>,
        up: Point3<T>,
        focal: T,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        let rotation = Mat3([right.to_array(), down.to_array(), forward.to_array()]);
        let translation = -rotation.mul_vec(eye);
        let half = T::lit(0.5);
        Self {
            fx: focal,
            fy: focal,
            cx: T::from_usize_lossy(width) * half,
            cy: T::from_usize_lossy(height) * half,
            rotation,
            translation,
            width,
            height,
            near: T::lit(0.01),
            far: T::lit(100.0),
        }
    }

    /// Camera on a circle around the origin in the y-up world; azimuth 0 looks
    /// along −z from +z.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, focal: f64, width: usize, height: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = Point3::new(
            T::lit(radius * el.cos() * az.sin()),
            T::lit(radius * el.sin()),
            T::lit(radius * el.cos() * az.cos()),
        );
        Self::look_at(
            eye,
            Point3::zero(),
            Point3::new(T::zero(), T::one(), T::zero()),
            T::lit(focal),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("camera: {m}")));
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return bad("focal lengths must be positive");
        }
        if !(self.near > T::zero() && self.near < self.far) {
            return bad("need 0 < near < far");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        if rtr.max_abs_diff(&Mat3::identity()) > T::lit(1e-4) || (self.rotation.det() - T::one()).abs() > T::lit(1e-4) {
            return bad("rotation is not orthonormal");
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Point3<T>) -> Point3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rotation: Mat3(self.rotation.0.map(|r| r.map(c))),
            translation: self.translation.cast(),
            width: self.width,
            height: self.height,
            near: c(self.near),
            far: c(self.far),
        }
    }
}

/// Writes the camera as `key=value` lines.
pub fn write_camera<T: Scalar, W: Write>(out: &mut W, cam: &Camera<T>) -> Result<()> {
    let f = |v: T| format!("{:.17e}", v.to_f64_lossy());
    writeln!(out, "width={}", cam.width)?;
    writeln!(out, "height={}", cam.height)?;
    for (k, v) in [("fx", cam.fx), ("fy", cam.fy), ("cx", cam.cx), ("cy", cam.cy), ("near", cam.near), ("far", cam.far)] {
        writeln!(out, "{k}={}", f(v))?;
    }
    let r: Vec<String> = cam.rotation.0.iter().flatten().map(|&v| f(v)).collect();
    writeln!(out, "rotation={}", r.join(" "))?;
    let t: Vec<String> = cam.translation.to_array().iter().map(|&v| f(v)).collect();
    writeln!(out, "translation={}", t.join(" "))?;
    Ok(())
}

pub fn read_camera<T: Scalar, R: BufRead>(input: R) -> Result<Camera<T>> {
    let bad = |m: String| Error::format("camera", m);
    let mut kv = std::collections::BTreeMap::new();
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let take = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
    let reals = |k: &str, n: usize| -> Result<Vec<T>> {
        let v: Vec<T> = take(k)?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map(T::lit).map_err(|e| bad(format!("{k}: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != n {
            return Err(bad(format!("{k}: expected {n} values")));
        }
        Ok(v)
    };
    let size = |k: &str| -> Result<usize> { take(k)?.parse().map_err(|e| bad(format!("{k}: {e}"))) };
    for k in kv.keys() {
        if !["width", "height", "fx", "fy", "cx", "cy", "near", "far", "rotation", "translation"].contains(&k.as_str()) {
            return Err(bad(format!("unknown key {k}")));
        }
    }
    let r = reals("rotation", 9)?;
    let t = reals("translation", 3)?;
    let cam = Camera {
        fx: reals("fx", 1)?[0],
        fy: reals("fy", 1)?[0],
        cx: reals("cx", 1)?[0],
        cy: reals("cy", 1)?[0],
        rotation: Mat3([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]),
        translation: Point3::new(t[0], t[1], t[2]),
        width: size("width")?,
        height: size("height")?,
        near: reals("near", 1)?[0],
        far: reals("far", 1)?[0],
    };
    cam.validate()?;
    Ok(cam)
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub mean: [T; 2],
    /// 2D covariance `(Σxx, Σxy, Σyy)` including the floor.
    pub cov: [T; 3],
    /// Inverse covariance `(a, b, c)`.
    pub conic: [T; 3],
    pub depth: T,
    /// Camera-space center.
    pub center: Point3<T>,
    /// Camera-space 3D covariance.
    pub cov3: Mat3<T>,
    /// Pixel bounds `[x0, x1, y0, y1]` (inclusive) of the 3σ support, clipped to the image.
    pub bounds: Option<[usize; 4]>,
}

fn scaled_rotation<T: Scalar>(g: &Gaussian<T>) -> (Mat3<T>, Mat3<T>) {
    let r = g.rotation.to_mat3();
    let s = g.scale.to_array();
    let mut m = r;
    for row in m.0.iter_mut() {
        for j in 0..3 {
            row[j] = row[j] * s[j];
        }
    }
    (r, m)
}

fn jacobian<T: Scalar>(cam: &Camera<T>, p: Point3<T>) -> [[T; 3]; 2] {
    let iz = T::one() / p.z;
    [
        [cam.fx * iz, T::zero(), -cam.fx * p.x * iz * iz],
        [T::zero(), cam.fy * iz, -cam.fy * p.y * iz * iz],
    ]
}

/// EWA projection; `None` when the center is outside the near/far range.
pub fn project<T: Scalar>(g: &Gaussian<T>, cam: &Camera<T>) -> Option<Projection<T>> {
    let pc = cam.to_camera(g.position);
    if !(pc.z > cam.near && pc.z < cam.far) {
        return None;
    }
    let (_, m) = scaled_rotation(g);
    let sigma = m.mul_mat(&m.transpose());
    let w = cam.rotation;
    let cov3 = w.mul_mat(&sigma).mul_mat(&w.transpose());
    let j = jacobian(cam, pc);
    // J·Σc·Jᵀ
    let mut js = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            js[r][c] = (0..3).map(|k| j[r][k] * cov3.0[k][c]).sum();
        }
    }
    let mut c2 = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            c2[r][c] = (0..3).map(|k| js[r][k] * j[c][k]).sum();
        }
    }
    let floor = T::lit(COV_FLOOR);
    let (a, b, c) = (c2[0][0] + floor, c2[0][1], c2[1][1] + floor);
    let det = a * c - b * b;
    if !(det > T::zero()) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let iz = T::one() / pc.z;
    let mean = [cam.fx * pc.x * iz + cam.cx, cam.fy * pc.y * iz + cam.cy];
    let three = T::lit(CUTOFF_MAHALANOBIS2.sqrt());
    let (rx, ry) = (three * a.sqrt(), three * c.sqrt());
    let half = T::lit(0.5);
    // pixel centers px + 0.5 within [mean - r, mean + r], padded by one pixel
    let lo = |m: T, r: T| (m - r - half).ceil().to_f64_lossy() - 1.0;
    let hi = |m: T, r: T| (m - half + r).floor().to_f64_lossy() + 1.0;
    let (x0, x1) = (lo(mean[0], rx), hi(mean[0], rx));
    let (y0, y1) = (lo(mean[1], ry), hi(mean[1], ry));
    let bounds = if x1 < 0.0 || y1 < 0.0 || x0 > (cam.width - 1) as f64 || y0 > (cam.height - 1) as f64 {
        None
    } else {
        Some([
            x0.max(0.0) as usize,
            x1.min((cam.width - 1) as f64) as usize,
            y0.max(0.0) as usize,
            y1.min((cam.height - 1) as f64) as usize,
        ])
    };
    Some(Projection {
        mean,
        cov: [a, b, c],
        conic,
        depth: pc.z,
        center: pc,
        cov3,
        bounds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    /// Stop compositing once transmittance drops below `MIN_TRANSMITTANCE`.
    pub early_stop: bool,
    pub threads: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            early_stop: true,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered<T> {
    pub image: Image<T>,
    /// Accumulated opacity per pixel, row-major.
    pub alpha: Vec<T>,
}

struct Scene<T> {
    proj: Vec<Option<Projection<T>>>,
    /// Visible Gaussian indices, front to back (stable by index).
    order: Vec<usize>,
}

fn prepare<T: Scalar>(gs: &[Gaussian<T>], cam: &Camera<T>) -> Scene<T> {
    let proj: Vec<_> = gs.iter().map(|g| project(g, cam)).collect();
    let mut order: Vec<usize> = (0..gs.len()).filter(|&i| proj[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (proj[a].unwrap().depth, proj[b].unwrap().depth);
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Scene { proj, order }
}

fn tiles_x(cam: &Camera<impl Scalar>) -> usize {
    cam.width.div_ceil(TILE)
}

fn tiles_y(cam: &Camera<impl Scalar>) -> usize {
    cam.height.div_ceil(TILE)
}

fn bin<T: Scalar>(scene: &Scene<T>, cam: &Camera<T>) -> Vec<Vec<usize>> {
    let (tx, ty) = (tiles_x(cam), tiles_y(cam));
    let mut bins = vec![Vec::new(); tx * ty];
    for &i in &scene.order {
        if let Some([x0, x1, y0, y1]) = scene.proj[i].unwrap().bounds {
            for by in y0 / TILE..=y1 / TILE {
                for bx in x0 / TILE..=x1 / TILE {
                    bins[by * tx + bx].push(i);
                }
            }
        }
    }
    bins
}

/// One Gaussian's contribution at a pixel.
#[derive(Debug, Clone, Copy)]
struct Hit<T> {
    index: usize,
    alpha: T,
    falloff: T,
    dx: T,
    dy: T,
    transmittance: T,
}

/// Front-to-back walk over `list` at pixel `(px, py)`; calls `visit` for every
/// contributing Gaussian and returns the final transmittance.
#[inline]
fn walk_pixel<T: Scalar>(
    px: usize,
    py: usize,
    list: &[usize],
    gs: &[Gaussian<T>],
    proj: &[Option<Projection<T>>],
    early_stop: bool,
    mut visit: impl FnMut(Hit<T>),
) -> T {
    let half = T::lit(0.5);
    let (fx, fy) = (T::from_usize_lossy(px) + half, T::from_usize_lossy(py) + half);
    let cutoff = T::lit(CUTOFF_MAHALANOBIS2);
    let stop = T::lit(MIN_TRANSMITTANCE);
    let mut t = T::one();
    for &i in list {
        let p = proj[i].as_ref().unwrap();
        let dx = fx - p.mean[0];
        let dy = fy - p.mean[1];
        let [a, b, c] = p.conic;
        let m2 = a * dx * dx + (b + b) * dx * dy + c * dy * dy;
        if m2 > cutoff {
            continue;
        }
        let falloff = (-half * m2).exp();
        let alpha = gs[i].opacity * falloff;
        visit(Hit {
            index: i,
            alpha,
            falloff,
            dx,
            dy,
            transmittance: t,
        });
        t = t * (T::one() - alpha);
        if early_stop && t < stop {
            break;
        }
    }
    t
}

fn shade<T: Scalar>(
    px: usize,
    py: usize,
    list: &[usize],
    gs: &[Gaussian<T>],
    proj: &[Option<Projection<T>>],
    early_stop: bool,
) -> ([T; 3], T) {
    let mut col = [T::zero(); 3];
    let t = walk_pixel(px, py, list, gs, proj, early_stop, |h| {
        let w = h.alpha * h.transmittance;
        for (c, &gc) in col.iter_mut().zip(&gs[h.index].color) {
            *c = *c + gc * w;
        }
    });
    (col, T::one() - t)
}

fn tile_pixels(tile: usize, cam: &Camera<impl Scalar>) -> impl Iterator<Item = (usize, usize)> {
    let tx = tiles_x(cam);
    let (bx, by) = (tile % tx, tile / tx);
    let (x0, y0) = (bx * TILE, by * TILE);
    let (x1, y1) = ((x0 + TILE).min(cam.width), (y0 + TILE).min(cam.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders on a black background.
pub fn render<T: Scalar>(gs: &[Gaussian<T>], cam: &Camera<T>, opts: RenderOptions) -> Rendered<T> {
    let scene = prepare(gs, cam);
    let bins = bin(&scene, cam);
    let tiles = map_indexed(bins.len(), opts.threads, |tile| {
        tile_pixels(tile, cam)
            .map(|(x, y)| shade(x, y, &bins[tile], gs, &scene.proj, opts.early_stop))
            .collect::<Vec<_>>()
    });
    let mut image = Image::new(cam.width, cam.height, 3);
    let mut alpha = vec![T::zero(); cam.width * cam.height];
    for (tile, shaded) in tiles.into_iter().enumerate() {
        for ((x, y), (col, a)) in tile_pixels(tile, cam).zip(shaded) {
            image.pixel_mut(x, y).copy_from_slice(&col);
            alpha[y * cam.width + x] = a;
        }
    }
    Rendered { image, alpha }
}

/// Reference renderer: every pixel walks every visible Gaussian.
pub fn render_brute_force<T: Scalar>(gs: &[Gaussian<T>], cam: &Camera<T>, early_stop: bool) -> Rendered<T> {
    let scene = prepare(gs, cam);
    let mut image = Image::new(cam.width, cam.height, 3);
    let mut alpha = vec![T::zero(); cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (col, a) = shade(x, y, &scene.order, gs, &scene.proj, early_stop);
            image.pixel_mut(x, y).copy_from_slice(&col);
            alpha[y * cam.width + x] = a;
        }
    }
    Rendered { image, alpha }
}

/// Gradient with respect to one Gaussian's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad<T> {
    pub position: Point3<T>,
    /// With respect to the raw (unnormalised) quaternion `(w, x, y, z)`.
    pub rotation: [T; 4],
    pub scale: Point3<T>,
    pub color: [T; 3],
    pub opacity: T,
}

impl<T: Scalar> GaussianGrad<T> {
    pub fn zero() -> Self {
        Self {
            position: Point3::zero(),
            rotation: [T::zero(); 4],
            scale: Point3::zero(),
            color: [T::zero(); 3],
            opacity: T::zero(),
        }
    }

    pub fn to_array(&self) -> [T; 14] {
        let p = self.position;
        let r = self.rotation;
        let s = self.scale;
        let c = self.color;
        [
            p.x, p.y, p.z, r[0], r[1], r[2], r[3], s.x, s.y, s.z, c[0], c[1], c[2], self.opacity,
        ]
    }
}

/// Screen-space gradient accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct Grad2<T> {
    mean: [T; 2],
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
}

impl<T: Scalar> Grad2<T> {
    fn zero() -> Self {
        Self {
            mean: [T::zero(); 2],
            conic: [T::zero(); 3],
            opacity: T::zero(),
            color: [T::zero(); 3],
        }
    }

    fn add(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean[k] = self.mean[k] + o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] = self.conic[k] + o.conic[k];
            self.color[k] = self.color[k] + o.color[k];
        }
        self.opacity = self.opacity + o.opacity;
    }
}

/// Backpropagates `d_image` (same shape as the rendered image) to every
/// Gaussian. Culled Gaussians receive zero gradient.
pub fn render_backward<T: Scalar>(
    gs: &[Gaussian<T>],
    cam: &Camera<T>,
    d_image: &Image<T>,
    opts: RenderOptions,
) -> Vec<GaussianGrad<T>> {
    assert_eq!(d_image.shape(), (cam.height, cam.width, 3), "upstream gradient shape");
    let scene = prepare(gs, cam);
    let bins = bin(&scene, cam);
    let per_tile = map_indexed(bins.len(), opts.threads, |tile| {
        let list = &bins[tile];
        let mut local = vec![Grad2::zero(); list.len()];
        let slot: std::collections::HashMap<usize, usize> =
            list.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut hits: Vec<Hit<T>> = Vec::new();
        for (x, y) in tile_pixels(tile, cam) {
            let up = d_image.pixel(x, y);
            if up.iter().all(|&v| v == T::zero()) {
                continue;
            }
            hits.clear();
            walk_pixel(x, y, list, gs, &scene.proj, opts.early_stop, |h| hits.push(h));
            let mut behind = [T::zero(); 3];
            for h in hits.iter().rev() {
                let g = &gs[h.index];
                let p = scene.proj[h.index].as_ref().unwrap();
                let acc = &mut local[slot[&h.index]];
                let w = h.alpha * h.transmittance;
                let mut d_alpha = T::zero();
                for ch in 0..3 {
                    acc.color[ch] = acc.color[ch] + up[ch] * w;
                    d_alpha = d_alpha + up[ch] * h.transmittance * (g.color[ch] - behind[ch]);
                    behind[ch] = g.color[ch] * h.alpha + (T::one() - h.alpha) * behind[ch];
                }
                acc.opacity = acc.opacity + d_alpha * h.falloff;
                // α = o·exp(−m²/2): dα/d(m²) = −α/2
                let d_m2 = -d_alpha * h.alpha * T::lit(0.5);
                let [a, b, c] = p.conic;
                let (dx, dy) = (h.dx, h.dy);
                acc.conic[0] = acc.conic[0] + d_m2 * dx * dx;
                acc.conic[1] = acc.conic[1] + d_m2 * (dx * dy + dx * dy);
                acc.conic[2] = acc.conic[2] + d_m2 * dy * dy;
                let two = T::lit(2.0);
                let ddx = d_m2 * two * (a * dx + b * dy);
                let ddy = d_m2 * two * (b * dx + c * dy);
                acc.mean[0] = acc.mean[0] - ddx;
                acc.mean[1] = acc.mean[1] - ddy;
            }
        }
        local
    });
    let mut g2 = vec![Grad2::zero(); gs.len()];
    for (tile, local) in per_tile.into_iter().enumerate() {
        for (k, acc) in local.iter().enumerate() {
            g2[bins[tile][k]].add(acc);
        }
    }
    gs.iter()
        .enumerate()
        .map(|(i, g)| match &scene.proj[i] {
            Some(p) => lift_gradient(g, p, &g2[i], cam),
            None => GaussianGrad::zero(),
        })
        .collect()
}

type M23<T> = [[T; 3]; 2];

/// Chains screen-space gradients back to the 3D parameters.
fn lift_gradient<T: Scalar>(g: &Gaussian<T>, p: &Projection<T>, d: &Grad2<T>, cam: &Camera<T>) -> GaussianGrad<T> {
    let zero = T::zero();
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    // conic Q = Σ2⁻¹; the off-diagonal parameter appears twice in dᵀQd.
    let q = [[p.conic[0], p.conic[1]], [p.conic[1], p.conic[2]]];
    let gq = [[d.conic[0], d.conic[1] * half], [d.conic[1] * half, d.conic[2]]];
    let mut tmp = [[zero; 2]; 2];
    let mut gs2 = [[zero; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            tmp[r][c] = q[r][0] * gq[0][c] + q[r][1] * gq[1][c];
        }
    }
    for r in 0..2 {
        for c in 0..2 {
            gs2[r][c] = -(tmp[r][0] * q[0][c] + tmp[r][1] * q[1][c]);
        }
    }
    let pc = p.center;
    let j: M23<T> = jacobian(cam, pc);
    let sc = p.cov3.0;
    // dL/dΣc = Jᵀ G J
    let mut gsc = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let mut s = zero;
            for a in 0..2 {
                for b in 0..2 {
                    s = s + j[a][r] * gs2[a][b] * j[b][c];
                }
            }
            gsc[r][c] = s;
        }
    }
    // dL/dJ = 2 G J Σc
    let mut gj: M23<T> = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            let mut s = zero;
            for a in 0..2 {
                for k in 0..3 {
                    s = s + gs2[r][a] * j[a][k] * sc[k][c];
                }
            }
            gj[r][c] = two * s;
        }
    }
    // camera-space center
    let iz = T::one() / pc.z;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut gpc = [
        d.mean[0] * fx * iz,
        d.mean[1] * fy * iz,
        -d.mean[0] * fx * pc.x * iz * iz - d.mean[1] * fy * pc.y * iz * iz,
    ];
    gpc[0] = gpc[0] - gj[0][2] * fx * iz * iz;
    gpc[1] = gpc[1] - gj[1][2] * fy * iz * iz;
    gpc[2] = gpc[2] - gj[0][0] * fx * iz * iz + gj[0][2] * two * fx * pc.x * iz * iz * iz
        - gj[1][1] * fy * iz * iz
        + gj[1][2] * two * fy * pc.y * iz * iz * iz;
    let w = cam.rotation;
    let position = w.transpose().mul_vec(Point3::from_array(gpc));
    // world covariance: Σc = W Σ Wᵀ
    let gsig = w.transpose().mul_mat(&Mat3(gsc)).mul_mat(&w);
    let (rot, m) = scaled_rotation(g);
    // Σ = M Mᵀ → dM = (G + Gᵀ) M
    let mut gm = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            gm[r][c] = (0..3).map(|k| (gsig.0[r][k] + gsig.0[k][r]) * m.0[k][c]).sum();
        }
    }
    let s = g.scale.to_array();
    let mut gr = [[zero; 3]; 3];
    let mut gscale = [zero; 3];
    for r in 0..3 {
        for c in 0..3 {
            gr[r][c] = gm[r][c] * s[c];
            gscale[c] = gscale[c] + gm[r][c] * rot.0[r][c];
        }
    }
    GaussianGrad {
        position,
        rotation: quat_backward(g.rotation, &gr),
        scale: Point3::from_array(gscale),
        color: d.color,
        opacity: d.opacity,
    }
}

/// Gradient of `R(q/|q|)` contracted with `gr`, with respect to raw `q`.
pub fn quat_backward<T: Scalar>(q: Quat<T>, gr: &[[T; 3]; 3]) -> [T; 4] {
    let n = q.norm();
    let u = q.normalized();
    let (w, x, y, z) = (u.w, u.x, u.y, u.z);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let g = gr;
    let gw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
        - four * x * (g[1][1] + g[2][2]);
    let gy = two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
        - four * y * (g[0][0] + g[2][2]);
    let gz = two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
        - four * z * (g[0][0] + g[1][1]);
    let gu = [gw, gx, gy, gz];
    let ua = [w, x, y, z];
    let dot: T = (0..4).map(|k| gu[k] * ua[k]).sum();
    [0, 1, 2, 3].map(|k| (gu[k] - ua[k] * dot) / n)
}
