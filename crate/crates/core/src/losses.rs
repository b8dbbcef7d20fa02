//! Image losses, the offset regulariser, the weighted objective and PSNR.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::image::Image;
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            ssim: 0.5,
            perceptual: 0.1,
            offset: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.perceptual, self.offset];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub fn l1_loss<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    a.same_shape(b)?;
    let n = T::from_usize_lossy(a.data.len());
    Ok(a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n)
}

/// d(l1)/d(a); zero where `a == b`.
pub fn l1_grad<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<Image<T>> {
    a.same_shape(b)?;
    let inv = T::one() / T::from_usize_lossy(a.data.len());
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            if x > y {
                inv
            } else if x < y {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Image { data, ..a.clone() })
}

fn gaussian_window<T: Scalar>() -> Vec<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::lit(v / s)).collect()
}

/// Separable "valid" correlation of one `h×w` plane with `g⊗g`.
fn filter_valid<T: Scalar>(plane: &[T], w: usize, h: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh×ow` map back to `h×w`.
fn filter_valid_adjoint<T: Scalar>(map: &[T], w: usize, h: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..k {
                tmp[(y + i) * ow + x] = tmp[(y + i) * ow + x] + g[i] * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..k {
                out[y * w + x + i] = out[y * w + x + i] + g[i] * v;
            }
        }
    }
    out
}

fn plane<T: Scalar>(img: &Image<T>, c: usize) -> Vec<T> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

struct SsimPlane<T> {
    mean: T,
    /// Per-window partials of SSIM w.r.t. (μa, E[a²], E[ab]).
    partials: Option<[Vec<T>; 3]>,
}

fn ssim_plane<T: Scalar>(a: &[T], b: &[T], w: usize, h: usize, want_grad: bool) -> SsimPlane<T> {
    let g = gaussian_window::<T>();
    let sq = |p: &[T], q: &[T]| -> Vec<T> { p.iter().zip(q).map(|(&x, &y)| x * y).collect() };
    let ma = filter_valid(a, w, h, &g);
    let mb = filter_valid(b, w, h, &g);
    let eaa = filter_valid(&sq(a, a), w, h, &g);
    let ebb = filter_valid(&sq(b, b), w, h, &g);
    let eab = filter_valid(&sq(a, b), w, h, &g);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let n = ma.len();
    let mut total = T::zero();
    let mut parts = want_grad.then(|| [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]]);
    for i in 0..n {
        let (mx, my) = (ma[i], mb[i]);
        let vx = eaa[i] - mx * mx;
        let vy = ebb[i] - my * my;
        let cxy = eab[i] - mx * my;
        let a1 = two * mx * my + c1;
        let a2 = two * cxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        total = total + s;
        if let Some(p) = parts.as_mut() {
            p[0][i] = s * (two * my / a1 - two * my / a2 - two * mx / b1 + two * mx / b2);
            p[1][i] = -s / b2;
            p[2][i] = s * two / a2;
        }
    }
    SsimPlane {
        mean: total / T::from_usize_lossy(n),
        partials: parts,
    }
}

fn check_ssim_size<T: Scalar>(a: &Image<T>) -> Result<()> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: a.height,
            width: a.width,
        });
    }
    Ok(())
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    a.same_shape(b)?;
    check_ssim_size(a)?;
    let mut sum = T::zero();
    for c in 0..a.channels {
        sum = sum + ssim_plane(&plane(a, c), &plane(b, c), a.width, a.height, false).mean;
    }
    Ok(sum / T::from_usize_lossy(a.channels))
}

pub fn ssim_loss<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    Ok(T::one() - ssim(a, b)?)
}

/// Returns `(1 − SSIM, d/d(a))`.
pub fn ssim_loss_grad<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(T, Image<T>)> {
    a.same_shape(b)?;
    check_ssim_size(a)?;
    let g = gaussian_window::<T>();
    let (w, h) = (a.width, a.height);
    let windows = T::from_usize_lossy((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW));
    let chans = T::from_usize_lossy(a.channels);
    let scale = -T::one() / (windows * chans);
    let mut grad = Image::new(w, h, a.channels);
    let mut sum = T::zero();
    for c in 0..a.channels {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let sp = ssim_plane(&pa, &pb, w, h, true);
        sum = sum + sp.mean;
        let [d_mu, d_aa, d_ab] = sp.partials.unwrap();
        let s_mu = filter_valid_adjoint(&d_mu, w, h, &g);
        let s_aa = filter_valid_adjoint(&d_aa, w, h, &g);
        let s_ab = filter_valid_adjoint(&d_ab, w, h, &g);
        let two = T::lit(2.0);
        for p in 0..w * h {
            let v = s_mu[p] + two * s_aa[p] * pa[p] + s_ab[p] * pb[p];
            grad.data[p * a.channels + c] = v * scale;
        }
    }
    Ok((T::one() - sum / chans, grad))
}

/// Mean squared Euclidean norm of the offsets.
pub fn offset_reg<T: Scalar>(offsets: &[Point3<T>]) -> T {
    if offsets.is_empty() {
        return T::zero();
    }
    offsets.iter().map(|o| o.dot(*o)).sum::<T>() / T::from_usize_lossy(offsets.len())
}

pub fn offset_reg_grad<T: Scalar>(offsets: &[Point3<T>]) -> Vec<Point3<T>> {
    let s = T::lit(2.0) / T::from_usize_lossy(offsets.len().max(1));
    offsets.iter().map(|&o| o * s).collect()
}

/// Differentiable image-pair functional filling the perceptual slot.
pub trait Perceptual<T: Scalar> {
    fn loss(&self, rendered: &Image<T>, target: &Image<T>) -> Result<T>;
    fn grad(&self, rendered: &Image<T>, target: &Image<T>) -> Result<Image<T>>;
}

/// Default perceptual term: always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPerceptual;

impl<T: Scalar> Perceptual<T> for NoPerceptual {
    fn loss(&self, _: &Image<T>, _: &Image<T>) -> Result<T> {
        Ok(T::zero())
    }

    fn grad(&self, rendered: &Image<T>, _: &Image<T>) -> Result<Image<T>> {
        Ok(Image::new(rendered.width, rendered.height, rendered.channels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub l1: T,
    pub ssim: T,
    pub perceptual: T,
    pub offset: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn combine(weights: &LossWeights, l1: T, ssim: T, perceptual: T, offset: T) -> Self {
        let w = |v: f64| T::lit(v);
        Self {
            l1,
            ssim,
            perceptual,
            offset,
            total: w(weights.l1) * l1 + w(weights.ssim) * ssim + w(weights.perceptual) * perceptual + w(weights.offset) * offset,
        }
    }
}

pub fn total_loss<T: Scalar>(
    rendered: &Image<T>,
    target: &Image<T>,
    offsets: &[Point3<T>],
    weights: &LossWeights,
    perceptual: &dyn Perceptual<T>,
) -> Result<LossBreakdown<T>> {
    Ok(LossBreakdown::combine(
        weights,
        l1_loss(rendered, target)?,
        ssim_loss(rendered, target)?,
        perceptual.loss(rendered, target)?,
        offset_reg(offsets),
    ))
}

/// Objective value with its gradients w.r.t. the rendered image and the offsets.
pub fn total_loss_grad<T: Scalar>(
    rendered: &Image<T>,
    target: &Image<T>,
    offsets: &[Point3<T>],
    weights: &LossWeights,
    perceptual: &dyn Perceptual<T>,
) -> Result<(LossBreakdown<T>, Image<T>, Vec<Point3<T>>)> {
    let l1 = l1_loss(rendered, target)?;
    let (ssim_l, d_ssim) = ssim_loss_grad(rendered, target)?;
    let perc = perceptual.loss(rendered, target)?;
    let d_l1 = l1_grad(rendered, target)?;
    let d_perc = perceptual.grad(rendered, target)?;
    let (wl1, wss, wp) = (T::lit(weights.l1), T::lit(weights.ssim), T::lit(weights.perceptual));
    let mut d_img = d_l1;
    for ((d, &s), &p) in d_img.data.iter_mut().zip(&d_ssim.data).zip(&d_perc.data) {
        *d = wl1 * *d + wss * s + wp * p;
    }
    let wr = T::lit(weights.offset);
    let d_off = offset_reg_grad(offsets).into_iter().map(|g| g * wr).collect();
    Ok((
        LossBreakdown::combine(weights, l1, ssim_l, perc, offset_reg(offsets)),
        d_img,
        d_off,
    ))
}

/// PSNR in dB for [0,1] images; `+∞` for identical inputs.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Ordered `metric=value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        for (k, v) in &self.values {
            if v.is_infinite() {
                writeln!(out, "{k}={}", if *v > 0.0 { "inf" } else { "-inf" })?;
            } else {
                writeln!(out, "{k}={v}")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut report = Self::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("metrics", format!("expected metric=value, got {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::format("metrics", format!("bad value in {line:?}")))?;
            report.insert(k.trim(), v);
        }
        Ok(report)
    }
}
