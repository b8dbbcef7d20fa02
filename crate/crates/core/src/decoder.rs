//! Second-stage transformer: generated points plus AR hidden states in,
//! renderable Gaussians out.
//!
//! Each point gets a geometric feature (sin/cos encoding of its position
//! through an MLP) and an AR feature (its four final hidden states,
//! concatenated, through an MLP). The concatenation runs through a
//! non-causal self-attention stack; a linear head produces raw attributes
//! that are squashed into their valid ranges.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar::patchify;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::geometry::{Point3, Quat};
use crate::image::Image;
use crate::losses::{total_loss_grad, LossWeights, Perceptual};
use crate::nn::layers::{add_linear, add_norm, Attn, Bound, Linear, Norm};
use crate::nn::{AdamW, Checkpoint, Graph, Grads, ParamId, ParamStore, Tensor, Var};
use crate::parallel::map_indexed;
use crate::render::{render, render_backward, Camera, RenderOptions};
use crate::scalar::Scalar;

/// Patch side for the optional image cross-attention.
pub const PATCH: usize = 8;
/// Raw log-scales are clamped to this range before `exp`.
pub const LOG_SCALE_RANGE: (f64, f64) = (-9.0, 0.0);
const INIT_LOG_SCALE: f64 = -3.9;
const INIT_OPACITY_LOGIT: f64 = 1.0;
/// Raw head layout: color, opacity, log-scale, quaternion, offset.
const HEAD_WIDTH: usize = 14;

/// Which inputs reach the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    /// Positional and AR features.
    #[default]
    Full,
    /// Positional features only.
    Positional,
    /// AR features only.
    ArFeature,
    /// Positional features of the template's canonical vertices, which
    /// replace the generated points.
    Template,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [Self::Full, Self::Positional, Self::ArFeature, Self::Template];

    pub fn uses_positions(self) -> bool {
        self != Self::ArFeature
    }

    pub fn uses_ar(self) -> bool {
        matches!(self, Self::Full | Self::ArFeature)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Positional => "positional",
            Self::ArFeature => "ar-feature",
            Self::Template => "template",
        }
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown decoder variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Frequencies per axis in the positional encoding.
    pub pe_freqs: usize,
    /// Hard bound on the offset norm.
    pub max_offset: f64,
    pub variant: DecoderVariant,
    /// Cross-attend to source-image patches in every layer.
    pub image_attention: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            pe_freqs: 6,
            max_offset: 0.05,
            variant: DecoderVariant::Full,
            image_attention: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("decoder: {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 || self.pe_freqs == 0 {
            return bad("layers and pe_freqs must be positive".into());
        }
        if !(self.max_offset > 0.0 && self.max_offset.is_finite()) {
            return bad(format!("max_offset {} must be positive", self.max_offset));
        }
        Ok(())
    }
}

/// `sin(2^l·π·p_a)` for every frequency and axis, then the matching cosines.
pub fn positional_encode<T: Scalar>(p: Point3<T>, freqs: usize) -> Vec<T> {
    let a = p.to_array();
    let mut sin = Vec::with_capacity(3 * freqs);
    let mut cos = Vec::with_capacity(3 * freqs);
    for l in 0..freqs {
        let f = T::lit((1u64 << l) as f64) * T::PI();
        for &v in &a {
            sin.push((f * v).sin());
            cos.push((f * v).cos());
        }
    }
    sin.extend(cos);
    sin
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    cross: Option<Attn>,
    slf: Attn,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    pos: Option<(Linear, Linear)>,
    ar: Option<(Linear, Linear)>,
    input: Linear,
    image: Option<(Linear, ParamId)>,
    layers: Vec<DecLayer>,
    final_norm: Norm,
    head: Linear,
}

/// Per-point attribute outputs inside a graph.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Heads {
    color: Var,
    opacity: Var,
    scale: Var,
    rotation: Var,
    offset: Var,
}

/// Decoded Gaussians (positions include the offsets) and the offsets alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    pub gaussians: Vec<Gaussian<T>>,
    pub offsets: Vec<Point3<T>>,
}

/// One training identity: decoder inputs plus posed target views.
#[derive(Debug, Clone)]
pub struct DecoderItem<T> {
    pub points: Vec<Point3<T>>,
    /// Four rows per point; may be empty for variants without AR features.
    pub hidden: Tensor<T>,
    pub image: Option<Image<T>>,
    pub views: Vec<(Camera<T>, Image<T>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: DecoderConfig,
    ar_width: usize,
    image_size: usize,
}

pub const CHECKPOINT_KIND: &str = "decoder";

#[derive(Debug, Clone)]
pub struct GaussianDecoder<T: Scalar> {
    pub cfg: DecoderConfig,
    /// Width of the AR hidden states this decoder consumes.
    pub ar_width: usize,
    /// Source-image side for `image_attention`.
    pub image_size: usize,
    pub params: ParamStore<T>,
    ids: Ids,
}

fn attention_block<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, ctx: Option<Var>, a: Attn, heads: usize) -> Var {
    let h = p.norm(g, x, a.norm);
    let q = p.linear(g, h, a.q);
    let src = ctx.unwrap_or(h);
    let k = p.linear(g, src, a.k);
    let v = p.linear(g, src, a.v);
    let att = g.attention(q, k, v, heads, false);
    let o = p.linear(g, att, a.o);
    g.add(x, o)
}

impl<T: Scalar> GaussianDecoder<T> {
    pub fn new(cfg: DecoderConfig, ar_width: usize, image_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant.uses_ar() && ar_width == 0 {
            return Err(Error::InvalidConfig("decoder: AR features need a positive width".into()));
        }
        if cfg.image_attention && (image_size == 0 || image_size % PATCH != 0) {
            return Err(Error::InvalidConfig(format!(
                "decoder: image size {image_size} not divisible by patch {PATCH}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let std = 0.02;
        let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        let pe = 6 * cfg.pe_freqs;
        let pos = cfg.variant.uses_positions().then(|| {
            (
                add_linear(&mut s, "pos.in", pe, d, inv(pe), &mut rng),
                add_linear(&mut s, "pos.out", d, d, inv(d), &mut rng),
            )
        });
        let ar = cfg.variant.uses_ar().then(|| {
            (
                add_linear(&mut s, "arfeat.in", 4 * ar_width, d, inv(4 * ar_width), &mut rng),
                add_linear(&mut s, "arfeat.out", d, d, inv(d), &mut rng),
            )
        });
        let parts = usize::from(pos.is_some()) + usize::from(ar.is_some());
        let input = add_linear(&mut s, "input", parts * d, d, inv(parts * d), &mut rng);
        let image = cfg.image_attention.then(|| {
            let pd = PATCH * PATCH * 3;
            let n = (image_size / PATCH).pow(2);
            (
                add_linear(&mut s, "img.proj", pd, d, inv(pd), &mut rng),
                s.add_normal("img.pos", n, d, std, &mut rng),
            )
        });
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let attn = |s: &mut ParamStore<T>, kind: &str, rng: &mut ChaCha8Rng| Attn {
                norm: add_norm(s, &format!("layers.{l}.{kind}.norm"), d),
                q: add_linear(s, &format!("layers.{l}.{kind}.q"), d, d, inv(d), rng),
                k: add_linear(s, &format!("layers.{l}.{kind}.k"), d, d, inv(d), rng),
                v: add_linear(s, &format!("layers.{l}.{kind}.v"), d, d, inv(d), rng),
                o: add_linear(s, &format!("layers.{l}.{kind}.o"), d, d, out_std, rng),
            };
            let cross = cfg.image_attention.then(|| attn(&mut s, "cross", &mut rng));
            let slf = attn(&mut s, "self", &mut rng);
            layers.push(DecLayer {
                cross,
                slf,
                ffn_norm: add_norm(&mut s, &format!("layers.{l}.ffn.norm"), d),
                ffn_in: add_linear(&mut s, &format!("layers.{l}.ffn.in"), d, 4 * d, inv(d), &mut rng),
                ffn_out: add_linear(&mut s, &format!("layers.{l}.ffn.out"), 4 * d, d, out_std, &mut rng),
            });
        }
        let final_norm = add_norm(&mut s, "final.norm", d);
        let head = add_linear(&mut s, "head", d, HEAD_WIDTH, std, &mut rng);
        {
            let b = &mut s.value_mut(head.b).data;
            b[3] = T::lit(INIT_OPACITY_LOGIT);
            b[4..7].iter_mut().for_each(|v| *v = T::lit(INIT_LOG_SCALE));
            b[7] = T::one();
        }
        Ok(Self {
            cfg,
            ar_width,
            image_size,
            params: s,
            ids: Ids {
                pos,
                ar,
                input,
                image,
                layers,
                final_norm,
                head,
            },
        })
    }

    fn check_inputs(&self, points: &[Point3<T>], hidden: &Tensor<T>, image: Option<&Image<T>>) -> Result<()> {
        if self.cfg.variant.uses_ar() {
            if hidden.rows != 4 * points.len() {
                return Err(Error::LengthMismatch {
                    expected: 4 * points.len(),
                    got: hidden.rows,
                });
            }
            if hidden.cols != self.ar_width {
                return Err(Error::ShapeMismatch(format!(
                    "hidden width {} but decoder expects {}",
                    hidden.cols, self.ar_width
                )));
            }
        }
        if self.cfg.image_attention {
            let img = image.ok_or_else(|| Error::InvalidConfig("decoder needs the source image".into()))?;
            if img.width != self.image_size || img.height != self.image_size {
                return Err(Error::BadImageShape {
                    height: img.height,
                    width: img.width,
                    patch: PATCH,
                });
            }
        }
        Ok(())
    }

    /// AR feature of each point from its four hidden rows.
    fn ar_feature(&self, g: &mut Graph<T>, p: &Bound, hidden: Var, n: usize) -> Var {
        let (l1, l2) = self.ids.ar.expect("variant uses AR features");
        let x = g.reshape(hidden, n, 4 * self.ar_width);
        let h = p.linear(g, x, l1);
        let h = g.gelu(h);
        p.linear(g, h, l2)
    }

    pub(crate) fn graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        points: &[Point3<T>],
        hidden: &Tensor<T>,
        image: Option<&Image<T>>,
    ) -> Result<Heads> {
        self.check_inputs(points, hidden, image)?;
        let n = points.len();
        let mut parts = Vec::with_capacity(2);
        if let Some((l1, l2)) = self.ids.pos {
            let pe: Vec<T> = points.iter().flat_map(|&q| positional_encode(q, self.cfg.pe_freqs)).collect();
            let x = g.constant(Tensor::from_vec(n, 6 * self.cfg.pe_freqs, pe)?);
            let h = p.linear(g, x, l1);
            let h = g.gelu(h);
            parts.push(p.linear(g, h, l2));
        }
        if self.ids.ar.is_some() {
            let h = g.constant(hidden.clone());
            parts.push(self.ar_feature(g, p, h, n));
        }
        let joined = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) };
        let mut x = p.linear(g, joined, self.ids.input);
        let ctx = match (self.ids.image, image) {
            (Some((proj, pos)), Some(img)) => {
                let patches = g.constant(patchify(img, PATCH)?);
                let t = p.linear(g, patches, proj);
                Some(g.add(t, p.get(pos)))
            }
            _ => None,
        };
        for layer in &self.ids.layers {
            if let Some(cross) = layer.cross {
                x = attention_block(g, p, x, ctx, cross, self.cfg.heads);
            }
            x = attention_block(g, p, x, None, layer.slf, self.cfg.heads);
            let h = p.norm(g, x, layer.ffn_norm);
            let h = p.linear(g, h, layer.ffn_in);
            let h = g.gelu(h);
            let f = p.linear(g, h, layer.ffn_out);
            x = g.add(x, f);
        }
        let h = p.norm(g, x, self.ids.final_norm);
        let raw = p.linear(g, h, self.ids.head);
        let c = g.slice_cols(raw, 0, 3);
        let color = g.sigmoid(c);
        let o = g.slice_cols(raw, 3, 1);
        let opacity = g.sigmoid(o);
        let s = g.slice_cols(raw, 4, 3);
        let s = g.clamp(s, T::lit(LOG_SCALE_RANGE.0), T::lit(LOG_SCALE_RANGE.1));
        let scale = g.exp(s);
        let q = g.slice_cols(raw, 7, 4);
        let rotation = g.row_normalize(q);
        let off = g.slice_cols(raw, 11, 3);
        let off = g.tanh(off);
        // per-axis bound a hair under max/√3 keeps the norm within max even
        // when tanh saturates and the norm rounds up
        let offset = g.scale(off, T::lit(self.cfg.max_offset * (1.0 - 1e-6) / 3f64.sqrt()));
        Ok(Heads {
            color,
            opacity,
            scale,
            rotation,
            offset,
        })
    }

    fn collect(&self, g: &Graph<T>, h: &Heads, points: &[Point3<T>]) -> Decoded<T> {
        let (c, o, s, r, d) = (
            g.value(h.color),
            g.value(h.opacity),
            g.value(h.scale),
            g.value(h.rotation),
            g.value(h.offset),
        );
        let mut gaussians = Vec::with_capacity(points.len());
        let mut offsets = Vec::with_capacity(points.len());
        for (i, &p) in points.iter().enumerate() {
            let off = Point3::new(d.at(i, 0), d.at(i, 1), d.at(i, 2));
            offsets.push(off);
            gaussians.push(Gaussian {
                position: p + off,
                rotation: Quat::new(r.at(i, 0), r.at(i, 1), r.at(i, 2), r.at(i, 3)),
                scale: Point3::new(s.at(i, 0), s.at(i, 1), s.at(i, 2)),
                color: [c.at(i, 0), c.at(i, 1), c.at(i, 2)],
                opacity: o.at(i, 0),
            });
        }
        Decoded { gaussians, offsets }
    }

    /// Gaussians for `points` (canonical positions) with their AR hidden
    /// states (four rows per point). Offsets have norm below `max_offset`.
    pub fn decode(&self, points: &[Point3<T>], hidden: &Tensor<T>, image: Option<&Image<T>>) -> Result<Decoded<T>> {
        if points.is_empty() {
            self.check_inputs(points, hidden, image)?;
            return Ok(Decoded {
                gaussians: Vec::new(),
                offsets: Vec::new(),
            });
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let h = self.graph(&mut g, &p, points, hidden, image)?;
        Ok(self.collect(&g, &h, points))
    }

    /// Assembled AR feature for one point's four hidden states (4 × width).
    pub fn assemble_ar_feature(&self, four: &Tensor<T>) -> Result<Tensor<T>> {
        self.ar_feature_vjp(four, None).map(|(f, _)| f)
    }

    /// AR feature and, given `upstream`, the gradient of
    /// `sum(upstream ⊙ feature)` with respect to the four hidden states.
    pub fn ar_feature_vjp(&self, four: &Tensor<T>, upstream: Option<&Tensor<T>>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        if self.ids.ar.is_none() {
            return Err(Error::InvalidConfig(format!(
                "decoder variant {} has no AR feature",
                self.cfg.variant
            )));
        }
        if four.rows != 4 || four.cols != self.ar_width {
            return Err(Error::ShapeMismatch(format!(
                "expected 4x{} hidden states, got {}x{}",
                self.ar_width, four.rows, four.cols
            )));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let x = g.input(four.clone());
        let f = self.ar_feature(&mut g, &p, x, 1);
        let out = g.value(f).clone();
        let grad = upstream.map(|up| {
            let probe = g.dot_const(f, up.clone());
            g.backward(probe);
            g.grad(x).expect("input tracks gradients").clone()
        });
        Ok((out, grad))
    }

    /// Summed objective over an item's views, backpropagated into a fresh
    /// gradient set with every view weighted by `scale`.
    fn item_loss_grads(
        &self,
        item: &DecoderItem<T>,
        weights: &LossWeights,
        perceptual: &(dyn Perceptual<T> + Sync),
        scale: T,
    ) -> Result<(f64, Grads<T>)> {
        let mut grads = Grads::zeros_like(&self.params);
        if item.points.is_empty() || item.views.is_empty() {
            return Ok((0.0, grads));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let heads = self.graph(&mut g, &p, &item.points, &item.hidden, item.image.as_ref())?;
        let dec = self.collect(&g, &heads, &item.points);
        let n = item.points.len();
        let mut d = [
            Tensor::zeros(n, 3),
            Tensor::zeros(n, 1),
            Tensor::zeros(n, 3),
            Tensor::zeros(n, 4),
            Tensor::zeros(n, 3),
        ];
        let mut total = 0.0;
        let opts = RenderOptions {
            early_stop: true,
            threads: 1,
        };
        for (cam, target) in &item.views {
            let r = render(&dec.gaussians, cam, opts);
            let (loss, d_img, d_off) = total_loss_grad(&r.image, target, &dec.offsets, weights, perceptual)?;
            total += loss.total.to_f64_lossy();
            let gg = render_backward(&dec.gaussians, cam, &d_img, opts);
            for i in 0..n {
                let gi = &gg[i];
                for k in 0..3 {
                    *d[0].at_mut(i, k) = d[0].at(i, k) + scale * gi.color[k];
                    *d[2].at_mut(i, k) = d[2].at(i, k) + scale * gi.scale.to_array()[k];
                    *d[4].at_mut(i, k) = d[4].at(i, k) + scale * (gi.position.to_array()[k] + d_off[i].to_array()[k]);
                }
                *d[1].at_mut(i, 0) = d[1].at(i, 0) + scale * gi.opacity;
                for k in 0..4 {
                    *d[3].at_mut(i, k) = d[3].at(i, k) + scale * gi.rotation[k];
                }
            }
        }
        let [dc, dop, ds, dr, doff] = d;
        g.backward_with(vec![
            (heads.color, dc),
            (heads.opacity, dop),
            (heads.scale, ds),
            (heads.rotation, dr),
            (heads.offset, doff),
        ]);
        g.accumulate_param_grads(&mut grads);
        Ok((total, grads))
    }

    /// Mean per-view objective over a batch and its parameter gradients.
    /// Items run on up to `threads` workers and are reduced in order.
    pub fn loss_and_grads(
        &self,
        items: &[DecoderItem<T>],
        weights: &LossWeights,
        perceptual: &(dyn Perceptual<T> + Sync),
        threads: usize,
    ) -> Result<(f64, Grads<T>)> {
        let views: usize = items.iter().filter(|i| !i.points.is_empty()).map(|i| i.views.len()).sum();
        let mut grads = Grads::zeros_like(&self.params);
        if views == 0 {
            return Ok((0.0, grads));
        }
        let inv = T::one() / T::from_usize_lossy(views);
        let per_item = map_indexed(items.len(), threads, |i| {
            self.item_loss_grads(&items[i], weights, perceptual, inv)
        });
        let mut sum = 0.0;
        for r in per_item {
            let (l, gi) = r?;
            sum += l;
            for id in self.params.ids() {
                grads.get_mut(id).add_assign(gi.get(id));
            }
        }
        Ok((sum / views as f64, grads))
    }

    /// Mean per-view objective without gradients.
    pub fn loss(
        &self,
        items: &[DecoderItem<T>],
        weights: &LossWeights,
        perceptual: &(dyn Perceptual<T> + Sync),
    ) -> Result<f64> {
        let mut sum = 0.0;
        let mut views = 0;
        let opts = RenderOptions {
            early_stop: true,
            threads: 1,
        };
        for item in items.iter().filter(|i| !i.points.is_empty()) {
            let dec = self.decode(&item.points, &item.hidden, item.image.as_ref())?;
            for (cam, target) in &item.views {
                let r = render(&dec.gaussians, cam, opts);
                sum += crate::losses::total_loss(&r.image, target, &dec.offsets, weights, perceptual)?
                    .total
                    .to_f64_lossy();
                views += 1;
            }
        }
        Ok(if views == 0 { 0.0 } else { sum / views as f64 })
    }

    pub fn train_step(
        &mut self,
        items: &[DecoderItem<T>],
        weights: &LossWeights,
        perceptual: &(dyn Perceptual<T> + Sync),
        opt: &mut AdamW<T>,
        lr: f64,
        threads: usize,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(items, weights, perceptual, threads)?;
        opt.step(&mut self.params, &grads, lr);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = Meta {
            config: self.cfg.clone(),
            ar_width: self.ar_width,
            image_size: self.image_size,
        };
        Checkpoint::tagged(CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Meta = ckpt.config_of(CHECKPOINT_KIND)?;
        let mut model = Self::new(meta.config, meta.ar_width, meta.image_size, 0)?;
        ckpt.restore(&mut model.params)?;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
