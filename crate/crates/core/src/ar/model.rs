use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ArConfig;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::image::Image;
use crate::nn::layers::{add_linear, add_norm, Attn, Bound, Linear, Norm};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Raw conditioning: the source image and the template vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub image: Image<T>,
    pub vertices: Vec<Point3<T>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layer {
    pub cross: Attn,
    pub slf: Attn,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Ids {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub img_proj: Linear,
    pub img_pos: ParamId,
    pub pt_in: Linear,
    pub pt_hidden: Linear,
    pub pt_out: Linear,
    pub cond_norm: Norm,
    pub layers: Vec<Layer>,
    pub final_norm: Norm,
    pub head: Linear,
}

/// Farthest-point anchors over a vertex set and the nearest-anchor grouping.
///
/// Selection depends only on coordinates (ties broken lexicographically), so
/// permuting or duplicating vertices leaves the anchor positions unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct FarthestPointGroups {
    pub anchors: Vec<usize>,
    pub groups: Vec<usize>,
}

fn lex_less<T: Scalar>(a: Point3<T>, b: Point3<T>) -> bool {
    let (a, b) = (a.to_array(), b.to_array());
    for k in 0..3 {
        if a[k] != b[k] {
            return a[k] < b[k];
        }
    }
    false
}

impl FarthestPointGroups {
    pub fn new<T: Scalar>(verts: &[Point3<T>], count: usize) -> Self {
        let n = verts.len();
        let count = count.min(n);
        let mut centroid = Point3::zero();
        for &v in verts {
            centroid += v;
        }
        let centroid = centroid * (T::one() / T::from_usize_lossy(n.max(1)));
        // better(i, j): larger key, then lexicographically smaller coordinates
        let better = |key_i: T, i: usize, key_j: T, j: usize| {
            key_i > key_j || (key_i == key_j && lex_less(verts[i], verts[j]))
        };
        let mut dist: Vec<T> = verts.iter().map(|&v| (v - centroid).norm()).collect();
        let mut chosen = vec![false; n];
        let mut anchors = Vec::with_capacity(count);
        for step in 0..count {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if chosen[i] {
                    continue;
                }
                best = match best {
                    Some(b) if !better(dist[i], i, dist[b], b) => Some(b),
                    _ => Some(i),
                };
            }
            let a = best.expect("count <= n");
            chosen[a] = true;
            anchors.push(a);
            for i in 0..n {
                let d = (verts[i] - verts[a]).norm();
                dist[i] = if step == 0 { d } else { dist[i].min(d) };
            }
        }
        let groups = verts
            .iter()
            .map(|&v| {
                let mut best = 0;
                let mut bd = T::infinity();
                for (k, &a) in anchors.iter().enumerate() {
                    let d = (v - verts[a]).norm();
                    if d < bd {
                        bd = d;
                        best = k;
                    }
                }
                best
            })
            .collect();
        Self { anchors, groups }
    }
}

/// Flattens non-overlapping `patch×patch` tiles into rows (row-major tile order).
pub fn patchify<T: Scalar>(img: &Image<T>, patch: usize) -> Result<Tensor<T>> {
    if img.width % patch != 0 || img.height % patch != 0 || img.channels != 3 {
        return Err(Error::BadImageShape {
            height: img.height,
            width: img.width,
            patch,
        });
    }
    let (pw, ph) = (img.width / patch, img.height / patch);
    let cols = patch * patch * 3;
    Ok(Tensor::from_fn(pw * ph, cols, |r, c| {
        let (px, py) = (r % pw, r / pw);
        let ch = c % 3;
        let (dx, dy) = ((c / 3) % patch, (c / 3) / patch);
        img.get(px * patch + dx, py * patch + dy, ch)
    }))
}

#[derive(Debug, Clone)]
pub struct ArModel<T: Scalar> {
    pub cfg: ArConfig,
    pub params: ParamStore<T>,
    pub(crate) ids: Ids,
}

impl<T: Scalar> ArModel<T> {
    pub fn new(cfg: ArConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let std = 0.02;
        let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let patch_dim = cfg.patch * cfg.patch * 3;
        let n_patches = (cfg.image_size / cfg.patch).pow(2);
        let tok_emb = s.add_normal("tok_emb", cfg.vocab().size(), d, std, &mut rng);
        let pos_emb = s.add_normal("pos_emb", cfg.window, d, std, &mut rng);
        let img_proj = add_linear(&mut s, "img.proj", patch_dim, d, (1.0 / patch_dim as f64).sqrt(), &mut rng);
        let img_pos = s.add_normal("img.pos", n_patches, d, std, &mut rng);
        let pt_in = add_linear(&mut s, "pts.in", 3, d, 1.0, &mut rng);
        let pt_hidden = add_linear(&mut s, "pts.hidden", d, d, (1.0 / d as f64).sqrt(), &mut rng);
        let pt_out = add_linear(&mut s, "pts.out", d, d, (1.0 / d as f64).sqrt(), &mut rng);
        let cond_norm = add_norm(&mut s, "cond.norm", d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let attn = |s: &mut ParamStore<T>, kind: &str, rng: &mut ChaCha8Rng| Attn {
                norm: add_norm(s, &format!("layers.{l}.{kind}.norm"), d),
                q: add_linear(s, &format!("layers.{l}.{kind}.q"), d, d, std, rng),
                k: add_linear(s, &format!("layers.{l}.{kind}.k"), d, d, std, rng),
                v: add_linear(s, &format!("layers.{l}.{kind}.v"), d, d, std, rng),
                o: add_linear(s, &format!("layers.{l}.{kind}.o"), d, d, out_std, rng),
            };
            let cross = attn(&mut s, "cross", &mut rng);
            let slf = attn(&mut s, "self", &mut rng);
            layers.push(Layer {
                cross,
                slf,
                ffn_norm: add_norm(&mut s, &format!("layers.{l}.ffn.norm"), d),
                ffn_in: add_linear(&mut s, &format!("layers.{l}.ffn.in"), d, 4 * d, std, &mut rng),
                ffn_out: add_linear(&mut s, &format!("layers.{l}.ffn.out"), 4 * d, d, out_std, &mut rng),
            });
        }
        let final_norm = add_norm(&mut s, "final.norm", d);
        let head = add_linear(&mut s, "head", d, cfg.vocab().size(), std, &mut rng);
        Ok(Self {
            cfg,
            params: s,
            ids: Ids {
                tok_emb,
                pos_emb,
                img_proj,
                img_pos,
                pt_in,
                pt_hidden,
                pt_out,
                cond_norm,
                layers,
                final_norm,
                head,
            },
        })
    }

    pub(crate) fn check_condition(&self, cond: &Condition<T>) -> Result<()> {
        let s = self.cfg.image_size;
        if cond.image.width != s || cond.image.height != s || cond.image.channels != 3 {
            return Err(Error::BadImageShape {
                height: cond.image.height,
                width: cond.image.width,
                patch: self.cfg.patch,
            });
        }
        if cond.vertices.len() < 8 {
            return Err(Error::TooFewPoints {
                min: 8,
                got: cond.vertices.len(),
            });
        }
        Ok(())
    }

    /// Image tokens: patch embedding plus a learned per-patch position.
    pub(crate) fn image_tokens(&self, g: &mut Graph<T>, p: &Bound, pixels: Var) -> Var {
        let x = p.linear(g, pixels, self.ids.img_proj);
        g.add(x, p.get(self.ids.img_pos))
    }

    /// Geometry tokens: per-point MLP, nearest-anchor max pooling, projection.
    pub(crate) fn geometry_tokens(&self, g: &mut Graph<T>, p: &Bound, verts: &[Point3<T>]) -> Var {
        let groups = FarthestPointGroups::new(verts, self.cfg.anchors);
        let coords = Tensor::from_fn(verts.len(), 3, |r, c| verts[r].to_array()[c]);
        let x = g.constant(coords);
        let h = p.linear(g, x, self.ids.pt_in);
        let h = g.gelu(h);
        let h = p.linear(g, h, self.ids.pt_hidden);
        let pooled = g.segment_max(h, &groups.groups, groups.anchors.len());
        p.linear(g, pooled, self.ids.pt_out)
    }

    /// Conditioning tokens (image then geometry, layer-normed) inside `g`. With
    /// `pixel_grad`, the patch matrix is a gradient-tracked input and is returned.
    pub(crate) fn condition_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cond: &Condition<T>,
        pixel_grad: bool,
    ) -> Result<(Var, Var)> {
        self.check_condition(cond)?;
        let patches = patchify(&cond.image, self.cfg.patch)?;
        let pixels = if pixel_grad { g.input(patches) } else { g.constant(patches) };
        let img = self.image_tokens(g, p, pixels);
        let geo = self.geometry_tokens(g, p, &cond.vertices);
        let c = g.concat_rows(&[img, geo]);
        Ok((p.norm(g, c, self.ids.cond_norm), pixels))
    }

    /// Image tokens for a source image, one per patch.
    pub fn embed_image(&self, img: &Image<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let x = g.constant(patchify(img, self.cfg.patch)?);
        let t = self.image_tokens(&mut g, &p, x);
        Ok(g.value(t).clone())
    }

    /// Gradient of `sum(upstream ⊙ embed_image(img))` with respect to the pixels.
    pub fn embed_image_vjp(&self, img: &Image<T>, upstream: &Tensor<T>) -> Result<Image<T>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let x = g.input(patchify(img, self.cfg.patch)?);
        let t = self.image_tokens(&mut g, &p, x);
        let probe = g.dot_const(t, upstream.clone());
        g.backward(probe);
        let dp = g.grad(x).expect("pixels are an input").clone();
        let patch = self.cfg.patch;
        let pw = img.width / patch;
        let mut out = Image::new(img.width, img.height, 3);
        for r in 0..dp.rows {
            let (px, py) = (r % pw, r / pw);
            for c in 0..dp.cols {
                let (dx, dy) = ((c / 3) % patch, (c / 3) / patch);
                let i = out.index(px * patch + dx, py * patch + dy, c % 3);
                out.data[i] = dp.at(r, c);
            }
        }
        Ok(out)
    }

    /// Geometry tokens for template vertices, one per anchor.
    pub fn embed_points(&self, verts: &[Point3<T>]) -> Result<Tensor<T>> {
        if verts.len() < 8 {
            return Err(Error::TooFewPoints {
                min: 8,
                got: verts.len(),
            });
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let t = self.geometry_tokens(&mut g, &p, verts);
        Ok(g.value(t).clone())
    }

    /// Conditioning tokens as a plain tensor.
    pub fn condition_tokens(&self, cond: &Condition<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let (c, _) = self.condition_graph(&mut g, &p, cond, false)?;
        Ok(g.value(c).clone())
    }

    fn attention_block(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: Option<Var>, a: Attn) -> Var {
        let h = p.norm(g, x, a.norm);
        let q = p.linear(g, h, a.q);
        let src = ctx.unwrap_or(h);
        let k = p.linear(g, src, a.k);
        let v = p.linear(g, src, a.v);
        let att = g.attention(q, k, v, self.cfg.heads, ctx.is_none());
        let o = p.linear(g, att, a.o);
        g.add(x, o)
    }

    /// Teacher-forced pass over one window (positions relative to its start).
    /// Returns final hidden states and logits, one row per input token.
    pub(crate) fn window_graph(&self, g: &mut Graph<T>, p: &Bound, tokens: &[u32], cond: Var) -> Result<(Var, Var)> {
        if tokens.len() > self.cfg.window {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                window: self.cfg.window,
            });
        }
        let vocab = self.cfg.vocab().size();
        let ids: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < vocab {
                    Ok(t as usize)
                } else {
                    Err(Error::TokenOutOfRange {
                        token: t,
                        limit: vocab as u32,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.embedding(p.get(self.ids.tok_emb), &ids);
        let pos = g.embedding(p.get(self.ids.pos_emb), &positions);
        let mut x = g.add(tok, pos);
        for layer in &self.ids.layers {
            x = self.attention_block(g, p, x, Some(cond), layer.cross);
            x = self.attention_block(g, p, x, None, layer.slf);
            let h = p.norm(g, x, layer.ffn_norm);
            let h = p.linear(g, h, layer.ffn_in);
            let h = g.gelu(h);
            let f = p.linear(g, h, layer.ffn_out);
            x = g.add(x, f);
        }
        let hidden = p.norm(g, x, self.ids.final_norm);
        let logits = p.linear(g, hidden, self.ids.head);
        Ok((hidden, logits))
    }

    /// Logits and hidden states for one window, without gradients.
    pub fn forward(&self, tokens: &[u32], cond: &Condition<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let (c, _) = self.condition_graph(&mut g, &p, cond, false)?;
        let (h, l) = self.window_graph(&mut g, &p, tokens, c)?;
        Ok((g.value(l).clone(), g.value(h).clone()))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> ArModel<U> {
        ArModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }
}
