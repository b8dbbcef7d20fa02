//! Incremental decoding with per-layer key/value caches.
//!
//! Every step calls the same kernels as the teacher-forced graph, so a cached
//! run reproduces full recomputation bit for bit. When the context reaches
//! the window, it slides by the stride and the cache is rebuilt for the
//! retained tokens, mirroring how training windows are laid out.

use super::model::{ArModel, Condition};
use crate::nn::layers::{Attn, Linear, Norm};
use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    window_start: usize,
    tokens: Vec<u32>,
    /// Final hidden state for every fed token, in feed order.
    hidden: Vec<Vec<T>>,
    last_logits: Vec<T>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn hidden(&self) -> &[Vec<T>] {
        &self.hidden
    }

    pub fn window_start(&self) -> usize {
        self.window_start
    }

    pub fn last_logits(&self) -> &[T] {
        &self.last_logits
    }

    /// Hidden states for `range` as a matrix.
    pub fn hidden_rows(&self, range: std::ops::Range<usize>) -> Tensor<T> {
        let d = self.hidden.first().map_or(0, |h| h.len());
        let mut data = Vec::with_capacity(range.len() * d);
        for r in range.clone() {
            data.extend_from_slice(&self.hidden[r]);
        }
        Tensor {
            rows: range.len(),
            cols: d,
            data,
        }
    }
}

fn append_row<T: Scalar>(t: &mut Tensor<T>, row: &Tensor<T>) {
    if t.rows == 0 {
        t.cols = row.cols;
    }
    t.data.extend_from_slice(&row.data);
    t.rows += 1;
}

impl<T: Scalar> ArModel<T> {
    fn lin(&self, x: &Tensor<T>, l: Linear) -> Tensor<T> {
        kernels::linear(x, self.params.value(l.w), self.params.value(l.b))
    }

    fn ln(&self, x: &Tensor<T>, n: Norm) -> Tensor<T> {
        kernels::layer_norm(x, self.params.value(n.g), self.params.value(n.b)).0
    }

    /// Starts a decode with precomputed cross-attention keys and values.
    pub fn begin(&self, cond: &Condition<T>) -> Result<DecodeState<T>> {
        let ctx = self.condition_tokens(cond)?;
        self.begin_with_tokens(&ctx)
    }

    pub fn begin_with_tokens(&self, ctx: &Tensor<T>) -> Result<DecodeState<T>> {
        let cross = self
            .ids
            .layers
            .iter()
            .map(|l| (self.lin(ctx, l.cross.k), self.lin(ctx, l.cross.v)))
            .collect();
        let empty = || vec![Tensor::zeros(0, self.cfg.d_model); self.cfg.layers];
        Ok(DecodeState {
            cross,
            keys: empty(),
            values: empty(),
            window_start: 0,
            tokens: Vec::new(),
            hidden: Vec::new(),
            last_logits: Vec::new(),
        })
    }

    fn attend(&self, x: &Tensor<T>, a: Attn, k: &Tensor<T>, v: &Tensor<T>, q_in: &Tensor<T>) -> Tensor<T> {
        let q = self.lin(q_in, a.q);
        let (att, _) = kernels::attention(&q, k, v, self.cfg.heads, false);
        let o = self.lin(&att, a.o);
        let mut y = x.clone();
        y.add_assign(&o);
        y
    }

    /// Runs one token through the stack at window-relative position `pos`.
    fn run_token(&self, st: &mut DecodeState<T>, token: u32, pos: usize) -> (Tensor<T>, Tensor<T>) {
        let tok = Tensor::row_vector(self.params.value(self.ids.tok_emb).row(token as usize).to_vec());
        let pe = Tensor::row_vector(self.params.value(self.ids.pos_emb).row(pos).to_vec());
        let mut x = tok;
        x.add_assign(&pe);
        for (l, layer) in self.ids.layers.iter().enumerate() {
            let h = self.ln(&x, layer.cross.norm);
            let (ck, cv) = &st.cross[l];
            x = self.attend(&x, layer.cross, ck, cv, &h);
            let h = self.ln(&x, layer.slf.norm);
            append_row(&mut st.keys[l], &self.lin(&h, layer.slf.k));
            append_row(&mut st.values[l], &self.lin(&h, layer.slf.v));
            x = self.attend(&x, layer.slf, &st.keys[l], &st.values[l], &h);
            let h = self.ln(&x, layer.ffn_norm);
            let f = self.lin(&h, layer.ffn_in).map(kernels::gelu);
            x.add_assign(&self.lin(&f, layer.ffn_out));
        }
        let hidden = self.ln(&x, self.ids.final_norm);
        let logits = self.lin(&hidden, self.ids.head);
        (hidden, logits)
    }

    /// Appends `token` and returns logits for the next position.
    pub fn step(&self, st: &mut DecodeState<T>, token: u32) -> Result<Vec<T>> {
        let vocab = self.cfg.vocab().size();
        if token as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                token,
                limit: vocab as u32,
            });
        }
        if st.tokens.len() - st.window_start == self.cfg.window {
            // slide: rebuild the caches over the retained suffix
            st.window_start += self.cfg.stride;
            for l in 0..self.cfg.layers {
                st.keys[l] = Tensor::zeros(0, self.cfg.d_model);
                st.values[l] = Tensor::zeros(0, self.cfg.d_model);
            }
            let retained: Vec<u32> = st.tokens[st.window_start..].to_vec();
            for (pos, &t) in retained.iter().enumerate() {
                self.run_token(st, t, pos);
            }
        }
        let pos = st.tokens.len() - st.window_start;
        let (hidden, logits) = self.run_token(st, token, pos);
        st.tokens.push(token);
        st.hidden.push(hidden.data);
        st.last_logits = logits.data.clone();
        Ok(logits.data)
    }

    /// Feeds a whole sequence, returning the state (hidden states for every token).
    pub fn replay(&self, cond: &Condition<T>, tokens: &[u32]) -> Result<DecodeState<T>> {
        let mut st = self.begin(cond)?;
        for &t in tokens {
            self.step(&mut st, t)?;
        }
        Ok(st)
    }
}
