//! Autoregressive sampling: temperature, top-k and grammar masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::decode::DecodeState;
use super::model::{ArModel, Condition};
use crate::codec::{TokenSequence, Vocabulary, GROUP};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Anything that turns a fed token into next-token logits.
pub trait NextToken {
    fn feed(&mut self, token: u32) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// 0 is greedy.
    pub temperature: f64,
    /// 0 keeps every token.
    pub top_k: usize,
    /// Total length cap including the prefix.
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sampled {
    pub tokens: Vec<u32>,
    /// The length cap ended sampling before `stop` fired.
    pub truncated: bool,
}

/// Draws one token from `logits` restricted to `allowed`.
pub fn draw<R: Rng>(logits: &[f64], allowed: &[bool], opts: &SampleOptions, rng: &mut R) -> Result<u32> {
    let mut cand: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
    if cand.is_empty() {
        return Err(Error::InvalidConfig("sampling mask excludes every token".into()));
    }
    // highest logit first, lowest index on ties
    cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if opts.temperature == 0.0 {
        return Ok(cand[0] as u32);
    }
    if opts.top_k > 0 && opts.top_k < cand.len() {
        cand.truncate(opts.top_k);
    }
    cand.sort_unstable();
    let top = cand.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cand
        .iter()
        .map(|&i| ((logits[i] - top) / opts.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in cand.iter().zip(&weights) {
        if u < w {
            return Ok(i as u32);
        }
        u -= w;
    }
    Ok(*cand.last().expect("non-empty") as u32)
}

/// Feeds `prefix`, then samples until `stop` accepts the sequence or
/// `max_len` is reached. `mask` narrows the allowed set before each draw.
pub fn sample_sequence<N, R, M, S>(
    model: &mut N,
    prefix: &[u32],
    opts: &SampleOptions,
    rng: &mut R,
    mut mask: M,
    mut stop: S,
) -> Result<Sampled>
where
    N: NextToken,
    R: Rng,
    M: FnMut(&[u32], &mut [bool]),
    S: FnMut(&[u32]) -> bool,
{
    let mut tokens = prefix.to_vec();
    let mut logits = Vec::new();
    for &t in prefix {
        logits = model.feed(t)?;
    }
    loop {
        if stop(&tokens) {
            return Ok(Sampled {
                tokens,
                truncated: false,
            });
        }
        if tokens.len() >= opts.max_len {
            return Ok(Sampled {
                tokens,
                truncated: true,
            });
        }
        let mut allowed = vec![true; logits.len()];
        mask(&tokens, &mut allowed);
        let t = draw(&logits, &allowed, opts, rng)?;
        tokens.push(t);
        if !stop(&tokens) && tokens.len() < opts.max_len {
            logits = model.feed(t)?;
        }
    }
}

/// Grammar mask for the token after `tokens` (which start with the S block).
pub fn grammar_mask(tokens: &[u32], vocab: &Vocabulary, max_points: usize, allowed: &mut [bool]) {
    allowed.iter_mut().for_each(|a| *a = false);
    let mut allow = |(lo, hi): (u32, u32)| {
        for a in &mut allowed[lo as usize..=hi as usize] {
            *a = true;
        }
    };
    let end = (vocab.end(), vocab.end());
    let body = tokens.len().saturating_sub(GROUP);
    if tokens[GROUP.min(tokens.len())..].contains(&vocab.end()) {
        allow(end);
        return;
    }
    let points = body / GROUP;
    match body % GROUP {
        0 if points >= max_points => allow(end),
        0 => {
            allow((0, vocab.coord_levels - 1));
            if points > 0 {
                allow(end);
            }
        }
        3 => allow((vocab.coord_levels, vocab.coord_levels + vocab.face_count - 1)),
        _ => allow((0, vocab.coord_levels - 1)),
    }
}

/// A sampled cloud sequence with the final hidden state at each body token.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub sequence: TokenSequence,
    /// One row per body token.
    pub hidden: Tensor<T>,
    pub truncated: bool,
}

struct Stepper<'a, T: Scalar> {
    model: &'a ArModel<T>,
    state: DecodeState<T>,
}

impl<T: Scalar> NextToken for Stepper<'_, T> {
    fn feed(&mut self, token: u32) -> Result<Vec<f64>> {
        let logits = self.model.step(&mut self.state, token)?;
        Ok(logits.into_iter().map(Scalar::to_f64_lossy).collect())
    }
}

/// Body tokens: after the S block, up to the first E.
fn body_len(tokens: &[u32], vocab: &Vocabulary) -> usize {
    let body = &tokens[GROUP.min(tokens.len())..];
    body.iter().position(|&t| t == vocab.end()).unwrap_or(body.len())
}

impl<T: Scalar> ArModel<T> {
    /// Samples a sequence with the model's configured temperature, top-k,
    /// point cap and masking mode. Deterministic given `seed`.
    pub fn sample(&self, cond: &Condition<T>, seed: u64) -> Result<Generated<T>> {
        let vocab = self.cfg.vocab();
        let opts = SampleOptions {
            temperature: self.cfg.temperature,
            top_k: self.cfg.top_k,
            max_len: 2 * GROUP + GROUP * self.cfg.max_points,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stepper = Stepper {
            model: self,
            state: self.begin(cond)?,
        };
        let prefix = [vocab.start(); GROUP];
        let ends = |t: &[u32]| t[GROUP.min(t.len())..].iter().filter(|&&x| x == vocab.end()).count() >= GROUP;
        let max_points = self.cfg.max_points;
        let s = if self.cfg.constrained {
            let mut s = sample_sequence(
                &mut stepper,
                &prefix,
                &opts,
                &mut rng,
                |t, a| grammar_mask(t, &vocab, max_points, a),
                ends,
            )?;
            s.truncated = body_len(&s.tokens, &vocab) / GROUP >= max_points;
            s
        } else {
            sample_sequence(&mut stepper, &prefix, &opts, &mut rng, |_, _| {}, ends)?
        };
        let body = body_len(&s.tokens, &vocab);
        // the last sampled token is never fed; feed it if its state is needed
        while stepper.state.tokens().len() < GROUP + body {
            let t = s.tokens[stepper.state.tokens().len()];
            self.step(&mut stepper.state, t)?;
        }
        Ok(Generated {
            hidden: stepper.state.hidden_rows(GROUP..GROUP + body),
            sequence: TokenSequence::new(s.tokens),
            truncated: s.truncated,
        })
    }

    /// Teacher-forced final hidden states at each body token of `seq`.
    pub fn hidden_states(&self, cond: &Condition<T>, seq: &TokenSequence) -> Result<Tensor<T>> {
        let vocab = self.cfg.vocab();
        let body = body_len(&seq.tokens, &vocab);
        let st = self.replay(cond, &seq.tokens[..(GROUP + body).min(seq.len())])?;
        Ok(st.hidden_rows(GROUP.min(st.hidden().len())..st.hidden().len()))
    }
}
