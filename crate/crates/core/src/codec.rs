//! Point cloud ↔ token sequence codec.
//!
//! Vocabulary layout for `Q` coordinate levels and `F` faces:
//!
//! | range            | class      |
//! |------------------|------------|
//! | `0 .. Q`         | coordinate |
//! | `Q .. Q+F`       | binding    |
//! | `Q+F`            | start (S)  |
//! | `Q+F+1`          | end (E)    |
//! | `Q+F+2`          | pad (P)    |
//!
//! A full sequence is `S S S S`, then `x y z b` per point in canonical
//! (y, z, x, binding) order, then `E E E E`, then optional padding.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::cloud::{BoundPoint, BoundPointCloud};
use crate::error::{Error, Result, TokenClass};
use crate::geometry::Point3;
use crate::scalar::Scalar;

/// Tokens per point and per framing block.
pub const GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub coord_levels: u32,
    pub face_count: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            coord_levels: 1024,
            face_count: 320,
        }
    }
}

impl Vocabulary {
    pub fn new(coord_levels: u32, face_count: u32) -> Self {
        Self {
            coord_levels,
            face_count,
        }
    }

    pub fn binding_token(&self, binding: u32) -> u32 {
        self.coord_levels + binding
    }

    pub fn start(&self) -> u32 {
        self.coord_levels + self.face_count
    }

    pub fn end(&self) -> u32 {
        self.start() + 1
    }

    pub fn pad(&self) -> u32 {
        self.start() + 2
    }

    pub fn size(&self) -> usize {
        (self.coord_levels + self.face_count + 3) as usize
    }

    pub fn class_of(&self, token: u32) -> Option<TokenClass> {
        let q = self.coord_levels;
        let f = self.face_count;
        match token {
            t if t < q => Some(TokenClass::Coordinate),
            t if t < q + f => Some(TokenClass::Binding),
            t if t == q + f => Some(TokenClass::Start),
            t if t == q + f + 1 => Some(TokenClass::End),
            t if t == q + f + 2 => Some(TokenClass::Pad),
            _ => None,
        }
    }

    /// Token range `[lo, hi)` of a class.
    pub fn class_range(&self, class: TokenClass) -> (u32, u32) {
        let q = self.coord_levels;
        let f = self.face_count;
        match class {
            TokenClass::Coordinate => (0, q),
            TokenClass::Binding => (q, q + f),
            TokenClass::Start => (q + f, q + f + 1),
            TokenClass::End => (q + f + 1, q + f + 2),
            TokenClass::Pad => (q + f + 2, q + f + 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends `P` tokens up to `len`.
    pub fn padded(&self, len: usize, vocab: &Vocabulary) -> Self {
        let mut tokens = self.tokens.clone();
        if tokens.len() < len {
            tokens.resize(len, vocab.pad());
        }
        Self { tokens }
    }
}

/// `floor((c+1)/2·Q)`, with `c` clamped to `[-1, 1]` and the result to `Q−1`.
pub fn quantize<T: Scalar>(c: T, levels: u32) -> u32 {
    let c = if c.is_nan() { T::zero() } else { c.max(-T::one()).min(T::one()) };
    let v = ((c + T::one()) * T::lit(0.5) * T::from_u32(levels).unwrap()).floor();
    v.to_u32().unwrap_or(0).min(levels - 1)
}

/// Bin center `(t + 0.5)/Q · 2 − 1`.
pub fn dequantize<T: Scalar>(token: u32, levels: u32) -> Result<T> {
    if token >= levels {
        return Err(Error::TokenOutOfRange {
            token,
            limit: levels,
        });
    }
    let q = T::from_u32(levels).unwrap();
    Ok((T::from_u32(token).unwrap() + T::lit(0.5)) / q * T::lit(2.0) - T::one())
}

/// Snaps every coordinate to its bin center.
pub fn quantize_cloud<T: Scalar>(cloud: &BoundPointCloud<T>, levels: u32) -> BoundPointCloud<T> {
    let snap = |c: T| dequantize(quantize(c, levels), levels).expect("quantized token in range");
    BoundPointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| BoundPoint {
                position: Point3::new(snap(p.position.x), snap(p.position.y), snap(p.position.z)),
                binding: p.binding,
            })
            .collect(),
    )
}

/// Sort key: quantized (y, z, x), then binding.
pub fn sort_key<T: Scalar>(p: &BoundPoint<T>, levels: u32) -> (u32, u32, u32, u32) {
    (
        quantize(p.position.y, levels),
        quantize(p.position.z, levels),
        quantize(p.position.x, levels),
        p.binding,
    )
}

/// Stable yzx sort on quantized coordinates; ties by binding then original index.
pub fn canonical_sort<T: Scalar>(cloud: &BoundPointCloud<T>, levels: u32) -> BoundPointCloud<T> {
    let mut points = cloud.points.clone();
    points.sort_by_key(|p| sort_key(p, levels));
    BoundPointCloud::new(points)
}

pub fn encode<T: Scalar>(cloud: &BoundPointCloud<T>, vocab: &Vocabulary) -> Result<TokenSequence> {
    let q = vocab.coord_levels;
    if let Some(p) = cloud.points.iter().find(|p| p.binding >= vocab.face_count) {
        return Err(Error::BindingOutOfRange {
            binding: p.binding as usize,
            faces: vocab.face_count as usize,
        });
    }
    let mut tokens = Vec::with_capacity(GROUP * cloud.len() + 2 * GROUP);
    tokens.extend([vocab.start(); GROUP]);
    let mut keyed: Vec<_> = cloud.points.iter().map(|p| sort_key(p, q)).collect();
    keyed.sort();
    for (y, z, x, b) in keyed {
        tokens.extend([x, y, z, vocab.binding_token(b)]);
    }
    tokens.extend([vocab.end(); GROUP]);
    Ok(TokenSequence::new(tokens))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub position: usize,
    pub expected: TokenClass,
    /// `None` when the sequence ended early.
    pub found: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Points in well-formed body groups.
    pub points: usize,
    pub padding: usize,
    /// Decoded points are in canonical order. Not a grammar rule.
    pub sorted: bool,
}

impl ValidationReport {
    pub fn is_grammatical(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Parse<T> {
    points: Vec<BoundPoint<T>>,
    violations: Vec<Violation>,
    padding: usize,
}

fn parse<T: Scalar>(seq: &TokenSequence, vocab: &Vocabulary) -> Parse<T> {
    let toks = &seq.tokens;
    let q = vocab.coord_levels;
    let mut violations = Vec::new();
    let mut points = Vec::new();
    let class = |i: usize| toks.get(i).and_then(|&t| vocab.class_of(t));
    let mut violate = |position: usize, expected: TokenClass| {
        violations.push(Violation {
            position,
            expected,
            found: toks.get(position).copied(),
        });
    };

    // start block
    let mut i = 0;
    while i < GROUP && class(i) == Some(TokenClass::Start) {
        i += 1;
    }
    if i < GROUP {
        violate(i, TokenClass::Start);
        // lenient: skip any remaining leading S tokens
        while class(i) == Some(TokenClass::Start) {
            i += 1;
        }
    }

    // body groups
    let mut body_ok = true;
    loop {
        match class(i) {
            Some(TokenClass::End) | Some(TokenClass::Pad) | None => break,
            _ => {}
        }
        let expect = [
            TokenClass::Coordinate,
            TokenClass::Coordinate,
            TokenClass::Coordinate,
            TokenClass::Binding,
        ];
        if let Some(off) = (0..GROUP).find(|&o| class(i + o) != Some(expect[o])) {
            violate(i + off, expect[off]);
            body_ok = false;
            break;
        }
        let c = |o: usize| dequantize::<T>(toks[i + o], q).expect("coordinate class");
        points.push(BoundPoint {
            position: Point3::new(c(0), c(1), c(2)),
            binding: toks[i + 3] - q,
        });
        i += GROUP;
    }

    let mut padding = 0;
    if body_ok {
        if points.is_empty() {
            violate(i, TokenClass::Coordinate);
        }
        // end block
        let mut ends = 0;
        while ends < GROUP && class(i) == Some(TokenClass::End) {
            ends += 1;
            i += 1;
        }
        if ends < GROUP {
            violate(i, TokenClass::End);
        } else {
            while class(i) == Some(TokenClass::Pad) {
                padding += 1;
                i += 1;
            }
            if i < toks.len() {
                violate(i, TokenClass::Pad);
            }
        }
    }
    Parse {
        points,
        violations,
        padding,
    }
}

fn is_sorted<T: Scalar>(points: &[BoundPoint<T>], levels: u32) -> bool {
    points
        .windows(2)
        .all(|w| sort_key(&w[0], levels) <= sort_key(&w[1], levels))
}

/// Grammar check plus a separate canonical-order flag. Never fails.
pub fn validate(seq: &TokenSequence, vocab: &Vocabulary) -> ValidationReport {
    let p = parse::<f64>(seq, vocab);
    ValidationReport {
        sorted: is_sorted(&p.points, vocab.coord_levels),
        points: p.points.len(),
        padding: p.padding,
        violations: p.violations,
    }
}

/// Strict decode: the first grammar violation is an error.
pub fn decode<T: Scalar>(seq: &TokenSequence, vocab: &Vocabulary) -> Result<BoundPointCloud<T>> {
    let p = parse::<T>(seq, vocab);
    if let Some(v) = p.violations.first() {
        return Err(Error::GrammarViolation {
            position: v.position,
            expected: v.expected,
            found: v.found.unwrap_or(u32::MAX),
        });
    }
    Ok(BoundPointCloud::new(p.points))
}

/// Lenient decode: keeps every well-formed group before the first malformed
/// one and reports the violations.
pub fn decode_lenient<T: Scalar>(
    seq: &TokenSequence,
    vocab: &Vocabulary,
) -> (BoundPointCloud<T>, ValidationReport) {
    let p = parse::<T>(seq, vocab);
    let report = ValidationReport {
        sorted: is_sorted(&p.points, vocab.coord_levels),
        points: p.points.len(),
        padding: p.padding,
        violations: p.violations,
    };
    (BoundPointCloud::new(p.points), report)
}

const TOK_MAGIC: &[u8; 4] = b"TOK1";

pub fn write_tok<W: Write>(out: &mut W, seq: &TokenSequence) -> Result<()> {
    out.write_all(TOK_MAGIC)?;
    out.write_all(&(seq.len() as u32).to_le_bytes())?;
    for t in &seq.tokens {
        out.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tok<R: Read>(mut input: R) -> Result<TokenSequence> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != TOK_MAGIC {
        return Err(Error::format("TOK1", "bad magic"));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        input
            .read_exact(&mut word)
            .map_err(|_| Error::format("TOK1", "truncated token table"))?;
        tokens.push(u32::from_le_bytes(word));
    }
    Ok(TokenSequence::new(tokens))
}

/// Debug format: one token per line.
pub fn write_tok_text<W: Write>(out: &mut W, seq: &TokenSequence) -> Result<()> {
    for t in &seq.tokens {
        writeln!(out, "{t}")?;
    }
    Ok(())
}

pub fn read_tok_text<R: BufRead>(input: R) -> Result<TokenSequence> {
    let mut tokens = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        tokens.push(
            line.parse()
                .map_err(|e| Error::format("token text", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(TokenSequence::new(tokens))
}
