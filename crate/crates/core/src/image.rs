//! Float images, the `IMG1` binary format and 8-bit P6 pixmaps.

use std::io::{BufRead, Read, Write};

use crate::binio::ByteCursor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `height × width × channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::LengthMismatch {
                expected: width * height * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = self.index(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Image<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Values rounded to the nearest 8-bit level, as stored in a pixmap.
    pub fn quantized_8bit(&self) -> Self {
        let q = T::lit(255.0);
        Self {
            data: self
                .data
                .iter()
                .map(|&v| (v.max(T::zero()).min(T::one()) * q).round() / q)
                .collect(),
            ..self.clone()
        }
    }
}

const IMG_MAGIC: &[u8; 4] = b"IMG1";

pub fn write_img<T: Scalar, W: Write>(out: &mut W, img: &Image<T>) -> Result<()> {
    out.write_all(IMG_MAGIC)?;
    for v in [img.height, img.width, img.channels] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        bytes.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_img<T: Scalar, R: Read>(mut input: R) -> Result<Image<T>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = ByteCursor::new(&buf, "IMG1");
    if cur.take(4)? != IMG_MAGIC {
        return Err(Error::format("IMG1", "bad magic"));
    }
    let (h, w, c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let data = (0..h * w * c)
        .map(|_| cur.f32().map(|v| T::lit(v as f64)))
        .collect::<Result<Vec<_>>>()?;
    if !cur.is_empty() {
        return Err(Error::format("IMG1", "trailing bytes"));
    }
    Image::from_vec(w, h, c, data)
}

/// Writes a binary P6 pixmap; values are clamped to [0,1] and rounded.
pub fn write_ppm<T: Scalar, W: Write>(out: &mut W, img: &Image<T>) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "P6 needs 3 channels, got {}",
            img.channels
        )));
    }
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm<T: Scalar, R: BufRead>(mut input: R) -> Result<Image<T>> {
    let bad = |r: &str| Error::format("P6", r.to_string());
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    // header: magic, width, height, maxval separated by whitespace (comments allowed)
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("missing P6 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    let body = buf.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    let data = body.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    Image::from_vec(w, h, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn img1_round_trip() {
        let img = Image::from_vec(3, 2, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        let mut buf = Vec::new();
        write_img(&mut buf, &img).unwrap();
        assert_eq!(&buf[..4], b"IMG1");
        assert_eq!(read_img::<f32, _>(&buf[..]).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip_is_8bit_exact() {
        let img = Image::from_vec(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P6\n2 2\n255\n"));
        let back = read_ppm::<f64, _>(&buf[..]).unwrap();
        let q = img.quantized_8bit();
        for (a, b) in back.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
