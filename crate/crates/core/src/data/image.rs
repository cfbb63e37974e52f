use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a binary PPM (P6), PGM (P5) or raw tensor file into a
/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if ext == "dcst" {
        let t = Tensor::read_from(&mut bytes.as_slice(), &context)?;
        return to_rgb(t, &context);
    }
    decode_pnm(&bytes, &context)
}

fn to_rgb(t: Tensor, context: &str) -> Result<Tensor> {
    let s = t.shape().to_vec();
    let (c, h, w) = match s.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        _ => {
            return Err(Error::Format {
                context: context.to_string(),
                offset: 0,
                reason: format!("raw image tensor must be [H,W], [1,H,W] or [3,H,W], got {s:?}"),
            })
        }
    };
    if c == 3 {
        return t.reshaped([3, h, w]);
    }
    let plane = t.into_data();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new([3, h, w], data)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl HeaderCursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::Format {
                context: self.context.to_string(),
                offset: start,
                reason: format!("invalid {what}"),
            })
    }
}

fn decode_pnm(bytes: &[u8], context: &str) -> Result<Tensor> {
    let mut cur = HeaderCursor { bytes, pos: 0, context };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(cur.err("not a binary PPM/PGM file (expected P6 or P5)")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} exceeds 65535")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("missing whitespace after maxval")),
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * channels * sample_bytes;
    let payload = &bytes[cur.pos..];
    if payload.len() < needed {
        return Err(Error::Format {
            context: context.to_string(),
            offset: bytes.len(),
            reason: format!("truncated payload: expected {needed} bytes, found {}", payload.len()),
        });
    }
    let scale = maxval as f64;
    let sample = |i: usize| -> f64 {
        let v = if sample_bytes == 1 {
            payload[i] as u32
        } else {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32
        };
        (v as f64 / scale).min(1.0)
    };
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels == 3 { p * 3 + c } else { p };
            data[c * plane + p] = sample(src);
        }
    }
    Tensor::new([3, height, width], data)
}

/// Encodes `[3, H, W]` values in `[0, 1]` as an 8-bit binary PPM.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", s, "expected [3, H, W]"));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Half-pixel-centred bilinear resize of `[C, H, W]` with edge clamping.
pub fn resize_bilinear(img: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize_bilinear", s, "expected [C, H, W]"));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config(format!("resize target {th}x{tw} must be positive")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (th, tw) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(th, h);
    let xs = taps(tw, w);
    let src = img.data();
    let mut data = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let at = |y: usize, x: usize| src[base + y * w + x];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * lx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * lx;
                data.push(top + (bottom - top) * ly);
            }
        }
    }
    Tensor::new([c, th, tw], data)
}

/// Per-channel mean and standard deviation of a labeled-train pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// SHA-256 over the pool ids and the statistics.
    pub fingerprint: String,
}

impl NormStats {
    /// Statistics over `[C, H, W]` images; channels with (near) zero spread
    /// get unit std.
    pub fn compute<'a>(ids: &[String], images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let c = img.shape()[0];
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::dim("norm_stats", &[sum.len()], &[c]));
            }
            let plane = img.numel() / c;
            for ch in 0..c {
                for &v in &img.data()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Config("normalization statistics need at least one image".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() < 1e-8 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        let mut hasher = Sha256::new();
        for id in ids {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        for v in mean.iter().chain(&std) {
            hasher.update(v.to_le_bytes());
        }
        let fingerprint = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { mean, std, fingerprint })
    }

    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let c = img.shape()[0];
        if c != self.mean.len() {
            return Err(Error::dim("normalize", &[c], &[self.mean.len()]));
        }
        let plane = img.numel() / c;
        let mut out = img.clone();
        for (ch, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(out)
    }
}
