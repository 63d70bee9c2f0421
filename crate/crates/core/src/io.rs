//! `MAPF` float grids and PNG images.
//!
//! A `MAPF` file is the magic `"MAPF"`, then `u32` height, width and channel
//! count (little-endian), then `C*H*W` little-endian `f32` values in
//! channel-major order.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAPF_MAGIC: &[u8; 4] = b"MAPF";

fn mapf_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "MAPF",
        reason: reason.into(),
    }
}

/// `(C, H, W)` of a `[H, W]` or `[C, H, W]` tensor.
fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape {
            op: "map",
            lhs: vec![0, 0, 0],
            rhs: t.shape().to_vec(),
        }),
    }
}

pub fn mapf_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = chw(t)?;
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(MAPF_MAGIC);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(out)
}

/// Parses a `MAPF` buffer into `[C, H, W]`.
pub fn parse_mapf(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 16 || &buf[..4] != MAPF_MAGIC {
        return Err(mapf_err("bad magic or short header"));
    }
    let word = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]) as usize;
    let (h, w, c) = (word(4), word(8), word(12));
    let payload = &buf[16..];
    if payload.len() != 4 * c * h * w {
        return Err(mapf_err(format!(
            "payload of {} bytes does not hold {c}x{h}x{w} floats",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(vec![c, h, w], data)
}

pub fn write_mapf(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, mapf_bytes(t)?)?;
    Ok(())
}

pub fn read_mapf(path: &Path) -> Result<Tensor> {
    parse_mapf(&std::fs::read(path)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_rgb(path: &Path, h: usize, w: usize, px: impl Fn(usize, usize) -> [u8; 3]) -> Result<()> {
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Rgb(px(y as usize, x as usize)));
    img.save(path)?;
    Ok(())
}

/// Writes a `[3, H, W]` image with values in `[-1, 1]` as 8-bit RGB.
pub fn write_rgb_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = chw(t)?;
    if c != 3 {
        return Err(invalid_channels(3, c));
    }
    let d = t.data();
    save_rgb(path, h, w, |y, x| {
        let p = y * w + x;
        [0, 1, 2].map(|ch| to_u8((d[ch * h * w + p] as f64 + 1.0) / 2.0))
    })
}

fn invalid_channels(want: usize, got: usize) -> Error {
    Error::Shape {
        op: "png",
        lhs: vec![want],
        rhs: vec![got],
    }
}

/// Reads an 8-bit image as `[3, H, W]` in `[-1, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let px = img.get_pixel((p % w) as u32, (p / w) as u32);
        px.0[ch] as f32 / 255.0 * 2.0 - 1.0
    }))
}

/// Grayscale visualization of a single-channel map, min-max stretched.
pub fn write_map_png(path: &Path, t: &Tensor) -> Result<()> {
    let (_, h, w) = chw(t)?;
    let d = &t.data()[..h * w];
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v as f64), b.max(v as f64))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    save_rgb(path, h, w, |y, x| {
        let v = to_u8((d[y * w + x] as f64 - lo) / span);
        [v, v, v]
    })
}

/// Normal map visualization `(n + 1) / 2`.
pub fn write_normal_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = chw(t)?;
    if c != 3 {
        return Err(invalid_channels(3, c));
    }
    let d = t.data();
    save_rgb(path, h, w, |y, x| {
        let p = y * w + x;
        [0, 1, 2].map(|ch| to_u8((d[ch * h * w + p] as f64 + 1.0) / 2.0))
    })
}

/// Heatmap of a square matrix with values in `[lo, hi]`, each cell drawn
/// as a `cell x cell` block (blue low, red high).
pub fn write_heatmap_png(path: &Path, m: &Tensor<f64>, lo: f64, hi: f64, cell: usize) -> Result<()> {
    let n = m.shape()[0];
    let side = n * cell;
    save_rgb(path, side, side, |y, x| {
        let v = ((m.data()[(y / cell) * n + x / cell] - lo) / (hi - lo)).clamp(0.0, 1.0);
        [to_u8(v), to_u8(1.0 - (2.0 * v - 1.0).abs()), to_u8(1.0 - v)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapf_roundtrip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.5 - 1.0);
        let b = mapf_bytes(&t).unwrap();
        assert_eq!(&b[..4], b"MAPF");
        assert_eq!(&b[4..8], &3u32.to_le_bytes());
        assert_eq!(&b[8..12], &4u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(parse_mapf(&b).unwrap(), t);
        assert!(parse_mapf(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn two_d_maps_get_one_channel() {
        let t = Tensor::from_fn(&[2, 2], |i| i as f32);
        let back = parse_mapf(&mapf_bytes(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 2, 2]);
    }
}
