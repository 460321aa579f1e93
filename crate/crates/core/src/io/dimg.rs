//! `.dimg` layout, little-endian throughout:
//!
//! ```text
//! "DIMG"  u32 height  u32 width
//! f32 × (height·width)   depth grid, row-major, -1.0 = no return
//! f32 × 3                camera position (cm)
//! f32 × 9                camera-to-world rotation, row-major
//! f32 × 4                focal (px), cx, cy, max range (cm)
//! ```

use std::path::Path;

use nalgebra::Matrix3;

use crate::cloud::{orthonormalize, Point, Viewpoint};
use crate::error::{Error, Result};
use crate::synth::{DepthImage, NO_RETURN};

use super::{read_bytes, write_bytes};

pub const DIMG_MAGIC: &[u8; 4] = b"DIMG";

pub fn encode_dimg(img: &DepthImage) -> Vec<u8> {
    let v = img.view();
    let mut out = Vec::with_capacity(12 + 4 * (img.data().len() + 16));
    out.extend_from_slice(DIMG_MAGIC);
    out.extend_from_slice(&(v.height as u32).to_le_bytes());
    out.extend_from_slice(&(v.width as u32).to_le_bytes());
    let mut put = |x: f64| out.extend_from_slice(&(x as f32).to_le_bytes());
    for &d in img.data() {
        put(d);
    }
    for x in v.position.iter() {
        put(*x);
    }
    for r in 0..3 {
        for c in 0..3 {
            put(v.rotation[(r, c)]);
        }
    }
    for x in [v.focal, v.cx, v.cy, v.max_range] {
        put(x);
    }
    out
}

pub fn decode_dimg(bytes: &[u8]) -> Result<DepthImage> {
    let bad = |m: &str| Error::Format(format!("dimg: {m}"));
    if bytes.len() < 12 || &bytes[..4] != DIMG_MAGIC {
        return Err(bad("missing DIMG magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w) = (u32_at(4), u32_at(8));
    let cells = h.checked_mul(w).ok_or_else(|| bad("image size overflows"))?;
    let expected = cells
        .checked_add(16)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(12))
        .ok_or_else(|| bad("image size overflows"))?;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes for {h}x{w}, found {}", bytes.len())));
    }
    let f = |i: usize| f32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as f64;
    let data: Vec<f64> = (0..cells).map(f).collect();
    let t = |k: usize| f(cells + k);
    let position = Point::new(t(0), t(1), t(2));
    let rotation = orthonormalize(&Matrix3::new(t(3), t(4), t(5), t(6), t(7), t(8), t(9), t(10), t(11)));
    let mut view = Viewpoint::new(position, rotation, t(12), (t(13), t(14)), (h, w))?;
    view.max_range = t(15);
    view.validate()?;
    if data.iter().any(|&d| d != NO_RETURN && !(d > 0.0 && d <= view.max_range)) {
        return Err(bad("depth value outside (0, max_range]"));
    }
    DepthImage::new(view, data)
}

pub fn write_dimg(path: &Path, img: &DepthImage) -> Result<()> {
    write_bytes(path, &encode_dimg(img))
}

pub fn read_dimg(path: &Path) -> Result<DepthImage> {
    decode_dimg(&read_bytes(path)?)
}
