//! Binary portable pixmap encoding of rendered frames.

use anyhow::{anyhow, bail, Context, Result};
use binflow::env::Framebuffer;
use binflow::math::quantize8;
use std::path::Path;

/// 8-bit RGB raster, row major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Linear colors to 8 bits: clamp to [0, 1], scale by 255, round half
/// away from zero.
pub fn quantize(fb: &Framebuffer) -> Image8 {
    let mut data = Vec::with_capacity(fb.pixels.len() * 3);
    for px in &fb.pixels {
        data.extend(px.iter().map(|&c| quantize8(c)));
    }
    Image8 { width: fb.width, height: fb.height, data }
}

pub fn encode(img: &Image8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        bail!("truncated pixmap header");
    }
    Ok(std::str::from_utf8(&bytes[start..*pos])
        .context("pixmap header is not ASCII")?
        .to_string())
}

/// Accepts any header whitespace and # comments; pixel data starts one
/// byte after the max value token.
pub fn decode(bytes: &[u8]) -> Result<Image8> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != "P6" {
        bail!("not a binary pixmap, magic {magic:?}");
    }
    let width: u32 = next_token(bytes, &mut pos)?.parse().context("pixmap width")?;
    let height: u32 = next_token(bytes, &mut pos)?.parse().context("pixmap height")?;
    let maxval: u32 = next_token(bytes, &mut pos)?.parse().context("pixmap max value")?;
    if maxval != 255 {
        bail!("unsupported pixmap max value {maxval}, expected 255");
    }
    pos += 1;
    let need = width as usize * height as usize * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| anyhow!("pixmap data truncated: need {need} bytes"))?
        .to_vec();
    Ok(Image8 { width, height, data })
}

pub fn write(path: &Path, fb: &Framebuffer) -> Result<()> {
    std::fs::write(path, encode(&quantize(fb)))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Image8> {
    decode(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}
