//! Static image export: 16-bit binary PGM and mask rasters.

use std::io::Write;
use std::path::Path;

use crate::cimage::RealImage;
use crate::error::{invalid, Result};
use crate::mask::SamplingMask;

pub const PGM_MAX: u16 = u16::MAX;

/// Quantizes `img / scale` clamped to [0, 1] into 16-bit levels.
pub fn quantize(img: &RealImage, scale: f64) -> Result<Vec<u16>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return invalid(format!("PGM scale must be positive, got {scale}"));
    }
    Ok(img
        .data
        .iter()
        .map(|&v| {
            let t = (v / scale).clamp(0.0, 1.0);
            (t * PGM_MAX as f64).round() as u16
        })
        .collect())
}

/// Binary P5 with maxval 65535 (big-endian samples).
pub fn pgm_bytes(h: usize, w: usize, levels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n{PGM_MAX}\n").into_bytes();
    out.reserve(levels.len() * 2);
    for v in levels {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, img: &RealImage, scale: f64) -> Result<()> {
    let levels = quantize(img, scale)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pgm_bytes(img.h, img.w, &levels))?;
    Ok(())
}

/// Per-pixel `| |rec| - |gt| |`.
pub fn error_map(rec: &RealImage, gt: &RealImage) -> Result<RealImage> {
    if rec.h != gt.h || rec.w != gt.w {
        return invalid("error map: image dims differ");
    }
    let d = rec
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).abs())
        .collect();
    RealImage::new(gt.h, gt.w, d)
}

/// `rows x n_pe` raster with sampled columns white.
pub fn mask_raster(mask: &SamplingMask, rows: usize) -> Result<RealImage> {
    let w = mask.n_pe();
    let data = (0..rows * w)
        .map(|i| if mask.is_sampled(i % w) { 1.0 } else { 0.0 })
        .collect();
    RealImage::new(rows, w, data)
}

pub fn write_mask_pgm(path: &Path, mask: &SamplingMask, rows: usize) -> Result<()> {
    write_pgm(path, &mask_raster(mask, rows)?, 1.0)
}

/// Parses a P5 file written by [`pgm_bytes`] back to `(h, w, levels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return invalid("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| crate::Error::Parse(format!("bad PGM field `{s}`")))
    };
    if fields[0] != "P5" || num(&fields[3])? != PGM_MAX as usize {
        return invalid("only 16-bit P5 PGM is supported");
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 2 * w * h {
        return invalid("PGM body length mismatch");
    }
    let levels = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, levels))
}
