//! Ground-truth manipulation masks and continuous probability maps.
//!
//! Masks are binary per-pixel maps of modified pixels; they are derived
//! from source/fake image pairs by thresholding the mean absolute RGB
//! difference, or constructed as constants for real and entirely
//! synthesized images. Probability maps carry values in [0, 1].
//!
//! File formats: masks are binary PGM (P5, maxval 255, pixels 0 or 255);
//! probability maps are `MAPF` files (one ASCII header line, then
//! little-endian f32 row-major).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{parse_pnm_header, RgbImage};

/// Binary manipulation mask; values are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Continuous map with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Which constant mask to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Real,
    EntireFake,
}

impl ManipMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::usage("mask dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::usage("mask data length mismatch"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::usage("mask values must be 0 or 1"));
        }
        Ok(ManipMask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Number of set pixels.
    pub fn sum(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// The mask as a probability map of hard 0/1 values.
    pub fn to_prob_map(&self) -> ProbMap {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| if v == 1 { 255u8 } else { 0u8 }));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, w, h, maxval, payload) = parse_pnm_header(&bytes)?;
        if magic != "P5" {
            return Err(Error::format(format!("expected P5 magic, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::format("only maxval 255 PGM is supported"));
        }
        if payload.len() < w * h {
            return Err(Error::format("truncated PGM pixel data"));
        }
        let data = payload[..w * h]
            .iter()
            .map(|&v| if v >= 128 { 1u8 } else { 0u8 })
            .collect();
        ManipMask::new(w, h, data)
    }
}

impl ProbMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::usage("map dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::usage("map data length mismatch"));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::usage("map values must lie in [0, 1]"));
        }
        Ok(ProbMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn write_mapf(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("MAPF {} {}\n", self.width, self.height).into_bytes();
        for &v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_mapf(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("MAPF header line missing"))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::format("MAPF header is not UTF-8"))?;
        let mut parts = header.split_ascii_whitespace();
        if parts.next() != Some("MAPF") {
            return Err(Error::format("expected MAPF magic"));
        }
        let w: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("bad MAPF width"))?;
        let h: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("bad MAPF height"))?;
        let payload = &bytes[newline + 1..];
        if payload.len() < w * h * 4 {
            return Err(Error::format("truncated MAPF data"));
        }
        let data: Vec<f32> = payload[..w * h * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ProbMap::new(w, h, data)
    }
}

/// Threshold the per-pixel mean absolute RGB difference of a source/fake
/// pair. A pixel is marked manipulated when the grayscale difference
/// (plain channel mean, divided by 255) strictly exceeds `thresh`.
pub fn derive_gt_mask(source: &RgbImage, fake: &RgbImage, thresh: f32) -> Result<ManipMask> {
    if source.width() != fake.width() || source.height() != fake.height() {
        return Err(Error::usage(format!(
            "image sizes differ: {}x{} vs {}x{}",
            source.width(),
            source.height(),
            fake.width(),
            fake.height()
        )));
    }
    let data = source
        .data()
        .chunks_exact(3)
        .zip(fake.data().chunks_exact(3))
        .map(|(s, f)| {
            let sum: u32 = s
                .iter()
                .zip(f)
                .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs())
                .sum();
            let gray = sum as f32 / (3.0 * 255.0);
            u8::from(gray > thresh)
        })
        .collect();
    ManipMask::new(source.width(), source.height(), data)
}

/// All-zero mask for real faces, all-one for entirely synthesized ones.
pub fn constant_mask(kind: MaskKind, width: usize, height: usize) -> Result<ManipMask> {
    let fill = match kind {
        MaskKind::Real => 0u8,
        MaskKind::EntireFake => 1u8,
    };
    ManipMask::new(width, height, vec![fill; width * height])
}

/// Area-average downsampling to the attention-map resolution. Mask dims
/// must be integer multiples of the target dims; the result keeps soft
/// block means in [0, 1].
pub fn downsample_mask(mask: &ManipMask, target_h: usize, target_w: usize) -> Result<ProbMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::usage("target dims must be positive"));
    }
    if mask.height() % target_h != 0 || mask.width() % target_w != 0 {
        return Err(Error::usage(format!(
            "mask {}x{} not divisible into {}x{} blocks",
            mask.width(),
            mask.height(),
            target_w,
            target_h
        )));
    }
    let bh = mask.height() / target_h;
    let bw = mask.width() / target_w;
    let mut data = Vec::with_capacity(target_h * target_w);
    for ty in 0..target_h {
        for tx in 0..target_w {
            let mut acc = 0.0f64;
            for dy in 0..bh {
                for dx in 0..bw {
                    acc += mask.get(tx * bw + dx, ty * bh + dy) as f64;
                }
            }
            data.push((acc / (bh * bw) as f64) as f32);
        }
    }
    ProbMap::new(target_w, target_h, data)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(map: &ProbMap, factor: usize) -> Result<ProbMap> {
    if factor == 0 {
        return Err(Error::usage("upsample factor must be positive"));
    }
    let (w, h) = (map.width() * factor, map.height() * factor);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(map.data()[(y / factor) * map.width() + x / factor]);
        }
    }
    ProbMap::new(w, h, data)
}

/// Binarize at a strict threshold: 1 where value > thresh.
pub fn binarize(map: &ProbMap, thresh: f32) -> ManipMask {
    let data = map.data().iter().map(|&v| u8::from(v > thresh)).collect();
    ManipMask::new(map.width(), map.height(), data).expect("binarize preserves dims")
}
