//! Procedural generator of desk-scale "real" and "manipulated" images
//! with exact ground-truth masks.
//!
//! A real image is a smooth sinusoid base plus a per-image tiled 4x4
//! high-frequency "camera fingerprint". Manipulation replaces the
//! fingerprint inside a region with a pattern from a second, structurally
//! different family (constant on 2x2 quadrants), box-blurs the original
//! content there, and adds a small per-channel shift, so the modified
//! pixels are recoverable by thresholding image differences while the
//! real/fake decision still hinges on local high-frequency statistics.
//!
//! Everything is seeded: per-image generators derive from
//! `hash64(seed, category/index)`, so regenerating a dataset is
//! byte-identical.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::masks::{constant_mask, ManipMask, MaskKind};
use crate::metrics::Label;
use crate::rng::{hash64, Pcg32};

const FP_TILE: usize = 4;
/// Per-channel mean shift inside manipulated regions, in units of
/// `fingerprint_strength`. Calibrated once so derive_gt_mask at 0.1
/// recovers regions with IoU >= 0.6.
const REGION_SHIFT_FACTOR: f32 = 1.75;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_size: usize,
    pub real: usize,
    pub partial_fake: usize,
    pub entire_fake: usize,
    pub fingerprint_strength: f32,
    pub region_area_fraction: (f32, f32),
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            real: 1000,
            partial_fake: 1000,
            entire_fake: 1000,
            fingerprint_strength: 0.08,
            region_area_fraction: (0.1, 0.5),
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::usage("image_size must be >= 16 and divisible by 8"));
        }
        let (lo, hi) = self.region_area_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::usage(
                "region_area_fraction bounds must satisfy 0 < lo <= hi < 1",
            ));
        }
        if !self.fingerprint_strength.is_finite() || self.fingerprint_strength < 0.0 {
            return Err(Error::usage("fingerprint_strength must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Real,
    PartialFake,
    EntireFake,
}

impl Category {
    pub fn binary_label(self) -> usize {
        match self {
            Category::Real => 0,
            _ => 1,
        }
    }

    pub fn metrics_label(self) -> Label {
        match self {
            Category::Real => Label::Real,
            _ => Label::Fake,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Real => "real",
            Category::PartialFake => "partial_fake",
            Category::EntireFake => "entire_fake",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split {other}"))),
        }
    }
}

/// One dataset record; paths are relative to the manifest location.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: Option<String>,
    pub label: Category,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Write as JSON lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(
                &serde_json::to_string(record)
                    .map_err(|e| Error::format(format!("manifest encode: {e}")))?,
            );
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::format(format!("manifest line {}: {e}", lineno + 1))
            })?;
            records.push(record);
        }
        Ok(DatasetManifest { records })
    }

    pub fn count(&self, category: Category) -> usize {
        self.records.iter().filter(|r| r.label == category).count()
    }
}

/// A loaded dataset record. `id` is the record's image path, used in
/// error messages.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: Option<ManipMask>,
    pub category: Category,
    pub split: Split,
}

/// Load every record of a manifest into memory, resolving paths against
/// the manifest's directory.
pub fn load_samples(manifest_path: &Path) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .records
        .iter()
        .map(|record| {
            let image = RgbImage::read_ppm(&root.join(&record.image_path))?;
            let mask = match &record.mask_path {
                Some(p) => Some(ManipMask::read_pgm(&root.join(p))?),
                None => None,
            };
            Ok(Sample {
                id: record.image_path.clone(),
                image,
                mask,
                category: record.label,
                split: record.split,
            })
        })
        .collect()
}

/// Sum of 4 random-frequency 2-D sinusoids, min-max normalized to
/// [0.2, 0.8]. One field shared by all three channels.
fn smooth_base(rng: &mut Pcg32, size: usize) -> Vec<f32> {
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.range_f32(0.5, 6.0),
                rng.range_f32(0.5, 6.0),
                rng.range_f32(0.0, std::f32::consts::TAU),
                rng.range_f32(0.5, 1.0),
            )
        })
        .collect();
    let inv = 1.0 / size as f32;
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0f32;
            for &(fx, fy, phase, amp) in &waves {
                v += amp
                    * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) * inv + phase)
                        .sin();
            }
            field.push(v);
        }
    }
    let min = field.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = field.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max - min < 1e-9 {
        return vec![0.5; size * size];
    }
    let scale = 0.6 / (max - min);
    field.iter().map(|&v| 0.2 + (v - min) * scale).collect()
}

/// Real-family fingerprint: independent ±1 cells per channel.
fn real_tile(rng: &mut Pcg32) -> [f32; FP_TILE * FP_TILE * 3] {
    let mut tile = [0.0f32; FP_TILE * FP_TILE * 3];
    for v in tile.iter_mut() {
        *v = if rng.next_bool() { 1.0 } else { -1.0 };
    }
    tile
}

/// Fake-family fingerprint: constant on 2x2 quadrants, so it carries no
/// energy at the 2x2 block scale.
fn fake_tile(rng: &mut Pcg32) -> [f32; FP_TILE * FP_TILE * 3] {
    let mut quads = [0.0f32; 4 * 3];
    for v in quads.iter_mut() {
        *v = if rng.next_bool() { 1.0 } else { -1.0 };
    }
    let mut tile = [0.0f32; FP_TILE * FP_TILE * 3];
    for y in 0..FP_TILE {
        for x in 0..FP_TILE {
            let quad = (y / 2) * 2 + x / 2;
            for c in 0..3 {
                tile[(y * FP_TILE + x) * 3 + c] = quads[quad * 3 + c];
            }
        }
    }
    tile
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn compose(base: &[f32], size: usize, tile: &[f32], strength: f32) -> RgbImage {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let b = base[y * size + x];
            let ti = ((y % FP_TILE) * FP_TILE + x % FP_TILE) * 3;
            for c in 0..3 {
                data.push(quantize(b + strength * tile[ti + c]));
            }
        }
    }
    RgbImage::new(size, size, data).expect("composed image")
}

/// Generate a pristine image: smooth base plus real-family fingerprint.
pub fn gen_real(rng: &mut Pcg32, size: usize, strength: f32) -> (RgbImage, ManipMask) {
    let base = smooth_base(rng, size);
    let tile = real_tile(rng);
    let image = compose(&base, size, &tile, strength);
    let mask = constant_mask(MaskKind::Real, size, size).expect("zero mask");
    (image, mask)
}

/// Generate an entirely synthesized image: smooth base plus fake-family
/// fingerprint over the whole frame; mask is all-one.
pub fn gen_entire_fake(rng: &mut Pcg32, cfg: &GenConfig) -> (RgbImage, ManipMask) {
    let size = cfg.image_size;
    let base = smooth_base(rng, size);
    let tile = fake_tile(rng);
    let image = compose(&base, size, &tile, cfg.fingerprint_strength);
    let mask = constant_mask(MaskKind::EntireFake, size, size).expect("one mask");
    (image, mask)
}

/// Sample a rectangle or ellipse whose pixel-area fraction lies in the
/// configured range; regions under 4 pixels are resampled, up to 100
/// attempts.
fn sample_region(rng: &mut Pcg32, size: usize, lo: f32, hi: f32) -> Result<Vec<u8>> {
    for _ in 0..100 {
        let target = rng.range_f32(lo, hi);
        let aspect = rng.range_f32(0.5, 2.0);
        let mut region = vec![0u8; size * size];
        let mut count = 0usize;
        if rng.next_bool() {
            // rectangle
            let w = ((size as f32 * (target * aspect).sqrt()).round() as usize).clamp(1, size);
            let h = ((size as f32 * (target / aspect).sqrt()).round() as usize).clamp(1, size);
            let x0 = rng.below(size - w + 1);
            let y0 = rng.below(size - h + 1);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    region[y * size + x] = 1;
                }
            }
            count = w * h;
        } else {
            // ellipse
            let a = size as f32 * (target * aspect / std::f32::consts::PI).sqrt();
            let b = size as f32 * (target / (aspect * std::f32::consts::PI)).sqrt();
            if 2.0 * a >= size as f32 || 2.0 * b >= size as f32 {
                continue;
            }
            let cx = rng.range_f32(a, size as f32 - a);
            let cy = rng.range_f32(b, size as f32 - b);
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f32 + 0.5 - cx) / a;
                    let dy = (y as f32 + 0.5 - cy) / b;
                    if dx * dx + dy * dy <= 1.0 {
                        region[y * size + x] = 1;
                        count += 1;
                    }
                }
            }
        }
        let frac = count as f32 / (size * size) as f32;
        if count >= 4 && frac >= lo && frac <= hi {
            return Ok(region);
        }
    }
    Err(Error::usage(
        "could not sample a manipulation region in 100 attempts",
    ))
}

fn box_blur3(channel: &dyn Fn(usize, usize) -> f32, size: usize, x: usize, y: usize) -> f32 {
    let mut acc = 0.0f32;
    let mut n = 0u32;
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let yy = y as i32 + dy;
            let xx = x as i32 + dx;
            if yy >= 0 && yy < size as i32 && xx >= 0 && xx < size as i32 {
                acc += channel(xx as usize, yy as usize);
                n += 1;
            }
        }
    }
    acc / n as f32
}

/// Manipulate a region of a real image: box-blur the original content
/// (destroying its fingerprint), imprint a fake-family fingerprint, and
/// shift each channel. Pixels outside the region are copied bit-for-bit.
pub fn gen_partial_fake(
    source: &RgbImage,
    rng: &mut Pcg32,
    cfg: &GenConfig,
) -> Result<(RgbImage, ManipMask)> {
    let size = cfg.image_size;
    if source.width() != size || source.height() != size {
        return Err(Error::usage("source image does not match configured size"));
    }
    let (lo, hi) = cfg.region_area_fraction;
    let region = sample_region(rng, size, lo, hi)?;
    let tile = fake_tile(rng);
    let strength = cfg.fingerprint_strength;
    let shift: [f32; 3] = [
        if rng.next_bool() { 1.0 } else { -1.0 },
        if rng.next_bool() { 1.0 } else { -1.0 },
        if rng.next_bool() { 1.0 } else { -1.0 },
    ]
    .map(|s| s * REGION_SHIFT_FACTOR * strength);

    let mut data = source.data().to_vec();
    for y in 0..size {
        for x in 0..size {
            if region[y * size + x] == 0 {
                continue;
            }
            let ti = ((y % FP_TILE) * FP_TILE + x % FP_TILE) * 3;
            for c in 0..3 {
                let channel =
                    |xx: usize, yy: usize| source.data()[(yy * size + xx) * 3 + c] as f32 / 255.0;
                let blurred = box_blur3(&channel, size, x, y);
                data[(y * size + x) * 3 + c] =
                    quantize(blurred + strength * tile[ti + c] + shift[c]);
            }
        }
    }
    let image = RgbImage::new(size, size, data)?;
    let mask = ManipMask::new(size, size, region)?;
    Ok((image, mask))
}

/// Mean absolute deviation of pixels from their (even-aligned) 2x2 block
/// mean, over all channels. A cheap high-frequency energy statistic used
/// to sanity-check that the two fingerprint families are separable but
/// not trivially so.
pub fn block_diff_statistic(image: &RgbImage) -> f64 {
    let (w, h) = (image.width(), image.height());
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for by in 0..h / 2 {
        for bx in 0..w / 2 {
            for c in 0..3 {
                let mut vals = [0.0f64; 4];
                for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let px = image.pixel(bx * 2 + dx, by * 2 + dy);
                    vals[i] = px[c] as f64 / 255.0;
                }
                let mean = vals.iter().sum::<f64>() / 4.0;
                acc += vals.iter().map(|v| (v - mean).abs()).sum::<f64>();
                count += 4;
            }
        }
    }
    acc / count as f64
}

// Category tags for per-image seed derivation.
const TAG_REAL: u64 = 1;
const TAG_PARTIAL: u64 = 2;
const TAG_ENTIRE: u64 = 3;
const TAG_HIDDEN_SOURCE: u64 = 4;
const TAG_SPLIT: u64 = 5;

fn per_image_seed(seed: u64, tag: u64, index: usize) -> u64 {
    hash64(hash64(seed, tag), index as u64)
}

/// Quota split assignment: 50% train, 5% val, rest test, over a seeded
/// shuffle of the category's indices.
fn assign_splits(count: usize, rng: &mut Pcg32) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    let n_train = count * 50 / 100;
    let n_val = count * 5 / 100;
    let mut splits = vec![Split::Test; count];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    for &i in &order[n_train..n_train + n_val] {
        splits[i] = Split::Val;
    }
    splits
}

/// Generate a full dataset under `out_dir`: PPM images, PGM masks and a
/// JSON-lines manifest. Partial fakes derive from the real images
/// round-robin and inherit their source's split.
pub fn gen_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut records = Vec::new();
    let mut write_record = |image: &RgbImage,
                            mask: &ManipMask,
                            stem: String,
                            label: Category,
                            split: Split,
                            seed: u64|
     -> Result<()> {
        let image_rel = format!("images/{stem}.ppm");
        let mask_rel = format!("masks/{stem}.pgm");
        image.write_ppm(&out_dir.join(&image_rel))?;
        mask.write_pgm(&out_dir.join(&mask_rel))?;
        records.push(ManifestRecord {
            image_path: image_rel,
            mask_path: Some(mask_rel),
            label,
            split,
            seed,
        });
        Ok(())
    };

    let mut split_rng = Pcg32::new(hash64(cfg.seed, TAG_SPLIT), 0);
    let real_splits = assign_splits(cfg.real, &mut split_rng);
    let entire_splits = assign_splits(cfg.entire_fake, &mut split_rng);
    let orphan_partial_splits = if cfg.real == 0 {
        assign_splits(cfg.partial_fake, &mut split_rng)
    } else {
        Vec::new()
    };

    let mut reals: Vec<RgbImage> = Vec::with_capacity(cfg.real);
    for i in 0..cfg.real {
        let seed = per_image_seed(cfg.seed, TAG_REAL, i);
        let mut rng = Pcg32::new(seed, 0);
        let (image, mask) = gen_real(&mut rng, cfg.image_size, cfg.fingerprint_strength);
        write_record(
            &image,
            &mask,
            format!("real_{i:05}"),
            Category::Real,
            real_splits[i],
            seed,
        )?;
        reals.push(image);
    }

    for i in 0..cfg.partial_fake {
        let seed = per_image_seed(cfg.seed, TAG_PARTIAL, i);
        let mut rng = Pcg32::new(seed, 0);
        let (source, split) = if cfg.real > 0 {
            let src = i % cfg.real;
            (reals[src].clone(), real_splits[src])
        } else {
            // No recorded sources: derive from an unrecorded real image.
            let hidden_seed = per_image_seed(cfg.seed, TAG_HIDDEN_SOURCE, i);
            let mut hidden_rng = Pcg32::new(hidden_seed, 0);
            let (img, _) = gen_real(&mut hidden_rng, cfg.image_size, cfg.fingerprint_strength);
            (img, orphan_partial_splits[i])
        };
        let (image, mask) = gen_partial_fake(&source, &mut rng, cfg)?;
        write_record(
            &image,
            &mask,
            format!("partial_{i:05}"),
            Category::PartialFake,
            split,
            seed,
        )?;
    }

    for i in 0..cfg.entire_fake {
        let seed = per_image_seed(cfg.seed, TAG_ENTIRE, i);
        let mut rng = Pcg32::new(seed, 0);
        let (image, mask) = gen_entire_fake(&mut rng, cfg);
        write_record(
            &image,
            &mask,
            format!("entire_{i:05}"),
            Category::EntireFake,
            entire_splits[i],
            seed,
        )?;
    }

    let manifest = DatasetManifest { records };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Resolve the manifest path of a generated dataset directory.
pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.jsonl")
}
