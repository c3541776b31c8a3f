//! Image ingestion, procedural datasets, and grid output.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, SeededRng};

/// One image `[C, H, W]` with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Vec<f32>,
    pub channels: usize,
    pub resolution: usize,
    pub source: String,
    pub label: Option<u32>,
}

/// Number of shape classes drawn by [`synthetic_dataset`].
pub const SYNTHETIC_CLASSES: u32 = 8;

/// `[0, 255] -> [-1, 1]`.
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// `[-1, 1] -> [0, 255]`, clamped and rounded.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Ordered image collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.records.first().map(|r| r.resolution)
    }

    /// Stacks `indices` into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = self.records.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let (c, r) = (first.channels, first.resolution);
        let mut data = Vec::with_capacity(indices.len() * c * r * r);
        for &i in indices {
            let rec = self
                .records
                .get(i)
                .ok_or_else(|| Error::invalid(format!("index {i} out of range")))?;
            data.extend_from_slice(&rec.pixels);
        }
        Ok(Tensor::from_vec(data, (indices.len(), c, r, r), device)?.to_dtype(dtype)?)
    }

    pub fn all(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, dtype, device)
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Splits off the last `count` records as a held-out set.
    pub fn split_tail(mut self, count: usize) -> (Dataset, Dataset) {
        let keep = self.records.len().saturating_sub(count);
        let tail = self.records.split_off(keep);
        (self, Dataset { records: tail })
    }

    /// Records converted from an image batch tensor.
    pub fn from_tensor(images: &Tensor, source: &str) -> Result<Self> {
        let (b, c, h, w) = images.dims4()?;
        if h != w {
            return Err(Error::shape(format!("images must be square, got {h}x{w}")));
        }
        let v = to_f64_vec(images)?;
        let n = c * h * w;
        Ok(Dataset {
            records: (0..b)
                .map(|i| ImageRecord {
                    pixels: v[i * n..(i + 1) * n].iter().map(|&x| x as f32).collect(),
                    channels: c,
                    resolution: h,
                    source: format!("{source}#{i}"),
                    label: None,
                })
                .collect(),
        })
    }
}

fn center_crop_resize(img: DynamicImage, resolution: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side).to_rgb8();
    if side as usize == resolution {
        cropped
    } else {
        image::imageops::resize(&cropped, resolution as u32, resolution as u32, FilterType::Triangle)
    }
}

fn rgb_to_record(img: &RgbImage, source: String) -> ImageRecord {
    let r = img.width() as usize;
    let mut pixels = vec![0f32; 3 * r * r];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[c * r * r + y as usize * r + x as usize] = byte_to_unit(p[c]);
        }
    }
    ImageRecord { pixels, channels: 3, resolution: r, source, label: None }
}

/// Loads every decodable image in `path` (lexicographic by file name), center-cropped
/// and bilinearly resized to `resolution`. Unreadable files are skipped with a warning.
pub fn load_folder(path: &Path, resolution: usize) -> Result<Dataset> {
    let mut entries: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut records = Vec::new();
    for p in entries {
        match image::open(&p) {
            Ok(img) => {
                let rgb = center_crop_resize(img, resolution);
                records.push(rgb_to_record(&rgb, p.display().to_string()));
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(Dataset { records })
}

fn palette(seed: u64, size: usize) -> Vec<[f32; 3]> {
    let mut rng = SeededRng::seed_from_u64(seed ^ 0x9a1e_77e5);
    (0..size.max(2))
        .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
        .collect()
}

/// Procedural RGB images whose label is the shape type.
///
/// Classes: 0 rectangle, 1 disc, 2 horizontal gradient, 3 vertical gradient,
/// 4 ring, 5 triangle, 6 stripes, 7 checkerboard. Colors come from a seeded palette.
pub fn synthetic_dataset(seed: u64, count: usize, resolution: usize, palette_size: usize) -> Result<Dataset> {
    if count < 1 || resolution < 1 {
        return Err(Error::invalid("synthetic dataset needs count >= 1 and resolution >= 1"));
    }
    let colors = palette(seed, palette_size);
    let r = resolution as f32;
    let records = (0..count)
        .map(|i| {
            let mut rng = SeededRng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            let class = rng.random_range(0..SYNTHETIC_CLASSES);
            let bg = colors[rng.random_range(0..colors.len())];
            let mut fg = colors[rng.random_range(0..colors.len())];
            if fg == bg {
                fg = colors[(colors.iter().position(|c| *c == bg).unwrap() + 1) % colors.len()];
            }
            let cx = rng.random_range(0.3..0.7) * r;
            let cy = rng.random_range(0.3..0.7) * r;
            let size = rng.random_range(0.2..0.4) * r;
            let period = rng.random_range(3..=6) as f32;
            let mut pixels = vec![0f32; 3 * resolution * resolution];
            for y in 0..resolution {
                for x in 0..resolution {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let (dx, dy) = (fx - cx, fy - cy);
                    let dist = (dx * dx + dy * dy).sqrt();
                    // mix = 1 selects the foreground color.
                    let mix: f32 = match class {
                        0 => (dx.abs() < size && dy.abs() < size * 0.7) as u8 as f32,
                        1 => (dist < size) as u8 as f32,
                        2 => fx / r,
                        3 => fy / r,
                        4 => (dist < size && dist > size * 0.55) as u8 as f32,
                        5 => (dy < size && dy > -size && dx.abs() < (size - dy) * 0.5) as u8 as f32,
                        6 => ((fx / period).floor() as i64 % 2 == 0) as u8 as f32,
                        _ => (((fx / period).floor() + (fy / period).floor()) as i64 % 2 == 0) as u8 as f32,
                    };
                    for c in 0..3 {
                        let v = bg[c] * (1.0 - mix) + fg[c] * mix;
                        pixels[c * resolution * resolution + y * resolution + x] = v.clamp(-1.0, 1.0);
                    }
                }
            }
            ImageRecord {
                pixels,
                channels: 3,
                resolution,
                source: format!("synthetic:{seed}:{i}"),
                label: Some(class),
            }
        })
        .collect();
    Ok(Dataset { records })
}

/// Tiles a `[B, C, H, W]` batch in `[-1, 1]` into one 8-bit image, row-major, `columns` wide.
pub fn write_grid(images: &Tensor, path: &Path, columns: usize) -> Result<()> {
    let (b, c, h, w) = images.dims4()?;
    if b == 0 || columns == 0 {
        return Err(Error::invalid("grid needs at least one image and one column"));
    }
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("grid supports 1 or 3 channels, got {c}")));
    }
    let cols = columns.min(b);
    let rows = b.div_ceil(cols);
    let v = to_f64_vec(images)?;
    let mut canvas = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..b {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (ch, slot) in px.iter_mut().enumerate() {
                    let src = if c == 1 { 0 } else { ch };
                    *slot = unit_to_byte(v[((i * c + src) * h + y) * w + x]);
                }
                canvas.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, image::Rgb(px));
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}

/// Writes each image of a batch as its own PNG named `{prefix}{index:05}.png`.
pub fn write_images(images: &Tensor, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let b = images.dim(0)?;
    for i in 0..b {
        write_grid(&images.narrow(0, i, 1)?, &dir.join(format!("{prefix}{i:05}.png")), 1)?;
    }
    Ok(())
}
