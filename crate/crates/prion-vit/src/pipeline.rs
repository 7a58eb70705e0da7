//! Dataset plumbing: manifest loading, Sobel-based channel construction,
//! resizing, augmentation, splits, and batch ordering.
//!
//! Preprocessing turns a grayscale specklegram into a 3-channel tensor
//! (normalized intensity, normalized |gx|, normalized |gy|) resized to the
//! model input resolution. Everything downstream of a seed is deterministic;
//! per-sample augmentation streams are derived from (epoch, sample index) so
//! parallel preprocessing cannot reorder random draws.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::speckle::{load_png, Manifest, ManifestEntry, SpeckleImage};
use crate::tensor::Tensor;

pub const MODEL_INPUT_SIZE: usize = 128;
const CACHE_MAGIC: &[u8; 4] = b"SPKL";
const CACHE_VERSION: u32 = 1;

/// One preprocessed example: channel-major `[3, S, S]` image plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label_c: f64,
}

// ── resizing ─────────────────────────────────────────────────────────────

/// Bilinear resample of a row-major `h`×`w` plane with corner-aligned
/// sampling (output corners map exactly onto input corners).
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let scale_y = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = r as f64 * scale_y;
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = c as f64 * scale_x;
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Bilinear resize of a 2-D tensor.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = img.shape() else {
        return Err(Error::InvalidShape {
            op: "resize_bilinear",
            shape: img.shape().to_vec(),
            reason: "expected a 2-D image".into(),
        });
    };
    let data = resize_plane(img.data(), *h, *w, out_h, out_w);
    Tensor::new(vec![out_h, out_w], data)
}

// ── Sobel ────────────────────────────────────────────────────────────────

fn reflect_index(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * len - 2 - i;
    }
    i as usize
}

/// Sobel gradients with reflect padding; returns (gx, gy, magnitude), each
/// the same size as the input.
pub fn sobel(gray: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if h < 3 || w < 3 {
        return Err(Error::InvalidShape {
            op: "sobel",
            shape: vec![h, w],
            reason: "image smaller than the 3x3 kernel".into(),
        });
    }
    assert_eq!(gray.len(), h * w);
    // Separable form of Kx=[[-1,0,1],[-2,0,2],[-1,0,1]] and Ky=Kx^T: smooth
    // with (1,2,1) along one axis, difference along the other. Computing each
    // smoothed neighbor identically makes the difference exactly zero on
    // constant images.
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let at = |r: isize, c: isize| gray[reflect_index(r, h) * w + reflect_index(c, w)];
    let col_smooth = |r: isize, c: isize| at(r - 1, c) + 2.0 * at(r, c) + at(r + 1, c);
    let row_smooth = |r: isize, c: isize| at(r, c - 1) + 2.0 * at(r, c) + at(r, c + 1);
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            gx[r * w + c] = col_smooth(ri, ci + 1) - col_smooth(ri, ci - 1);
            gy[r * w + c] = row_smooth(ri + 1, ci) - row_smooth(ri - 1, ci);
        }
    }
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .collect();
    Ok((gx, gy, mag))
}

// ── preprocessing ────────────────────────────────────────────────────────

/// Min-max normalize to [0,1]; a zero-range plane becomes all zeros.
fn minmax_normalize(plane: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in plane.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 {
        plane.fill(0.0);
    } else {
        for v in plane.iter_mut() {
            *v = (*v - lo) / range;
        }
    }
}

/// Build the 3-channel model input from a raw specklegram: per-image
/// normalized intensity plus normalized |gx| and |gy|, resized to
/// `out_size`². Returns a `[3, out_size, out_size]` tensor.
pub fn preprocess(image: &SpeckleImage, out_size: usize) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    let (gx, gy, _) = sobel(image.pixels(), h, w)?;
    let mut intensity = image.pixels().to_vec();
    let mut abs_gx: Vec<f64> = gx.iter().map(|v| v.abs()).collect();
    let mut abs_gy: Vec<f64> = gy.iter().map(|v| v.abs()).collect();
    minmax_normalize(&mut intensity);
    minmax_normalize(&mut abs_gx);
    minmax_normalize(&mut abs_gy);

    let mut data = Vec::with_capacity(3 * out_size * out_size);
    for plane in [&intensity, &abs_gx, &abs_gy] {
        data.extend(resize_plane(plane, h, w, out_size, out_size));
    }
    Tensor::new(vec![3, out_size, out_size], data)
}

// ── augmentation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Std-dev of additive Gaussian noise in normalized units.
    pub noise_sigma: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Brightness shift drawn uniformly from [-delta, delta].
    pub brightness_delta: f64,
    /// Rotation angle drawn uniformly from [-deg, deg].
    pub rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            noise_sigma: 0.02,
            flip_horizontal: true,
            flip_vertical: true,
            brightness_delta: 0.1,
            rotation_deg: 15.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        for (name, v) in [
            ("brightness_delta", self.brightness_delta),
            ("rotation_deg", self.rotation_deg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn flip_plane_horizontal(plane: &mut [f64], h: usize, w: usize) {
    for r in 0..h {
        plane[r * w..(r + 1) * w].reverse();
    }
}

fn flip_plane_vertical(plane: &mut [f64], h: usize, w: usize) {
    for r in 0..h / 2 {
        for c in 0..w {
            plane.swap(r * w + c, (h - 1 - r) * w + c);
        }
    }
}

fn rotate_plane(plane: &[f64], h: usize, w: usize, radians: f64) -> Vec<f64> {
    let (sin, cos) = radians.sin_cos();
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // inverse rotation: sample where this pixel came from
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor() as isize;
            let y0 = sy.floor() as isize;
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let sample = |yy: isize, xx: isize| {
                plane[reflect_index(yy, h) * w + reflect_index(xx, w)]
            };
            let top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx;
            let bot = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx;
            out[r * w + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Apply rotate, flips, brightness, then noise, clamped to [0,1]. The label
/// is untouched. All randomness comes from `rng`, so a derived per-sample
/// stream gives order-independent parallel augmentation.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Sample> {
    cfg.validate()?;
    let [channels, h, w] = sample.image.shape() else {
        return Err(Error::InvalidShape {
            op: "augment",
            shape: sample.image.shape().to_vec(),
            reason: "expected a [C,H,W] sample image".into(),
        });
    };
    let (channels, h, w) = (*channels, *h, *w);

    let angle = rng.uniform_in(-cfg.rotation_deg, cfg.rotation_deg).to_radians();
    let do_flip_h = cfg.flip_horizontal && rng.bernoulli(0.5);
    let do_flip_v = cfg.flip_vertical && rng.bernoulli(0.5);
    let delta = rng.uniform_in(-cfg.brightness_delta, cfg.brightness_delta);

    let plane_len = h * w;
    let mut data = Vec::with_capacity(sample.image.numel());
    for ch in 0..channels {
        let plane = &sample.image.data()[ch * plane_len..(ch + 1) * plane_len];
        let mut plane = if angle != 0.0 {
            rotate_plane(plane, h, w, angle)
        } else {
            plane.to_vec()
        };
        if do_flip_h {
            flip_plane_horizontal(&mut plane, h, w);
        }
        if do_flip_v {
            flip_plane_vertical(&mut plane, h, w);
        }
        data.extend(plane);
    }
    if delta != 0.0 {
        for v in &mut data {
            *v += delta;
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in &mut data {
            *v += rng.normal(0.0, cfg.noise_sigma);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor::new(vec![channels, h, w], data)?,
        label_c: sample.label_c,
    })
}

// ── manifest loading ─────────────────────────────────────────────────────

pub fn load_manifest(csv_path: &Path) -> Result<Manifest> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["filename", "temperature_c"] {
        return Err(Error::Manifest(format!(
            "expected header filename,temperature_c, got {headers:?}"
        )));
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Manifest(e.to_string()))?;
        let filename = record
            .get(0)
            .filter(|f| !f.is_empty())
            .ok_or_else(|| Error::Manifest("empty filename".into()))?;
        let temp: f64 = record
            .get(1)
            .and_then(|t| t.parse().ok())
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| {
                Error::Manifest(format!("bad temperature for {filename}: {record:?}"))
            })?;
        entries.push(ManifestEntry {
            filename: filename.to_string(),
            temperature_c: temp,
        });
    }
    let dir = csv_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest path has no parent directory".into()))?
        .to_path_buf();
    Ok(Manifest { dir, entries })
}

// ── preprocessed cache ───────────────────────────────────────────────────

pub fn write_cache(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            op: "write_cache",
            shape: image.shape().to_vec(),
            reason: "expected [3,H,W]".into(),
        });
    };
    if *c != 3 {
        return Err(Error::InvalidShape {
            op: "write_cache",
            shape: image.shape().to_vec(),
            reason: "cache format v1 stores exactly 3 channels".into(),
        });
    }
    let mut buf = Vec::with_capacity(16 + image.numel() * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(*h as u32).to_le_bytes());
    buf.extend_from_slice(&(*w as u32).to_le_bytes());
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_cache(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(format!("read header of {}", path.display()), e))?;
    if &header[0..4] != CACHE_MAGIC {
        return Err(Error::Other(format!(
            "{}: not a SPKL cache file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Other(format!(
            "{}: unsupported cache version {version}",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let expected = 3 * h * w * 8;
    if raw.len() != expected {
        return Err(Error::Other(format!(
            "{}: payload is {} bytes, expected {expected}",
            path.display(),
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(vec![3, h, w], data)
}

/// Load and preprocess every manifest entry. With a cache directory, hits
/// are read back instead of recomputed and misses are filled in.
pub fn load_samples(
    manifest: &Manifest,
    out_size: usize,
    cache_dir: Option<&Path>,
) -> Result<Vec<Sample>> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset("manifest has no entries".into()));
    }
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    let load_one = |entry: &ManifestEntry| -> Result<Sample> {
        let cache_path = cache_dir.map(|d| {
            let stem = entry.filename.trim_end_matches(".png");
            d.join(format!("{stem}_{out_size}.spkl"))
        });
        if let Some(ref cp) = cache_path {
            if cp.exists() {
                let image = read_cache(cp)?;
                if image.shape() == [3, out_size, out_size] {
                    return Ok(Sample {
                        image,
                        label_c: entry.temperature_c,
                    });
                }
            }
        }
        let raw = load_png(&manifest.dir.join(&entry.filename))?;
        let image = preprocess(&raw, out_size)?;
        if let Some(ref cp) = cache_path {
            write_cache(cp, &image)?;
        }
        Ok(Sample {
            image,
            label_c: entry.temperature_c,
        })
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        manifest.entries.par_iter().map(load_one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        manifest.entries.iter().map(load_one).collect()
    }
}

// ── splits and batches ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub test_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            test_frac: 0.2,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.test_frac, self.val_frac];
        if fracs.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config(format!(
                "split fractions must all be positive, got {fracs:?}"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffle 0..n with the split seed, then cut train = floor(train_frac·n),
/// test = floor(test_frac·n), val = remainder.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset("cannot split zero samples".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::from_seed(spec.seed).derive(&[0x7370_6c69]);
    rng.shuffle(&mut indices);
    let n_train = (spec.train_frac * n as f64).floor() as usize;
    let n_test = (spec.test_frac * n as f64).floor() as usize;
    let test_end = n_train + n_test;
    Ok(Split {
        train: indices[..n_train].to_vec(),
        test: indices[n_train..test_end].to_vec(),
        val: indices[test_end..].to_vec(),
    })
}

pub fn split_dataset(manifest: &Manifest, spec: &SplitSpec) -> Result<Split> {
    split_indices(manifest.entries.len(), spec)
}

/// Reshuffle `indices` and chunk them. The trailing short batch is kept
/// unless `drop_last` is set.
pub fn make_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut Rng,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if drop_last {
        if let Some(last) = batches.last() {
            if last.len() < batch_size {
                batches.pop();
            }
        }
    }
    Ok(batches)
}

/// Stack samples into a `[B, 3, S, S]` batch tensor plus its label vector.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyDataset("cannot stack an empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: first.image.shape().to_vec(),
                rhs: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label_c);
    }
    Ok((Tensor::new(shape, data)?, labels))
}
