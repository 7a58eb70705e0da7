//! Synthetic fiber specklegrams with temperature-dependent modal interference.
//!
//! A [`FiberModeSet`] holds a seeded ensemble of guided modes, each a
//! band-limited complex transverse pattern with a base phase and a
//! temperature sensitivity. Rendering sums the mode fields with phases
//! shifted linearly in temperature and takes the squared magnitude, so
//! nearby temperatures give highly correlated speckle and distant ones
//! decorrelate, which is the signal the regressor has to pick up.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::resize_plane;
use crate::rng::Rng;

pub const DEFAULT_MODE_COUNT: usize = 40;
pub const DEFAULT_KAPPA_RANGE: (f64, f64) = (0.02, 0.20);
pub const DEFAULT_IMAGE_SIZE: usize = 126;
/// Coarse grid edge for the band-limited mode patterns; upsampling this to
/// the render size acts as the low-pass filter.
const PATTERN_GRID: usize = 16;

struct Mode {
    amp_re: f64,
    amp_im: f64,
    phi0: f64,
    kappa: f64,
    pattern_re: Vec<f64>,
    pattern_im: Vec<f64>,
}

pub struct FiberModeSet {
    modes: Vec<Mode>,
    grid: usize,
    seed: u64,
}

impl FiberModeSet {
    pub fn new(seed: u64, mode_count: usize) -> Result<Self> {
        Self::with_params(seed, mode_count, DEFAULT_KAPPA_RANGE)
    }

    pub fn with_params(seed: u64, mode_count: usize, kappa_range: (f64, f64)) -> Result<Self> {
        if mode_count == 0 {
            return Err(Error::EmptyModeSet);
        }
        let (k_lo, k_hi) = kappa_range;
        if !(k_lo > 0.0 && k_hi >= k_lo && k_hi.is_finite()) {
            return Err(Error::Config(format!(
                "kappa range must satisfy 0 < lo <= hi, got [{k_lo}, {k_hi}]"
            )));
        }
        let mut rng = Rng::from_seed(seed).derive(&[0x6d6f_6465]);
        let grid = PATTERN_GRID;
        let modes = (0..mode_count)
            .map(|_| {
                let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
                let phi0 = rng.uniform_in(0.0, std::f64::consts::TAU);
                let kappa = rng.uniform_in(k_lo, k_hi);
                let pattern_re = (0..grid * grid).map(|_| rng.normal(0.0, 1.0)).collect();
                let pattern_im = (0..grid * grid).map(|_| rng.normal(0.0, 1.0)).collect();
                Mode {
                    amp_re: theta.cos(),
                    amp_im: theta.sin(),
                    phi0,
                    kappa,
                    pattern_re,
                    pattern_im,
                }
            })
            .collect();
        Ok(Self { modes, grid, seed })
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kappas(&self) -> impl Iterator<Item = f64> + '_ {
        self.modes.iter().map(|m| m.kappa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl SpeckleImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidShape {
                op: "speckle_image",
                shape: vec![height, width],
                reason: format!("pixel buffer has {} entries", pixels.len()),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidShape {
                op: "speckle_image",
                shape: vec![height, width],
                reason: "intensities outside [0,1]".into(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Quantize to 8 bits, matching what gets stored on disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, pixels)
    }
}

/// Render the interference pattern at one temperature. Deterministic for a
/// given (mode set, temperature, size).
pub fn render_specklegram(
    modes: &FiberModeSet,
    temperature_c: f64,
    size: usize,
) -> Result<SpeckleImage> {
    if modes.modes.is_empty() {
        return Err(Error::EmptyModeSet);
    }
    if !temperature_c.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be finite, got {temperature_c}"
        )));
    }
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }

    let n = size * size;
    let mut field_re = vec![0.0; n];
    let mut field_im = vec![0.0; n];
    for mode in &modes.modes {
        let phase = mode.phi0 + mode.kappa * temperature_c;
        // a_m * e^{i phase}
        let (s, c) = phase.sin_cos();
        let f_re = mode.amp_re * c - mode.amp_im * s;
        let f_im = mode.amp_re * s + mode.amp_im * c;
        let psi_re = resize_plane(&mode.pattern_re, modes.grid, modes.grid, size, size);
        let psi_im = resize_plane(&mode.pattern_im, modes.grid, modes.grid, size, size);
        for i in 0..n {
            field_re[i] += psi_re[i] * f_re - psi_im[i] * f_im;
            field_im[i] += psi_re[i] * f_im + psi_im[i] * f_re;
        }
    }

    let mut intensity: Vec<f64> = field_re
        .iter()
        .zip(&field_im)
        .map(|(&re, &im)| re * re + im * im)
        .collect();
    let max = intensity.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(Error::ZeroVariance { what: "rendered specklegram" });
    }
    for v in &mut intensity {
        *v /= max;
    }
    SpeckleImage::new(size, size, intensity)
}

/// Zero-mean normalized cross-correlation of two equally sized images.
pub fn zncc(a: &SpeckleImage, b: &SpeckleImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch {
            op: "zncc",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let n = a.pixels.len() as f64;
    let mean_a = a.pixels.iter().sum::<f64>() / n;
    let mean_b = b.pixels.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&pa, &pb) in a.pixels.iter().zip(&b.pixels) {
        let da = pa - mean_a;
        let db = pb - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::ZeroVariance { what: "zncc input" });
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Inclusive temperature grid from `t_min` to `t_max` in `step` increments.
pub fn temperature_grid(t_min: f64, t_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(t_min < t_max) || !t_min.is_finite() || !t_max.is_finite() {
        return Err(Error::InvalidGrid { t_min, t_max, step });
    }
    // The +1e-6 absorbs representation error so 120/0.2 lands on 601 points.
    let count = ((t_max - t_min) / step + 1e-6).floor() as usize + 1;
    Ok((0..count).map(|i| t_min + i as f64 * step).collect())
}

pub fn image_filename(temperature_c: f64) -> String {
    let milli = (temperature_c * 1000.0).round() as i64;
    format!("speckle_T{milli:06}.png")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub filename: String,
    pub temperature_c: f64,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn csv_path(&self) -> PathBuf {
        self.dir.join("manifest.csv")
    }

    pub fn write(&self) -> Result<()> {
        let path = self.csv_path();
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::io(format!("create {}", path.display()), e.into()))?;
        w.write_record(["filename", "temperature_c"])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        for entry in &self.entries {
            // Shortest round-trip formatting: the parsed label must equal
            // the rendered temperature bit for bit, whatever the grid step.
            w.write_record([&entry.filename, &entry.temperature_c.to_string()])
                .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("flush {}", path.display()), e))?;
        Ok(())
    }
}

fn write_png(path: &Path, image: &SpeckleImage) -> Result<()> {
    let buf = image::GrayImage::from_raw(
        image.width as u32,
        image.height as u32,
        image.to_bytes(),
    )
    .expect("buffer sized to width*height");
    buf.save(path)
        .map_err(|e| Error::io(format!("write {}", path.display()), std::io::Error::other(e)))
}

pub fn load_png(path: &Path) -> Result<SpeckleImage> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))?
        .into_luma8();
    SpeckleImage::from_bytes(img.width() as usize, img.height() as usize, img.as_raw())
}

/// Render and store one image per grid temperature plus a manifest CSV.
/// Rerunning with the same mode set produces byte-identical files.
pub fn generate_dataset(
    modes: &FiberModeSet,
    t_min: f64,
    t_max: f64,
    step: f64,
    size: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    let grid = temperature_grid(t_min, t_max, step)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("create {}", out_dir.display()), e))?;

    let render_one = |&t: &f64| -> Result<ManifestEntry> {
        let image = render_specklegram(modes, t, size)?;
        let filename = image_filename(t);
        write_png(&out_dir.join(&filename), &image)?;
        Ok(ManifestEntry {
            filename,
            temperature_c: t,
        })
    };

    #[cfg(feature = "parallel")]
    let entries: Result<Vec<ManifestEntry>> = {
        use rayon::prelude::*;
        grid.par_iter().map(render_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Result<Vec<ManifestEntry>> = grid.iter().map(render_one).collect();

    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        entries: entries?,
    };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_modes(seed: u64) -> FiberModeSet {
        FiberModeSet::new(seed, DEFAULT_MODE_COUNT).unwrap()
    }

    #[test]
    fn same_seed_same_mode_set() {
        let a = small_modes(11);
        let b = small_modes(11);
        for (ma, mb) in a.modes.iter().zip(&b.modes) {
            assert_eq!(ma.phi0.to_bits(), mb.phi0.to_bits());
            assert_eq!(ma.kappa.to_bits(), mb.kappa.to_bits());
            assert_eq!(ma.pattern_re, mb.pattern_re);
        }
    }

    #[test]
    fn kappa_positive_and_in_range() {
        let modes = small_modes(3);
        for k in modes.kappas() {
            assert!(k >= DEFAULT_KAPPA_RANGE.0 && k <= DEFAULT_KAPPA_RANGE.1);
        }
    }

    #[test]
    fn empty_mode_set_rejected() {
        assert!(matches!(
            FiberModeSet::new(0, 0),
            Err(Error::EmptyModeSet)
        ));
    }

    #[test]
    fn render_is_deterministic() {
        let modes = small_modes(5);
        let a = render_specklegram(&modes, 37.2, 64).unwrap();
        let b = render_specklegram(&modes, 37.2, 64).unwrap();
        let bits = |img: &SpeckleImage| -> Vec<u64> {
            img.pixels().iter().map(|p| p.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn render_normalized_to_unit_max() {
        let modes = small_modes(5);
        let img = render_specklegram(&modes, 80.0, 48).unwrap();
        let min = img.pixels().iter().copied().fold(f64::INFINITY, f64::min);
        let max = img.pixels().iter().copied().fold(0.0_f64, f64::max);
        assert!(min >= 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn zncc_self_is_one_and_negation_is_minus_one() {
        let modes = small_modes(9);
        let img = render_specklegram(&modes, 25.0, 48).unwrap();
        assert!((zncc(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let flipped = SpeckleImage::new(
            img.width(),
            img.height(),
            img.pixels().iter().map(|p| 1.0 - p).collect(),
        )
        .unwrap();
        assert!((zncc(&img, &flipped).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zncc_symmetric_and_rejects_constant() {
        let modes = small_modes(13);
        let a = render_specklegram(&modes, 10.0, 48).unwrap();
        let b = render_specklegram(&modes, 11.0, 48).unwrap();
        let ab = zncc(&a, &b).unwrap();
        let ba = zncc(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let flat = SpeckleImage::new(48, 48, vec![0.5; 48 * 48]).unwrap();
        assert!(matches!(zncc(&a, &flat), Err(Error::ZeroVariance { .. })));
        let small = SpeckleImage::new(4, 4, vec![0.5; 16]).unwrap();
        assert!(matches!(zncc(&a, &small), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn correlation_decays_with_temperature_distance() {
        let deltas = [0.2, 2.0, 20.0];
        let mut means = [0.0; 3];
        let seeds = 20;
        for seed in 0..seeds {
            let modes = small_modes(seed);
            let base = render_specklegram(&modes, 30.0, 48).unwrap();
            for (i, &dt) in deltas.iter().enumerate() {
                let other = render_specklegram(&modes, 30.0 + dt, 48).unwrap();
                means[i] += zncc(&base, &other).unwrap() / seeds as f64;
            }
        }
        assert!(
            means[0] >= means[1] && means[1] >= means[2],
            "zncc means not non-increasing: {means:?}"
        );
        assert!(means[0] > means[2], "no decorrelation at all: {means:?}");
    }

    #[test]
    fn grid_counts_match_contract() {
        assert_eq!(temperature_grid(0.0, 120.0, 0.2).unwrap().len(), 601);
        assert_eq!(temperature_grid(0.0, 1.0, 1.0).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            temperature_grid(5.0, 4.0, 0.1),
            Err(Error::InvalidGrid { .. })
        ));
        assert!(matches!(
            temperature_grid(0.0, 1.0, 0.0),
            Err(Error::InvalidGrid { .. })
        ));
    }

    #[test]
    fn filenames_are_zero_padded_millidegrees() {
        assert_eq!(image_filename(0.0), "speckle_T000000.png");
        assert_eq!(image_filename(0.2), "speckle_T000200.png");
        assert_eq!(image_filename(120.0), "speckle_T120000.png");
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let modes = small_modes(21);
        let manifest = generate_dataset(&modes, 20.0, 21.0, 0.5, 32, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        for entry in &manifest.entries {
            let loaded = load_png(&dir.path().join(&entry.filename)).unwrap();
            assert_eq!(loaded.width(), 32);
            let rendered = render_specklegram(&modes, entry.temperature_c, 32).unwrap();
            // on-disk bytes are the 8-bit quantization of the render
            assert_eq!(loaded.to_bytes(), rendered.to_bytes());
        }
        let csv_text = fs::read_to_string(manifest.csv_path()).unwrap();
        assert!(csv_text.starts_with("filename,temperature_c\n"));
        assert!(csv_text.contains("speckle_T020500.png,20.5\n"));
        assert!(!csv_text.contains('\r'));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let modes = small_modes(33);
        generate_dataset(&modes, 0.0, 1.0, 0.5, 24, dir_a.path()).unwrap();
        generate_dataset(&modes, 0.0, 1.0, 0.5, 24, dir_b.path()).unwrap();
        for name in ["speckle_T000000.png", "speckle_T000500.png", "speckle_T001000.png", "manifest.csv"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }
}
