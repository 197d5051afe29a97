//! Image and k-space datasets, per-image normalization and batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kspace::{self, ComplexImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `normalized = (raw − offset) · scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { scale: 1.0, offset: 0.0 };

    /// Real images: affine map of the real channel onto [-1, 1].
    /// Complex images: division by the largest magnitude.
    pub fn for_image(img: &ComplexImage) -> Result<Self> {
        if img.is_real() {
            let (lo, hi) = img
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.re), hi.max(v.re)));
            if hi - lo <= 0.0 {
                return Err(Error::Dataset("constant image cannot be normalized".into()));
            }
            Ok(Normalization {
                scale: 2.0 / (hi - lo),
                offset: lo + (hi - lo) / 2.0,
            })
        } else {
            let peak = img.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
            if peak <= 0.0 {
                return Err(Error::Dataset("all-zero image cannot be normalized".into()));
            }
            Ok(Normalization {
                scale: 1.0 / peak,
                offset: 0.0,
            })
        }
    }

    pub fn apply(&self, img: &ComplexImage) -> ComplexImage {
        self.map(img, |v| (v - self.offset) * self.scale)
    }

    pub fn invert(&self, img: &ComplexImage) -> ComplexImage {
        self.map(img, |v| v / self.scale + self.offset)
    }

    fn map(&self, img: &ComplexImage, f: impl Fn(Complex64) -> Complex64) -> ComplexImage {
        let (h, w) = img.shape();
        ComplexImage::new(h, w, img.data().iter().map(|&v| f(v)).collect()).expect("finite affine map")
    }
}

/// Normalized images of one shape plus what is needed to undo the normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    items: Vec<ComplexImage>,
    normalization: Vec<Normalization>,
    names: Vec<String>,
    digests: Vec<String>,
    complex: bool,
}

impl Dataset {
    /// Normalizes raw images; all must share one shape.
    pub fn from_raw(split: Split, names: Vec<String>, raw: Vec<ComplexImage>, complex: bool) -> Result<Self> {
        let digests = vec![String::new(); raw.len()];
        Self::build(split, names, raw, digests, complex)
    }

    fn build(
        split: Split,
        names: Vec<String>,
        raw: Vec<ComplexImage>,
        digests: Vec<String>,
        complex: bool,
    ) -> Result<Self> {
        if names.len() != raw.len() || digests.len() != raw.len() {
            return Err(Error::shape(raw.len(), names.len()));
        }
        if let Some(first) = raw.first() {
            if let Some((i, img)) = raw.iter().enumerate().find(|(_, x)| x.shape() != first.shape()) {
                return Err(Error::Dataset(format!(
                    "`{}` is {:?}, expected {:?}",
                    names[i],
                    img.shape(),
                    first.shape()
                )));
            }
        }
        let mut items = Vec::with_capacity(raw.len());
        let mut normalization = Vec::with_capacity(raw.len());
        for (img, name) in raw.iter().zip(&names) {
            let n = Normalization::for_image(img).map_err(|e| Error::Dataset(format!("`{name}`: {e}")))?;
            items.push(n.apply(img));
            normalization.push(n);
        }
        Ok(Dataset {
            split,
            items,
            normalization,
            names,
            digests,
            complex,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.items.first().map(|x| x.shape())
    }

    pub fn items(&self) -> &[ComplexImage] {
        &self.items
    }

    pub fn normalization(&self, i: usize) -> Normalization {
        self.normalization[i]
    }

    /// The item in its original units.
    pub fn raw_item(&self, i: usize) -> ComplexImage {
        self.normalization[i].invert(&self.items[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Hex SHA-256 of each source file; empty for in-memory items.
    pub fn digests(&self) -> &[String] {
        &self.digests
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    /// Seeded shuffle into `(train, test)`; `round(fraction · n)` items train.
    pub fn split(self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidInput(format!("split fraction {fraction} outside [0, 1]")));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fraction * n as f64).round() as usize).min(n);
        let pick = |idx: &[usize], split: Split| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Dataset {
                split,
                items: idx.iter().map(|&i| self.items[i].clone()).collect(),
                normalization: idx.iter().map(|&i| self.normalization[i]).collect(),
                names: idx.iter().map(|&i| self.names[i].clone()).collect(),
                digests: idx.iter().map(|&i| self.digests[i].clone()).collect(),
                complex: self.complex,
            }
        };
        Ok((pick(&order[..n_train], Split::Train), pick(&order[n_train..], Split::Test)))
    }
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads an 8- or 16-bit grayscale PNG/PGM as raw intensities.
pub fn read_gray_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray_image(path, &bytes)
}

fn decode_gray_image(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::load_from_memory(bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Dataset(format!(
                "`{}` is {:?}, expected 8- or 16-bit grayscale",
                path.display(),
                other.color()
            )))
        }
    };
    Ok((h, w, pixels))
}

/// Writes `values` as a 16-bit grayscale PNG, mapping `[lo, hi]` onto the full range.
pub fn write_gray_png(path: &Path, height: usize, width: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(height * width, values.len()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let raw: Vec<u16> = values
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer sized above");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit grayscale PNG of values already in `[0, 1]`.
pub fn write_gray_png8(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(height * width, values.len()));
    }
    let raw: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer sized above");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every `.png`/`.pgm` in `dir` (lexicographic order) and splits it.
pub fn load_image_dir(dir: &Path, split_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let set = load_image_set(dir, Split::Train)?;
    if set.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} holds {} image(s), need at least 2",
            dir.display(),
            set.len()
        )));
    }
    set.split(split_fraction, seed)
}

/// Loads every `.png`/`.pgm` in `dir` (lexicographic order) without splitting.
pub fn load_image_set(dir: &Path, split: Split) -> Result<Dataset> {
    let files = sorted_files(dir, &["png", "pgm"])?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("{} holds no images", dir.display())));
    }
    let mut raw = Vec::with_capacity(files.len());
    let mut digests = Vec::with_capacity(files.len());
    for path in &files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (h, w, px) = decode_gray_image(path, &bytes)?;
        raw.push(ComplexImage::from_real(h, w, &px).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?);
        digests.push(sha256_hex(&bytes));
    }
    let names = files.iter().map(|p| file_name(p)).collect();
    Dataset::build(split, names, raw, digests, false)
}

/// Loads every fully sampled `.ksp` grid in `dir` (lexicographic order) as
/// its inverse Fourier image. The result is marked as a test split.
pub fn load_kspace_dataset(dir: &Path) -> Result<Dataset> {
    let files = sorted_files(dir, &["ksp"])?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("{} holds no .ksp files", dir.display())));
    }
    let mut raw = Vec::with_capacity(files.len());
    let mut digests = Vec::with_capacity(files.len());
    for path in &files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let grid = kspace::decode_grid(&bytes)?;
        raw.push(kspace::inverse_fourier(&grid)?);
        digests.push(sha256_hex(&bytes));
    }
    let names = files.iter().map(|p| file_name(p)).collect();
    Dataset::build(Split::Test, names, raw, digests, true)
}

/// Structured-text listing of file names per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn new(train: &Dataset, test: &Dataset, fraction: f64, seed: u64) -> Self {
        SplitManifest {
            seed,
            fraction,
            train: train.names().to_vec(),
            test: test.names().to_vec(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Two independent index streams over a dataset: one for measurements, one
/// for reference images. Each stream walks a fresh permutation per epoch that
/// depends only on `(seed, stream, epoch)`, so the state is just two counters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSampler {
    batch_size: usize,
    seed: u64,
    len: usize,
    drawn: [u64; 2],
    cache: [Option<(u64, Vec<usize>)>; 2],
}

impl BatchSampler {
    pub fn new(batch_size: usize, seed: u64, len: usize) -> Result<Self> {
        if batch_size == 0 || len == 0 {
            return Err(Error::InvalidInput(format!(
                "sampler needs batch_size > 0 and a nonempty dataset (got {batch_size}, {len})"
            )));
        }
        Ok(BatchSampler {
            batch_size,
            seed,
            len,
            drawn: [0, 0],
            cache: [None, None],
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Full batches per epoch (at least one).
    pub fn steps_per_epoch(&self) -> usize {
        (self.len / self.batch_size).max(1)
    }

    /// Indices drawn so far per stream.
    pub fn state(&self) -> [u64; 2] {
        self.drawn
    }

    pub fn restore(&mut self, drawn: [u64; 2]) {
        self.drawn = drawn;
    }

    /// `(m-indices, s-indices)`.
    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        (self.draw(0), self.draw(1))
    }

    fn draw(&mut self, stream: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let t = self.drawn[stream];
            let epoch = t / self.len as u64;
            let pos = (t % self.len as u64) as usize;
            if self.cache[stream].as_ref().map(|(e, _)| *e) != Some(epoch) {
                self.cache[stream] = Some((epoch, self.permutation(stream, epoch)));
            }
            out.push(self.cache[stream].as_ref().expect("filled above").1[pos]);
            self.drawn[stream] += 1;
        }
        out
    }

    fn permutation(&self, stream: usize, epoch: u64) -> Vec<usize> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
        key[16..24].copy_from_slice(&epoch.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng);
        perm
    }
}

/// Synthetic head-like phantom in `[0, 1]`: a bright rim, darker interior and
/// several random ellipses.
pub fn phantom(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (cy, cx, ry, rx, angle, value); coordinates in [-1, 1]
    let mut shapes = Vec::new();
    let ry = rng.gen_range(0.78..0.92);
    let rx = rng.gen_range(0.62..0.78);
    let tilt = rng.gen_range(-0.3..0.3);
    shapes.push((0.0, 0.0, ry, rx, tilt, 0.9));
    shapes.push((0.0, 0.0, ry * 0.9, rx * 0.88, tilt, -0.6));
    for _ in 0..rng.gen_range(3..7) {
        let a = rng.gen_range(0.06..0.32);
        let b = rng.gen_range(0.05..0.22);
        let cy = rng.gen_range(-0.55..0.55);
        let cx = rng.gen_range(-0.4..0.4);
        let v = if rng.gen_bool(0.7) {
            rng.gen_range(0.1..0.45)
        } else {
            -rng.gen_range(0.05..0.2)
        };
        shapes.push((cy, cx, a, b, rng.gen_range(0.0..std::f64::consts::PI), v));
    }
    let mut out = vec![0.0f64; size * size];
    for (r, row) in out.chunks_mut(size).enumerate() {
        let y = 2.0 * (r as f64 + 0.5) / size as f64 - 1.0;
        for (c, px) in row.iter_mut().enumerate() {
            let x = 2.0 * (c as f64 + 0.5) / size as f64 - 1.0;
            for &(cy, cx, ry, rx, ang, v) in &shapes {
                let (dy, dx) = (y - cy, x - cx);
                let (s, co) = ang.sin_cos();
                let u = dx * co + dy * s;
                let w = -dx * s + dy * co;
                if (u / rx).powi(2) + (w / ry).powi(2) <= 1.0 {
                    *px += v;
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// `count` phantoms as raw real images.
pub fn phantom_set(count: usize, size: usize, seed: u64) -> Result<Vec<ComplexImage>> {
    (0..count)
        .map(|i| ComplexImage::from_real(size, size, &phantom(size, seed.wrapping_add(i as u64))))
        .collect()
}
