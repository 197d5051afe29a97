//! Measurement model: centered unitary Fourier operator, mask application,
//! undersampling and zero-filling.

use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{centered_fft2, Direction};
use crate::masks::{self, SamplingMask, MIN_SIDE};
use crate::tensor::{Scalar, Tensor};

macro_rules! complex_plane {
    ($name:ident, $what:literal) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            data: Vec<Complex64>,
        }

        impl $name {
            /// Row-major samples; every value must be finite.
            pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
                if height < MIN_SIDE || width < MIN_SIDE {
                    return Err(Error::InvalidInput(format!(
                        concat!($what, " shape {}x{} smaller than {}x{}"),
                        height, width, MIN_SIDE, MIN_SIDE
                    )));
                }
                if data.len() != height * width {
                    return Err(Error::shape(height * width, data.len()));
                }
                if let Some(i) = data.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
                    return Err(Error::InvalidInput(format!(
                        concat!($what, " has a non-finite sample at index {}"),
                        i
                    )));
                }
                Ok($name { height, width, data })
            }

            pub fn zeros(height: usize, width: usize) -> Result<Self> {
                Self::new(height, width, vec![Complex64::new(0.0, 0.0); height * width])
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn shape(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            pub fn data(&self) -> &[Complex64] {
                &self.data
            }

            pub fn into_data(self) -> Vec<Complex64> {
                self.data
            }

            pub fn get(&self, row: usize, col: usize) -> Complex64 {
                self.data[row * self.width + col]
            }

            /// Euclidean norm over all samples.
            pub fn norm(&self) -> f64 {
                self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
            }

            /// Hermitian inner product `Σ conj(self) · other`.
            pub fn inner(&self, other: &Self) -> Complex64 {
                self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
            }

            pub fn scaled(&self, factor: Complex64) -> Self {
                $name {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|v| v * factor).collect(),
                }
            }

            pub fn add(&self, other: &Self) -> Result<Self> {
                if self.shape() != other.shape() {
                    return Err(Error::shape(self.shape(), other.shape()));
                }
                Ok($name {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
                })
            }

            pub fn sub(&self, other: &Self) -> Result<Self> {
                self.add(&other.scaled(Complex64::new(-1.0, 0.0)))
            }
        }
    };
}

complex_plane!(ComplexImage, "image");
complex_plane!(KSpaceGrid, "k-space grid");

impl ComplexImage {
    /// Real-valued image with a zero imaginary channel.
    pub fn from_real(height: usize, width: usize, real: &[f64]) -> Result<Self> {
        Self::new(height, width, real.iter().map(|&r| Complex64::new(r, 0.0)).collect())
    }

    pub fn from_channels(height: usize, width: usize, real: &[f64], imag: &[f64]) -> Result<Self> {
        if real.len() != imag.len() {
            return Err(Error::shape(real.len(), imag.len()));
        }
        Self::new(
            height,
            width,
            real.iter().zip(imag).map(|(&r, &i)| Complex64::new(r, i)).collect(),
        )
    }

    pub fn real(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.re).collect()
    }

    pub fn imag(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.im).collect()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.arg()).collect()
    }

    pub fn is_real(&self) -> bool {
        self.data.iter().all(|v| v.im == 0.0)
    }

    /// Single-item `[1, 2, h, w]` tensor of (real, imaginary) channels.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        planes_to_tensor(&self.data, self.height, self.width)
    }

    /// Reads batch item `item` of a `[n, 2, h, w]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, item: usize) -> Result<Self> {
        let (h, w, data) = tensor_to_planes(t, item)?;
        Self::new(h, w, data)
    }
}

impl KSpaceGrid {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        planes_to_tensor(&self.data, self.height, self.width)
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, item: usize) -> Result<Self> {
        let (h, w, data) = tensor_to_planes(t, item)?;
        Self::new(h, w, data)
    }
}

fn planes_to_tensor<T: Scalar>(data: &[Complex64], h: usize, w: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(2 * h * w);
    out.extend(data.iter().map(|v| T::lit(v.re)));
    out.extend(data.iter().map(|v| T::lit(v.im)));
    Tensor::new([1, 2, h, w], out)
}

fn tensor_to_planes<T: Scalar>(t: &Tensor<T>, item: usize) -> Result<(usize, usize, Vec<Complex64>)> {
    let [n, c, h, w] = t.shape();
    if c != 2 || item >= n {
        return Err(Error::shape(format!("[>{item}, 2, h, w]"), t.shape()));
    }
    let s = t.item_slice(item);
    let plane = h * w;
    let data = (0..plane)
        .map(|p| Complex64::new(s[p].as_f64(), s[plane + p].as_f64()))
        .collect();
    Ok((h, w, data))
}

/// Undersampled k-space data stored densely: exactly zero off the mask support.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceMeasurement {
    mask: SamplingMask,
    values: KSpaceGrid,
}

impl KSpaceMeasurement {
    pub fn new(mask: SamplingMask, values: KSpaceGrid) -> Result<Self> {
        if mask.shape() != values.shape() {
            return Err(Error::shape(mask.shape(), values.shape()));
        }
        let zero = Complex64::new(0.0, 0.0);
        if let Some(i) = mask
            .bits()
            .iter()
            .zip(values.data())
            .position(|(&b, &v)| !b && v != zero)
        {
            return Err(Error::InvalidInput(format!(
                "measurement is nonzero at unsampled bin {i}"
            )));
        }
        Ok(KSpaceMeasurement { mask, values })
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn values(&self) -> &KSpaceGrid {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// `a·self + b·other` for measurements sharing one mask.
    pub fn combine(&self, a: Complex64, other: &Self, b: Complex64) -> Result<Self> {
        if self.mask.bits() != other.mask.bits() {
            return Err(Error::InvalidInput("measurements use different masks".into()));
        }
        let values = self.values.scaled(a).add(&other.values.scaled(b))?;
        Ok(KSpaceMeasurement {
            mask: self.mask.clone(),
            values,
        })
    }
}

/// Centered orthonormal 2D DFT.
pub fn forward_fourier(img: &ComplexImage) -> Result<KSpaceGrid> {
    let mut data = img.data.clone();
    centered_fft2(&mut data, img.height, img.width, Direction::Forward);
    KSpaceGrid::new(img.height, img.width, data)
}

/// Exact inverse (and adjoint) of [`forward_fourier`].
pub fn inverse_fourier(grid: &KSpaceGrid) -> Result<ComplexImage> {
    let mut data = grid.data.clone();
    centered_fft2(&mut data, grid.height, grid.width, Direction::Inverse);
    ComplexImage::new(grid.height, grid.width, data)
}

fn apply_mask(grid: &mut KSpaceGrid, mask: &SamplingMask) {
    for (v, &b) in grid.data.iter_mut().zip(mask.bits()) {
        if !b {
            *v = Complex64::new(0.0, 0.0);
        }
    }
}

/// `m = R F s`.
pub fn undersample(img: &ComplexImage, mask: &SamplingMask) -> Result<KSpaceMeasurement> {
    if img.shape() != mask.shape() {
        return Err(Error::shape(mask.shape(), img.shape()));
    }
    let mut values = forward_fourier(img)?;
    apply_mask(&mut values, mask);
    Ok(KSpaceMeasurement {
        mask: mask.clone(),
        values,
    })
}

/// `s0 = F^H R^H m`.
pub fn zero_fill(m: &KSpaceMeasurement) -> Result<ComplexImage> {
    inverse_fourier(&m.values)
}

/// Replaces the k-space of `img` by the measured values on the mask support.
pub fn data_consistency_project(img: &ComplexImage, m: &KSpaceMeasurement) -> Result<ComplexImage> {
    if img.shape() != m.shape() {
        return Err(Error::shape(m.shape(), img.shape()));
    }
    let mut grid = forward_fourier(img)?;
    for ((v, &b), &meas) in grid.data.iter_mut().zip(m.mask.bits()).zip(m.values.data()) {
        if b {
            *v = meas;
        }
    }
    inverse_fourier(&grid)
}

// ---------------------------------------------------------------------------
// binary format

/// 12-byte magic followed by a little-endian `u32` version.
pub const KSPACE_MAGIC: &[u8; 12] = b"CSMRI-KSPACE";
pub const KSPACE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16 + 8;

/// Serializes a grid: header, `height`, `width` (u32 LE), then row-major
/// interleaved real/imaginary `f32` LE.
pub fn encode_grid(grid: &KSpaceGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data.len() * 8);
    out.extend_from_slice(KSPACE_MAGIC);
    out.extend_from_slice(&KSPACE_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    for v in &grid.data {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<KSpaceGrid> {
    const WHAT: &str = "k-space file";
    if bytes.len() < HEADER_LEN {
        return Err(Error::malformed(WHAT, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..12] != KSPACE_MAGIC {
        return Err(Error::malformed(WHAT, "bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(12);
    if version != KSPACE_VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: version,
            expected: KSPACE_VERSION,
        });
    }
    let (h, w) = (word(16) as usize, word(20) as usize);
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::malformed(WHAT, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::malformed(
            WHAT,
            format!("{} bytes, expected {expected} for {h}x{w}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    KSpaceGrid::new(h, w, data).map_err(|e| Error::malformed(WHAT, e.to_string()))
}

pub fn write_grid(grid: &KSpaceGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<KSpaceGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

/// Mask stored next to a measurement: `scan.ksp` -> `scan.mask.pgm`.
pub fn measurement_mask_path(path: &Path) -> PathBuf {
    path.with_extension("mask.pgm")
}

pub fn write_measurement(m: &KSpaceMeasurement, path: &Path) -> Result<()> {
    write_grid(&m.values, path)?;
    masks::save_mask(&m.mask, &measurement_mask_path(path))
}

pub fn read_measurement(path: &Path) -> Result<KSpaceMeasurement> {
    let grid = read_grid(path)?;
    let mask = masks::load_mask(&measurement_mask_path(path))?;
    KSpaceMeasurement::new(mask, grid)
}
