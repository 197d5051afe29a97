//! Undersampling masks: generation, rate measurement and P5 persistence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported grid side.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Radial,
    Cartesian,
    Random,
    Spiral,
    Full,
}

impl Pattern {
    pub const GENERATED: [Pattern; 4] = [
        Pattern::Radial,
        Pattern::Cartesian,
        Pattern::Random,
        Pattern::Spiral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Radial => "radial",
            Pattern::Cartesian => "cartesian",
            Pattern::Random => "random",
            Pattern::Spiral => "spiral",
            Pattern::Full => "full",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radial" => Ok(Pattern::Radial),
            "cartesian" => Ok(Pattern::Cartesian),
            "random" => Ok(Pattern::Random),
            "spiral" => Ok(Pattern::Spiral),
            "full" => Ok(Pattern::Full),
            other => Err(Error::InvalidInput(format!("unknown mask pattern `{other}`"))),
        }
    }
}

/// Recipe for a generated mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub pattern: Pattern,
    pub nominal_rate: f64,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(pattern: Pattern, nominal_rate: f64, height: usize, width: usize, seed: u64) -> Self {
        MaskSpec {
            pattern,
            nominal_rate,
            height,
            width,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_rate > 0.0 && self.nominal_rate <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "sampling rate {} outside (0, 1]",
                self.nominal_rate
            )));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "mask shape {}x{} smaller than {MIN_SIDE}x{MIN_SIDE}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Binary selection of acquired k-space bins, DC at `(height / 2, width / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pub nominal_rate: f64,
    pub pattern: Pattern,
    pub seed: u64,
}

impl SamplingMask {
    pub fn from_bits(
        height: usize,
        width: usize,
        bits: Vec<bool>,
        pattern: Pattern,
        nominal_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "mask shape {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if bits.len() != height * width {
            return Err(Error::shape(height * width, bits.len()));
        }
        if !bits[(height / 2) * width + width / 2] {
            return Err(Error::InvalidInput("mask does not sample the DC bin".into()));
        }
        Ok(SamplingMask {
            height,
            width,
            bits,
            nominal_rate,
            pattern,
            seed,
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_bits(height, width, vec![true; height * width], Pattern::Full, 1.0, 0)
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn dc_index(&self) -> usize {
        (self.height / 2) * self.width + self.width / 2
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn rate(&self) -> f64 {
        mask_rate(self)
    }

    /// Shared copy of the bits for the differentiable Fourier primitives.
    pub fn shared_bits(&self) -> std::rc::Rc<[bool]> {
        self.bits.clone().into()
    }
}

/// Fraction of sampled bins.
pub fn mask_rate(mask: &SamplingMask) -> f64 {
    mask.count() as f64 / mask.bits.len() as f64
}

/// Generates a mask; deterministic in `spec`.
pub fn generate_mask(spec: &MaskSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut bits = if spec.nominal_rate >= 1.0 || spec.pattern == Pattern::Full {
        vec![true; h * w]
    } else {
        match spec.pattern {
            Pattern::Radial => radial_bits(h, w, spec.nominal_rate),
            Pattern::Cartesian => cartesian_bits(h, w, spec.nominal_rate, spec.seed),
            Pattern::Random => random_bits(h, w, spec.nominal_rate, spec.seed),
            Pattern::Spiral => spiral_bits(h, w, spec.nominal_rate, spec.seed),
            Pattern::Full => unreachable!(),
        }
    };
    bits[(h / 2) * w + w / 2] = true;
    SamplingMask::from_bits(h, w, bits, spec.pattern, spec.nominal_rate, spec.seed)
}

fn fraction(bits: &[bool]) -> f64 {
    bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64
}

/// Integer search over a rate that grows (roughly) with the parameter; returns
/// the evaluated candidate closest to `target`.
fn search_count(lo: usize, hi: usize, target: f64, eval: impl Fn(usize) -> Vec<bool>) -> Vec<bool> {
    let (mut a, mut b) = (lo, hi);
    while a < b {
        let mid = (a + b) / 2;
        if fraction(&eval(mid)) < target {
            a = mid + 1;
        } else {
            b = mid;
        }
    }
    let mut best: Option<(f64, Vec<bool>)> = None;
    for n in a.saturating_sub(2).max(lo)..=(a + 2).min(hi) {
        let bits = eval(n);
        let err = (fraction(&bits) - target).abs();
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, bits));
        }
    }
    best.expect("non-empty search range").1
}

fn radial_bits(h: usize, w: usize, rate: f64) -> Vec<bool> {
    search_count(1, 4 * (h + w), rate, |spokes| rasterize_spokes(h, w, spokes))
}

/// `spokes` equally spaced lines through the center over [0, π). Each half-ray is
/// traced with Bresenham and mirrored through the center bin.
fn rasterize_spokes(h: usize, w: usize, spokes: usize) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    let (cy, cx) = ((h / 2) as i64, (w / 2) as i64);
    let reach = (h + w) as f64;
    for k in 0..spokes {
        let theta = std::f64::consts::PI * k as f64 / spokes as f64;
        let ex = cx + (reach * theta.cos()).round() as i64;
        let ey = cy + (reach * theta.sin()).round() as i64;
        let mut set = |y: i64, x: i64| -> bool {
            let inside = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
            let (my, mx) = (2 * cy - y, 2 * cx - x);
            let any = inside(y, x) || inside(my, mx);
            if inside(y, x) {
                bits[y as usize * w + x as usize] = true;
            }
            if inside(my, mx) {
                bits[my as usize * w + mx as usize] = true;
            }
            any
        };
        bresenham(cx, cy, ex, ey, |x, y| set(y, x));
    }
    bits
}

/// Walks the integer line from `(x0, y0)` towards `(x1, y1)`; stops early when
/// `visit` returns false.
fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64, mut visit: impl FnMut(i64, i64) -> bool) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        if !visit(x, y) || (x == x1 && y == y1) {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Whole rows, center row always, the rest drawn without replacement with a
/// density that falls off cubically away from DC.
fn cartesian_bits(h: usize, w: usize, rate: f64, seed: u64) -> Vec<bool> {
    let rows = ((rate * h as f64).round() as usize).clamp(1, h);
    let center = h / 2;
    let half = h as f64 / 2.0 + 1.0;
    let candidates: Vec<usize> = (0..h).filter(|&r| r != center).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![center];
    chosen.extend(
        candidates
            .choose_multiple_weighted(&mut rng, rows - 1, |&r| {
                let d = (r as f64 - center as f64).abs() / half;
                (1.0 - d).powi(3) + 0.02
            })
            .expect("weights are positive and finite")
            .copied(),
    );
    let mut bits = vec![false; h * w];
    for r in chosen {
        bits[r * w..(r + 1) * w].fill(true);
    }
    bits
}

/// Exactly `round(rate · h · w)` bins: DC plus a uniform draw without
/// replacement from the rest, so small grids still land on the nominal rate.
fn random_bits(h: usize, w: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let dc = (h / 2) * w + w / 2;
    let k = ((rate * n as f64).round() as usize).clamp(1, n);
    let mut bits = vec![false; n];
    bits[dc] = true;
    for i in rand::seq::index::sample(&mut rng, n - 1, k - 1) {
        bits[if i >= dc { i + 1 } else { i }] = true;
    }
    bits
}

/// Archimedean spiral `r = a θ` with a seeded starting phase; `a` is found by
/// bisection on the rasterized rate.
fn spiral_bits(h: usize, w: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let r_max = ((h * h + w * w) as f64).sqrt() / 2.0 + 1.0;

    // rate decreases with the pitch `a`
    let (mut lo, mut hi) = (0.02f64, r_max);
    let mut best: Option<(f64, Vec<bool>)> = None;
    for _ in 0..48 {
        let a = (lo * hi).sqrt();
        let bits = rasterize_spiral(h, w, a, phase, r_max);
        let got = fraction(&bits);
        let err = (got - rate).abs();
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, bits));
        }
        if got > rate {
            lo = a;
        } else {
            hi = a;
        }
        if hi / lo < 1.0 + 1e-6 {
            break;
        }
    }
    best.expect("at least one evaluation").1
}

fn rasterize_spiral(h: usize, w: usize, pitch: f64, phase: f64, r_max: f64) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut theta = 0.0f64;
    loop {
        let r = pitch * theta;
        if r > r_max {
            break;
        }
        let y = (cy + r * (theta + phase).sin()).round();
        let x = (cx + r * (theta + phase).cos()).round();
        if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
            bits[y as usize * w + x as usize] = true;
        }
        theta += 0.5 / (r * r + pitch * pitch).sqrt();
    }
    bits
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    pattern: Pattern,
    nominal_rate: f64,
    seed: u64,
}

/// Sidecar metadata path: `mask.pgm` -> `mask.toml`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Encodes the mask bits as a binary graymap (P5, maxval 255).
pub fn encode_pgm(mask: &SamplingMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Parses a P5 graymap whose pixels are all 0 or 255. Returns `(height, width, bits)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    const WHAT: &str = "mask graymap";
    let mut pos = 0usize;
    let mut token = || -> Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::malformed(WHAT, "truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err(Error::malformed(WHAT, "missing P5 magic"));
    }
    let mut number = |name: &str| -> Result<usize> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::malformed(WHAT, format!("bad {name} field")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::malformed(WHAT, format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::malformed(WHAT, "missing raster separator"));
    }
    pos += 1;
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::malformed(WHAT, "dimensions overflow"))?;
    let raster = &bytes[pos..];
    if raster.len() != n {
        return Err(Error::malformed(
            WHAT,
            format!("raster has {} bytes, expected {n}", raster.len()),
        ));
    }
    let bits = raster
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::malformed(WHAT, format!("pixel value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((height, width, bits))
}

/// Parses sidecar text and combines it with decoded graymap contents.
pub fn decode_mask(pgm: &[u8], sidecar: &str) -> Result<SamplingMask> {
    let (h, w, bits) = decode_pgm(pgm)?;
    let meta: Sidecar =
        toml::from_str(sidecar).map_err(|e| Error::malformed("mask sidecar", e.to_string()))?;
    SamplingMask::from_bits(h, w, bits, meta.pattern, meta.nominal_rate, meta.seed)
}

pub fn save_mask(mask: &SamplingMask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))?;
    let meta = Sidecar {
        pattern: mask.pattern,
        nominal_rate: mask.nominal_rate,
        seed: mask.seed,
    };
    let side = sidecar_path(path);
    let text = toml::to_string(&meta).expect("sidecar serializes");
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

pub fn load_mask(path: &Path) -> Result<SamplingMask> {
    let pgm = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(side, e))?;
    decode_mask(&pgm, &text)
}
