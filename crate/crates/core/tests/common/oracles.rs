//! Direct-summation reference implementations.

#![allow(dead_code)]

use num_complex::Complex64;

/// Centered orthonormal DFT by direct summation, O(N^4).
pub fn brute_dft(h: usize, w: usize, x: &[Complex64], sign: f64) -> Vec<Complex64> {
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for kr in 0..h {
        for kc in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for nr in 0..h {
                for nc in 0..w {
                    let phase = (kr as f64 - ch) * (nr as f64 - ch) / h as f64 + (kc as f64 - cw) * (nc as f64 - cw) / w as f64;
                    acc += x[nr * w + nc] * Complex64::from_polar(1.0, sign * 2.0 * std::f64::consts::PI * phase);
                }
            }
            out[kr * w + kc] = acc * norm;
        }
    }
    out
}

/// Mean SSIM by direct 2-D sliding window with explicit Gaussian weights.
pub fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let c = (win / 2) as f64;
    let mut weights = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            weights[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= z);

    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let l = hi - lo;
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - win {
        for col in 0..=w - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = weights[i * win + j];
                    mx += k * x[(r + i) * w + col + j];
                    my += k * y[(r + i) * w + col + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = weights[i * win + j];
                    let a = x[(r + i) * w + col + j] - mx;
                    let b = y[(r + i) * w + col + j] - my;
                    vx += k * a * a;
                    vy += k * b * b;
                    cxy += k * a * b;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn psnr_oracle(x: &[f64], y: &[f64]) -> f64 {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mse = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    10.0 * ((hi - lo).powi(2) / mse).log10()
}

pub fn nrmse_oracle(x: &[f64], y: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = x.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}
