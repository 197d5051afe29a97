//! Centered, orthonormal 2D DFT on row-major complex planes.
//!
//! The spectrum is laid out with the DC coefficient at `(h / 2, w / 2)`. The
//! forward transform is `fftshift ∘ DFT ∘ ifftshift` scaled by `1 / sqrt(h w)`,
//! so forward and inverse are an exact adjoint (unitary) pair.

use num_complex::Complex;
use rustfft::{FftDirection, FftNum, FftPlanner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Transforms `data` (length `h * w`, row-major) in place.
pub fn centered_fft2<T: FftNum + num_traits::Float>(
    data: &mut [Complex<T>],
    h: usize,
    w: usize,
    direction: Direction,
) {
    assert_eq!(data.len(), h * w, "plane length does not match shape");
    if data.is_empty() {
        return;
    }
    // ifftshift brings the center sample to index 0
    roll(data, h, w, h - h / 2, w - w / 2);

    let fft_dir = match direction {
        Direction::Forward => FftDirection::Forward,
        Direction::Inverse => FftDirection::Inverse,
    };
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, fft_dir);
    let col_fft = planner.plan_fft(h, fft_dir);

    let mut scratch = vec![Complex::new(T::zero(), T::zero()); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
    for row in data.chunks_exact_mut(w) {
        row_fft.process_with_scratch(row, &mut scratch);
    }
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = data[r * w + c];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for r in 0..h {
            data[r * w + c] = column[r];
        }
    }

    roll(data, h, w, h / 2, w / 2);

    let scale = T::one() / T::from(h * w).unwrap().sqrt();
    for v in data.iter_mut() {
        *v = *v * scale;
    }
}

/// Cyclic shift: sample `(r, c)` moves to `((r + dr) % h, (c + dc) % w)`.
fn roll<T: Copy>(data: &mut [T], h: usize, w: usize, dr: usize, dc: usize) {
    if dr % h == 0 && dc % w == 0 {
        return;
    }
    let src = data.to_vec();
    for r in 0..h {
        let rr = (r + dr) % h;
        for c in 0..w {
            data[rr * w + (c + dc) % w] = src[r * w + c];
        }
    }
}
