//! The three faces of a strided 2D cross-correlation.
//!
//! With `Y[n,o,i,j] = Σ W[o,c,ki,kj] · X[n,c, s·i+ki-p, s·j+kj-p]` the trilinear
//! form `⟨Y, conv(X, W)⟩` is differentiated with respect to each argument:
//! [`conv2d`] produces `Y`, [`conv2d_input_grad`] produces `X` (this is also the
//! transposed convolution) and [`conv2d_weight_grad`] produces `W`. Each one's
//! derivatives are expressed by the other two, which is what lets the tape
//! differentiate through backward passes.

use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_side(&self, input: usize, kernel: usize) -> Option<usize> {
        (input + 2 * self.pad)
            .checked_sub(kernel)
            .map(|span| span / self.stride + 1)
    }
}

/// Column buffer `[C·K·K, Ho·Wo]` for one batch item.
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    (ho, wo): (usize, usize),
    g: ConvGeometry,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for i in 0..ho {
                    let yy = (g.stride * i + ki) as isize - g.pad as isize;
                    let out = &mut dst[i * wo..(i + 1) * wo];
                    if yy < 0 || yy as usize >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[yy as usize * w..(yy as usize + 1) * w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let xx = (g.stride * j + kj) as isize - g.pad as isize;
                        *o = if xx < 0 || xx as usize >= w {
                            T::zero()
                        } else {
                            src_row[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto an input-shaped item.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    (ho, wo): (usize, usize),
    g: ConvGeometry,
    x: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for i in 0..ho {
                    let yy = (g.stride * i + ki) as isize - g.pad as isize;
                    if yy < 0 || yy as usize >= h {
                        continue;
                    }
                    let dst_row = &mut dst[yy as usize * w..(yy as usize + 1) * w];
                    for j in 0..wo {
                        let xx = (g.stride * j + kj) as isize - g.pad as isize;
                        if xx >= 0 && (xx as usize) < w {
                            dst_row[xx as usize] = dst_row[xx as usize] + src[i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(w: Shape) -> usize {
    assert_eq!(w[2], w[3], "only square kernels are supported");
    w[2]
}

/// Output shape of [`conv2d`], or `None` when the geometry does not fit.
pub fn conv2d_shape(x: Shape, w: Shape, g: ConvGeometry) -> Option<Shape> {
    if x[1] != w[1] {
        return None;
    }
    let k = w[2];
    Some([x[0], w[0], g.output_side(x[2], k)?, g.output_side(x[3], k)?])
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeometry) -> Tensor<T> {
    let [n, c, h, wd] = x.shape();
    let k = square_kernel(w.shape());
    let out_shape = conv2d_shape(x.shape(), w.shape(), g).expect("conv2d geometry");
    let [_, o, ho, wo] = out_shape;
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = Tensor::zeros(out_shape);
    let per_out = o * ho * wo;
    for b in 0..n {
        im2col(x.item_slice(b), (c, h, wd), k, (ho, wo), g, &mut cols);
        gemm(
            MatRef::new(w.data(), o, ckk),
            MatRef::new(&cols, ckk, ho * wo),
            T::zero(),
            &mut out.data_mut()[b * per_out..(b + 1) * per_out],
        );
    }
    out
}

/// Gradient of `⟨gy, conv2d(x, w)⟩` with respect to `x`, for an input of
/// spatial size `(h, w_side)`. With stride 2 this is the transposed convolution.
pub fn conv2d_input_grad<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeometry,
    (h, wd): (usize, usize),
) -> Tensor<T> {
    let [n, o, ho, wo] = gy.shape();
    let [o2, c, _, _] = w.shape();
    assert_eq!(o, o2, "channel mismatch in conv2d_input_grad");
    let k = square_kernel(w.shape());
    assert_eq!(g.output_side(h, k), Some(ho), "height does not match geometry");
    assert_eq!(g.output_side(wd, k), Some(wo), "width does not match geometry");
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = Tensor::zeros([n, c, h, wd]);
    let per_in = c * h * wd;
    for b in 0..n {
        gemm(
            MatRef::new(w.data(), o, ckk).t(),
            MatRef::new(gy.item_slice(b), o, ho * wo),
            T::zero(),
            &mut cols,
        );
        col2im(
            &cols,
            (c, h, wd),
            k,
            (ho, wo),
            g,
            &mut out.data_mut()[b * per_in..(b + 1) * per_in],
        );
    }
    out
}

/// Gradient of `⟨gy, conv2d(x, w)⟩` with respect to `w` (kernel side `k`).
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeometry,
    k: usize,
) -> Tensor<T> {
    let [n, c, h, wd] = x.shape();
    let [n2, o, ho, wo] = gy.shape();
    assert_eq!(n, n2, "batch mismatch in conv2d_weight_grad");
    assert_eq!(g.output_side(h, k), Some(ho), "height does not match geometry");
    assert_eq!(g.output_side(wd, k), Some(wo), "width does not match geometry");
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = Tensor::zeros([o, c, k, k]);
    for b in 0..n {
        im2col(x.item_slice(b), (c, h, wd), k, (ho, wo), g, &mut cols);
        gemm(
            MatRef::new(gy.item_slice(b), o, ho * wo),
            MatRef::new(&cols, ckk, ho * wo).t(),
            if b == 0 { T::zero() } else { T::one() },
            out.data_mut(),
        );
    }
    out
}
