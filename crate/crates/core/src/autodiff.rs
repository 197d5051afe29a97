//! Tape-based reverse-mode differentiation.
//!
//! Every primitive's backward rule is written with other primitives, so the
//! gradient returned by [`Tape::grad`] is itself a node on the tape and can be
//! differentiated again. The critic's gradient penalty relies on this.

use std::rc::Rc;

use num_complex::Complex;

use crate::conv::{self, ConvGeometry};
use crate::fft::{centered_fft2, Direction};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-item k-space masks for the Fourier primitives; each slice is `h * w` bits.
pub type ItemMasks = Rc<[Rc<[bool]>]>;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor<T>>),
    Scale(Var, T),
    AddScalar(Var, T),
    Powf(Var, T),
    Tanh(Var),
    SumAll(Var),
    Expand(Var),
    SumPerItem(Var),
    ExpandPerItem(Var),
    SumChannels(Var),
    BroadcastChannels(Var),
    Conv {
        x: Var,
        w: Var,
        geometry: ConvGeometry,
    },
    ConvInputGrad {
        gy: Var,
        w: Var,
        geometry: ConvGeometry,
    },
    ConvWeightGrad {
        x: Var,
        gy: Var,
        geometry: ConvGeometry,
    },
    Undersample(Var, ItemMasks),
    ZeroFill(Var, ItemMasks),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that gradients are tracked for.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a tensor treated as constant.
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor<T>>) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(value, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a, c), &[a])
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::Powf(a, p), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    /// `max(x, 0) + slope · min(x, 0)` as a product with its (piecewise constant) gain.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let gain = self.value(a).map(|x| if x > T::zero() { T::one() } else { slope });
        self.mul_const(a, Rc::new(gain))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let sign = self.value(a).map(|x| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        self.mul_const(a, Rc::new(sign))
    }

    // -- reductions and broadcasts ---------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll(a), &[a])
    }

    /// Broadcasts a `[1,1,1,1]` tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: Shape) -> Var {
        let v = self.value(a).item();
        self.push(Tensor::filled(shape, v), Op::Expand(a), &[a])
    }

    /// `[n,c,h,w] -> [n,1,1,1]`.
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let sums = (0..n).map(|i| t.item_slice(i).iter().copied().sum()).collect();
        self.push(Tensor::new([n, 1, 1, 1], sums), Op::SumPerItem(a), &[a])
    }

    /// `[n,1,1,1] -> shape`.
    pub fn expand_per_item(&mut self, a: Var, shape: Shape) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape(), [shape[0], 1, 1, 1], "expand_per_item source shape");
        let per = shape[1] * shape[2] * shape[3];
        let data = t.data().iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect();
        self.push(Tensor::new(shape, data), Op::ExpandPerItem(a), &[a])
    }

    /// `[n,c,h,w] -> [1,c,1,1]`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let mut sums = vec![T::zero(); c];
        for b in 0..n {
            for (ch, s) in sums.iter_mut().enumerate() {
                let start = (b * c + ch) * h * w;
                *s = *s + t.data()[start..start + h * w].iter().copied().sum::<T>();
            }
        }
        self.push(Tensor::new([1, c, 1, 1], sums), Op::SumChannels(a), &[a])
    }

    /// `[1,c,1,1] -> shape`.
    pub fn broadcast_channels(&mut self, a: Var, shape: Shape) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = shape;
        assert_eq!(t.shape(), [1, c, 1, 1], "broadcast_channels source shape");
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &v in t.data() {
                data.extend(std::iter::repeat(v).take(h * w));
            }
        }
        self.push(Tensor::new(shape, data), Op::BroadcastChannels(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn mean_per_item(&mut self, a: Var) -> Var {
        let [_, c, h, w] = self.shape(a);
        let s = self.sum_per_item(a);
        self.scale(s, T::one() / T::lit((c * h * w) as f64))
    }

    /// Adds a `[1,c,1,1]` bias over every batch item and pixel.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x);
        let bb = self.broadcast_channels(b, shape);
        self.add(x, bb)
    }

    // -- convolutions ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, geometry: ConvGeometry) -> Var {
        let value = conv::conv2d(self.value(x), self.value(w), geometry);
        self.push(value, Op::Conv { x, w, geometry }, &[x, w])
    }

    /// Transposed convolution producing spatial size `out_hw`; `w` is laid out
    /// `[in_channels, out_channels, k, k]`.
    pub fn conv2d_input_grad(&mut self, gy: Var, w: Var, geometry: ConvGeometry, out_hw: (usize, usize)) -> Var {
        let value = conv::conv2d_input_grad(self.value(gy), self.value(w), geometry, out_hw);
        self.push(value, Op::ConvInputGrad { gy, w, geometry }, &[gy, w])
    }

    pub fn conv2d_weight_grad(&mut self, x: Var, gy: Var, geometry: ConvGeometry, k: usize) -> Var {
        let value = conv::conv2d_weight_grad(self.value(x), self.value(gy), geometry, k);
        self.push(value, Op::ConvWeightGrad { x, gy, geometry }, &[x, gy])
    }

    // -- Fourier -----------------------------------------------------------------

    /// `R F` on two-channel (real, imaginary) items.
    pub fn undersample(&mut self, x: Var, masks: ItemMasks) -> Var {
        let value = fourier_apply(self.value(x), &masks, Direction::Forward);
        self.push(value, Op::Undersample(x, masks), &[x])
    }

    /// `F^H R^H` on two-channel items; adjoint of [`Tape::undersample`].
    pub fn zero_fill(&mut self, x: Var, masks: ItemMasks) -> Var {
        let value = fourier_apply(self.value(x), &masks, Direction::Inverse);
        self.push(value, Op::ZeroFill(x, masks), &[x])
    }

    // -- reverse mode --------------------------------------------------------------

    /// Gradients of the scalar `output` with respect to `wrt`, recorded on the
    /// tape so they can be differentiated further.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(output).len(), 1, "grad() needs a scalar output");
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = self.constant(Tensor::filled(self.shape(output), T::one()));
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, |_| g);
                    self.accumulate(&mut adj, b, |_| g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, |_| g);
                    self.accumulate(&mut adj, b, |t| t.scale(g, -T::one()));
                }
                Op::Mul(a, b) => {
                    self.accumulate(&mut adj, a, |t| t.mul(g, b));
                    self.accumulate(&mut adj, b, |t| t.mul(g, a));
                }
                Op::MulConst(a, c) => self.accumulate(&mut adj, a, |t| t.mul_const(g, c)),
                Op::Scale(a, c) => self.accumulate(&mut adj, a, |t| t.scale(g, c)),
                Op::AddScalar(a, _) => self.accumulate(&mut adj, a, |_| g),
                Op::Powf(a, p) => self.accumulate(&mut adj, a, |t| {
                    let two = T::lit(2.0);
                    let slope = if p == T::one() {
                        return g;
                    } else if p == two {
                        t.scale(a, two)
                    } else {
                        let d = t.powf(a, p - T::one());
                        t.scale(d, p)
                    };
                    t.mul(g, slope)
                }),
                Op::Tanh(a) => {
                    let y = Var(i);
                    self.accumulate(&mut adj, a, |t| {
                        let yy = t.mul(y, y);
                        let neg = t.scale(yy, -T::one());
                        let d = t.add_scalar(neg, T::one());
                        t.mul(g, d)
                    });
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a);
                    self.accumulate(&mut adj, a, |t| t.expand(g, shape));
                }
                Op::Expand(a) => self.accumulate(&mut adj, a, |t| t.sum_all(g)),
                Op::SumPerItem(a) => {
                    let shape = self.shape(a);
                    self.accumulate(&mut adj, a, |t| t.expand_per_item(g, shape));
                }
                Op::ExpandPerItem(a) => self.accumulate(&mut adj, a, |t| t.sum_per_item(g)),
                Op::SumChannels(a) => {
                    let shape = self.shape(a);
                    self.accumulate(&mut adj, a, |t| t.broadcast_channels(g, shape));
                }
                Op::BroadcastChannels(a) => self.accumulate(&mut adj, a, |t| t.sum_channels(g)),
                Op::Conv { x, w, geometry } => {
                    let [_, _, h, wd] = self.shape(x);
                    let k = self.shape(w)[2];
                    self.accumulate(&mut adj, x, |t| t.conv2d_input_grad(g, w, geometry, (h, wd)));
                    self.accumulate(&mut adj, w, |t| t.conv2d_weight_grad(x, g, geometry, k));
                }
                Op::ConvInputGrad { gy, w, geometry } => {
                    let k = self.shape(w)[2];
                    self.accumulate(&mut adj, gy, |t| t.conv2d(g, w, geometry));
                    self.accumulate(&mut adj, w, |t| t.conv2d_weight_grad(g, gy, geometry, k));
                }
                Op::ConvWeightGrad { x, gy, geometry } => {
                    let [_, _, h, wd] = self.shape(x);
                    self.accumulate(&mut adj, x, |t| t.conv2d_input_grad(gy, g, geometry, (h, wd)));
                    self.accumulate(&mut adj, gy, |t| t.conv2d(x, g, geometry));
                }
                Op::Undersample(a, masks) => self.accumulate(&mut adj, a, |t| t.zero_fill(g, masks)),
                Op::ZeroFill(a, masks) => self.accumulate(&mut adj, a, |t| t.undersample(g, masks)),
            }
        }

        wrt.iter()
            .map(|v| match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*v);
                    self.constant(Tensor::zeros(shape))
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], input: Var, contribution: impl FnOnce(&mut Self) -> Var) {
        if !self.nodes[input.0].requires_grad {
            return;
        }
        let c = contribution(self);
        adj[input.0] = Some(match adj[input.0] {
            None => c,
            Some(prev) => self.add(prev, c),
        });
    }
}

fn fourier_apply<T: Scalar>(x: &Tensor<T>, masks: &[Rc<[bool]>], direction: Direction) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(c, 2, "Fourier primitives expect (real, imaginary) channels");
    assert_eq!(masks.len(), n, "one mask per batch item");
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
    for (b, mask) in masks.iter().enumerate() {
        assert_eq!(mask.len(), plane, "mask does not match the image plane");
        let item = x.item_slice(b);
        for (p, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(item[p], item[plane + p]);
        }
        if direction == Direction::Inverse {
            apply_bits(&mut buf, mask);
        }
        centered_fft2(&mut buf, h, w, direction);
        if direction == Direction::Forward {
            apply_bits(&mut buf, mask);
        }
        let dst = &mut out.data_mut()[b * 2 * plane..(b + 1) * 2 * plane];
        for (p, z) in buf.iter().enumerate() {
            dst[p] = z.re;
            dst[plane + p] = z.im;
        }
    }
    out
}

fn apply_bits<T: Scalar>(buf: &mut [Complex<T>], mask: &[bool]) {
    for (z, &keep) in buf.iter_mut().zip(mask) {
        if !keep {
            *z = Complex::new(T::zero(), T::zero());
        }
    }
}
