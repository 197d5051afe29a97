//! Generator and critic built from encoder, decoder and residual blocks.
//!
//! The generator is a residual convolutional autoencoder: stride-2 encoders,
//! transposed-convolution decoders, and encoder features added (not
//! concatenated) into the decoder at matching resolution. Its output passes
//! through `tanh` and is added to its input. `folds` copies are chained, each
//! with its own parameters, and every intermediate reconstruction is returned.
//!
//! The critic is the generator's encoding path followed by global average
//! pooling of the last residual block.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

const KERNEL: usize = 3;
const DOWN: ConvGeometry = ConvGeometry { stride: 2, pad: 1 };
const SAME: ConvGeometry = ConvGeometry { stride: 1, pad: 1 };

pub const MAX_LEVELS: usize = 10;
pub const MAX_BASE_FILTERS: usize = 1024;
pub const MAX_REPEATS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Encoder depth; the image side must be divisible by `2^levels`.
    pub levels: usize,
    /// Filters at the first level, doubled per level.
    pub base_filters: usize,
    pub residual_blocks_per_level: usize,
    /// Chained generators: 1 = single reconstruction, 2 = with refinement.
    pub folds: usize,
    pub input_channels: usize,
    pub negative_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 4,
            base_filters: 32,
            residual_blocks_per_level: 1,
            folds: 2,
            input_channels: 2,
            negative_slope: 0.2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be in 1..={MAX_LEVELS}, got {}", self.levels)));
        }
        if self.base_filters < 2 || self.base_filters % 2 != 0 || self.base_filters > MAX_BASE_FILTERS {
            return Err(Error::Config(format!(
                "base_filters must be even and in 2..={MAX_BASE_FILTERS}, got {}",
                self.base_filters
            )));
        }
        if !(1..=MAX_REPEATS).contains(&self.folds) {
            return Err(Error::Config(format!("folds must be in 1..={MAX_REPEATS}, got {}", self.folds)));
        }
        if self.residual_blocks_per_level > MAX_REPEATS {
            return Err(Error::Config(format!(
                "residual_blocks_per_level must be at most {MAX_REPEATS}, got {}",
                self.residual_blocks_per_level
            )));
        }
        if self.input_channels != 2 {
            return Err(Error::Config(format!(
                "input_channels must be 2 (real, imaginary), got {}",
                self.input_channels
            )));
        }
        if !self.negative_slope.is_finite() {
            return Err(Error::Config("negative_slope must be finite".into()));
        }
        Ok(())
    }

    /// Checks that an `h × w` image fits the encoder depth.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is not divisible by 2^{} = {div}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

// ---------------------------------------------------------------------------
// parameters

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ParamSet { names, tensors, index }
    }

    pub fn zeros(layout: &[(String, Shape)]) -> Self {
        Self::from_parts(
            layout.iter().map(|(n, _)| n.clone()).collect(),
            layout.iter().map(|(_, s)| Tensor::zeros(*s)).collect(),
        )
    }

    /// Fan-in scaled normal weights, zero biases. Layers whose name ends in
    /// `conv_o.w` or starts the output head are scaled down so every residual
    /// branch starts close to zero.
    pub fn init(layout: &[(String, Shape)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    return Tensor::zeros(*shape);
                }
                let fan_in = if name.contains("convt") {
                    shape[0] * shape[2] * shape[3]
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.ends_with("conv_o.w") || name.contains(".out.") {
                    std *= 0.1;
                }
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(*shape, (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect())
            })
            .collect();
        Self::from_parts(layout.iter().map(|(n, _)| n.clone()).collect(), tensors)
    }

    /// Builds a set from named tensors, requiring exactly the names and shapes of `layout`.
    pub fn from_named(layout: &[(String, Shape)], mut named: HashMap<String, Tensor<T>>) -> Result<Self> {
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::shape(format!("parameter {name}"), "missing"))?;
            if t.shape() != *shape {
                return Err(Error::shape(
                    format!("{name} {shape:?}"),
                    format!("{name} {:?}", t.shape()),
                ));
            }
            tensors.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::shape("no further parameters", format!("unexpected parameter {extra}")));
        }
        Ok(Self::from_parts(layout.iter().map(|(n, _)| n.clone()).collect(), tensors))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet::from_parts(self.names.clone(), self.tensors.iter().map(Tensor::cast).collect())
    }

    /// Places every tensor on the tape, tracked or constant.
    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            index: self.index.clone(),
            vars,
        }
    }
}

/// Parameters placed on a tape, addressable by name.
pub struct ParamVars {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::shape(format!("parameter {name}"), "missing"))
    }

    /// Vars in parameter-set order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

// ---------------------------------------------------------------------------
// layouts

fn conv_params(out: &mut Vec<(String, Shape)>, prefix: &str, cin: usize, cout: usize) {
    out.push((format!("{prefix}.w"), [cout, cin, KERNEL, KERNEL]));
    out.push((format!("{prefix}.b"), [1, cout, 1, 1]));
}

fn convt_params(out: &mut Vec<(String, Shape)>, prefix: &str, cin: usize, cout: usize) {
    out.push((format!("{prefix}.w"), [cin, cout, KERNEL, KERNEL]));
    out.push((format!("{prefix}.b"), [1, cout, 1, 1]));
}

fn residual_params(out: &mut Vec<(String, Shape)>, prefix: &str, c: usize) {
    conv_params(out, &format!("{prefix}.conv_i"), c, c / 2);
    conv_params(out, &format!("{prefix}.conv_m"), c / 2, c / 2);
    conv_params(out, &format!("{prefix}.conv_o"), c / 2, c);
}

fn encoder_params(out: &mut Vec<(String, Shape)>, prefix: &str, config: &NetworkConfig) {
    let mut cin = config.input_channels;
    for l in 0..config.levels {
        let c = config.filters(l);
        conv_params(out, &format!("{prefix}.enc{l}.conv"), cin, c);
        for r in 0..config.residual_blocks_per_level {
            residual_params(out, &format!("{prefix}.enc{l}.res{r}"), c);
        }
        cin = c;
    }
}

/// Canonical `(name, shape)` list of generator parameters, fold by fold.
pub fn generator_layout(config: &NetworkConfig) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    for k in 0..config.folds {
        let fold = format!("g.f{k}");
        encoder_params(&mut out, &fold, config);
        for l in (1..config.levels).rev() {
            let c = config.filters(l - 1);
            convt_params(&mut out, &format!("{fold}.dec{l}.convt"), config.filters(l), c);
            for r in 0..config.residual_blocks_per_level {
                residual_params(&mut out, &format!("{fold}.dec{l}.res{r}"), c);
            }
        }
        convt_params(&mut out, &format!("{fold}.out.convt"), config.filters(0), config.input_channels);
    }
    out
}

pub fn critic_layout(config: &NetworkConfig) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    encoder_params(&mut out, "d", config);
    out
}

// ---------------------------------------------------------------------------
// blocks

fn conv_bias<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var, g: ConvGeometry) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let [_, cin, _, _] = tape.shape(x);
    let [_, win, _, _] = tape.shape(w);
    if cin != win {
        return Err(Error::shape(format!("{prefix}: {win} input channels"), cin));
    }
    let y = tape.conv2d(x, w, g);
    Ok(tape.add_bias(y, b))
}

fn convt_bias<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let [_, cin, h, wd] = tape.shape(x);
    let [win, _, _, _] = tape.shape(w);
    if cin != win {
        return Err(Error::shape(format!("{prefix}: {win} input channels"), cin));
    }
    let y = tape.conv2d_input_grad(x, w, DOWN, (2 * h, 2 * wd));
    Ok(tape.add_bias(y, b))
}

/// Stride-2 3×3 convolution with leaky activation; halves the spatial size.
pub fn encoder_block<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var, slope: T) -> Result<Var> {
    let [_, _, h, w] = tape.shape(x);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidInput(format!("encoder input {h}x{w} has odd spatial dims")));
    }
    let y = conv_bias(tape, p, &format!("{prefix}.conv"), x, DOWN)?;
    Ok(tape.leaky_relu(y, slope))
}

/// Stride-2 3×3 transposed convolution with leaky activation; doubles the spatial size.
pub fn decoder_block<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var, slope: T) -> Result<Var> {
    let y = convt_bias(tape, p, &format!("{prefix}.convt"), x)?;
    Ok(tape.leaky_relu(y, slope))
}

/// Bottleneck `C -> C/2 -> C/2 -> C` of 3×3 convolutions plus identity.
pub fn residual_block<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var, slope: T) -> Result<Var> {
    let c = tape.shape(x)[1];
    if c % 2 != 0 {
        return Err(Error::InvalidInput(format!("residual block needs even channels, got {c}")));
    }
    let h = conv_bias(tape, p, &format!("{prefix}.conv_i"), x, SAME)?;
    let h = tape.leaky_relu(h, slope);
    let h = conv_bias(tape, p, &format!("{prefix}.conv_m"), h, SAME)?;
    let h = tape.leaky_relu(h, slope);
    let h = conv_bias(tape, p, &format!("{prefix}.conv_o"), h, SAME)?;
    Ok(tape.add(x, h))
}

/// Encoding path; returns the output of every level.
fn encode<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, config: &NetworkConfig, x: Var) -> Result<Vec<Var>> {
    let slope = T::lit(config.negative_slope);
    let mut h = x;
    let mut levels = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        h = encoder_block(tape, p, &format!("{prefix}.enc{l}"), h, slope)?;
        for r in 0..config.residual_blocks_per_level {
            h = residual_block(tape, p, &format!("{prefix}.enc{l}.res{r}"), h, slope)?;
        }
        levels.push(h);
    }
    Ok(levels)
}

fn check_input_shape<T: Scalar>(tape: &Tape<T>, config: &NetworkConfig, x: Var) -> Result<()> {
    let [_, c, h, w] = tape.shape(x);
    if c != config.input_channels {
        return Err(Error::shape(config.input_channels, c));
    }
    config.check_input(h, w)
}

/// One fold: `input + tanh(decoder(encoder(input)))`.
fn generator_fold<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, fold: usize, config: &NetworkConfig, x: Var) -> Result<Var> {
    let prefix = format!("g.f{fold}");
    let slope = T::lit(config.negative_slope);
    let skips = encode(tape, p, &prefix, config, x)?;
    let mut h = *skips.last().expect("levels >= 1");
    for l in (1..config.levels).rev() {
        h = decoder_block(tape, p, &format!("{prefix}.dec{l}"), h, slope)?;
        h = tape.add(h, skips[l - 1]);
        for r in 0..config.residual_blocks_per_level {
            h = residual_block(tape, p, &format!("{prefix}.dec{l}.res{r}"), h, slope)?;
        }
    }
    let out = convt_bias(tape, p, &format!("{prefix}.out.convt"), h)?;
    let residual = tape.tanh(out);
    Ok(tape.add(x, residual))
}

/// Chained generator; returns the reconstruction after every fold.
pub fn generator_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, config: &NetworkConfig, s0: Var) -> Result<Vec<Var>> {
    check_input_shape(tape, config, s0)?;
    let mut checkpoints = Vec::with_capacity(config.folds);
    let mut input = s0;
    for k in 0..config.folds {
        input = generator_fold(tape, p, k, config, input)?;
        checkpoints.push(input);
    }
    Ok(checkpoints)
}

/// The generator's deepest encoder output for fold `fold`.
pub fn generator_bottleneck<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, config: &NetworkConfig, fold: usize, x: Var) -> Result<Var> {
    check_input_shape(tape, config, x)?;
    let skips = encode(tape, p, &format!("g.f{fold}"), config, x)?;
    Ok(*skips.last().expect("levels >= 1"))
}

/// Critic scores, shape `[n, 1, 1, 1]`, unbounded.
pub fn discriminator_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, config: &NetworkConfig, img: Var) -> Result<Var> {
    check_input_shape(tape, config, img)?;
    let levels = encode(tape, p, "d", config, img)?;
    let last = *levels.last().expect("levels >= 1");
    Ok(tape.mean_per_item(last))
}

/// Value-only generator pass (no gradient tracking).
pub fn generator_values<T: Scalar>(params: &ParamSet<T>, config: &NetworkConfig, s0: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let p = params.attach(&mut tape, false);
    let x = tape.constant(s0.clone());
    let outs = generator_forward(&mut tape, &p, config, x)?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Value-only critic pass.
pub fn critic_values<T: Scalar>(params: &ParamSet<T>, config: &NetworkConfig, img: &Tensor<T>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let p = params.attach(&mut tape, false);
    let x = tape.constant(img.clone());
    let s = discriminator_forward(&mut tape, &p, config, x)?;
    Ok(tape.value(s).data().to_vec())
}
