//! Adversarial (WGAN-GP) and cyclic data-consistency losses.
//!
//! Tape versions drive training; the value versions below wrap them with an
//! `f64` tape so both paths share one definition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ItemMasks, Tape, Var};
use crate::error::{Error, Result};
use crate::kspace::{undersample, ComplexImage, KSpaceMeasurement};
use crate::tensor::{Scalar, Tensor};

/// Pixel-wise distance over the two real channels of complex data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Mse,
    Mae,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Mse => "mse",
            Distance::Mae => "mae",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Distance::Mse),
            "mae" => Ok(Distance::Mae),
            other => Err(Error::InvalidInput(format!("unknown distance `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Frequency-loss weight.
    pub alpha: f64,
    /// Image-loss weight.
    pub gamma: f64,
    /// Gradient-penalty weight.
    pub gp_lambda: f64,
    /// Weight on the generator's adversarial term.
    pub adversarial: f64,
    pub distance: Distance,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            gamma: 10.0,
            gp_lambda: 10.0,
            adversarial: 1.0,
            distance: Distance::Mse,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("gp_lambda", self.gp_lambda),
            ("adversarial", self.adversarial),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values; `freq` and `imag` are summed over checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub freq: f64,
    pub imag: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.freq, self.imag, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean distance over all elements of `a` and `b`.
pub fn distance<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, metric: Distance) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(tape.shape(a), tape.shape(b)));
    }
    let d = tape.sub(a, b);
    let e = match metric {
        Distance::Mse => tape.mul(d, d),
        Distance::Mae => tape.abs(d),
    };
    Ok(tape.mean(e))
}

/// Distance between measured k-space `m` (dense, zero off the mask) and the
/// re-undersampled reconstruction `recon`.
pub fn freq_loss<T: Scalar>(
    tape: &mut Tape<T>,
    m: Var,
    recon: Var,
    masks: ItemMasks,
    metric: Distance,
) -> Result<Var> {
    let [n, _, h, w] = tape.shape(recon);
    if masks.len() != n || masks.iter().any(|bits| bits.len() != h * w) {
        return Err(Error::shape(format!("{n} masks of {h}x{w}"), masks.len()));
    }
    let resampled = tape.undersample(recon, masks);
    distance(tape, m, resampled, metric)
}

/// Distance between reference images and reconstructions.
pub fn imag_loss<T: Scalar>(tape: &mut Tape<T>, reference: Var, recon: Var, metric: Distance) -> Result<Var> {
    distance(tape, reference, recon, metric)
}

/// `eps_i · real_i + (1 − eps_i) · fake_i` per batch item.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[T]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(real.shape(), fake.shape()));
    }
    let n = real.shape()[0];
    if eps.len() != n {
        return Err(Error::shape(n, eps.len()));
    }
    let per = real.len() / n.max(1);
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = eps[i / per];
            e * r + (T::one() - e) * f
        })
        .collect();
    Ok(Tensor::new(real.shape(), data))
}

/// Gradient penalty `mean_i (‖∇_x D(x̂_i)‖₂ − 1)²`, differentiable in the
/// critic's parameters. `critic` maps an image batch to `[n, 1, 1, 1]` scores.
pub fn gradient_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    interpolates: Tensor<T>,
    critic: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let x = tape.variable(interpolates);
    let scores = critic(tape, x)?;
    let total = tape.sum_all(scores);
    let g = tape.grad(total, &[x])[0];
    let sq = tape.mul(g, g);
    let norm2 = tape.sum_per_item(sq);
    // Keeps the square root differentiable at a zero gradient.
    let norm2 = tape.add_scalar(norm2, T::lit(1e-12));
    let norm = tape.powf(norm2, T::lit(0.5));
    let dev = tape.add_scalar(norm, -T::one());
    let dev2 = tape.mul(dev, dev);
    Ok(tape.mean(dev2))
}

/// WGAN losses from critic scores: `(adv_g, adv_d)`. `adv_g` carries the
/// `adversarial` weight.
pub fn adversarial_losses<T: Scalar>(
    tape: &mut Tape<T>,
    scores_real: Var,
    scores_fake: Var,
    gp: Var,
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    for v in [scores_real, scores_fake, gp] {
        if !tape.value(v).all_finite() {
            return Err(Error::InvalidInput("non-finite critic score or penalty".into()));
        }
    }
    let fake = tape.mean(scores_fake);
    let real = tape.mean(scores_real);
    let adv_g = tape.scale(fake, -T::lit(weights.adversarial));
    let gap = tape.sub(fake, real);
    let pen = tape.scale(gp, T::lit(weights.gp_lambda));
    let adv_d = tape.add(gap, pen);
    Ok((adv_g, adv_d))
}

/// `adv_g + Σ_k (alpha · freq_k + gamma · imag_k)`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, folds: &[(Var, Var)], adv_g: Var, weights: &LossWeights) -> Result<Var> {
    if folds.is_empty() {
        return Err(Error::InvalidInput("total loss needs at least one checkpoint".into()));
    }
    let mut total = adv_g;
    for &(freq, imag) in folds {
        let f = tape.scale(freq, T::lit(weights.alpha));
        let i = tape.scale(imag, T::lit(weights.gamma));
        total = tape.add(total, f);
        total = tape.add(total, i);
    }
    Ok(total)
}

// -- value-level wrappers ------------------------------------------------------

/// [`distance`] on plain tensors.
pub fn distance_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, metric: Distance) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(a.cast());
    let b = tape.constant(b.cast());
    let d = distance(&mut tape, a, b, metric)?;
    Ok(tape.value(d).item())
}

/// [`freq_loss`] of one reconstruction against one measurement.
pub fn freq_loss_image(m: &KSpaceMeasurement, recon: &ComplexImage, metric: Distance) -> Result<f64> {
    if m.shape() != recon.shape() {
        return Err(Error::shape(m.shape(), recon.shape()));
    }
    let mut tape = Tape::<f64>::new();
    let mv = tape.constant(m.values().to_tensor());
    let rv = tape.constant(recon.to_tensor());
    let masks: ItemMasks = vec![m.mask().shared_bits()].into();
    let d = freq_loss(&mut tape, mv, rv, masks, metric)?;
    Ok(tape.value(d).item())
}

/// [`imag_loss`] of one reconstruction against its reference.
pub fn imag_loss_image(reference: &ComplexImage, recon: &ComplexImage, metric: Distance) -> Result<f64> {
    if reference.shape() != recon.shape() {
        return Err(Error::shape(reference.shape(), recon.shape()));
    }
    distance_values(&reference.to_tensor::<f64>(), &recon.to_tensor(), metric)
}

/// [`adversarial_losses`] on plain score lists.
pub fn adversarial_values(real: &[f64], fake: &[f64], gp: f64, weights: &LossWeights) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidInput("empty critic score list".into()));
    }
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(Tensor::new([real.len(), 1, 1, 1], real.to_vec()));
    let f = tape.constant(Tensor::new([fake.len(), 1, 1, 1], fake.to_vec()));
    let g = tape.constant(Tensor::scalar(gp));
    let (adv_g, adv_d) = adversarial_losses(&mut tape, r, f, g, weights)?;
    Ok((tape.value(adv_g).item(), tape.value(adv_d).item()))
}

/// [`total_loss`] on plain per-checkpoint `(freq, imag)` values.
pub fn total_values(folds: &[(f64, f64)], adv_g: f64, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<(Var, Var)> = folds
        .iter()
        .map(|&(f, i)| (tape.constant(Tensor::scalar(f)), tape.constant(Tensor::scalar(i))))
        .collect();
    let a = tape.constant(Tensor::scalar(adv_g));
    let t = total_loss(&mut tape, &vars, a, weights)?;
    Ok(tape.value(t).item())
}

/// Both cyclic losses of an image-domain reconstruction: the measurement is
/// `undersample(reference, mask)`.
pub fn cyclic_losses(
    reference: &ComplexImage,
    recon: &ComplexImage,
    mask: &crate::masks::SamplingMask,
    metric: Distance,
) -> Result<(f64, f64)> {
    let m = undersample(reference, mask)?;
    Ok((freq_loss_image(&m, recon, metric)?, imag_loss_image(reference, recon, metric)?))
}
