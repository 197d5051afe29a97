//! Central finite differences against tape gradients, in f64.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refinegan::autodiff::{ItemMasks, Tape};
use refinegan::kspace::{undersample, zero_fill, ComplexImage};
use refinegan::losses::{self, LossWeights};
use refinegan::masks::{generate_mask, MaskSpec, Pattern};
use refinegan::network::{critic_layout, discriminator_forward, generator_forward, generator_layout, NetworkConfig, ParamSet};
use refinegan::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
// Gradients this small are compared absolutely; relative error is meaningless near zero.
pub const ABS_FLOOR: f64 = 1e-8;

pub struct Batch {
    pub x_m: Tensor<f64>,
    pub meas: Tensor<f64>,
    pub masks: ItemMasks,
    pub x_s: Tensor<f64>,
    pub refs: Tensor<f64>,
}

pub fn net() -> NetworkConfig {
    NetworkConfig {
        levels: 2,
        base_filters: 8,
        folds: 2,
        ..NetworkConfig::default()
    }
}

pub fn batch() -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut items = Vec::new();
    for i in 0..4 {
        let re: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let im: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let img = ComplexImage::from_channels(8, 8, &re, &im).unwrap();
        let mask = generate_mask(&MaskSpec::new(Pattern::Random, 0.4, 8, 8, i)).unwrap();
        let m = undersample(&img, &mask).unwrap();
        let s0 = zero_fill(&m).unwrap();
        items.push((s0.to_tensor::<f64>(), m.values().to_tensor::<f64>(), mask.shared_bits(), img.to_tensor::<f64>()));
    }
    let stack = |f: &dyn Fn(&(Tensor<f64>, Tensor<f64>, std::rc::Rc<[bool]>, Tensor<f64>)) -> &Tensor<f64>, r: std::ops::Range<usize>| {
        Tensor::stack(&items[r].iter().map(f).collect::<Vec<_>>())
    };
    Batch {
        x_m: stack(&|t| &t.0, 0..2),
        meas: stack(&|t| &t.1, 0..2),
        masks: items[..2].iter().map(|t| t.2.clone()).collect::<Vec<_>>().into(),
        x_s: stack(&|t| &t.0, 2..4),
        refs: stack(&|t| &t.3, 2..4),
    }
}

/// Generator objective: adversarial term on the last fold plus cyclic terms on every fold.
pub fn total(tape: &mut Tape<f64>, g: &ParamSet<f64>, d: &ParamSet<f64>, b: &Batch, w: &LossWeights) -> (refinegan::autodiff::Var, Vec<refinegan::autodiff::Var>) {
    let cfg = net();
    let gp = g.attach(tape, true);
    let dp = d.attach(tape, true);
    let xm = tape.constant(b.x_m.clone());
    let xs = tape.constant(b.x_s.clone());
    let outs_m = generator_forward(tape, &gp, &cfg, xm).unwrap();
    let outs_s = generator_forward(tape, &gp, &cfg, xs).unwrap();
    let scores = discriminator_forward(tape, &dp, &cfg, *outs_m.last().unwrap()).unwrap();
    let mean = tape.mean(scores);
    let adv_g = tape.scale(mean, -w.adversarial);
    let m = tape.constant(b.meas.clone());
    let s = tape.constant(b.refs.clone());
    let folds: Vec<_> = outs_m
        .iter()
        .zip(&outs_s)
        .map(|(&om, &os)| {
            (
                losses::freq_loss(tape, m, om, b.masks.clone(), w.distance).unwrap(),
                losses::imag_loss(tape, s, os, w.distance).unwrap(),
            )
        })
        .collect();
    let t = losses::total_loss(tape, &folds, adv_g, w).unwrap();
    let mut vars = gp.vars().to_vec();
    vars.extend_from_slice(dp.vars());
    (t, vars)
}

/// Critic objective with the gradient penalty (second-order terms).
pub fn critic_loss(tape: &mut Tape<f64>, d: &ParamSet<f64>, real: &Tensor<f64>, fake: &Tensor<f64>, w: &LossWeights) -> (refinegan::autodiff::Var, Vec<refinegan::autodiff::Var>) {
    let cfg = net();
    let dp = d.attach(tape, true);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let sr = discriminator_forward(tape, &dp, &cfg, r).unwrap();
    let sf = discriminator_forward(tape, &dp, &cfg, f).unwrap();
    let xhat = losses::interpolate(real, fake, &[0.3, 0.8]).unwrap();
    let pen = losses::gradient_penalty(tape, xhat, |t, v| discriminator_forward(t, &dp, &cfg, v)).unwrap();
    let (_, adv_d) = losses::adversarial_losses(tape, sr, sf, pen, w).unwrap();
    (adv_d, dp.vars().to_vec())
}

pub const FINE_STEP: f64 = 1e-6;

pub struct GradReport {
    pub checked: usize,
    /// Parameters whose ±STEP interval crosses a leaky-ReLU kink; they pass at FINE_STEP.
    pub kinked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

fn agrees(g: f64, fd: f64) -> bool {
    (fd - g).abs() <= REL_TOL * fd.abs().max(g.abs()) + ABS_FLOOR
}

/// Compares every parameter's tape gradient with a central difference at
/// STEP. A mismatch is re-measured at FINE_STEP: agreement there means the
/// coarse interval straddled a kink; disagreement is a failure.
pub fn check<F>(sets: &mut [&mut ParamSet<f64>], analytic: &[Tensor<f64>], eval: F) -> GradReport
where
    F: Fn(&[&mut ParamSet<f64>]) -> f64,
{
    let mut report = GradReport {
        checked: 0,
        kinked: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let mut flat = 0;
    for s in 0..sets.len() {
        let names = sets[s].names().to_vec();
        for (ti, name) in names.iter().enumerate() {
            for j in 0..sets[s].tensors()[ti].len() {
                let orig = sets[s].tensors()[ti].data()[j];
                let central = |h: f64, sets: &mut [&mut ParamSet<f64>]| {
                    sets[s].tensors_mut()[ti].data_mut()[j] = orig + h;
                    let up = eval(sets);
                    sets[s].tensors_mut()[ti].data_mut()[j] = orig - h;
                    let down = eval(sets);
                    sets[s].tensors_mut()[ti].data_mut()[j] = orig;
                    (up - down) / (2.0 * h)
                };
                let g = analytic[flat + ti].data()[j];
                let fd = central(STEP, sets);
                report.checked += 1;
                if agrees(g, fd) {
                    let scale = fd.abs().max(g.abs());
                    if scale > ABS_FLOOR {
                        report.worst = report.worst.max((fd - g).abs() / scale);
                    }
                    continue;
                }
                let fine = central(FINE_STEP, sets);
                if agrees(g, fine) {
                    report.kinked += 1;
                } else {
                    report.failures.push(format!("{name}[{j}]: tape {g:e} fd {fd:e} fine {fine:e}"));
                }
            }
        }
        flat += names.len();
    }
    report
}

/// Gradient check of the generator objective over generator and critic parameters.
pub fn generator_check() -> GradReport {
    let cfg = net();
    let mut g = ParamSet::<f32>::init(&generator_layout(&cfg), 3).cast::<f64>();
    let mut d = ParamSet::<f32>::init(&critic_layout(&cfg), 4).cast::<f64>();
    let b = batch();
    let w = LossWeights::default();
    let mut tape = Tape::new();
    let (t, vars) = total(&mut tape, &g, &d, &b, &w);
    let grads: Vec<Tensor<f64>> = tape.grad(t, &vars).into_iter().map(|v| tape.value(v).clone()).collect();
    let eval = |sets: &[&mut ParamSet<f64>]| {
        let mut tape = Tape::new();
        let (t, _) = total(&mut tape, sets[0], sets[1], &b, &w);
        tape.value(t).item()
    };
    check(&mut [&mut g, &mut d], &grads, eval)
}

/// Gradient check of the critic objective, gradient penalty included.
pub fn critic_check() -> GradReport {
    let cfg = net();
    let mut d = ParamSet::<f32>::init(&critic_layout(&cfg), 8).cast::<f64>();
    let b = batch();
    let (fake, real) = (b.x_m.clone(), b.refs.clone());
    let w = LossWeights::default();
    let mut tape = Tape::new();
    let (loss, vars) = critic_loss(&mut tape, &d, &real, &fake, &w);
    let grads: Vec<Tensor<f64>> = tape.grad(loss, &vars).into_iter().map(|v| tape.value(v).clone()).collect();
    let eval = |sets: &[&mut ParamSet<f64>]| {
        let mut tape = Tape::new();
        let (l, _) = critic_loss(&mut tape, sets[0], &real, &fake, &w);
        tape.value(l).item()
    };
    check(&mut [&mut d], &grads, eval)
}
