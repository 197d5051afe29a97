//! Alternating WGAN-GP optimization of the chained generator and the critic.
//!
//! Every network input is the zero-filled image scaled by `1 / max|s0|`. The
//! reference image and the measurement of the same item get the same factor,
//! so data consistency holds exactly in scaled units, and inference applies
//! the identical map before undoing it.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ItemMasks, Tape};
use crate::dataset::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::kspace::{undersample, zero_fill, ComplexImage, KSpaceMeasurement};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::masks::{generate_mask, MaskSpec, Pattern, SamplingMask};
use crate::network::{self, critic_layout, generator_layout, NetworkConfig, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate; decays linearly towards zero.
    pub lr0: f64,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Draw a fresh mask seed for every batch instead of one fixed mask.
    pub mask_per_batch: bool,
    pub mask: MaskSpec,
    pub loss: LossWeights,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr0: 1e-4,
            batch_size: 4,
            critic_steps: 5,
            seed: 0,
            checkpoint_every: 0,
            mask_per_batch: false,
            mask: MaskSpec::new(Pattern::Radial, 0.3, 256, 256, 0),
            loss: LossWeights::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// A zero `lr0` is accepted so a run can be checked for side effects.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr0 = {} must be finite and >= 0", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        self.mask.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        self.network.validate()?;
        self.network
            .check_input(self.mask.height, self.mask.width)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning rate used throughout 0-based epoch `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - epoch as f64 / self.epochs as f64).max(0.0)
    }
}

/// One training-history row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub adv_g: f64,
    pub adv_d: f64,
    pub freq: f64,
    pub imag: f64,
    pub total: f64,
    pub lr: f64,
}

impl HistoryRow {
    fn new(epoch: usize, step: usize, l: LossBreakdown, lr: f64) -> Self {
        HistoryRow {
            epoch,
            step,
            adv_g: l.adv_g,
            adv_d: l.adv_d,
            freq: l.freq,
            imag: l.imag,
            total: l.total,
            lr,
        }
    }
}

pub fn history_to_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidInput(format!("history row: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("history: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn history_from_csv(text: &str) -> Result<Vec<HistoryRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<HistoryRow>, _>>()
        .map_err(|e| Error::malformed("training history", e.to_string()))
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed generator steps.
    pub step: usize,
    pub generator: ParamSet<f32>,
    pub critic: ParamSet<f32>,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Indices drawn so far by each sampler stream.
    pub sampler: [u64; 2],
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    /// Seeded initial weights.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = ParamSet::init(&generator_layout(&config.network), config.seed);
        let critic = ParamSet::init(&critic_layout(&config.network), config.seed ^ 0x5eed_c817);
        Self::with_weights(config, generator, critic)
    }

    pub fn with_weights(config: TrainConfig, generator: ParamSet<f32>, critic: ParamSet<f32>) -> Result<Self> {
        check_layout(&generator, &generator_layout(&config.network))?;
        check_layout(&critic, &critic_layout(&config.network))?;
        Ok(TrainState {
            adam_g: Adam::new(&generator),
            adam_d: Adam::new(&critic),
            config,
            epoch: 0,
            step: 0,
            generator,
            critic,
            sampler: [0, 0],
            history: Vec::new(),
        })
    }

    /// Errors unless `network` describes the stored weights.
    pub fn check_network(&self, network: &NetworkConfig) -> Result<()> {
        check_layout(&self.generator, &generator_layout(network))?;
        check_layout(&self.critic, &critic_layout(network))
    }

    pub fn model(&self) -> Model {
        Model {
            network: self.config.network,
            image_shape: (self.config.mask.height, self.config.mask.width),
            generator: self.generator.clone(),
        }
    }
}

fn check_layout(params: &ParamSet<f32>, layout: &[(String, crate::tensor::Shape)]) -> Result<()> {
    let ours: Vec<(&str, crate::tensor::Shape)> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    let theirs: Vec<(&str, crate::tensor::Shape)> = layout.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    if ours != theirs {
        let first = ours
            .iter()
            .zip(&theirs)
            .find(|(a, b)| a != b)
            .map(|(a, b)| (format!("{b:?}"), format!("{a:?}")))
            .unwrap_or_else(|| (format!("{} tensors", theirs.len()), format!("{} tensors", ours.len())));
        return Err(Error::ShapeMismatch {
            expected: first.0,
            actual: first.1,
        });
    }
    Ok(())
}

/// Scaled network input, reference and measurement for one item.
struct Prepared {
    x: Tensor<f32>,
    s: Tensor<f32>,
    m: Tensor<f32>,
    mask: Rc<[bool]>,
}

/// `1 / max|s0|`, or 1 for an all-zero image.
pub fn input_scale(s0: &ComplexImage) -> f64 {
    let peak = s0.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
    if peak > 0.0 {
        1.0 / peak
    } else {
        1.0
    }
}

fn prepare(item: &ComplexImage, mask: &SamplingMask) -> Result<Prepared> {
    let m = undersample(item, mask)?;
    let s0 = zero_fill(&m)?;
    let c = input_scale(&s0);
    let scale = |t: Tensor<f32>| t.map(|v| v * c as f32);
    Ok(Prepared {
        x: scale(s0.to_tensor()),
        s: scale(item.to_tensor()),
        m: scale(m.values().to_tensor()),
        mask: mask.shared_bits(),
    })
}

fn batch_mask(config: &TrainConfig, step: usize) -> Result<SamplingMask> {
    let mut spec = config.mask;
    if config.mask_per_batch {
        spec.seed = derive_seed(config.seed, 0x6d61_736b, step as u64, 0);
    }
    generate_mask(&spec)
}

fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key).gen()
}

fn divergence(state: &TrainState, detail: impl Into<String>) -> Error {
    Error::Divergence {
        epoch: state.epoch + 1,
        step: state.step + 1,
        detail: detail.into(),
    }
}

/// Trains from seeded initial weights for `config.epochs` epochs.
pub fn train(config: &TrainConfig, train_set: &Dataset) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone())?;
    train_until(&mut state, train_set, config.epochs, |_| Ok(()))?;
    Ok(state)
}

/// Continues `state` until `stop_epoch` completed epochs, calling `on_epoch`
/// after each one.
pub fn train_until(
    state: &mut TrainState,
    train_set: &Dataset,
    stop_epoch: usize,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let config = state.config.clone();
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let shape = train_set.shape().expect("nonempty");
    if shape != (config.mask.height, config.mask.width) {
        return Err(Error::shape((config.mask.height, config.mask.width), shape));
    }
    let stop_epoch = stop_epoch.min(config.epochs);
    let raw: Vec<ComplexImage> = (0..train_set.len()).map(|i| train_set.raw_item(i)).collect();
    let fixed: Option<Vec<Prepared>> = if config.mask_per_batch {
        None
    } else {
        let mask = generate_mask(&config.mask)?;
        Some(raw.iter().map(|x| prepare(x, &mask)).collect::<Result<_>>()?)
    };
    let mut sampler = BatchSampler::new(config.batch_size, config.seed, train_set.len())?;
    sampler.restore(state.sampler);
    let steps = sampler.steps_per_epoch();

    while state.epoch < stop_epoch {
        let lr = config.learning_rate(state.epoch);
        for _ in 0..steps {
            let (mi, si) = sampler.next_batch();
            let (m_items, s_items): (Vec<Prepared>, Vec<Prepared>);
            let (m_batch, s_batch): (Vec<&Prepared>, Vec<&Prepared>) = match &fixed {
                Some(p) => (mi.iter().map(|&i| &p[i]).collect(), si.iter().map(|&i| &p[i]).collect()),
                None => {
                    let mask = batch_mask(&config, state.step)?;
                    m_items = mi.iter().map(|&i| prepare(&raw[i], &mask)).collect::<Result<_>>()?;
                    s_items = si.iter().map(|&i| prepare(&raw[i], &mask)).collect::<Result<_>>()?;
                    (m_items.iter().collect(), s_items.iter().collect())
                }
            };
            let losses = train_step(state, &m_batch, &s_batch, lr)?;
            state.sampler = sampler.state();
            state.step += 1;
            state.history.push(HistoryRow::new(state.epoch + 1, state.step, losses, lr));
        }
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}

fn stack(items: &[&Prepared], f: impl Fn(&Prepared) -> &Tensor<f32>) -> Tensor<f32> {
    Tensor::stack(&items.iter().map(|p| f(p)).collect::<Vec<_>>())
}

fn grads_of(tape: &mut Tape<f32>, loss: crate::autodiff::Var, vars: &[crate::autodiff::Var]) -> Vec<Tensor<f32>> {
    let g = tape.grad(loss, vars);
    g.into_iter().map(|v| tape.value(v).clone()).collect()
}

/// One generator update preceded by `critic_steps` critic updates.
fn train_step(state: &mut TrainState, m_batch: &[&Prepared], s_batch: &[&Prepared], lr: f64) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let net = cfg.network;
    let w = cfg.loss;

    let x_m = stack(m_batch, |p| &p.x);
    let meas = stack(m_batch, |p| &p.m);
    let masks: ItemMasks = m_batch.iter().map(|p| p.mask.clone()).collect::<Vec<_>>().into();
    let x_s = stack(s_batch, |p| &p.x);
    let refs = stack(s_batch, |p| &p.s);

    let mut gt = Tape::<f32>::new();
    let gp = state.generator.attach(&mut gt, true);
    let xm = gt.constant(x_m);
    let outs_m = network::generator_forward(&mut gt, &gp, &net, xm)?;
    let xs = gt.constant(x_s);
    let outs_s = network::generator_forward(&mut gt, &gp, &net, xs)?;
    let fake_var = *outs_m.last().expect("folds >= 1");
    let fake = gt.value(fake_var).clone();
    if !fake.all_finite() {
        return Err(divergence(state, "generator produced non-finite values"));
    }

    let mut adv_d_value = 0.0;
    for k in 0..cfg.critic_steps {
        let mut dt = Tape::<f32>::new();
        let dp = state.critic.attach(&mut dt, true);
        let real = dt.constant(refs.clone());
        let fk = dt.constant(fake.clone());
        let sr = network::discriminator_forward(&mut dt, &dp, &net, real)?;
        let sf = network::discriminator_forward(&mut dt, &dp, &net, fk)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x6570_73, state.step as u64, k as u64));
        let eps: Vec<f32> = (0..refs.shape()[0]).map(|_| rng.gen()).collect();
        let xhat = losses::interpolate(&refs, &fake, &eps)?;
        let pen = losses::gradient_penalty(&mut dt, xhat, |t, v| network::discriminator_forward(t, &dp, &net, v))?;
        let (_, adv_d) = losses::adversarial_losses(&mut dt, sr, sf, pen, &w)
            .map_err(|e| divergence(state, e.to_string()))?;
        adv_d_value = dt.value(adv_d).item() as f64;
        if !adv_d_value.is_finite() {
            return Err(divergence(state, "critic loss is not finite"));
        }
        let grads = grads_of(&mut dt, adv_d, dp.vars());
        if !grads.iter().all(Tensor::all_finite) {
            return Err(divergence(state, "critic gradient is not finite"));
        }
        state.adam_d.step(&mut state.critic, &grads, lr);
    }

    let dc = state.critic.attach(&mut gt, false);
    let sf = network::discriminator_forward(&mut gt, &dc, &net, fake_var)?;
    let fake_mean = gt.mean(sf);
    let adv_g = gt.scale(fake_mean, -(w.adversarial as f32));
    let m_const = gt.constant(meas);
    let s_const = gt.constant(refs);
    let mut folds = Vec::with_capacity(outs_m.len());
    let (mut freq_sum, mut imag_sum) = (0.0, 0.0);
    for (&om, &os) in outs_m.iter().zip(&outs_s) {
        let f = losses::freq_loss(&mut gt, m_const, om, masks.clone(), w.distance)?;
        let i = losses::imag_loss(&mut gt, s_const, os, w.distance)?;
        freq_sum += gt.value(f).item() as f64;
        imag_sum += gt.value(i).item() as f64;
        folds.push((f, i));
    }
    let total = losses::total_loss(&mut gt, &folds, adv_g, &w)?;
    let breakdown = LossBreakdown {
        adv_g: gt.value(adv_g).item() as f64,
        adv_d: adv_d_value,
        freq: freq_sum,
        imag: imag_sum,
        total: gt.value(total).item() as f64,
    };
    if !breakdown.is_finite() {
        return Err(divergence(state, format!("non-finite loss {breakdown:?}")));
    }
    let grads = grads_of(&mut gt, total, gp.vars());
    if !grads.iter().all(Tensor::all_finite) {
        return Err(divergence(state, "generator gradient is not finite"));
    }
    state.adam_g.step(&mut state.generator, &grads, lr);
    Ok(breakdown)
}

/// A trained generator ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub network: NetworkConfig,
    /// Image shape the model was trained on.
    pub image_shape: (usize, usize),
    pub generator: ParamSet<f32>,
}

impl Model {
    pub fn new(network: NetworkConfig, image_shape: (usize, usize), generator: ParamSet<f32>) -> Result<Self> {
        network.validate()?;
        network.check_input(image_shape.0, image_shape.1)?;
        check_layout(&generator, &generator_layout(&network))?;
        Ok(Model {
            network,
            image_shape,
            generator,
        })
    }

    /// All-zero generator: every checkpoint returns its input.
    pub fn zeros(network: NetworkConfig, image_shape: (usize, usize)) -> Result<Self> {
        Self::new(network, image_shape, ParamSet::zeros(&generator_layout(&network)))
    }
}

/// Reconstruction after every fold, in the measurement's units.
pub fn reconstruct_checkpoints(model: &Model, m: &KSpaceMeasurement) -> Result<Vec<ComplexImage>> {
    if m.shape() != model.image_shape {
        return Err(Error::shape(model.image_shape, m.shape()));
    }
    let s0 = zero_fill(m)?;
    let c = input_scale(&s0);
    let x: Tensor<f32> = s0.to_tensor::<f32>().map(|v| v * c as f32);
    let outs = network::generator_values(&model.generator, &model.network, &x)?;
    let (h, w) = s0.shape();
    outs.iter()
        .map(|out| {
            let plane = h * w;
            let data = s0
                .data()
                .iter()
                .enumerate()
                .map(|(p, z)| {
                    let re = (out.data()[p] - x.data()[p]).as_f64();
                    let im = (out.data()[plane + p] - x.data()[plane + p]).as_f64();
                    z + num_complex::Complex64::new(re, im) / c
                })
                .collect();
            ComplexImage::new(h, w, data)
        })
        .collect()
}

/// Final-checkpoint reconstruction.
pub fn reconstruct(model: &Model, m: &KSpaceMeasurement) -> Result<ComplexImage> {
    Ok(reconstruct_checkpoints(model, m)?.pop().expect("folds >= 1"))
}

/// Evaluation report of checkpoint `fold` (0-based; `None` = final).
pub fn evaluate(
    model: &Model,
    test_set: &Dataset,
    mask_spec: &MaskSpec,
    fold: Option<usize>,
    label: &str,
) -> Result<crate::metrics::EvaluationReport> {
    let k = fold.unwrap_or(model.network.folds - 1);
    if k >= model.network.folds {
        return Err(Error::InvalidInput(format!(
            "checkpoint {} requested from a {}-fold model",
            k + 1,
            model.network.folds
        )));
    }
    crate::metrics::evaluate_with(test_set, mask_spec, label, |m| {
        Ok(reconstruct_checkpoints(model, m)?.swap_remove(k))
    })
}

/// Structured-text description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub mask_seed: u64,
    pub config: TrainConfig,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub split: String,
    pub file: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, sets: &[&Dataset]) -> Self {
        let datasets = sets
            .iter()
            .flat_map(|d| {
                let split = format!("{:?}", d.split).to_ascii_lowercase();
                d.names()
                    .iter()
                    .zip(d.digests())
                    .map(move |(n, h)| DatasetEntry {
                        split: split.clone(),
                        file: n.clone(),
                        sha256: h.clone(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            mask_seed: config.mask.seed,
            config: config.clone(),
            datasets,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
