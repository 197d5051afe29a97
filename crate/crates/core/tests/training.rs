use refinegan::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint};
use refinegan::dataset::{phantom_set, Dataset, Split};
use refinegan::kspace::{undersample, zero_fill};
use refinegan::losses::{cyclic_losses, Distance, LossWeights};
use refinegan::masks::{generate_mask, MaskSpec, Pattern};
use refinegan::metrics::zero_fill_baseline;
use refinegan::network::{critic_layout, generator_layout, NetworkConfig, ParamSet};
use refinegan::trainer::{evaluate, reconstruct, reconstruct_checkpoints, train, train_until, Model, TrainConfig, TrainState};
use refinegan::Error;

fn set(count: usize, size: usize, seed: u64) -> Dataset {
    let names = (0..count).map(|i| format!("p{i}")).collect();
    Dataset::from_raw(Split::Train, names, phantom_set(count, size, seed).unwrap(), false).unwrap()
}

fn small(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr0: 1e-3,
        batch_size: 2,
        critic_steps: 2,
        seed: 5,
        mask: MaskSpec::new(Pattern::Radial, 0.3, 16, 16, 1),
        network: NetworkConfig {
            levels: 2,
            base_filters: 4,
            ..NetworkConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn history_and_schedule_contract() {
    let cfg = TrainConfig {
        batch_size: 1,
        ..small(3)
    };
    let state = train(&cfg, &set(2, 16, 0)).unwrap();
    assert_eq!(state.history.len(), 6);
    assert_eq!(state.step, 6);
    let lrs: Vec<f64> = state.history.iter().step_by(2).map(|r| r.lr).collect();
    assert_eq!(lrs[0], cfg.lr0);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert!(state.history.iter().enumerate().all(|(i, r)| r.step == i + 1 && r.epoch == i / 2 + 1));
}

#[test]
fn zero_rate_and_weights_leave_generator_untouched() {
    let cfg = TrainConfig {
        lr0: 0.0,
        loss: LossWeights {
            alpha: 0.0,
            gamma: 0.0,
            ..LossWeights::default()
        },
        ..small(2)
    };
    let g = ParamSet::zeros(&generator_layout(&cfg.network));
    let d = ParamSet::init(&critic_layout(&cfg.network), 1);
    let mut state = TrainState::with_weights(cfg, g.clone(), d.clone()).unwrap();
    train_until(&mut state, &set(4, 16, 1), 2, |_| Ok(())).unwrap();
    assert_eq!(state.generator, g);
    assert_eq!(state.critic, d);
}

#[test]
fn critic_updates_do_not_touch_the_generator() {
    // no generator objective at all: only the critic can move
    let cfg = TrainConfig {
        loss: LossWeights {
            alpha: 0.0,
            gamma: 0.0,
            adversarial: 0.0,
            ..LossWeights::default()
        },
        ..small(2)
    };
    let before = TrainState::new(cfg.clone()).unwrap();
    let after = train(&cfg, &set(4, 16, 2)).unwrap();
    assert_eq!(after.generator, before.generator);
    assert_ne!(after.critic, before.critic);
}

#[test]
fn fixed_seed_reproduces_history() {
    let data = set(4, 16, 3);
    let a = train(&small(2), &data).unwrap();
    let b = train(&small(2), &data).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a, b);
    let c = train(&TrainConfig { seed: 6, ..small(2) }, &data).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn per_batch_masks_train() {
    let cfg = TrainConfig {
        mask_per_batch: true,
        ..small(1)
    };
    let st = train(&cfg, &set(4, 16, 4)).unwrap();
    assert!(st.history.iter().all(|r| r.total.is_finite()));
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let cfg = TrainConfig {
        lr0: 1e30,
        ..small(3)
    };
    match train(&cfg, &set(4, 16, 5)) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn wrong_image_shape_is_rejected() {
    assert!(matches!(train(&small(1), &set(4, 32, 0)), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = set(4, 16, 6);
    let straight = train(&small(4), &data).unwrap();

    let mut first = TrainState::new(small(4)).unwrap();
    train_until(&mut first, &data, 2, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed, first);
    train_until(&mut resumed, &data, 4, |_| Ok(())).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn checkpoint_checks() {
    let st = train(&small(1), &set(4, 16, 7)).unwrap();
    let bytes = encode_checkpoint(&st).unwrap();
    assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&st, &path).unwrap();
    let other = NetworkConfig {
        levels: 3,
        ..st.config.network
    };
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::ShapeMismatch { .. })));
    assert!(load_checkpoint_for(&path, &st.config.network).is_ok());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn zero_model_reconstructs_zero_fill_exactly() {
    let net = small(1).network;
    let model = Model::zeros(net, (16, 16)).unwrap();
    let data = set(3, 16, 8);
    let mask = MaskSpec::new(Pattern::Spiral, 0.25, 16, 16, 2);
    let bits = generate_mask(&mask).unwrap();
    for i in 0..data.len() {
        let m = undersample(&data.raw_item(i), &bits).unwrap();
        let s0 = zero_fill(&m).unwrap();
        for r in reconstruct_checkpoints(&model, &m).unwrap() {
            assert_eq!(r, s0);
        }
    }
    let ours = evaluate(&model, &data, &mask, None, "zero-fill").unwrap();
    assert_eq!(ours, zero_fill_baseline(&data, &mask).unwrap());
}

#[test]
fn reconstruction_is_deterministic() {
    let st = train(&small(1), &set(4, 16, 9)).unwrap();
    let model = st.model();
    let m = undersample(&set(2, 16, 10).raw_item(0), &generate_mask(&st.config.mask).unwrap()).unwrap();
    assert_eq!(reconstruct(&model, &m).unwrap(), reconstruct(&model, &m).unwrap());
    let bad = undersample(&set(2, 32, 0).raw_item(0), &generate_mask(&MaskSpec::new(Pattern::Radial, 0.3, 32, 32, 0)).unwrap()).unwrap();
    assert!(reconstruct(&model, &bad).is_err());
}

#[test]
fn oracle_output_zeroes_both_cyclic_losses() {
    let data = set(3, 16, 11);
    for pattern in [Pattern::Radial, Pattern::Cartesian, Pattern::Random, Pattern::Spiral] {
        let mask = generate_mask(&MaskSpec::new(pattern, 0.2, 16, 16, 0)).unwrap();
        for i in 0..data.len() {
            let truth = data.raw_item(i);
            for metric in [Distance::Mse, Distance::Mae] {
                assert_eq!(cyclic_losses(&truth, &truth, &mask, metric).unwrap(), (0.0, 0.0));
            }
        }
    }
}
