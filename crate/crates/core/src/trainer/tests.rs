use super::*;
use crate::data::{generate_synthetic, AugmentationConfig, SyntheticScene};
use crate::gradcheck::{network_loss_check, tiny_model_config, tiny_triplets};
use crate::networks::ModelConfig;

fn tiny_model() -> ModelConfig {
    tiny_model_config()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        batch_size: 2,
        epochs: 2,
        decay_epoch: 1,
        augmentation: AugmentationConfig::disabled(),
        ..TrainConfig::desk()
    }
}

fn pairs(ts: &[TrainingTriplet]) -> Vec<AugmentedPair> {
    ts.iter().map(|t| (t.clone(), t.clone())).collect()
}

#[test]
fn schedule_decays_once() {
    let cfg = TrainConfig::desk();
    assert_eq!(lr_schedule(0, &cfg), 1e-4);
    assert_eq!(lr_schedule(14, &cfg), 1e-4);
    assert_eq!(lr_schedule(15, &cfg), 1e-5);
    assert_eq!(lr_schedule(19, &cfg), 1e-5);
}

#[test]
fn presets_and_validation() {
    let desk = TrainConfig::desk();
    desk.validate().unwrap();
    assert_eq!((desk.epochs, desk.batch_size, desk.lambda), (20, 4, 1e-3));
    let full = TrainConfig::full();
    full.validate().unwrap();
    assert_eq!(full.batch_size, 12);
    let bad = TrainConfig {
        lr_after_decay: 1e-3,
        ..TrainConfig::desk()
    };
    assert_eq!(bad.validate().unwrap_err().kind(), "config");
    let bad = TrainConfig {
        decay_epoch: 20,
        ..TrainConfig::desk()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn resolution_applies_file_overrides_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "preset = \"full\"\nepochs = 4\ndecay_epoch = 3\n[model.depth]\nddv_bins = 64\n").unwrap();
    let cfg = TrainConfig::resolve(Some(&path), &["attention_on=false".into(), "lr=2e-4".into()]).unwrap();
    assert_eq!(cfg.preset, Preset::Full);
    assert_eq!(cfg.batch_size, 12);
    assert_eq!(cfg.model.depth.ddv_bins, 64);
    assert_eq!(cfg.lr, 2e-4);
    assert!(!cfg.model.depth.use_attention && cfg.model.depth.use_ddv);
    let err = TrainConfig::resolve(None, &["model.depth.bins=3".into()]).unwrap_err();
    assert!(err.to_string().contains("model.depth.ddv_bins"), "{err}");
}

#[test]
fn ablation_flags_touch_only_their_block() {
    let names = |cfg: &ModelConfig| {
        let m = Model::new(cfg.clone(), 0).unwrap();
        m.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape()))
            .collect::<Vec<_>>()
    };
    let base = names(&tiny_model());
    let mut no_attn = tiny_model();
    no_attn.depth.use_attention = false;
    let no_attn = names(&no_attn);
    let ddv = |v: &[(String, Shape)]| v.iter().filter(|(n, _)| n.starts_with("decoder.")).cloned().collect::<Vec<_>>();
    assert_eq!(ddv(&base), ddv(&no_attn));
    assert!(no_attn.len() < base.len());
    let mut no_ddv = tiny_model();
    no_ddv.depth.use_ddv = false;
    let no_ddv = names(&no_ddv);
    let ctx = |v: &[(String, Shape)]| v.iter().filter(|(n, _)| n.starts_with("context.")).cloned().collect::<Vec<_>>();
    assert_eq!(ctx(&base), ctx(&no_ddv));
    assert!(ddv(&no_ddv) != ddv(&base));
}

#[test]
fn identical_frames_give_a_zero_update() {
    let cfg = TrainConfig {
        lambda: 0.0,
        ..tiny_config()
    };
    let mut state = TrainState::new(&cfg).unwrap();
    let frame = tiny_triplets(1)[0].frames[1].clone();
    let mut t = tiny_triplets(1).remove(0);
    t.frames = [frame.clone(), frame.clone(), frame];
    let before = state.model.params.clone();
    let loss = train_step(&mut state, &pairs(&[t]), &cfg, 1e-3).unwrap();
    assert_eq!(loss.photometric, 0.0);
    assert_eq!(loss.mask_density, vec![0.0; 4]);
    for ((_, a), (_, b)) in before.iter().zip(state.model.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn steps_are_deterministic_and_checkpoints_resume_exactly() {
    let cfg = tiny_config();
    let batch = pairs(&tiny_triplets(2));
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    let la = train_step(&mut a, &batch, &cfg, 1e-3).unwrap();
    let lb = train_step(&mut b, &batch, &cfg, 1e-3).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.model.params, b.model.params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.safetensors");
    a.save(&path).unwrap();
    let mut restored = TrainState::load(&path, &cfg).unwrap();
    assert_eq!(restored.step, 1);
    assert_eq!(restored.adam, a.adam);
    let next_a = train_step(&mut a, &batch, &cfg, 1e-3).unwrap();
    let next_r = train_step(&mut restored, &batch, &cfg, 1e-3).unwrap();
    assert_eq!(next_a, next_r);
    assert_eq!(a.model.params, restored.model.params);
    assert_eq!(a.model.buffers, restored.model.buffers);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut ts = tiny_triplets(2);
    ts[1].frames[0].data_mut()[5] = f64::NAN;
    match train_step(&mut state, &pairs(&ts), &cfg, 1e-3).unwrap_err() {
        Error::NonFiniteLoss { step, batch_id, .. } => {
            assert_eq!(step, 0);
            assert_eq!(batch_id, "tiny/1,tiny/2");
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let r = network_loss_check().unwrap();
    assert_eq!(r.entries, 16);
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn zero_epochs_return_the_initialization() {
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let state = TrainState::new(&cfg).unwrap();
    let init = state.model.clone();
    let out = fit(&cfg, &TrainData::default(), state, None).unwrap();
    assert!(out.epochs.is_empty() && out.steps.is_empty());
    assert_eq!(out.best.params, init.params);
    assert_eq!(out.best_epoch, None);
}

#[test]
fn fit_is_reproducible_and_writes_artifacts() {
    let cfg = TrainConfig {
        augmentation: AugmentationConfig::default(),
        ..tiny_config()
    };
    let data = TrainData {
        train: tiny_triplets(3),
        val: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let a = fit(&cfg, &data, TrainState::new(&cfg).unwrap(), Some(dir.path())).unwrap();
    let b = fit(&cfg, &data, TrainState::new(&cfg).unwrap(), None).unwrap();
    assert_eq!(a.steps.len(), 4);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.loss, y.loss);
    }
    assert_eq!(a.steps[2].lr, cfg.lr_after_decay);
    assert_eq!(a.best_epoch, Some(1));
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["step", "step", "epoch", "step", "step", "epoch", "selected"]);
    assert!(dir.path().join("checkpoints/epoch_001.safetensors").is_file());
    let best = Model::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.params, a.best.params);
}

#[test]
fn max_steps_stops_early_and_validation_selects() {
    let scene = SyntheticScene {
        frame_count: 8,
        holdout: 4,
        ..SyntheticScene::default()
    };
    let seq = generate_synthetic(&scene).unwrap();
    let mut cfg = TrainConfig {
        epochs: 3,
        decay_epoch: 2,
        max_steps: 2,
        batch_size: 1,
        augmentation: AugmentationConfig::disabled(),
        ..TrainConfig::desk()
    };
    cfg.model.depth.input_height = 64;
    let triplet = |i: usize| TrainingTriplet {
        frames: [seq.frames[i - 1].clone(), seq.frames[i].clone(), seq.frames[i + 1].clone()],
        intrinsics: seq.intrinsics,
        sequence: "s".into(),
        index: i,
    };
    let data = TrainData {
        train: vec![triplet(1), triplet(2), triplet(3)],
        val: vec![EvalSample {
            id: "s/5".into(),
            image: seq.frames[5].clone(),
            gt: seq.depths[5].clone(),
        }],
    };
    let out = fit(&cfg, &data, TrainState::new(&cfg).unwrap(), None).unwrap();
    assert_eq!(out.state.step, 2);
    assert_eq!(out.epochs.len(), 1);
    assert!(out.epochs[0].val.unwrap().abs_rel.is_finite());
    assert_eq!(out.best_epoch, Some(0));
}
