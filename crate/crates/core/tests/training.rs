//! Optimization loops, freezing, checkpoints and reproducibility.

mod common;

use std::collections::BTreeMap;

use plugdit::checkpoint;
use plugdit::config::ExperimentConfig;
use plugdit::converters::MergeModel;
use plugdit::metrics::evaluate_task;
use plugdit::numerics::{ParamStore, Tensor};
use plugdit::scenes::{generate_scene, SceneParams};
use plugdit::tasks::{run_inference, SamplerConfig, TaskMode};
use plugdit::trainer::{
    adam_step, backbone_digest, full_finetune, pretrain_t2i, train_converters, AdamConfig, AdamState,
};
use plugdit::Error;

fn pretrained(cfg: &ExperimentConfig, iterations: usize) -> MergeModel {
    let mut m = MergeModel::new_backbone(cfg.clone(), cfg.pretrain.seed).unwrap();
    let mut tc = cfg.pretrain.clone();
    tc.iterations = iterations;
    pretrain_t2i(&mut m, &tc, None).unwrap();
    m
}

#[test]
fn pretraining_smoke_loss_trends_down() {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.iterations = 50;
    cfg.pretrain.batch_size = 8;
    let mut m = MergeModel::new_backbone(cfg.clone(), 0).unwrap();
    let run = pretrain_t2i(&mut m, &cfg.pretrain, None).unwrap();
    assert_eq!(run.losses.len(), 50);
    assert!(run.losses.iter().all(|l| l.is_finite()));
    let first: f64 = run.losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = run.losses[40..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "first {first} last {last}");
    // the backbone leaves pretraining frozen
    assert!(m.store.iter().all(|(_, p)| !p.trainable));
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![3], vec![2.0, -1.5, 0.7]).unwrap(), true)
        .unwrap();
    let cfg = AdamConfig {
        lr: 0.05,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::default();
    let loss = |s: &ParamStore| {
        s.tensor("w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
    };
    let mut history = vec![loss(&s)];
    for _ in 0..50 {
        let g = s.tensor("w").unwrap().map(|v| 2.0 * v);
        let grads = BTreeMap::from([("w".to_string(), g)]);
        adam_step(&mut s, &grads, &mut state, &cfg).unwrap();
        history.push(loss(&s));
    }
    assert!(history[5..].windows(2).all(|w| w[1] < w[0]), "{history:?}");
    assert_eq!(state.step, 50);
}

#[test]
fn converter_training_keeps_backbone_and_rejects_unfrozen() {
    let mut cfg = common::tiny_config();
    cfg.train.iterations = 20;
    let mut m = pretrained(&cfg, 20);
    m.attach().unwrap();
    let before = backbone_digest(&m.store);
    let frozen_before = m.store.frozen_digest();
    let untouched = m.clone();
    train_converters(&mut m, TaskMode::Depth, &cfg.train, None).unwrap();
    assert_eq!(backbone_digest(&m.store), before);
    assert_eq!(m.store.frozen_digest(), frozen_before);
    // converters moved
    let name = "converters.0.0.sa.q.weight";
    assert_ne!(m.store.tensor(name).unwrap(), untouched.store.tensor(name).unwrap());

    let mut bad = untouched.clone();
    bad.store.set_trainable("backbone.head.linear.weight", true).unwrap();
    let err = train_converters(&mut bad, TaskMode::Depth, &cfg.train, None).unwrap_err();
    assert!(matches!(err, Error::FreezeViolation(_)));

    let mut frozen = ParamStore::new();
    frozen.insert("w", Tensor::scalar(1.0), false).unwrap();
    let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
    let err = adam_step(
        &mut frozen,
        &grads,
        &mut AdamState::default(),
        &AdamConfig::from_train(&cfg.train, 0.1),
    );
    assert!(matches!(err, Err(Error::FreezeViolation(_))));
    assert_eq!(frozen.tensor("w").unwrap().data(), &[1.0]);
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = common::tiny_config();
    let mut m = MergeModel::new_backbone(cfg.clone(), 0).unwrap();
    m.store.tensor_mut("backbone.head.linear.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = pretrain_t2i(&mut m, &cfg.pretrain, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { iteration: 0 }));
}

#[test]
fn full_finetune_drifts_generation_while_merge_does_not() {
    let mut cfg = common::tiny_config();
    cfg.train.iterations = 30;
    let base = pretrained(&cfg, 30);
    let bc = base.backbone_config().clone();
    let inputs: Vec<_> = (0..4).map(|s| common::random_input(&bc, 1, 3, s)).collect();
    let reference: Vec<Tensor> = inputs
        .iter()
        .map(|i| base.predict(i, TaskMode::Generate).unwrap())
        .collect();

    let mut ft = base.clone();
    ft.attach_full_finetune().unwrap();
    full_finetune(&mut ft, TaskMode::Depth, &cfg.train, None).unwrap();
    let mut merge = base.clone();
    merge.attach().unwrap();
    train_converters(&mut merge, TaskMode::Depth, &cfg.train, None).unwrap();

    let drift = |m: &MergeModel| -> f64 {
        inputs
            .iter()
            .zip(&reference)
            .map(|(i, r)| {
                let y = m.predict(i, TaskMode::Generate).unwrap();
                y.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / y.len() as f64
            })
            .sum::<f64>()
            / inputs.len() as f64
    };
    assert!(drift(&ft) > 0.0);
    assert_eq!(drift(&merge), 0.0);
}

#[test]
fn training_is_bitwise_reproducible() {
    let mut cfg = common::tiny_config();
    cfg.pretrain.iterations = 100;
    cfg.train.iterations = 100;
    let run = || {
        let mut m = MergeModel::new_backbone(cfg.clone(), 0).unwrap();
        let a = pretrain_t2i(&mut m, &cfg.pretrain, None).unwrap();
        m.attach().unwrap();
        let b = train_converters(&mut m, TaskMode::Depth, &cfg.train, None).unwrap();
        (a.losses, b.losses, checkpoint::to_bytes(&m))
    };
    let (a1, b1, c1) = run();
    let (a2, b2, c2) = run();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
    assert_eq!(c1, c2);
}

#[test]
fn checkpoint_reload_reproduces_forward() {
    let cfg = common::tiny_config();
    let mut m = pretrained(&cfg, 10);
    m.attach().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mrge");
    checkpoint::save(&m, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    checkpoint::check_digest(&loaded, &cfg, false).unwrap();
    let bc = m.backbone_config().clone();
    for (mode, ch) in [(TaskMode::Generate, 3), (TaskMode::Depth, 6)] {
        let input = common::random_input(&bc, 2, ch, 4);
        let a = m.predict(&input, mode).unwrap();
        let b = loaded.model.predict(&input, mode).unwrap();
        assert_eq!(common::bits(&a), common::bits(&b));
    }
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::to_bytes(&loaded.model));

    let mut other = cfg.clone();
    other.backbone.depth += 1;
    assert!(matches!(
        checkpoint::check_digest(&loaded, &other, false),
        Err(Error::DigestMismatch { .. })
    ));
    checkpoint::check_digest(&loaded, &other, true).unwrap();
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = MergeModel::new_backbone(common::tiny_config(), 0).unwrap();
    let bytes = checkpoint::to_bytes(&m);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut trailing = bytes;
    trailing.push(0);
    assert!(checkpoint::from_bytes(&trailing).is_err());
}

#[test]
fn inference_is_deterministic_and_finite() {
    let cfg = common::tiny_config();
    let mut m = MergeModel::new_backbone(cfg.clone(), 0).unwrap();
    m.attach().unwrap();
    let scene = generate_scene(
        200_000,
        &SceneParams::new(cfg.backbone.image_size),
        cfg.backbone.text_len,
    )
    .unwrap();
    let sampler = SamplerConfig { steps: 3 };
    for mode in [TaskMode::Depth, TaskMode::Normal] {
        let a = run_inference(&m, &scene.rgb, mode, sampler, 7).unwrap();
        let b = run_inference(&m, &scene.rgb, mode, sampler, 7).unwrap();
        assert_eq!(common::bits(&a), common::bits(&b));
        assert!(a.all_finite());
        let size = cfg.backbone.image_size;
        let want: &[usize] = if mode == TaskMode::Depth {
            &[size, size]
        } else {
            &[3, size, size]
        };
        assert_eq!(a.shape(), want);
    }
    assert!(run_inference(&m, &scene.rgb, TaskMode::Generate, sampler, 7).is_err());
}

#[test]
fn evaluation_reports_are_reproducible() {
    let cfg = common::tiny_config();
    let mut m = MergeModel::new_backbone(cfg, 0).unwrap();
    m.attach().unwrap();
    let a = serde_json::to_string(&evaluate_task(&m, TaskMode::Depth, 5, 3, 2).unwrap()).unwrap();
    let b = serde_json::to_string(&evaluate_task(&m, TaskMode::Depth, 5, 3, 2).unwrap()).unwrap();
    assert_eq!(a, b);
    let n = evaluate_task(&m, TaskMode::Normal, 3, 3, 2).unwrap();
    assert_eq!(n.per_sample.len(), 3);
}
