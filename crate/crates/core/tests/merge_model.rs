//! Attaching, skipping and counting converters.

mod common;

use plugdit::backbone::{block_forward, count_params, cross_attn_param_count, BlockLayout, TextContext, TASK_PATCH};
use plugdit::config::{ConverterSetting, ExperimentConfig, InitKind};
use plugdit::converters::{
    converter_layout, converter_param_count, converter_prefix, task_patch_param_count, MergeModel,
};
use plugdit::numerics::{Graph, Rng, Tensor};
use plugdit::tasks::{concat_channels, TaskMode};
use plugdit::Error;

const SETTINGS: [ConverterSetting; 5] = [
    ConverterSetting::A,
    ConverterSetting::B,
    ConverterSetting::C,
    ConverterSetting::D,
    ConverterSetting::E,
];

/// Backbone whose blocks are no longer identity maps.
fn trained_like(cfg: ExperimentConfig, seed: u64) -> MergeModel {
    let mut m = MergeModel::new_backbone(cfg, seed).unwrap();
    let mut rng = Rng::new(seed + 1);
    for (_, p) in m.store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.1 * rng.normal() as f32;
        }
    }
    m
}

#[test]
fn generation_is_unchanged_by_attachment() {
    let base = trained_like(common::tiny_config(), 1);
    let cfg = base.backbone_config().clone();
    let inputs: Vec<_> = (0..20).map(|s| common::random_input(&cfg, 1, 3, 100 + s)).collect();
    let before: Vec<Tensor> = inputs
        .iter()
        .map(|i| base.predict(i, TaskMode::Generate).unwrap())
        .collect();
    for setting in SETTINGS {
        for (groups, gre, stack_n) in [(1, true, 1), (2, false, 2), (4, true, 1), (3, true, 2)] {
            let mut m = base.clone();
            m.config.converters.setting = setting;
            m.config.converters.n_groups = Some(groups);
            m.config.converters.gre = gre;
            m.config.converters.stack_n = stack_n;
            m.attach().unwrap();
            for (input, want) in inputs.iter().zip(&before) {
                let got = m.predict(input, TaskMode::Generate).unwrap();
                assert_eq!(common::bits(&got), common::bits(want));
            }
        }
    }
}

#[test]
fn task_patch_halving_reproduces_generation() {
    let mut m = trained_like(common::tiny_config(), 2);
    m.attach().unwrap();
    // close every converter gate
    let names: Vec<String> = m
        .store
        .names()
        .filter(|n| n.starts_with("converters.") && (n.contains(".mod.") || n.contains(".gate.")))
        .cloned()
        .collect();
    for n in names {
        m.store.tensor_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let cfg = m.backbone_config().clone();
    for seed in 0..5 {
        let input = common::random_input(&cfg, 2, 3, seed);
        let gen = m.predict(&input, TaskMode::Generate).unwrap();
        let mut dup = input.clone();
        dup.z = concat_channels(&input.z, &input.z).unwrap();
        let depth = m.predict(&dup, TaskMode::Depth).unwrap();
        let worst = gen
            .data()
            .iter()
            .zip(depth.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-5, "max deviation {worst:.3e}");
    }
}

#[test]
fn setting_a_converter_equals_its_source_block() {
    let mut cfg = common::tiny_config();
    cfg.converters.setting = ConverterSetting::A;
    cfg.converters.n_groups = Some(2);
    let mut m = trained_like(cfg, 3);
    m.attach().unwrap();
    let bc = m.backbone_config().clone();
    let plan = m.converters.as_ref().unwrap().plan.clone();
    let mut rng = Rng::new(9);
    let x = rng.normal_tensor::<f32>(&[2, bc.tokens(), bc.d_model]);
    let ctx = rng.normal_tensor::<f32>(&[2, bc.text_len, bc.d_model]);
    let c = rng.normal_tensor::<f32>(&[2, bc.d_model]);
    let full = BlockLayout::full(bc.ffn_expansion);
    for group in 0..plan.n_groups() {
        let mut g = Graph::no_grad(&m.store);
        let (xv, cv, tv) = (g.constant(x.clone()), g.constant(ctx.clone()), g.constant(c.clone()));
        let conv = block_forward(&mut g, &converter_prefix(group, 0), full, bc.heads, xv, cv, tv).unwrap();
        let src = format!("backbone.blocks.{}", plan.first_block(group));
        let block = block_forward(&mut g, &src, full, bc.heads, xv, cv, tv).unwrap();
        let worst = g
            .value(conv)
            .data()
            .iter()
            .zip(g.value(block).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "group {group}: {worst:.3e}");
    }
}

#[test]
fn pretrained_init_copies_matching_tensors() {
    for setting in [ConverterSetting::A, ConverterSetting::B, ConverterSetting::E] {
        let mut cfg = common::tiny_config();
        cfg.converters.setting = setting;
        cfg.converters.n_groups = Some(3);
        let mut m = trained_like(cfg, 4);
        m.attach().unwrap();
        let plan = m.converters.as_ref().unwrap().plan.clone();
        let mut copied = 0;
        let mut fresh = 0;
        for group in 0..3 {
            let prefix = converter_prefix(group, 0);
            let src = format!("backbone.blocks.{}", plan.first_block(group));
            let names: Vec<String> = m
                .store
                .names()
                .filter(|n| n.starts_with(&format!("{prefix}.")))
                .cloned()
                .collect();
            assert!(!names.is_empty());
            for name in names {
                let tail = &name[prefix.len()..];
                let t = m.store.tensor(&name).unwrap();
                let s = m.store.tensor(&format!("{src}{tail}")).unwrap();
                if t.shape() != s.shape() {
                    assert!(setting == ConverterSetting::E && tail.starts_with(".ffn.fc"), "{name}");
                    // a narrow FFN is not a slice of the wide one
                    let k = t.len().min(s.len());
                    let head: Vec<u32> = s.data()[..k].iter().map(|v| v.to_bits()).collect();
                    let mine: Vec<u32> = t.data()[..k].iter().map(|v| v.to_bits()).collect();
                    assert_ne!(head, mine, "{name}");
                    fresh += 1;
                } else {
                    assert_eq!(common::bits(t), common::bits(s), "{name}");
                    copied += 1;
                }
                if setting != ConverterSetting::A {
                    assert!(!tail.starts_with(".ca."), "{name}");
                }
            }
        }
        assert!(copied > 0);
        assert_eq!(fresh > 0, setting == ConverterSetting::E);
    }
}

#[test]
fn random_init_differs_from_source() {
    let mut cfg = common::tiny_config();
    cfg.converters.init = InitKind::Random;
    let mut m = trained_like(cfg, 5);
    m.attach().unwrap();
    let t = m.store.tensor("converters.0.0.sa.q.weight").unwrap();
    let s = m.store.tensor("backbone.blocks.0.sa.q.weight").unwrap();
    assert_ne!(common::bits(t), common::bits(s));
    // modulation is drawn too, so the converter is live from step 0
    let modw = m.store.tensor("converters.0.0.sa.mod.weight").unwrap();
    assert!(modw.data().iter().any(|&v| v != 0.0));
}

#[test]
fn trainable_set_is_converters_plus_task_patch() {
    let fresh = MergeModel::new_backbone(ExperimentConfig::default(), 0).unwrap();
    assert_eq!(fresh.param_counts(true), fresh.param_counts(false));

    for setting in SETTINGS {
        for groups in [1, 2, 4, 8] {
            for stack_n in [1, 2] {
                let mut m = fresh.clone();
                m.config.converters.setting = setting;
                m.config.converters.n_groups = Some(groups);
                m.config.converters.stack_n = stack_n;
                m.attach().unwrap();
                let bc = m.backbone_config();
                let t = m.param_counts(true);
                let want_conv = groups * stack_n * converter_param_count(setting, bc);
                assert_eq!(t.converters, want_conv);
                assert_eq!(t.task_patch, task_patch_param_count(bc));
                assert_eq!(t.backbone, 0);
                assert_eq!(t.total, want_conv + task_patch_param_count(bc));
                for (name, p) in m.store.iter() {
                    assert_eq!(p.trainable, !name.starts_with("backbone."), "{name}");
                }
                assert_eq!(count_params(&m.store, false).backbone, fresh.param_counts(false).total);
            }
        }
    }
}

#[test]
fn converter_counts_are_ordered_and_linear() {
    let cfg = ExperimentConfig::default().backbone;
    let n = |s| converter_param_count(s, &cfg);
    use ConverterSetting::*;
    assert!(n(A) > n(B) && n(B) > n(C));
    assert!(n(A) > n(B) && n(B) > n(E) && n(E) > n(D));
    assert_eq!(n(A) - n(B), cross_attn_param_count(cfg.d_model, cfg.d_model));
    let totals: Vec<usize> = [8, 4, 2, 1].iter().map(|g| g * n(E)).collect();
    assert_eq!(totals[0], 8 * totals[3]);
    assert_eq!(totals[1], 4 * totals[3]);
    assert_eq!(totals[2], 2 * totals[3]);
    assert_eq!(converter_layout(D, 4).ffn_expansion, None);
}

#[test]
fn full_finetune_trains_everything() {
    let mut m = MergeModel::new_backbone(common::tiny_config(), 0).unwrap();
    m.attach_full_finetune().unwrap();
    assert_eq!(m.param_counts(true), m.param_counts(false));
    assert!(m.store.contains(&format!("{TASK_PATCH}.weight")));
    assert!(m.converters.is_none());
}

#[test]
fn mode_switching_is_lossless() {
    let mut m = trained_like(common::tiny_config(), 6);
    m.attach().unwrap();
    let cfg = m.backbone_config().clone();
    let gen_in = common::random_input(&cfg, 1, 3, 1);
    let task_in = common::random_input(&cfg, 1, 6, 2);
    let a = m.predict(&gen_in, TaskMode::Generate).unwrap();
    m.predict(&task_in, TaskMode::Depth).unwrap();
    m.predict(&task_in, TaskMode::Normal).unwrap();
    let b = m.predict(&gen_in, TaskMode::Generate).unwrap();
    assert_eq!(common::bits(&a), common::bits(&b));
}

#[test]
fn empty_prompt_is_permutation_invariant() {
    let m = trained_like(common::tiny_config(), 7);
    let cfg = m.backbone_config().clone();
    let mut input = common::random_input(&cfg, 1, 3, 3);
    input.text = vec![TextContext::empty(cfg.text_len)];
    let a = m.predict(&input, TaskMode::Generate).unwrap();
    input.text = vec![TextContext::new(&[], cfg.text_len, cfg.text_vocab).unwrap()];
    let b = m.predict(&input, TaskMode::Generate).unwrap();
    assert_eq!(common::bits(&a), common::bits(&b));
}

#[test]
fn mode_and_shape_errors() {
    let mut m = MergeModel::new_backbone(common::tiny_config(), 0).unwrap();
    let cfg = m.backbone_config().clone();
    let gen_in = common::random_input(&cfg, 1, 3, 1);
    assert!(matches!(m.predict(&gen_in, TaskMode::Depth), Err(Error::Mode(_))));
    m.attach().unwrap();
    // three channels through the six-channel task patch
    assert!(matches!(
        m.predict(&gen_in, TaskMode::Depth),
        Err(Error::Shape { op: "patchify", .. })
    ));
    let task_in = common::random_input(&cfg, 1, 6, 1);
    assert!(m.predict(&task_in, TaskMode::Generate).is_err());
    let mut wrong = common::random_input(&cfg, 1, 3, 1);
    wrong.z = Tensor::zeros(&[1, 3, cfg.image_size + 4, cfg.image_size + 4]);
    assert!(m.predict(&wrong, TaskMode::Generate).is_err());
}
