//! Dense-prediction pipelines: target encoding, conditional sampling and
//! affine alignment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelInput, TextContext};
use crate::config::{BackboneConfig, TaskPrompt};
use crate::converters::MergeModel;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Real, Rng, Tensor};
use crate::scenes::DEPTH_MAP_PROMPT;
use crate::schedule::sample_from;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Generate,
    #[default]
    Depth,
    Normal,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Generate => "generate",
            TaskMode::Depth => "depth",
            TaskMode::Normal => "normal",
        })
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(TaskMode::Generate),
            "depth" => Ok(TaskMode::Depth),
            "normal" => Ok(TaskMode::Normal),
            _ => Err(invalid(format!("unknown mode {s:?}"))),
        }
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_mask(n: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Shape {
            op: "mask",
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    Ok(())
}

/// Maps depth to `[-1, 1]` using its 2nd and 98th percentiles over the
/// valid pixels, clipping outside. Invalid pixels become 0.
pub fn normalize_depth(depth: &Tensor, mask: &[bool]) -> Result<Tensor> {
    check_mask(depth.len(), mask)?;
    let mut valid: Vec<f64> = depth
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if valid.len() < 2 {
        return Err(invalid("depth normalization needs at least two valid pixels"));
    }
    valid.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&valid, 2.0), percentile(&valid, 98.0));
    if !(hi > lo) {
        return Err(invalid("depth map is constant over the valid pixels"));
    }
    Ok(Tensor::from_fn(depth.shape(), |i| {
        if !mask[i] {
            return 0.0;
        }
        let v = 2.0 * (depth.data()[i] as f64 - lo) / (hi - lo) - 1.0;
        v.clamp(-1.0, 1.0) as f32
    }))
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape {
            op: "depth_map",
            lhs: vec![1, 0, 0],
            rhs: s.to_vec(),
        }),
    }
}

/// Three-channel target `[3, H, W]` for the shared output head.
pub fn encode_target(mode: TaskMode, map: &Tensor) -> Result<Tensor> {
    match mode {
        TaskMode::Depth => {
            let (h, w) = plane(map)?;
            let n = h * w;
            Ok(Tensor::from_fn(&[3, h, w], |i| map.data()[i % n]))
        }
        TaskMode::Normal => {
            let s = map.shape();
            if s.len() != 3 || s[0] != 3 {
                return Err(Error::Shape {
                    op: "normal_map",
                    lhs: vec![3, 0, 0],
                    rhs: s.to_vec(),
                });
            }
            let n = s[1] * s[2];
            let d = map.data();
            for p in 0..n {
                let len = (0..3).map(|c| (d[c * n + p] as f64).powi(2)).sum::<f64>().sqrt();
                if (len - 1.0).abs() > 1e-3 {
                    return Err(invalid(format!("normal at pixel {p} has length {len}")));
                }
            }
            Ok(map.clone())
        }
        TaskMode::Generate => Err(Error::Mode("generate mode has no dense target".into())),
    }
}

/// Inverse of [`encode_target`]: channel mean for depth (`[H, W]`), unit
/// renormalization for normals (zero vectors become `(0, 0, 1)`).
pub fn decode_prediction(mode: TaskMode, y: &Tensor) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "decode_prediction",
            lhs: vec![3, 0, 0],
            rhs: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = y.data();
    match mode {
        TaskMode::Depth => Ok(Tensor::from_fn(&[h, w], |p| {
            ((d[p] as f64 + d[n + p] as f64 + d[2 * n + p] as f64) / 3.0) as f32
        })),
        TaskMode::Normal => {
            let mut out = Tensor::zeros(&[3, h, w]);
            for p in 0..n {
                let v = [d[p] as f64, d[n + p] as f64, d[2 * n + p] as f64];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let u = if len > 1e-12 && len.is_finite() {
                    [v[0] / len, v[1] / len, v[2] / len]
                } else {
                    [0.0, 0.0, 1.0]
                };
                for c in 0..3 {
                    out.data_mut()[c * n + p] = u[c] as f32;
                }
            }
            Ok(out)
        }
        TaskMode::Generate => Err(Error::Mode("generate mode has no dense target".into())),
    }
}

/// Text context for task-mode forward passes.
pub fn prompt_context(prompt: TaskPrompt, cfg: &BackboneConfig) -> Result<TextContext> {
    match prompt {
        TaskPrompt::Empty => Ok(TextContext::empty(cfg.text_len)),
        TaskPrompt::DepthMap => TextContext::new(&DEPTH_MAP_PROMPT, cfg.text_len, cfg.text_vocab),
    }
}

/// Concatenates `[B, C, H, W]` tensors along channels (condition first).
pub fn concat_channels<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape {
            op: "concat_channels",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let plane = sa[2] * sa[3];
    let (ca, cb) = (sa[1] * plane, sb[1] * plane);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..sa[0] {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data)
}

/// Sampler settings for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
}

/// Predicts dense maps for a batch of RGB conditions `[3, H, W]` in
/// `[-1, 1]`. Sample `i` starts from noise drawn from `seeds[i]`.
pub fn run_inference_batch(
    merge: &MergeModel,
    rgbs: &[Tensor],
    mode: TaskMode,
    sampler: SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    if mode == TaskMode::Generate {
        return Err(Error::Mode("use the generation entry point for generate mode".into()));
    }
    if rgbs.len() != seeds.len() {
        return Err(invalid("one seed per condition image is required"));
    }
    if rgbs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = merge.backbone_config();
    let shape = [cfg.channels, cfg.image_size, cfg.image_size];
    for r in rgbs {
        if r.shape() != shape {
            return Err(Error::Shape {
                op: "run_inference",
                lhs: shape.to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
    }
    let cond = Tensor::stack(rgbs)?;
    let noise: Vec<Tensor> = seeds.iter().map(|&s| Rng::new(s).normal_tensor(&shape)).collect();
    let z = Tensor::stack(&noise)?;
    let text = vec![prompt_context(merge.config.task.prompt, cfg)?; rgbs.len()];
    let sched = merge.config.schedule.build()?;
    let mut model_fn = |zt: &Tensor, t| {
        let input = ModelInput {
            z: concat_channels(&cond, zt)?,
            times: vec![t; rgbs.len()],
            text: text.clone(),
        };
        merge.predict(&input, mode)
    };
    let out = sample_from(&mut model_fn, &sched, merge.config.schedule.objective, sampler.steps, z)?;
    (0..rgbs.len())
        .map(|i| decode_prediction(mode, &out.index0(i)))
        .collect()
}

/// Text-to-image sampling in generate mode: image `i` is drawn from noise
/// seeded by `seeds[i]` and conditioned on `prompts[i]`. Converters are
/// never run.
pub fn generate_images(
    merge: &MergeModel,
    prompts: &[TextContext],
    sampler: SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    if prompts.len() != seeds.len() {
        return Err(invalid("one seed per prompt is required"));
    }
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = merge.backbone_config();
    let shape = [cfg.channels, cfg.image_size, cfg.image_size];
    let noise: Vec<Tensor> = seeds.iter().map(|&s| Rng::new(s).normal_tensor(&shape)).collect();
    let sched = merge.config.schedule.build()?;
    let mut model_fn = |zt: &Tensor, t| {
        let input = ModelInput {
            z: zt.clone(),
            times: vec![t; prompts.len()],
            text: prompts.to_vec(),
        };
        merge.predict(&input, TaskMode::Generate)
    };
    let out = sample_from(
        &mut model_fn,
        &sched,
        merge.config.schedule.objective,
        sampler.steps,
        Tensor::stack(&noise)?,
    )?;
    Ok((0..prompts.len()).map(|i| out.index0(i)).collect())
}

/// Single-image [`run_inference_batch`].
pub fn run_inference(
    merge: &MergeModel,
    rgb: &Tensor,
    mode: TaskMode,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    Ok(run_inference_batch(merge, std::slice::from_ref(rgb), mode, sampler, &[seed])?.remove(0))
}

/// Least-squares scale and shift mapping `pred` onto `gt` over the mask.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
    pub aligned: Tensor,
}

pub fn align_affine(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<Alignment> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "align_affine",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    check_mask(pred.len(), mask)?;
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p as f64, g as f64))
        .collect();
    if pairs.len() < 2 {
        return Err(invalid("alignment needs at least two valid pixels"));
    }
    let n = pairs.len() as f64;
    let (mp, mg) = pairs.iter().fold((0.0, 0.0), |(a, b), &(p, g)| (a + p / n, b + g / n));
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(p, g) in &pairs {
        sxx += (p - mp) * (p - mp);
        sxy += (p - mp) * (g - mg);
    }
    let spread = pairs.iter().map(|&(p, _)| (p - mp).abs()).fold(0.0, f64::max);
    if !(spread > 1e-9 * (1.0 + mp.abs())) {
        return Err(invalid("prediction is constant over the mask"));
    }
    let scale = sxy / sxx;
    let shift = mg - scale * mp;
    let aligned = pred.map(|v| (scale * v as f64 + shift) as f32);
    Ok(Alignment { scale, shift, aligned })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_percentiles() {
        let ramp: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        assert!((percentile(&ramp, 2.0) - 0.02).abs() < 1e-12);
        assert!((percentile(&ramp, 98.0) - 0.98).abs() < 1e-12);
        let t = Tensor::new(vec![1, 101], ramp.iter().map(|&v| v as f32).collect()).unwrap();
        let n = normalize_depth(&t, &[true; 101]).unwrap();
        assert!(n.data()[50].abs() < 1e-6);
        assert_eq!(n.data()[0], -1.0);
        assert_eq!(n.data()[100], 1.0);
    }

    #[test]
    fn constant_depth_rejected() {
        let t = Tensor::full(&[4, 4], 3.0);
        assert!(normalize_depth(&t, &[true; 16]).is_err());
    }

    #[test]
    fn invalid_pixels_zeroed() {
        let t = Tensor::from_fn(&[2, 4], |i| i as f32 + 1.0);
        let mut mask = [true; 8];
        mask[3] = false;
        assert_eq!(normalize_depth(&t, &mask).unwrap().data()[3], 0.0);
    }

    #[test]
    fn depth_replicated() {
        let m = Tensor::from_fn(&[2, 2], |i| i as f32 * 0.1);
        let e = encode_target(TaskMode::Depth, &m).unwrap();
        assert_eq!(e.shape(), &[3, 2, 2]);
        for c in 0..3 {
            assert_eq!(&e.data()[c * 4..c * 4 + 4], m.data());
        }
        assert_eq!(decode_prediction(TaskMode::Depth, &e).unwrap(), m);
    }

    #[test]
    fn normal_codec() {
        let up = Tensor::from_fn(&[3, 2, 2], |i| if i >= 8 { 1.0 } else { 0.0 });
        assert_eq!(encode_target(TaskMode::Normal, &up).unwrap(), up);
        assert_eq!(decode_prediction(TaskMode::Normal, &up).unwrap(), up);
        let bad = Tensor::full(&[3, 1, 1], 1.0);
        assert!(encode_target(TaskMode::Normal, &bad).is_err());
    }

    #[test]
    fn decode_examples() {
        let y = Tensor::new(vec![3, 1, 1], vec![0.1, 0.2, 0.3]).unwrap();
        assert!((decode_prediction(TaskMode::Depth, &y).unwrap().data()[0] - 0.2).abs() < 1e-7);
        let y = Tensor::new(vec![3, 1, 1], vec![2.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            decode_prediction(TaskMode::Normal, &y).unwrap().data(),
            &[1.0, 0.0, 0.0]
        );
        let y = Tensor::zeros(&[3, 1, 1]);
        assert_eq!(
            decode_prediction(TaskMode::Normal, &y).unwrap().data(),
            &[0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn affine_inverse() {
        let gt = Tensor::from_fn(&[3, 3], |i| (i as f32 * 0.37).sin());
        let pred = gt.map(|v| 2.0 * v + 3.0);
        let a = align_affine(&pred, &gt, &[true; 9]).unwrap();
        assert!((a.scale - 0.5).abs() < 1e-6);
        assert!((a.shift + 1.5).abs() < 1e-6);
        let same = align_affine(&gt, &gt, &[true; 9]).unwrap();
        assert!((same.scale - 1.0).abs() < 1e-9 && same.shift.abs() < 1e-9);
        assert!(align_affine(&Tensor::full(&[3, 3], 1.0), &gt, &[true; 9]).is_err());
    }

    #[test]
    fn channel_concat_order() {
        let a = Tensor::full(&[2, 1, 1, 2], 1.0);
        let b = Tensor::full(&[2, 2, 1, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(c.data(), &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn mode_parse() {
        assert_eq!("normal".parse::<TaskMode>().unwrap(), TaskMode::Normal);
        assert!("x".parse::<TaskMode>().is_err());
    }
}
