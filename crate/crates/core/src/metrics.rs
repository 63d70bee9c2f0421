//! Depth and normal metrics, and the block-similarity diagnostic.

use serde::Serialize;

use crate::backbone::ModelInput;
use crate::converters::MergeModel;
use crate::error::{invalid, Error, Result};
use crate::numerics::{cosine_similarity, Graph, Tensor};
use crate::scenes::{make_split, Role, SceneParams};
use crate::tasks::{align_affine, normalize_depth, run_inference_batch, SamplerConfig, TaskMode};

fn masked_pairs<'a>(pred: &'a Tensor, gt: &'a Tensor, mask: &'a [bool]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape {
            op: "metric",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let pairs: Vec<_> = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p as f64, g as f64))
        .collect();
    if pairs.is_empty() {
        return Err(invalid("metric over an empty mask"));
    }
    Ok(pairs)
}

/// Mean of `|pred - gt| / gt` over the mask.
pub fn abs_rel(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<f64> {
    let pairs = masked_pairs(pred, gt, mask)?;
    Ok(pairs.iter().map(|&(p, g)| (p - g).abs() / g).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of masked pixels with `max(pred/gt, gt/pred) < threshold`.
pub fn delta1(pred: &Tensor, gt: &Tensor, mask: &[bool], threshold: f64) -> Result<f64> {
    let pairs = masked_pairs(pred, gt, mask)?;
    let hits = pairs.iter().filter(|&&(p, g)| (p / g).max(g / p) < threshold).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Maps a normalized `[-1, 1]` map into `[0.5, 1.5]`.
pub fn to_positive(t: &Tensor) -> Tensor {
    t.map(|v| ((v as f64 + 1.0) / 2.0 + 0.5) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
}

/// Aligns a normalized prediction to normalized ground truth, shifts both
/// into a positive range and scores them.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<DepthMetrics> {
    let aligned = align_affine(pred, gt, mask)?.aligned;
    let (p, g) = (to_positive(&aligned), to_positive(gt));
    Ok(DepthMetrics {
        abs_rel: abs_rel(&p, &g, mask)?,
        delta1: delta1(&p, &g, mask, 1.25)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormalMetrics {
    pub mean_angle_deg: f64,
    pub below_11_25: f64,
}

/// Mean angular error in degrees and the fraction strictly below 11.25°
/// for `[3, H, W]` unit normals.
pub fn normal_metrics(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<NormalMetrics> {
    let s = gt.shape();
    if pred.shape() != s || s.len() != 3 || s[0] != 3 || mask.len() != s[1] * s[2] {
        return Err(Error::Shape {
            op: "normal_metrics",
            lhs: pred.shape().to_vec(),
            rhs: s.to_vec(),
        });
    }
    let n = s[1] * s[2];
    let (p, g) = (pred.data(), gt.data());
    let angles: Vec<f64> = (0..n)
        .filter(|&i| mask[i])
        .map(|i| {
            let dot: f64 = (0..3).map(|c| p[c * n + i] as f64 * g[c * n + i] as f64).sum();
            dot.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();
    if angles.is_empty() {
        return Err(invalid("metric over an empty mask"));
    }
    let count = angles.len() as f64;
    Ok(NormalMetrics {
        mean_angle_deg: angles.iter().sum::<f64>() / count,
        below_11_25: angles.iter().filter(|&&a| a < 11.25).count() as f64 / count,
    })
}

/// `[L, L]` matrix of batch-mean cosine similarities between the outputs of
/// every pair of backbone blocks in a generate-mode pass.
pub fn block_similarity_matrix(model: &MergeModel, input: &ModelInput) -> Result<Tensor<f64>> {
    let mut g = Graph::no_grad(&model.store);
    let out = model.forward(&mut g, input, TaskMode::Generate, true)?;
    let depth = out.block_outputs.len();
    let batch = input.times.len();
    let per_sample: Vec<Vec<Tensor>> = out
        .block_outputs
        .iter()
        .map(|&v| (0..batch).map(|b| g.value(v).index0(b)).collect())
        .collect();
    let mut m = Tensor::<f64>::zeros(&[depth, depth]);
    for i in 0..depth {
        for j in i..depth {
            let mut acc = 0.0;
            for b in 0..batch {
                acc += cosine_similarity(&per_sample[i][b], &per_sample[j][b])?;
            }
            let v = if i == j { 1.0 } else { acc / batch as f64 };
            m.data_mut()[i * depth + j] = v;
            m.data_mut()[j * depth + i] = v;
        }
    }
    Ok(m)
}

/// Mean similarity of block pairs at distance 1 and at distance `>= L/2`.
pub fn similarity_by_distance(m: &Tensor<f64>) -> (f64, f64) {
    let l = m.shape()[0];
    let (mut near, mut nn, mut far, mut nf) = (0.0, 0, 0.0, 0);
    for i in 0..l {
        for j in 0..l {
            let d = i.abs_diff(j);
            if d == 1 {
                near += m.data()[i * l + j];
                nn += 1;
            } else if d >= (l / 2).max(1) && d > 0 {
                far += m.data()[i * l + j];
                nf += 1;
            }
        }
    }
    (near / nn.max(1) as f64, far / nf.max(1) as f64)
}

/// Scores of one evaluated scene; fields absent for the other task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TaskScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_rel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub below_11_25: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScores {
    pub scene_seed: u64,
    pub noise_seed: u64,
    #[serde(flatten)]
    pub scores: TaskScores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: TaskMode,
    pub steps: usize,
    pub seed: u64,
    pub per_sample: Vec<SampleScores>,
    pub aggregate: TaskScores,
}

const EVAL_CHUNK: usize = 32;

/// Runs inference on the first `count` held-out scenes and scores each.
/// Scene `i` starts from noise seed `seed + i`.
pub fn evaluate_task(model: &MergeModel, mode: TaskMode, count: usize, seed: u64, steps: usize) -> Result<EvalReport> {
    let cfg = model.backbone_config();
    let params = SceneParams::new(cfg.image_size);
    let scenes = make_split(Role::TaskTest, count, &params, cfg.text_len)?.collect::<Result<Vec<_>>>()?;
    let mut per_sample = Vec::with_capacity(count);
    for (c, chunk) in scenes.chunks(EVAL_CHUNK).enumerate() {
        let rgbs: Vec<Tensor> = chunk.iter().map(|s| s.rgb.clone()).collect();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| seed.wrapping_add((c * EVAL_CHUNK + i) as u64))
            .collect();
        let preds = run_inference_batch(model, &rgbs, mode, SamplerConfig { steps }, &seeds)?;
        for ((scene, pred), &noise_seed) in chunk.iter().zip(&preds).zip(&seeds) {
            let scores = match mode {
                TaskMode::Depth => {
                    let gt = normalize_depth(&scene.depth, &scene.mask)?;
                    let m = depth_metrics(pred, &gt, &scene.mask)?;
                    TaskScores {
                        abs_rel: Some(m.abs_rel),
                        delta1: Some(m.delta1),
                        ..Default::default()
                    }
                }
                TaskMode::Normal => {
                    let m = normal_metrics(pred, &scene.normal, &scene.mask)?;
                    TaskScores {
                        mean_angle_deg: Some(m.mean_angle_deg),
                        below_11_25: Some(m.below_11_25),
                        ..Default::default()
                    }
                }
                TaskMode::Generate => return Err(Error::Mode("generate mode has no task metrics".into())),
            };
            per_sample.push(SampleScores {
                scene_seed: scene.seed,
                noise_seed,
                scores,
            });
        }
    }
    let mean = |f: fn(&TaskScores) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = per_sample.iter().filter_map(|s| f(&s.scores)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let aggregate = TaskScores {
        abs_rel: mean(|s| s.abs_rel),
        delta1: mean(|s| s.delta1),
        mean_angle_deg: mean(|s| s.mean_angle_deg),
        below_11_25: mean(|s| s.below_11_25),
    };
    Ok(EvalReport {
        mode,
        steps,
        seed,
        per_sample,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn abs_rel_examples() {
        let gt = t(&[1.0, 2.0, 4.0]);
        assert_eq!(abs_rel(&gt, &gt, &[true; 3]).unwrap(), 0.0);
        let p = t(&[1.1, 2.2, 4.4]);
        assert!((abs_rel(&p, &gt, &[true; 3]).unwrap() - 0.1).abs() < 1e-6);
        assert!(abs_rel(&p, &gt, &[false; 3]).is_err());
    }

    #[test]
    fn delta_examples() {
        let gt = t(&[1.0, 2.0]);
        assert_eq!(delta1(&gt, &gt, &[true; 2], 1.25).unwrap(), 1.0);
        assert_eq!(delta1(&t(&[1.0]), &t(&[1.3]), &[true], 1.25).unwrap(), 0.0);
        assert_eq!(delta1(&t(&[1.0]), &t(&[1.25]), &[true], 1.25).unwrap(), 0.0);
    }

    #[test]
    fn normal_examples() {
        let up = Tensor::new(vec![3, 1, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let side = Tensor::new(vec![3, 1, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = normal_metrics(&up, &up, &[true; 2]).unwrap();
        assert_eq!((m.mean_angle_deg, m.below_11_25), (0.0, 1.0));
        let m = normal_metrics(&side, &up, &[true; 2]).unwrap();
        assert!((m.mean_angle_deg - 90.0).abs() < 1e-9);
        assert_eq!(m.below_11_25, 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        // use an angle just past 11.25 in f32 to avoid representational luck
        let a = 11.25f64.to_radians();
        let tilt = Tensor::new(vec![3, 1, 1], vec![a.sin() as f32, 0.0, a.cos() as f32]).unwrap();
        let up = Tensor::new(vec![3, 1, 1], vec![0.0, 0.0, 1.0]).unwrap();
        let m = normal_metrics(&tilt, &up, &[true]).unwrap();
        assert!((m.mean_angle_deg - 11.25).abs() < 1e-5);
        let strictly_below = m.mean_angle_deg < 11.25;
        assert_eq!(m.below_11_25, if strictly_below { 1.0 } else { 0.0 });
    }

    #[test]
    fn positive_map() {
        assert_eq!(to_positive(&t(&[-1.0, 0.0, 1.0])).data(), &[0.5, 1.0, 1.5]);
    }
}
