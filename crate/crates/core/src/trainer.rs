//! Optimization loops: backbone pretraining, converter training on a frozen
//! backbone, and the full fine-tune baseline.
//!
//! Training data is generated on the fly: iteration `i` draws its scenes,
//! noise and times from `Rng::new(seed).split(i)`, so a run is a pure
//! function of its config.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::backbone::{ModelInput, TextContext};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::converters::MergeModel;
use crate::error::{invalid, Error, Result};
use crate::numerics::{forward_backward, ParamStore, Rng, Tensor};
use crate::scenes::{generate_scene, Role, SceneParams, SceneSample};
use crate::schedule::{sample_timestep, training_pair, DiffusionSchedule};
use crate::tasks::{concat_channels, encode_target, normalize_depth, prompt_context, TaskMode};

/// Probability of replacing a pretraining caption with the empty prompt.
pub const NULL_PROMPT_RATE: f64 = 0.1;

/// Window over which [`TrainOutcome::final_loss`] averages.
pub const FINAL_LOSS_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_train(tc: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of the parameters named in `grads`.
///
/// A gradient for a frozen parameter is a [`Error::FreezeViolation`]; a
/// gradient for an unknown name is [`Error::UnknownParam`]. Nothing is
/// modified when either occurs.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if !p.trainable {
            return Err(Error::FreezeViolation(name.clone()));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let w = store.tensor_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (wi, &gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *wi = (*wi as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// Per-iteration losses of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    fn window_mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean of the last [`FINAL_LOSS_WINDOW`] losses (or all, if fewer).
    pub fn final_loss(&self) -> f64 {
        let k = self.losses.len().min(FINAL_LOSS_WINDOW);
        Self::window_mean(&self.losses[self.losses.len() - k..])
    }

    /// Mean of the first `k` losses.
    pub fn initial_loss(&self, k: usize) -> f64 {
        Self::window_mean(&self.losses[..k.min(self.losses.len())])
    }
}

/// A batch of denoiser inputs with its regression target.
pub struct Batch {
    pub input: ModelInput,
    pub target: Tensor,
}

struct Draw {
    scenes: Vec<SceneSample>,
    noise: Vec<Tensor>,
    times: Vec<crate::schedule::Timestep>,
    null_prompt: Vec<bool>,
}

fn draw(cfg: &ExperimentConfig, sched: &DiffusionSchedule, role: Role, rng: &mut Rng, batch: usize) -> Result<Draw> {
    let b = &cfg.backbone;
    let params = SceneParams::new(b.image_size);
    let shape = [b.channels, b.image_size, b.image_size];
    let mut d = Draw {
        scenes: Vec::with_capacity(batch),
        noise: Vec::with_capacity(batch),
        times: Vec::with_capacity(batch),
        null_prompt: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let seed = role.draw(rng);
        d.scenes.push(generate_scene(seed, &params, b.text_len)?);
        d.noise.push(rng.normal_tensor(&shape));
        d.times.push(sample_timestep(sched, cfg.schedule.objective, rng));
        d.null_prompt.push(rng.uniform() < NULL_PROMPT_RATE);
    }
    Ok(d)
}

/// Text-to-image batch: the scene RGB is the clean sample, its descriptor
/// tokens the caption.
pub fn pretrain_batch(cfg: &ExperimentConfig, sched: &DiffusionSchedule, rng: &mut Rng, batch: usize) -> Result<Batch> {
    let d = draw(cfg, sched, Role::Pretrain, rng, batch)?;
    let b = &cfg.backbone;
    let (mut zs, mut targets, mut text) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..batch {
        let (zt, target) = training_pair(sched, cfg.schedule.objective, &d.scenes[i].rgb, &d.noise[i], d.times[i])?;
        zs.push(zt);
        targets.push(target);
        text.push(if d.null_prompt[i] {
            TextContext::empty(b.text_len)
        } else {
            TextContext::new(&d.scenes[i].prompt, b.text_len, b.text_vocab)?
        });
    }
    Ok(Batch {
        input: ModelInput {
            z: Tensor::stack(&zs)?,
            times: d.times,
            text,
        },
        target: Tensor::stack(&targets)?,
    })
}

/// Encoded dense target of a scene in `[-1, 1]`.
pub fn scene_target(scene: &SceneSample, mode: TaskMode) -> Result<Tensor> {
    match mode {
        TaskMode::Depth => encode_target(mode, &normalize_depth(&scene.depth, &scene.mask)?),
        TaskMode::Normal => encode_target(mode, &scene.normal),
        TaskMode::Generate => Err(Error::Mode("generate mode has no dense target".into())),
    }
}

/// Dense-prediction batch: the encoded map is the clean sample and the
/// model sees it noised next to the RGB condition.
pub fn task_batch(
    cfg: &ExperimentConfig,
    sched: &DiffusionSchedule,
    mode: TaskMode,
    rng: &mut Rng,
    batch: usize,
) -> Result<Batch> {
    let d = draw(cfg, sched, Role::TaskTrain, rng, batch)?;
    let (mut rgbs, mut zs, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..batch {
        let clean = scene_target(&d.scenes[i], mode)?;
        let (zt, target) = training_pair(sched, cfg.schedule.objective, &clean, &d.noise[i], d.times[i])?;
        rgbs.push(d.scenes[i].rgb.clone());
        zs.push(zt);
        targets.push(target);
    }
    let text = vec![prompt_context(cfg.task.prompt, &cfg.backbone)?; batch];
    Ok(Batch {
        input: ModelInput {
            z: concat_channels(&Tensor::stack(&rgbs)?, &Tensor::stack(&zs)?)?,
            times: d.times,
            text,
        },
        target: Tensor::stack(&targets)?,
    })
}

fn run_loop(
    model: &mut MergeModel,
    mode: TaskMode,
    tc: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = model.config.clone();
    let sched = cfg.schedule.build()?;
    let adam = AdamConfig::from_train(tc, tc.lr(cfg.schedule.objective));
    let mut state = AdamState::default();
    let root = Rng::new(tc.seed);
    let start = Instant::now();
    let mut out = TrainOutcome::default();
    for it in 0..tc.iterations {
        let mut rng = root.split(it as u64);
        let batch = match mode {
            TaskMode::Generate => pretrain_batch(&cfg, &sched, &mut rng, tc.batch_size)?,
            _ => task_batch(&cfg, &sched, mode, &mut rng, tc.batch_size)?,
        };
        let (loss, mut grads) = forward_backward(&model.store, |g| {
            let fwd = model.forward(g, &batch.input, mode, false)?;
            let target = g.constant(batch.target.clone());
            g.mse(fwd.prediction, target)
        })?;
        let loss = loss as f64;
        if !loss.is_finite() || grads.values().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite { iteration: it });
        }
        if let Some(c) = tc.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut model.store, &grads, &mut state, &adam)?;
        out.losses.push(loss);
        let last = it + 1 == tc.iterations;
        if tc.log_every > 0 && (it % tc.log_every == 0 || last) {
            let rec = LogRecord {
                iteration: it,
                loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            log::info!("{mode} iteration {it}: loss {loss:.5}");
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
        }
    }
    Ok(out)
}

/// Trains every backbone weight on the text-to-image objective, then
/// freezes the backbone.
pub fn pretrain_t2i(model: &mut MergeModel, tc: &TrainConfig, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    if model.converters.is_some() || model.has_task_patch() {
        return Err(invalid("pretraining expects a bare backbone"));
    }
    model.store.set_trainable_prefix("backbone.", true);
    let out = run_loop(model, TaskMode::Generate, tc, log)?;
    model.store.set_trainable_prefix("backbone.", false);
    Ok(out)
}

/// Trains converters and the task patch embedding; the backbone digest is
/// checked unchanged on exit.
pub fn train_converters(
    model: &mut MergeModel,
    mode: TaskMode,
    tc: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if mode == TaskMode::Generate || model.converters.is_none() {
        return Err(Error::Mode(
            "converter training needs a task mode and attached converters".into(),
        ));
    }
    if let Some((name, _)) = model
        .store
        .iter()
        .find(|(n, p)| n.starts_with("backbone.") && p.trainable)
    {
        return Err(Error::FreezeViolation(name.clone()));
    }
    let before = backbone_digest(&model.store);
    let out = run_loop(model, mode, tc, log)?;
    let after = backbone_digest(&model.store);
    if before != after {
        return Err(Error::FreezeViolation(format!(
            "backbone digest {before} became {after}"
        )));
    }
    Ok(out)
}

/// Fine-tunes every weight (backbone included) on the dense task.
pub fn full_finetune(
    model: &mut MergeModel,
    mode: TaskMode,
    tc: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if mode == TaskMode::Generate || model.converters.is_some() || !model.has_task_patch() {
        return Err(Error::Mode(
            "full fine-tuning needs a task mode, a task patch and no converters".into(),
        ));
    }
    model.store.set_trainable_prefix("", true);
    run_loop(model, mode, tc, log)
}

/// SHA-256 over every `backbone.*` tensor.
pub fn backbone_digest(store: &ParamStore) -> String {
    store.digest(|n, _| n.starts_with("backbone."))
}
