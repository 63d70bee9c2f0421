//! Forward noising, training targets and deterministic samplers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Real, Rng, Tensor};

/// Training objective of the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Regress the injected noise; discrete `t` in `[0, T)`.
    #[default]
    EpsilonPrediction,
    /// Regress the velocity `eps - z0` along the straight noise/data path;
    /// continuous `t` in `[0, 1]`.
    FlowMatching,
}

/// A diffusion time value in the objective's own domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Timestep {
    Discrete(usize),
    Continuous(f64),
}

impl Timestep {
    /// Scalar fed to the sinusoidal time embedding. Continuous times are
    /// stretched to `[0, 1000]` so both objectives use similar frequencies.
    pub fn embedding_value(self) -> f64 {
        match self {
            Timestep::Discrete(t) => t as f64,
            Timestep::Continuous(t) => t * 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f32>,
    alpha: Vec<f32>,
    alpha_bar: Vec<f32>,
}

/// Linear beta ramp from `beta_min` to `beta_max` inclusive over `timesteps` steps.
pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if timesteps < 2 {
        return Err(invalid(format!("schedule needs at least 2 steps, got {timesteps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let mut beta = Vec::with_capacity(timesteps);
    let mut alpha = Vec::with_capacity(timesteps);
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0f64;
    for t in 0..timesteps {
        let b = beta_min + (beta_max - beta_min) * t as f64 / (timesteps - 1) as f64;
        prod *= 1.0 - b;
        beta.push(b as f32);
        alpha.push((1.0 - b) as f32);
        alpha_bar.push(prod as f32);
    }
    let decreasing = alpha_bar.windows(2).all(|w| w[1] < w[0]);
    if !(decreasing && alpha_bar[0] < 1.0 && alpha_bar[timesteps - 1] > 0.0) {
        return Err(invalid(format!(
            "beta range ({beta_min}, {beta_max}) over {timesteps} steps leaves alpha_bar unrepresentable in f32"
        )));
    }
    Ok(DiffusionSchedule { beta, alpha, alpha_bar })
}

impl DiffusionSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f32] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(invalid(format!("timestep {t} outside [0, {})", self.timesteps())));
        }
        Ok(())
    }

    /// Evenly spaced descending sub-grid used by the DDIM sampler; always
    /// starts at `T - 1` and, for two or more steps, ends at 0.
    pub fn ddim_grid(&self, steps: usize) -> Result<Vec<usize>> {
        let last = self.timesteps() - 1;
        if steps == 0 || steps > self.timesteps() {
            return Err(invalid(format!(
                "sample steps {steps} outside [1, {}]",
                self.timesteps()
            )));
        }
        if steps == 1 {
            return Ok(vec![last]);
        }
        Ok((0..steps)
            .rev()
            .map(|k| ((k * last) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Closed-form marginal `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse<F: Real>(
    sched: &DiffusionSchedule,
    z0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    same_shape("forward_diffuse", z0, eps)?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t] as f64;
    let (a, b) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    let data = z0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// One step of the Markov chain: `sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) noise`.
pub fn markov_step<F: Real>(
    sched: &DiffusionSchedule,
    z_prev: &Tensor<F>,
    t: usize,
    noise: &Tensor<F>,
) -> Result<Tensor<F>> {
    same_shape("markov_step", z_prev, noise)?;
    sched.check_t(t)?;
    let al = sched.alpha[t] as f64;
    let (a, b) = (F::lit(al.sqrt()), F::lit((1.0 - al).sqrt()));
    let data = z_prev
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(z_prev.shape().to_vec(), data)
}

/// `(model_input, target)` for one training example.
pub fn training_pair<F: Real>(
    sched: &DiffusionSchedule,
    objective: Objective,
    z0: &Tensor<F>,
    eps: &Tensor<F>,
    t: Timestep,
) -> Result<(Tensor<F>, Tensor<F>)> {
    same_shape("training_pair", z0, eps)?;
    match (objective, t) {
        (Objective::EpsilonPrediction, Timestep::Discrete(t)) => Ok((forward_diffuse(sched, z0, t, eps)?, eps.clone())),
        (Objective::FlowMatching, Timestep::Continuous(t)) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("flow-matching time {t} outside [0, 1]")));
            }
            let (keep, mix) = (F::lit(1.0 - t), F::lit(t));
            let zt = z0
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&x, &e)| keep * x + mix * e)
                .collect();
            let v = z0.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
            Ok((
                Tensor::new(z0.shape().to_vec(), zt)?,
                Tensor::new(z0.shape().to_vec(), v)?,
            ))
        }
        (o, t) => Err(invalid(format!("timestep {t:?} does not match objective {o:?}"))),
    }
}

/// Draws a training time for `objective`: uniform over `[0, T)` or `(0, 1)`.
pub fn sample_timestep(sched: &DiffusionSchedule, objective: Objective, rng: &mut Rng) -> Timestep {
    match objective {
        Objective::EpsilonPrediction => Timestep::Discrete(rng.below(sched.timesteps() as u64) as usize),
        Objective::FlowMatching => {
            // open interval: reject an exact 0
            let mut t = rng.uniform();
            while t == 0.0 {
                t = rng.uniform();
            }
            Timestep::Continuous(t)
        }
    }
}

/// Deterministic reverse process.
///
/// `model_fn(z_t, t)` returns the objective's prediction for the whole
/// batch `z_t`. The starting noise is drawn from `seed`. Epsilon prediction
/// runs DDIM (eta = 0) over [`DiffusionSchedule::ddim_grid`] and returns the
/// final clean estimate; flow matching integrates `dz/dt = v` backwards from
/// `t = 1` to `t = 0` with `steps` explicit Euler steps.
pub fn sample<M>(
    mut model_fn: M,
    sched: &DiffusionSchedule,
    objective: Objective,
    steps: usize,
    seed: u64,
    shape: &[usize],
) -> Result<Tensor>
where
    M: FnMut(&Tensor, Timestep) -> Result<Tensor>,
{
    let z = Rng::new(seed).normal_tensor::<f32>(shape);
    sample_from(&mut model_fn, sched, objective, steps, z)
}

/// [`sample`] starting from an explicit `z_T`.
pub fn sample_from<M>(
    model_fn: &mut M,
    sched: &DiffusionSchedule,
    objective: Objective,
    steps: usize,
    mut z: Tensor,
) -> Result<Tensor>
where
    M: FnMut(&Tensor, Timestep) -> Result<Tensor>,
{
    let check = |pred: &Tensor, z: &Tensor| same_shape("sample", z, pred);
    match objective {
        Objective::EpsilonPrediction => {
            let grid = sched.ddim_grid(steps)?;
            for (i, &t) in grid.iter().enumerate() {
                let eps = model_fn(&z, Timestep::Discrete(t))?;
                check(&eps, &z)?;
                let ab = sched.alpha_bar[t] as f64;
                let ab_prev = grid.get(i + 1).map_or(1.0, |&p| sched.alpha_bar[p] as f64);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for (zv, &e) in z.data_mut().iter_mut().zip(eps.data()) {
                    let (zc, ec) = (*zv as f64, e as f64);
                    let x0 = (zc - sb * ec) / sa;
                    *zv = (pa * x0 + pb * ec) as f32;
                }
            }
        }
        Objective::FlowMatching => {
            if steps == 0 {
                return Err(invalid("flow-matching sampler needs at least one step"));
            }
            let h = 1.0 / steps as f64;
            for k in 0..steps {
                let t = 1.0 - k as f64 * h;
                let v = model_fn(&z, Timestep::Continuous(t))?;
                check(&v, &z)?;
                for (zv, &vv) in z.data_mut().iter_mut().zip(v.data()) {
                    *zv = (*zv as f64 - h * vv as f64) as f32;
                }
            }
        }
    }
    Ok(z)
}
