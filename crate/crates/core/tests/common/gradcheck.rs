//! Finite-difference gradient checks shared by the unit suite and the
//! acceptance harness.

use plugdit::backbone::ModelInput;
use plugdit::converters::MergeModel;
use plugdit::numerics::{
    finite_difference_grad, forward_backward, max_relative_error, Graph, ParamStore, Rng, Tensor, Var,
};
use plugdit::tasks::TaskMode;
use plugdit::Result;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const FULL_LOSS_TOL: f64 = 1e-3;
pub const STEP: f64 = 1e-6;
/// Through a whole model the loss carries ~1e-14 rounding, which a 1e-6
/// step turns into ~1e-8 noise on gradients that can be ~1e-7 small.
pub const FULL_LOSS_STEP: f64 = 1e-5;

/// Fixed, non-uniform weights so every output element matters differently.
fn weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.37 + 0.1).sin() + 0.2)
}

fn weighted_sum(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    let w = g.constant(weights(g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error over every parameter of `store`.
pub fn check<B>(store: &ParamStore<f64>, build: B) -> f64
where
    B: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let (_, grads) = forward_backward(store, |g| {
        let y = build(g)?;
        weighted_sum(g, y)
    })
    .unwrap();
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad(s);
        let y = build(&mut g)?;
        let l = weighted_sum(&mut g, y)?;
        Ok(g.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for name in store.names() {
        let fd = finite_difference_grad(store, loss, name, STEP).unwrap();
        let an = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(fd.shape()));
        worst = worst.max(max_relative_error(&an, &fd, 1e-6));
    }
    worst
}

pub fn store(params: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    for (name, shape) in params {
        s.insert(*name, rng.normal_tensor(shape), true).unwrap();
    }
    s
}

type Build = Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>;

/// One primitive under test: parameter shapes and the graph using them.
pub struct Case {
    pub name: &'static str,
    pub params: Vec<(&'static str, Vec<usize>)>,
    pub build: Build,
}

impl Case {
    /// Worst relative error over three random parameter draws.
    pub fn error(&self) -> f64 {
        let params: Vec<(&str, &[usize])> = self.params.iter().map(|(n, s)| (*n, s.as_slice())).collect();
        (0..3)
            .map(|seed| check(&store(&params, seed), &self.build))
            .fold(0.0, f64::max)
    }
}

fn case<B>(cases: &mut Vec<Case>, name: &'static str, params: &[(&'static str, &[usize])], build: B)
where
    B: Fn(&mut Graph<'_, f64>) -> Result<Var> + 'static,
{
    cases.push(Case {
        name,
        params: params.iter().map(|(n, s)| (*n, s.to_vec())).collect(),
        build: Box::new(build),
    });
}

/// Every differentiable primitive, each on a small non-trivial shape.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    case(&mut cases, "add", &[("a", &[3, 4]), ("b", &[4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.add(a, b)
    });
    case(&mut cases, "sub", &[("a", &[2, 1, 4]), ("b", &[2, 3, 1])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.sub(a, b)
    });

    case(&mut cases, "mul same", &[("a", &[3, 4]), ("b", &[3, 4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.mul(a, b)
    });
    case(&mut cases, "mul bcast", &[("a", &[2, 3, 4]), ("b", &[2, 1, 4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.mul(a, b)
    });

    case(&mut cases, "scale", &[("a", &[5])], |g| {
        let a = g.param("a")?;
        let s = g.scale(a, -1.7);
        Ok(g.add_scalar(s, 0.3))
    });

    case(&mut cases, "matmul", &[("a", &[2, 3, 4]), ("w", &[4, 5])], |g| {
        let (a, w) = (g.param("a")?, g.param("w")?);
        g.matmul(a, w)
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        case(&mut cases, "bmm", &[("a", sa), ("b", sb)], move |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.bmm(a, b, ta, tb)
        });
    }

    case(&mut cases, "reshape", &[("a", &[2, 6])], |g| {
        let a = g.param("a")?;
        g.reshape(a, &[3, 4])
    });
    case(&mut cases, "permute", &[("a", &[2, 3, 4])], |g| {
        let a = g.param("a")?;
        g.permute(a, &[2, 0, 1])
    });
    case(&mut cases, "transpose", &[("a", &[3, 5])], |g| {
        let a = g.param("a")?;
        g.transpose(a)
    });

    case(&mut cases, "softmax", &[("a", &[3, 5])], |g| {
        let a = g.param("a")?;
        g.softmax(a)
    });

    case(&mut cases, "gelu", &[("a", &[12])], |g| {
        let a = g.param("a")?;
        Ok(g.gelu(a))
    });
    case(&mut cases, "silu", &[("a", &[12])], |g| {
        let a = g.param("a")?;
        Ok(g.silu(a))
    });

    case(&mut cases, "layer_norm", &[("a", &[3, 6])], |g| {
        let a = g.param("a")?;
        g.layer_norm(a, 1e-6)
    });

    case(&mut cases, "concat", &[("a", &[2, 3]), ("b", &[2, 2])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.concat(&[a, b], 1)
    });
    case(&mut cases, "split", &[("a", &[4, 5])], |g| {
        let a = g.param("a")?;
        let parts = g.split(a, 1, &[2, 3])?;
        let (x, y) = (parts[0], parts[1]);
        let x = g.scale(x, 2.0);
        let y = g.sum(y);
        let x = g.sum(x);
        let s = g.mul(x, y)?;
        Ok(s)
    });
    case(&mut cases, "slice", &[("a", &[3, 4])], |g| {
        let a = g.param("a")?;
        g.slice(a, 0, 1, 2)
    });

    case(&mut cases, "sum", &[("a", &[3, 4])], |g| {
        let a = g.param("a")?;
        let s = g.sum(a);
        g.mul(s, s)
    });
    case(&mut cases, "mean", &[("a", &[3, 4])], |g| {
        let a = g.param("a")?;
        let m = g.mean(a);
        g.mul(m, m)
    });
    case(&mut cases, "mse", &[("a", &[3, 4]), ("b", &[3, 4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.mse(a, b)
    });

    case(&mut cases, "gather", &[("t", &[5, 3])], |g| {
        let t = g.param("t")?;
        g.gather(t, &[4, 0, 4, 2])
    });

    cases
}

/// A three-layer GELU/SiLU perceptron.
pub fn mlp_error(seed: u64) -> f64 {
    let params: &[(&str, &[usize])] = &[
        ("w1", &[5, 5]),
        ("b1", &[5]),
        ("w2", &[5, 5]),
        ("b2", &[5]),
        ("w3", &[5, 1]),
    ];
    let x = Rng::new(77).normal_tensor::<f64>(&[4, 5]);
    check(&store(params, seed), |g| {
        let x = g.constant(x.clone());
        let (w1, b1) = (g.param("w1")?, g.param("b1")?);
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param("w2")?, g.param("b2")?);
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        let h = g.silu(h);
        let w3 = g.param("w3")?;
        g.matmul(h, w3)
    })
}

/// Model weights with every gate opened so that no gradient is
/// structurally zero.
pub fn perturbed(model: &MergeModel, seed: u64) -> ParamStore<f64> {
    let mut s = model.store.cast::<f64>();
    let mut rng = Rng::new(seed);
    for (_, p) in s.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    s
}

fn loss_fn<'a>(
    model: &'a MergeModel,
    input: &'a ModelInput<f64>,
    target: &'a Tensor<f64>,
    mode: TaskMode,
) -> impl Fn(&mut Graph<'_, f64>) -> Result<Var> + 'a {
    move |g| {
        let out = model.forward(g, input, mode, false)?;
        let t = g.constant(target.clone());
        g.mse(out.prediction, t)
    }
}

/// Worst relative error of the denoising loss gradient over `names`.
pub fn full_loss_error(model: &MergeModel, store: &ParamStore<f64>, mode: TaskMode, names: &[String]) -> f64 {
    let cfg = model.backbone_config();
    let channels = if mode == TaskMode::Generate { 3 } else { 6 };
    let input = super::to_f64(&super::random_input(cfg, 1, channels, 5));
    let target = Rng::new(6).normal_tensor::<f64>(&[1, 3, cfg.image_size, cfg.image_size]);
    let build = loss_fn(model, &input, &target, mode);
    let (_, grads) = forward_backward(store, &build).unwrap();
    let scalar = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad(s);
        let l = build(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for name in names {
        let fd = finite_difference_grad(store, scalar, name, FULL_LOSS_STEP).unwrap();
        worst = worst.max(max_relative_error(&grads[name], &fd, 1e-6));
    }
    worst
}
