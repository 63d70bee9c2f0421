//! Affine-invariant depth evaluation on a rendered scene: a prediction that
//! is right up to scale and shift scores perfectly, structural errors do not.

use plugdit::metrics::depth_metrics;
use plugdit::numerics::{Rng, Tensor};
use plugdit::scenes::{generate_scene, SceneParams};
use plugdit::tasks::{align_affine, normalize_depth};

fn main() -> anyhow::Result<()> {
    let scene = generate_scene(200_000, &SceneParams::new(32), 8)?;
    let gt = normalize_depth(&scene.depth, &scene.mask)?;
    let mut rng = Rng::new(1);

    let affine = gt.map(|v| -0.4 * v + 0.25);
    let noisy = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + 0.05 * rng.normal() as f32);
    let flipped = Tensor::from_fn(gt.shape(), |i| gt.data()[gt.len() - 1 - i]);

    for (name, pred) in [("affine copy", &affine), ("noisy", &noisy), ("mirrored", &flipped)] {
        let a = align_affine(pred, &gt, &scene.mask)?;
        let m = depth_metrics(pred, &gt, &scene.mask)?;
        println!(
            "{name:<12} scale {:+.3} shift {:+.3}  A.Rel {:.4}  delta1 {:.3}",
            a.scale, a.shift, m.abs_rel, m.delta1
        );
    }
    Ok(())
}
