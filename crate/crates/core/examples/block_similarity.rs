//! Cosine similarity between block outputs of a backbone, written as a
//! heatmap. Neighbouring blocks of a trained DiT tend to agree more than
//! distant ones, which is what group reuse exploits.
//!
//! ```text
//! cargo run --release --example block_similarity -- pretrained.mrge [heatmap.png]
//! ```

use std::path::PathBuf;

use plugdit::backbone::{ModelInput, TextContext};
use plugdit::checkpoint;
use plugdit::io::write_heatmap_png;
use plugdit::metrics::{block_similarity_matrix, similarity_by_distance};
use plugdit::numerics::{Rng, Tensor};
use plugdit::scenes::{make_split, Role, SceneParams};
use plugdit::schedule::{forward_diffuse, Timestep};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(
        args.next()
            .ok_or_else(|| anyhow::anyhow!("usage: block_similarity <model.mrge> [out.png]"))?,
    );
    let out = PathBuf::from(args.next().unwrap_or_else(|| "similarity.png".into()));
    let model = checkpoint::load(&ckpt)?.model;
    let bc = model.backbone_config().clone();
    let sched = model.config.schedule.build()?;
    let t = sched.timesteps() / 2;

    let mut rng = Rng::new(0);
    let (mut zs, mut text) = (Vec::new(), Vec::new());
    for scene in make_split(Role::TaskTest, 8, &SceneParams::new(bc.image_size), bc.text_len)? {
        let scene = scene?;
        let eps = rng.normal_tensor(scene.rgb.shape());
        zs.push(forward_diffuse(&sched, &scene.rgb, t, &eps)?);
        text.push(TextContext::new(&scene.prompt, bc.text_len, bc.text_vocab)?);
    }
    let n = zs.len();
    let input = ModelInput {
        z: Tensor::stack(&zs)?,
        times: vec![Timestep::Discrete(t); n],
        text,
    };
    let m = block_similarity_matrix(&model, &input)?;
    let l = m.shape()[0];
    for i in 0..l {
        let row: Vec<String> = (0..l).map(|j| format!("{:5.2}", m.data()[i * l + j])).collect();
        println!("{}", row.join(" "));
    }
    let (near, far) = similarity_by_distance(&m);
    println!("adjacent {near:.3}, distant {far:.3}");
    write_heatmap_png(&out, &m, -1.0, 1.0, 16)?;
    println!("wrote {}", out.display());
    Ok(())
}
