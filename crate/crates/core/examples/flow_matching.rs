//! Pretrains a small backbone with the flow-matching objective and samples
//! a few images with Euler integration.
//!
//! ```text
//! cargo run --release --example flow_matching -- [iterations] [out_dir]
//! ```

use std::path::PathBuf;

use plugdit::backbone::TextContext;
use plugdit::config::ExperimentConfig;
use plugdit::converters::MergeModel;
use plugdit::io::write_rgb_png;
use plugdit::schedule::Objective;
use plugdit::tasks::{generate_images, SamplerConfig};
use plugdit::trainer::pretrain_t2i;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(600), |s| s.parse())?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "flow_samples".into()));

    let mut cfg = ExperimentConfig::default();
    cfg.schedule.objective = Objective::FlowMatching;
    cfg.schedule.sample_steps = 20;
    cfg.pretrain.iterations = iterations;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.log_every = 100;
    cfg.validate()?;
    println!("learning rate {}", cfg.pretrain.lr(cfg.schedule.objective));

    let mut model = MergeModel::new_backbone(cfg.clone(), 0)?;
    let run = pretrain_t2i(&mut model, &cfg.pretrain, None)?;
    println!("velocity loss {:.4} -> {:.4}", run.initial_loss(50), run.final_loss());

    let bc = model.backbone_config().clone();
    // token = 1 + 2 * colour + shape
    let prompts: Vec<TextContext> = [vec![1], vec![4], vec![7, 10], vec![]]
        .iter()
        .map(|p| TextContext::new(p, bc.text_len, bc.text_vocab))
        .collect::<Result<_, _>>()?;
    let seeds = [0, 1, 2, 3];
    let images = generate_images(
        &model,
        &prompts,
        SamplerConfig {
            steps: cfg.schedule.sample_steps,
        },
        &seeds,
    )?;
    std::fs::create_dir_all(&out)?;
    for (img, seed) in images.iter().zip(seeds) {
        write_rgb_png(&out.join(format!("sample_{seed}.png")), img)?;
    }
    println!("wrote {} samples to {}", images.len(), out.display());
    Ok(())
}
