//! Trains depth converters on a pretrained backbone and scores them on
//! held-out scenes.
//!
//! ```text
//! cargo run --release --example pretrain_backbone -- 5000 pretrained.mrge
//! cargo run --release --example train_depth -- pretrained.mrge [iterations] [normal]
//! ```

use std::path::PathBuf;

use plugdit::checkpoint;
use plugdit::metrics::evaluate_task;
use plugdit::tasks::TaskMode;
use plugdit::trainer::{backbone_digest, train_converters};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(
        args.next()
            .ok_or_else(|| anyhow::anyhow!("usage: train_depth <pretrained.mrge> [iterations] [normal]"))?,
    );
    let iterations: Option<usize> = args.next().map(|s| s.parse()).transpose()?;
    let mode = match args.next().as_deref() {
        Some("normal") => TaskMode::Normal,
        _ => TaskMode::Depth,
    };

    let mut model = checkpoint::load(&ckpt)?.model;
    if let Some(n) = iterations {
        model.config.train.iterations = n;
    }
    model.config.converters.n_groups = Some(model.backbone_config().depth / 2);
    model.attach()?;
    let counts = model.param_counts(true);
    println!(
        "training {} of {} parameters",
        counts.total,
        model.param_counts(false).total
    );

    let before = backbone_digest(&model.store);
    let tc = model.config.train.clone();
    let run = train_converters(&mut model, mode, &tc, None)?;
    assert_eq!(before, backbone_digest(&model.store));
    println!("loss {:.4} -> {:.4}", run.initial_loss(100), run.final_loss());

    let e = &model.config.eval;
    let report = evaluate_task(&model, mode, e.count, e.seed, model.config.schedule.sample_steps)?;
    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
    let out = ckpt.with_file_name(format!("{mode}.mrge"));
    checkpoint::save(&model, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
