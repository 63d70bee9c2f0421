//! Pretrains the text-to-image backbone on procedural scenes and saves it.
//!
//! ```text
//! cargo run --release --example pretrain_backbone -- [iterations] [out.mrge]
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use plugdit::checkpoint;
use plugdit::config::ExperimentConfig;
use plugdit::converters::MergeModel;
use plugdit::trainer::pretrain_t2i;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    if let Some(n) = args.next() {
        cfg.pretrain.iterations = n.parse()?;
    }
    let out = PathBuf::from(args.next().unwrap_or_else(|| "pretrained.mrge".into()));

    let mut model = MergeModel::new_backbone(cfg.clone(), cfg.pretrain.seed)?;
    let mut log = BufWriter::new(File::create(out.with_extension("jsonl"))?);
    let run = pretrain_t2i(&mut model, &cfg.pretrain, Some(&mut log))?;
    println!(
        "loss {:.4} -> {:.4} over {} iterations",
        run.initial_loss(100),
        run.final_loss(),
        run.losses.len()
    );
    checkpoint::save(&model, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
