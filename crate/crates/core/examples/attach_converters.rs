//! Attaches every converter setting to one backbone, prints the parameter
//! split and checks that generation ignores the converters.
//!
//! ```text
//! cargo run --release --example attach_converters -- [pretrained.mrge]
//! ```

use plugdit::backbone::{ModelInput, TextContext};
use plugdit::checkpoint;
use plugdit::config::{ConverterSetting, ExperimentConfig};
use plugdit::converters::MergeModel;
use plugdit::numerics::Rng;
use plugdit::schedule::Timestep;
use plugdit::tasks::TaskMode;

fn main() -> anyhow::Result<()> {
    let base = match std::env::args().nth(1) {
        Some(path) => checkpoint::load(path.as_ref())?.model,
        None => MergeModel::new_backbone(ExperimentConfig::default(), 0)?,
    };
    let bc = base.backbone_config().clone();
    let mut rng = Rng::new(3);
    let input = ModelInput {
        z: rng.normal_tensor(&[2, 3, bc.image_size, bc.image_size]),
        times: vec![Timestep::Discrete(40), Timestep::Discrete(180)],
        text: vec![
            TextContext::new(&[3, 8], bc.text_len, bc.text_vocab)?,
            TextContext::empty(bc.text_len),
        ],
    };
    let reference = base.predict(&input, TaskMode::Generate)?;

    println!("backbone: {} parameters", base.param_counts(false).total);
    println!(
        "{:<8} {:>8} {:>12} {:>12}  generation",
        "setting", "groups", "converters", "trainable"
    );
    for setting in [
        ConverterSetting::A,
        ConverterSetting::B,
        ConverterSetting::C,
        ConverterSetting::D,
        ConverterSetting::E,
    ] {
        for groups in [bc.depth, bc.depth / 2] {
            let mut m = base.clone();
            m.config.converters.setting = setting;
            m.config.converters.n_groups = Some(groups);
            m.attach()?;
            let counts = m.param_counts(true);
            let same = m.predict(&input, TaskMode::Generate)? == reference;
            println!(
                "{:<8} {groups:>8} {:>12} {:>12}  {}",
                setting.as_char(),
                counts.converters,
                counts.total,
                if same { "unchanged" } else { "CHANGED" }
            );
        }
    }
    Ok(())
}
