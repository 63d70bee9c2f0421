//! Fine-tuning every weight for depth changes what the model generates;
//! training converters on the frozen backbone does not.
//!
//! ```text
//! cargo run --release --example full_finetune_drift -- pretrained.mrge [iterations]
//! ```

use plugdit::backbone::{ModelInput, TextContext};
use plugdit::checkpoint;
use plugdit::converters::MergeModel;
use plugdit::numerics::Rng;
use plugdit::schedule::Timestep;
use plugdit::tasks::TaskMode;
use plugdit::trainer::{full_finetune, train_converters};

fn drift(a: &MergeModel, b: &MergeModel, inputs: &[ModelInput]) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for input in inputs {
        let (ya, yb) = (
            a.predict(input, TaskMode::Generate)?,
            b.predict(input, TaskMode::Generate)?,
        );
        let sq: f64 = ya
            .data()
            .iter()
            .zip(yb.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        total += sq / ya.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .ok_or_else(|| anyhow::anyhow!("usage: full_finetune_drift <pretrained.mrge> [iterations]"))?;
    let iterations: usize = args.next().map_or(Ok(200), |s| s.parse())?;
    let base = checkpoint::load(path.as_ref())?.model;
    let bc = base.backbone_config().clone();

    let mut rng = Rng::new(5);
    let inputs: Vec<ModelInput> = (0..8)
        .map(|i| ModelInput {
            z: rng.normal_tensor(&[1, 3, bc.image_size, bc.image_size]),
            times: vec![Timestep::Discrete(20 * i)],
            text: vec![TextContext::new(&[1 + i], bc.text_len, bc.text_vocab).unwrap()],
        })
        .collect();

    let mut tc = base.config.train.clone();
    tc.iterations = iterations;

    let mut ft = base.clone();
    ft.attach_full_finetune()?;
    let r = full_finetune(&mut ft, TaskMode::Depth, &tc, None)?;
    println!(
        "full fine-tune: loss {:.4}, generation drift {:.3e}",
        r.final_loss(),
        drift(&base, &ft, &inputs)?
    );

    let mut merge = base.clone();
    merge.attach()?;
    let r = train_converters(&mut merge, TaskMode::Depth, &tc, None)?;
    println!(
        "converters:     loss {:.4}, generation drift {:.3e}",
        r.final_loss(),
        drift(&base, &merge, &inputs)?
    );
    Ok(())
}
