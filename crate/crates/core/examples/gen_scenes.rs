//! Renders held-out procedural scenes with their depth and normal maps.
//!
//! ```text
//! cargo run --release --example gen_scenes -- [count] [out_dir]
//! ```

use std::path::PathBuf;

use plugdit::io;
use plugdit::scenes::{make_split, Role, SceneParams};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(Ok(8), |s| s.parse())?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scenes".into()));
    std::fs::create_dir_all(&out)?;

    let params = SceneParams::new(32);
    for scene in make_split(Role::TaskTest, count, &params, 8)? {
        let s = scene?;
        let valid = s.mask.iter().filter(|&&m| m).count();
        let (lo, hi) = s
            .depth
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
        println!(
            "scene {}: prompt {:?}, depth {lo:.2}..{hi:.2}, {valid}/{} valid pixels",
            s.seed,
            s.prompt,
            s.mask.len()
        );
        io::write_rgb_png(&out.join(format!("{}_rgb.png", s.seed)), &s.rgb)?;
        io::write_map_png(&out.join(format!("{}_depth.png", s.seed)), &s.depth)?;
        io::write_normal_png(&out.join(format!("{}_normal.png", s.seed)), &s.normal)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
