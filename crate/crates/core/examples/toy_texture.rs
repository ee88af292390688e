//! Full toy-mode run: textures the bundled sphere so that its renders match a
//! checkerboard, without any model.
//!
//! `cargo run --release --example toy_texture -- [out_dir] [workers]`

use std::path::PathBuf;

use texsync::config::{Mode, RunConfig};
use texsync::pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig {
        mesh: Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/sphere.obj")),
        mode: Mode::Toy,
        out: args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("texsync-toy")),
        workers: args.next().map(|s| s.parse()).transpose()?,
        ..RunConfig::default()
    };
    let report = pipeline::run(&cfg)?;
    for t in &report.timings {
        println!("{:>10}: {:7.3}s", t.stage.to_string(), t.seconds);
    }
    if let Some(toy) = &report.toy {
        println!(
            "psnr vs direct bake {:.2} dB, vs checkerboard {:.2} dB",
            toy.psnr_vs_oracle_db, toy.psnr_vs_target_db
        );
    }
    println!(
        "{:.1}% of chart texels seen; outputs in {}",
        100.0 * report.coverage.visible_fraction,
        cfg.out.display()
    );
    Ok(())
}
