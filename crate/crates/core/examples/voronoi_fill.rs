//! Fills an atlas from sparse seed texels and checks the result against a
//! brute-force nearest-seed scan.
//!
//! `cargo run --example voronoi_fill -- [size] [seeds] [out.png]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texsync::atlas::TextureAtlas;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(128);
    let seeds: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(24);
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("voronoi.png").display().to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut atlas = TextureAtlas::full_chart(size, size, 3);
    for _ in 0..seeds {
        let t = rng.gen_range(0..size * size);
        let color: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        atlas.set_texel(t, &color, 1.0);
    }
    let before = atlas.clone();
    let stats = atlas.voronoi_fill()?;

    let seed_list: Vec<usize> = (0..size * size).filter(|&t| before.valid()[t]).collect();
    let mut mismatched = 0;
    for t in 0..size * size {
        let (x, y) = ((t % size) as i64, (t / size) as i64);
        let nearest = seed_list
            .iter()
            .min_by_key(|&&s| {
                let (sx, sy) = ((s % size) as i64, (s / size) as i64);
                ((sx - x).pow(2) + (sy - y).pow(2), s)
            })
            .copied()
            .expect("at least one seed");
        if atlas.value(t) != before.value(nearest) {
            mismatched += 1;
        }
    }
    atlas.export_png(&out)?;
    println!(
        "{} seeds, {} texels filled, {} mismatches vs brute force; wrote {out}",
        stats.seeds, stats.filled, mismatched
    );
    Ok(())
}
