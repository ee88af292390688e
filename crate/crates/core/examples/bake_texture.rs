//! Renders a known texture from eight views, bakes the renders back into an
//! empty atlas and reports how faithfully the texture was recovered.

use std::path::PathBuf;

use texsync::atlas::TextureAtlas;
use texsync::camera::{ViewSchedule, DEFAULT_DISTANCE, DEFAULT_FOV_Y};
use texsync::geometry::load_obj;
use texsync::pipeline::{bake, checkerboard, masked_psnr};
use texsync::raster::{rasterize_all, sample_atlas, Filter, RasterOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = load_obj(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/sphere.obj"))?;
    let mesh = raw.transformed(&raw.unit_sphere_transform());
    let truth = TextureAtlas::from_grid(&checkerboard(256, 8));
    let schedule = ViewSchedule::eight_views(DEFAULT_DISTANCE, DEFAULT_FOV_Y, 512)?;
    let frames = rasterize_all(&mesh, schedule.poses(), RasterOptions::default())?;
    let renders = frames
        .iter()
        .map(|f| sample_atlas(&truth, f, Filter::Nearest))
        .collect::<Result<Vec<_>, _>>()?;

    let template = TextureAtlas::for_mesh(&mesh, 256, 256, 3);
    let (baked, visible) = bake(&template, &frames, &renders, 2.0)?;
    println!(
        "{} of {} chart texels seen directly ({:.1}%)",
        visible.iter().filter(|v| **v).count(),
        template.chart_count(),
        100.0 * visible.iter().filter(|v| **v).count() as f64 / template.chart_count() as f64
    );
    println!("psnr on seen texels: {:.2} dB", masked_psnr(&baked, &truth, &visible));

    let out = std::env::temp_dir().join("texsync-baked.png");
    baked.export_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
