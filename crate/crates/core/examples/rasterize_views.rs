//! Rasterizes a mesh from the eight-view schedule and writes depth and
//! view-cosine images.
//!
//! `cargo run --example rasterize_views -- [mesh.obj] [out_dir] [size]`

use std::path::PathBuf;

use texsync::camera::{ViewSchedule, DEFAULT_DISTANCE, DEFAULT_FOV_Y};
use texsync::geometry::load_obj;
use texsync::imageio::{rgb8_png_bytes, write_file};
use texsync::raster::{cosine_preview, rasterize_all, RasterOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mesh_path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/cube.obj"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("texsync-raster"));
    let size = args.next().map(|s| s.parse()).transpose()?.unwrap_or(256);

    let raw = load_obj(&mesh_path)?;
    let mesh = raw.transformed(&raw.unit_sphere_transform());
    let schedule = ViewSchedule::eight_views(DEFAULT_DISTANCE, DEFAULT_FOV_Y, size)?;
    let frames = rasterize_all(&mesh, schedule.poses(), RasterOptions::default())?;

    std::fs::create_dir_all(&out)?;
    for (i, frame) in frames.iter().enumerate() {
        let pose = frame.pose();
        frame.export_depth_png(out.join(format!("depth_{i:02}.png")))?;
        write_file(out.join(format!("cosine_{i:02}.png")), &rgb8_png_bytes(&cosine_preview(frame))?)?;
        println!(
            "view {i}: az {:7.1} el {:6.1}  foreground {:6} px",
            pose.azimuth,
            pose.elevation,
            frame.foreground_count()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
