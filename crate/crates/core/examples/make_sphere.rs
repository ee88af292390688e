//! Writes a UV sphere OBJ, e.g. `cargo run --example make_sphere -- assets/sphere.obj 48 24`.

use texsync::geometry::{export_obj, uv_sphere};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "sphere.obj".into());
    let segments = args.next().map(|s| s.parse()).transpose()?.unwrap_or(48);
    let rings = args.next().map(|s| s.parse()).transpose()?.unwrap_or(24);
    let mesh = uv_sphere(segments, rings);
    export_obj(&mesh, &out, None)?;
    println!("{out}: {} vertices, {} triangles", mesh.positions.len(), mesh.faces.len());
    Ok(())
}
