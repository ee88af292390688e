use std::path::PathBuf;

use proptest::prelude::*;
use texsync::atlas::TextureAtlas;
use texsync::camera::{CameraPose, ViewSchedule, DEFAULT_DISTANCE, DEFAULT_FOV_Y};
use texsync::geometry::{export_obj, load_obj, Mesh, Vec3};
use texsync::pipeline::{bake, checkerboard};
use texsync::raster::{rasterize, rasterize_all, sample_atlas, Filter, RasterOptions};

fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn unit_sphere() -> Mesh {
    let raw = load_obj(asset("sphere.obj")).unwrap();
    raw.transformed(&raw.unit_sphere_transform())
}

#[test]
fn cube_fixture_shape() {
    let cube = load_obj(asset("cube.obj")).unwrap();
    assert_eq!(cube.positions.len(), 8);
    assert_eq!(cube.faces.len(), 12);
    assert_eq!(cube.uvs.len(), 24);
    for p in &cube.positions {
        assert!(p.iter().all(|c| c.abs() == 0.5));
    }
}

#[test]
fn obj_export_round_trips() {
    let sphere = load_obj(asset("sphere.obj")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("again.obj");
    export_obj(&sphere, &path, None).unwrap();
    let again = load_obj(&path).unwrap();
    assert_eq!(sphere.faces.len(), again.faces.len());
    for (a, b) in sphere.positions.iter().zip(&again.positions) {
        assert!((a - b).norm() < 1e-12);
    }
}

/// Closest ray-triangle hit parameter over all front-facing triangles.
fn ray_cast(mesh: &Mesh, origin: Vec3, dir: Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let (e1, e2) = (b - a, c - a);
        if e1.cross(&e2).dot(&dir) >= 0.0 {
            continue;
        }
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        let s = origin - a;
        let u = s.dot(&p) / det;
        let q = s.cross(&e1);
        let v = dir.dot(&q) / det;
        let t = e2.dot(&q) / det;
        if u >= 0.0 && v >= 0.0 && u + v <= 1.0 && t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    }
    best
}

fn compare_with_ray_cast(mesh: &Mesh, pose: &CameraPose) -> (f64, f64) {
    let frame = rasterize(mesh, pose, RasterOptions::default()).unwrap();
    let eye = pose.position();
    let forward = pose.forward();
    let n = pose.image_size;
    let (mut mismatch, mut max_depth) = (0usize, 0.0f64);
    for py in 0..n {
        for px in 0..n {
            let target = pose.unproject(pose.pixel_center_ndc(px, py), 1.0);
            let dir = (target - eye).normalize();
            let p = py * n + px;
            match (ray_cast(mesh, eye, dir), frame.is_foreground(p)) {
                (Some(t), true) => max_depth = max_depth.max(((dir * t).dot(&forward) - frame.depth()[p]).abs()),
                (None, false) => {}
                _ => mismatch += 1,
            }
        }
    }
    (mismatch as f64 / (n * n) as f64, max_depth)
}

#[test]
fn oblique_views_match_ray_casting() {
    let sphere = unit_sphere();
    let cube = load_obj(asset("cube.obj")).unwrap();
    for (mesh, az, el) in [(&sphere, 37.0, 21.0), (&cube, -128.0, -33.0), (&cube, 45.0, 35.264)] {
        let pose = CameraPose::new(az, el, DEFAULT_DISTANCE, DEFAULT_FOV_Y, 96).unwrap();
        let (mismatch, depth) = compare_with_ray_cast(mesh, &pose);
        assert!(mismatch <= 0.005, "az {az} el {el}: mask mismatch {mismatch}");
        assert!(depth <= 1e-4, "az {az} el {el}: depth diff {depth}");
    }
}

#[test]
fn depth_png_orders_near_to_far() {
    let cube = load_obj(asset("cube.obj")).unwrap();
    let pose = CameraPose::new(30.0, 20.0, DEFAULT_DISTANCE, DEFAULT_FOV_Y, 64).unwrap();
    let frame = rasterize(&cube, &pose, RasterOptions::default()).unwrap();
    let png = texsync::imageio::decode_png(&frame.depth_png_bytes().unwrap()).unwrap();
    assert_eq!(png.bit_depth, 16);
    let (mut near, mut far) = (0, 0);
    for p in 0..frame.pixel_count() {
        if !frame.is_foreground(p) {
            assert_eq!(png.samples[p], 0);
            continue;
        }
        if frame.depth()[p] < frame.depth()[near] || !frame.is_foreground(near) {
            near = p;
        }
        if frame.depth()[p] > frame.depth()[far] || !frame.is_foreground(far) {
            far = p;
        }
    }
    assert_eq!(png.samples[near], 65535);
    assert_eq!(png.samples[far], 0);
}

#[test]
fn bake_then_sample_round_trip() {
    let sphere = unit_sphere();
    let truth = TextureAtlas::from_grid(&checkerboard(256, 8));
    let schedule = ViewSchedule::eight_views(DEFAULT_DISTANCE, DEFAULT_FOV_Y, 512).unwrap();
    let frames = rasterize_all(&sphere, schedule.poses(), RasterOptions::default()).unwrap();
    let renders: Vec<_> = frames
        .iter()
        .map(|f| sample_atlas(&truth, f, Filter::Bilinear).unwrap())
        .collect();
    let mut template = TextureAtlas::for_mesh(&sphere, 1024, 1024, 3);
    template.dilate_chart_mask(4);
    let (baked, _) = bake(&template, &frames, &renders, 2.0).unwrap();

    let (mut sum, mut count) = (0.0, 0usize);
    for (frame, render) in frames.iter().zip(&renders) {
        let again = sample_atlas(&baked, frame, Filter::Bilinear).unwrap();
        for p in 0..frame.pixel_count() {
            if frame.is_foreground(p) && frame.cosine()[p] >= 0.5 {
                for k in 0..3 {
                    sum += (again.pixel(p)[k] - render.pixel(p)[k]).powi(2);
                }
                count += 3;
            }
        }
    }
    let psnr = -10.0 * (sum / count as f64).log10();
    println!("round-trip psnr {psnr:.2} dB");
    assert!(psnr >= 35.0, "round-trip psnr {psnr:.2} dB");
}

#[test]
fn eight_views_cover_the_sphere_chart() {
    let sphere = unit_sphere();
    let schedule = ViewSchedule::eight_views(DEFAULT_DISTANCE, DEFAULT_FOV_Y, 512).unwrap();
    let frames = rasterize_all(&sphere, schedule.poses(), RasterOptions::default()).unwrap();
    let renders: Vec<_> = frames.iter().map(texsync::raster::cosine_preview).collect();
    let template = TextureAtlas::for_mesh(&sphere, 256, 256, 3);
    let (_, visible) = bake(&template, &frames, &renders, 2.0).unwrap();
    let covered = visible.iter().filter(|v| **v).count() as f64 / template.chart_count() as f64;
    println!("chart coverage {covered:.4}");
    assert!(covered >= 0.95, "coverage {covered}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rasterized_uvs_lie_in_unit_square(az in -179.0f64..180.0, el in -80.0f64..80.0) {
        let sphere = unit_sphere();
        let pose = CameraPose::new(az, el, DEFAULT_DISTANCE, DEFAULT_FOV_Y, 32).unwrap();
        let frame = rasterize(&sphere, &pose, RasterOptions::default()).unwrap();
        prop_assert!(frame.foreground_count() > 0);
        for p in 0..frame.pixel_count() {
            if frame.is_foreground(p) {
                let [u, v] = frame.uv()[p];
                prop_assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
                let b = frame.barycentric()[p];
                prop_assert!((b[0] + b[1] + b[2] - 1.0).abs() < 1e-9);
                prop_assert!(frame.cosine()[p] >= -1e-9);
            }
        }
    }
}
