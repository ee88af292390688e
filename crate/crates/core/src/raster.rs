//! Z-buffered software rasterization of UV meshes into per-view buffers, and
//! sampling of the shared atlas back into view space.
//!
//! Coverage uses pixel centers with a top-left fill rule, attributes are
//! interpolated with perspective-correct barycentrics, and the depth buffer
//! holds eye-space depth along the viewing axis.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::atlas::{texel_of_uv, TextureAtlas};
use crate::camera::CameraPose;
use crate::geometry::{Mesh, Vec3};
use crate::grid::Grid;
use crate::imageio::{self, ImageError};

pub const MIN_FRAME_SIZE: usize = 8;

/// Relative depth span below which a frame exports as uniformly nearest.
pub const CONSTANT_DEPTH_TOLERANCE: f64 = 1e-9;

/// Text chunk stored in exported depth PNGs.
pub const DEPTH_PNG_CONVENTION: &str =
    "eye-space depth, linear per view: nearest foreground=65535, farthest foreground=0, background=0";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("frame size {0} is below the minimum of {MIN_FRAME_SIZE}")]
    FrameTooSmall(usize),
    #[error("no triangle is visible from azimuth {azimuth}, elevation {elevation}; check the camera distance and orientation remap")]
    EmptyFrame { azimuth: f64, elevation: f64 },
    #[error("sampling reads invalid atlas texel {texel}; fill the atlas first")]
    UnfilledAtlas { texel: usize },
    #[error("atlas sampling needs a filled atlas with channels; got {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterOptions {
    pub cull_backfaces: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            cull_backfaces: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Nearest,
    Bilinear,
}

/// Per-pixel buffers for one camera. Pixel `p` is row-major, row 0 on top.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterFrame {
    pose: CameraPose,
    size: usize,
    depth: Vec<f64>,
    uv: Vec<[f64; 2]>,
    tri_id: Vec<Option<u32>>,
    cosine: Vec<f64>,
    barycentric: Vec<[f64; 3]>,
}

impl RasterFrame {
    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixel_count(&self) -> usize {
        self.size * self.size
    }

    /// Eye-space depth, `+∞` on background.
    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn uv(&self) -> &[[f64; 2]] {
        &self.uv
    }

    pub fn tri_id(&self) -> &[Option<u32>] {
        &self.tri_id
    }

    /// `max(0, n̂·v̂)` on foreground, 0 on background.
    pub fn cosine(&self) -> &[f64] {
        &self.cosine
    }

    /// Perspective-correct barycentric weights of the covering triangle's
    /// corners, in face order.
    pub fn barycentric(&self) -> &[[f64; 3]] {
        &self.barycentric
    }

    pub fn is_foreground(&self, p: usize) -> bool {
        self.tri_id[p].is_some()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tri_id.iter().map(Option::is_some).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.tri_id.iter().filter(|t| t.is_some()).count()
    }

    /// World-space surface point under pixel `p`.
    pub fn surface_point(&self, mesh: &Mesh, p: usize) -> Option<Vec3> {
        let t = self.tri_id[p]? as usize;
        let [a, b, c] = mesh.triangle(t);
        let w = self.barycentric[p];
        Some(a * w[0] + b * w[1] + c * w[2])
    }

    /// 16-bit depth PNG: foreground depth mapped linearly with the nearest
    /// foreground pixel at 65535 and the farthest at 0; background 0.
    pub fn depth_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (d, t) in self.depth.iter().zip(&self.tri_id) {
            if t.is_some() {
                lo = lo.min(*d);
                hi = hi.max(*d);
            }
        }
        if !lo.is_finite() {
            return Err(self.empty_error());
        }
        let samples: Vec<u16> = self
            .depth
            .iter()
            .zip(&self.tri_id)
            .map(|(d, t)| match t {
                None => 0,
                Some(_) if hi - lo <= CONSTANT_DEPTH_TOLERANCE * hi => u16::MAX,
                Some(_) => ((hi - d) / (hi - lo) * 65535.0).round() as u16,
            })
            .collect();
        Ok(imageio::gray16_png_bytes(
            self.size,
            self.size,
            &samples,
            &[("DepthConvention", DEPTH_PNG_CONVENTION)],
        )?)
    }

    pub fn export_depth_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let bytes = self.depth_png_bytes()?;
        Ok(imageio::write_file(path, &bytes)?)
    }

    fn empty_error(&self) -> RasterError {
        RasterError::EmptyFrame {
            azimuth: self.pose.azimuth,
            elevation: self.pose.elevation,
        }
    }
}

/// Signed double area of `(a, b, p)`: positive when `p` is left of `a → b`.
#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top or left edge of a counter-clockwise triangle in y-up coordinates.
#[inline]
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy == 0.0 && dx < 0.0) || dy < 0.0
}

#[inline]
fn covers(w: f64, top_left: bool) -> bool {
    w > 0.0 || (w == 0.0 && top_left)
}

/// Rasterizes `mesh` from `pose` at `pose.image_size`.
pub fn rasterize(mesh: &Mesh, pose: &CameraPose, opts: RasterOptions) -> Result<RasterFrame, RasterError> {
    let size = pose.image_size;
    if size < MIN_FRAME_SIZE {
        return Err(RasterError::FrameTooSmall(size));
    }
    let n = size * size;
    let view = pose.view_matrix();
    let tan_half = (pose.fov_y.to_radians() * 0.5).tan();
    let near = pose.near();
    let s = size as f64;

    // Eye depth and y-up screen position per mesh vertex.
    let projected: Vec<(f64, [f64; 2])> = mesh
        .positions
        .iter()
        .map(|p| {
            let e = view.transform_point(&(*p).into());
            let depth = -e.z;
            let ndc = [e.x / (depth * tan_half), e.y / (depth * tan_half)];
            (depth, [(ndc[0] + 1.0) * 0.5 * s, (ndc[1] + 1.0) * 0.5 * s])
        })
        .collect();

    let mut zbuf = vec![f64::INFINITY; n];
    let mut tri_id: Vec<Option<u32>> = vec![None; n];
    let mut bary = vec![[0.0; 3]; n];

    for (f, face) in mesh.faces.iter().enumerate() {
        let corners = face.positions.map(|i| projected[i]);
        if corners.iter().any(|c| c.0 < near) {
            continue;
        }
        let mut order = [0usize, 1, 2];
        let mut area = edge(corners[0].1, corners[1].1, corners[2].1);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            if opts.cull_backfaces {
                continue;
            }
            order = [0, 2, 1];
            area = -area;
        }
        let [a, b, c] = order.map(|k| corners[k].1);
        let inv_z = order.map(|k| 1.0 / corners[k].0);
        let tl = [is_top_left(b, c), is_top_left(c, a), is_top_left(a, b)];

        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        // Pixel centers at x = px + 0.5 and y = size - py - 0.5.
        let px0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let px1 = ((xmax - 0.5).floor()).min(s - 1.0);
        let py0 = (s - ymax - 0.5).ceil().max(0.0) as usize;
        let py1 = ((s - ymin - 0.5).floor()).min(s - 1.0);
        if px1 < 0.0 || py1 < 0.0 {
            continue;
        }
        let (px1, py1) = (px1 as usize, py1 as usize);

        for py in py0..=py1 {
            let y = s - py as f64 - 0.5;
            for px in px0..=px1 {
                let p = [px as f64 + 0.5, y];
                let w = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
                if !(covers(w[0], tl[0]) && covers(w[1], tl[1]) && covers(w[2], tl[2])) {
                    continue;
                }
                let l = w.map(|x| x / area);
                let q = [l[0] * inv_z[0], l[1] * inv_z[1], l[2] * inv_z[2]];
                let depth = 1.0 / (q[0] + q[1] + q[2]);
                let idx = py * size + px;
                if depth < zbuf[idx] {
                    zbuf[idx] = depth;
                    tri_id[idx] = Some(f as u32);
                    // Store weights against the face's own corner order.
                    let mut wts = [0.0; 3];
                    for k in 0..3 {
                        wts[order[k]] = q[k] * depth;
                    }
                    bary[idx] = wts;
                }
            }
        }
    }

    let eye = pose.position();
    let mut uv = vec![[0.0; 2]; n];
    let mut cosine = vec![0.0; n];
    let mut any = false;
    for p in 0..n {
        let Some(t) = tri_id[p] else { continue };
        any = true;
        let t = t as usize;
        let w = bary[p];
        let tuv = mesh.triangle_uvs(t);
        uv[p] = [
            (w[0] * tuv[0][0] + w[1] * tuv[1][0] + w[2] * tuv[2][0]).clamp(0.0, 1.0),
            (w[0] * tuv[0][1] + w[1] * tuv[1][1] + w[2] * tuv[2][1]).clamp(0.0, 1.0),
        ];
        let [na, nb, nc] = mesh.triangle_normals(t);
        let mut normal = na * w[0] + nb * w[1] + nc * w[2];
        if normal.norm() < 1e-12 {
            let [a, b, c] = mesh.triangle(t);
            normal = (b - a).cross(&(c - a));
        }
        let [a, b, c] = mesh.triangle(t);
        let point = a * w[0] + b * w[1] + c * w[2];
        let to_cam = (eye - point).normalize();
        cosine[p] = normal.normalize().dot(&to_cam).clamp(0.0, 1.0);
    }

    let frame = RasterFrame {
        pose: *pose,
        size,
        depth: zbuf,
        uv,
        tri_id,
        cosine,
        barycentric: bary,
    };
    if !any {
        return Err(frame.empty_error());
    }
    Ok(frame)
}

/// Rasterizes every pose in parallel; results keep the pose order.
pub fn rasterize_all(
    mesh: &Mesh,
    poses: &[CameraPose],
    opts: RasterOptions,
) -> Result<Vec<RasterFrame>, RasterError> {
    poses.par_iter().map(|p| rasterize(mesh, p, opts)).collect()
}

/// Reads the atlas at each foreground pixel's UV. Background pixels are zero.
pub fn sample_atlas(atlas: &TextureAtlas, frame: &RasterFrame, filter: Filter) -> Result<Grid, RasterError> {
    let c = atlas.channels();
    let (w, h) = (atlas.width(), atlas.height());
    let mut out = Grid::zeros(frame.size(), frame.size(), c);
    let valid = atlas.valid();
    for p in 0..frame.pixel_count() {
        if !frame.is_foreground(p) {
            continue;
        }
        let uv = frame.uv()[p];
        match filter {
            Filter::Nearest => {
                let (i, j) = texel_of_uv(uv, w, h);
                let t = j * w + i;
                if !valid[t] {
                    return Err(RasterError::UnfilledAtlas { texel: t });
                }
                out.pixel_mut(p).copy_from_slice(atlas.value(t));
            }
            Filter::Bilinear => {
                let x = (uv[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let y = ((1.0 - uv[1]) * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                let taps = [
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ];
                let dst = out.pixel_mut(p);
                for (t, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    if !valid[t] {
                        return Err(RasterError::UnfilledAtlas { texel: t });
                    }
                    for (d, v) in dst.iter_mut().zip(atlas.value(t)) {
                        *d += wt * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Shades foreground pixels by view cosine; a quick preview of coverage.
pub fn cosine_preview(frame: &RasterFrame) -> Grid {
    let mut g = Grid::zeros(frame.size(), frame.size(), 3);
    for p in 0..frame.pixel_count() {
        if frame.is_foreground(p) {
            g.pixel_mut(p).fill(frame.cosine()[p]);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{uv_sphere, Face};

    fn pose(az: f64, el: f64, d: f64, size: usize) -> CameraPose {
        CameraPose::new(az, el, d, 45.0, size).unwrap()
    }

    fn tri_mesh(tris: &[[Vec3; 3]]) -> Mesh {
        let mut positions = Vec::new();
        let mut faces = Vec::new();
        for t in tris {
            let base = positions.len();
            positions.extend_from_slice(t);
            faces.push(Face {
                positions: [base, base + 1, base + 2],
                uvs: [0, 1, 2],
                normals: [0; 3],
            });
        }
        Mesh {
            positions,
            normals: vec![Vec3::z()],
            uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            faces,
        }
    }

    #[test]
    fn full_screen_triangle_has_constant_depth() {
        // Camera at z=2 looking at -Z; triangle in the z=0 plane covering the frustum.
        let big = 10.0;
        let mesh = tri_mesh(&[[
            Vec3::new(-big, -big, 0.0),
            Vec3::new(big, -big, 0.0),
            Vec3::new(0.0, big, 0.0),
        ]]);
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 2.0, 16), RasterOptions::default()).unwrap();
        assert_eq!(frame.foreground_count(), 256);
        for p in 0..256 {
            assert!((frame.depth()[p] - 2.0).abs() < 1e-5);
            assert_eq!(frame.tri_id()[p], Some(0));
            assert!((frame.cosine()[p] - 1.0).abs() < 0.2);
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let t = |z: f64| [Vec3::new(-9.0, -9.0, z), Vec3::new(9.0, -9.0, z), Vec3::new(0.0, 9.0, z)];
        // Camera at z=3: triangle at z=1 is at depth 2, z=2 at depth 1.
        let mesh = tri_mesh(&[t(1.0), t(2.0)]);
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 3.0, 16), RasterOptions::default()).unwrap();
        assert!(frame.tri_id().iter().all(|t| *t == Some(1)));
        let mesh = tri_mesh(&[t(2.0), t(1.0)]);
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 3.0, 16), RasterOptions::default()).unwrap();
        assert!(frame.tri_id().iter().all(|t| *t == Some(0)));
    }

    #[test]
    fn backfaces_are_culled_unless_disabled() {
        let mut mesh = tri_mesh(&[[Vec3::new(-9.0, -9.0, 0.0), Vec3::new(0.0, 9.0, 0.0), Vec3::new(9.0, -9.0, 0.0)]]);
        mesh.normals = vec![-Vec3::z()];
        let cam = pose(0.0, 0.0, 2.0, 16);
        assert!(matches!(
            rasterize(&mesh, &cam, RasterOptions::default()),
            Err(RasterError::EmptyFrame { .. })
        ));
        let frame = rasterize(&mesh, &cam, RasterOptions { cull_backfaces: false }).unwrap();
        assert_eq!(frame.foreground_count(), 256);
        // Seen from behind the surface: cosine clamps to zero.
        assert!(frame.cosine().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn shared_edges_are_covered_exactly_once() {
        // Two triangles splitting a square along its diagonal, aligned so that
        // the diagonal passes through pixel centers.
        let cam = pose(0.0, 0.0, 2.0, 16);
        let h = (22.5f64).to_radians().tan() * 2.0;
        let q = [
            Vec3::new(-h, -h, 0.0),
            Vec3::new(h, -h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(-h, h, 0.0),
        ];
        let mesh = tri_mesh(&[[q[0], q[1], q[2]], [q[0], q[2], q[3]]]);
        let frame = rasterize(&mesh, &cam, RasterOptions::default()).unwrap();
        assert_eq!(frame.foreground_count(), 256);
        // Coverage counts per triangle add up to the whole frame, no overlap.
        let a = frame.tri_id().iter().filter(|t| **t == Some(0)).count();
        let b = frame.tri_id().iter().filter(|t| **t == Some(1)).count();
        assert_eq!(a + b, 256);
    }

    #[test]
    fn tiny_frames_are_rejected() {
        let mesh = uv_sphere(8, 4);
        assert!(matches!(
            rasterize(&mesh, &pose(0.0, 0.0, 3.0, 4), RasterOptions::default()),
            Err(RasterError::FrameTooSmall(4))
        ));
    }

    #[test]
    fn rasterization_is_deterministic() {
        let mesh = uv_sphere(24, 12);
        let cam = pose(37.0, 21.0, 3.0, 64);
        let a = rasterize(&mesh, &cam, RasterOptions::default()).unwrap();
        let b = rasterize(&mesh, &cam, RasterOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surface_points_reproject_to_their_pixel() {
        let mesh = uv_sphere(24, 12);
        let cam = pose(-60.0, 15.0, 3.0, 48);
        let frame = rasterize(&mesh, &cam, RasterOptions::default()).unwrap();
        for p in 0..frame.pixel_count() {
            let Some(point) = frame.surface_point(&mesh, p) else { continue };
            let proj = cam.project(&point).unwrap();
            let center = cam.pixel_center_ndc(p % 48, p / 48);
            let px = 48.0 / 2.0;
            assert!((proj.ndc[0] - center[0]).abs() * px <= 0.5);
            assert!((proj.ndc[1] - center[1]).abs() * px <= 0.5);
            assert!((proj.depth - frame.depth()[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_atlas_samples_to_constant() {
        let mesh = uv_sphere(16, 8);
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 3.0, 32), RasterOptions::default()).unwrap();
        let atlas = TextureAtlas::from_grid(&Grid::filled(8, 8, 2, 0.25));
        for filter in [Filter::Nearest, Filter::Bilinear] {
            let g = sample_atlas(&atlas, &frame, filter).unwrap();
            for p in 0..frame.pixel_count() {
                let expect = if frame.is_foreground(p) { 0.25 } else { 0.0 };
                assert!(g.pixel(p).iter().all(|v| (v - expect).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn nearest_sampling_at_texel_centers_is_exact() {
        // A 2x1 checker atlas viewed through a quad whose UVs hit texel centers.
        let atlas = TextureAtlas::from_grid(&Grid::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap());
        let mesh = Mesh {
            positions: vec![Vec3::new(-9.0, -9.0, 0.0), Vec3::new(9.0, -9.0, 0.0), Vec3::new(0.0, 9.0, 0.0)],
            normals: vec![Vec3::z()],
            uvs: vec![[0.25, 0.5], [0.75, 0.5], [0.5, 0.5]],
            faces: vec![Face { positions: [0, 1, 2], uvs: [0, 1, 2], normals: [0; 3] }],
        };
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 2.0, 8), RasterOptions::default()).unwrap();
        let g = sample_atlas(&atlas, &frame, Filter::Nearest).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(g.as_slice().iter().any(|&v| v == 0.0) && g.as_slice().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn sampling_unfilled_atlas_fails() {
        let mesh = uv_sphere(16, 8);
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 3.0, 16), RasterOptions::default()).unwrap();
        let atlas = TextureAtlas::full_chart(8, 8, 1);
        assert!(matches!(
            sample_atlas(&atlas, &frame, Filter::Nearest),
            Err(RasterError::UnfilledAtlas { .. })
        ));
    }

    #[test]
    fn constant_depth_exports_as_near() {
        let big = 10.0;
        let mesh = tri_mesh(&[[Vec3::new(-big, -big, 0.0), Vec3::new(big, -big, 0.0), Vec3::new(0.0, big, 0.0)]]);
        let frame = rasterize(&mesh, &pose(0.0, 0.0, 2.0, 8), RasterOptions::default()).unwrap();
        let img = imageio::decode_png(&frame.depth_png_bytes().unwrap()).unwrap();
        assert_eq!(img.bit_depth, 16);
        assert!(img.samples.iter().all(|&s| s == 65535));
        assert_eq!(img.text[0].1, DEPTH_PNG_CONVENTION);
    }
}
