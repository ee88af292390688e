//! Triangle meshes with UV atlases: OBJ loading, orientation remaps, vertex
//! normals, unit-sphere normalization and OBJ/MTL export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Faces with less than this area (model units²) are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mesh has no `vt` records; texturing needs UV coordinates")]
    MissingUvs,
    #[error("malformed face on line {line}: {reason}")]
    MalformedFace { line: usize, reason: String },
    #[error("cannot parse line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("mesh has no faces")]
    Empty,
    #[error("orientation remap {0} is a reflection or not a signed permutation")]
    ImproperRemap(String),
}

/// One triangle: indices into the position, UV and normal arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub positions: [usize; 3],
    pub uvs: [usize; 3],
    pub normals: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub faces: Vec<Face>,
}

impl Mesh {
    /// Checks index ranges and wraps UVs outside `[0, 1]` by their fractional
    /// part.
    pub fn validate(mut self) -> Result<Self, GeometryError> {
        if self.uvs.is_empty() {
            return Err(GeometryError::MissingUvs);
        }
        if self.faces.is_empty() {
            return Err(GeometryError::Empty);
        }
        for (i, f) in self.faces.iter().enumerate() {
            let bad = f.positions.iter().any(|&p| p >= self.positions.len())
                || f.uvs.iter().any(|&t| t >= self.uvs.len())
                || f.normals.iter().any(|&n| n >= self.normals.len());
            if bad {
                return Err(GeometryError::MalformedFace {
                    line: 0,
                    reason: format!("face {i} references an index out of range"),
                });
            }
        }
        for uv in &mut self.uvs {
            for c in uv.iter_mut() {
                *c = wrap_unit(*c);
                assert!((0.0..=1.0).contains(c), "uv {c} outside [0,1] after wrapping");
            }
        }
        Ok(self)
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].positions.map(|i| self.positions[i])
    }

    pub fn triangle_uvs(&self, face: usize) -> [[f64; 2]; 3] {
        self.faces[face].uvs.map(|i| self.uvs[i])
    }

    pub fn triangle_normals(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].normals.map(|i| self.normals[i])
    }

    /// Uniform scale and translation that maps the mesh into the unit sphere
    /// centered at the origin (bounding-box center, farthest vertex at radius 1).
    pub fn unit_sphere_transform(&self) -> Similarity {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let center = (lo + hi) * 0.5;
        let radius = self
            .positions
            .iter()
            .map(|p| (p - center).norm())
            .fold(0.0_f64, f64::max);
        let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        Similarity { center, scale }
    }

    pub fn transformed(&self, sim: &Similarity) -> Mesh {
        Mesh {
            positions: self.positions.iter().map(|p| sim.apply(p)).collect(),
            ..self.clone()
        }
    }
}

/// `p ↦ (p − center) · scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub center: Vec3,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn inverse_apply(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.center
    }
}

fn wrap_unit(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        x
    } else {
        x - x.floor()
    }
}

/// Resolves a 1-based (or negative, relative) OBJ index.
fn resolve_index(raw: &str, count: usize, line: usize) -> Result<usize, GeometryError> {
    let idx: i64 = raw.parse().map_err(|_| GeometryError::MalformedFace {
        line,
        reason: format!("bad index `{raw}`"),
    })?;
    let resolved = match idx {
        i if i > 0 => i - 1,
        i if i < 0 => count as i64 + i,
        _ => -1,
    };
    if resolved < 0 {
        return Err(GeometryError::MalformedFace {
            line,
            reason: format!("index {idx} is invalid"),
        });
    }
    Ok(resolved as usize)
}

fn parse_floats<const N: usize>(rest: &[&str], line: usize) -> Result<[f64; N], GeometryError> {
    if rest.len() < N {
        return Err(GeometryError::Parse {
            line,
            reason: format!("expected {N} numbers"),
        });
    }
    let mut out = [0.0; N];
    for (o, s) in out.iter_mut().zip(rest) {
        *o = s.parse().map_err(|_| GeometryError::Parse {
            line,
            reason: format!("bad number `{s}`"),
        })?;
    }
    Ok(out)
}

/// Parses Wavefront OBJ text. Polygons are fan-triangulated from their first
/// corner. Normals are recomputed unless every face references `vn` records.
pub fn parse_obj(text: &str) -> Result<Mesh, GeometryError> {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut normals = Vec::new();
    // (line, corners) with corner = (position, uv, normal) as raw strings.
    let mut polygons: Vec<(usize, Vec<(usize, Option<usize>, Option<usize>)>)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" => {
                let [x, y, z] = parse_floats::<3>(&rest, line)?;
                positions.push(Vec3::new(x, y, z));
            }
            "vt" => {
                let [u, v] = parse_floats::<2>(&rest, line)?;
                uvs.push([u, v]);
            }
            "vn" => {
                let [x, y, z] = parse_floats::<3>(&rest, line)?;
                normals.push(Vec3::new(x, y, z));
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(GeometryError::MalformedFace {
                        line,
                        reason: "face needs at least 3 corners".into(),
                    });
                }
                let mut corners = Vec::with_capacity(rest.len());
                for corner in &rest {
                    let mut parts = corner.split('/');
                    let p = resolve_index(parts.next().unwrap_or(""), positions.len(), line)?;
                    let t = match parts.next() {
                        Some(s) if !s.is_empty() => Some(resolve_index(s, uvs.len(), line)?),
                        _ => None,
                    };
                    let n = match parts.next() {
                        Some(s) if !s.is_empty() => Some(resolve_index(s, normals.len(), line)?),
                        _ => None,
                    };
                    corners.push((p, t, n));
                }
                polygons.push((line, corners));
            }
            _ => {}
        }
    }

    if uvs.is_empty() {
        return Err(GeometryError::MissingUvs);
    }

    let mut faces = Vec::new();
    let mut all_have_normals = !normals.is_empty();
    for (line, corners) in &polygons {
        for &(p, t, n) in corners {
            if p >= positions.len() {
                return Err(GeometryError::MalformedFace {
                    line: *line,
                    reason: format!("position index {} out of range ({} vertices)", p + 1, positions.len()),
                });
            }
            match t {
                Some(t) if t >= uvs.len() => {
                    return Err(GeometryError::MalformedFace {
                        line: *line,
                        reason: format!("uv index {} out of range ({} uvs)", t + 1, uvs.len()),
                    })
                }
                None => {
                    return Err(GeometryError::MalformedFace {
                        line: *line,
                        reason: "corner has no uv index".into(),
                    })
                }
                _ => {}
            }
            match n {
                Some(n) if n >= normals.len() => {
                    return Err(GeometryError::MalformedFace {
                        line: *line,
                        reason: format!("normal index {} out of range ({} normals)", n + 1, normals.len()),
                    })
                }
                None => all_have_normals = false,
                _ => {}
            }
        }
        for k in 1..corners.len() - 1 {
            let tri = [corners[0], corners[k], corners[k + 1]];
            faces.push(Face {
                positions: tri.map(|c| c.0),
                uvs: tri.map(|c| c.1.unwrap_or(0)),
                normals: tri.map(|c| c.2.unwrap_or(0)),
            });
        }
    }

    let mesh = Mesh {
        positions,
        normals,
        uvs,
        faces,
    };
    let mesh = if all_have_normals {
        let mut mesh = mesh;
        for n in &mut mesh.normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        mesh
    } else {
        let (mesh, skipped) = compute_vertex_normals(&mesh);
        if skipped > 0 {
            log::warn!("skipped {skipped} degenerate faces while computing normals");
        }
        mesh
    };
    mesh.validate()
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh, GeometryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

/// Area-weighted vertex normals, one per position. Returns the new mesh and the
/// number of degenerate faces that were skipped.
pub fn compute_vertex_normals(mesh: &Mesh) -> (Mesh, usize) {
    let mut acc = vec![Vec3::zeros(); mesh.positions.len()];
    let mut skipped = 0;
    for f in &mesh.faces {
        let [a, b, c] = f.positions.map(|i| mesh.positions[i]);
        // |cross| is twice the area, so the sum is area-weighted.
        let cross = (b - a).cross(&(c - a));
        if cross.norm() * 0.5 <= DEGENERATE_AREA {
            skipped += 1;
            continue;
        }
        for &i in &f.positions {
            acc[i] += cross;
        }
    }
    let normals = acc
        .into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::z()
            }
        })
        .collect();
    let faces = mesh
        .faces
        .iter()
        .map(|f| Face {
            normals: f.positions,
            ..*f
        })
        .collect();
    (
        Mesh {
            positions: mesh.positions.clone(),
            normals,
            uvs: mesh.uvs.clone(),
            faces,
        },
        skipped,
    )
}

/// A signed axis permutation: output component `i` is `signs[i] * input[axes[i]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OrientationRemap {
    axes: [usize; 3],
    signs: [i8; 3],
}

impl OrientationRemap {
    pub const IDENTITY: OrientationRemap = OrientationRemap {
        axes: [0, 1, 2],
        signs: [1, 1, 1],
    };

    pub fn new(axes: [usize; 3], signs: [i8; 3]) -> Result<Self, GeometryError> {
        let remap = OrientationRemap { axes, signs };
        let mut seen = [false; 3];
        for &a in &axes {
            if a > 2 || seen[a] {
                return Err(GeometryError::ImproperRemap(remap.to_string()));
            }
            seen[a] = true;
        }
        if signs.iter().any(|&s| s != 1 && s != -1) || remap.determinant() != 1 {
            return Err(GeometryError::ImproperRemap(remap.to_string()));
        }
        Ok(remap)
    }

    pub fn determinant(&self) -> i32 {
        let [a, b, c] = self.axes;
        // Parity of the permutation via its inversion count.
        let inversions = (a > b) as i32 + (a > c) as i32 + (b > c) as i32;
        let parity = if inversions % 2 == 0 { 1 } else { -1 };
        parity * self.signs.iter().map(|&s| s as i32).product::<i32>()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        Vec3::new(
            self.signs[0] as f64 * v[self.axes[0]],
            self.signs[1] as f64 * v[self.axes[1]],
            self.signs[2] as f64 * v[self.axes[2]],
        )
    }

    pub fn inverse(&self) -> OrientationRemap {
        let mut axes = [0; 3];
        let mut signs = [1; 3];
        for i in 0..3 {
            axes[self.axes[i]] = i;
            signs[self.axes[i]] = self.signs[i];
        }
        OrientationRemap { axes, signs }
    }
}

impl Default for OrientationRemap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl std::fmt::Display for OrientationRemap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names = ["x", "y", "z"];
        let parts: Vec<String> = (0..3)
            .map(|i| {
                let sign = if self.signs[i] < 0 { "-" } else { "" };
                format!("{sign}{}", names.get(self.axes[i]).unwrap_or(&"?"))
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `"x,z,-y"`: the new x, y and z components in terms of the old axes.
impl FromStr for OrientationRemap {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(GeometryError::ImproperRemap(s.to_string()));
        }
        let mut axes = [0; 3];
        let mut signs = [1; 3];
        for (i, p) in parts.iter().enumerate() {
            let (sign, name) = match p.strip_prefix('-') {
                Some(rest) => (-1, rest),
                None => (1, p.strip_prefix('+').unwrap_or(p)),
            };
            axes[i] = match name {
                "x" | "X" => 0,
                "y" | "Y" => 1,
                "z" | "Z" => 2,
                _ => return Err(GeometryError::ImproperRemap(s.to_string())),
            };
            signs[i] = sign;
        }
        OrientationRemap::new(axes, signs)
    }
}

impl TryFrom<String> for OrientationRemap {
    type Error = GeometryError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<OrientationRemap> for String {
    fn from(r: OrientationRemap) -> Self {
        r.to_string()
    }
}

/// Applies a proper signed permutation to positions and normals. UVs and face
/// topology are untouched.
pub fn apply_orientation(mesh: &Mesh, remap: &OrientationRemap) -> Mesh {
    Mesh {
        positions: mesh.positions.iter().map(|p| remap.apply(p)).collect(),
        normals: mesh.normals.iter().map(|n| remap.apply(n)).collect(),
        uvs: mesh.uvs.clone(),
        faces: mesh.faces.clone(),
    }
}

/// Material reference written alongside an exported OBJ.
#[derive(Debug, Clone)]
pub struct MaterialRef<'a> {
    pub mtl_file: &'a str,
    pub texture_file: &'a str,
}

pub fn obj_string(mesh: &Mesh, material: Option<&MaterialRef<'_>>) -> String {
    let mut out = String::new();
    if let Some(m) = material {
        let _ = writeln!(out, "mtllib {}", m.mtl_file);
    }
    for p in &mesh.positions {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    for t in &mesh.uvs {
        let _ = writeln!(out, "vt {} {}", t[0], t[1]);
    }
    for n in &mesh.normals {
        let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
    }
    if material.is_some() {
        out.push_str("usemtl texture\n");
    }
    for f in &mesh.faces {
        out.push('f');
        for k in 0..3 {
            let _ = write!(out, " {}/{}/{}", f.positions[k] + 1, f.uvs[k] + 1, f.normals[k] + 1);
        }
        out.push('\n');
    }
    out
}

pub fn mtl_string(texture_file: &str) -> String {
    format!(
        "newmtl texture\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {texture_file}\n"
    )
}

/// Writes `mesh` as OBJ; with a material reference the MTL file is written
/// next to it.
pub fn export_obj(
    mesh: &Mesh,
    path: impl AsRef<Path>,
    material: Option<&MaterialRef<'_>>,
) -> Result<(), GeometryError> {
    let path = path.as_ref();
    let io = |source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(path, obj_string(mesh, material)).map_err(io)?;
    if let Some(m) = material {
        let mtl_path = path.with_file_name(m.mtl_file);
        fs::write(&mtl_path, mtl_string(m.texture_file)).map_err(|source| GeometryError::Io {
            path: mtl_path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Latitude-longitude sphere of radius 1. `u` follows azimuth from +Z toward
/// +X, `v` runs from 0 at the south pole to 1 at the north pole (+Y). The seam
/// shares positions but not UVs.
pub fn uv_sphere(segments: usize, rings: usize) -> Mesh {
    assert!(segments >= 3 && rings >= 2);
    let mut positions = vec![Vec3::new(0.0, 1.0, 0.0)];
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = std::f64::consts::TAU * s as f64 / segments as f64;
            positions.push(Vec3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()));
        }
    }
    positions.push(Vec3::new(0.0, -1.0, 0.0));
    let south = positions.len() - 1;
    let ring_pos = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;

    let mut uvs = Vec::new();
    for r in 0..=rings {
        for s in 0..=segments {
            uvs.push([s as f64 / segments as f64, 1.0 - r as f64 / rings as f64]);
        }
    }
    let uv_at = |r: usize, s: usize| r * (segments + 1) + s;
    let pole_uv_offset = uvs.len();
    for s in 0..segments {
        uvs.push([(s as f64 + 0.5) / segments as f64, 1.0]);
    }
    for s in 0..segments {
        uvs.push([(s as f64 + 0.5) / segments as f64, 0.0]);
    }

    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push(Face {
            positions: [0, ring_pos(1, s), ring_pos(1, s + 1)],
            uvs: [pole_uv_offset + s, uv_at(1, s), uv_at(1, s + 1)],
            normals: [0; 3],
        });
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (tl, tr, bl, br) = (ring_pos(r, s), ring_pos(r, s + 1), ring_pos(r + 1, s), ring_pos(r + 1, s + 1));
            let (ttl, ttr, tbl, tbr) = (uv_at(r, s), uv_at(r, s + 1), uv_at(r + 1, s), uv_at(r + 1, s + 1));
            faces.push(Face {
                positions: [tl, bl, br],
                uvs: [ttl, tbl, tbr],
                normals: [0; 3],
            });
            faces.push(Face {
                positions: [tl, br, tr],
                uvs: [ttl, tbr, ttr],
                normals: [0; 3],
            });
        }
    }
    for s in 0..segments {
        faces.push(Face {
            positions: [ring_pos(rings - 1, s), south, ring_pos(rings - 1, s + 1)],
            uvs: [uv_at(rings - 1, s), pole_uv_offset + segments + s, uv_at(rings - 1, s + 1)],
            normals: [0; 3],
        });
    }
    let mesh = Mesh {
        positions,
        normals: Vec::new(),
        uvs,
        faces,
    };
    compute_vertex_normals(&mesh).0
}
