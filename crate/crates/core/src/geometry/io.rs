//! Text and binary formats for meshes, oriented point clouds and grids.
//!
//! * Meshes: ASCII OBJ. 3D meshes use `v x y z` and `f a b c`; 2D meshes
//!   store `v x y 0` and `l a b` segments.
//! * Oriented points: one `x y [z] nx ny [nz]` record per line.
//! * Grids: a `dims: r1 r2 [r3]` header line followed by the values as
//!   little-endian `f64`.

use std::fmt::Write as _;
use std::path::Path;

use super::grid::ScalarGrid;
use super::mesh::{PointCloud, ShapeMesh, SurfaceSample};
use crate::error::{Error, Result};

fn parse_err(what: &'static str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what,
        line,
        msg: msg.into(),
    }
}

fn parse_f64(what: &'static str, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(what, line, format!("bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(what, line, format!("non-finite number {tok:?}")));
    }
    Ok(v)
}

pub fn write_obj(mesh: &ShapeMesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices.iter() {
        let z = if v.len() == 3 { v[2] } else { 0.0 };
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], z);
    }
    let tag = if mesh.dim() == 2 { 'l' } else { 'f' };
    for f in 0..mesh.face_count() {
        let _ = write!(out, "{tag}");
        for i in mesh.face(f) {
            let _ = write!(out, " {}", i + 1);
        }
        out.push('\n');
    }
    out
}

fn obj_index(tok: &str, line: usize, n_vertices: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    let i: i64 = head
        .parse()
        .map_err(|_| parse_err("obj", line, format!("bad index {tok:?}")))?;
    let resolved = if i > 0 {
        i - 1
    } else if i < 0 {
        n_vertices as i64 + i
    } else {
        return Err(parse_err("obj", line, "index 0 is not valid"));
    };
    if resolved < 0 || resolved as usize >= n_vertices {
        return Err(parse_err("obj", line, format!("index {i} out of range")));
    }
    Ok(resolved as usize)
}

/// Parses an OBJ mesh. Files with `l` records are read as 2D polylines
/// (the z coordinate must be zero); otherwise the mesh is 3D. Polygons are
/// fan-triangulated and polylines split into segments.
pub fn parse_obj(text: &str) -> Result<ShapeMesh> {
    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut tris = Vec::new();
    let mut segs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let vals = toks
                    .map(|t| parse_f64("obj", line, t))
                    .collect::<Result<Vec<_>>>()?;
                match vals.len() {
                    2 => verts.push([vals[0], vals[1], 0.0]),
                    3 | 4 => verts.push([vals[0], vals[1], vals[2]]),
                    n => {
                        return Err(parse_err(
                            "obj",
                            line,
                            format!("vertex with {n} coordinates"),
                        ))
                    }
                }
            }
            Some("f") => {
                let idx = toks
                    .map(|t| obj_index(t, line, verts.len()))
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(parse_err("obj", line, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    tris.extend([idx[0], idx[k], idx[k + 1]]);
                }
            }
            Some("l") => {
                let idx = toks
                    .map(|t| obj_index(t, line, verts.len()))
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 2 {
                    return Err(parse_err("obj", line, "line needs at least 2 vertices"));
                }
                for w in idx.windows(2) {
                    segs.extend([w[0], w[1]]);
                }
            }
            _ => {}
        }
    }
    if !tris.is_empty() && !segs.is_empty() {
        return Err(parse_err("obj", 0, "mixed face and line records"));
    }
    if !segs.is_empty() {
        if verts.iter().any(|v| v[2] != 0.0) {
            return Err(parse_err("obj", 0, "2D polyline vertices must have z = 0"));
        }
        let coords = verts.iter().flat_map(|v| [v[0], v[1]]).collect();
        return ShapeMesh::new(PointCloud::new(2, coords)?, segs);
    }
    let coords = verts.iter().flatten().copied().collect();
    ShapeMesh::new(PointCloud::new(3, coords)?, tris)
}

pub fn write_points(sample: &SurfaceSample) -> String {
    let mut out = String::new();
    for i in 0..sample.len() {
        let fields: Vec<String> = sample
            .points
            .point(i)
            .iter()
            .chain(sample.normal(i))
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(out, "{}", fields.join(" "));
    }
    out
}

/// Parses oriented points. Every record must have the same width: 4 (2D) or
/// 6 (3D). Normals are renormalised if within 1e-3 of unit length.
pub fn parse_points(text: &str) -> Result<SurfaceSample> {
    let mut width = None;
    let (mut points, mut normals) = (Vec::new(), Vec::new());
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let vals = content
            .split_whitespace()
            .map(|t| parse_f64("points", line, t))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 4 && vals.len() != 6 {
            return Err(parse_err(
                "points",
                line,
                format!("expected 4 or 6 fields, got {}", vals.len()),
            ));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(parse_err("points", line, "inconsistent record width"));
        }
        let d = vals.len() / 2;
        let n = &vals[d..];
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (len - 1.0).abs() > 1e-3 {
            return Err(parse_err(
                "points",
                line,
                format!("normal length {len} is not unit"),
            ));
        }
        points.extend_from_slice(&vals[..d]);
        normals.extend(n.iter().map(|v| v / len));
    }
    let d = width.ok_or(Error::Empty("point file"))? / 2;
    SurfaceSample::new(PointCloud::new(d, points)?, normals, 0)
}

pub fn write_grid(grid: &ScalarGrid) -> Vec<u8> {
    let dims: Vec<String> = grid.resolution.iter().map(|r| r.to_string()).collect();
    let mut out = format!("dims: {}\n", dims.join(" ")).into_bytes();
    out.reserve(grid.values.len() * 8);
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_grid(bytes: &[u8]) -> Result<ScalarGrid> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| parse_err("grid", 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| parse_err("grid", 1, "header is not UTF-8"))?;
    let rest = header
        .trim_end_matches('\r')
        .strip_prefix("dims:")
        .ok_or_else(|| parse_err("grid", 1, "header must start with 'dims:'"))?;
    let resolution = rest
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| parse_err("grid", 1, format!("bad dimension {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if resolution.len() != 2 && resolution.len() != 3 {
        return Err(parse_err("grid", 1, "expected 2 or 3 dimensions"));
    }
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(parse_err(
            "grid",
            2,
            "payload is not a whole number of f64 values",
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ScalarGrid::new(resolution, values)
}

pub fn save_obj(path: &Path, mesh: &ShapeMesh) -> Result<()> {
    Ok(std::fs::write(path, write_obj(mesh))?)
}

pub fn load_obj(path: &Path) -> Result<ShapeMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}

pub fn save_points(path: &Path, sample: &SurfaceSample) -> Result<()> {
    Ok(std::fs::write(path, write_points(sample))?)
}

pub fn load_points(path: &Path) -> Result<SurfaceSample> {
    parse_points(&std::fs::read_to_string(path)?)
}

pub fn save_grid(path: &Path, grid: &ScalarGrid) -> Result<()> {
    Ok(std::fs::write(path, write_grid(grid))?)
}

pub fn load_grid(path: &Path) -> Result<ScalarGrid> {
    parse_grid(&std::fs::read(path)?)
}
