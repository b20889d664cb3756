use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_obj, load_points, save_obj, save_points};
use super::mesh::{box_mesh, sample_surface, ShapeMesh, SurfaceSample};
use super::shape::{rotation_2d, rotation_from_quaternion, Domain, ShapeSpec};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_EDGE: f64 = 0.15;
pub const MAX_EDGE: f64 = 0.85;
pub const DEFAULT_SURFACE_SAMPLES: usize = 4096;

/// One synthetic training shape: its analytic description, boundary mesh
/// and surface samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub spec: ShapeSpec,
    pub mesh: ShapeMesh,
    pub sample: SurfaceSample,
}

/// Randomly rotated boxes with edge lengths uniform in `[0.15, 0.85]`.
pub fn generate_box_dataset(count: usize, dim: usize, seed: u64) -> Result<Vec<ShapeRecord>> {
    generate_box_dataset_sized(count, dim, seed, DEFAULT_SURFACE_SAMPLES)
}

pub fn generate_box_dataset_sized(
    count: usize,
    dim: usize,
    seed: u64,
    samples_per_shape: usize,
) -> Result<Vec<ShapeRecord>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    Domain::new(dim)?;
    (0..count)
        .map(|i| {
            let mut rng = rng::stream(seed, &[0xB0C5, i as u64]);
            let spec = loop {
                let half: Vec<f64> = (0..dim)
                    .map(|_| 0.5 * rng.random_range(MIN_EDGE..MAX_EDGE))
                    .collect();
                let rotation = if dim == 2 {
                    rotation_2d(rng.random_range(0.0..std::f64::consts::TAU))
                } else {
                    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    if q.iter().map(|v| v * v).sum::<f64>() < 1e-12 {
                        continue;
                    }
                    rotation_from_quaternion(q)
                };
                let spec = ShapeSpec::boxed(vec![0.0; dim], half, rotation);
                if spec.validate().is_ok() {
                    break spec;
                }
            };
            let mesh = box_mesh(&spec)?;
            let mut sample = sample_surface(&mesh, samples_per_shape, rng.random())?;
            sample.shape_id = i;
            Ok(ShapeRecord { spec, mesh, sample })
        })
        .collect()
}

/// `dataset.json` entry; file names are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: usize,
    pub spec: ShapeSpec,
    pub mesh: String,
    pub points: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dim: usize,
    pub shapes: Vec<DatasetEntry>,
}

pub const DATASET_INDEX: &str = "dataset.json";

/// Writes `dataset.json`, `meshes/shape_NNN.obj` and `points/shape_NNN.pts`.
pub fn save_dataset(dir: &Path, records: &[ShapeRecord]) -> Result<Vec<PathBuf>> {
    let dim = records.first().ok_or(Error::Empty("dataset"))?.spec.dim();
    std::fs::create_dir_all(dir.join("meshes"))?;
    std::fs::create_dir_all(dir.join("points"))?;
    let mut files = Vec::new();
    let mut shapes = Vec::new();
    for r in records {
        let id = r.sample.shape_id;
        let mesh = format!("meshes/shape_{id:03}.obj");
        let points = format!("points/shape_{id:03}.pts");
        save_obj(&dir.join(&mesh), &r.mesh)?;
        save_points(&dir.join(&points), &r.sample)?;
        files.push(dir.join(&mesh));
        files.push(dir.join(&points));
        shapes.push(DatasetEntry {
            id,
            spec: r.spec.clone(),
            mesh,
            points,
        });
    }
    let index = dir.join(DATASET_INDEX);
    std::fs::write(
        &index,
        serde_json::to_string_pretty(&DatasetIndex { dim, shapes })?,
    )?;
    files.push(index);
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ShapeRecord>> {
    let index: DatasetIndex =
        serde_json::from_str(&std::fs::read_to_string(dir.join(DATASET_INDEX))?)?;
    if index.shapes.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    index
        .shapes
        .into_iter()
        .map(|e| {
            e.spec.validate()?;
            let mesh = load_obj(&dir.join(&e.mesh))?;
            let mut sample = load_points(&dir.join(&e.points))?;
            if e.spec.dim() != index.dim || mesh.dim() != index.dim || sample.dim() != index.dim {
                return Err(Error::ShapeMismatch(format!(
                    "shape {} does not match dataset dimension {}",
                    e.id, index.dim
                )));
            }
            sample.shape_id = e.id;
            Ok(ShapeRecord {
                spec: e.spec,
                mesh,
                sample,
            })
        })
        .collect()
}
