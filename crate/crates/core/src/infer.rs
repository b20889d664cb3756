//! Encoding unseen shapes and turning codes into meshes.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{integrate_reverse, write_trajectory, FlowTrajectory};
use crate::geometry::{marching_extract, PointCloud, ScalarGrid, ShapeMesh, SurfaceSample};
use crate::loss::latent_objective;
use crate::network::VelocityField;
use crate::rng;
use crate::train::{AdamState, Model};

const STREAM_INIT: u64 = 0xE0C1;
const STREAM_SUBSAMPLE: u64 = 0xE0C2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_drop_at: usize,
    pub lr_drop_factor: f64,
    pub gamma: f64,
    pub init_std: f64,
    /// Points per iteration; smaller samples are used whole.
    pub mc_points: usize,
    pub seed: u64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            lr: 5e-2,
            lr_drop_at: 400,
            lr_drop_factor: 0.1,
            gamma: 1e-4,
            init_std: 0.1,
            mc_points: 512,
            seed: 0,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.mc_points == 0 {
            return Err(Error::invalid("mc_points must be positive"));
        }
        let reals = [self.lr, self.lr_drop_factor, self.gamma, self.init_std];
        if reals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "encode rates, gamma and init_std must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.lr_drop_at {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Result of fitting a code to one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub z: Vec<f64>,
    /// Data term at each iteration, before that iteration's step.
    pub history: Vec<f64>,
}

fn fit_latent(
    model: &Model,
    points: &[f64],
    labels: Option<&[f64]>,
    config: &EncodeConfig,
) -> Result<Encoding> {
    config.validate()?;
    let d = model.dim();
    let n = points.len() / d;
    if n == 0 {
        return Err(Error::Empty("encoding points"));
    }
    let d_z = model.velocity.d_z();
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut init = rng::stream(config.seed, &[STREAM_INIT]);
    let mut z: Vec<f64> = (0..d_z).map(|_| normal.sample(&mut init)).collect();
    let mut adam = AdamState::new(d_z);
    let mut history = Vec::with_capacity(config.iterations);
    let (mut sub_pts, mut sub_labels) = (Vec::new(), Vec::new());
    for it in 0..config.iterations {
        let (pts, lab) = if n > config.mc_points {
            let mut r = rng::stream(config.seed, &[STREAM_SUBSAMPLE, it as u64]);
            let mut idx = index::sample(&mut r, n, config.mc_points).into_vec();
            idx.sort_unstable();
            sub_pts.clear();
            sub_labels.clear();
            for i in idx {
                sub_pts.extend_from_slice(&points[i * d..(i + 1) * d]);
                if let Some(l) = labels {
                    sub_labels.push(l[i]);
                }
            }
            (sub_pts.as_slice(), labels.map(|_| sub_labels.as_slice()))
        } else {
            (points, labels)
        };
        let (value, mut grad) = latent_objective(&model.template, &model.velocity, &z, pts, lab)?;
        history.push(value);
        for (g, zi) in grad.iter_mut().zip(&z) {
            *g += 2.0 * config.gamma * zi;
        }
        adam.update(&mut z, &grad, config.lr_at(it))?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent code at iteration {it}")));
        }
    }
    Ok(Encoding { z, history })
}

/// Fits a code to a surface sample with every network parameter frozen.
pub fn encode_shape(
    model: &Model,
    sample: &SurfaceSample,
    config: &EncodeConfig,
) -> Result<Encoding> {
    if sample.dim() != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "sample dimension {} does not match the model's {}",
            sample.dim(),
            model.dim()
        )));
    }
    fit_latent(model, &sample.points.coords, None, config)
}

/// Experimental: fits a code to labelled occupancy points (1 inside, 0 outside).
pub fn encode_occupancy(
    model: &Model,
    points: &[f64],
    labels: &[f64],
    config: &EncodeConfig,
) -> Result<Encoding> {
    if labels.len() * model.dim() != points.len() {
        return Err(Error::ShapeMismatch("one label per point required".into()));
    }
    fit_latent(model, points, Some(labels), config)
}

/// Extraction grid size used when none is given.
pub fn default_resolution(dim: usize) -> usize {
    if dim == 2 {
        128
    } else {
        64
    }
}

/// Template implicit sampled on a `resolution^dim` lattice.
pub fn template_grid(model: &Model, resolution: usize) -> Result<ScalarGrid> {
    ScalarGrid::from_batch_fn(model.dim(), resolution, |pts| model.template.values(pts))
}

/// Zero level set of the template.
pub fn export_template(model: &Model, resolution: usize) -> Result<ShapeMesh> {
    let mesh = marching_extract(&template_grid(model, resolution)?, 0.0)?;
    if mesh.is_empty() {
        return Err(Error::EmptyLevelSet);
    }
    Ok(mesh)
}

/// Template mesh and its reverse flow under code `z`.
pub fn deform_template(
    model: &Model,
    z: &[f64],
    resolution: usize,
) -> Result<(ShapeMesh, FlowTrajectory)> {
    let template = export_template(model, resolution)?;
    let traj = integrate_reverse(&model.velocity, &template.vertices.coords, z)?;
    Ok((template, traj))
}

/// Template mesh carried to the shape encoded by `z`; vertex `i` is the image
/// of template vertex `i`.
pub fn reconstruct(model: &Model, z: &[f64], resolution: usize) -> Result<ShapeMesh> {
    let (template, traj) = deform_template(model, z, resolution)?;
    Ok(ShapeMesh {
        vertices: PointCloud::new(model.dim(), traj.end().to_vec())?,
        faces: template.faces,
    })
}

/// `speeds[s][i]`: magnitude of the velocity applied to vertex `i` during
/// reverse stage `s + 1`.
pub fn stage_speeds<F: VelocityField + ?Sized>(
    field: &F,
    traj: &FlowTrajectory,
    z: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let k_total = field.stages();
    let d = field.dim();
    (1..=k_total)
        .map(|step| {
            let v = field.eval(k_total - step, &traj.positions[step - 1], z)?;
            Ok(v.chunks_exact(d)
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect())
        })
        .collect()
}

/// Files written by [`export_trajectory`].
#[derive(Clone, Debug)]
pub struct TrajectoryExport {
    pub files: Vec<PathBuf>,
    pub trajectory: FlowTrajectory,
    pub speeds: Vec<Vec<f64>>,
}

/// Per-stage OBJ files, `manifest.csv` and `speeds.csv` (`stage,vertex,speed`).
pub fn export_trajectory(
    model: &Model,
    z: &[f64],
    resolution: usize,
    dir: &Path,
) -> Result<TrajectoryExport> {
    let (template, traj) = deform_template(model, z, resolution)?;
    let mut files = write_trajectory(dir, &template, &traj)?;
    let speeds = stage_speeds(&model.velocity, &traj, z)?;
    let mut csv = String::from("stage,vertex,speed\n");
    for (s, row) in speeds.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            csv.push_str(&format!("{},{i},{v}\n", s + 1));
        }
    }
    let path = dir.join("speeds.csv");
    std::fs::write(&path, csv)?;
    files.push(path);
    Ok(TrajectoryExport {
        files,
        trajectory: traj,
        speeds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEntry {
    pub shape_id: usize,
    pub z: Vec<f64>,
}

pub fn save_latents(path: &Path, entries: &[LatentEntry]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<Vec<LatentEntry>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
