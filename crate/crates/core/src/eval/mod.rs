//! Reconstruction reports, noise robustness, isometry defect and the
//! Killing-norm quadrature check.

mod quadrature;

pub use quadrature::{verify_killing_identity, DerivativeMode, IdentityCheck, TestField};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    add_vertex_noise, chamfer_distance, earth_mover_distance, sample_surface, PointCloud,
    ShapeRecord, SurfaceSample,
};
use crate::infer::{encode_shape, reconstruct, EncodeConfig};
use crate::loss::killing_integrand;
use crate::network::VelocityField;
use crate::train::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub encode: EncodeConfig,
    /// Extraction grid per axis.
    pub resolution: usize,
    /// Points sampled on each reconstruction for the Chamfer distance.
    pub recon_points: usize,
    /// Subsample size of the exact assignment behind the EM distance.
    pub emd_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            encode: EncodeConfig::default(),
            resolution: 128,
            recon_points: 2048,
            emd_points: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub shape_id: usize,
    pub cd: f64,
    pub em: f64,
    /// `ok`, or `failed: <reason>` with NaN metrics.
    pub status: String,
}

impl MetricRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    /// NaN for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

/// Per-shape metrics with mean and median over the successful rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub cd: Aggregate,
    pub em: Aggregate,
    pub failed: usize,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let ok: Vec<&MetricRow> = rows.iter().filter(|r| r.is_ok()).collect();
        let cd = Aggregate::of(&ok.iter().map(|r| r.cd).collect::<Vec<_>>());
        let em = Aggregate::of(&ok.iter().map(|r| r.em).collect::<Vec<_>>());
        let failed = rows.len() - ok.len();
        Self {
            rows,
            cd,
            em,
            failed,
        }
    }

    pub const CSV_HEADER: &'static str = "shape_id,cd,em,status";

    /// Per-shape rows followed by `mean` and `median` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.shape_id,
                r.cd,
                r.em,
                r.status.replace(',', ";")
            ));
        }
        out.push_str(&format!(
            "mean,{},{},aggregate\n",
            self.cd.mean, self.em.mean
        ));
        out.push_str(&format!(
            "median,{},{},aggregate\n",
            self.cd.median, self.em.median
        ));
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "shapes": self.rows.len(),
            "failed": self.failed,
            "cd": { "mean": self.cd.mean, "median": self.cd.median },
            "em": { "mean": self.em.mean, "median": self.em.median },
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.summary_json())?,
        )?;
        Ok(())
    }
}

/// CD and EM between a reconstructed point set and ground truth.
pub fn compare_clouds(
    recon: &PointCloud,
    truth: &PointCloud,
    emd_points: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cd = chamfer_distance(recon, truth)?;
    let n = emd_points.min(recon.len()).min(truth.len());
    let em = earth_mover_distance(recon, truth, n, seed)?;
    Ok((cd, em))
}

/// Encodes `input`, reconstructs and compares against `truth`.
pub fn evaluate_shape(
    model: &Model,
    input: &SurfaceSample,
    truth: &PointCloud,
    config: &EvalConfig,
) -> Result<(f64, f64)> {
    let enc = encode_shape(model, input, &config.encode)?;
    let mesh = reconstruct(model, &enc.z, config.resolution)?;
    let recon = sample_surface(&mesh, config.recon_points, config.seed)?;
    compare_clouds(&recon.points, truth, config.emd_points, config.seed)
}

fn row(shape_id: usize, result: Result<(f64, f64)>) -> MetricRow {
    match result {
        Ok((cd, em)) => MetricRow {
            shape_id,
            cd,
            em,
            status: "ok".into(),
        },
        Err(e) => MetricRow {
            shape_id,
            cd: f64::NAN,
            em: f64::NAN,
            status: format!("failed: {e}"),
        },
    }
}

/// Encodes and reconstructs every shape from its own samples and compares
/// with those samples. Failures are recorded per row.
pub fn evaluate_split(model: &Model, shapes: &[ShapeRecord], config: &EvalConfig) -> MetricReport {
    let rows = shapes
        .par_iter()
        .map(|s| {
            row(
                s.sample.shape_id,
                evaluate_shape(model, &s.sample, &s.sample.points, config),
            )
        })
        .collect();
    MetricReport::from_rows(rows)
}

/// Noised-input counterpart of [`evaluate_split`]: vertices are perturbed,
/// the surface is resampled, and the reconstruction is compared with the
/// clean samples. A zero stddev uses the clean samples unchanged.
pub fn noise_experiment(
    model: &Model,
    shapes: &[ShapeRecord],
    stddevs: &[f64],
    config: &EvalConfig,
) -> Vec<(f64, MetricReport)> {
    stddevs
        .iter()
        .map(|&sd| {
            let rows = shapes
                .par_iter()
                .map(|s| {
                    let id = s.sample.shape_id;
                    let result = (|| {
                        if sd == 0.0 {
                            return evaluate_shape(model, &s.sample, &s.sample.points, config);
                        }
                        let seed = config.seed ^ (id as u64).wrapping_mul(0x9E37_79B9);
                        let noisy = add_vertex_noise(&s.mesh, sd, seed)?;
                        let input = sample_surface(&noisy, s.sample.len(), seed)?;
                        evaluate_shape(model, &input, &s.sample.points, config)
                    })();
                    row(id, result)
                })
                .collect();
            (sd, MetricReport::from_rows(rows))
        })
        .collect()
}

/// Mean Killing integrand `‖Jv + Jvᵀ‖²` over stages, codes and points.
pub fn isometry_defect<F: VelocityField + ?Sized>(
    field: &F,
    latents: &[Vec<f64>],
    points: &[f64],
) -> Result<f64> {
    let d = field.dim();
    if latents.is_empty() || points.is_empty() {
        return Err(Error::Empty("latents or points"));
    }
    let n = points.len() / d;
    let mut total = 0.0;
    for z in latents {
        for k in 0..field.stages() {
            let (_, jac) = field.eval_jac(k, points, z)?;
            total += jac
                .chunks_exact(d * d)
                .map(|j| killing_integrand(j, d))
                .sum::<f64>();
        }
    }
    Ok(total / (latents.len() * field.stages() * n) as f64)
}

/// Mean over vertices of the variance, across stages, of the speed applied
/// to each vertex (`speeds[stage][vertex]`).
pub fn temporal_speed_variance(speeds: &[Vec<f64>]) -> f64 {
    let stages = speeds.len();
    if stages == 0 || speeds[0].is_empty() {
        return 0.0;
    }
    let n = speeds[0].len();
    (0..n)
        .map(|i| {
            let mean = speeds.iter().map(|s| s[i]).sum::<f64>() / stages as f64;
            speeds.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / stages as f64
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests;
