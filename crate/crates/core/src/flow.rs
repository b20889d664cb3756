//! Forward-Euler integration of the stage-wise velocity field and the
//! deformed implicit function `I(x, z, t) = f(φ_t(x))`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::io::save_obj;
use crate::geometry::{PointCloud, ShapeMesh};
use crate::network::{LayerVars, TemplateNet, VelocityField, VelocityNetStack};
use crate::tape::{Tape, Var};

/// Positions of a point set at every stage time `k/K`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// `positions[k]` is the flat n×dim array at time `times[k]`.
    pub positions: Vec<Vec<f64>>,
}

impl FlowTrajectory {
    pub fn stage_count(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn end(&self) -> &[f64] {
        self.positions.last().expect("trajectory has a start")
    }

    pub fn cloud(&self, stage: usize) -> PointCloud {
        PointCloud {
            dim: self.dim,
            coords: self.positions[stage].clone(),
        }
    }
}

const BOUNDARY_SLACK: f64 = 1e-12;

fn check_inside(points: &[f64], stage: usize) -> Result<()> {
    if let Some(bad) = points.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "flow positions at stage {stage} ({bad})"
        )));
    }
    let m = points.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 1.0 + BOUNDARY_SLACK {
        return Err(Error::BoundaryViolation(m));
    }
    Ok(())
}

fn check_input<F: VelocityField + ?Sized>(field: &F, points: &[f64]) -> Result<()> {
    if points.len() % field.dim() != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} coordinates for dim {}",
            points.len(),
            field.dim()
        )));
    }
    check_inside(points, 0)
}

/// Applies stages `from..to` (0-based, half-open) of the forward map.
pub fn integrate_stages<F: VelocityField + ?Sized>(
    field: &F,
    points: &[f64],
    z: &[f64],
    from: usize,
    to: usize,
) -> Result<FlowTrajectory> {
    let k_total = field.stages();
    if from > to || to > k_total {
        return Err(Error::invalid(format!(
            "stage range {from}..{to} outside 0..{k_total}"
        )));
    }
    check_input(field, points)?;
    let dt = 1.0 / k_total as f64;
    let mut positions = vec![points.to_vec()];
    for k in from..to {
        let x = positions.last().expect("non-empty");
        let v = field.eval(k, x, z)?;
        let next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        check_inside(&next, k + 1)?;
        positions.push(next);
    }
    Ok(FlowTrajectory {
        dim: field.dim(),
        times: (from..=to).map(|k| k as f64 / k_total as f64).collect(),
        positions,
    })
}

/// `x_k = x_{k-1} + v_k(x_{k-1}, z)/K` for `k = 1..K`.
pub fn integrate_forward<F: VelocityField + ?Sized>(
    field: &F,
    points: &[f64],
    z: &[f64],
) -> Result<FlowTrajectory> {
    integrate_stages(field, points, z, 0, field.stages())
}

/// `y_k = y_{k-1} − v_{K+1−k}(y_{k-1}, z)/K`: the negated field in reverse
/// stage order, an approximate inverse of [`integrate_forward`].
pub fn integrate_reverse<F: VelocityField + ?Sized>(
    field: &F,
    points: &[f64],
    z: &[f64],
) -> Result<FlowTrajectory> {
    check_input(field, points)?;
    let k_total = field.stages();
    let dt = 1.0 / k_total as f64;
    let mut positions = vec![points.to_vec()];
    for step in 1..=k_total {
        let y = positions.last().expect("non-empty");
        let v = field.eval(k_total - step, y, z)?;
        let next: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a - dt * b).collect();
        check_inside(&next, step)?;
        positions.push(next);
    }
    Ok(FlowTrajectory {
        dim: field.dim(),
        times: (0..=k_total).map(|k| k as f64 / k_total as f64).collect(),
        positions,
    })
}

/// Maps a grid time to its stage index.
pub fn stage_of_time(t: f64, stages: usize) -> Result<usize> {
    let s = t * stages as f64;
    let r = s.round();
    if !(0.0..=stages as f64).contains(&r) || (s - r).abs() > 1e-9 {
        return Err(Error::TimeNotOnGrid(t));
    }
    Ok(r as usize)
}

/// `I(x, z, t)` and its spatial gradient at a batch of points, with
/// `t = stage/K`. The gradient is pulled back through every Euler step:
/// `g ← g + Jv_kᵀ g / K`.
pub fn deformed_implicit_batch<F: VelocityField + ?Sized>(
    tpl: &TemplateNet,
    field: &F,
    points: &[f64],
    z: &[f64],
    stage: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = field.dim();
    let dt = 1.0 / field.stages() as f64;
    let traj = integrate_stages(field, points, z, 0, stage)?;
    let (values, mut g) = tpl.eval_batch(traj.end())?;
    for k in (0..stage).rev() {
        let (_, jac) = field.eval_jac(k, &traj.positions[k], z)?;
        for (p, gp) in g.chunks_exact_mut(d).enumerate() {
            let block = &jac[p * d * d..(p + 1) * d * d];
            let pulled: Vec<f64> = (0..d)
                .map(|j| gp[j] + dt * (0..d).map(|i| block[i * d + j] * gp[i]).sum::<f64>())
                .collect();
            gp.copy_from_slice(&pulled);
        }
    }
    Ok((values, g))
}

/// Single-point form of [`deformed_implicit_batch`] taking a grid time.
pub fn deformed_implicit<F: VelocityField + ?Sized>(
    tpl: &TemplateNet,
    field: &F,
    x: &[f64],
    z: &[f64],
    t: f64,
) -> Result<(f64, Vec<f64>)> {
    let stage = stage_of_time(t, field.stages())?;
    if x.len() != field.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point of length {} for dim {}",
            x.len(),
            field.dim()
        )));
    }
    let (v, g) = deformed_implicit_batch(tpl, field, x, z, stage)?;
    Ok((v[0], g))
}

/// Tape handles of a recorded forward flow.
#[derive(Clone, Debug)]
pub struct TapeFlow {
    /// K+1 n×dim position nodes.
    pub positions: Vec<Var>,
    /// Velocity nodes of each stage, evaluated at `positions[k]`.
    pub velocities: Vec<Var>,
    /// Jacobian columns per stage when requested (see `VelocityOut::cols`).
    pub jac_cols: Vec<Vec<Var>>,
}

/// Records all K Euler steps starting from the n×dim node `x0`.
pub fn record_flow(
    tape: &mut Tape,
    stack: &VelocityNetStack,
    vars: &[LayerVars],
    z: Var,
    x0: Var,
    with_jac: bool,
) -> TapeFlow {
    let dt = 1.0 / stack.stages() as f64;
    let mut flow = TapeFlow {
        positions: vec![x0],
        velocities: Vec::new(),
        jac_cols: Vec::new(),
    };
    for net in vars {
        let x = *flow.positions.last().expect("non-empty");
        let out = stack.build(tape, net, x, z, with_jac);
        let step = tape.scale(out.v, dt);
        flow.positions.push(tape.add(x, step));
        flow.velocities.push(out.v);
        flow.jac_cols.push(out.cols);
    }
    flow
}

/// Records `I(x, z, 1)` and optionally `∇_x I` on the tape.
#[allow(clippy::too_many_arguments)]
pub fn record_implicit(
    tape: &mut Tape,
    tpl: &TemplateNet,
    tpl_vars: &LayerVars,
    stack: &VelocityNetStack,
    vel_vars: &[LayerVars],
    z: Var,
    x0: Var,
    with_grad: bool,
) -> (Var, Option<Var>, TapeFlow) {
    let flow = record_flow(tape, stack, vel_vars, z, x0, with_grad);
    let end = *flow.positions.last().expect("non-empty");
    let out = tpl.build(tape, tpl_vars, end, with_grad);
    let grad = out.grad.map(|mut g| {
        let dt = 1.0 / stack.stages() as f64;
        for cols in flow.jac_cols.iter().rev() {
            let parts: Vec<Var> = cols.iter().map(|c| tape.row_dot(*c, g)).collect();
            let jt_g = tape.concat_cols(&parts);
            let step = tape.scale(jt_g, dt);
            g = tape.add(g, step);
        }
        g
    });
    (out.value, grad, flow)
}

/// Writes one OBJ per stage (`stage_000.obj`, …) with the mesh connectivity
/// and the trajectory's vertex positions, plus `manifest.csv`.
pub fn write_trajectory(
    dir: &Path,
    mesh: &ShapeMesh,
    traj: &FlowTrajectory,
) -> Result<Vec<PathBuf>> {
    if traj.positions.first().map(Vec::len) != Some(mesh.vertices.coords.len()) {
        return Err(Error::ShapeMismatch(
            "trajectory does not follow the mesh vertices".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("stage,time,file\n");
    let mut files = Vec::new();
    for (k, (t, pos)) in traj.times.iter().zip(&traj.positions).enumerate() {
        let name = format!("stage_{k:03}.obj");
        let stage_mesh = ShapeMesh {
            vertices: PointCloud::new(traj.dim, pos.clone())?,
            faces: mesh.faces.clone(),
        };
        save_obj(&dir.join(&name), &stage_mesh)?;
        manifest.push_str(&format!("{k},{t},{name}\n"));
        files.push(dir.join(name));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest)?;
    files.push(path);
    Ok(files)
}
