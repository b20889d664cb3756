//! Training objective: surface fidelity, off-surface penalty, eikonal term,
//! the Killing + L² velocity norm, the pointwise displacement baseline and
//! the occupancy cross-entropy alternative.
//!
//! Every term exists twice: as a plain evaluation over any
//! [`VelocityField`] (used for reporting and closed-form checks) and
//! recorded on a tape for training, where one reverse sweep gives the
//! template, velocity and latent gradients.

use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{deformed_implicit_batch, integrate_forward, record_implicit};
use crate::geometry::SurfaceSample;
use crate::network::{ParamGradient, TemplateNet, VelocityField, VelocityNetStack};
use crate::rng;
use crate::tape::{Mat, Tape, Var};

pub const HUBER_DELTA: f64 = 0.25;
pub const BCE_LOGIT_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sigma2: f64,
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub eta: f64,
    pub c_pw: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::rectangles()
    }
}

impl LossWeights {
    pub fn rectangles() -> Self {
        Self {
            sigma2: 0.025,
            tau: 0.01,
            lambda: 0.005,
            beta: 1.5,
            alpha: 100.0,
            eta: 0.05,
            c_pw: 0.1,
            gamma: 1e-4,
        }
    }

    pub fn liver() -> Self {
        Self {
            sigma2: 0.002,
            eta: 50.0,
            ..Self::rectangles()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma2,
            self.tau,
            self.lambda,
            self.beta,
            self.alpha,
            self.eta,
            self.c_pw,
            self.gamma,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "loss weights must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Which deformation regulariser enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Riemannian,
    Pointwise,
}

/// Data term: oriented surface points or labelled occupancy samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    #[default]
    Surface,
    Occupancy,
}

/// Batch means of every term (unweighted) and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub on_surface: f64,
    pub normal_term: f64,
    pub off_surface: f64,
    pub eikonal: f64,
    pub riemannian: f64,
    pub pointwise: f64,
    pub occupancy: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, c: &TermCoefficients) -> f64 {
        c.surface * self.on_surface
            + c.normal * self.normal_term
            + c.off_surface * self.off_surface
            + c.eikonal * self.eikonal
            + c.riemannian * self.riemannian
            + c.pointwise * self.pointwise
            + c.occupancy * self.occupancy
    }

    fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("on_surface", self.on_surface),
            ("normal", self.normal_term),
            ("off_surface", self.off_surface),
            ("eikonal", self.eikonal),
            ("riemannian", self.riemannian),
            ("pointwise", self.pointwise),
            ("occupancy", self.occupancy),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.terms().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!("loss term {name} = {v}"))),
            None => Ok(()),
        }
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, c: f64) {
        self.on_surface += c * other.on_surface;
        self.normal_term += c * other.normal_term;
        self.off_surface += c * other.off_surface;
        self.eikonal += c * other.eikonal;
        self.riemannian += c * other.riemannian;
        self.pointwise += c * other.pointwise;
        self.occupancy += c * other.occupancy;
        self.total += c * other.total;
    }

    pub const CSV_HEADER: &'static str =
        "epoch,lr_latent,lr_template,lr_velocity,on_surface,normal,off_surface,eikonal,riemannian,pointwise,occupancy,total";

    pub fn csv_row(&self, epoch: usize, lrs: [f64; 3]) -> String {
        let mut row = format!("{epoch},{},{},{}", lrs[0], lrs[1], lrs[2]);
        for (_, v) in self.terms() {
            let _ = write!(row, ",{v}");
        }
        row
    }
}

/// Multipliers of the individual terms inside the objective. Per-shape
/// terms are averaged over the batch; the eikonal term is added once.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermCoefficients {
    pub surface: f64,
    pub normal: f64,
    pub off_surface: f64,
    pub alpha: f64,
    pub eikonal: f64,
    pub riemannian: f64,
    pub eta: f64,
    pub pointwise: f64,
    pub occupancy: f64,
}

impl TermCoefficients {
    pub fn new(w: &LossWeights, mode: Mode, fidelity: Fidelity) -> Self {
        let (surface, normal, occupancy) = match fidelity {
            Fidelity::Surface => (1.0, w.tau, 0.0),
            Fidelity::Occupancy => (0.0, 0.0, 1.0),
        };
        Self {
            surface,
            normal,
            off_surface: w.beta,
            alpha: w.alpha,
            eikonal: w.lambda,
            riemannian: if mode == Mode::Riemannian {
                w.sigma2
            } else {
                0.0
            },
            eta: w.eta,
            pointwise: if mode == Mode::Pointwise { w.c_pw } else { 0.0 },
            occupancy,
        }
    }
}

/// `⟨a, b⟩ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn f_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / na.max(nb).max(1e-8)
}

/// Quadratic below `delta`, linear above.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Monte Carlo subsampling: `count` distinct indices (or all when `None` or
/// larger than the set), reproducible from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McSampler {
    pub count: Option<usize>,
    pub seed: u64,
}

impl McSampler {
    pub fn all() -> Self {
        Self {
            count: None,
            seed: 0,
        }
    }

    pub fn indices(&self, len: usize) -> Vec<usize> {
        match self.count {
            Some(c) if c < len => {
                let mut r = rng::stream(self.seed, &[0x4D43]);
                let mut idx = index::sample(&mut r, len, c).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    }
}

/// Per-point `(|I|, 1 − F_cos(∇I, n))` at the sampled surface points.
pub fn on_surface_values<F: VelocityField + ?Sized>(
    tpl: &TemplateNet,
    field: &F,
    z: &[f64],
    sample: &SurfaceSample,
    mc: &McSampler,
) -> Result<Vec<(f64, f64)>> {
    if sample.is_empty() {
        return Err(Error::Empty("surface sample"));
    }
    let sub = sample.select(&mc.indices(sample.len()));
    let (values, grads) =
        deformed_implicit_batch(tpl, field, &sub.points.coords, z, field.stages())?;
    let d = sub.dim();
    Ok(values
        .iter()
        .zip(grads.chunks_exact(d))
        .enumerate()
        .map(|(i, (v, g))| (v.abs(), 1.0 - f_cos(g, sub.normal(i))))
        .collect())
}

/// `E[|I(x,z,1)| + τ(1 − F_cos(∇I, n))]` over the sampled surface points.
pub fn on_surface_fidelity<F: VelocityField + ?Sized>(
    tpl: &TemplateNet,
    field: &F,
    z: &[f64],
    sample: &SurfaceSample,
    tau: f64,
    mc: &McSampler,
) -> Result<f64> {
    let vals = on_surface_values(tpl, field, z, sample, mc)?;
    Ok(vals.iter().map(|(a, c)| a + tau * c).sum::<f64>() / vals.len() as f64)
}

/// `E[exp(−α|I(x,z,1)|)]` over domain points.
pub fn off_surface_penalty<F: VelocityField + ?Sized>(
    tpl: &TemplateNet,
    field: &F,
    z: &[f64],
    domain_points: &[f64],
    alpha: f64,
) -> Result<f64> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::invalid("alpha must be positive"));
    }
    if domain_points.is_empty() {
        return Err(Error::Empty("domain points"));
    }
    let traj = integrate_forward(field, domain_points, z)?;
    let values = tpl.values(traj.end())?;
    Ok(values.iter().map(|v| (-alpha * v.abs()).exp()).sum::<f64>() / values.len() as f64)
}

/// `E|‖∇f‖ − 1|` over the union of both point sets.
pub fn eikonal_loss(tpl: &TemplateNet, uniform: &[f64], warped: &[f64]) -> Result<f64> {
    let mut pts = uniform.to_vec();
    pts.extend_from_slice(warped);
    if pts.is_empty() {
        return Err(Error::Empty("eikonal points"));
    }
    let (_, grads) = tpl.eval_batch(&pts)?;
    let d = tpl.dim();
    let n = grads.len() / d;
    Ok(grads
        .chunks_exact(d)
        .map(|g| (g.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .sum::<f64>()
        / n as f64)
}

/// `‖J + Jᵀ‖_F²` of one row-major `d×d` Jacobian.
pub fn killing_integrand(jac: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for a in 0..d {
        for b in 0..d {
            let e = jac[a * d + b] + jac[b * d + a];
            acc += e * e;
        }
    }
    acc
}

/// `(1/K) Σ_k |Ω|·E[‖Jv_k + Jv_kᵀ‖_F² + η‖v_k‖²]` at the given (unflowed)
/// domain points.
pub fn riemannian_regularizer<F: VelocityField + ?Sized>(
    field: &F,
    z: &[f64],
    domain_points: &[f64],
    eta: f64,
) -> Result<f64> {
    if domain_points.is_empty() {
        return Err(Error::Empty("domain points"));
    }
    let d = field.dim();
    let n = domain_points.len() / d;
    let volume = (1usize << d) as f64;
    let mut acc = 0.0;
    for k in 0..field.stages() {
        let (v, jac) = field.eval_jac(k, domain_points, z)?;
        let mut s = 0.0;
        for p in 0..n {
            let vv: f64 = v[p * d..(p + 1) * d].iter().map(|x| x * x).sum();
            s += killing_integrand(&jac[p * d * d..(p + 1) * d * d], d) + eta * vv;
        }
        acc += volume * s / n as f64;
    }
    Ok(acc / field.stages() as f64)
}

/// Stages at which the pointwise baseline measures displacement:
/// multiples of `⌊K/4⌋` up to `K`.
pub fn pointwise_stages(k: usize) -> Result<Vec<usize>> {
    if k < 4 {
        return Err(Error::invalid(format!(
            "pointwise loss needs K ≥ 4, got {k}"
        )));
    }
    let q = k / 4;
    Ok((1..=k / q).map(|i| q * i).collect())
}

/// `Σ_{t∈T} E_p[Huber(‖φ_t(p) − p‖)]`.
pub fn pointwise_baseline_loss<F: VelocityField + ?Sized>(
    field: &F,
    z: &[f64],
    points: &[f64],
) -> Result<f64> {
    let stages = pointwise_stages(field.stages())?;
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    let d = field.dim();
    let traj = integrate_forward(field, points, z)?;
    let n = points.len() / d;
    Ok(stages
        .iter()
        .map(|t| {
            traj.positions[*t]
                .chunks_exact(d)
                .zip(points.chunks_exact(d))
                .map(|(a, b)| {
                    huber(
                        a.iter()
                            .zip(b)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt(),
                        HUBER_DELTA,
                    )
                })
                .sum::<f64>()
                / n as f64
        })
        .sum())
}

fn bce(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross entropy of `sigmoid(10·I(x,z,1))` against labels.
pub fn occupancy_bce_fidelity<F: VelocityField + ?Sized>(
    tpl: &TemplateNet,
    field: &F,
    z: &[f64],
    points: &[f64],
    labels: &[f64],
) -> Result<f64> {
    if labels.is_empty() || labels.len() * field.dim() != points.len() {
        return Err(Error::ShapeMismatch("one label per point required".into()));
    }
    if labels.iter().any(|l| *l != 0.0 && *l != 1.0) {
        return Err(Error::invalid("occupancy labels must be 0 or 1"));
    }
    let traj = integrate_forward(field, points, z)?;
    let values = tpl.values(traj.end())?;
    Ok(values
        .iter()
        .zip(labels)
        .map(|(v, y)| bce(BCE_LOGIT_SCALE * v, *y))
        .sum::<f64>()
        / labels.len() as f64)
}

/// Data term for a single code with frozen networks, and its gradient in `z`.
///
/// Without labels this is `mean |I(x, z, 1)|` over `points`; with labels it
/// is the occupancy cross-entropy.
pub fn latent_objective(
    tpl: &TemplateNet,
    stack: &VelocityNetStack,
    z: &[f64],
    points: &[f64],
    labels: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let d = stack.dim();
    if z.len() != stack.d_z() {
        return Err(Error::ShapeMismatch(format!(
            "latent of length {} for d_z = {}",
            z.len(),
            stack.d_z()
        )));
    }
    if points.is_empty() || points.len() % d != 0 {
        return Err(Error::ShapeMismatch(
            "points must be a non-empty multiple of the dimension".into(),
        ));
    }
    let n = points.len() / d;
    if labels.is_some_and(|l| l.len() != n) {
        return Err(Error::ShapeMismatch("one label per point required".into()));
    }
    let mut tape = Tape::new();
    let tv = tpl.leaves(&mut tape, false);
    let vv = stack.leaves(&mut tape, false);
    let zv = tape.param(Mat::from_vec(1, z.len(), z.to_vec()));
    let x0 = tape.constant(Mat::from_vec(n, d, points.to_vec()));
    let (value, _, _) = record_implicit(&mut tape, tpl, &tv, stack, &vv, zv, x0, false);
    let per_point = match labels {
        Some(l) => {
            let logits = tape.scale(value, BCE_LOGIT_SCALE);
            tape.bce_logits(logits, l.to_vec())
        }
        None => tape.abs(value),
    };
    let root = tape.mean(per_point);
    let loss = tape.scalar(root);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("latent data term = {loss}")));
    }
    let g = tape.backward(root);
    let gz = g
        .get(zv)
        .map_or_else(|| vec![0.0; z.len()], |m| m.data.clone());
    Ok((loss, gz))
}

/// Monte Carlo draws for one shape of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDraw {
    /// Row of the latent table.
    pub shape: usize,
    pub z: Vec<f64>,
    pub surface_points: Vec<f64>,
    pub normals: Vec<f64>,
    pub domain_points: Vec<f64>,
    /// Labelled points for the occupancy data term.
    pub occupancy: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub shapes: Vec<ShapeDraw>,
    pub eikonal_points: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    pub template: ParamGradient,
    pub velocity: ParamGradient,
    /// `(shape, d loss / d z)` in batch order.
    pub latents: Vec<(usize, Vec<f64>)>,
}

struct ShapeResult {
    terms: LossBreakdown,
    warped: Vec<f64>,
    grads: Option<(ParamGradient, ParamGradient, Vec<f64>)>,
}

fn mean_of(tape: &mut Tape, v: Var) -> Var {
    tape.mean(v)
}

/// Killing integrand `‖J + Jᵀ‖²` per row from Jacobian columns.
fn killing_on_tape(tape: &mut Tape, cols: &[Var]) -> Var {
    let d = cols.len();
    let mut acc: Option<Var> = None;
    for a in 0..d {
        for b in 0..d {
            let x = tape.col(cols[b], a);
            let y = tape.col(cols[a], b);
            let s = tape.add(x, y);
            let sq = tape.square(s);
            acc = Some(match acc {
                Some(p) => tape.add(p, sq),
                None => sq,
            });
        }
    }
    acc.expect("dim ≥ 1")
}

fn shape_terms(
    tpl: &TemplateNet,
    stack: &VelocityNetStack,
    draw: &ShapeDraw,
    c: &TermCoefficients,
    batch_scale: f64,
    want_grad: bool,
) -> Result<ShapeResult> {
    let d = stack.dim();
    let k_total = stack.stages();
    let mut tape = Tape::new();
    let tv = tpl.leaves(&mut tape, want_grad);
    let vv = stack.leaves(&mut tape, want_grad);
    let z = if want_grad {
        tape.param(Mat::from_vec(1, draw.z.len(), draw.z.clone()))
    } else {
        tape.constant(Mat::from_vec(1, draw.z.len(), draw.z.clone()))
    };
    let mut terms = LossBreakdown::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();

    let ns = draw.surface_points.len() / d;
    let nu = draw.domain_points.len() / d;
    let need_surface =
        ns > 0 && (c.surface != 0.0 || c.normal != 0.0 || c.pointwise != 0.0 || c.eikonal != 0.0);
    let mut warped = Vec::new();
    let mut surface_flow = None;
    if need_surface {
        let x0 = tape.constant(Mat::from_vec(ns, d, draw.surface_points.clone()));
        let with_grad = c.normal != 0.0;
        let (value, grad, flow) =
            record_implicit(&mut tape, tpl, &tv, stack, &vv, z, x0, with_grad);
        let a = tape.abs(value);
        let on = mean_of(&mut tape, a);
        terms.on_surface = tape.scalar(on);
        parts.push((on, c.surface));
        if let Some(g) = grad {
            let normals = tape.constant(Mat::from_vec(ns, d, draw.normals.clone()));
            let dot = tape.row_dot(g, normals);
            let nrm = tape.row_norm(g);
            let floor = draw
                .normals
                .chunks_exact(d)
                .map(|n| n.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8))
                .collect();
            let den = tape.max_const(nrm, floor);
            let fc = tape.div(dot, den);
            let neg = tape.scale(fc, -1.0);
            let one_minus = tape.add_const(neg, 1.0);
            let nt = mean_of(&mut tape, one_minus);
            terms.normal_term = tape.scalar(nt);
            parts.push((nt, c.normal));
        }
        warped = tape
            .value(*flow.positions.last().expect("non-empty"))
            .data
            .clone();
        surface_flow = Some(flow);
    }

    let mut domain_flow = None;
    if nu > 0 && (c.off_surface != 0.0 || c.pointwise != 0.0) {
        let x0 = tape.constant(Mat::from_vec(nu, d, draw.domain_points.clone()));
        let (value, _, flow) = record_implicit(&mut tape, tpl, &tv, stack, &vv, z, x0, false);
        if c.off_surface != 0.0 {
            let a = tape.abs(value);
            let s = tape.scale(a, -c.alpha);
            let e = tape.exp(s);
            let off = mean_of(&mut tape, e);
            terms.off_surface = tape.scalar(off);
            parts.push((off, c.off_surface));
        }
        domain_flow = Some(flow);
    }

    if nu > 0 && c.riemannian != 0.0 {
        let x = tape.constant(Mat::from_vec(nu, d, draw.domain_points.clone()));
        let volume = (1usize << d) as f64;
        let mut stage_terms = Vec::with_capacity(k_total);
        for net in &vv {
            let out = stack.build(&mut tape, net, x, z, true);
            let kill = killing_on_tape(&mut tape, &out.cols);
            let vsq = tape.row_dot(out.v, out.v);
            let vsq = tape.scale(vsq, c.eta);
            let integrand = tape.add(kill, vsq);
            stage_terms.push(mean_of(&mut tape, integrand));
        }
        let all = tape.concat_cols(&stage_terms);
        let r = tape.mean(all);
        let r = tape.scale(r, volume);
        terms.riemannian = tape.scalar(r);
        parts.push((r, c.riemannian));
    }

    if c.pointwise != 0.0 {
        let stages = pointwise_stages(k_total)?;
        let total_points =
            (if need_surface { ns } else { 0 }) + (if domain_flow.is_some() { nu } else { 0 });
        let mut sums = Vec::new();
        for t in &stages {
            for flow in [surface_flow.as_ref(), domain_flow.as_ref()]
                .into_iter()
                .flatten()
            {
                let disp = tape.sub(flow.positions[*t], flow.positions[0]);
                let r = tape.row_norm(disp);
                let h = tape.huber(r, HUBER_DELTA);
                sums.push(tape.sum(h));
            }
        }
        if !sums.is_empty() {
            let all = tape.concat_cols(&sums);
            let s = tape.sum(all);
            let pw = tape.scale(s, 1.0 / total_points as f64);
            terms.pointwise = tape.scalar(pw);
            parts.push((pw, c.pointwise));
        }
    }

    if c.occupancy != 0.0 {
        let (pts, labels) = draw.occupancy.as_ref().ok_or_else(|| {
            Error::invalid("occupancy data term requested without labelled points")
        })?;
        let n = labels.len();
        let x0 = tape.constant(Mat::from_vec(n, d, pts.clone()));
        let (value, _, _) = record_implicit(&mut tape, tpl, &tv, stack, &vv, z, x0, false);
        let logits = tape.scale(value, BCE_LOGIT_SCALE);
        let b = tape.bce_logits(logits, labels.clone());
        let occ = mean_of(&mut tape, b);
        terms.occupancy = tape.scalar(occ);
        parts.push((occ, c.occupancy));
    }

    let grads = if want_grad && !parts.is_empty() {
        let weighted: Vec<Var> = parts
            .iter()
            .map(|(v, w)| tape.scale(*v, w * batch_scale))
            .collect();
        let cat = tape.concat_cols(&weighted);
        let root = tape.sum(cat);
        let g = tape.backward(root);
        let mut gt = ParamGradient::zeros(tpl.param_count());
        tv.accumulate(&g, &mut gt);
        let mut gv = ParamGradient::zeros(stack.param_count());
        for net in &vv {
            net.accumulate(&g, &mut gv);
        }
        let gz = g
            .get(z)
            .map_or_else(|| vec![0.0; draw.z.len()], |m| m.data.clone());
        Some((gt, gv, gz))
    } else if want_grad {
        Some((
            ParamGradient::zeros(tpl.param_count()),
            ParamGradient::zeros(stack.param_count()),
            vec![0.0; draw.z.len()],
        ))
    } else {
        None
    };
    Ok(ShapeResult {
        terms,
        warped,
        grads,
    })
}

fn eikonal_terms(
    tpl: &TemplateNet,
    points: Vec<f64>,
    coeff: f64,
    want_grad: bool,
) -> (f64, Option<ParamGradient>) {
    let d = tpl.dim();
    let n = points.len() / d;
    let mut tape = Tape::new();
    let tv = tpl.leaves(&mut tape, want_grad);
    let x = tape.constant(Mat::from_vec(n, d, points));
    let out = tpl.build(&mut tape, &tv, x, true);
    let nrm = tape.row_norm(out.grad.expect("requested"));
    let dev = tape.add_const(nrm, -1.0);
    let a = tape.abs(dev);
    let e = tape.mean(a);
    let value = tape.scalar(e);
    let grad = want_grad.then(|| {
        let root = tape.scale(e, coeff);
        let g = tape.backward(root);
        let mut gt = ParamGradient::zeros(tpl.param_count());
        tv.accumulate(&g, &mut gt);
        gt
    });
    (value, grad)
}

/// Evaluates the batch objective and, if asked, its gradients.
///
/// `total = (1/B) Σ_i [fidelity_i + β·off_i + σ²·R_i | c_pw·PW_i] + λ·eikonal`,
/// with the eikonal points being `batch.eikonal_points` plus every shape's
/// warped surface points, treated as constants.
pub fn batch_objective(
    tpl: &TemplateNet,
    stack: &VelocityNetStack,
    batch: &Batch,
    c: &TermCoefficients,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<BatchGradients>)> {
    if batch.shapes.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let d = stack.dim();
    if tpl.dim() != d {
        return Err(Error::ShapeMismatch(
            "template and velocity dims differ".into(),
        ));
    }
    for s in &batch.shapes {
        if s.surface_points.len() % d != 0
            || s.domain_points.len() % d != 0
            || s.normals.len() != s.surface_points.len()
            || s.z.len() != stack.d_z()
        {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent draw for shape {}",
                s.shape
            )));
        }
    }
    let scale = 1.0 / batch.shapes.len() as f64;
    let results: Vec<Result<ShapeResult>> = batch
        .shapes
        .par_iter()
        .map(|s| shape_terms(tpl, stack, s, c, scale, want_grad))
        .collect();
    let mut breakdown = LossBreakdown::default();
    let mut grads = want_grad.then(|| BatchGradients {
        template: ParamGradient::zeros(tpl.param_count()),
        velocity: ParamGradient::zeros(stack.param_count()),
        latents: Vec::new(),
    });
    let mut eik_points = batch.eikonal_points.clone();
    for (s, r) in batch.shapes.iter().zip(results) {
        let r = r?;
        breakdown.add_scaled(&r.terms, scale);
        eik_points.extend_from_slice(&r.warped);
        if let (Some(acc), Some((gt, gv, gz))) = (grads.as_mut(), r.grads) {
            acc.template.add_assign(&gt)?;
            acc.velocity.add_assign(&gv)?;
            acc.latents.push((s.shape, gz));
        }
    }
    if c.eikonal != 0.0 && !eik_points.is_empty() {
        let (e, g) = eikonal_terms(tpl, eik_points, c.eikonal, want_grad);
        breakdown.eikonal = e;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.template.add_assign(&g)?;
        }
    }
    breakdown.total = breakdown.weighted_total(c);
    breakdown.check_finite()?;
    Ok((breakdown, grads))
}

/// Loss breakdown of a batch under the given weights and regulariser.
pub fn total_training_loss(
    tpl: &TemplateNet,
    stack: &VelocityNetStack,
    batch: &Batch,
    weights: &LossWeights,
    mode: Mode,
    fidelity: Fidelity,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let c = TermCoefficients::new(weights, mode, fidelity);
    Ok(batch_objective(tpl, stack, batch, &c, false)?.0)
}

#[cfg(test)]
mod tests;
