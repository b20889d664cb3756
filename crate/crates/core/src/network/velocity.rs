use rand::Rng as _;

use super::layout::{LayerVars, Layout, ParamGradient};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{damping_parts, Mat, Tape, Var};

const CHUNK: usize = 1024;

/// Boundary damping factor: 1 well inside the domain, 0 on and outside its
/// boundary, a C¹ smoothstep across a band of width `eps`.
pub fn h_eps(x: &[f64], eps: f64) -> f64 {
    damping_parts(x, eps).0
}

/// A piecewise-constant-in-time velocity field made of `stages()`
/// stationary fields, each conditioned on a latent code.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn stages(&self) -> usize;
    /// Velocities (row-major n×dim) of stage `k` (0-based) at `points`.
    fn eval(&self, k: usize, points: &[f64], z: &[f64]) -> Result<Vec<f64>>;
    /// Velocities and Jacobians; the Jacobian block of point `p` is
    /// `jac[p*d*d + i*d + j] = ∂v_i/∂x_j`.
    fn eval_jac(&self, k: usize, points: &[f64], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// `K` stationary velocity networks `v_k(x, z) = h_ε(x)·net_k(x, z)`.
///
/// Each net is a tanh MLP: the first hidden features are `W₁x + b₁ + W_z z`
/// followed by `n_hidden` square layers and an affine output to `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNetStack {
    dim: usize,
    d_z: usize,
    width: usize,
    n_hidden: usize,
    stages: usize,
    /// `None` disables the boundary damping.
    pub eps: Option<f64>,
    layout: Layout,
    pub params: Vec<f64>,
}

/// Tape handles of one velocity net over `n` points.
#[derive(Clone, Debug)]
pub struct VelocityOut {
    /// n×dim velocities.
    pub v: Var,
    /// `cols[j]` is n×dim with row entries `∂v_i/∂x_j`, when requested.
    pub cols: Vec<Var>,
}

impl VelocityNetStack {
    pub fn zeros(
        dim: usize,
        d_z: usize,
        width: usize,
        n_hidden: usize,
        stages: usize,
        eps: Option<f64>,
    ) -> Result<Self> {
        if !(dim == 2 || dim == 3) || width == 0 || d_z == 0 || stages == 0 {
            return Err(Error::invalid(
                "velocity stack needs dim 2 or 3 and positive widths and stage count",
            ));
        }
        if eps.is_some_and(|e| e.is_nan() || e <= 0.0) {
            return Err(Error::invalid("damping width must be positive"));
        }
        let mut layout = Layout::default();
        layout.push(width, dim, true);
        layout.push(width, d_z, false);
        for _ in 0..n_hidden {
            layout.push(width, width, true);
        }
        layout.push(dim, width, true);
        let params = vec![0.0; layout.len() * stages];
        Ok(Self {
            dim,
            d_z,
            width,
            n_hidden,
            stages,
            eps,
            layout,
            params,
        })
    }

    /// Uniform fan-in initialisation, bound `1/√fan_in`, for every layer.
    pub fn uniform(
        dim: usize,
        d_z: usize,
        width: usize,
        n_hidden: usize,
        stages: usize,
        eps: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut s = Self::zeros(dim, d_z, width, n_hidden, stages, eps)?;
        let net_len = s.net_len();
        for k in 0..stages {
            for l in &s.layout.layers {
                let bound = 1.0 / (l.cols as f64).sqrt();
                let start = k * net_len + l.offset;
                for v in &mut s.params[start..start + l.len()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(s)
    }

    pub fn from_params(
        dim: usize,
        d_z: usize,
        width: usize,
        n_hidden: usize,
        stages: usize,
        eps: Option<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut s = Self::zeros(dim, d_z, width, n_hidden, stages, eps)?;
        if params.len() != s.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "velocity stack expects {} parameters, got {}",
                s.params.len(),
                params.len()
            )));
        }
        s.params = params;
        Ok(s)
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    /// Layout of a single net; net `k` starts at `k * net_len()`.
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn net_len(&self) -> usize {
        self.layout.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn net_params_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.net_len();
        &mut self.params[k * n..(k + 1) * n]
    }

    /// Sets the output layer of every net to the constant `c` (weights 0).
    pub fn set_constant_output(&mut self, c: &[f64]) {
        let out = *self.layout.layers.last().expect("output layer");
        for k in 0..self.stages {
            let p = self.net_params_mut(k);
            p[out.offset..out.offset + out.weight_len()].fill(0.0);
            p[out.offset + out.weight_len()..out.offset + out.len()].copy_from_slice(c);
        }
    }

    /// Upper bound on `|net_k(x, z)_i|` over all inputs (tanh features are
    /// bounded by 1). Euler steps cannot leave the domain when every bound
    /// is at most `8Kε/9`.
    pub fn output_bound(&self, k: usize) -> f64 {
        let out = *self.layout.layers.last().expect("output layer");
        let p = &self.params[k * self.net_len()..(k + 1) * self.net_len()];
        let w = out.weight(p);
        let b = out.bias_slice(p).expect("output bias");
        (0..out.rows)
            .map(|i| {
                w[i * out.cols..(i + 1) * out.cols]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
                    + b[i].abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn leaves(&self, tape: &mut Tape, tracked: bool) -> Vec<LayerVars> {
        (0..self.stages)
            .map(|k| {
                self.layout
                    .leaves(tape, &self.params, k * self.net_len(), tracked)
            })
            .collect()
    }

    /// Records net `k` (through `vars`) at the n×dim points `x` with latent
    /// row `z` (1×d_z).
    pub fn build(
        &self,
        tape: &mut Tape,
        vars: &LayerVars,
        x: Var,
        z: Var,
        with_jac: bool,
    ) -> VelocityOut {
        let n = tape.value(x).rows;
        let d = self.dim;
        let last = self.layout.layers.len() - 1;
        let zf = tape.linear(z, vars.w(1), None);
        let pre = tape.linear(x, vars.w(0), vars.b(0));
        let pre = tape.add_row(pre, zf);
        let mut tangents: Vec<Var> = if with_jac {
            (0..d)
                .map(|j| {
                    let mut e = Mat::zeros(n, d);
                    for r in 0..n {
                        e.data[r * d + j] = 1.0;
                    }
                    let e = tape.constant(e);
                    tape.linear(e, vars.w(0), None)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut h = tape.tanh(pre);
        let mut slope = tape.one_minus_sq(h);
        tangents = tangents.iter().map(|t| tape.mul(*t, slope)).collect();
        for i in 2..last {
            let pre = tape.linear(h, vars.w(i), vars.b(i));
            h = tape.tanh(pre);
            slope = tape.one_minus_sq(h);
            tangents = tangents
                .iter()
                .map(|t| {
                    let p = tape.linear(*t, vars.w(i), None);
                    tape.mul(p, slope)
                })
                .collect();
        }
        let raw = tape.linear(h, vars.w(last), vars.b(last));
        let raw_cols: Vec<Var> = tangents
            .iter()
            .map(|t| tape.linear(*t, vars.w(last), None))
            .collect();
        let Some(eps) = self.eps else {
            return VelocityOut {
                v: raw,
                cols: raw_cols,
            };
        };
        let damp = tape.damp(x, eps);
        let hcol = tape.col(damp, 0);
        let v = tape.col_scale(raw, hcol);
        let cols = raw_cols
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let a = tape.col_scale(*t, hcol);
                let dh = tape.col(damp, 1 + j);
                let b = tape.col_scale(raw, dh);
                tape.add(a, b)
            })
            .collect();
        VelocityOut { v, cols }
    }

    fn check(&self, k: usize, points: &[f64], z: &[f64]) -> Result<usize> {
        if k >= self.stages {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.stages,
            });
        }
        if z.len() != self.d_z {
            return Err(Error::ShapeMismatch(format!(
                "latent of length {} for d_z {}",
                z.len(),
                self.d_z
            )));
        }
        if points.len() % self.dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates for dim {}",
                points.len(),
                self.dim
            )));
        }
        Ok(points.len() / self.dim)
    }

    fn run(
        &self,
        k: usize,
        points: &[f64],
        z: &[f64],
        with_jac: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(k, points, z)?;
        let d = self.dim;
        let mut v = Vec::with_capacity(points.len());
        let mut jac = Vec::with_capacity(if with_jac { points.len() * d } else { 0 });
        for chunk in points.chunks(CHUNK * d) {
            let n = chunk.len() / d;
            let mut tape = Tape::new();
            let vars = self
                .layout
                .leaves(&mut tape, &self.params, k * self.net_len(), false);
            let x = tape.constant(Mat::from_vec(n, d, chunk.to_vec()));
            let zv = tape.constant(Mat::from_vec(1, self.d_z, z.to_vec()));
            let out = self.build(&mut tape, &vars, x, zv, with_jac);
            v.extend_from_slice(&tape.value(out.v).data);
            if with_jac {
                let cols: Vec<&Mat> = out.cols.iter().map(|c| tape.value(*c)).collect();
                for r in 0..n {
                    for i in 0..d {
                        for col in &cols {
                            jac.push(col.get(r, i));
                        }
                    }
                }
            }
        }
        Ok((v, jac))
    }

    /// Parameter and latent gradients of `Σ⟨cot_v, v⟩ + Σ⟨cot_jac, J⟩` for
    /// net `k` (0-based) over a batch. Jacobian cotangents use the same
    /// layout as [`VelocityField::eval_jac`].
    pub fn backprop(
        &self,
        k: usize,
        points: &[f64],
        z: &[f64],
        cot_v: &[f64],
        cot_jac: &[f64],
    ) -> Result<(ParamGradient, Vec<f64>)> {
        let n = self.check(k, points, z)?;
        let d = self.dim;
        if cot_v.len() != n * d || cot_jac.len() != n * d * d {
            return Err(Error::ShapeMismatch(
                "cotangents do not match the evaluated batch".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self
            .layout
            .leaves(&mut tape, &self.params, k * self.net_len(), true);
        let x = tape.constant(Mat::from_vec(n, d, points.to_vec()));
        let zv = tape.param(Mat::from_vec(1, self.d_z, z.to_vec()));
        let out = self.build(&mut tape, &vars, x, zv, true);
        let mut seeds = vec![(out.v, Mat::from_vec(n, d, cot_v.to_vec()))];
        for (j, col) in out.cols.iter().enumerate() {
            let mut m = Mat::zeros(n, d);
            for r in 0..n {
                for i in 0..d {
                    m.data[r * d + i] = cot_jac[r * d * d + i * d + j];
                }
            }
            seeds.push((*col, m));
        }
        let grads = tape.backward_seeded(&seeds)?;
        let mut pg = ParamGradient::zeros(self.param_count());
        vars.accumulate(&grads, &mut pg);
        let gz = grads
            .get(zv)
            .map_or_else(|| vec![0.0; self.d_z], |g| g.data.clone());
        Ok((pg, gz))
    }
}

impl VelocityField for VelocityNetStack {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stages(&self) -> usize {
        self.stages
    }

    fn eval(&self, k: usize, points: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(k, points, z, false)?.0)
    }

    fn eval_jac(&self, k: usize, points: &[f64], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.run(k, points, z, true)
    }
}

/// Velocity and row-major `dim×dim` Jacobian of net `k` (1-based) at one
/// point.
pub fn velocity_eval(
    stack: &VelocityNetStack,
    k: usize,
    x: &[f64],
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if k == 0 || k > stack.stages() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: stack.stages(),
        });
    }
    if x.len() != stack.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point of length {} for dim {}",
            x.len(),
            stack.dim()
        )));
    }
    stack.eval_jac(k - 1, x, z)
}
