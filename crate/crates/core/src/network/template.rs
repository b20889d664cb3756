use rand_distr::{Distribution, Normal};

use super::layout::{LayerVars, Layout, ParamGradient};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Mat, Tape, Var};

const CHUNK: usize = 1024;

/// ReLU MLP `dim → width → … → 1` with `n_hidden + 2` affine layers, the
/// input concatenated back in at the middle layer, and the output clamped
/// to `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateNet {
    dim: usize,
    width: usize,
    n_hidden: usize,
    layout: Layout,
    pub params: Vec<f64>,
}

/// Tape handles of a template forward pass over `n` points.
#[derive(Clone, Copy, Debug)]
pub struct TemplateOut {
    /// n×1 clamped values.
    pub value: Var,
    /// n×dim spatial gradients, when requested.
    pub grad: Option<Var>,
}

impl TemplateNet {
    pub const CLAMP: f64 = 0.5;

    fn layout_for(dim: usize, width: usize, n_hidden: usize) -> Layout {
        let skip = Self::skip_index(n_hidden);
        let mut layout = Layout::default();
        layout.push(width, dim, true);
        for i in 1..=n_hidden {
            layout.push(width, if i == skip { width + dim } else { width }, true);
        }
        layout.push(
            1,
            if n_hidden + 1 == skip {
                width + dim
            } else {
                width
            },
            true,
        );
        layout
    }

    fn skip_index(n_hidden: usize) -> usize {
        (n_hidden + 2) / 2
    }

    pub fn zeros(dim: usize, width: usize, n_hidden: usize) -> Result<Self> {
        if !(dim == 2 || dim == 3) || width == 0 {
            return Err(Error::invalid(format!(
                "template needs dim 2 or 3 and width ≥ 1, got {dim}, {width}"
            )));
        }
        let layout = Self::layout_for(dim, width, n_hidden);
        let params = vec![0.0; layout.len()];
        Ok(Self {
            dim,
            width,
            n_hidden,
            layout,
            params,
        })
    }

    pub fn from_params(
        dim: usize,
        width: usize,
        n_hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(dim, width, n_hidden)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "template expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    /// Initialisation whose zero level set is close to the sphere of radius
    /// 0.5, with positive values inside.
    pub fn geometric(dim: usize, width: usize, n_hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(dim, width, n_hidden)?;
        let skip = Self::skip_index(n_hidden);
        let last = net.layout.layers.len() - 1;
        for (i, l) in net.layout.layers.clone().iter().enumerate() {
            let w = &mut net.params[l.offset..l.offset + l.weight_len()];
            if i == last {
                let fan_in = if i == skip { width } else { l.cols };
                let normal = Normal::new(-(std::f64::consts::PI / fan_in as f64).sqrt(), 1e-4)
                    .expect("valid normal");
                for (c, v) in w.iter_mut().enumerate() {
                    *v = if c < fan_in { normal.sample(rng) } else { 0.0 };
                }
                net.params[l.offset + l.weight_len()] = Self::CLAMP;
            } else {
                let normal = Normal::new(0.0, (2.0 / l.rows as f64).sqrt()).expect("valid normal");
                for r in 0..l.rows {
                    for c in 0..l.cols {
                        // the re-injected input starts switched off
                        let from_skip = i == skip && c >= width;
                        w[r * l.cols + c] = if from_skip { 0.0 } else { normal.sample(rng) };
                    }
                }
            }
        }
        Ok(net)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn leaves(&self, tape: &mut Tape, tracked: bool) -> LayerVars {
        self.layout.leaves(tape, &self.params, 0, tracked)
    }

    /// Records the forward pass at the n×dim points `x`.
    pub fn build(&self, tape: &mut Tape, vars: &LayerVars, x: Var, with_grad: bool) -> TemplateOut {
        let n = tape.value(x).rows;
        let d = self.dim;
        let skip = Self::skip_index(self.n_hidden);
        let units: Vec<Var> = if with_grad {
            (0..d)
                .map(|j| {
                    let mut e = Mat::zeros(n, d);
                    for r in 0..n {
                        e.data[r * d + j] = 1.0;
                    }
                    tape.constant(e)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut h = x;
        let mut tangents = units.clone();
        let last = self.layout.layers.len() - 1;
        for i in 0..=last {
            if i == skip {
                h = tape.concat_cols(&[h, x]);
                tangents = tangents
                    .iter()
                    .zip(&units)
                    .map(|(t, e)| tape.concat_cols(&[*t, *e]))
                    .collect();
            }
            let pre = tape.linear(h, vars.w(i), vars.b(i));
            let pre_t: Vec<Var> = tangents
                .iter()
                .map(|t| tape.linear(*t, vars.w(i), None))
                .collect();
            if i < last {
                h = tape.relu(pre);
                tangents = pre_t
                    .iter()
                    .map(|t| tape.step_mask(*t, pre, 0.0, f64::INFINITY))
                    .collect();
            } else {
                let value = tape.clamp(pre, -Self::CLAMP, Self::CLAMP);
                let grad = with_grad.then(|| {
                    let cols: Vec<Var> = pre_t
                        .iter()
                        .map(|t| tape.step_mask(*t, pre, -Self::CLAMP, Self::CLAMP))
                        .collect();
                    tape.concat_cols(&cols)
                });
                return TemplateOut { value, grad };
            }
        }
        unreachable!("the template always has an output layer")
    }

    fn check_points(&self, points: &[f64]) -> Result<usize> {
        if points.len() % self.dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates for dim {}",
                points.len(),
                self.dim
            )));
        }
        Ok(points.len() / self.dim)
    }

    /// Values and spatial gradients (row-major n×dim) at a batch of points.
    pub fn eval_batch(&self, points: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_points(points)?;
        let mut values = Vec::with_capacity(points.len() / self.dim);
        let mut grads = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK * self.dim) {
            let mut tape = Tape::new();
            let vars = self.leaves(&mut tape, false);
            let x = tape.constant(Mat::from_vec(
                chunk.len() / self.dim,
                self.dim,
                chunk.to_vec(),
            ));
            let out = self.build(&mut tape, &vars, x, true);
            values.extend_from_slice(&tape.value(out.value).data);
            grads.extend_from_slice(&tape.value(out.grad.expect("requested")).data);
        }
        Ok((values, grads))
    }

    /// Values only.
    pub fn values(&self, points: &[f64]) -> Result<Vec<f64>> {
        self.check_points(points)?;
        let mut values = Vec::with_capacity(points.len() / self.dim);
        for chunk in points.chunks(CHUNK * self.dim) {
            let mut tape = Tape::new();
            let vars = self.leaves(&mut tape, false);
            let x = tape.constant(Mat::from_vec(
                chunk.len() / self.dim,
                self.dim,
                chunk.to_vec(),
            ));
            let out = self.build(&mut tape, &vars, x, false);
            values.extend_from_slice(&tape.value(out.value).data);
        }
        Ok(values)
    }

    /// Parameter gradient of `Σ cot_value·f(x) + Σ ⟨cot_grad, ∇f(x)⟩` over
    /// the batch.
    pub fn backprop(
        &self,
        points: &[f64],
        cot_value: &[f64],
        cot_grad: &[f64],
    ) -> Result<ParamGradient> {
        let n = self.check_points(points)?;
        if cot_value.len() != n || cot_grad.len() != n * self.dim {
            return Err(Error::ShapeMismatch(
                "cotangents do not match the evaluated batch".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, true);
        let x = tape.constant(Mat::from_vec(n, self.dim, points.to_vec()));
        let out = self.build(&mut tape, &vars, x, true);
        let grads = tape.backward_seeded(&[
            (out.value, Mat::from_vec(n, 1, cot_value.to_vec())),
            (
                out.grad.expect("requested"),
                Mat::from_vec(n, self.dim, cot_grad.to_vec()),
            ),
        ])?;
        let mut pg = ParamGradient::zeros(self.param_count());
        vars.accumulate(&grads, &mut pg);
        Ok(pg)
    }
}

/// Value and spatial gradient at a single point.
pub fn template_eval(net: &TemplateNet, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != net.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point of length {} for dim {}",
            x.len(),
            net.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("template input".into()));
    }
    let (v, g) = net.eval_batch(x)?;
    Ok((v[0], g))
}
