use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Mat, Tape, Var};

/// One affine layer inside a flat parameter buffer. The weight block is
/// `rows×cols` row-major (`out×in`); the bias, when present, follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub bias: bool,
}

impl Dense {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.rows } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias_slice<'a>(&self, params: &'a [f64]) -> Option<&'a [f64]> {
        self.bias
            .then(|| &params[self.offset + self.weight_len()..self.offset + self.len()])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<Dense>,
}

impl Layout {
    pub fn push(&mut self, rows: usize, cols: usize, bias: bool) -> usize {
        let offset = self.len();
        self.layers.push(Dense {
            rows,
            cols,
            offset,
            bias,
        });
        self.layers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.offset + l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Puts every layer of `params[base..]` on the tape.
    pub fn leaves(&self, tape: &mut Tape, params: &[f64], base: usize, tracked: bool) -> LayerVars {
        let p = &params[base..base + self.len()];
        let mut vars = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = Mat::from_vec(l.rows, l.cols, l.weight(p).to_vec());
            let b = l
                .bias_slice(p)
                .map(|b| Mat::from_vec(1, l.rows, b.to_vec()));
            let leaf = |tape: &mut Tape, m| {
                if tracked {
                    tape.param(m)
                } else {
                    tape.constant(m)
                }
            };
            let wv = leaf(tape, w);
            let bv = b.map(|b| leaf(tape, b));
            vars.push((wv, bv));
        }
        LayerVars {
            layout: self.clone(),
            base,
            vars,
        }
    }
}

/// Tape handles for one network's layers.
#[derive(Clone, Debug)]
pub struct LayerVars {
    layout: Layout,
    base: usize,
    pub vars: Vec<(Var, Option<Var>)>,
}

impl LayerVars {
    pub fn w(&self, i: usize) -> Var {
        self.vars[i].0
    }

    pub fn b(&self, i: usize) -> Option<Var> {
        self.vars[i].1
    }

    /// Adds the cotangents of these leaves into `out` (a buffer congruent
    /// with the full parameter vector the leaves were taken from).
    pub fn accumulate(&self, grads: &Gradients, out: &mut ParamGradient) {
        for (l, (w, b)) in self.layout.layers.iter().zip(&self.vars) {
            let start = self.base + l.offset;
            if let Some(g) = grads.get(*w) {
                for (o, v) in out.data[start..start + l.weight_len()]
                    .iter_mut()
                    .zip(&g.data)
                {
                    *o += v;
                }
            }
            if let Some(g) = b.and_then(|b| grads.get(b)) {
                let s = start + l.weight_len();
                for (o, v) in out.data[s..s + l.rows].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
        }
    }
}

/// Parameter cotangents, congruent with a network's flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGradient {
    pub data: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &ParamGradient) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} added to {}",
                other.len(),
                self.len()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
