//! Dense-grid check that, for fields vanishing on the boundary of
//! `[-1, 1]²`,
//!
//! `∫ ½‖Jv + Jvᵀ‖² + η‖v‖² dx = ∫ ⟨(η − Δ − ∇∇ᵀ) v, v⟩ dx`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BOUNDARY_TOL: f64 = 1e-9;

/// Planar vector fields for the identity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TestField {
    /// `amplitude · sin(m π x₁) sin(n π x₂)` with integer frequencies.
    Sine {
        amplitude: [f64; 2],
        freq: [u32; 2],
    },
    /// `sin(π x₁) sin(π x₂) · (−x₂, x₁)`; no analytic derivatives supplied.
    Swirl,
    Constant {
        value: [f64; 2],
    },
    Zero,
}

impl Default for TestField {
    fn default() -> Self {
        TestField::Sine {
            amplitude: [1.0, 1.0],
            freq: [1, 1],
        }
    }
}

/// First and second derivatives at a point: `d1[a][b] = ∂_a v_b`,
/// `d2[a][c][b] = ∂_a ∂_c v_b`.
struct Derivs {
    d1: [[f64; 2]; 2],
    d2: [[[f64; 2]; 2]; 2],
}

impl TestField {
    pub fn value(&self, x: [f64; 2]) -> [f64; 2] {
        match self {
            TestField::Sine { amplitude, freq } => {
                let s = (freq[0] as f64 * PI * x[0]).sin() * (freq[1] as f64 * PI * x[1]).sin();
                [amplitude[0] * s, amplitude[1] * s]
            }
            TestField::Swirl => {
                let s = (PI * x[0]).sin() * (PI * x[1]).sin();
                [-x[1] * s, x[0] * s]
            }
            TestField::Constant { value } => *value,
            TestField::Zero => [0.0, 0.0],
        }
    }

    fn analytic(&self, x: [f64; 2]) -> Option<Derivs> {
        match self {
            TestField::Sine { amplitude, freq } => {
                let (p, q) = (freq[0] as f64 * PI, freq[1] as f64 * PI);
                let (s1, c1) = (p * x[0]).sin_cos();
                let (s2, c2) = (q * x[1]).sin_cos();
                let grad = [p * c1 * s2, q * s1 * c2];
                let hess = [
                    [-p * p * s1 * s2, p * q * c1 * c2],
                    [p * q * c1 * c2, -q * q * s1 * s2],
                ];
                let mut d = Derivs {
                    d1: [[0.0; 2]; 2],
                    d2: [[[0.0; 2]; 2]; 2],
                };
                for a in 0..2 {
                    for b in 0..2 {
                        d.d1[a][b] = grad[a] * amplitude[b];
                        for c in 0..2 {
                            d.d2[a][c][b] = hess[a][c] * amplitude[b];
                        }
                    }
                }
                Some(d)
            }
            TestField::Constant { .. } | TestField::Zero => Some(Derivs {
                d1: [[0.0; 2]; 2],
                d2: [[[0.0; 2]; 2]; 2],
            }),
            TestField::Swirl => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    /// Analytic derivatives when the field has them, stencils otherwise.
    #[default]
    Auto,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

/// Fourth-order first derivative along a line of `n ≥ 5` samples, using
/// one-sided stencils on the two outermost nodes at each end.
fn diff_line(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let s = 1.0 / (12.0 * h);
    out[0] = s * (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]);
    out[1] = s * (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]);
    for i in 2..n - 2 {
        out[i] = s * (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]);
    }
    out[n - 2] =
        -s * (-3.0 * f[n - 1] - 10.0 * f[n - 2] + 18.0 * f[n - 3] - 6.0 * f[n - 4] + f[n - 5]);
    out[n - 1] = -s
        * (-25.0 * f[n - 1] + 48.0 * f[n - 2] - 36.0 * f[n - 3] + 16.0 * f[n - 4] - 3.0 * f[n - 5]);
}

/// Derivative of a row-major `res × res` array along `axis` (0 = outer).
fn diff(f: &[f64], res: usize, h: f64, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    let mut line = vec![0.0; res];
    let mut dline = vec![0.0; res];
    for k in 0..res {
        let at = |i: usize| if axis == 0 { i * res + k } else { k * res + i };
        for (i, v) in line.iter_mut().enumerate() {
            *v = f[at(i)];
        }
        diff_line(&line, h, &mut dline);
        for (i, v) in dline.iter().enumerate() {
            out[at(i)] = *v;
        }
    }
    out
}

/// Both sides of the identity by trapezoidal quadrature on a `res × res`
/// node grid, with the relative difference `|lhs − rhs| / |lhs|`.
pub fn verify_killing_identity(
    field: &TestField,
    eta: f64,
    res: usize,
    mode: DerivativeMode,
) -> Result<IdentityCheck> {
    if res < 5 {
        return Err(Error::invalid("quadrature needs at least 5 nodes per axis"));
    }
    if !eta.is_finite() {
        return Err(Error::invalid("eta must be finite"));
    }
    let h = 2.0 / (res - 1) as f64;
    let coord = |i: usize| -1.0 + i as f64 * h;
    let n = res * res;
    let mut v = [vec![0.0; n], vec![0.0; n]];
    let mut boundary_max: f64 = 0.0;
    for i in 0..res {
        for j in 0..res {
            let val = field.value([coord(i), coord(j)]);
            v[0][i * res + j] = val[0];
            v[1][i * res + j] = val[1];
            if i == 0 || j == 0 || i == res - 1 || j == res - 1 {
                boundary_max = boundary_max.max(val[0].abs()).max(val[1].abs());
            }
        }
    }
    if boundary_max > BOUNDARY_TOL {
        return Err(Error::BoundaryViolation(boundary_max));
    }

    // d1[a][b][node] = ∂_a v_b, d2[a][c][b][node] = ∂_a ∂_c v_b
    let analytic = mode == DerivativeMode::Auto && field.analytic([0.0, 0.0]).is_some();
    let mut d1 = vec![vec![vec![0.0; n]; 2]; 2];
    let mut d2 = vec![vec![vec![vec![0.0; n]; 2]; 2]; 2];
    if analytic {
        for i in 0..res {
            for j in 0..res {
                let d = field.analytic([coord(i), coord(j)]).expect("checked above");
                for a in 0..2 {
                    for b in 0..2 {
                        d1[a][b][i * res + j] = d.d1[a][b];
                        for c in 0..2 {
                            d2[a][c][b][i * res + j] = d.d2[a][c][b];
                        }
                    }
                }
            }
        }
    } else {
        for a in 0..2 {
            for b in 0..2 {
                d1[a][b] = diff(&v[b], res, h, a);
            }
        }
        for a in 0..2 {
            for c in 0..2 {
                for b in 0..2 {
                    d2[a][c][b] = diff(&d1[c][b], res, h, a);
                }
            }
        }
    }

    let (mut lhs, mut rhs) = (0.0, 0.0);
    for i in 0..res {
        for j in 0..res {
            let p = i * res + j;
            let edge = |k: usize| if k == 0 || k == res - 1 { 0.5 } else { 1.0 };
            let w = edge(i) * edge(j) * h * h;
            let vv = v[0][p] * v[0][p] + v[1][p] * v[1][p];
            let mut kill = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let e = d1[a][b][p] + d1[b][a][p];
                    kill += e * e;
                }
            }
            // ⟨Δv + ∇(div v), v⟩
            let mut op = 0.0;
            for b in 0..2 {
                let lap = d2[0][0][b][p] + d2[1][1][b][p];
                let grad_div = d2[b][0][0][p] + d2[b][1][1][p];
                op += (lap + grad_div) * v[b][p];
            }
            lhs += w * (0.5 * kill + eta * vv);
            rhs += w * (eta * vv - op);
        }
    }
    let rel_err = if lhs == 0.0 && rhs == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE)
    };
    Ok(IdentityCheck { lhs, rhs, rel_err })
}
