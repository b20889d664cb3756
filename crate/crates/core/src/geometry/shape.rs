use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned computational domain `[-1, 1]^dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    dim: usize,
}

impl Domain {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 2 || dim == 3 {
            Ok(Self { dim })
        } else {
            Err(Error::invalid(format!(
                "dimension must be 2 or 3, got {dim}"
            )))
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lebesgue measure `2^dim`.
    pub fn volume(&self) -> f64 {
        (1u32 << self.dim) as f64
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= 1.0)
    }

    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() < 1.0)
    }

    /// `n` uniform points, flat row-major.
    pub fn sample_uniform<R: rand::Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n * self.dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }
}

/// Sign convention of exported implicit values and normals.
///
/// Everything internal uses `InsidePositive`. `OutsidePositive` exists for
/// interop with tools that expect the opposite orientation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    #[default]
    InsidePositive,
    OutsidePositive,
}

impl SignConvention {
    pub fn apply(self, value: f64) -> f64 {
        match self {
            SignConvention::InsidePositive => value,
            SignConvention::OutsidePositive => -value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
}

/// An analytic primitive. `size` holds the radius (first entry) for spheres
/// and the half edge lengths for boxes. `rotation` is row-major and maps
/// local coordinates to world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: Vec<f64>,
    pub size: Vec<f64>,
    pub rotation: Vec<f64>,
}

impl ShapeSpec {
    pub fn sphere(center: Vec<f64>, radius: f64) -> Self {
        let dim = center.len();
        Self {
            kind: ShapeKind::Sphere,
            size: vec![radius; dim],
            rotation: identity(dim),
            center,
        }
    }

    pub fn boxed(center: Vec<f64>, half_edges: Vec<f64>, rotation: Vec<f64>) -> Self {
        Self {
            kind: ShapeKind::Box,
            center,
            size: half_edges,
            rotation,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        Domain::new(d)?;
        if self.size.len() != d || self.rotation.len() != d * d {
            return Err(Error::invalid(
                "shape spec arrays do not match its dimension",
            ));
        }
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("shape sizes must be positive"));
        }
        let mut err = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d)
                    .map(|k| self.rotation[k * d + i] * self.rotation[k * d + j])
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err += (dot - target).powi(2);
            }
        }
        if err.sqrt() >= 1e-10 || determinant(&self.rotation, d) <= 0.0 {
            return Err(Error::invalid("rotation is not a proper orthogonal matrix"));
        }
        if !self
            .corners()
            .chunks(d)
            .all(|c| c.iter().all(|v| v.abs() < 1.0))
        {
            return Err(Error::invalid("shape does not fit inside the domain"));
        }
        Ok(())
    }

    /// World-space bounding corners: the box corners, or the axis box of a sphere.
    pub fn corners(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d << d);
        for mask in 0..(1usize << d) {
            let local: Vec<f64> = (0..d)
                .map(|a| {
                    if mask >> a & 1 == 1 {
                        self.size[a]
                    } else {
                        -self.size[a]
                    }
                })
                .collect();
            match self.kind {
                ShapeKind::Box => out.extend(self.to_world(&local)),
                ShapeKind::Sphere => out.extend(
                    local
                        .iter()
                        .zip(&self.center)
                        .map(|(l, c)| c + l.signum() * self.size[0]),
                ),
            }
        }
        out
    }

    pub fn to_world(&self, local: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.center[i]
                    + (0..d)
                        .map(|j| self.rotation[i * d + j] * local[j])
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn to_local(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| {
                (0..d)
                    .map(|i| self.rotation[i * d + j] * (x[i] - self.center[i]))
                    .sum()
            })
            .collect()
    }

    /// Signed distance, positive inside the shape.
    pub fn sdf(&self, x: &[f64]) -> f64 {
        match self.kind {
            ShapeKind::Sphere => {
                let r2: f64 = x
                    .iter()
                    .zip(&self.center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum();
                self.size[0] - r2.sqrt()
            }
            ShapeKind::Box => {
                let local = self.to_local(x);
                let mut outside = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for (l, h) in local.iter().zip(&self.size) {
                    let q = l.abs() - h;
                    outside += q.max(0.0).powi(2);
                    inside = inside.max(q);
                }
                -(outside.sqrt() + inside.min(0.0))
            }
        }
    }

    /// Occupancy: 1 inside, 0 outside, 0.5 on the surface.
    pub fn occupancy(&self, x: &[f64]) -> f64 {
        let s = self.sdf(x);
        if s.abs() <= 1e-12 {
            0.5
        } else if s > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

pub fn sdf_primitive(spec: &ShapeSpec, x: &[f64]) -> f64 {
    spec.sdf(x)
}

pub fn occupancy_primitive(spec: &ShapeSpec, x: &[f64]) -> f64 {
    spec.occupancy(x)
}

pub(crate) fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

pub(crate) fn determinant(m: &[f64], d: usize) -> f64 {
    match d {
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => f64::NAN,
    }
}

/// Rotation matrix (row-major) for the angle `theta` in the plane.
pub fn rotation_2d(theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    vec![c, -s, s, c]
}

/// Rotation matrix (row-major) of a quaternion `(w, x, y, z)`; normalized first.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Vec<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    vec![
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sphere_sdf_examples() {
        let s = ShapeSpec::sphere(vec![0.0, 0.0], 0.75);
        assert_eq!(s.sdf(&[0.0, 0.0]), 0.75);
        assert_eq!(s.sdf(&[0.75, 0.0]), 0.0);
        assert!((s.sdf(&[1.0, 0.0]) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn occupancy_examples() {
        let s = ShapeSpec::sphere(vec![0.0, 0.0], 0.5);
        assert_eq!(s.occupancy(&[0.0, 0.0]), 1.0);
        assert_eq!(s.occupancy(&[0.9, 0.0]), 0.0);
        assert_eq!(s.occupancy(&[0.5, 0.0]), 0.5);
    }

    #[test]
    fn box_sdf_matches_brute_force_distance() {
        let b = ShapeSpec::boxed(vec![0.0, 0.0], vec![0.3, 0.1], rotation_2d(0.4));
        b.validate().unwrap();
        // densely sampled boundary as the distance oracle
        let n = 20000;
        let mut boundary = Vec::new();
        let (hx, hy) = (0.3, 0.1);
        let per = 2.0 * (hx + hy) * 2.0 / n as f64;
        let mut t = 0.0;
        while t < 4.0 * (hx + hy) {
            let local = if t < 2.0 * hx {
                [-hx + t, -hy]
            } else if t < 2.0 * hx + 2.0 * hy {
                [hx, -hy + (t - 2.0 * hx)]
            } else if t < 4.0 * hx + 2.0 * hy {
                [hx - (t - 2.0 * hx - 2.0 * hy), hy]
            } else {
                [-hx, hy - (t - 4.0 * hx - 2.0 * hy)]
            };
            boundary.push(b.to_world(&local));
            t += per;
        }
        for p in [[0.5, 0.2], [0.0, 0.0], [0.1, -0.05], [-0.6, 0.7]] {
            let d = boundary
                .iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let s = b.sdf(&p);
            assert!((s.abs() - d).abs() < 1e-4, "{p:?}: {s} vs {d}");
            assert_eq!(s > 0.0, b.occupancy(&p) == 1.0);
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut b = ShapeSpec::boxed(vec![0.0, 0.0], vec![0.3, 0.1], rotation_2d(0.4));
        b.rotation[0] = 2.0;
        assert!(b.validate().is_err());
        let reflect = ShapeSpec::boxed(vec![0.0, 0.0], vec![0.3, 0.1], vec![1.0, 0.0, 0.0, -1.0]);
        assert!(reflect.validate().is_err());
        let big = ShapeSpec::boxed(vec![0.0, 0.0], vec![0.9, 0.9], rotation_2d(0.7));
        assert!(big.validate().is_err());
        assert!(Domain::new(4).is_err());
    }

    fn fd_grad(spec: &ShapeSpec, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[i] += h;
                b[i] -= h;
                (spec.sdf(&a) - spec.sdf(&b)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn box_sdf_gradient_has_unit_norm(
            theta in 0.0..std::f64::consts::TAU,
            hx in 0.1..0.4f64,
            hy in 0.1..0.4f64,
            px in -0.95..0.95f64,
            py in -0.95..0.95f64,
        ) {
            let b = ShapeSpec::boxed(vec![0.0, 0.0], vec![hx, hy], rotation_2d(theta));
            let local = b.to_local(&[px, py]);
            // stay away from the medial axis and the corner regions' creases
            let qx = local[0].abs() - hx;
            let qy = local[1].abs() - hy;
            prop_assume!((qx - qy).abs() > 1e-3);
            prop_assume!(qx.abs() > 1e-3 && qy.abs() > 1e-3);
            prop_assume!(local[0].abs() > 1e-3 && local[1].abs() > 1e-3);
            let g = fd_grad(&b, &[px, py]);
            let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-4);
        }

        #[test]
        fn occupancy_agrees_with_sdf_sign(
            q in prop::array::uniform4(-1.0..1.0f64),
            h in prop::array::uniform3(0.1..0.4f64),
            p in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let b = ShapeSpec::boxed(vec![0.0; 3], h.to_vec(), rotation_from_quaternion(q));
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let s = b.sdf(&p);
            prop_assume!(s.abs() > 1e-12);
            prop_assert_eq!(b.occupancy(&p) == 1.0, s > 0.0);
        }
    }
}
