use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shape::{ShapeKind, ShapeSpec};
use crate::error::{Error, Result};
use crate::rng;

/// A flat, row-major set of points in 2D or 3D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates do not split into {dim}-vectors",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        PointCloud {
            dim: self.dim,
            coords,
        }
    }
}

/// Surface points with unit normals, oriented along the gradient of the
/// inside-positive distance (pointing into the shape).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub points: PointCloud,
    pub normals: Vec<f64>,
    pub shape_id: usize,
}

impl SurfaceSample {
    pub fn new(points: PointCloud, normals: Vec<f64>, shape_id: usize) -> Result<Self> {
        if normals.len() != points.coords.len() {
            return Err(Error::ShapeMismatch("normals do not match points".into()));
        }
        let s = Self {
            points,
            normals,
            shape_id,
        };
        for n in s.normals.chunks_exact(s.dim()) {
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "normal of length {len} is not unit"
                )));
            }
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.points.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn normal(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.normals[i * d..(i + 1) * d]
    }

    pub fn select(&self, indices: &[usize]) -> SurfaceSample {
        let d = self.dim();
        let mut normals = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            normals.extend_from_slice(self.normal(i));
        }
        SurfaceSample {
            points: self.points.select(indices),
            normals,
            shape_id: self.shape_id,
        }
    }
}

/// Polyline (2D, segments) or triangle (3D) mesh. Faces are stored flat with
/// `dim` indices per face. Segments run counter-clockwise around the inside;
/// triangles are wound so `(b-a)×(c-a)` points outward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMesh {
    pub vertices: PointCloud,
    pub faces: Vec<usize>,
}

impl ShapeMesh {
    pub fn new(vertices: PointCloud, faces: Vec<usize>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            vertices: PointCloud::empty(dim),
            faces: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vertices.dim
    }

    pub fn face_count(&self) -> usize {
        self.faces.len() / self.dim()
    }

    pub fn face(&self, i: usize) -> &[usize] {
        let d = self.dim();
        &self.faces[i * d..(i + 1) * d]
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d != 2 && d != 3 {
            return Err(Error::invalid(format!("mesh dimension {d} unsupported")));
        }
        if self.faces.len() % d != 0 {
            return Err(Error::ShapeMismatch(
                "face index list is not a multiple of the arity".into(),
            ));
        }
        let n = self.vertices.len();
        if let Some(&bad) = self.faces.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        for f in 0..self.face_count() {
            if self.face_measure(f) < 1e-12 {
                return Err(Error::invalid(format!("face {f} is degenerate")));
            }
        }
        Ok(())
    }

    /// Length (2D) or area (3D) of face `f`.
    pub fn face_measure(&self, f: usize) -> f64 {
        let idx = self.face(f);
        let p = |k: usize| self.vertices.point(idx[k]);
        if self.dim() == 2 {
            let (a, b) = (p(0), p(1));
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
        } else {
            let c = cross3(&sub3(p(1), p(0)), &sub3(p(2), p(0)));
            0.5 * norm(&c)
        }
    }

    /// Unit normal of face `f`, pointing into the enclosed region.
    pub fn face_normal(&self, f: usize) -> Vec<f64> {
        let idx = self.face(f);
        let p = |k: usize| self.vertices.point(idx[k]);
        let n = if self.dim() == 2 {
            let (a, b) = (p(0), p(1));
            vec![-(b[1] - a[1]), b[0] - a[0]]
        } else {
            let c = cross3(&sub3(p(1), p(0)), &sub3(p(2), p(0)));
            vec![-c[0], -c[1], -c[2]]
        };
        let len = norm(&n);
        n.into_iter().map(|v| v / len).collect()
    }
}

pub(crate) fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Boundary mesh of a box primitive.
pub fn box_mesh(spec: &ShapeSpec) -> Result<ShapeMesh> {
    if spec.kind != ShapeKind::Box {
        return Err(Error::invalid("box_mesh requires a box spec"));
    }
    let d = spec.dim();
    let h = &spec.size;
    if d == 2 {
        let local = [[-h[0], -h[1]], [h[0], -h[1]], [h[0], h[1]], [-h[0], h[1]]];
        let coords = local.iter().flat_map(|l| spec.to_world(l)).collect();
        return ShapeMesh::new(PointCloud::new(2, coords)?, vec![0, 1, 1, 2, 2, 3, 3, 0]);
    }
    let mut coords = Vec::with_capacity(24);
    for mask in 0..8usize {
        let l: Vec<f64> = (0..3)
            .map(|a| if mask >> a & 1 == 1 { h[a] } else { -h[a] })
            .collect();
        coords.extend(spec.to_world(&l));
    }
    let verts = PointCloud::new(3, coords)?;
    let mut faces = Vec::with_capacity(36);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0usize, 1] {
            let corner = |bu: usize, bv: usize| (side << axis) | (bu << u) | (bv << v);
            let quad = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            for tri in [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]] {
                // wind so the geometric normal leaves the box through this face
                let c = cross3(
                    &sub3(verts.point(tri[1]), verts.point(tri[0])),
                    &sub3(verts.point(tri[2]), verts.point(tri[0])),
                );
                let centre = spec.center.clone();
                let outward = sub3(verts.point(tri[0]), &centre);
                let dot: f64 = c.iter().zip(&outward).map(|(a, b)| a * b).sum();
                if dot >= 0.0 {
                    faces.extend(tri);
                } else {
                    faces.extend([tri[0], tri[2], tri[1]]);
                }
            }
        }
    }
    ShapeMesh::new(verts, faces)
}

/// Uniform surface samples: faces chosen proportionally to their length or
/// area, positions uniform within the face, normals from face geometry.
pub fn sample_surface(mesh: &ShapeMesh, n: usize, seed: u64) -> Result<SurfaceSample> {
    if mesh.is_empty() {
        return Err(Error::Empty("mesh has no faces"));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let d = mesh.dim();
    let mut cumulative = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        total += mesh.face_measure(f);
        cumulative.push(total);
    }
    let normals_by_face: Vec<Vec<f64>> = (0..mesh.face_count())
        .map(|f| mesh.face_normal(f))
        .collect();
    let mut rng = rng::stream(seed, &[0x5A4D_504C]);
    let mut points = Vec::with_capacity(n * d);
    let mut normals = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let f = cumulative
            .partition_point(|c| *c <= u)
            .min(mesh.face_count() - 1);
        let idx = mesh.face(f);
        let p = |k: usize| mesh.vertices.point(idx[k]);
        if d == 2 {
            let t: f64 = rng.random();
            let (a, b) = (p(0), p(1));
            points.extend((0..2).map(|i| a[i] + t * (b[i] - a[i])));
        } else {
            let r1 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            let (a, b, c) = (p(0), p(1), p(2));
            points.extend((0..3).map(|i| wa * a[i] + wb * b[i] + wc * c[i]));
        }
        normals.extend_from_slice(&normals_by_face[f]);
    }
    SurfaceSample::new(PointCloud::new(d, points)?, normals, 0)
}

/// Adds i.i.d. zero-mean Gaussian noise to every vertex coordinate.
pub fn add_vertex_noise(mesh: &ShapeMesh, stddev: f64, seed: u64) -> Result<ShapeMesh> {
    if !(stddev >= 0.0 && stddev.is_finite()) {
        return Err(Error::invalid(
            "noise standard deviation must be finite and non-negative",
        ));
    }
    let mut out = mesh.clone();
    if stddev == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, stddev).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::stream(seed, &[0x4E4F_4953]);
    for v in &mut out.vertices.coords {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shape::{rotation_2d, rotation_from_quaternion};

    fn unit_square() -> ShapeMesh {
        let coords = vec![-0.5, -0.5, 0.5, -0.5, 0.5, 0.5, -0.5, 0.5];
        ShapeMesh::new(
            PointCloud::new(2, coords).unwrap(),
            vec![0, 1, 1, 2, 2, 3, 3, 0],
        )
        .unwrap()
    }

    #[test]
    fn square_edges_receive_balanced_counts() {
        let mesh = unit_square();
        let s = sample_surface(&mesh, 4000, 1).unwrap();
        let mut counts = [0usize; 4];
        for p in s.points.iter() {
            let edge = if (p[1] + 0.5).abs() < 1e-12 {
                0
            } else if (p[0] - 0.5).abs() < 1e-12 {
                1
            } else if (p[1] - 0.5).abs() < 1e-12 {
                2
            } else {
                3
            };
            counts[edge] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn triangle_samples_stay_inside() {
        let v = PointCloud::new(3, vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.1, 0.1, 0.6, -0.2]).unwrap();
        let mesh = ShapeMesh::new(v, vec![0, 1, 2]).unwrap();
        let s = sample_surface(&mesh, 500, 3).unwrap();
        let (a, b, c) = (
            mesh.vertices.point(0),
            mesh.vertices.point(1),
            mesh.vertices.point(2),
        );
        let e0 = sub3(b, a);
        let e1 = sub3(c, a);
        let d00: f64 = e0.iter().map(|v| v * v).sum();
        let d01: f64 = e0.iter().zip(&e1).map(|(x, y)| x * y).sum();
        let d11: f64 = e1.iter().map(|v| v * v).sum();
        let den = d00 * d11 - d01 * d01;
        for p in s.points.iter() {
            let e2 = sub3(p, a);
            let d20: f64 = e2.iter().zip(&e0).map(|(x, y)| x * y).sum();
            let d21: f64 = e2.iter().zip(&e1).map(|(x, y)| x * y).sum();
            let v = (d11 * d20 - d01 * d21) / den;
            let w = (d00 * d21 - d01 * d20) / den;
            assert!(v >= -1e-12 && w >= -1e-12 && 1.0 - v - w >= -1e-12);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_rejects_empty() {
        let mesh = unit_square();
        assert_eq!(
            sample_surface(&mesh, 64, 5).unwrap(),
            sample_surface(&mesh, 64, 5).unwrap()
        );
        assert!(sample_surface(&ShapeMesh::empty(2), 10, 0).is_err());
    }

    #[test]
    fn box_mesh_normals_point_inside() {
        let s2 = ShapeSpec::boxed(vec![0.0, 0.0], vec![0.3, 0.2], rotation_2d(1.1));
        let s3 = ShapeSpec::boxed(
            vec![0.0; 3],
            vec![0.3, 0.2, 0.1],
            rotation_from_quaternion([0.3, 0.1, -0.5, 0.7]),
        );
        for spec in [s2, s3] {
            let mesh = box_mesh(&spec).unwrap();
            let sample = sample_surface(&mesh, 200, 1).unwrap();
            for i in 0..sample.len() {
                let p = sample.points.point(i);
                let n = sample.normal(i);
                assert!(spec.sdf(p).abs() < 1e-9);
                let q: Vec<f64> = p.iter().zip(n).map(|(a, b)| a + 1e-4 * b).collect();
                assert!(spec.sdf(&q) > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_faces_and_bad_indices_are_rejected() {
        let v = PointCloud::new(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(ShapeMesh::new(v.clone(), vec![0, 1]).is_err());
        assert!(ShapeMesh::new(v, vec![0, 7]).is_err());
    }

    #[test]
    fn vertex_noise_statistics() {
        let coords: Vec<f64> = (0..20000).map(|i| (i % 17) as f64 * 0.01).collect();
        let mesh = ShapeMesh {
            vertices: PointCloud::new(2, coords).unwrap(),
            faces: vec![],
        };
        assert_eq!(add_vertex_noise(&mesh, 0.0, 9).unwrap(), mesh);
        let noisy = add_vertex_noise(&mesh, 0.01, 9).unwrap();
        assert_eq!(noisy, add_vertex_noise(&mesh, 0.01, 9).unwrap());
        for axis in 0..2 {
            let diffs: Vec<f64> = noisy
                .vertices
                .iter()
                .zip(mesh.vertices.iter())
                .map(|(a, b)| a[axis] - b[axis])
                .collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var =
                diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
            let sd = var.sqrt();
            assert!((0.009..=0.011).contains(&sd), "axis {axis}: {sd}");
        }
    }
}
