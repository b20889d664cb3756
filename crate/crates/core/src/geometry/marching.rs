//! Iso-contour extraction: marching squares in 2D, marching cubes in 3D.
//!
//! Vertices sit on lattice edges at the linearly interpolated crossing and
//! are shared between neighbouring cells. A node counts as inside when its
//! value is strictly greater than the level. Output faces follow the
//! [`ShapeMesh`] winding convention with "inside" meaning larger values.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::grid::ScalarGrid;
use super::mesh::{cross3, PointCloud, ShapeMesh};
use crate::error::{Error, Result};

struct Builder<'a> {
    grid: &'a ScalarGrid,
    level: f64,
    vertex_of_edge: HashMap<(usize, usize), usize>,
    coords: Vec<f64>,
    faces: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn new(grid: &'a ScalarGrid, level: f64) -> Self {
        Self {
            grid,
            level,
            vertex_of_edge: HashMap::new(),
            coords: Vec::new(),
            faces: Vec::new(),
        }
    }

    /// Vertex on the lattice edge leaving node `ijk` along `axis`.
    fn vertex(&mut self, ijk: &[usize], axis: usize) -> usize {
        let g = self.grid;
        let p = g.index(ijk);
        if let Some(v) = self.vertex_of_edge.get(&(p, axis)) {
            return *v;
        }
        let mut qk = ijk.to_vec();
        qk[axis] += 1;
        let q = g.index(&qk);
        let (a, b) = (g.values[p], g.values[q]);
        let t = (self.level - a) / (b - a);
        let id = self.coords.len() / g.dim();
        for (ax, i) in ijk.iter().enumerate() {
            let c = g.coord(ax, *i);
            self.coords
                .push(if ax == axis { c + t * g.spacing(ax) } else { c });
        }
        self.vertex_of_edge.insert((p, axis), id);
        id
    }

    fn point(&self, v: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.coords[v * d..(v + 1) * d]
    }

    /// Gradient of the multilinear interpolant inside the cell at `base`.
    fn cell_gradient(&self, base: &[usize], x: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let d = g.dim();
        let frac: Vec<f64> = (0..d)
            .map(|a| ((x[a] - g.coord(a, base[a])) / g.spacing(a)).clamp(0.0, 1.0))
            .collect();
        let mut grad = vec![0.0; d];
        for mask in 0..(1usize << d) {
            let mut ijk = base.to_vec();
            for (a, i) in ijk.iter_mut().enumerate() {
                *i += mask >> a & 1;
            }
            let value = g.values[g.index(&ijk)];
            for (a, ga) in grad.iter_mut().enumerate() {
                let mut w = if mask >> a & 1 == 1 { 1.0 } else { -1.0 } / g.spacing(a);
                for b in (0..d).filter(|b| *b != a) {
                    w *= if mask >> b & 1 == 1 {
                        frac[b]
                    } else {
                        1.0 - frac[b]
                    };
                }
                *ga += w * value;
            }
        }
        grad
    }

    fn push_segment(&mut self, base: &[usize], a: usize, b: usize) {
        let (pa, pb) = (self.point(a).to_vec(), self.point(b).to_vec());
        let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
        if (dx * dx + dy * dy).sqrt() < 1e-12 {
            return;
        }
        let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
        let grad = self.cell_gradient(base, &mid);
        // left normal must point towards larger values
        if -dy * grad[0] + dx * grad[1] >= 0.0 {
            self.faces.extend([a, b]);
        } else {
            self.faces.extend([b, a]);
        }
    }

    fn push_triangle(&mut self, base: &[usize], a: usize, b: usize, c: usize) {
        let (pa, pb, pc) = (
            self.point(a).to_vec(),
            self.point(b).to_vec(),
            self.point(c).to_vec(),
        );
        let n = cross3(
            &[pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]],
            &[pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]],
        );
        if 0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() < 1e-12 {
            return;
        }
        let centroid: Vec<f64> = (0..3).map(|i| (pa[i] + pb[i] + pc[i]) / 3.0).collect();
        let grad = self.cell_gradient(base, &centroid);
        // geometric normal must point towards smaller values
        if n[0] * grad[0] + n[1] * grad[1] + n[2] * grad[2] <= 0.0 {
            self.faces.extend([a, b, c]);
        } else {
            self.faces.extend([a, c, b]);
        }
    }

    fn finish(self) -> Result<ShapeMesh> {
        let dim = self.grid.dim();
        if self.faces.is_empty() {
            return Ok(ShapeMesh::empty(dim));
        }
        ShapeMesh::new(PointCloud::new(dim, self.coords)?, self.faces)
    }
}

/// Extracts the `level` iso-contour of a lattice field.
pub fn marching_extract(grid: &ScalarGrid, level: f64) -> Result<ShapeMesh> {
    if grid.resolution.iter().any(|r| *r < 2) {
        return Err(Error::invalid(
            "grid resolution must be at least 2 per axis",
        ));
    }
    match grid.dim() {
        2 => Ok(marching_squares(grid, level)?),
        3 => Ok(marching_cubes(grid, level)?),
        d => Err(Error::invalid(format!("unsupported grid dimension {d}"))),
    }
}

fn marching_squares(grid: &ScalarGrid, level: f64) -> Result<ShapeMesh> {
    let mut b = Builder::new(grid, level);
    let [rx, ry] = [grid.resolution[0], grid.resolution[1]];
    // corner order: (0,0) (1,0) (1,1) (0,1); edge k joins corner k and k+1
    const CORNERS: [[usize; 2]; 4] = [[0, 0], [1, 0], [1, 1], [0, 1]];
    const EDGES: [([usize; 2], usize); 4] = [([0, 0], 0), ([1, 0], 1), ([0, 1], 0), ([0, 0], 1)];
    for i in 0..rx - 1 {
        for j in 0..ry - 1 {
            let vals: [f64; 4] = CORNERS.map(|c| grid.values[grid.index(&[i + c[0], j + c[1]])]);
            let inside = vals.map(|v| v > level);
            let crossing: Vec<usize> = (0..4)
                .filter(|k| inside[*k] != inside[(k + 1) % 4])
                .collect();
            if crossing.is_empty() {
                continue;
            }
            let vertex = |k: usize, b: &mut Builder| {
                let (off, axis) = EDGES[k];
                b.vertex(&[i + off[0], j + off[1]], axis)
            };
            let base = [i, j];
            if crossing.len() == 2 {
                let (va, vb) = (vertex(crossing[0], &mut b), vertex(crossing[1], &mut b));
                b.push_segment(&base, va, vb);
            } else {
                // saddle: decided by the cell-centre value
                let centre_inside = vals.iter().sum::<f64>() / 4.0 > level;
                let v: Vec<usize> = (0..4).map(|k| vertex(k, &mut b)).collect();
                // cut off each corner whose state differs from the centre
                for k in 0..4 {
                    if inside[k] != centre_inside {
                        b.push_segment(&base, v[(k + 3) % 4], v[k]);
                    }
                }
            }
        }
    }
    b.finish()
}

const CUBE_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_index(a: usize, b: usize) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    CUBE_EDGES
        .iter()
        .position(|e| *e == (a, b))
        .expect("corners share an edge")
}

/// Triangles (as cube-edge triples) for every corner configuration.
///
/// Crossing edges are linked into closed loops by walking the six cube
/// faces; an ambiguous face separates its two inside corners, a rule that
/// depends only on the face itself so neighbouring cells agree.
fn case_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..256usize)
            .map(|case| {
                let inside = |c: usize| case >> c & 1 == 1;
                let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
                for axis in 0..3 {
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    for side in 0..2 {
                        let corner = |bu: usize, bv: usize| (side << axis) | (bu << u) | (bv << v);
                        let ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                        let edges: [usize; 4] =
                            std::array::from_fn(|k| edge_index(ring[k], ring[(k + 1) % 4]));
                        let crossing: Vec<usize> = (0..4)
                            .filter(|k| inside(ring[*k]) != inside(ring[(k + 1) % 4]))
                            .collect();
                        let mut link = |a: usize, b: usize| {
                            links[a].push(b);
                            links[b].push(a);
                        };
                        match crossing.len() {
                            2 => link(edges[crossing[0]], edges[crossing[1]]),
                            4 => {
                                for k in 0..4 {
                                    if inside(ring[k]) {
                                        link(edges[(k + 3) % 4], edges[k]);
                                    }
                                }
                            }
                            _ => {}
                        }
                    }
                }
                let mut seen = [false; 12];
                let mut tris = Vec::new();
                for start in 0..12 {
                    if seen[start] || links[start].is_empty() {
                        continue;
                    }
                    let mut ring = vec![start];
                    seen[start] = true;
                    let mut prev = start;
                    let mut cur = links[start][0];
                    while cur != start {
                        seen[cur] = true;
                        ring.push(cur);
                        let next = if links[cur][0] != prev {
                            links[cur][0]
                        } else {
                            links[cur][1]
                        };
                        prev = cur;
                        cur = next;
                    }
                    for k in 1..ring.len() - 1 {
                        tris.push([ring[0], ring[k], ring[k + 1]]);
                    }
                }
                tris
            })
            .collect()
    })
}

fn marching_cubes(grid: &ScalarGrid, level: f64) -> Result<ShapeMesh> {
    let table = case_table();
    let mut b = Builder::new(grid, level);
    let r = &grid.resolution;
    for i in 0..r[0] - 1 {
        for j in 0..r[1] - 1 {
            for k in 0..r[2] - 1 {
                let base = [i, j, k];
                let corner_at = |c: usize| [i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)];
                let mut case = 0usize;
                for c in 0..8 {
                    if grid.values[grid.index(&corner_at(c))] > level {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &table[case] {
                    let ids = tri.map(|e| {
                        let (c0, c1) = CUBE_EDGES[e];
                        let axis = (c0 ^ c1).trailing_zeros() as usize;
                        b.vertex(&corner_at(c0), axis)
                    });
                    b.push_triangle(&base, ids[0], ids[1], ids[2]);
                }
            }
        }
    }
    b.finish()
}
