//! Point-set distances.

use rand::seq::index;
use rayon::prelude::*;

use super::assignment::min_cost_assignment;
use super::mesh::PointCloud;
use crate::error::{Error, Result};
use crate::rng;

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set"));
    }
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch(format!(
            "point dims {} and {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

fn dist2(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_nearest_sq(from: &PointCloud, to: &PointCloud) -> f64 {
    let total: f64 = from
        .coords
        .par_chunks_exact(from.dim)
        .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / from.len() as f64
}

/// Symmetric squared Chamfer distance: the average of the two directed mean
/// squared nearest-neighbour distances.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_pair(a, b)?;
    Ok(0.5 * (mean_nearest_sq(a, b) + mean_nearest_sq(b, a)))
}

fn subsample(set: &PointCloud, n_sub: usize, seed: u64) -> PointCloud {
    if n_sub == set.len() {
        return set.clone();
    }
    // indices depend only on (seed, size) so swapping arguments is harmless
    let mut rng = rng::stream(seed, &[0xE3D, set.len() as u64]);
    let mut idx = index::sample(&mut rng, set.len(), n_sub).into_vec();
    idx.sort_unstable();
    set.select(&idx)
}

/// Mean matched Euclidean distance of the optimal one-to-one assignment
/// between `n_sub`-point subsamples of the two sets.
pub fn earth_mover_distance(
    a: &PointCloud,
    b: &PointCloud,
    n_sub: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(a, b)?;
    if n_sub == 0 {
        return Err(Error::invalid("n_sub must be at least 1"));
    }
    if a.len() < n_sub || b.len() < n_sub {
        return Err(Error::invalid(format!(
            "sets of size {} and {} are smaller than n_sub = {n_sub}",
            a.len(),
            b.len()
        )));
    }
    let (sa, sb) = (subsample(a, n_sub, seed), subsample(b, n_sub, seed));
    // canonical argument order makes the result bitwise symmetric
    let (sa, sb) = if sa.coords.partial_cmp(&sb.coords) == Some(std::cmp::Ordering::Greater) {
        (sb, sa)
    } else {
        (sa, sb)
    };
    let cost: Vec<f64> = sa
        .coords
        .par_chunks_exact(sa.dim)
        .flat_map_iter(|p| sb.iter().map(move |q| dist2(p, q).sqrt()))
        .collect();
    let col = min_cost_assignment(&cost, n_sub);
    let mut matched: Vec<f64> = col
        .iter()
        .enumerate()
        .map(|(i, j)| cost[i * n_sub + j])
        .collect();
    matched.sort_by(f64::total_cmp);
    Ok(matched.iter().sum::<f64>() / n_sub as f64)
}
