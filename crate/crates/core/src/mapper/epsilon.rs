//! Automatic DBSCAN radius via the k-distance elbow.

use super::MapperError;
use crate::lens::euclidean;
use crate::par;

/// Curves whose values all fall below this are treated as degenerate.
pub const DEGENERATE_CURVE: f64 = 1e-12;

/// Distance from each vector to its `k`-th nearest other vector.
pub fn k_distances(vectors: &[Vec<f64>], k: usize) -> Vec<f64> {
    par::map_range(vectors.len(), |i| {
        let mut d: Vec<f64> = vectors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| euclidean(&vectors[i], v))
            .collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        *kth
    })
}

/// Index of the elbow of a descending curve: the point farthest from the
/// chord joining its endpoints, with both axes scaled to `[0, 1]`.
pub fn elbow_index(descending: &[f64]) -> usize {
    let m = descending.len();
    if m < 3 {
        return 0;
    }
    let first = descending[0];
    let last = descending[m - 1];
    let range = first - last;
    if range <= 0.0 {
        return 0;
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &y) in descending.iter().enumerate() {
        let x = i as f64 / (m - 1) as f64;
        let yn = (y - last) / range;
        // chord runs from (0, 1) to (1, 0)
        let dist = (x + yn - 1.0).abs();
        if dist > best.1 {
            best = (i, dist);
        }
    }
    best.0
}

/// Estimates epsilon as the `min_pts`-distance at the elbow of the sorted
/// k-distance curve.
pub fn estimate_epsilon(vectors: &[Vec<f64>], min_pts: usize) -> Result<f64, MapperError> {
    if min_pts < 1 {
        return Err(MapperError::InvalidParams("min_pts must be >= 1".into()));
    }
    if vectors.len() < min_pts + 1 {
        return Err(MapperError::TooFewPoints {
            needed: min_pts + 1,
            got: vectors.len(),
        });
    }
    let mut curve = k_distances(vectors, min_pts);
    curve.sort_by(|a, b| b.total_cmp(a));
    let max = curve[0];
    let min = curve[curve.len() - 1];
    if max < DEGENERATE_CURVE {
        return Err(MapperError::DegenerateCurve);
    }
    if max - min < DEGENERATE_CURVE {
        // flat but nonzero: every point sees the same k-distance
        return Ok(max);
    }
    Ok(curve[elbow_index(&curve)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_are_degenerate() {
        let v = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(estimate_epsilon(&v, 3), Err(MapperError::DegenerateCurve)));
    }

    #[test]
    fn unit_grid_gives_one() {
        let v: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        assert_eq!(estimate_epsilon(&v, 1).unwrap(), 1.0);
    }

    #[test]
    fn too_few_points() {
        let v = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            estimate_epsilon(&v, 3),
            Err(MapperError::TooFewPoints { needed: 4, got: 2 })
        ));
    }

    #[test]
    fn elbow_of_hockey_stick() {
        let curve = [10.0, 9.0, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
        assert_eq!(elbow_index(&curve), 2);
    }
}
