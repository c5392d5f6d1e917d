//! DBSCAN with closed Euclidean balls.
//!
//! Points are scanned in ascending id order, so a border point reachable from
//! several clusters joins the one discovered first.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dataset::PointId;
use crate::lens::euclidean;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assignment {
    Cluster(usize),
    Noise,
}

impl Assignment {
    pub fn cluster(self) -> Option<usize> {
        match self {
            Assignment::Cluster(c) => Some(c),
            Assignment::Noise => None,
        }
    }
}

/// Indices (into `vectors`) within `eps` of each vector, self included.
pub(crate) fn neighborhoods(vectors: &[&[f64]], eps: f64) -> Vec<Vec<usize>> {
    par::map_range(vectors.len(), |i| {
        vectors
            .iter()
            .enumerate()
            .filter(|(_, v)| euclidean(vectors[i], v) <= eps)
            .map(|(j, _)| j)
            .collect()
    })
}

/// Clusters `points` and returns the assignment of every id. Cluster ids are
/// numbered in discovery order starting at 0.
pub fn dbscan(points: &[(PointId, &[f64])], eps: f64, min_pts: usize) -> BTreeMap<PointId, Assignment> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].0);
    let vectors: Vec<&[f64]> = order.iter().map(|&i| points[i].1).collect();
    let ids: Vec<PointId> = order.iter().map(|&i| points[i].0).collect();

    let neigh = neighborhoods(&vectors, eps);
    let core: Vec<bool> = neigh.iter().map(|n| n.len() >= min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; vectors.len()];
    let mut next = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..vectors.len() {
        if label[start].is_some() || !core[start] {
            continue;
        }
        let cluster = next;
        next += 1;
        label[start] = Some(cluster);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neigh[p] {
                if label[q].is_none() {
                    label[q] = Some(cluster);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }

    ids.into_iter()
        .zip(label)
        .map(|(id, l)| (id, l.map_or(Assignment::Noise, Assignment::Cluster)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(xs: &[f64], eps: f64, min_pts: usize) -> Vec<Assignment> {
        let vecs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let pts: Vec<(PointId, &[f64])> = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| (i as PointId, v.as_slice()))
            .collect();
        dbscan(&pts, eps, min_pts).into_values().collect()
    }

    #[test]
    fn collinear_triplet_is_one_cluster() {
        assert_eq!(run(&[0.0, 1.0, 2.0], 1.5, 3), vec![Assignment::Cluster(0); 3]);
    }

    #[test]
    fn isolated_point_is_noise() {
        let a = run(&[0.0, 0.5, 1.0, 100.0], 1.0, 2);
        assert_eq!(a[3], Assignment::Noise);
        assert_eq!(a[0], Assignment::Cluster(0));
    }

    #[test]
    fn closed_ball() {
        // distance exactly eps counts as a neighbour
        assert_eq!(run(&[0.0, 1.0], 1.0, 2), vec![Assignment::Cluster(0); 2]);
    }

    #[test]
    fn border_goes_to_first_cluster() {
        // x=1.5 is a non-core border of both dense groups
        let a = run(&[0.0, 0.25, 0.5, 1.5, 2.5, 2.75, 3.0], 1.0, 4);
        assert_eq!(a[3], Assignment::Cluster(0));
        assert_eq!(a[4], Assignment::Cluster(1));
        assert_eq!(a[0], Assignment::Cluster(0));
    }
}
