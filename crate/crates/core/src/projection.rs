//! 2D coordinates for the scatter view and centroid-anchored node layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{LayerEmbeddings, PointId};
use crate::mapper::{MapperGraph, NodeId};

#[derive(Debug, thiserror::Error)]
pub enum ProjectionError {
    #[error("projection needs at least 2 points and 2 dimensions (got {points} x {dim})")]
    TooSmall { points: usize, dim: usize },
    #[error("point {0} has no coordinates")]
    MissingPoint(PointId),
    #[error("non-finite coordinate for point {0}")]
    NonFinite(PointId),
    #[error("{path}:{line}: {message}")]
    File {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub method: String,
    pub coords: BTreeMap<PointId, (f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    method: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CoordRecord {
    point_id: PointId,
    x: f64,
    y: f64,
}

/// Eigenvalues below this fraction of the total variance count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Mean-centred projection onto the top two principal axes. Each axis is
/// oriented so that its largest-magnitude loading is positive.
pub fn pca_project(layer: &LayerEmbeddings) -> Result<Projection2D, ProjectionError> {
    let ids = layer.point_ids();
    let n = ids.len();
    let d = layer.dim;
    if n < 2 || d < 2 {
        return Err(ProjectionError::TooSmall { points: n, dim: d });
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| layer.vectors()[i][j]);
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    for j in 0..d {
        let m = mean[j];
        x.column_mut(j).apply(|v| *v -= m);
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total <= f64::MIN_POSITIVE {
        log::warn!("pca: all points identical, returning the origin for every point");
        return Ok(Projection2D {
            method: "pca".into(),
            coords: ids.iter().map(|&id| (id, (0.0, 0.0))).collect(),
        });
    }

    let axes = principal_axes(&x, 2, total);
    let coords = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let row = x.row(i);
            let c: Vec<f64> = axes
                .iter()
                .map(|a| a.as_ref().map_or(0.0, |a| row.transpose().dot(a)))
                .collect();
            (id, (c[0], c[1]))
        })
        .collect();
    Ok(Projection2D {
        method: "pca".into(),
        coords,
    })
}

/// Top `k` unit principal directions of the centred matrix `x` (rows are
/// points). `None` marks a direction with zero variance.
fn principal_axes(x: &DMatrix<f64>, k: usize, total: f64) -> Vec<Option<DVector<f64>>> {
    let (n, d) = x.shape();
    let mut axes = Vec::with_capacity(k);
    if d <= n {
        let cov = x.transpose() * x;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        for &i in order.iter().take(k) {
            if eig.eigenvalues[i] <= RANK_TOLERANCE * total {
                axes.push(None);
            } else {
                axes.push(Some(orient(eig.eigenvectors.column(i).into_owned())));
            }
        }
    } else {
        // fewer points than dimensions: go through the Gram matrix
        let gram = x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        for &i in order.iter().take(k) {
            if eig.eigenvalues[i] <= RANK_TOLERANCE * total {
                axes.push(None);
                continue;
            }
            let v = x.transpose() * eig.eigenvectors.column(i);
            let norm = v.norm();
            axes.push(Some(orient(v / norm)));
        }
    }
    while axes.len() < k {
        axes.push(None);
    }
    axes
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn orient(mut axis: DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for i in 1..axis.len() {
        if axis[i].abs() > axis[best].abs() + 1e-12 {
            best = i;
        }
    }
    if axis[best] < 0.0 {
        axis.neg_mut();
    }
    axis
}

/// Places every node at the centroid of its members' 2D coordinates.
pub fn anchored_layout(
    graph: &MapperGraph,
    proj: &Projection2D,
) -> Result<BTreeMap<NodeId, (f64, f64)>, ProjectionError> {
    graph
        .nodes
        .iter()
        .map(|node| {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for m in &node.members {
                let (x, y) = proj.coords.get(m).ok_or(ProjectionError::MissingPoint(*m))?;
                sx += x;
                sy += y;
            }
            let k = node.members.len() as f64;
            Ok((node.id, (sx / k, sy / k)))
        })
        .collect()
}

/// Reads a precomputed projection: a header record `{"method": ...}`
/// followed by `{"point_id", "x", "y"}` records.
pub fn read_projection_file(path: &Path) -> Result<Projection2D, ProjectionError> {
    let err = |line: usize, message: String| ProjectionError::File {
        path: path.display().to_string(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| err(0, e.to_string()))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(|e| err(i + 1, e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
            }
            None => return Err(err(0, "empty projection file".into())),
        }
    };
    let mut coords = BTreeMap::new();
    for (i, line) in lines {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CoordRecord = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        if !(rec.x.is_finite() && rec.y.is_finite()) {
            return Err(ProjectionError::NonFinite(rec.point_id));
        }
        coords.insert(rec.point_id, (rec.x, rec.y));
    }
    Ok(Projection2D {
        method: header.method,
        coords,
    })
}

pub fn write_projection_file(proj: &Projection2D, path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &Header { method: proj.method.clone() })?;
    out.write_all(b"\n")?;
    for (&point_id, &(x, y)) in &proj.coords {
        serde_json::to_writer(&mut out, &CoordRecord { point_id, x, y })?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
