use std::collections::BTreeMap;

use super::cover::build_cover;
use super::dbscan::dbscan;
use super::epsilon::estimate_epsilon;
use super::graph::{nerve, MapperGraph, MapperNode};
use super::params::{Epsilon, MapperKind, MapperParams};
use super::MapperError;
use crate::dataset::{Dataset, LayerEmbeddings, PointId};
use crate::par;

/// Classical mapper of one dataset layer under its stored (L2) lens.
pub fn build_classical_mapper(
    dataset: &Dataset,
    layer: u32,
    params: &MapperParams,
) -> Result<MapperGraph, MapperError> {
    let emb = dataset.layer(layer)?;
    let mut graph = classical_from_layer(emb, params)?;
    graph.dataset = dataset.name.clone();
    Ok(graph)
}

/// Resolves `params.epsilon`, estimating it once over the whole layer when
/// it is `auto`.
pub fn resolve_epsilon(emb: &LayerEmbeddings, params: &MapperParams) -> Result<f64, MapperError> {
    match params.epsilon {
        Epsilon::Fixed(e) => Ok(e),
        Epsilon::Auto => estimate_epsilon(emb.vectors(), params.min_pts),
    }
}

/// Classical mapper over a bare layer, using whatever lens values it carries.
pub fn classical_from_layer(
    emb: &LayerEmbeddings,
    params: &MapperParams,
) -> Result<MapperGraph, MapperError> {
    if params.kind != MapperKind::Classical {
        return Err(MapperError::InvalidParams(
            "expected classical mapper params".into(),
        ));
    }
    params.validate()?;
    let (lo, hi) = emb.lens_range().ok_or(MapperError::EmptyLayer)?;
    let cover = build_cover(lo, hi, params.cover_n, params.cover_overlap)?;
    let eps = resolve_epsilon(emb, params)?;

    let ids = emb.point_ids();
    let lens = emb.lens_values();
    let vectors = emb.vectors();

    // intervals are independent until the nerve is assembled
    let clusters_per_interval: Vec<Vec<Vec<PointId>>> = par::map_slice(&cover, |iv| {
        let pts: Vec<(PointId, &[f64])> = (0..ids.len())
            .filter(|&i| iv.contains(lens[i]))
            .map(|i| (ids[i], vectors[i].as_slice()))
            .collect();
        let mut clusters: BTreeMap<usize, Vec<PointId>> = BTreeMap::new();
        for (id, a) in dbscan(&pts, eps, params.min_pts) {
            if let Some(c) = a.cluster() {
                clusters.entry(c).or_default().push(id);
            }
        }
        clusters.into_values().collect()
    });

    let mut nodes = Vec::new();
    for (iv, clusters) in cover.iter().zip(clusters_per_interval) {
        for mut members in clusters {
            members.sort_unstable();
            let lens_mean =
                members.iter().map(|&p| emb.lens(p).expect("member")).sum::<f64>() / members.len() as f64;
            nodes.push(MapperNode {
                id: nodes.len(),
                interval: Some(iv.index),
                landmark: None,
                members,
                lens_mean,
            });
        }
    }
    let edges = nerve(&nodes);
    let mut covered = vec![false; ids.len()];
    for n in &nodes {
        for &m in &n.members {
            covered[emb.position(m).expect("member")] = true;
        }
    }
    let noise = ids
        .iter()
        .zip(&covered)
        .filter(|(_, &c)| !c)
        .map(|(&id, _)| id)
        .collect();

    Ok(MapperGraph {
        dataset: String::new(),
        layer: emb.layer,
        params: MapperParams {
            epsilon: params.epsilon,
            ..params.clone()
        },
        epsilon: eps,
        cover,
        nodes,
        edges,
        noise,
    })
}
