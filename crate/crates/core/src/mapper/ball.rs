use super::graph::{nerve, MapperGraph, MapperNode};
use super::params::MapperParams;
use super::MapperError;
use crate::dataset::{Dataset, LayerEmbeddings, PointId};
use crate::lens::euclidean;
use crate::par;

pub fn build_ball_mapper(dataset: &Dataset, layer: u32, eps: f64) -> Result<MapperGraph, MapperError> {
    let emb = dataset.layer(layer)?;
    let mut graph = ball_from_layer(emb, eps)?;
    graph.dataset = dataset.name.clone();
    Ok(graph)
}

/// Greedy landmark scan in ascending point id: a point farther than `eps`
/// from every landmark so far becomes a landmark. Returns layer positions.
pub fn greedy_landmarks(emb: &LayerEmbeddings, eps: f64) -> Vec<usize> {
    let vectors = emb.vectors();
    let mut landmarks: Vec<usize> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        if !landmarks.iter().any(|&l| euclidean(&vectors[l], v) <= eps) {
            landmarks.push(i);
        }
    }
    landmarks
}

/// Ball mapper: node `i` holds every point within `eps` of landmark `i`.
pub fn ball_from_layer(emb: &LayerEmbeddings, eps: f64) -> Result<MapperGraph, MapperError> {
    let params = MapperParams::ball(eps);
    params.validate()?;
    if emb.is_empty() {
        return Err(MapperError::EmptyLayer);
    }
    let ids = emb.point_ids();
    let vectors = emb.vectors();
    let landmarks = greedy_landmarks(emb, eps);
    let members: Vec<Vec<PointId>> = par::map_slice(&landmarks, |&l| {
        (0..ids.len())
            .filter(|&j| euclidean(&vectors[l], &vectors[j]) <= eps)
            .map(|j| ids[j])
            .collect()
    });
    let nodes: Vec<MapperNode> = landmarks
        .iter()
        .zip(members)
        .enumerate()
        .map(|(id, (&l, members))| {
            let lens_mean = members.iter().map(|&p| emb.lens(p).expect("member")).sum::<f64>()
                / members.len() as f64;
            MapperNode {
                id,
                interval: None,
                landmark: Some(ids[l]),
                members,
                lens_mean,
            }
        })
        .collect();
    let edges = nerve(&nodes);
    Ok(MapperGraph {
        dataset: String::new(),
        layer: emb.layer,
        params,
        epsilon: eps,
        cover: Vec::new(),
        nodes,
        edges,
        noise: Vec::new(),
    })
}
