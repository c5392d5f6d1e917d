//! Perturbation trajectories between two sentences, projected onto the
//! mapper graph step by step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{
    cache_key, focus_position, parse_numbered_list, render_prompt, tokenize, Agent, AgentError,
    PromptPayload,
};
use crate::dataset::{Dataset, DatasetError, LayerEmbeddings, PointId};
use crate::lens::{euclidean, l2_norm};
use crate::mapper::{MapperGraph, NodeId};
use crate::par;

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("source token `{source_token}` and target token `{target_token}` differ")]
    FocusMismatch {
        source_token: String,
        target_token: String,
    },
    #[error("the source and target steps cannot be edited")]
    EndpointEdit,
    #[error("step index {index} out of range for {len} steps")]
    BadIndex { index: usize, len: usize },
    #[error("text `{text}` does not contain the focus token `{focus}`")]
    MissingFocus { text: String, focus: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Attachment {
    Node { id: NodeId },
    Edge { a: NodeId, b: NodeId },
    Unattached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nearest {
    pub point_id: PointId,
    pub distance: f64,
}

/// Lookup structure for attaching many embeddings to one graph.
pub struct AttachIndex<'a> {
    graph: &'a MapperGraph,
    layer: &'a LayerEmbeddings,
    nodes_of: BTreeMap<PointId, Vec<NodeId>>,
}

impl<'a> AttachIndex<'a> {
    pub fn new(graph: &'a MapperGraph, layer: &'a LayerEmbeddings) -> Self {
        let mut nodes_of: BTreeMap<PointId, Vec<NodeId>> = BTreeMap::new();
        for n in &graph.nodes {
            for &m in &n.members {
                nodes_of.entry(m).or_default().push(n.id);
            }
        }
        for v in nodes_of.values_mut() {
            v.sort_unstable();
        }
        Self { graph, layer, nodes_of }
    }

    /// Nearest covered point within `eps` among points sharing a cover
    /// interval with the embedding (every covered point for ball mapper
    /// graphs), and the node or edge it belongs to.
    pub fn attach(&self, embedding: &[f64], eps: f64) -> (Attachment, Option<Nearest>) {
        if embedding.len() != self.layer.dim {
            return (Attachment::Unattached, None);
        }
        let lens = l2_norm(embedding);
        let intervals: Vec<_> = self.graph.cover.iter().filter(|c| c.contains(lens)).collect();
        if !self.graph.cover.is_empty() && intervals.is_empty() {
            return (Attachment::Unattached, None);
        }
        let mut best: Option<Nearest> = None;
        for (i, (&p, v)) in self.layer.point_ids().iter().zip(self.layer.vectors()).enumerate() {
            if !self.nodes_of.contains_key(&p) {
                continue;
            }
            let pl = self.layer.lens_values()[i];
            if !intervals.is_empty() && !intervals.iter().any(|c| c.contains(pl)) {
                continue;
            }
            let d = euclidean(embedding, v);
            if d <= eps && best.as_ref().is_none_or(|b| d < b.distance) {
                best = Some(Nearest { point_id: p, distance: d });
            }
        }
        match best {
            None => (Attachment::Unattached, None),
            Some(n) => {
                let nodes = &self.nodes_of[&n.point_id];
                let att = if nodes.len() == 1 {
                    Attachment::Node { id: nodes[0] }
                } else {
                    Attachment::Edge { a: nodes[0], b: nodes[1] }
                };
                (att, Some(n))
            }
        }
    }
}

pub fn attach(embedding: &[f64], graph: &MapperGraph, layer: &LayerEmbeddings, eps: f64) -> Attachment {
    AttachIndex::new(graph, layer).attach(embedding, eps).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub point_id: PointId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub text: String,
    pub focus_index: usize,
    /// The focus token occurs more than once; the first occurrence is used.
    #[serde(default)]
    pub repeated_focus: bool,
    pub embedding: Vec<f64>,
    pub attachment: Attachment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest: Option<Nearest>,
    /// User verdict on the step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub layer: u32,
    pub focus: String,
    pub epsilon: f64,
    pub source: Endpoint,
    pub target: Endpoint,
    /// Source first, target last.
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum TrajectoryEdit {
    Insert { index: usize, text: String },
    Delete { index: usize },
    Judge { index: usize, accepted: Option<bool> },
}

/// Intermediate sentences from `source` to `target`, in order; those
/// without the focus token are dropped.
pub fn generate_trajectory_sentences(
    agent: &Agent,
    source: &str,
    target: &str,
    focus: &str,
    k: usize,
) -> Result<Vec<String>, AgentError> {
    let payload = PromptPayload::Trajectory {
        source: source.to_string(),
        target: target.to_string(),
        focus: focus.to_string(),
        k,
    };
    let prompt = render_prompt("trajectory", &payload, agent.config.sampling)?;
    let raw = agent.chat().complete(&prompt)?;
    let items = parse_numbered_list(&raw);
    let total = items.len();
    let kept: Vec<String> = items
        .into_iter()
        .filter(|s| focus_position(&tokenize(s), focus).is_some())
        .take(k)
        .collect();
    if kept.len() < total.min(k) {
        log::warn!("{} trajectory sentences dropped for missing `{focus}`", total.min(k) - kept.len());
    }
    if kept.is_empty() {
        return Err(AgentError::NoValidCandidates(focus.to_string()));
    }
    Ok(kept)
}

fn occurrence_text(dataset: &Dataset, p: PointId) -> Result<(String, String, usize), DatasetError> {
    let occ = dataset.occurrence(p).ok_or(DatasetError::UnknownPoint(p))?;
    let text = dataset.sentence_text(occ.sentence_id).ok_or(DatasetError::UnknownPoint(p))?;
    Ok((text, occ.token.clone(), occ.token_index))
}

fn embedded_step(agent: &Agent, index: &AttachIndex, layer: u32, eps: f64, text: &str, focus: &str) -> TrajectoryStep {
    let tokens = tokenize(text);
    let focus_index = focus_position(&tokens, focus).unwrap_or(0);
    let repeated_focus = tokens
        .iter()
        .filter(|t| focus_position(std::slice::from_ref(*t), focus).is_some())
        .count()
        > 1;
    match agent.occurrence_embedder().embed(&tokens, focus_index, layer) {
        Ok(embedding) => {
            let (attachment, nearest) = index.attach(&embedding, eps);
            TrajectoryStep {
                text: text.to_string(),
                focus_index,
                repeated_focus,
                embedding,
                attachment,
                nearest,
                accepted: None,
                error: None,
            }
        }
        Err(e) => {
            log::warn!("embedding `{text}` failed: {e}");
            TrajectoryStep {
                text: text.to_string(),
                focus_index,
                repeated_focus,
                embedding: Vec::new(),
                attachment: Attachment::Unattached,
                nearest: None,
                accepted: None,
                error: Some(e.to_string()),
            }
        }
    }
}

fn endpoint_step(index: &AttachIndex, layer: &LayerEmbeddings, eps: f64, p: PointId, text: String, focus_index: usize) -> Result<TrajectoryStep, DatasetError> {
    let embedding = layer.vector(p).ok_or(DatasetError::UnknownPoint(p))?.to_vec();
    let (attachment, nearest) = index.attach(&embedding, eps);
    Ok(TrajectoryStep {
        text,
        focus_index,
        repeated_focus: false,
        embedding,
        attachment,
        nearest,
        accepted: None,
        error: None,
    })
}

/// Generates `k` intermediate sentences, embeds them with the occurrence
/// embedder and attaches every step. Embedding failures leave unattached
/// steps carrying the error.
pub fn build_trajectory(
    agent: &Agent,
    dataset: &Dataset,
    graph: &MapperGraph,
    source_pt: PointId,
    target_pt: PointId,
    k: usize,
) -> Result<Trajectory, TrajectoryError> {
    let layer = dataset.layer(graph.layer)?;
    let (src_text, src_tok, src_idx) = occurrence_text(dataset, source_pt)?;
    let (dst_text, dst_tok, dst_idx) = occurrence_text(dataset, target_pt)?;
    if !src_tok.eq_ignore_ascii_case(&dst_tok) {
        return Err(TrajectoryError::FocusMismatch {
            source_token: src_tok,
            target_token: dst_tok,
        });
    }
    let eps = graph.epsilon;
    let index = AttachIndex::new(graph, layer);
    let middle = if k == 0 {
        Vec::new()
    } else {
        generate_trajectory_sentences(agent, &src_text, &dst_text, &src_tok, k)?
    };
    let mut steps = vec![endpoint_step(&index, layer, eps, source_pt, src_text.clone(), src_idx)?];
    steps.extend(par::map_slice(&middle, |t| embedded_step(agent, &index, graph.layer, eps, t, &src_tok)));
    steps.push(endpoint_step(&index, layer, eps, target_pt, dst_text.clone(), dst_idx)?);
    let id = cache_key(&json!({
        "kind": "trajectory",
        "dataset": graph.dataset,
        "params_hash": graph.params.params_hash(),
        "layer": graph.layer,
        "source": source_pt,
        "target": target_pt,
        "steps": middle,
    }));
    Ok(Trajectory {
        id,
        layer: graph.layer,
        focus: src_tok,
        epsilon: eps,
        source: Endpoint { point_id: source_pt, text: src_text },
        target: Endpoint { point_id: target_pt, text: dst_text },
        steps,
    })
}

/// Returns a new trajectory with one step inserted, deleted, or judged.
/// Step indices count the source as 0.
pub fn edit_trajectory(
    agent: &Agent,
    dataset: &Dataset,
    graph: &MapperGraph,
    traj: &Trajectory,
    edit: &TrajectoryEdit,
) -> Result<Trajectory, TrajectoryError> {
    let len = traj.steps.len();
    let mut out = traj.clone();
    match edit {
        TrajectoryEdit::Insert { index, text } => {
            if *index == 0 || *index >= len {
                return Err(if *index == 0 {
                    TrajectoryError::EndpointEdit
                } else {
                    TrajectoryError::BadIndex { index: *index, len }
                });
            }
            if focus_position(&tokenize(text), &traj.focus).is_none() {
                return Err(TrajectoryError::MissingFocus {
                    text: text.clone(),
                    focus: traj.focus.clone(),
                });
            }
            let layer = dataset.layer(graph.layer)?;
            let index_ = AttachIndex::new(graph, layer);
            let step = embedded_step(agent, &index_, graph.layer, traj.epsilon, text, &traj.focus);
            out.steps.insert(*index, step);
        }
        TrajectoryEdit::Delete { index } => {
            if *index >= len {
                return Err(TrajectoryError::BadIndex { index: *index, len });
            }
            if *index == 0 || *index == len - 1 {
                return Err(TrajectoryError::EndpointEdit);
            }
            out.steps.remove(*index);
        }
        TrajectoryEdit::Judge { index, accepted } => {
            let step = out
                .steps
                .get_mut(*index)
                .ok_or(TrajectoryError::BadIndex { index: *index, len })?;
            step.accepted = *accepted;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{CoverInterval, MapperEdge, MapperNode, MapperParams};

    fn graph() -> (LayerEmbeddings, MapperGraph) {
        // points on a line; nodes {0,1,2} and {2,3,4} over intervals [0,2.5], [1.5,4.5]
        let layer = LayerEmbeddings::new(1, (0..5).map(|i| (i as PointId, vec![i as f64 + 0.1, 0.0])).collect()).unwrap();
        let g = MapperGraph {
            dataset: "line".into(),
            layer: 1,
            params: MapperParams::classical(2, 0.3, 3, crate::mapper::Epsilon::Fixed(1.5)),
            epsilon: 1.5,
            cover: vec![
                CoverInterval { index: 0, lo: 0.0, hi: 2.5 },
                CoverInterval { index: 1, lo: 1.5, hi: 4.5 },
            ],
            nodes: vec![
                MapperNode { id: 0, interval: Some(0), landmark: None, members: vec![0, 1, 2], lens_mean: 1.1 },
                MapperNode { id: 1, interval: Some(1), landmark: None, members: vec![2, 3, 4], lens_mean: 3.1 },
            ],
            edges: vec![MapperEdge { a: 0, b: 1, shared: vec![2], jaccard: 0.2 }],
            noise: vec![],
        };
        (layer, g)
    }

    #[test]
    fn attachment_rules() {
        let (layer, g) = graph();
        assert_eq!(attach(&[0.1, 0.0], &g, &layer, 1.5), Attachment::Node { id: 0 });
        assert_eq!(attach(&[2.1, 0.0], &g, &layer, 1.5), Attachment::Edge { a: 0, b: 1 });
        assert_eq!(attach(&[4.1, 0.0], &g, &layer, 1.5), Attachment::Node { id: 1 });
        // lens beyond every interval
        assert_eq!(attach(&[9.0, 0.0], &g, &layer, 100.0), Attachment::Unattached);
        // inside an interval but farther than eps from every point
        assert_eq!(attach(&[0.1, 1.4], &g, &layer, 0.5), Attachment::Unattached);
    }

    #[test]
    fn ties_go_to_smaller_point() {
        let (layer, g) = graph();
        // equidistant from points 0 (0.1) and 1 (1.1)
        let (_, n) = AttachIndex::new(&g, &layer).attach(&[0.6, 0.0], 1.5);
        assert_eq!(n.unwrap().point_id, 0);
    }

    #[test]
    fn ball_graph_skips_interval_filter() {
        let (layer, mut g) = graph();
        g.cover.clear();
        g.params = MapperParams::ball(1.5);
        assert_eq!(attach(&[4.5, 0.0], &g, &layer, 1.5), Attachment::Node { id: 1 });
    }
}
