use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cover::CoverInterval;
use super::params::MapperParams;
use super::MapperError;
use crate::dataset::PointId;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperNode {
    pub id: NodeId,
    /// Cover interval index (classical mapper).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<usize>,
    /// Landmark point (ball mapper).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<PointId>,
    /// Sorted ascending.
    pub members: Vec<PointId>,
    pub lens_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperEdge {
    pub a: NodeId,
    pub b: NodeId,
    pub shared: Vec<PointId>,
    pub jaccard: f64,
}

/// The 1-skeleton of the nerve of a clustered cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperGraph {
    #[serde(default)]
    pub dataset: String,
    pub layer: u32,
    pub params: MapperParams,
    /// The radius actually used (resolved when params ask for `auto`).
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cover: Vec<CoverInterval>,
    pub nodes: Vec<MapperNode>,
    /// Sorted by `(a, b)` with `a < b`.
    pub edges: Vec<MapperEdge>,
    pub noise: Vec<PointId>,
}

/// A mapper element chosen for inspection or explanation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Element {
    Node { id: NodeId },
    Edge { a: NodeId, b: NodeId },
    Path { nodes: Vec<NodeId> },
    Component { index: usize },
    Trajectory { id: String },
}

impl Element {
    pub fn kind(&self) -> &'static str {
        match self {
            Element::Node { .. } => "node",
            Element::Edge { .. } => "edge",
            Element::Path { .. } => "path",
            Element::Component { .. } => "component",
            Element::Trajectory { .. } => "trajectory",
        }
    }

    /// Short stable identifier such as `node:3`, `edge:1-2`, `path:1-4-7`.
    pub fn key(&self) -> String {
        match self {
            Element::Node { id } => format!("node:{id}"),
            Element::Edge { a, b } => format!("edge:{}-{}", a.min(b), a.max(b)),
            Element::Path { nodes } => format!(
                "path:{}",
                nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-")
            ),
            Element::Component { index } => format!("component:{index}"),
            Element::Trajectory { id } => format!("trajectory:{id}"),
        }
    }

    pub fn parse_key(key: &str) -> Option<Element> {
        let (kind, rest) = key.split_once(':')?;
        let nums = || -> Option<Vec<NodeId>> { rest.split('-').map(|s| s.parse().ok()).collect() };
        match kind {
            "node" => Some(Element::Node { id: rest.parse().ok()? }),
            "edge" => match nums()?.as_slice() {
                [a, b] => Some(Element::Edge { a: *a, b: *b }),
                _ => None,
            },
            "path" => Some(Element::Path { nodes: nums()? }),
            "component" => Some(Element::Component { index: rest.parse().ok()? }),
            "trajectory" => Some(Element::Trajectory { id: rest.to_string() }),
            _ => None,
        }
    }
}

/// Point sets behind a selected element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResolvedPoints {
    Node {
        id: NodeId,
        members: Vec<PointId>,
    },
    Edge {
        a: NodeId,
        b: NodeId,
        unique_a: Vec<PointId>,
        shared: Vec<PointId>,
        unique_b: Vec<PointId>,
    },
    Path {
        nodes: Vec<NodeMembers>,
    },
    Component {
        index: usize,
        nodes: Vec<NodeMembers>,
        union: Vec<PointId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMembers {
    pub node: NodeId,
    pub members: Vec<PointId>,
}

/// A labelled group of points inside a resolved element: the unit the
/// prompts list sentences by and the verifier retains perturbations against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementPart {
    pub label: String,
    pub points: Vec<PointId>,
}

impl ResolvedPoints {
    pub fn parts(&self) -> Vec<ElementPart> {
        match self {
            ResolvedPoints::Node { id, members } => vec![ElementPart {
                label: format!("node {id}"),
                points: members.clone(),
            }],
            ResolvedPoints::Edge {
                a,
                b,
                unique_a,
                shared,
                unique_b,
            } => vec![
                ElementPart {
                    label: format!("unique to node {a}"),
                    points: unique_a.clone(),
                },
                ElementPart {
                    label: format!("shared by nodes {a} and {b}"),
                    points: shared.clone(),
                },
                ElementPart {
                    label: format!("unique to node {b}"),
                    points: unique_b.clone(),
                },
            ],
            ResolvedPoints::Path { nodes } | ResolvedPoints::Component { nodes, .. } => nodes
                .iter()
                .map(|n| ElementPart {
                    label: format!("node {}", n.node),
                    points: n.members.clone(),
                })
                .collect(),
        }
    }

    /// Every point of the element, sorted and deduplicated.
    pub fn all_points(&self) -> Vec<PointId> {
        let set: BTreeSet<PointId> = self
            .parts()
            .into_iter()
            .flat_map(|p| p.points)
            .collect();
        set.into_iter().collect()
    }
}

pub(crate) fn sorted_intersection(a: &[PointId], b: &[PointId]) -> Vec<PointId> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn sorted_difference(a: &[PointId], b: &[PointId]) -> Vec<PointId> {
    a.iter()
        .copied()
        .filter(|x| b.binary_search(x).is_err())
        .collect()
}

pub(crate) fn jaccard(a: &[PointId], b: &[PointId], shared: usize) -> f64 {
    let union = a.len() + b.len() - shared;
    if union == 0 {
        0.0
    } else {
        shared as f64 / union as f64
    }
}

impl MapperGraph {
    pub fn node(&self, id: NodeId) -> Result<&MapperNode, MapperError> {
        self.nodes.get(id).ok_or(MapperError::UnknownNode(id))
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<&MapperEdge> {
        let key = (a.min(b), a.max(b));
        self.edges
            .binary_search_by(|e| (e.a, e.b).cmp(&key))
            .ok()
            .map(|i| &self.edges[i])
    }

    /// Sorted neighbour lists indexed by node id.
    pub fn adjacency(&self) -> Vec<Vec<NodeId>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Connected components, each sorted, ordered by their smallest node id.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        for start in 0..self.nodes.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut stack = vec![start];
            while let Some(n) = stack.pop() {
                for &m in &adj[n] {
                    if !seen[m] {
                        seen[m] = true;
                        comp.push(m);
                        stack.push(m);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// `|E| - |V| + #components`, the number of independent cycles.
    pub fn cycle_rank(&self) -> usize {
        self.edges.len() + self.components().len() - self.nodes.len()
    }

    /// Fewest-hop path from `src` to `dst`; among equally short paths the
    /// lexicographically smallest node sequence. `None` when disconnected.
    pub fn shortest_path(&self, src: NodeId, dst: NodeId) -> Result<Option<Vec<NodeId>>, MapperError> {
        self.node(src)?;
        self.node(dst)?;
        let adj = self.adjacency();
        // distances to dst, then walk greedily from src through smallest ids
        let mut dist = vec![usize::MAX; self.nodes.len()];
        dist[dst] = 0;
        let mut queue = VecDeque::from([dst]);
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n] {
                if dist[m] == usize::MAX {
                    dist[m] = dist[n] + 1;
                    queue.push_back(m);
                }
            }
        }
        if dist[src] == usize::MAX {
            return Ok(None);
        }
        let mut path = vec![src];
        let mut cur = src;
        while cur != dst {
            cur = *adj[cur]
                .iter()
                .find(|&&m| dist[m] + 1 == dist[cur])
                .expect("bfs layering");
            path.push(cur);
        }
        Ok(Some(path))
    }

    /// Resolves an element to its point sets.
    pub fn element_points(&self, element: &Element) -> Result<ResolvedPoints, MapperError> {
        match element {
            Element::Node { id } => Ok(ResolvedPoints::Node {
                id: *id,
                members: self.node(*id)?.members.clone(),
            }),
            Element::Edge { a, b } => {
                let na = self.node(*a)?;
                let nb = self.node(*b)?;
                if self.edge(*a, *b).is_none() || a == b {
                    return Err(MapperError::NotAdjacent(*a, *b));
                }
                let shared = sorted_intersection(&na.members, &nb.members);
                Ok(ResolvedPoints::Edge {
                    a: *a,
                    b: *b,
                    unique_a: sorted_difference(&na.members, &shared),
                    unique_b: sorted_difference(&nb.members, &shared),
                    shared,
                })
            }
            Element::Path { nodes } => {
                if nodes.len() < 2 {
                    return Err(MapperError::InvalidElement(
                        "a path needs at least two nodes".into(),
                    ));
                }
                for w in nodes.windows(2) {
                    self.node(w[0])?;
                    self.node(w[1])?;
                    if self.edge(w[0], w[1]).is_none() {
                        return Err(MapperError::NotAdjacent(w[0], w[1]));
                    }
                }
                Ok(ResolvedPoints::Path {
                    nodes: nodes
                        .iter()
                        .map(|&n| NodeMembers {
                            node: n,
                            members: self.nodes[n].members.clone(),
                        })
                        .collect(),
                })
            }
            Element::Component { index } => {
                let comps = self.components();
                let comp = comps.get(*index).ok_or(MapperError::UnknownComponent(*index))?;
                let nodes: Vec<NodeMembers> = comp
                    .iter()
                    .map(|&n| NodeMembers {
                        node: n,
                        members: self.nodes[n].members.clone(),
                    })
                    .collect();
                let union: BTreeSet<PointId> =
                    nodes.iter().flat_map(|n| n.members.iter().copied()).collect();
                Ok(ResolvedPoints::Component {
                    index: *index,
                    nodes,
                    union: union.into_iter().collect(),
                })
            }
            Element::Trajectory { .. } => Err(MapperError::InvalidElement(
                "trajectories are resolved by the trajectory module".into(),
            )),
        }
    }

    /// Every element id this graph defines, for batch jobs.
    pub fn node_elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.nodes.iter().map(|n| Element::Node { id: n.id })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// GraphML with members as a comma-joined node attribute.
    pub fn to_graphml(&self) -> String {
        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
        s.push_str("  <key id=\"members\" for=\"node\" attr.name=\"members\" attr.type=\"string\"/>\n");
        s.push_str("  <key id=\"size\" for=\"node\" attr.name=\"size\" attr.type=\"int\"/>\n");
        s.push_str("  <key id=\"lens_mean\" for=\"node\" attr.name=\"lens_mean\" attr.type=\"double\"/>\n");
        s.push_str("  <key id=\"interval\" for=\"node\" attr.name=\"interval\" attr.type=\"int\"/>\n");
        s.push_str("  <key id=\"shared\" for=\"edge\" attr.name=\"shared\" attr.type=\"string\"/>\n");
        s.push_str("  <key id=\"jaccard\" for=\"edge\" attr.name=\"jaccard\" attr.type=\"double\"/>\n");
        let _ = writeln!(s, "  <graph id=\"layer{}\" edgedefault=\"undirected\">", self.layer);
        for n in &self.nodes {
            let _ = writeln!(s, "    <node id=\"n{}\">", n.id);
            let _ = writeln!(s, "      <data key=\"members\">{}</data>", join_ids(&n.members));
            let _ = writeln!(s, "      <data key=\"size\">{}</data>", n.members.len());
            let _ = writeln!(s, "      <data key=\"lens_mean\">{}</data>", n.lens_mean);
            if let Some(iv) = n.interval {
                let _ = writeln!(s, "      <data key=\"interval\">{iv}</data>");
            }
            s.push_str("    </node>\n");
        }
        for (i, e) in self.edges.iter().enumerate() {
            let _ = writeln!(s, "    <edge id=\"e{i}\" source=\"n{}\" target=\"n{}\">", e.a, e.b);
            let _ = writeln!(s, "      <data key=\"shared\">{}</data>", join_ids(&e.shared));
            let _ = writeln!(s, "      <data key=\"jaccard\">{}</data>", e.jaccard);
            s.push_str("    </edge>\n");
        }
        s.push_str("  </graph>\n</graphml>\n");
        s
    }
}

fn join_ids(ids: &[PointId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Assembles nodes into a graph: edges for every pair of nodes that share a
/// point, sorted by `(a, b)`.
pub(crate) fn nerve(nodes: &[MapperNode]) -> Vec<MapperEdge> {
    let mut pairs = BTreeSet::new();
    let mut by_point: std::collections::HashMap<PointId, Vec<NodeId>> = Default::default();
    for n in nodes {
        for &p in &n.members {
            by_point.entry(p).or_default().push(n.id);
        }
    }
    for owners in by_point.values() {
        for (i, &a) in owners.iter().enumerate() {
            for &b in &owners[i + 1..] {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
    }
    pairs
        .into_iter()
        .map(|(a, b)| {
            let shared = sorted_intersection(&nodes[a].members, &nodes[b].members);
            let jac = jaccard(&nodes[a].members, &nodes[b].members, shared.len());
            MapperEdge { a, b, shared, jaccard: jac }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn graph_from(members: &[&[PointId]]) -> MapperGraph {
        let nodes: Vec<MapperNode> = members
            .iter()
            .enumerate()
            .map(|(id, m)| MapperNode {
                id,
                interval: Some(0),
                landmark: None,
                members: m.to_vec(),
                lens_mean: 0.0,
            })
            .collect();
        let edges = nerve(&nodes);
        MapperGraph {
            dataset: "t".into(),
            layer: 1,
            params: MapperParams::default(),
            epsilon: 1.0,
            cover: vec![],
            nodes,
            edges,
            noise: vec![],
        }
    }

    #[test]
    fn components_counts() {
        let tri = graph_from(&[&[1, 2], &[2, 3], &[3, 1]]);
        assert_eq!(tri.components(), vec![vec![0, 1, 2]]);
        assert_eq!(tri.cycle_rank(), 1);
        let none = graph_from(&[&[1], &[2], &[3]]);
        assert_eq!(none.components().len(), 3);
    }

    #[test]
    fn five_cycle_takes_short_arc() {
        // 0-1-2-3-4-0
        let g = graph_from(&[&[0, 1], &[1, 2], &[2, 3], &[3, 4], &[4, 0]]);
        assert_eq!(g.shortest_path(0, 3).unwrap(), Some(vec![0, 4, 3]));
        assert_eq!(g.shortest_path(2, 2).unwrap(), Some(vec![2]));
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // square 0-1-3, 0-2-3
        let g = graph_from(&[&[10, 11, 12], &[10, 20], &[11, 30], &[20, 30]]);
        assert_eq!(g.shortest_path(0, 3).unwrap(), Some(vec![0, 1, 3]));
    }

    #[test]
    fn disconnected_and_unknown() {
        let g = graph_from(&[&[1], &[2]]);
        assert_eq!(g.shortest_path(0, 1).unwrap(), None);
        assert!(matches!(g.shortest_path(0, 9), Err(MapperError::UnknownNode(9))));
    }

    #[test]
    fn edge_partition() {
        let g = graph_from(&[&[1, 2, 3], &[3, 4]]);
        let r = g.element_points(&Element::Edge { a: 0, b: 1 }).unwrap();
        assert_eq!(
            r,
            ResolvedPoints::Edge { a: 0, b: 1, unique_a: vec![1, 2], shared: vec![3], unique_b: vec![4] }
        );
        assert!((g.edges[0].jaccard - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_adjacent_edge_rejected() {
        let g = graph_from(&[&[1], &[2]]);
        assert!(matches!(
            g.element_points(&Element::Edge { a: 0, b: 1 }),
            Err(MapperError::NotAdjacent(0, 1))
        ));
    }

    #[test]
    fn path_and_component_resolution() {
        let g = graph_from(&[&[1, 2], &[2, 3], &[3, 4], &[9]]);
        let r = g.element_points(&Element::Path { nodes: vec![0, 1, 2] }).unwrap();
        match r {
            ResolvedPoints::Path { nodes } => {
                let m: Vec<_> = nodes.into_iter().map(|n| n.members).collect();
                assert_eq!(m, vec![vec![1, 2], vec![2, 3], vec![3, 4]]);
            }
            other => panic!("{other:?}"),
        }
        match g.element_points(&Element::Component { index: 1 }).unwrap() {
            ResolvedPoints::Component { union, .. } => assert_eq!(union, vec![9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn element_keys_round_trip() {
        for e in [
            Element::Node { id: 3 },
            Element::Edge { a: 1, b: 2 },
            Element::Path { nodes: vec![1, 4, 7] },
            Element::Component { index: 0 },
        ] {
            assert_eq!(Element::parse_key(&e.key()), Some(e));
        }
        assert_eq!(Element::parse_key("bogus:1"), None);
    }

    #[test]
    fn graphml_mentions_members() {
        let g = graph_from(&[&[1, 2, 3], &[3, 4]]);
        let xml = g.to_graphml();
        assert!(xml.contains("<data key=\"members\">1,2,3</data>"));
        assert!(xml.contains("source=\"n0\" target=\"n1\""));
    }
}
