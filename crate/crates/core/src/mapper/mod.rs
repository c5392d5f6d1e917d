//! Classical and ball mapper construction plus structural queries.

pub mod ball;
pub mod classical;
pub mod cover;
pub mod dbscan;
pub mod epsilon;
pub mod graph;
pub mod params;

pub use ball::{ball_from_layer, build_ball_mapper};
pub use classical::{build_classical_mapper, classical_from_layer};
pub use cover::{build_cover, CoverInterval};
pub use dbscan::{dbscan, Assignment};
pub use epsilon::estimate_epsilon;
pub use graph::{Element, ElementPart, MapperEdge, MapperGraph, MapperNode, NodeId, NodeMembers, ResolvedPoints};
pub use params::{Epsilon, MapperKind, MapperParams, DEFAULT_COVER_N, DEFAULT_COVER_OVERLAP, DEFAULT_MIN_PTS};

use crate::dataset::{Dataset, DatasetError};

#[derive(Debug, thiserror::Error)]
pub enum MapperError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("too few points for epsilon estimation: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate curve: all k-distances are zero; set epsilon explicitly")]
    DegenerateCurve,
    #[error("layer has no points")]
    EmptyLayer,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown component {0}")]
    UnknownComponent(usize),
    #[error("nodes {0} and {1} are not adjacent")]
    NotAdjacent(NodeId, NodeId),
    #[error("invalid element: {0}")]
    InvalidElement(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Builds whichever mapper `params.kind` asks for.
pub fn build_mapper(dataset: &Dataset, layer: u32, params: &MapperParams) -> Result<MapperGraph, MapperError> {
    params.validate()?;
    match (params.kind, params.epsilon) {
        (MapperKind::Classical, _) => build_classical_mapper(dataset, layer, params),
        (MapperKind::Ball, Epsilon::Fixed(eps)) => build_ball_mapper(dataset, layer, eps),
        (MapperKind::Ball, Epsilon::Auto) => Err(MapperError::InvalidParams(
            "ball mapper needs an explicit epsilon".into(),
        )),
    }
}
