//! LLM-backed agents that explain mapper elements and verify those
//! explanations by perturbing the underlying sentences.

mod cache;
mod explain;
pub mod mock;
mod parse;
pub mod prompts;
pub mod provider;
mod verify;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, PointId};
use crate::mapper::{Element, MapperError, MapperGraph, ResolvedPoints};

pub use cache::{cache_key, Cache};
pub use explain::{Agent, AnnotationEntry, PrecomputeReport};
pub use parse::{focus_position, parse_explanation, parse_numbered_list, tokenize, ParsedExplanation};
pub use prompts::{render_prompt, MarkedSentence, Prompt, PromptPayload, SamplingOptions, SentenceGroup};
pub use provider::{ChatProvider, OccurrenceEmbedder, ProviderError, SentenceEmbedder};
pub use verify::{classify_perturbation, retain_perturbations, Retention};

/// Perturbed sentences requested per origin sentence.
pub const DEFAULT_PERTURBATIONS: usize = 5;
/// Extra attempts after an unparseable explanation response.
pub const DEFAULT_REPROMPTS: usize = 2;
pub const KEYWORD_COUNT: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("empty payload for template `{0}`")]
    EmptyPayload(String),
    #[error("payload does not fit template `{0}`")]
    PayloadMismatch(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("unparseable response after {attempts} attempts: {raw}")]
    Unparseable { attempts: usize, raw: String },
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("focus token `{focus}` does not occur in `{sentence}`")]
    MissingFocus { sentence: String, focus: String },
    #[error("no perturbed sentence kept the focus token `{0}`")]
    NoValidCandidates(String),
    #[error("retention needs at least 2 member points (got {0})")]
    TooFewMembers(usize),
    #[error("embedding has zero norm or mismatched length")]
    DegenerateEmbedding,
    #[error("cache: {0}")]
    Cache(String),
    #[error("verification failed: {source}")]
    VerificationFailed {
        source: Box<AgentError>,
        partial: Box<VerificationResult>,
    },
}

impl AgentError {
    /// Whether the failure came from a model or embedding provider.
    pub fn is_provider(&self) -> bool {
        match self {
            AgentError::Provider(_) | AgentError::Unparseable { .. } => true,
            AgentError::VerificationFailed { source, .. } => source.is_provider(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Summarize,
    Compare,
}

impl std::str::FromStr for Operation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summarize" => Ok(Operation::Summarize),
            "compare" => Ok(Operation::Compare),
            other => Err(format!("unknown operation `{other}`")),
        }
    }
}

/// A typed element reference together with its resolved point sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSelection {
    pub element: Element,
    pub resolved: ResolvedPoints,
}

impl ElementSelection {
    pub fn resolve(graph: &MapperGraph, element: Element) -> Result<Self, AgentError> {
        let resolved = graph.element_points(&element)?;
        Ok(Self { element, resolved })
    }
}

/// Identifies the graph an explanation was computed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphContext {
    pub dataset: String,
    pub layer: u32,
    pub params_hash: String,
}

impl GraphContext {
    pub fn of(graph: &MapperGraph) -> Self {
        Self {
            dataset: graph.dataset.clone(),
            layer: graph.layer,
            params_hash: graph.params.params_hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Cache key of this explanation.
    pub id: String,
    pub context: GraphContext,
    pub element: ElementSelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<ElementSelection>,
    pub operation: Operation,
    pub template_id: String,
    pub text: String,
    pub keywords: [String; KEYWORD_COUNT],
    pub provider_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    OneToken,
    Rephrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSentence {
    pub origin_point: PointId,
    /// 0 for the explained element, 1 for the second element of a comparison.
    pub side: usize,
    /// Index into the element's parts (edge: unique-a, shared, unique-b).
    pub part: usize,
    pub text: String,
    pub focus_index: usize,
    pub kind: PerturbationKind,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_distance: Option<f64>,
    pub retained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationStatus {
    Ok,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub original: Explanation,
    pub perturbed_sentences: Vec<PerturbedSentence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed_explanation: Option<Explanation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    pub status: VerificationStatus,
}

impl VerificationResult {
    pub fn retained(&self) -> impl Iterator<Item = &PerturbedSentence> {
        self.perturbed_sentences.iter().filter(|p| p.retained)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub sampling: SamplingOptions,
    pub perturbations: usize,
    pub reprompts: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingOptions::default(),
            perturbations: DEFAULT_PERTURBATIONS,
            reprompts: DEFAULT_REPROMPTS,
        }
    }
}
