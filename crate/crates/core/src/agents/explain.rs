use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cache::{cache_key, Cache};
use super::mock::{HashSentenceEmbedder, MockChat, NearestOccurrenceEmbedder};
use super::parse::{focus_position, parse_explanation, parse_numbered_list, tokenize, ParsedExplanation};
use super::prompts::{
    render_prompt, MarkedSentence, Prompt, PromptPayload, SentenceGroup, TEMPLATE_VERSION,
};
use super::provider::{ChatProvider, OccurrenceEmbedder, SentenceEmbedder};
use super::{
    AgentConfig, AgentError, ElementSelection, Explanation, GraphContext, Operation,
    VerificationStatus, KEYWORD_COUNT,
};
use crate::dataset::{Dataset, PointId};
use crate::lens::cosine;
use crate::mapper::{Element, ElementPart, MapperGraph};
use crate::par;

const REPROMPT: &str = "Your previous answer did not follow the required format. Reply again using exactly:\nDESCRIPTION: <description>\nKEYWORDS: <keyword 1>; <keyword 2>; <keyword 3>";

/// Explanation and verification agents over one set of providers.
pub struct Agent {
    pub(super) chat: Arc<dyn ChatProvider>,
    pub(super) sentences: Arc<dyn SentenceEmbedder>,
    pub(super) occurrences: Arc<dyn OccurrenceEmbedder>,
    pub(super) cache: Arc<Cache>,
    pub config: AgentConfig,
}

/// Precomputed keywords and verification score of one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub element: String,
    pub description: String,
    pub keywords: [String; KEYWORD_COUNT],
    pub score: Option<f64>,
    pub status: VerificationStatus,
    pub explanation_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeReport {
    pub context: GraphContext,
    pub entries: BTreeMap<String, AnnotationEntry>,
    pub failures: BTreeMap<String, String>,
    pub computed: usize,
    pub cached: usize,
}

impl Agent {
    pub fn new(
        chat: Arc<dyn ChatProvider>,
        sentences: Arc<dyn SentenceEmbedder>,
        occurrences: Arc<dyn OccurrenceEmbedder>,
        cache: Arc<Cache>,
        config: AgentConfig,
    ) -> Self {
        Self {
            chat,
            sentences,
            occurrences,
            cache,
            config,
        }
    }

    /// Mock providers only; nothing leaves the process.
    pub fn offline(dataset: &Dataset, cache: Arc<Cache>) -> Self {
        Self::new(
            Arc::new(MockChat::new()),
            Arc::new(HashSentenceEmbedder::default()),
            Arc::new(NearestOccurrenceEmbedder::new(dataset)),
            cache,
            AgentConfig::default(),
        )
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn chat(&self) -> &dyn ChatProvider {
        self.chat.as_ref()
    }

    pub fn occurrence_embedder(&self) -> &dyn OccurrenceEmbedder {
        self.occurrences.as_ref()
    }

    pub(super) fn group(dataset: &Dataset, part: &ElementPart) -> Result<SentenceGroup, AgentError> {
        let sentences = part
            .points
            .iter()
            .map(|&p| MarkedSentence::from_occurrence(dataset, p).ok_or(AgentError::Dataset(
                crate::dataset::DatasetError::UnknownPoint(p),
            )))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SentenceGroup {
            label: part.label.clone(),
            sentences,
        })
    }

    pub(super) fn template_for(
        selection: &ElementSelection,
        operation: Operation,
    ) -> Result<(String, &'static str), AgentError> {
        let (family, word) = match selection.element {
            Element::Node { .. } => ("node", "node"),
            Element::Component { .. } => ("node", "component"),
            Element::Edge { .. } => ("edge", "edge"),
            Element::Path { .. } => ("path", "path"),
            Element::Trajectory { .. } => {
                return Err(AgentError::InvalidSelection(
                    "trajectories are explained through the trajectory module".into(),
                ))
            }
        };
        let op = match operation {
            Operation::Summarize => "summarize",
            Operation::Compare => "compare",
        };
        Ok((format!("{family}_{op}"), word))
    }

    pub(super) fn payload(
        word: &str,
        operation: Operation,
        first: Vec<SentenceGroup>,
        second: Option<Vec<SentenceGroup>>,
    ) -> PromptPayload {
        match (operation, second) {
            (Operation::Compare, Some(second)) => PromptPayload::Compare {
                element: word.to_string(),
                first,
                second,
            },
            _ => PromptPayload::Summarize {
                element: word.to_string(),
                groups: first,
            },
        }
    }

    /// Rejects mismatched compare requests before any provider call.
    pub fn check_selection(
        selection: &ElementSelection,
        operation: Operation,
        second: Option<&ElementSelection>,
    ) -> Result<(), AgentError> {
        match (operation, second) {
            (Operation::Summarize, Some(_)) => Err(AgentError::InvalidSelection(
                "summarize takes a single element".into(),
            )),
            (Operation::Compare, None) => Err(AgentError::InvalidSelection(
                "compare needs a second element".into(),
            )),
            (Operation::Compare, Some(s)) if s.element.kind() != selection.element.kind() => {
                Err(AgentError::InvalidSelection(format!(
                    "cannot compare a {} with a {}",
                    selection.element.kind(),
                    s.element.kind()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Cache key of an explanation request.
    pub fn explanation_key(
        &self,
        context: &GraphContext,
        selection: &ElementSelection,
        operation: Operation,
        second: Option<&ElementSelection>,
    ) -> String {
        cache_key(&json!({
            "kind": "explanation",
            "templates": TEMPLATE_VERSION,
            "dataset": context.dataset,
            "layer": context.layer,
            "params_hash": context.params_hash,
            "element": selection.element.key(),
            "second": second.map(|s| s.element.key()),
            "operation": operation,
            "provider": self.chat.fingerprint(),
            "sampling": self.config.sampling,
        }))
    }

    /// Summarizes one element or compares two elements of the same kind.
    pub fn explain(
        &self,
        dataset: &Dataset,
        graph: &MapperGraph,
        selection: &ElementSelection,
        operation: Operation,
        second: Option<&ElementSelection>,
    ) -> Result<Explanation, AgentError> {
        Self::check_selection(selection, operation, second)?;
        let context = GraphContext::of(graph);
        let id = self.explanation_key(&context, selection, operation, second);
        if let Some(hit) = self.cache.get::<Explanation>(&id) {
            return Ok(hit);
        }
        let (template_id, word) = Self::template_for(selection, operation)?;
        let groups = |s: &ElementSelection| {
            s.resolved
                .parts()
                .iter()
                .map(|p| Self::group(dataset, p))
                .collect::<Result<Vec<_>, _>>()
        };
        let payload = Self::payload(
            word,
            operation,
            groups(selection)?,
            second.map(groups).transpose()?,
        );
        let parsed = self.complete_explanation(&template_id, &payload)?;
        let explanation = Explanation {
            id: id.clone(),
            context,
            element: selection.clone(),
            second: second.cloned(),
            operation,
            template_id,
            text: parsed.text,
            keywords: parsed.keywords,
            provider_fingerprint: self.chat.fingerprint(),
        };
        self.cache.put(&id, &explanation)?;
        Ok(explanation)
    }

    /// Renders, calls the provider, and parses; reprompts on malformed
    /// answers.
    pub(super) fn complete_explanation(
        &self,
        template_id: &str,
        payload: &PromptPayload,
    ) -> Result<ParsedExplanation, AgentError> {
        let mut prompt: Prompt = render_prompt(template_id, payload, self.config.sampling)?;
        let attempts = self.config.reprompts + 1;
        let mut raw = String::new();
        for attempt in 1..=attempts {
            raw = self.chat.complete(&prompt)?;
            if let Some(parsed) = parse_explanation(&raw) {
                return Ok(parsed);
            }
            log::warn!("unparseable explanation (attempt {attempt}/{attempts})");
            if attempt == 1 {
                prompt.user = format!("{}\n\n{REPROMPT}", prompt.user);
            }
        }
        Err(AgentError::Unparseable { attempts, raw })
    }

    /// Up to `k` variants of `sentence` that keep `focus`; candidates that
    /// lose it are dropped.
    pub fn generate_perturbations(&self, sentence: &str, focus: &str, k: usize) -> Result<Vec<String>, AgentError> {
        if focus_position(&tokenize(sentence), focus).is_none() {
            return Err(AgentError::MissingFocus {
                sentence: sentence.to_string(),
                focus: focus.to_string(),
            });
        }
        let payload = PromptPayload::Perturbation {
            sentence: sentence.to_string(),
            focus: focus.to_string(),
            k: k.max(1),
        };
        let prompt = render_prompt("perturbation", &payload, self.config.sampling)?;
        let raw = self.chat.complete(&prompt)?;
        let items = parse_numbered_list(&raw);
        let total = items.len();
        let kept: Vec<String> = items
            .into_iter()
            .filter(|c| {
                let ok = focus_position(&tokenize(c), focus).is_some();
                if !ok {
                    log::info!("dropping perturbation without focus `{focus}`: {c}");
                }
                ok
            })
            .take(k.max(1))
            .collect();
        if kept.len() < total {
            log::warn!("{} of {total} perturbations dropped", total - kept.len());
        }
        if kept.is_empty() {
            return Err(AgentError::NoValidCandidates(focus.to_string()));
        }
        Ok(kept)
    }

    /// Cosine of the two sentence embeddings; exactly 1 for equal texts.
    pub fn sentence_similarity(&self, a: &str, b: &str) -> Result<f64, AgentError> {
        if a == b {
            return Ok(1.0);
        }
        let ea = self.sentences.embed(a)?;
        let eb = self.sentences.embed(b)?;
        cosine(&ea, &eb).ok_or(AgentError::DegenerateEmbedding)
    }

    /// Summarizes and verifies every component and node. Elements already in
    /// the cache cost no provider calls; failures are recorded per element.
    pub fn precompute_annotations(&self, dataset: &Dataset, graph: &MapperGraph) -> PrecomputeReport {
        let context = GraphContext::of(graph);
        let elements: Vec<Element> = (0..graph.components().len())
            .map(|index| Element::Component { index })
            .chain(graph.node_elements())
            .collect();
        let results = par::map_slice(&elements, |element| {
            let key = element.key();
            let run = || -> Result<(AnnotationEntry, bool), AgentError> {
                let selection = ElementSelection::resolve(graph, element.clone())?;
                let eid = self.explanation_key(&context, &selection, Operation::Summarize, None);
                let cached = self.cache.contains(&eid) && self.cache.contains(&self.verification_key(&eid));
                let explanation = self.explain(dataset, graph, &selection, Operation::Summarize, None)?;
                let v = self.verify(dataset, &explanation)?;
                Ok((
                    AnnotationEntry {
                        element: element.key(),
                        description: explanation.text.clone(),
                        keywords: explanation.keywords.clone(),
                        score: v.consistency,
                        status: v.status,
                        explanation_id: explanation.id,
                    },
                    cached,
                ))
            };
            (key, run())
        });
        let mut report = PrecomputeReport {
            context,
            entries: BTreeMap::new(),
            failures: BTreeMap::new(),
            computed: 0,
            cached: 0,
        };
        for (key, r) in results {
            match r {
                Ok((entry, cached)) => {
                    if cached {
                        report.cached += 1;
                    } else {
                        report.computed += 1;
                    }
                    report.entries.insert(key, entry);
                }
                Err(e) => {
                    log::warn!("precompute {key}: {e}");
                    report.failures.insert(key, e.to_string());
                }
            }
        }
        report
    }
}

pub(super) fn marked(tokens: Vec<String>, focus_index: usize) -> MarkedSentence {
    MarkedSentence { tokens, focus_index }
}

pub(super) fn origin_sentence(dataset: &Dataset, point: PointId) -> Result<MarkedSentence, AgentError> {
    MarkedSentence::from_occurrence(dataset, point)
        .ok_or(AgentError::Dataset(crate::dataset::DatasetError::UnknownPoint(point)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{build_mapper, MapperParams};
    use crate::synth::{generate, Shape, SynthConfig};

    fn fixture() -> (Dataset, MapperGraph) {
        let ds = generate(&SynthConfig { shape: Shape::Blobs, n: 60, k: 2, ..Default::default() }).unwrap();
        let g = build_mapper(&ds, 1, &MapperParams::ball(0.8)).unwrap();
        (ds, g)
    }

    fn agent_with(chat: MockChat, ds: &Dataset) -> Agent {
        Agent::new(
            Arc::new(chat),
            Arc::new(HashSentenceEmbedder::default()),
            Arc::new(NearestOccurrenceEmbedder::new(ds)),
            Arc::new(Cache::in_memory()),
            AgentConfig::default(),
        )
    }

    #[test]
    fn fixed_echo_parses() {
        let (ds, g) = fixture();
        let agent = agent_with(MockChat::fixed("X. KEYWORDS: a; b; c"), &ds);
        let sel = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
        let e = agent.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
        assert_eq!(e.text, "X");
        assert_eq!(e.keywords, ["a", "b", "c"].map(String::from));
    }

    #[test]
    fn cache_hit_skips_provider() {
        let (ds, g) = fixture();
        let chat = Arc::new(MockChat::new());
        let agent = Agent::new(
            chat.clone(),
            Arc::new(HashSentenceEmbedder::default()),
            Arc::new(NearestOccurrenceEmbedder::new(&ds)),
            Arc::new(Cache::in_memory()),
            AgentConfig::default(),
        );
        let sel = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
        let a = agent.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
        let b = agent.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(chat.calls(), 1);
    }

    #[test]
    fn unparseable_after_two_reprompts() {
        let (ds, g) = fixture();
        let chat = Arc::new(MockChat::fixed("no structure at all"));
        let agent = Agent::new(
            chat.clone(),
            Arc::new(HashSentenceEmbedder::default()),
            Arc::new(NearestOccurrenceEmbedder::new(&ds)),
            Arc::new(Cache::in_memory()),
            AgentConfig::default(),
        );
        let sel = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
        match agent.explain(&ds, &g, &sel, Operation::Summarize, None) {
            Err(AgentError::Unparseable { attempts, raw }) => {
                assert_eq!(attempts, 3);
                assert_eq!(raw, "no structure at all");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(chat.calls(), 3);
    }

    #[test]
    fn compare_with_itself_is_valid() {
        let (ds, g) = fixture();
        let agent = agent_with(MockChat::new(), &ds);
        let sel = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
        let e = agent.explain(&ds, &g, &sel, Operation::Compare, Some(&sel)).unwrap();
        assert_eq!(e.template_id, "node_compare");
        assert!(!e.text.is_empty());
    }

    #[test]
    fn selection_rules() {
        let (ds, g) = fixture();
        let agent = agent_with(MockChat::new(), &ds);
        let node = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
        let comp = ElementSelection::resolve(&g, Element::Component { index: 0 }).unwrap();
        assert!(matches!(
            agent.explain(&ds, &g, &node, Operation::Compare, None),
            Err(AgentError::InvalidSelection(_))
        ));
        assert!(matches!(
            agent.explain(&ds, &g, &node, Operation::Compare, Some(&comp)),
            Err(AgentError::InvalidSelection(_))
        ));
        let e = agent.explain(&ds, &g, &comp, Operation::Summarize, None).unwrap();
        assert_eq!(e.template_id, "node_summarize");
    }

    #[test]
    fn perturbation_contract() {
        let (ds, _) = fixture();
        let agent = agent_with(MockChat::new(), &ds);
        let out = agent.generate_perturbations("she worked as a nurse", "as", 5).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|s| focus_position(&tokenize(s), "as").is_some()));

        let agent = agent_with(MockChat::new().dropping_focus_in_last(), &ds);
        let out = agent.generate_perturbations("she worked as a nurse", "as", 5).unwrap();
        assert_eq!(out.len(), 4);

        assert!(matches!(
            agent.generate_perturbations("no focus here", "as", 5),
            Err(AgentError::MissingFocus { .. })
        ));
    }

    #[test]
    fn similarity() {
        let (ds, _) = fixture();
        let agent = Agent::new(
            Arc::new(MockChat::new()),
            Arc::new(super::super::mock::FixedSentenceEmbedder::new([
                ("p".to_string(), vec![1.0, 0.0]),
                ("q".to_string(), vec![0.0, 1.0]),
                ("r".to_string(), vec![1.0, 1.0]),
                ("s".to_string(), vec![2.0, 2.0]),
            ])),
            Arc::new(NearestOccurrenceEmbedder::new(&ds)),
            Arc::new(Cache::in_memory()),
            AgentConfig::default(),
        );
        assert_eq!(agent.sentence_similarity("same", "same").unwrap(), 1.0);
        assert_eq!(agent.sentence_similarity("p", "q").unwrap(), 0.0);
        assert!((agent.sentence_similarity("r", "s").unwrap() - 1.0).abs() < 1e-12);
    }
}
