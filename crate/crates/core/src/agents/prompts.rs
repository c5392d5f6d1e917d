//! Prompt template catalog and rendering.
//!
//! Templates live as text files under `templates/v1/`. Each file has a
//! `### system` and a `### user` section; lines starting with a single `#`
//! are comments. Placeholders use `{{name}}`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::dataset::{Dataset, PointId};

pub const TEMPLATE_VERSION: &str = "v1";
pub const DEFAULT_SENTENCE_CAP: usize = 100;

const CATALOG: &[(&str, &str)] = &[
    ("node_summarize", include_str!("../../templates/v1/node_summarize.txt")),
    ("node_compare", include_str!("../../templates/v1/node_compare.txt")),
    ("edge_summarize", include_str!("../../templates/v1/edge_summarize.txt")),
    ("edge_compare", include_str!("../../templates/v1/edge_compare.txt")),
    ("path_summarize", include_str!("../../templates/v1/path_summarize.txt")),
    ("path_compare", include_str!("../../templates/v1/path_compare.txt")),
    ("perturbation", include_str!("../../templates/v1/perturbation.txt")),
    ("trajectory", include_str!("../../templates/v1/trajectory.txt")),
];

/// Template ids that were written without a published counterpart.
pub const RECONSTRUCTED: &[&str] = &["edge_compare", "path_compare"];

pub fn template_ids() -> impl Iterator<Item = &'static str> {
    CATALOG.iter().map(|(id, _)| *id)
}

fn template_source(id: &str) -> Option<&'static str> {
    CATALOG.iter().find(|(k, _)| *k == id).map(|(_, v)| *v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template_id: String,
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

/// A sentence with the position of its focus token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSentence {
    pub tokens: Vec<String>,
    pub focus_index: usize,
}

impl MarkedSentence {
    pub fn focus(&self) -> &str {
        &self.tokens[self.focus_index]
    }

    /// The sentence with its focus token in square brackets.
    pub fn marked(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if i == self.focus_index { format!("[{t}]") } else { t.clone() })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_occurrence(dataset: &Dataset, point: PointId) -> Option<Self> {
        let occ = dataset.occurrence(point)?;
        let tokens = dataset.sentence_tokens(occ.sentence_id)?.to_vec();
        Some(Self {
            tokens,
            focus_index: occ.token_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceGroup {
    pub label: String,
    pub sentences: Vec<MarkedSentence>,
}

/// Everything a template can be filled with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptPayload {
    Summarize {
        element: String,
        groups: Vec<SentenceGroup>,
    },
    Compare {
        element: String,
        first: Vec<SentenceGroup>,
        second: Vec<SentenceGroup>,
    },
    Perturbation {
        sentence: String,
        focus: String,
        k: usize,
    },
    Trajectory {
        source: String,
        target: String,
        focus: String,
        k: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub cap: usize,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_SENTENCE_CAP,
            seed: 0,
        }
    }
}

/// Deterministic subset of at most `cap` items, kept in original order.
pub fn sample_capped<T: Clone>(items: &[T], opts: SamplingOptions) -> Vec<T> {
    if items.len() <= opts.cap {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = rand::seq::index::sample(&mut rng, items.len(), opts.cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

struct Parsed {
    system: String,
    user: String,
}

fn parse_template(src: &str) -> Parsed {
    let mut system = Vec::new();
    let mut user = Vec::new();
    let mut section = 0;
    for line in src.lines() {
        match line.trim_end() {
            "### system" => section = 1,
            "### user" => section = 2,
            l if l.starts_with('#') && !l.starts_with("##") => {}
            l => match section {
                1 => system.push(l),
                2 => user.push(l),
                _ => {}
            },
        }
    }
    Parsed {
        system: system.join("\n").trim().to_string(),
        user: user.join("\n").trim().to_string(),
    }
}

fn fill(text: &str, vars: &[(&str, String)]) -> String {
    let mut out = text.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

fn render_groups(groups: &[SentenceGroup], opts: SamplingOptions) -> String {
    let mut out = String::new();
    for g in groups {
        let picked = sample_capped(&g.sentences, opts);
        out.push_str(&format!("{} ({} sentences):\n", capitalize(&g.label), picked.len()));
        for s in &picked {
            out.push_str("- ");
            out.push_str(&s.marked());
            out.push('\n');
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn focus_tokens<'a>(groups: impl IntoIterator<Item = &'a SentenceGroup>) -> String {
    let set: BTreeSet<&str> = groups
        .into_iter()
        .flat_map(|g| g.sentences.iter().map(|s| s.focus()))
        .collect();
    set.into_iter().collect::<Vec<_>>().join(", ")
}

fn nonempty(groups: &[SentenceGroup]) -> bool {
    groups.iter().any(|g| !g.sentences.is_empty())
}

/// Fills a catalog template. Sentence groups are capped per group with
/// seeded sampling.
pub fn render_prompt(
    template_id: &str,
    payload: &PromptPayload,
    opts: SamplingOptions,
) -> Result<Prompt, AgentError> {
    let src = template_source(template_id)
        .ok_or_else(|| AgentError::UnknownTemplate(template_id.to_string()))?;
    let tpl = parse_template(src);
    let empty = || AgentError::EmptyPayload(template_id.to_string());
    let vars: Vec<(&str, String)> = match payload {
        PromptPayload::Summarize { element, groups } => {
            if !nonempty(groups) {
                return Err(empty());
            }
            vec![
                ("element", element.clone()),
                ("focus_tokens", focus_tokens(groups)),
                ("groups", render_groups(groups, opts)),
            ]
        }
        PromptPayload::Compare {
            element,
            first,
            second,
        } => {
            if !nonempty(first) || !nonempty(second) {
                return Err(empty());
            }
            vec![
                ("element", element.clone()),
                ("focus_tokens", focus_tokens(first.iter().chain(second))),
                ("element_a", format!("{} A", capitalize(element))),
                ("groups_a", render_groups(first, opts)),
                ("element_b", format!("{} B", capitalize(element))),
                ("groups_b", render_groups(second, opts)),
            ]
        }
        PromptPayload::Perturbation { sentence, focus, k } => {
            if sentence.trim().is_empty() || focus.is_empty() {
                return Err(empty());
            }
            vec![
                ("sentence", sentence.clone()),
                ("focus", focus.clone()),
                ("k", k.to_string()),
            ]
        }
        PromptPayload::Trajectory {
            source,
            target,
            focus,
            k,
        } => {
            if source.trim().is_empty() || target.trim().is_empty() || focus.is_empty() {
                return Err(empty());
            }
            vec![
                ("source", source.clone()),
                ("target", target.clone()),
                ("focus", focus.clone()),
                ("k", k.to_string()),
            ]
        }
    };
    let expects = match template_id {
        "perturbation" => matches!(payload, PromptPayload::Perturbation { .. }),
        "trajectory" => matches!(payload, PromptPayload::Trajectory { .. }),
        id if id.ends_with("_compare") => matches!(payload, PromptPayload::Compare { .. }),
        _ => matches!(payload, PromptPayload::Summarize { .. }),
    };
    if !expects {
        return Err(AgentError::PayloadMismatch(template_id.to_string()));
    }
    Ok(Prompt {
        template_id: template_id.to_string(),
        system: fill(&tpl.system, &vars),
        user: fill(&tpl.user, &vars),
    })
}
