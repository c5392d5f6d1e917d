//! Deterministic offline providers.
//!
//! [`MockChat`] answers every catalog prompt in the expected shape. Its
//! explanation text depends only on the template and the focus tokens, so
//! an element and its retained perturbations get identical explanations.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use sha2::{Digest, Sha256};

use super::parse::{focus_position, tokenize};
use super::prompts::Prompt;
use super::provider::{ChatProvider, OccurrenceEmbedder, ProviderError, SentenceEmbedder};
use crate::dataset::{Dataset, PointId};

pub fn prompt_hash(prompt: &Prompt) -> String {
    hex::encode(Sha256::digest(prompt.text().as_bytes()))
}

const SUBSTITUTES: &[&str] = &["really", "often", "someone", "there", "quite", "again", "indeed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbMode {
    /// Each variant swaps one non-focus token.
    #[default]
    OneToken,
    /// Each variant repeats the input sentence.
    Identity,
}

#[derive(Debug, Default)]
pub struct MockChat {
    overrides: HashMap<String, String>,
    fixed: Option<String>,
    queued: Mutex<VecDeque<String>>,
    perturb: PerturbMode,
    drop_focus_in_last: bool,
    fail: bool,
    calls: AtomicUsize,
}

impl MockChat {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answers every prompt with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            fixed: Some(text.into()),
            ..Self::default()
        }
    }

    /// Fails every call with a transport error.
    pub fn failing() -> Self {
        Self {
            fail: true,
            ..Self::default()
        }
    }

    pub fn with_override(mut self, prompt: &Prompt, response: impl Into<String>) -> Self {
        self.overrides.insert(prompt_hash(prompt), response.into());
        self
    }

    /// Responses handed out, in order, to the next explanation prompts.
    pub fn with_queued_explanations(self, responses: impl IntoIterator<Item = String>) -> Self {
        self.queued.lock().extend(responses);
        self
    }

    pub fn with_perturb_mode(mut self, mode: PerturbMode) -> Self {
        self.perturb = mode;
        self
    }

    /// Makes the last perturbation candidate lose its focus token.
    pub fn dropping_focus_in_last(mut self) -> Self {
        self.drop_focus_in_last = true;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn perturbations(&self, sentence: &str, focus: &str, k: usize) -> String {
        let tokens = tokenize(sentence);
        let fpos = focus_position(&tokens, focus);
        let free: Vec<usize> = (0..tokens.len()).filter(|&i| Some(i) != fpos).collect();
        let mut out = String::new();
        for i in 0..k {
            let mut t = tokens.clone();
            if self.perturb == PerturbMode::OneToken {
                if free.is_empty() {
                    t.insert(0, SUBSTITUTES[i % SUBSTITUTES.len()].to_string());
                } else {
                    let pos = free[i % free.len()];
                    let mut sub = SUBSTITUTES[(i / free.len()) % SUBSTITUTES.len()];
                    if t[pos].eq_ignore_ascii_case(sub) {
                        sub = SUBSTITUTES[(i / free.len() + 1) % SUBSTITUTES.len()];
                    }
                    t[pos] = sub.to_string();
                }
            }
            if self.drop_focus_in_last && i + 1 == k {
                t.retain(|w| focus_position(std::slice::from_ref(w), focus).is_none());
                t.push("instead".into());
            }
            out.push_str(&format!("{}. {}\n", i + 1, t.join(" ")));
        }
        out
    }

    /// Step `j` of `k` from `s` to `t`: equal lengths switch differing
    /// positions left to right, otherwise a growing prefix of `t` is spliced
    /// in.
    fn blend(s: &[String], t: &[String], j: usize, k: usize) -> Vec<String> {
        if s.len() == t.len() {
            let diff: Vec<usize> = (0..s.len()).filter(|&i| s[i] != t[i]).collect();
            let switched = (j * diff.len() + (k + 1) / 2) / (k + 1);
            let mut cur = s.to_vec();
            for &i in &diff[..switched] {
                cur[i] = t[i].clone();
            }
            cur
        } else {
            let m = (j * t.len() + (k + 1) / 2) / (k + 1);
            t[..m].iter().chain(s.iter().skip(m)).cloned().collect()
        }
    }

    /// Blends the text before and after the focus token separately so every
    /// step keeps it.
    fn trajectory(source: &str, target: &str, focus: Option<&str>, k: usize) -> String {
        let s = tokenize(source);
        let t = tokenize(target);
        let split = focus.and_then(|f| Some((focus_position(&s, f)?, focus_position(&t, f)?)));
        let mut out = String::new();
        for j in 1..=k {
            let step = match split {
                Some((fs, ft)) => {
                    let mut v = Self::blend(&s[..fs], &t[..ft], j, k);
                    v.push(s[fs].clone());
                    v.extend(Self::blend(&s[fs + 1..], &t[ft + 1..], j, k));
                    v
                }
                None => Self::blend(&s, &t, j, k),
            };
            out.push_str(&format!("{j}. {}\n", step.join(" ")));
        }
        out
    }

    fn explanation(prompt: &Prompt) -> String {
        let focus = line_value(&prompt.user, "Target token(s):").unwrap_or_default();
        let first = focus.split(", ").next().unwrap_or("token").to_string();
        let family = prompt.template_id.split('_').next().unwrap_or("node");
        let text = if prompt.template_id.ends_with("_compare") {
            format!("Both groups use the marked tokens ({focus}) in a shared construction, and they differ in the surrounding context")
        } else {
            match family {
                "edge" => format!("The marked tokens ({focus}) keep one usage across the shared sentences and shift gradually between the two nodes"),
                "path" => format!("Usage of the marked tokens ({focus}) develops steadily from the first group to the last"),
                _ => format!("The marked tokens ({focus}) share one usage pattern across the group"),
            }
        };
        format!("DESCRIPTION: {text}.\nKEYWORDS: {first}; {family} usage; context")
    }
}

fn line_value<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

impl ChatProvider for MockChat {
    fn fingerprint(&self) -> String {
        "mock-chat/v1".into()
    }

    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail {
            return Err(ProviderError::Transport("mock provider configured to fail".into()));
        }
        if let Some(r) = self.overrides.get(&prompt_hash(prompt)) {
            return Ok(r.clone());
        }
        if let Some(f) = &self.fixed {
            return Ok(f.clone());
        }
        let user = &prompt.user;
        let k = line_value(user, "Number of sentences:").and_then(|v| v.parse::<usize>().ok());
        if let (Some(src), Some(dst), Some(k)) = (
            line_value(user, "Source sentence:"),
            line_value(user, "Target sentence:"),
            k,
        ) {
            return Ok(Self::trajectory(src, dst, line_value(user, "Target token:"), k));
        }
        if let (Some(sentence), Some(focus), Some(k)) =
            (line_value(user, "Sentence:"), line_value(user, "Target token:"), k)
        {
            return Ok(self.perturbations(sentence, focus, k));
        }
        if user.contains("KEYWORDS:") {
            if let Some(q) = self.queued.lock().pop_front() {
                return Ok(q);
            }
            return Ok(Self::explanation(prompt));
        }
        Ok(user.clone())
    }
}

/// Bag-of-words embedding with hashed, signed features.
#[derive(Debug, Clone)]
pub struct HashSentenceEmbedder {
    pub dim: usize,
}

impl Default for HashSentenceEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl SentenceEmbedder for HashSentenceEmbedder {
    fn fingerprint(&self) -> String {
        format!("hash-sentence/{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut v = vec![0.0; self.dim.max(1)];
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = Sha256::digest(word.to_lowercase().as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % v.len();
            v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        Ok(v)
    }
}

/// Looks texts up in a fixed table, falling back to the hash embedder.
#[derive(Debug, Clone, Default)]
pub struct FixedSentenceEmbedder {
    pub table: HashMap<String, Vec<f64>>,
    pub fallback: HashSentenceEmbedder,
}

impl FixedSentenceEmbedder {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        Self {
            table: entries.into_iter().collect(),
            fallback: HashSentenceEmbedder::default(),
        }
    }
}

impl SentenceEmbedder for FixedSentenceEmbedder {
    fn fingerprint(&self) -> String {
        let mut keys: Vec<_> = self.table.iter().collect();
        keys.sort_by(|a, b| a.0.cmp(b.0));
        let text = serde_json::to_string(&keys).expect("table serializes");
        format!("fixed-sentence:{}", &hex::encode(Sha256::digest(text.as_bytes()))[..16])
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        match self.table.get(text) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.embed(text),
        }
    }
}

/// Returns the stored vector of the dataset occurrence whose sentence is
/// closest to the query (fewest differing positions, same focus token,
/// smaller point id on ties).
#[derive(Debug, Clone)]
pub struct NearestOccurrenceEmbedder {
    name: String,
    entries: Vec<(PointId, Vec<String>, String)>,
    vectors: BTreeMap<u32, HashMap<PointId, Vec<f64>>>,
}

impl NearestOccurrenceEmbedder {
    pub fn new(dataset: &Dataset) -> Self {
        let entries = dataset
            .occurrences()
            .iter()
            .map(|o| {
                let tokens = dataset.sentence_tokens(o.sentence_id).unwrap_or_default().to_vec();
                (o.point_id, tokens, o.token.to_lowercase())
            })
            .collect();
        let vectors = dataset
            .layer_ids()
            .into_iter()
            .map(|l| {
                let layer = dataset.layer(l).expect("declared layer");
                let map = layer
                    .point_ids()
                    .iter()
                    .zip(layer.vectors())
                    .map(|(&p, v)| (p, v.clone()))
                    .collect();
                (l, map)
            })
            .collect();
        Self {
            name: dataset.name.clone(),
            entries,
            vectors,
        }
    }
}

fn position_distance(a: &[String], b: &[String]) -> usize {
    let n = a.len().max(b.len());
    (0..n).filter(|&i| a.get(i) != b.get(i)).count()
}

impl OccurrenceEmbedder for NearestOccurrenceEmbedder {
    fn fingerprint(&self) -> String {
        format!("nearest-occurrence:{}", self.name)
    }

    fn embed(&self, tokens: &[String], focus_index: usize, layer: u32) -> Result<Vec<f64>, ProviderError> {
        let vectors = self
            .vectors
            .get(&layer)
            .ok_or_else(|| ProviderError::Decode(format!("unknown layer {layer}")))?;
        let focus = tokens
            .get(focus_index)
            .ok_or_else(|| ProviderError::Decode("focus index out of range".into()))?
            .to_lowercase();
        let same_focus = self.entries.iter().any(|e| e.2 == focus);
        let best = self
            .entries
            .iter()
            .filter(|e| !same_focus || e.2 == focus)
            .min_by_key(|e| (position_distance(&e.1, tokens), e.0))
            .ok_or_else(|| ProviderError::Decode("empty dataset".into()))?;
        Ok(vectors[&best.0].clone())
    }
}

/// Embeds an intermediate sentence between `source` and `target` at the
/// fraction of differing positions that already carry the target token.
#[derive(Debug, Clone)]
pub struct InterpolatingEmbedder {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub source_vector: Vec<f64>,
    pub target_vector: Vec<f64>,
}

impl InterpolatingEmbedder {
    pub fn fraction(&self, tokens: &[String]) -> f64 {
        let (s, t) = (&self.source_tokens, &self.target_tokens);
        let diff: Vec<usize> = (0..s.len().max(t.len())).filter(|&i| s.get(i) != t.get(i)).collect();
        if diff.is_empty() {
            return 0.0;
        }
        let switched = diff.iter().filter(|&&i| tokens.get(i).is_some() && tokens.get(i) == t.get(i)).count();
        switched as f64 / diff.len() as f64
    }
}

impl OccurrenceEmbedder for InterpolatingEmbedder {
    fn fingerprint(&self) -> String {
        "interpolating".into()
    }

    fn embed(&self, tokens: &[String], _focus_index: usize, _layer: u32) -> Result<Vec<f64>, ProviderError> {
        let f = self.fraction(tokens);
        Ok(self
            .source_vector
            .iter()
            .zip(&self.target_vector)
            .map(|(a, b)| (1.0 - f) * a + f * b)
            .collect())
    }
}

/// Sentence text to vector table.
#[derive(Debug, Clone, Default)]
pub struct FixedOccurrenceEmbedder {
    pub table: HashMap<String, Vec<f64>>,
}

impl OccurrenceEmbedder for FixedOccurrenceEmbedder {
    fn fingerprint(&self) -> String {
        "fixed-occurrence".into()
    }

    fn embed(&self, tokens: &[String], _focus_index: usize, _layer: u32) -> Result<Vec<f64>, ProviderError> {
        let text = tokens.join(" ");
        self.table
            .get(&text)
            .cloned()
            .ok_or_else(|| ProviderError::Decode(format!("no fixed embedding for `{text}`")))
    }
}
