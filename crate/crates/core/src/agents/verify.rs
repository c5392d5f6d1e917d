use std::collections::BTreeMap;

use serde_json::json;

use super::cache::cache_key;
use super::explain::{marked, origin_sentence, Agent};
use super::parse::{focus_position, tokenize};
use super::prompts::{sample_capped, SentenceGroup};
use super::{
    AgentError, ElementSelection, Explanation, PerturbationKind, PerturbedSentence,
    VerificationResult, VerificationStatus,
};
use crate::dataset::{Dataset, LayerEmbeddings, PointId};
use crate::lens::euclidean;
use crate::mapper::ElementPart;
use crate::par;

pub fn classify_perturbation(original: &[String], perturbed: &[String]) -> PerturbationKind {
    if original.len() == perturbed.len()
        && original.iter().zip(perturbed).filter(|(a, b)| a != b).count() == 1
    {
        PerturbationKind::OneToken
    } else {
        PerturbationKind::Rephrase
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retention {
    /// Mean pairwise Euclidean distance between member embeddings.
    pub threshold: f64,
    /// Indices into the candidate slice.
    pub retained: Vec<usize>,
}

/// Marks, per origin point, the candidate with the smallest mean distance to
/// the members, provided that mean is below the members' mean pairwise
/// distance. Sets `mean_distance` on every candidate.
pub fn retain_perturbations(
    members: &[PointId],
    candidates: &mut [PerturbedSentence],
    layer: &LayerEmbeddings,
) -> Result<Retention, AgentError> {
    if members.len() < 2 {
        return Err(AgentError::TooFewMembers(members.len()));
    }
    let vectors: Vec<&[f64]> = members
        .iter()
        .map(|&m| layer.vector(m).ok_or(AgentError::Dataset(crate::dataset::DatasetError::UnknownPoint(m))))
        .collect::<Result<_, _>>()?;
    let m = vectors.len();
    let row_sums = par::map_range(m, |i| {
        (i + 1..m).map(|j| euclidean(vectors[i], vectors[j])).sum::<f64>()
    });
    let threshold = row_sums.iter().sum::<f64>() / (m * (m - 1) / 2) as f64;

    for c in candidates.iter() {
        if c.embedding.len() != layer.dim {
            return Err(AgentError::DegenerateEmbedding);
        }
    }
    let means = par::map_slice(candidates, |c| {
        vectors.iter().map(|v| euclidean(&c.embedding, v)).sum::<f64>() / m as f64
    });
    let mut best: BTreeMap<PointId, usize> = BTreeMap::new();
    for (i, (c, &mean)) in candidates.iter_mut().zip(&means).enumerate() {
        c.mean_distance = Some(mean);
        c.retained = false;
        if mean < threshold {
            best.entry(c.origin_point)
                .and_modify(|b| {
                    if mean < means[*b] {
                        *b = i;
                    }
                })
                .or_insert(i);
        }
    }
    let mut retained: Vec<usize> = best.into_values().collect();
    retained.sort_unstable();
    for &i in &retained {
        candidates[i].retained = true;
    }
    Ok(Retention { threshold, retained })
}

struct Job {
    side: usize,
    part: usize,
    origin: PointId,
}

impl Agent {
    pub fn verification_key(&self, explanation_id: &str) -> String {
        cache_key(&json!({
            "kind": "verification",
            "explanation": explanation_id,
            "perturbations": self.config.perturbations,
            "sampling": self.config.sampling,
            "chat": self.chat.fingerprint(),
            "sentences": self.sentences.fingerprint(),
            "occurrences": self.occurrences.fingerprint(),
        }))
    }

    fn perturb_origin(
        &self,
        dataset: &Dataset,
        layer: u32,
        job: &Job,
    ) -> Result<Vec<PerturbedSentence>, AgentError> {
        let origin = origin_sentence(dataset, job.origin)?;
        let focus = origin.focus().to_string();
        let texts = match self.generate_perturbations(&origin.tokens.join(" "), &focus, self.config.perturbations) {
            Ok(t) => t,
            Err(AgentError::NoValidCandidates(_)) => {
                log::warn!("point {}: no usable perturbations", job.origin);
                return Ok(Vec::new());
            }
            Err(e) => return Err(e),
        };
        texts
            .into_iter()
            .map(|text| {
                let tokens = tokenize(&text);
                let focus_index = focus_position(&tokens, &focus).expect("filtered on focus");
                if tokens.iter().filter(|t| focus_position(std::slice::from_ref(t), &focus).is_some()).count() > 1 {
                    log::info!("focus `{focus}` occurs more than once in `{text}`; using the first");
                }
                let embedding = self.occurrences.embed(&tokens, focus_index, layer)?;
                Ok(PerturbedSentence {
                    origin_point: job.origin,
                    side: job.side,
                    part: job.part,
                    kind: classify_perturbation(&origin.tokens, &tokens),
                    text,
                    focus_index,
                    embedding,
                    mean_distance: None,
                    retained: false,
                })
            })
            .collect()
    }

    /// Perturbs the explained sentences, keeps perturbations that stay
    /// inside their part of the element, explains the kept set again and
    /// scores the two descriptions by sentence-embedding cosine.
    pub fn verify(
        &self,
        dataset: &Dataset,
        explanation: &Explanation,
    ) -> Result<VerificationResult, AgentError> {
        let key = self.verification_key(&explanation.id);
        if let Some(hit) = self.cache.get::<VerificationResult>(&key) {
            return Ok(hit);
        }
        let layer = dataset.layer(explanation.context.layer)?;
        let sides: Vec<&ElementSelection> =
            std::iter::once(&explanation.element).chain(explanation.second.as_ref()).collect();
        let parts: Vec<Vec<ElementPart>> = sides.iter().map(|s| s.resolved.parts()).collect();
        let jobs: Vec<Job> = parts
            .iter()
            .enumerate()
            .flat_map(|(side, ps)| {
                ps.iter().enumerate().flat_map(move |(part, p)| {
                    sample_capped(&p.points, self.config.sampling)
                        .into_iter()
                        .map(move |origin| Job { side, part, origin })
                })
            })
            .collect();

        let outcomes = par::map_slice(&jobs, |job| self.perturb_origin(dataset, layer.layer, job));
        let mut perturbed = Vec::new();
        let mut failure = None;
        for o in outcomes {
            match o {
                Ok(v) => perturbed.extend(v),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        let mut result = VerificationResult {
            original: explanation.clone(),
            perturbed_sentences: perturbed,
            perturbed_explanation: None,
            consistency: None,
            status: VerificationStatus::Inconclusive,
        };
        if let Some(e) = failure {
            return Err(AgentError::VerificationFailed {
                source: Box::new(e),
                partial: Box::new(result),
            });
        }

        for (side, ps) in parts.iter().enumerate() {
            for (pi, part) in ps.iter().enumerate() {
                let idx: Vec<usize> = result
                    .perturbed_sentences
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.side == side && c.part == pi)
                    .map(|(i, _)| i)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let mut cands: Vec<PerturbedSentence> =
                    idx.iter().map(|&i| result.perturbed_sentences[i].clone()).collect();
                match retain_perturbations(&part.points, &mut cands, layer) {
                    Ok(_) => {}
                    Err(AgentError::TooFewMembers(n)) => {
                        log::info!("{}: {n} member(s), nothing retained", part.label);
                    }
                    Err(e) => return Err(e),
                }
                for (&i, c) in idx.iter().zip(cands) {
                    result.perturbed_sentences[i] = c;
                }
            }
        }

        let retained = result.retained().count();
        let sides_ok = (0..sides.len()).all(|s| result.retained().any(|c| c.side == s));
        if retained < 2 || !sides_ok {
            self.cache.put(&key, &result)?;
            return Ok(result);
        }

        let (template_id, word) = Agent::template_for(&explanation.element, explanation.operation)?;
        let groups = |side: usize| -> Vec<SentenceGroup> {
            parts[side]
                .iter()
                .enumerate()
                .map(|(pi, p)| SentenceGroup {
                    label: p.label.clone(),
                    sentences: result
                        .retained()
                        .filter(|c| c.side == side && c.part == pi)
                        .map(|c| marked(tokenize(&c.text), c.focus_index))
                        .collect(),
                })
                .collect()
        };
        let payload = Agent::payload(
            word,
            explanation.operation,
            groups(0),
            explanation.second.as_ref().map(|_| groups(1)),
        );
        let parsed = match self.complete_explanation(&template_id, &payload) {
            Ok(p) => p,
            Err(e) => {
                return Err(AgentError::VerificationFailed {
                    source: Box::new(e),
                    partial: Box::new(result),
                })
            }
        };
        let id = cache_key(&json!({
            "kind": "perturbed_explanation",
            "original": explanation.id,
            "payload": payload,
            "provider": self.chat.fingerprint(),
        }));
        let new = Explanation {
            id,
            text: parsed.text,
            keywords: parsed.keywords,
            template_id,
            ..explanation.clone()
        };
        let consistency = match self.sentence_similarity(&explanation.text, &new.text) {
            Ok(c) => c,
            Err(e) => {
                result.perturbed_explanation = Some(new);
                return Err(AgentError::VerificationFailed {
                    source: Box::new(e),
                    partial: Box::new(result),
                });
            }
        };
        result.perturbed_explanation = Some(new);
        result.consistency = Some(consistency);
        result.status = VerificationStatus::Ok;
        self.cache.put(&key, &result)?;
        Ok(result)
    }
}
