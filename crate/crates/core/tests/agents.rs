use std::sync::Arc;

use embmapper_core::agents::mock::{FixedSentenceEmbedder, HashSentenceEmbedder, MockChat, NearestOccurrenceEmbedder, PerturbMode};
use embmapper_core::agents::{
    focus_position, tokenize, Agent, AgentConfig, AgentError, Cache, ElementSelection, Operation,
    VerificationStatus,
};
use embmapper_core::dataset::Dataset;
use embmapper_core::lens::euclidean;
use embmapper_core::mapper::{build_mapper, Element, Epsilon, MapperGraph, MapperParams};
use embmapper_core::synth::{generate, Shape, SynthConfig};

fn blobs() -> (Dataset, MapperGraph) {
    let ds = generate(&SynthConfig { shape: Shape::Blobs, n: 80, k: 2, seed: 3, ..Default::default() }).unwrap();
    let g = build_mapper(&ds, 1, &MapperParams::classical(4, 0.3, 3, Epsilon::Auto)).unwrap();
    (ds, g)
}

fn agent(chat: Arc<MockChat>, sentences: Arc<dyn embmapper_core::agents::SentenceEmbedder>, ds: &Dataset) -> Agent {
    Agent::new(
        chat,
        sentences,
        Arc::new(NearestOccurrenceEmbedder::new(ds)),
        Arc::new(Cache::in_memory()),
        AgentConfig::default(),
    )
}

fn largest_node(g: &MapperGraph) -> usize {
    g.nodes.iter().max_by_key(|n| (n.members.len(), std::cmp::Reverse(n.id))).unwrap().id
}

#[test]
fn verify_is_byte_identical_across_runs() {
    let (ds, g) = blobs();
    let node = largest_node(&g);
    let mut outputs = Vec::new();
    for _ in 0..5 {
        let a = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
        let sel = ElementSelection::resolve(&g, Element::Node { id: node }).unwrap();
        let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
        let v = a.verify(&ds, &e).unwrap();
        assert_eq!(v.status, VerificationStatus::Ok);
        outputs.push(serde_json::to_vec(&v).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn identical_texts_score_exactly_one() {
    let (ds, g) = blobs();
    let a = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
    let sel = ElementSelection::resolve(&g, Element::Node { id: largest_node(&g) }).unwrap();
    let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    let v = a.verify(&ds, &e).unwrap();
    assert_eq!(v.perturbed_explanation.as_ref().unwrap().text, e.text);
    assert_eq!(v.consistency, Some(1.0));
}

#[test]
fn orthogonal_embeddings_score_exactly_zero() {
    let (ds, g) = blobs();
    let chat = MockChat::new().with_queued_explanations([
        "DESCRIPTION: first reading. KEYWORDS: a; b; c".to_string(),
        "DESCRIPTION: second reading. KEYWORDS: a; b; c".to_string(),
    ]);
    let emb = FixedSentenceEmbedder::new([
        ("first reading".to_string(), vec![1.0, 0.0]),
        ("second reading".to_string(), vec![0.0, 1.0]),
    ]);
    let a = agent(Arc::new(chat), Arc::new(emb), &ds);
    let sel = ElementSelection::resolve(&g, Element::Node { id: largest_node(&g) }).unwrap();
    let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    let v = a.verify(&ds, &e).unwrap();
    assert_eq!(v.consistency, Some(0.0));
}

#[test]
fn identity_perturbations_are_retained_and_score_one() {
    let (ds, g) = blobs();
    let chat = MockChat::new().with_perturb_mode(PerturbMode::Identity);
    let a = agent(Arc::new(chat), Arc::new(HashSentenceEmbedder::default()), &ds);
    let sel = ElementSelection::resolve(&g, Element::Node { id: largest_node(&g) }).unwrap();
    let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    let v = a.verify(&ds, &e).unwrap();
    assert_eq!(v.consistency, Some(1.0));
}

#[test]
fn retained_sentences_satisfy_the_rule_by_brute_force() {
    let (ds, g) = blobs();
    let a = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
    let id = largest_node(&g);
    let sel = ElementSelection::resolve(&g, Element::Node { id }).unwrap();
    let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    let v = a.verify(&ds, &e).unwrap();
    let layer = ds.layer(1).unwrap();
    let members = &g.nodes[id].members;
    let vecs: Vec<&[f64]> = members.iter().map(|&m| layer.vector(m).unwrap()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            total += euclidean(vecs[i], vecs[j]);
            pairs += 1;
        }
    }
    let threshold = total / pairs as f64;
    let mut per_origin = std::collections::BTreeMap::new();
    for p in v.retained() {
        let mean = vecs.iter().map(|m| euclidean(&p.embedding, m)).sum::<f64>() / vecs.len() as f64;
        assert!(mean < threshold);
        assert!(focus_position(&tokenize(&p.text), &ds.occurrence(p.origin_point).unwrap().token).is_some());
        *per_origin.entry(p.origin_point).or_insert(0) += 1;
    }
    assert!(per_origin.values().all(|&c| c == 1));
    assert!(v.perturbed_sentences.len() <= members.len() * 5);
}

#[test]
fn edge_verification_retains_per_part() {
    let ds = generate(&SynthConfig { shape: Shape::OffsetCircle, n: 200, seed: 1, ..Default::default() }).unwrap();
    let g = build_mapper(&ds, 1, &MapperParams::classical(6, 0.4, 3, Epsilon::Auto)).unwrap();
    let edge = g.edges.iter().max_by_key(|e| e.shared.len()).unwrap().clone();
    let a = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
    let sel = ElementSelection::resolve(&g, Element::Edge { a: edge.a, b: edge.b }).unwrap();
    let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    assert_eq!(e.template_id, "edge_summarize");
    let v = a.verify(&ds, &e).unwrap();
    let parts = sel.resolved.parts();
    for p in v.retained() {
        assert!(parts[p.part].points.contains(&p.origin_point));
    }
}

#[test]
fn compare_verification_covers_both_sides() {
    let (ds, g) = blobs();
    let comps = g.components();
    assert!(comps.len() >= 2);
    let a = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
    let first = ElementSelection::resolve(&g, Element::Component { index: 0 }).unwrap();
    let second = ElementSelection::resolve(&g, Element::Component { index: 1 }).unwrap();
    let e = a.explain(&ds, &g, &first, Operation::Compare, Some(&second)).unwrap();
    let v = a.verify(&ds, &e).unwrap();
    assert_eq!(v.status, VerificationStatus::Ok);
    assert!(v.retained().any(|p| p.side == 0) && v.retained().any(|p| p.side == 1));
}

#[test]
fn single_member_node_is_inconclusive() {
    let ds = generate(&SynthConfig { shape: Shape::Grid, n: 9, ..Default::default() }).unwrap();
    // grid spacing 1: every ball of radius 0.5 holds one point
    let g = build_mapper(&ds, 1, &MapperParams::ball(0.5)).unwrap();
    let a = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
    let sel = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
    let e = a.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    let v = a.verify(&ds, &e).unwrap();
    assert_eq!(v.status, VerificationStatus::Inconclusive);
    assert!(v.consistency.is_none() && v.perturbed_explanation.is_none());
}

#[test]
fn provider_failure_carries_partial_result() {
    let (ds, g) = blobs();
    let ok = agent(Arc::new(MockChat::new()), Arc::new(HashSentenceEmbedder::default()), &ds);
    let sel = ElementSelection::resolve(&g, Element::Node { id: 0 }).unwrap();
    let e = ok.explain(&ds, &g, &sel, Operation::Summarize, None).unwrap();
    let failing = agent(Arc::new(MockChat::failing()), Arc::new(HashSentenceEmbedder::default()), &ds);
    match failing.verify(&ds, &e) {
        Err(AgentError::VerificationFailed { source, partial }) => {
            assert!(source.is_provider());
            assert_eq!(partial.original, e);
            assert_eq!(partial.status, VerificationStatus::Inconclusive);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn precompute_is_resumable() {
    let ds = generate(&SynthConfig { shape: Shape::Blobs, n: 40, k: 2, ..Default::default() }).unwrap();
    // one ball per blob: 2 nodes, 2 components
    let g = build_mapper(&ds, 1, &MapperParams::ball(3.0)).unwrap();
    assert_eq!(g.nodes.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let chat = Arc::new(MockChat::new());
    let mk = |chat: Arc<MockChat>| {
        Agent::new(
            chat,
            Arc::new(HashSentenceEmbedder::default()),
            Arc::new(NearestOccurrenceEmbedder::new(&ds)),
            Arc::new(Cache::on_disk(dir.path()).unwrap()),
            AgentConfig::default(),
        )
    };
    let r = mk(chat.clone()).precompute_annotations(&ds, &g);
    assert_eq!(r.entries.len(), 4);
    assert!(r.entries.contains_key("node:0") && r.entries.contains_key("component:1"));
    assert_eq!((r.computed, r.cached), (4, 0));
    assert!(chat.calls() > 0);

    let chat2 = Arc::new(MockChat::new());
    let again = mk(chat2.clone()).precompute_annotations(&ds, &g);
    assert_eq!(chat2.calls(), 0);
    assert_eq!((again.computed, again.cached), (0, 4));
    assert_eq!(again.entries, r.entries);
}

#[test]
fn precompute_on_a_larger_graph_keeps_scores_in_range() {
    let ds = generate(&SynthConfig { shape: Shape::Grid, n: 400, ..Default::default() }).unwrap();
    let g = build_mapper(&ds, 1, &MapperParams::ball(1.5)).unwrap();
    assert!(g.nodes.len() >= 50, "{} nodes", g.nodes.len());
    let a = Agent::offline(&ds, Arc::new(Cache::in_memory()));
    let r = a.precompute_annotations(&ds, &g);
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    assert_eq!(r.entries.len(), g.nodes.len() + g.components().len());
    for e in r.entries.values() {
        if let Some(s) = e.score {
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
