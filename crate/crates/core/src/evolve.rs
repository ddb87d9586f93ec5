//! Topic evolution across consecutive epochs.
//!
//! Topics of epoch `e` are linked to topics of epoch `e + 1` whenever their
//! similarity reaches `tau`. Births, deaths, splits and merges are then read
//! off node in/out-degrees.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hdp::Topic;

#[derive(Debug, Error, PartialEq)]
pub enum EvolveError {
    #[error("distributions have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("vector does not sum to 1 (sum {0})")]
    NotADistribution(f64),
    #[error("threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
}

fn check_distribution(p: &[f64]) -> Result<(), EvolveError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(EvolveError::NotADistribution(s));
    }
    Ok(())
}

/// Weighted Jaccard similarity `sum min(p, q) / sum max(p, q)`.
pub fn topic_similarity(p: &[f64], q: &[f64]) -> Result<f64, EvolveError> {
    if p.len() != q.len() {
        return Err(EvolveError::DimensionMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let (mut lo, mut hi) = (0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        lo += a.min(*b);
        hi += a.max(*b);
    }
    Ok(if hi > 0.0 { lo / hi } else { 0.0 })
}

/// Set Jaccard of the `k` most probable terms of each distribution.
pub fn top_k_jaccard(p: &[f64], q: &[f64], k: usize) -> Result<f64, EvolveError> {
    if p.len() != q.len() {
        return Err(EvolveError::DimensionMismatch(p.len(), q.len()));
    }
    let top = |x: &[f64]| {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
        idx
    };
    let (a, b) = (top(p), top(q));
    let inter = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    let union = a.len() + b.len() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    WeightedJaccard,
    TopK { k: usize },
}

impl Similarity {
    pub fn eval(&self, p: &[f64], q: &[f64]) -> Result<f64, EvolveError> {
        match *self {
            Similarity::WeightedJaccard => topic_similarity(p, q),
            Similarity::TopK { k } => top_k_jaccard(p, q, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicNode {
    pub epoch_index: usize,
    pub topic_id: u32,
    #[serde(skip)]
    pub phi: Vec<f64>,
    pub mass: u32,
}

impl TopicNode {
    pub fn label(&self) -> String {
        format!("e{}:t{}", self.epoch_index, self.topic_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Index into `EvolutionGraph::nodes`.
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionGraph {
    pub num_epochs: usize,
    pub tau: f64,
    pub nodes: Vec<TopicNode>,
    pub edges: Vec<Edge>,
}

impl EvolutionGraph {
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in &self.edges {
            d[e.to] += 1;
        }
        d
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in &self.edges {
            d[e.from] += 1;
        }
        d
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph topic_evolution {\n  rankdir=LR;\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(out, "  n{i} [label=\"{}\"];", n.label());
        }
        for e in &self.edges {
            let _ = writeln!(out, "  n{} -> n{} [label=\"{:.3}\"];", e.from, e.to, e.weight);
        }
        out.push_str("}\n");
        out
    }
}

/// Links every pair of topics in consecutive epochs whose similarity is at
/// least `tau`. `epoch_topics[e]` holds the topics of epoch `e`.
pub fn build_graph(epoch_topics: &[Vec<Topic>], tau: f64, similarity: Similarity) -> Result<EvolutionGraph, EvolveError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(EvolveError::BadThreshold(tau));
    }
    let mut nodes = Vec::new();
    let mut epoch_nodes: Vec<std::ops::Range<usize>> = Vec::new();
    for (e, topics) in epoch_topics.iter().enumerate() {
        let start = nodes.len();
        nodes.extend(topics.iter().map(|t| TopicNode {
            epoch_index: e,
            topic_id: t.topic_id,
            phi: t.phi.clone(),
            mass: t.mass,
        }));
        epoch_nodes.push(start..nodes.len());
    }
    let mut edges = Vec::new();
    for w in epoch_nodes.windows(2) {
        for a in w[0].clone() {
            for b in w[1].clone() {
                let rho = similarity.eval(&nodes[a].phi, &nodes[b].phi)?;
                if rho >= tau {
                    edges.push(Edge {
                        from: a,
                        to: b,
                        weight: rho,
                    });
                }
            }
        }
    }
    Ok(EvolutionGraph {
        num_epochs: epoch_topics.len(),
        tau,
        nodes,
        edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Birth,
    Death,
    Split,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub epoch_index: usize,
    pub topic_id: u32,
}

impl From<&TopicNode> for NodeRef {
    fn from(n: &TopicNode) -> Self {
        Self {
            epoch_index: n.epoch_index,
            topic_id: n.topic_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionEvent {
    pub kind: EventKind,
    pub epoch_index: usize,
    pub subject: NodeRef,
    /// Split children or merge parents; empty for births and deaths.
    pub related: Vec<NodeRef>,
}

/// Reads events off node degrees. Nodes in the first epoch are never births
/// and nodes in the last epoch never deaths.
pub fn classify_events(graph: &EvolutionGraph) -> Vec<EvolutionEvent> {
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    for e in &graph.edges {
        children[e.from].push(e.to);
        parents[e.to].push(e.from);
    }
    let last = graph.num_epochs.saturating_sub(1);
    let refs = |ix: &[usize]| -> Vec<NodeRef> {
        let mut r: Vec<NodeRef> = ix.iter().map(|&i| NodeRef::from(&graph.nodes[i])).collect();
        r.sort();
        r
    };
    let mut events = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        let ev = |kind, related| EvolutionEvent {
            kind,
            epoch_index: node.epoch_index,
            subject: NodeRef::from(node),
            related,
        };
        if node.epoch_index > 0 && parents[i].is_empty() {
            events.push(ev(EventKind::Birth, Vec::new()));
        }
        if node.epoch_index < last && children[i].is_empty() {
            events.push(ev(EventKind::Death, Vec::new()));
        }
        if children[i].len() >= 2 {
            events.push(ev(EventKind::Split, refs(&children[i])));
        }
        if parents[i].len() >= 2 {
            events.push(ev(EventKind::Merge, refs(&parents[i])));
        }
    }
    events
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub topics: usize,
    pub births: usize,
    pub deaths: usize,
    pub merges: usize,
    pub splits: usize,
}

pub fn epoch_stats(graph: &EvolutionGraph, events: &[EvolutionEvent]) -> Vec<EpochStats> {
    let mut rows: Vec<EpochStats> = (0..graph.num_epochs)
        .map(|epoch| EpochStats {
            epoch,
            ..EpochStats::default()
        })
        .collect();
    for n in &graph.nodes {
        rows[n.epoch_index].topics += 1;
    }
    for ev in events {
        let r = &mut rows[ev.epoch_index];
        match ev.kind {
            EventKind::Birth => r.births += 1,
            EventKind::Death => r.deaths += 1,
            EventKind::Merge => r.merges += 1,
            EventKind::Split => r.splits += 1,
        }
    }
    rows
}

pub fn stats_csv(rows: &[EpochStats]) -> String {
    let mut out = String::from("epoch,topics,births,deaths,merges,splits\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.topics, r.births, r.deaths, r.merges, r.splits
        );
    }
    out
}

/// Serialized form of a graph and its events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub num_epochs: usize,
    pub tau: f64,
    pub nodes: Vec<TopicNode>,
    pub edges: Vec<Edge>,
    pub events: Vec<EvolutionEvent>,
}

impl GraphExport {
    pub fn new(graph: &EvolutionGraph, events: &[EvolutionEvent]) -> Self {
        Self {
            num_epochs: graph.num_epochs,
            tau: graph.tau,
            nodes: graph.nodes.clone(),
            edges: graph.edges.clone(),
            events: events.to_vec(),
        }
    }
}

/// Events grouped by kind, handy for comparisons against ground truth.
pub fn events_by_kind(events: &[EvolutionEvent]) -> BTreeMap<EventKind, Vec<&EvolutionEvent>> {
    let mut out: BTreeMap<EventKind, Vec<&EvolutionEvent>> = BTreeMap::new();
    for e in events {
        out.entry(e.kind).or_default().push(e);
    }
    out
}
