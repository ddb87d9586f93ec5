//! Synthetic corpora with planted topics and planted temporal dynamics.
//!
//! A plan names its topics, lists the active topics of every epoch and
//! declares the dynamics that connect consecutive epochs. The two are
//! cross-checked, so the ground-truth events are exactly the declared ones.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Timelike, Utc};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, BowDocument, CorpusDocRecord, Dictionary, EpochFile};
use crate::evolve::EventKind;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("topic {0:?}: {1}")]
    BadTopic(String, String),
    #[error("plan has no epochs")]
    NoEpochs,
    #[error("infeasible script: {0}")]
    Infeasible(String),
    #[error("bad plan: {0}")]
    BadPlan(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTopic {
    pub name: String,
    /// Sparse `(term, probability)` pairs summing to 1.
    pub terms: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochScript {
    pub active: Vec<String>,
    pub docs: usize,
    pub words_per_doc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamic {
    /// `topic` is first active at `epoch`.
    Introduce { topic: String, epoch: usize },
    /// `topic` is last active at `epoch`.
    Retire { topic: String, epoch: usize },
    /// `parent` is last active at `epoch`; `children` start at `epoch + 1`.
    Split { parent: String, children: Vec<String>, epoch: usize },
    /// `parents` are last active at `epoch`; `child` starts at `epoch + 1`.
    Merge { parents: Vec<String>, child: String, epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPlan {
    pub vocab_size: usize,
    pub topics: Vec<PlantedTopic>,
    pub epochs: Vec<EpochScript>,
    #[serde(default)]
    pub dynamics: Vec<Dynamic>,
    /// Symmetric Dirichlet concentration of per-document topic mixtures.
    #[serde(default = "default_doc_concentration")]
    pub doc_concentration: f64,
    pub seed: u64,
    /// UTC midnight of epoch 0.
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    #[serde(default = "default_epoch_seconds")]
    pub epoch_seconds: i64,
}

fn default_doc_concentration() -> f64 {
    0.1
}

fn default_start() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2014-01-01T00:00:00Z").unwrap().with_timezone(&Utc)
}

fn default_epoch_seconds() -> i64 {
    86_400
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TruthEvent {
    pub kind: EventKind,
    pub epoch_index: usize,
    pub subject: String,
    pub related: Vec<String>,
}

impl SynthPlan {
    fn topic(&self, name: &str) -> Option<&PlantedTopic> {
        self.topics.iter().find(|t| t.name == name)
    }

    /// Checks distributions and the script, returning the ground-truth
    /// events implied by the dynamics.
    pub fn validate(&self) -> Result<Vec<TruthEvent>, SynthError> {
        if self.epochs.is_empty() {
            return Err(SynthError::NoEpochs);
        }
        if self.vocab_size == 0 {
            return Err(SynthError::BadPlan("vocab_size must be positive".into()));
        }
        if !(self.doc_concentration > 0.0 && self.doc_concentration.is_finite()) {
            return Err(SynthError::BadPlan("doc_concentration must be > 0".into()));
        }
        if self.epoch_seconds <= 0 {
            return Err(SynthError::BadPlan("epoch_seconds must be > 0".into()));
        }
        if self.start.num_seconds_from_midnight() != 0 || self.start.nanosecond() != 0 {
            return Err(SynthError::BadPlan("start must be a UTC midnight".into()));
        }
        let mut names = BTreeSet::new();
        for t in &self.topics {
            if !names.insert(t.name.as_str()) {
                return Err(SynthError::BadTopic(t.name.clone(), "duplicate name".into()));
            }
            if t.terms.is_empty() {
                return Err(SynthError::BadTopic(t.name.clone(), "no terms".into()));
            }
            if let Some((v, _)) = t.terms.iter().find(|(v, _)| *v as usize >= self.vocab_size) {
                return Err(SynthError::BadTopic(t.name.clone(), format!("term {v} outside vocabulary")));
            }
            if t.terms.iter().any(|(_, p)| !(*p >= 0.0)) {
                return Err(SynthError::BadTopic(t.name.clone(), "negative probability".into()));
            }
            let s: f64 = t.terms.iter().map(|(_, p)| p).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(SynthError::BadTopic(t.name.clone(), format!("probabilities sum to {s}")));
            }
        }

        let last = self.epochs.len() - 1;
        let mut starts: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
        let mut ends: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
        let mut truth = Vec::new();
        let check_epoch = |e: usize, what: &str| {
            if e >= last {
                Err(SynthError::Infeasible(format!("{what} at epoch {e} has no following epoch")))
            } else {
                Ok(())
            }
        };
        for d in &self.dynamics {
            match d {
                Dynamic::Introduce { topic, epoch } => {
                    if *epoch == 0 || *epoch > last {
                        return Err(SynthError::Infeasible(format!("introduce {topic} at epoch {epoch}")));
                    }
                    starts.entry(*epoch).or_default().insert(topic);
                    truth.push(TruthEvent {
                        kind: EventKind::Birth,
                        epoch_index: *epoch,
                        subject: topic.clone(),
                        related: vec![],
                    });
                }
                Dynamic::Retire { topic, epoch } => {
                    check_epoch(*epoch, "retire")?;
                    ends.entry(*epoch).or_default().insert(topic);
                    truth.push(TruthEvent {
                        kind: EventKind::Death,
                        epoch_index: *epoch,
                        subject: topic.clone(),
                        related: vec![],
                    });
                }
                Dynamic::Split { parent, children, epoch } => {
                    check_epoch(*epoch, "split")?;
                    if children.len() < 2 {
                        return Err(SynthError::BadPlan(format!("split of {parent} needs >= 2 children")));
                    }
                    ends.entry(*epoch).or_default().insert(parent);
                    starts.entry(epoch + 1).or_default().extend(children.iter().map(String::as_str));
                    let mut related = children.clone();
                    related.sort();
                    truth.push(TruthEvent {
                        kind: EventKind::Split,
                        epoch_index: *epoch,
                        subject: parent.clone(),
                        related,
                    });
                }
                Dynamic::Merge { parents, child, epoch } => {
                    check_epoch(*epoch, "merge")?;
                    if parents.len() < 2 {
                        return Err(SynthError::BadPlan(format!("merge into {child} needs >= 2 parents")));
                    }
                    ends.entry(*epoch).or_default().extend(parents.iter().map(String::as_str));
                    starts.entry(epoch + 1).or_default().insert(child);
                    let mut related = parents.clone();
                    related.sort();
                    truth.push(TruthEvent {
                        kind: EventKind::Merge,
                        epoch_index: epoch + 1,
                        subject: child.clone(),
                        related,
                    });
                }
            }
        }

        let mut active: BTreeSet<&str> = BTreeSet::new();
        for (e, script) in self.epochs.iter().enumerate() {
            let listed: BTreeSet<&str> = script.active.iter().map(String::as_str).collect();
            if listed.is_empty() {
                return Err(SynthError::Infeasible(format!("epoch {e} has no active topics")));
            }
            if script.docs == 0 || script.words_per_doc == 0 {
                return Err(SynthError::BadPlan(format!("epoch {e} has no words")));
            }
            for name in &listed {
                if self.topic(name).is_none() {
                    return Err(SynthError::Infeasible(format!("epoch {e} references unknown topic {name}")));
                }
            }
            let expected: BTreeSet<&str> = if e == 0 {
                listed.clone()
            } else {
                let mut next: BTreeSet<&str> = active
                    .difference(ends.get(&(e - 1)).unwrap_or(&BTreeSet::new()))
                    .copied()
                    .collect();
                next.extend(starts.get(&e).into_iter().flatten());
                next
            };
            if let Some(missing) = listed.difference(&expected).next() {
                return Err(SynthError::Infeasible(format!(
                    "topic {missing} is active at epoch {e} before being introduced"
                )));
            }
            if let Some(extra) = expected.difference(&listed).next() {
                return Err(SynthError::Infeasible(format!(
                    "topic {extra} should be active at epoch {e} but is not listed"
                )));
            }
            if let Some(bad) = ends.get(&e).into_iter().flatten().find(|t| !listed.contains(*t)) {
                return Err(SynthError::Infeasible(format!("topic {bad} ends at epoch {e} but is not active")));
            }
            active = listed;
        }
        truth.sort();
        Ok(truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub events: Vec<TruthEvent>,
    /// Planted topics as dense distributions in the output term order.
    pub topics: BTreeMap<String, Vec<f64>>,
    /// Doc id -> planted topic -> mixture weight.
    pub doc_mixtures: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub dictionary: Dictionary,
    /// Documents per epoch, term indices in dictionary order.
    pub epochs: Vec<Vec<BowDocument>>,
    pub records: Vec<CorpusDocRecord>,
    pub epoch_file: EpochFile,
    pub truth: GroundTruth,
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let g = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 && s.is_finite() {
        draws.iter().map(|x| x / s).collect()
    } else {
        // Every gamma draw underflowed; the limit is a one-hot mixture.
        let pick = WeightedIndex::new(vec![1.0; k]).unwrap().sample(rng);
        (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()
    }
}

pub fn generate(plan: &SynthPlan) -> Result<SynthCorpus, SynthError> {
    let events = plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let samplers: BTreeMap<&str, (Vec<u32>, WeightedIndex<f64>)> = plan
        .topics
        .iter()
        .map(|t| {
            let terms = t.terms.iter().map(|(v, _)| *v).collect();
            let w = WeightedIndex::new(t.terms.iter().map(|(_, p)| *p))
                .map_err(|e| SynthError::BadTopic(t.name.clone(), e.to_string()))?;
            Ok((t.name.as_str(), (terms, w)))
        })
        .collect::<Result<_, SynthError>>()?;

    // Generate in planted term space first.
    let mut raw_epochs: Vec<Vec<(String, BTreeMap<u32, u32>)>> = Vec::new();
    let mut doc_mixtures = BTreeMap::new();
    for (e, script) in plan.epochs.iter().enumerate() {
        let mut docs = Vec::with_capacity(script.docs);
        for d in 0..script.docs {
            let doc_id = format!("e{e:03}-d{d:04}");
            let theta = dirichlet(&mut rng, script.active.len(), plan.doc_concentration);
            let pick = WeightedIndex::new(&theta).expect("mixture has positive mass");
            let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
            for _ in 0..script.words_per_doc {
                let (terms, w) = &samplers[script.active[pick.sample(&mut rng)].as_str()];
                *counts.entry(terms[w.sample(&mut rng)]).or_insert(0) += 1;
            }
            doc_mixtures.insert(
                doc_id.clone(),
                script.active.iter().cloned().zip(theta).collect::<BTreeMap<_, _>>(),
            );
            docs.push((doc_id, counts));
        }
        raw_epochs.push(docs);
    }

    // Dictionary order: descending frequency, ties by term name.
    let names: Vec<String> = (0..plan.vocab_size).map(|v| format!("w{v:04}")).collect();
    let mut freq = vec![0u64; plan.vocab_size];
    for docs in &raw_epochs {
        for (_, counts) in docs {
            for (&v, &c) in counts {
                freq[v as usize] += c as u64;
            }
        }
    }
    let mut order: Vec<usize> = (0..plan.vocab_size).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then_with(|| names[a].cmp(&names[b])));
    let mut remap = vec![0u32; plan.vocab_size];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    let total: u64 = freq.iter().sum();
    let dictionary = Dictionary::new(
        order.iter().map(|&v| names[v].clone()).collect(),
        order.iter().map(|&v| freq[v]).collect(),
        1.0,
        total,
    );

    let mut epochs = Vec::new();
    let mut records = Vec::new();
    for (e, docs) in raw_epochs.into_iter().enumerate() {
        let ts = plan.start + Duration::seconds(plan.epoch_seconds * e as i64 + plan.epoch_seconds / 2);
        let mut bows = Vec::new();
        for (doc_id, counts) in docs {
            let counts: BTreeMap<u32, u32> = counts.into_iter().map(|(v, c)| (remap[v as usize], c)).collect();
            let bow = BowDocument::from_counts(doc_id.clone(), counts);
            records.push(CorpusDocRecord {
                doc_id: doc_id.clone(),
                url: format!("synth://{doc_id}"),
                counts: bow.counts.clone(),
                n_words: bow.n_words,
                linked_tweet_ids: vec![format!("tw-{doc_id}")],
                timestamps: vec![ts],
            });
            bows.push(bow);
        }
        epochs.push(bows);
    }

    let step = Duration::seconds(plan.epoch_seconds);
    let web: Vec<_> = records.iter().map(CorpusDocRecord::web_document).collect();
    let slices = corpus::slice_epochs(&web, step, step).map_err(|e| SynthError::BadPlan(e.to_string()))?;
    let epoch_file = EpochFile {
        span_seconds: plan.epoch_seconds,
        step_seconds: plan.epoch_seconds,
        epochs: slices,
    };

    let topics = plan
        .topics
        .iter()
        .map(|t| {
            let mut phi = vec![0.0; plan.vocab_size];
            for &(v, p) in &t.terms {
                phi[remap[v as usize] as usize] += p;
            }
            (t.name.clone(), phi)
        })
        .collect();

    Ok(SynthCorpus {
        dictionary,
        epochs,
        records,
        epoch_file,
        truth: GroundTruth {
            events,
            topics,
            doc_mixtures,
        },
    })
}

/// Uniform distribution over `terms`.
pub fn uniform_topic(name: &str, terms: impl IntoIterator<Item = u32>) -> PlantedTopic {
    let terms: Vec<u32> = terms.into_iter().collect();
    let p = 1.0 / terms.len() as f64;
    PlantedTopic {
        name: name.into(),
        terms: terms.into_iter().map(|v| (v, p)).collect(),
    }
}

/// Mixture `share * uniform(core) + (1 - share) * uniform(own)`, the building
/// block for split children and merge parents that overlap on a shared core.
pub fn core_topic(name: &str, core: &[u32], own: &[u32], share: f64) -> PlantedTopic {
    let mut terms: BTreeMap<u32, f64> = BTreeMap::new();
    for &v in core {
        *terms.entry(v).or_insert(0.0) += share / core.len() as f64;
    }
    for &v in own {
        *terms.entry(v).or_insert(0.0) += (1.0 - share) / own.len() as f64;
    }
    PlantedTopic {
        name: name.into(),
        terms: terms.into_iter().collect(),
    }
}

/// Equal-weight mixture of several planted topics.
pub fn blend(name: &str, parts: &[&PlantedTopic]) -> PlantedTopic {
    let mut terms: BTreeMap<u32, f64> = BTreeMap::new();
    for p in parts {
        for &(v, w) in &p.terms {
            *terms.entry(v).or_insert(0.0) += w / parts.len() as f64;
        }
    }
    PlantedTopic {
        name: name.into(),
        terms: terms.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_topic_plan() -> SynthPlan {
        SynthPlan {
            vocab_size: 8,
            topics: vec![uniform_topic("T", [1, 3, 5])],
            epochs: vec![EpochScript {
                active: vec!["T".into()],
                docs: 10,
                words_per_doc: 20,
            }],
            dynamics: vec![],
            doc_concentration: 0.1,
            seed: 1,
            start: default_start(),
            epoch_seconds: 86_400,
        }
    }

    fn split_plan() -> SynthPlan {
        let t1 = uniform_topic("T1", [0, 1, 4]);
        let t2 = uniform_topic("T2", [2, 3, 5]);
        let t = blend("T", &[&t1, &t2]);
        let script = |active: &[&str]| EpochScript {
            active: active.iter().map(|s| s.to_string()).collect(),
            docs: 5,
            words_per_doc: 10,
        };
        SynthPlan {
            vocab_size: 6,
            topics: vec![t, t1, t2],
            epochs: vec![script(&["T"]), script(&["T"]), script(&["T"]), script(&["T1", "T2"])],
            dynamics: vec![Dynamic::Split {
                parent: "T".into(),
                children: vec!["T2".into(), "T1".into()],
                epoch: 2,
            }],
            doc_concentration: 0.1,
            seed: 3,
            start: default_start(),
            epoch_seconds: 86_400,
        }
    }

    #[test]
    fn single_topic_words_come_from_topic() {
        let c = generate(&one_topic_plan()).unwrap();
        assert_eq!(c.epochs[0].len(), 10);
        let support: BTreeSet<u32> = ["w0001", "w0003", "w0005"]
            .iter()
            .map(|n| c.dictionary.index_of(n).unwrap())
            .collect();
        for d in &c.epochs[0] {
            assert_eq!(d.n_words, 20);
            assert!(d.counts.keys().all(|v| support.contains(v)));
        }
        // Dictionary is in descending frequency order.
        assert!(c.dictionary.frequencies.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn split_ground_truth() {
        let c = generate(&split_plan()).unwrap();
        assert_eq!(
            c.truth.events,
            vec![TruthEvent {
                kind: EventKind::Split,
                epoch_index: 2,
                subject: "T".into(),
                related: vec!["T1".into(), "T2".into()],
            }]
        );
        assert_eq!(c.epoch_file.epochs.len(), 4);
        for (e, slice) in c.epoch_file.epochs.iter().enumerate() {
            let expected: Vec<String> = c.epochs[e].iter().map(|d| d.doc_id.clone()).collect();
            assert_eq!(slice.doc_ids, expected);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&split_plan()).unwrap();
        let b = generate(&split_plan()).unwrap();
        assert_eq!(a, b);
        let mut other = split_plan();
        other.seed = 4;
        assert_ne!(generate(&other).unwrap().epochs, a.epochs);
    }

    #[test]
    fn infeasible_scripts() {
        let mut p = split_plan();
        p.dynamics.clear();
        assert!(matches!(generate(&p), Err(SynthError::Infeasible(m)) if m.contains("before being introduced")));

        let mut p = split_plan();
        p.epochs[1].active.push("T1".into());
        assert!(matches!(generate(&p), Err(SynthError::Infeasible(_))));

        let mut p = split_plan();
        p.epochs[0].active = vec!["ghost".into()];
        assert!(matches!(generate(&p), Err(SynthError::Infeasible(m)) if m.contains("unknown topic")));

        let mut p = one_topic_plan();
        p.topics[0].terms[0].1 = 0.5;
        assert!(matches!(generate(&p), Err(SynthError::BadTopic(..))));
    }

    #[test]
    fn plan_round_trips_through_json() {
        let p = split_plan();
        let raw = serde_json::to_string(&p).unwrap();
        assert!(raw.contains(r#""kind":"split""#));
        let back: SynthPlan = serde_json::from_str(&raw).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn empirical_frequencies_match_planted() {
        // Chi-square goodness of fit at 100k words; df = 4.
        let mut plan = one_topic_plan();
        plan.topics = vec![PlantedTopic {
            name: "T".into(),
            terms: vec![(0, 0.4), (2, 0.3), (4, 0.15), (6, 0.1), (7, 0.05)],
        }];
        plan.epochs[0].docs = 200;
        plan.epochs[0].words_per_doc = 500;
        let c = generate(&plan).unwrap();
        let n: f64 = 100_000.0;
        let mut observed = vec![0u64; 8];
        for d in &c.epochs[0] {
            for (&v, &k) in &d.counts {
                observed[v as usize] += k as u64;
            }
        }
        let phi = &c.truth.topics["T"];
        let chi2: f64 = phi
            .iter()
            .zip(&observed)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, &o)| {
                let e = p * n;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9th percentile of chi-square with 4 degrees of freedom.
        assert!(chi2 < 18.47, "chi2 = {chi2}");
    }

    #[test]
    fn core_topic_similarity_design() {
        // Children sharing half their mass on a core: the parent (their blend)
        // has weighted Jaccard 0.6 with each child and the children 1/3.
        let a = core_topic("A", &[0, 1, 2], &[3, 4, 5], 0.5);
        let b = core_topic("B", &[0, 1, 2], &[6, 7, 8], 0.5);
        let p = blend("P", &[&a, &b]);
        let dense = |t: &PlantedTopic| {
            let mut v = vec![0.0; 9];
            for &(i, w) in &t.terms {
                v[i as usize] = w;
            }
            v
        };
        let sim = |x: &PlantedTopic, y: &PlantedTopic| crate::evolve::topic_similarity(&dense(x), &dense(y)).unwrap();
        assert!((sim(&p, &a) - 0.6).abs() < 1e-12);
        assert!((sim(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
