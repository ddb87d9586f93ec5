//! Tokenization, coverage-bounded dictionary, bag-of-words documents and
//! overlapping epoch slices.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::TweetRecord;

const DEFAULT_STOPWORDS: &str = include_str!("stopwords_en.txt");

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("token counts are empty")]
    EmptyCounts,
    #[error("coverage must lie in (0, 1], got {0}")]
    BadCoverage(f64),
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("no documents to slice")]
    NoDocuments,
    #[error("need span > 0 and 0 < step <= span (span {span}s, step {step}s)")]
    BadEpochs { span: i64, step: i64 },
    #[error("document {0} has {1} tweet ids but {2} timestamps")]
    LinkMismatch(String, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRules {
    pub lowercase: bool,
    pub min_len: usize,
    pub alphabetic_only: bool,
    pub stop_words: BTreeSet<String>,
}

impl Default for TokenRules {
    fn default() -> Self {
        Self {
            lowercase: true,
            min_len: 2,
            alphabetic_only: true,
            stop_words: parse_stop_words(DEFAULT_STOPWORDS),
        }
    }
}

/// One word per line; blank lines and `#` comments ignored.
pub fn parse_stop_words(raw: &str) -> BTreeSet<String> {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(text: &str, rules: &TokenRules) -> Vec<String> {
    let text = if rules.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .filter(|t| !rules.alphabetic_only || t.chars().all(char::is_alphabetic))
        .filter(|t| t.chars().count() >= rules.min_len)
        .filter(|t| !rules.stop_words.contains(*t))
        .map(str::to_string)
        .collect()
}

pub fn count_tokens<'a, I: IntoIterator<Item = &'a str>>(
    texts: I,
    rules: &TokenRules,
) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for text in texts {
        for tok in tokenize(text, rules) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub terms: Vec<String>,
    pub coverage: f64,
    /// Corpus frequency of each term, aligned with `terms`.
    pub frequencies: Vec<u64>,
    /// Token count of the corpus the dictionary was built from.
    pub total_tokens: u64,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// `covered >= coverage * total`, with a relative slack of 1e-12 for the
/// rounding of `coverage`.
pub fn meets_coverage(covered: u64, total: u64, coverage: f64) -> bool {
    let target = coverage * total as f64;
    covered as f64 >= target - target.abs() * 1e-12
}

impl Dictionary {
    pub fn new(terms: Vec<String>, frequencies: Vec<u64>, coverage: f64, total_tokens: u64) -> Self {
        let mut d = Self {
            terms,
            coverage,
            frequencies,
            total_tokens,
            index: HashMap::new(),
        };
        d.reindex();
        d
    }

    /// Rebuilds the term index, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }
}

/// Shortest prefix of the terms, ordered by descending frequency then
/// lexicographically, whose cumulative count reaches `coverage` of the total.
pub fn build_dictionary(token_counts: &BTreeMap<String, u64>, coverage: f64) -> Result<Dictionary, CorpusError> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(CorpusError::BadCoverage(coverage));
    }
    let mut ranked: Vec<(&String, u64)> = token_counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(t, &c)| (t, c))
        .collect();
    if ranked.is_empty() {
        return Err(CorpusError::EmptyCounts);
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let total: u64 = ranked.iter().map(|r| r.1).sum();

    let mut covered = 0u64;
    let mut cut = ranked.len();
    for (i, (_, c)) in ranked.iter().enumerate() {
        covered += c;
        if meets_coverage(covered, total, coverage) {
            cut = i + 1;
            break;
        }
    }
    let (terms, freqs) = ranked[..cut].iter().map(|(t, c)| ((*t).clone(), *c)).unzip();
    Ok(Dictionary::new(terms, freqs, coverage, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebDocument {
    pub doc_id: String,
    /// Canonical final URL of the page.
    pub url: String,
    pub text: String,
    pub linked_tweet_ids: Vec<String>,
    pub timestamps: Vec<DateTime<Utc>>,
}

pub fn doc_id_for_url(canonical_url: &str) -> String {
    hex::encode(&Sha256::digest(canonical_url.as_bytes())[..8])
}

/// Joins tweets to extracted pages. `final_urls` maps each canonical requested
/// URL to its canonical final URL, `pages` maps final URLs to page text.
/// Documents come out sorted by doc id; a tweet linking one page twice is
/// counted once.
pub fn link_documents(
    tweets: &[TweetRecord],
    final_urls: &BTreeMap<String, String>,
    pages: &BTreeMap<String, String>,
    canonicalize: impl Fn(&str) -> Option<String>,
) -> Vec<WebDocument> {
    let mut docs: BTreeMap<String, WebDocument> = BTreeMap::new();
    for tweet in tweets {
        for raw in &tweet.urls {
            let Some(requested) = canonicalize(raw) else { continue };
            let Some(final_url) = final_urls.get(&requested) else { continue };
            let Some(text) = pages.get(final_url) else { continue };
            let doc_id = doc_id_for_url(final_url);
            let doc = docs.entry(doc_id.clone()).or_insert_with(|| WebDocument {
                doc_id,
                url: final_url.clone(),
                text: text.clone(),
                linked_tweet_ids: Vec::new(),
                timestamps: Vec::new(),
            });
            if !doc.linked_tweet_ids.contains(&tweet.tweet_id) {
                doc.linked_tweet_ids.push(tweet.tweet_id.clone());
                doc.timestamps.push(tweet.created_at);
            }
        }
    }
    docs.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowDocument {
    pub doc_id: String,
    /// Dictionary index -> count; every count is at least 1.
    pub counts: BTreeMap<u32, u32>,
    pub n_words: u32,
}

impl BowDocument {
    pub fn from_counts(doc_id: impl Into<String>, counts: BTreeMap<u32, u32>) -> Self {
        let counts: BTreeMap<u32, u32> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        let n_words = counts.values().sum();
        Self {
            doc_id: doc_id.into(),
            counts,
            n_words,
        }
    }

    /// Flattened word sequence in ascending term order.
    pub fn words(&self) -> Vec<u32> {
        self.counts
            .iter()
            .flat_map(|(&v, &c)| std::iter::repeat_n(v, c as usize))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BowOutcome {
    Doc(BowDocument),
    /// No token of the document is in the dictionary.
    Empty(String),
}

pub fn to_bow(doc: &WebDocument, dict: &Dictionary, rules: &TokenRules) -> Result<BowOutcome, CorpusError> {
    if dict.is_empty() {
        return Err(CorpusError::EmptyDictionary);
    }
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for tok in tokenize(&doc.text, rules) {
        if let Some(i) = dict.index_of(&tok) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        Ok(BowOutcome::Empty(doc.doc_id.clone()))
    } else {
        Ok(BowOutcome::Doc(BowDocument::from_counts(doc.doc_id.clone(), counts)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSlice {
    pub epoch_index: usize,
    pub start: DateTime<Utc>,
    /// Exclusive.
    pub end: DateTime<Utc>,
    pub doc_ids: Vec<String>,
}

impl EpochSlice {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

/// Indices of every epoch whose interval contains `t`, given the anchor.
pub fn epochs_containing(anchor: DateTime<Utc>, span: Duration, step: Duration, t: DateTime<Utc>) -> std::ops::RangeInclusive<usize> {
    let d = (t - anchor).num_seconds();
    let span = span.num_seconds();
    let step = step.num_seconds();
    let hi = d.div_euclid(step);
    let lo = if d < span { 0 } else { (d - span).div_euclid(step) + 1 };
    (lo as usize)..=(hi as usize)
}

/// Overlapping slices anchored at UTC midnight of the earliest timestamp.
pub fn slice_epochs<D: std::borrow::Borrow<WebDocument>>(
    docs: &[D],
    span: Duration,
    step: Duration,
) -> Result<Vec<EpochSlice>, CorpusError> {
    let (span_s, step_s) = (span.num_seconds(), step.num_seconds());
    if span_s <= 0 || step_s <= 0 || step_s > span_s {
        return Err(CorpusError::BadEpochs {
            span: span_s,
            step: step_s,
        });
    }
    let all = || docs.iter().flat_map(|d| d.borrow().timestamps.iter().copied());
    let (Some(min), Some(max)) = (all().min(), all().max()) else {
        return Err(CorpusError::NoDocuments);
    };
    let anchor = min.date_naive().and_time(NaiveTime::MIN).and_utc();
    let last = *epochs_containing(anchor, span, step, max).end();

    let mut slices: Vec<EpochSlice> = (0..=last)
        .map(|k| {
            let start = anchor + step * k as i32;
            EpochSlice {
                epoch_index: k,
                start,
                end: start + span,
                doc_ids: Vec::new(),
            }
        })
        .collect();
    for doc in docs {
        let doc = doc.borrow();
        let mut member: BTreeSet<usize> = BTreeSet::new();
        for &t in &doc.timestamps {
            member.extend(epochs_containing(anchor, span, step, t));
        }
        for k in member {
            slices[k].doc_ids.push(doc.doc_id.clone());
        }
    }
    Ok(slices)
}

pub type Mixture = BTreeMap<String, f64>;

/// Each tweet receives the uniform average of its modeled documents'
/// mixtures. Returns the mixtures and the number of tweets left without any
/// modeled document.
pub fn propagate_topics(
    doc_mixtures: &BTreeMap<String, Mixture>,
    links: &BTreeMap<String, Vec<String>>,
) -> (BTreeMap<String, Mixture>, usize) {
    let mut out = BTreeMap::new();
    let mut unmodeled = 0;
    for (tweet, doc_ids) in links {
        let modeled: Vec<&Mixture> = doc_ids.iter().filter_map(|d| doc_mixtures.get(d)).collect();
        if modeled.is_empty() {
            unmodeled += 1;
            continue;
        }
        let mut mix: Mixture = BTreeMap::new();
        for m in &modeled {
            for (topic, w) in *m {
                *mix.entry(topic.clone()).or_insert(0.0) += w / modeled.len() as f64;
            }
        }
        let total: f64 = mix.values().sum();
        if total > 0.0 {
            mix.values_mut().for_each(|w| *w /= total);
        }
        out.insert(tweet.clone(), mix);
    }
    (out, unmodeled)
}

/// Tweet id -> doc ids, inverted from the documents' link lists.
pub fn tweet_links<D: std::borrow::Borrow<WebDocument>>(docs: &[D]) -> BTreeMap<String, Vec<String>> {
    let mut links: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for doc in docs {
        let doc = doc.borrow();
        for t in &doc.linked_tweet_ids {
            links.entry(t.clone()).or_default().push(doc.doc_id.clone());
        }
    }
    links
}

/// One line of `docs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDocRecord {
    pub doc_id: String,
    #[serde(default)]
    pub url: String,
    pub counts: BTreeMap<u32, u32>,
    pub n_words: u32,
    pub linked_tweet_ids: Vec<String>,
    pub timestamps: Vec<DateTime<Utc>>,
}

impl CorpusDocRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.linked_tweet_ids.len() != self.timestamps.len() {
            return Err(CorpusError::LinkMismatch(
                self.doc_id.clone(),
                self.linked_tweet_ids.len(),
                self.timestamps.len(),
            ));
        }
        Ok(())
    }

    pub fn bow(&self) -> BowDocument {
        BowDocument::from_counts(self.doc_id.clone(), self.counts.clone())
    }

    /// Link-only view used for slicing and topic propagation.
    pub fn web_document(&self) -> WebDocument {
        WebDocument {
            doc_id: self.doc_id.clone(),
            url: self.url.clone(),
            text: String::new(),
            linked_tweet_ids: self.linked_tweet_ids.clone(),
            timestamps: self.timestamps.clone(),
        }
    }
}

/// Contents of `epochs.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFile {
    pub span_seconds: i64,
    pub step_seconds: i64,
    pub epochs: Vec<EpochSlice>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn day(d: f64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2013, 8, 26, 0, 0, 0).unwrap() + Duration::seconds((d * 86400.0) as i64)
    }

    fn doc(id: &str, days: &[f64]) -> WebDocument {
        WebDocument {
            doc_id: id.into(),
            url: String::new(),
            text: String::new(),
            linked_tweet_ids: (0..days.len()).map(|i| format!("{id}-{i}")).collect(),
            timestamps: days.iter().map(|&d| day(d)).collect(),
        }
    }

    #[test]
    fn tokenize_examples() {
        let r = TokenRules::default();
        assert_eq!(tokenize("The Cat cat!", &r), vec!["cat", "cat"]);
        assert!(tokenize("", &r).is_empty());
        assert!(tokenize("a I", &r).is_empty());
        assert_eq!(tokenize("covid19 vaccine's", &r), vec!["vaccine"]);
    }

    #[test]
    fn dictionary_examples() {
        let counts = BTreeMap::from([("a".to_string(), 6), ("b".to_string(), 3), ("c".to_string(), 1)]);
        let d = build_dictionary(&counts, 0.9).unwrap();
        assert_eq!(d.terms, vec!["a", "b"]);
        assert_eq!(d.index_of("b"), Some(1));
        assert_eq!(build_dictionary(&counts, 1.0).unwrap().terms.len(), 3);
        assert_eq!(build_dictionary(&BTreeMap::new(), 0.9), Err(CorpusError::EmptyCounts));
        assert_eq!(build_dictionary(&counts, 0.0), Err(CorpusError::BadCoverage(0.0)));
    }

    #[test]
    fn dictionary_tie_break_is_lexicographic() {
        let counts = BTreeMap::from([("zeta".to_string(), 2), ("alpha".to_string(), 2), ("mid".to_string(), 2)]);
        let d = build_dictionary(&counts, 0.5).unwrap();
        assert_eq!(d.terms, vec!["alpha", "mid"]);
    }

    #[test]
    fn bow_examples() {
        let counts = BTreeMap::from([("cat".to_string(), 5)]);
        let dict = build_dictionary(&counts, 1.0).unwrap();
        let r = TokenRules::default();
        let mut d = doc("d", &[0.0]);
        d.text = "cat cat dog".into();
        match to_bow(&d, &dict, &r).unwrap() {
            BowOutcome::Doc(b) => {
                assert_eq!(b.counts, BTreeMap::from([(0, 2)]));
                assert_eq!(b.n_words, 2);
                assert_eq!(b.words(), vec![0, 0]);
            }
            other => panic!("{other:?}"),
        }
        d.text = "dog bird".into();
        assert_eq!(to_bow(&d, &dict, &r).unwrap(), BowOutcome::Empty("d".into()));
        let empty = Dictionary::new(vec![], vec![], 0.9, 0);
        assert_eq!(to_bow(&d, &empty, &r), Err(CorpusError::EmptyDictionary));
    }

    #[test]
    fn slice_examples() {
        let span = Duration::days(3);
        let step = Duration::days(1);
        let s = slice_epochs(&[doc("anchor", &[0.0]), doc("x", &[2.5])], span, step).unwrap();
        let with_x: Vec<usize> = s.iter().filter(|e| e.doc_ids.contains(&"x".to_string())).map(|e| e.epoch_index).collect();
        assert_eq!(with_x, vec![0, 1, 2]);

        let s = slice_epochs(&[doc("a", &[0.0]), doc("b", &[10.0])], span, step).unwrap();
        assert_eq!(s.len(), 11);
        for e in &s[3..=7] {
            assert!(e.doc_ids.is_empty(), "epoch {}", e.epoch_index);
        }
        assert_eq!(s[8].doc_ids, vec!["b"]);
        assert_eq!(s[0].start, day(0.0));

        // span == step partitions time.
        let s = slice_epochs(&[doc("a", &[0.2, 1.5, 4.9])], step, step).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.iter().filter(|e| !e.doc_ids.is_empty()).count(), 3);

        assert!(matches!(
            slice_epochs(&[doc("a", &[0.0])], step, span),
            Err(CorpusError::BadEpochs { .. })
        ));
        assert_eq!(slice_epochs::<WebDocument>(&[], span, step), Err(CorpusError::NoDocuments));
    }

    #[test]
    fn anchor_is_midnight_of_earliest() {
        let s = slice_epochs(&[doc("a", &[5.75])], Duration::days(3), Duration::days(1)).unwrap();
        assert_eq!(s[0].start, day(5.0));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn propagate_examples() {
        let mix = |pairs: &[(&str, f64)]| -> Mixture { pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect() };
        let docs = BTreeMap::from([
            ("d1".to_string(), mix(&[("T1", 1.0)])),
            ("d2".to_string(), mix(&[("T2", 1.0)])),
        ]);
        let links = BTreeMap::from([
            ("t1".to_string(), vec!["d1".to_string()]),
            ("t2".to_string(), vec!["d1".to_string(), "d2".to_string()]),
            ("t3".to_string(), vec!["d1".to_string()]),
            ("t4".to_string(), vec!["gone".to_string()]),
        ]);
        let (out, missing) = propagate_topics(&docs, &links);
        assert_eq!(out["t1"], mix(&[("T1", 1.0)]));
        assert_eq!(out["t2"], mix(&[("T1", 0.5), ("T2", 0.5)]));
        assert_eq!(out["t1"], out["t3"]);
        assert!(!out.contains_key("t4"));
        assert_eq!(missing, 1);
    }

    #[test]
    fn link_documents_groups_by_final_url() {
        let t = |id: &str, urls: &[&str]| TweetRecord {
            tweet_id: id.into(),
            text: String::new(),
            created_at: day(1.0),
            urls: urls.iter().map(|s| s.to_string()).collect(),
            hashtags: vec![],
            author_id: String::new(),
        };
        let tweets = vec![t("1", &["http://s.ly/a"]), t("2", &["http://page.com/x", "http://s.ly/a"]), t("3", &["http://video.com/"])];
        let finals = BTreeMap::from([
            ("http://s.ly/a".to_string(), "http://page.com/x".to_string()),
            ("http://page.com/x".to_string(), "http://page.com/x".to_string()),
        ]);
        let pages = BTreeMap::from([("http://page.com/x".to_string(), "text".to_string())]);
        let docs = link_documents(&tweets, &finals, &pages, |u| Some(u.to_string()));
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].linked_tweet_ids, vec!["1", "2"]);
        assert_eq!(docs[0].timestamps.len(), 2);
        assert_eq!(docs[0].doc_id, doc_id_for_url("http://page.com/x"));
    }

    proptest! {
        #[test]
        fn dictionary_is_minimal_prefix(
            freqs in proptest::collection::vec(1u64..50, 1..40),
            cov_milli in 1u64..=1000,
        ) {
            let counts: BTreeMap<String, u64> = freqs.iter().enumerate().map(|(i, &c)| (format!("t{i:02}"), c)).collect();
            let coverage = cov_milli as f64 / 1000.0;
            let d = build_dictionary(&counts, coverage).unwrap();
            let total: u64 = freqs.iter().sum();
            let covered: u64 = d.terms.iter().map(|t| counts[t]).sum();
            prop_assert!(covered * 1000 >= cov_milli * total);
            let last = counts[d.terms.last().unwrap()];
            prop_assert!((covered - last) * 1000 < cov_milli * total);
        }

        #[test]
        fn interior_timestamps_in_three_slices(offsets in proptest::collection::vec(0i64..(20 * 86400), 2..30)) {
            let docs: Vec<WebDocument> = offsets.iter().enumerate().map(|(i, &o)| WebDocument {
                doc_id: format!("d{i}"),
                url: String::new(),
                text: String::new(),
                linked_tweet_ids: vec![format!("t{i}")],
                timestamps: vec![day(0.0) + Duration::seconds(o)],
            }).collect();
            let s = slice_epochs(&docs, Duration::days(3), Duration::days(1)).unwrap();
            let first = s[0].start;
            let last_end = s.last().unwrap().end;
            for (i, d) in docs.iter().enumerate() {
                let t = d.timestamps[0];
                let n = s.iter().filter(|e| e.contains(t)).count();
                let in_slices = s.iter().filter(|e| e.doc_ids.contains(&format!("d{i}"))).count();
                prop_assert_eq!(n, in_slices);
                if t >= first + Duration::days(2) && t < last_end - Duration::days(2) {
                    prop_assert_eq!(n, 3);
                }
            }
        }

        #[test]
        fn propagated_rows_normalized(ws in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 1..5), 1..6)) {
            let docs: BTreeMap<String, Mixture> = ws.iter().enumerate().map(|(i, w)| {
                let s: f64 = w.iter().sum();
                (format!("d{i}"), w.iter().enumerate().map(|(k, x)| (format!("T{k}"), x / s)).collect())
            }).collect();
            let links = BTreeMap::from([("t".to_string(), docs.keys().cloned().collect::<Vec<_>>())]);
            let (out, _) = propagate_topics(&docs, &links);
            prop_assert!((out["t"].values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
