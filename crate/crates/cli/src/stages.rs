//! The pipeline stages. Each reads its prerequisites' artifacts from the
//! work directory and writes its own outputs plus a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tweetlinks::corpus::{
    build_dictionary, count_tokens, link_documents, propagate_topics, slice_epochs, to_bow,
    BowDocument, BowOutcome, CorpusDocRecord, Dictionary, EpochFile, Mixture,
};
use tweetlinks::evolve::{build_graph, classify_events, epoch_stats, stats_csv, GraphExport};
use tweetlinks::extract::extract_main_text;
use tweetlinks::fetch::{canonicalize_url, Fetcher, HttpTransport, PageCache, Transport};
use tweetlinks::hdp::{run_chain, EpochCheckpoint, Topic};
use tweetlinks::ingest::{keyword_filter, parse_tweet_stream, url_stats, IngestError, IngestReport, TweetRecord, UrlStats};
use tweetlinks::synth::{generate, SynthPlan};

use crate::artifacts::{read_json, read_jsonl, require, to_json, to_jsonl, StageWriter};
use crate::config::{epoch_seed, PipelineConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Fetch,
    Extract,
    Corpus,
    Train,
    Track,
    Report,
    Synth,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Fetch,
        Stage::Extract,
        Stage::Corpus,
        Stage::Train,
        Stage::Track,
        Stage::Report,
        Stage::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Fetch => "fetch",
            Stage::Extract => "extract",
            Stage::Corpus => "corpus",
            Stage::Train => "train",
            Stage::Track => "track",
            Stage::Report => "report",
            Stage::Synth => "synth",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Upper bound on worker threads.
    pub jobs: usize,
    /// Replaces the synth plan's own seed.
    pub synth_seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            synth_seed: None,
        }
    }
}

// Work-dir subdirectories.
pub const INGEST_DIR: &str = "ingest";
pub const FETCH_DIR: &str = "fetch";
pub const EXTRACT_DIR: &str = "extract";
pub const CORPUS_DIR: &str = "corpus";
pub const TOPICS_DIR: &str = "topics";
pub const TRACK_DIR: &str = "track";
pub const REPORT_DIR: &str = "report";
pub const SYNTH_DIR: &str = "synth";

/// Validates the config and runs one stage, returning a short summary.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<String, CliError> {
    cfg.validate()?;
    match stage {
        Stage::Ingest => ingest(cfg),
        Stage::Fetch => {
            let transport = HttpTransport::new(Duration::from_millis(cfg.fetch.timeout_ms)).map_err(CliError::runtime)?;
            fetch_with(cfg, opts, transport)
        }
        Stage::Extract => extract(cfg),
        Stage::Corpus => build_corpus(cfg),
        Stage::Train => train(cfg, opts),
        Stage::Track => track(cfg),
        Stage::Report => report(cfg),
        Stage::Synth => synth(cfg, opts),
    }
}

fn work(cfg: &PipelineConfig) -> &Path {
    &cfg.paths.work_dir
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    #[serde(flatten)]
    report: IngestReport,
    /// Parsed records passing the keyword filter.
    kept: usize,
}

pub fn ingest(cfg: &PipelineConfig) -> Result<String, CliError> {
    let input = &cfg.paths.input;
    if !input.is_file() {
        return Err(CliError::Validation(vec![format!(
            "paths.input {} does not exist",
            input.display()
        )]));
    }
    let (records, report) = parse_tweet_stream(input, cfg.ingest.strict).map_err(|e| match e {
        IngestError::Malformed { .. } => CliError::Runtime(format!("{}: {e}", input.display())),
        other => CliError::runtime(other),
    })?;
    let mut kept: Vec<TweetRecord> = records
        .into_iter()
        .filter(|r| !cfg.ingest.keyword_filter || keyword_filter(r, &cfg.ingest.stems))
        .collect();
    let stats = url_stats(&kept);
    if !cfg.ingest.store_text {
        kept.iter_mut().for_each(|r| r.text.clear());
    }
    let summary = IngestSummary {
        report,
        kept: kept.len(),
    };

    let mut w = StageWriter::new(work(cfg), INGEST_DIR, "ingest")?;
    w.input(input)?;
    w.write("tweets.jsonl", &to_jsonl(&kept))?;
    w.write("url_stats.json", &to_json(&stats))?;
    w.write("report.json", &to_json(&summary))?;
    let text = format!("{}records kept by keyword filter: {}\n", report.summary(), kept.len());
    w.write("report.txt", text.as_bytes())?;
    w.finish(&cfg.hash(), None)?;
    Ok(text)
}

/// One line of `fetch/results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchRow {
    pub requested_url: String,
    pub final_url: Option<String>,
    pub status: Option<u16>,
    pub content_type: Option<String>,
    pub accepted: bool,
    pub error: Option<String>,
}

/// The fetch stage over any transport.
pub fn fetch_with<T: Transport>(cfg: &PipelineConfig, opts: &RunOptions, transport: T) -> Result<String, CliError> {
    require(work(cfg), INGEST_DIR, "ingest")?;
    let tweets_path = work(cfg).join(INGEST_DIR).join("tweets.jsonl");
    let tweets: Vec<TweetRecord> = read_jsonl(&tweets_path)?;
    let urls: Vec<String> = tweets
        .iter()
        .flat_map(|t| t.urls.iter())
        .filter_map(|u| canonicalize_url(u).ok())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let cache = PageCache::open(&cfg.paths.cache_dir).map_err(CliError::runtime)?;
    let mut policy = cfg.fetch.clone();
    policy.max_concurrency = policy.max_concurrency.min(opts.jobs.max(1));
    let fetcher = Fetcher::new(transport, cache, policy);
    let results = fetcher.fetch_all(&urls);
    fetcher.cache().flush().map_err(CliError::runtime)?;

    let mut rows = Vec::with_capacity(urls.len());
    let (mut accepted, mut failed) = (0, 0);
    for (url, r) in urls.iter().zip(results) {
        rows.push(match r {
            Ok(res) => {
                accepted += res.is_accepted() as usize;
                FetchRow {
                    requested_url: url.clone(),
                    final_url: Some(res.final_url.clone()),
                    status: Some(res.status),
                    content_type: Some(res.content_type.clone()),
                    accepted: res.is_accepted(),
                    error: None,
                }
            }
            Err(e) => {
                failed += 1;
                FetchRow {
                    requested_url: url.clone(),
                    final_url: None,
                    status: None,
                    content_type: None,
                    accepted: false,
                    error: Some(e.to_string()),
                }
            }
        });
    }

    let mut w = StageWriter::new(work(cfg), FETCH_DIR, "fetch")?;
    w.input(&tweets_path)?;
    w.write("results.jsonl", &to_jsonl(&rows))?;
    w.finish(&cfg.hash(), None)?;
    Ok(format!(
        "urls: {}\naccepted pages: {accepted}\nrejected: {}\nfailed: {failed}\n",
        urls.len(),
        urls.len() - accepted - failed
    ))
}

/// One line of `extract/pages.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageText {
    pub final_url: String,
    pub text: String,
}

pub fn extract(cfg: &PipelineConfig) -> Result<String, CliError> {
    require(work(cfg), FETCH_DIR, "fetch")?;
    let policy = cfg.tag_policy()?;
    let results_path = work(cfg).join(FETCH_DIR).join("results.jsonl");
    let rows: Vec<FetchRow> = read_jsonl(&results_path)?;
    let cache = PageCache::open(&cfg.paths.cache_dir).map_err(CliError::runtime)?;

    let mut pages: BTreeMap<String, String> = BTreeMap::new();
    let mut failures = 0;
    for row in rows.iter().filter(|r| r.accepted) {
        let final_url = row.final_url.clone().unwrap_or_default();
        if pages.contains_key(&final_url) {
            continue;
        }
        let Some(res) = cache.get(&row.requested_url).map_err(CliError::runtime)? else {
            return Err(CliError::Prerequisite {
                stage: "fetch",
                detail: format!("{} is missing from the cache", row.requested_url),
            });
        };
        match extract_main_text(&res.body, &policy) {
            Ok(text) => {
                pages.insert(final_url, text);
            }
            Err(_) => failures += 1,
        }
    }
    let out: Vec<PageText> = pages
        .into_iter()
        .map(|(final_url, text)| PageText { final_url, text })
        .collect();
    let empty = out.iter().filter(|p| p.text.is_empty()).count();

    let mut w = StageWriter::new(work(cfg), EXTRACT_DIR, "extract")?;
    w.input(&results_path)?;
    if let Some(p) = &cfg.extract.policy_file {
        w.input(p)?;
    }
    w.write("pages.jsonl", &to_jsonl(&out))?;
    w.finish(&cfg.hash(), None)?;
    Ok(format!(
        "pages: {}\nempty text: {empty}\nextraction errors: {failures}\n",
        out.len()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub linked_documents: usize,
    pub modeled_documents: usize,
    /// Documents with no in-dictionary token, excluded from modeling.
    pub empty_documents: Vec<String>,
    pub dictionary_terms: usize,
    pub total_tokens: u64,
    pub modeled_tokens: u64,
    pub epochs: usize,
}

fn write_corpus(
    w: &mut StageWriter,
    dict: &Dictionary,
    records: &[CorpusDocRecord],
    epochs: &EpochFile,
) -> Result<(), CliError> {
    w.write("dictionary.json", &to_json(dict))?;
    w.write("docs.jsonl", &to_jsonl(records))?;
    w.write("epochs.json", &to_json(epochs))?;
    Ok(())
}

pub fn build_corpus(cfg: &PipelineConfig) -> Result<String, CliError> {
    require(work(cfg), INGEST_DIR, "ingest")?;
    require(work(cfg), FETCH_DIR, "fetch")?;
    require(work(cfg), EXTRACT_DIR, "extract")?;
    let rules = cfg.token_rules()?;
    let tweets_path = work(cfg).join(INGEST_DIR).join("tweets.jsonl");
    let results_path = work(cfg).join(FETCH_DIR).join("results.jsonl");
    let pages_path = work(cfg).join(EXTRACT_DIR).join("pages.jsonl");
    let tweets: Vec<TweetRecord> = read_jsonl(&tweets_path)?;
    let rows: Vec<FetchRow> = read_jsonl(&results_path)?;
    let pages: Vec<PageText> = read_jsonl(&pages_path)?;

    let final_urls: BTreeMap<String, String> = rows
        .iter()
        .filter(|r| r.accepted)
        .filter_map(|r| Some((r.requested_url.clone(), r.final_url.clone()?)))
        .collect();
    let texts: BTreeMap<String, String> = pages.into_iter().map(|p| (p.final_url, p.text)).collect();
    let docs = link_documents(&tweets, &final_urls, &texts, |u| canonicalize_url(u).ok());
    if docs.is_empty() {
        return Err(CliError::Runtime("no tweet links to an extracted page".into()));
    }

    let counts = count_tokens(docs.iter().map(|d| d.text.as_str()), &rules);
    if counts.is_empty() {
        return Err(CliError::Runtime("extracted pages contain no tokens".into()));
    }
    let dict = build_dictionary(&counts, cfg.corpus.coverage).map_err(CliError::runtime)?;
    let mut records = Vec::new();
    let mut modeled = Vec::new();
    let mut empty_documents = Vec::new();
    for doc in &docs {
        match to_bow(doc, &dict, &rules).map_err(CliError::runtime)? {
            BowOutcome::Doc(b) => {
                records.push(CorpusDocRecord {
                    doc_id: doc.doc_id.clone(),
                    url: doc.url.clone(),
                    counts: b.counts,
                    n_words: b.n_words,
                    linked_tweet_ids: doc.linked_tweet_ids.clone(),
                    timestamps: doc.timestamps.clone(),
                });
                modeled.push(doc);
            }
            BowOutcome::Empty(id) => empty_documents.push(id),
        }
    }
    let span = chrono::Duration::hours(cfg.corpus.epoch_span_hours);
    let step = chrono::Duration::hours(cfg.corpus.epoch_step_hours);
    let slices = slice_epochs(&modeled, span, step).map_err(CliError::runtime)?;
    let epochs = EpochFile {
        span_seconds: span.num_seconds(),
        step_seconds: step.num_seconds(),
        epochs: slices,
    };
    let report = CorpusReport {
        linked_documents: docs.len(),
        modeled_documents: records.len(),
        empty_documents,
        dictionary_terms: dict.len(),
        total_tokens: dict.total_tokens,
        modeled_tokens: records.iter().map(|r| r.n_words as u64).sum(),
        epochs: epochs.epochs.len(),
    };

    let mut w = StageWriter::new(work(cfg), CORPUS_DIR, "corpus")?;
    w.input(&tweets_path)?;
    w.input(&results_path)?;
    w.input(&pages_path)?;
    if let Some(p) = &cfg.corpus.stop_words_file {
        w.input(p)?;
    }
    write_corpus(&mut w, &dict, &records, &epochs)?;
    w.write("report.json", &to_json(&report))?;
    w.finish(&cfg.hash(), None)?;
    Ok(format!(
        "documents: {} linked, {} modeled, {} empty\ndictionary terms: {}\nepochs: {}\n",
        report.linked_documents,
        report.modeled_documents,
        report.empty_documents.len(),
        report.dictionary_terms,
        report.epochs
    ))
}

pub fn synth(cfg: &PipelineConfig, opts: &RunOptions) -> Result<String, CliError> {
    let plan_path = &cfg.paths.synth_plan;
    if !plan_path.is_file() {
        return Err(CliError::Validation(vec![format!(
            "paths.synth_plan {} does not exist",
            plan_path.display()
        )]));
    }
    let mut plan: SynthPlan = read_json(plan_path).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    if let Some(s) = opts.synth_seed {
        plan.seed = s;
    }
    let corpus = generate(&plan).map_err(|e| CliError::Validation(vec![format!("synth plan: {e}")]))?;

    let mut w = StageWriter::new(work(cfg), CORPUS_DIR, "synth")?;
    w.input(plan_path)?;
    write_corpus(&mut w, &corpus.dictionary, &corpus.records, &corpus.epoch_file)?;
    w.finish(&cfg.hash(), Some(plan.seed))?;

    let mut w = StageWriter::new(work(cfg), SYNTH_DIR, "synth")?;
    w.input(plan_path)?;
    w.write("truth.json", &to_json(&corpus.truth))?;
    w.finish(&cfg.hash(), Some(plan.seed))?;
    Ok(format!(
        "documents: {}\nepochs: {}\nplanted events: {}\n",
        corpus.records.len(),
        corpus.epoch_file.epochs.len(),
        corpus.truth.events.len()
    ))
}

/// Loaded `corpus/` artifacts.
pub struct CorpusFiles {
    pub dictionary: Dictionary,
    pub docs: Vec<CorpusDocRecord>,
    pub epochs: EpochFile,
}

pub fn load_corpus(work_dir: &Path) -> Result<CorpusFiles, CliError> {
    require(work_dir, CORPUS_DIR, "corpus")?;
    let dir = work_dir.join(CORPUS_DIR);
    let mut dictionary: Dictionary = read_json(&dir.join("dictionary.json"))?;
    dictionary.reindex();
    let docs: Vec<CorpusDocRecord> = read_jsonl(&dir.join("docs.jsonl"))?;
    for d in &docs {
        d.validate().map_err(CliError::runtime)?;
        if let Some((&v, _)) = d.counts.iter().next_back() {
            if v as usize >= dictionary.len() {
                return Err(CliError::Runtime(format!(
                    "document {} uses term {v} outside the dictionary",
                    d.doc_id
                )));
            }
        }
    }
    let epochs: EpochFile = read_json(&dir.join("epochs.json"))?;
    Ok(CorpusFiles {
        dictionary,
        docs,
        epochs,
    })
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.json")
}

pub fn train(cfg: &PipelineConfig, opts: &RunOptions) -> Result<String, CliError> {
    let corpus = load_corpus(work(cfg))?;
    let vocab = corpus.dictionary.len();
    let bows: BTreeMap<&str, BowDocument> = corpus.docs.iter().map(|d| (d.doc_id.as_str(), d.bow())).collect();
    let mut slices: Vec<Vec<BowDocument>> = Vec::new();
    for e in &corpus.epochs.epochs {
        let docs = e
            .doc_ids
            .iter()
            .map(|id| {
                bows.get(id.as_str()).cloned().ok_or_else(|| {
                    CliError::Runtime(format!("epoch {} lists unknown document {id}", e.epoch_index))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        slices.push(docs);
    }

    let hyper = cfg.train.hyper();
    let schedule = cfg.train.schedule();
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<Result<(EpochCheckpoint, Vec<f64>), CliError>>>> =
        slices.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..opts.jobs.clamp(1, slices.len().max(1)) {
            scope.spawn(|| loop {
                let e = {
                    let mut n = next.lock().unwrap();
                    if *n >= slices.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let seed = epoch_seed(cfg.seed, e);
                let r = if slices[e].is_empty() {
                    Ok((empty_checkpoint(e, cfg, vocab, seed), Vec::new()))
                } else {
                    run_chain(&slices[e], vocab, &hyper, seed, schedule)
                        .map(|(state, trace)| {
                            (EpochCheckpoint::from_state(e, &state, &hyper, schedule, cfg.train.min_mass), trace)
                        })
                        .map_err(|err| CliError::Runtime(format!("epoch {e}: {err}")))
                };
                *results[e].lock().unwrap() = Some(r);
            });
        }
    });

    let mut w = StageWriter::new(work(cfg), TOPICS_DIR, "train")?;
    for f in ["dictionary.json", "docs.jsonl", "epochs.json"] {
        w.input(&work(cfg).join(CORPUS_DIR).join(f))?;
    }
    let mut traces: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut topics = 0;
    for (e, slot) in results.into_iter().enumerate() {
        let (ckpt, trace) = slot.into_inner().unwrap().expect("every epoch ran")?;
        topics += ckpt.topics.len();
        w.write(&checkpoint_name(e), &to_json(&ckpt))?;
        traces.insert(e, trace);
    }
    w.write("traces.json", &to_json(&traces))?;
    w.finish(&cfg.hash(), Some(cfg.seed))?;
    Ok(format!("epochs: {}\ntopics emitted: {topics}\n", slices.len()))
}

fn empty_checkpoint(e: usize, cfg: &PipelineConfig, vocab: usize, seed: u64) -> EpochCheckpoint {
    EpochCheckpoint {
        epoch_index: e,
        hyper: cfg.train.hyper(),
        seed,
        sweeps: cfg.train.sweeps,
        burn_in: cfg.train.burn_in,
        min_mass: cfg.train.min_mass,
        vocab_size: vocab,
        num_docs: 0,
        final_log_joint: 0.0,
        dishes: Vec::new(),
        topics: Vec::new(),
        doc_mixtures: BTreeMap::new(),
    }
}

/// Checkpoints listed in the train manifest, in epoch order.
pub fn load_checkpoints(work_dir: &Path) -> Result<Vec<EpochCheckpoint>, CliError> {
    let m = require(work_dir, TOPICS_DIR, "train")?;
    let prefix = format!("{TOPICS_DIR}/epoch-");
    let mut out: Vec<EpochCheckpoint> = Vec::new();
    for name in m.outputs.keys().filter(|k| k.starts_with(&prefix)) {
        out.push(read_json(&work_dir.join(name))?);
    }
    out.sort_by_key(|c| c.epoch_index);
    for (i, c) in out.iter().enumerate() {
        if c.epoch_index != i {
            return Err(CliError::Prerequisite {
                stage: "train",
                detail: format!("checkpoint for epoch {i} is missing"),
            });
        }
    }
    Ok(out)
}

pub fn track(cfg: &PipelineConfig) -> Result<String, CliError> {
    let ckpts = load_checkpoints(work(cfg))?;
    let epoch_topics: Vec<Vec<Topic>> = ckpts.iter().map(|c| c.topics.clone()).collect();
    let graph = build_graph(&epoch_topics, cfg.track.tau, cfg.track.similarity).map_err(CliError::runtime)?;
    let events = classify_events(&graph);
    let stats = epoch_stats(&graph, &events);

    let mut w = StageWriter::new(work(cfg), TRACK_DIR, "track")?;
    for c in &ckpts {
        w.input(&work(cfg).join(TOPICS_DIR).join(checkpoint_name(c.epoch_index)))?;
    }
    w.write("graph.json", &to_json(&GraphExport::new(&graph, &events)))?;
    w.write("graph.dot", graph.to_dot().as_bytes())?;
    w.write("stats.csv", stats_csv(&stats).as_bytes())?;
    w.finish(&cfg.hash(), None)?;
    Ok(format!(
        "nodes: {}\nedges: {}\nevents: {}\n",
        graph.nodes.len(),
        graph.edges.len(),
        events.len()
    ))
}

/// One line of `report/tweet_topics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TweetTopics {
    pub epoch_index: usize,
    pub tweet_id: String,
    /// Topic label `e{epoch}:t{id}` -> weight.
    pub topics: Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportSummary {
    /// Tweets per epoch with a linked document but no modeled topic.
    unmodeled_tweets: BTreeMap<usize, usize>,
    tweet_rows: usize,
    topics: usize,
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(CliError::runtime)?;
    for r in rows {
        w.write_record(&r).map_err(CliError::runtime)?;
    }
    w.into_inner().map_err(CliError::runtime)
}

pub fn report(cfg: &PipelineConfig) -> Result<String, CliError> {
    let corpus = load_corpus(work(cfg))?;
    let ckpts = load_checkpoints(work(cfg))?;
    let n = cfg.report.top_terms;

    let mut cloud = Vec::new();
    for c in &ckpts {
        for t in &c.topics {
            for (rank, v) in t.top_terms(n).into_iter().enumerate() {
                cloud.push(vec![
                    c.epoch_index.to_string(),
                    t.topic_id.to_string(),
                    (rank + 1).to_string(),
                    corpus.dictionary.terms[v].clone(),
                    t.phi[v].to_string(),
                ]);
            }
        }
    }

    // Each tweet inherits, within an epoch, the topics of the documents it
    // links to when its own timestamp falls in that epoch.
    let mut rows = Vec::new();
    let mut unmodeled = BTreeMap::new();
    for (c, slice) in ckpts.iter().zip(&corpus.epochs.epochs) {
        let mixtures: BTreeMap<String, Mixture> = c
            .doc_mixtures
            .iter()
            .map(|(doc, m)| {
                let m = m
                    .iter()
                    .map(|(t, w)| (format!("e{}:t{t}", c.epoch_index), *w))
                    .collect();
                (doc.clone(), m)
            })
            .collect();
        let mut links: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let members: BTreeSet<&str> = slice.doc_ids.iter().map(String::as_str).collect();
        for d in corpus.docs.iter().filter(|d| members.contains(d.doc_id.as_str())) {
            for (tweet, ts) in d.linked_tweet_ids.iter().zip(&d.timestamps) {
                if slice.contains(*ts) {
                    links.entry(tweet.clone()).or_default().push(d.doc_id.clone());
                }
            }
        }
        let (mixed, missing) = propagate_topics(&mixtures, &links);
        unmodeled.insert(c.epoch_index, missing);
        rows.extend(mixed.into_iter().map(|(tweet_id, topics)| TweetTopics {
            epoch_index: c.epoch_index,
            tweet_id,
            topics,
        }));
    }

    let mut w = StageWriter::new(work(cfg), REPORT_DIR, "report")?;
    for c in &ckpts {
        w.input(&work(cfg).join(TOPICS_DIR).join(checkpoint_name(c.epoch_index)))?;
    }
    w.input(&work(cfg).join(CORPUS_DIR).join("dictionary.json"))?;
    w.input(&work(cfg).join(CORPUS_DIR).join("docs.jsonl"))?;
    w.write(
        "wordcloud.csv",
        &csv_bytes(&["epoch", "topic", "rank", "term", "weight"], cloud)?,
    )?;
    w.write("tweet_topics.jsonl", &to_jsonl(&rows))?;

    let stats_path = work(cfg).join(INGEST_DIR).join("url_stats.json");
    if require(work(cfg), INGEST_DIR, "ingest").is_ok() && stats_path.is_file() {
        let stats: UrlStats = read_json(&stats_path)?;
        w.input(&stats_path)?;
        write_url_stats(&mut w, &stats)?;
    }
    let summary = ReportSummary {
        unmodeled_tweets: unmodeled,
        tweet_rows: rows.len(),
        topics: ckpts.iter().map(|c| c.topics.len()).sum(),
    };
    w.write("summary.json", &to_json(&summary))?;
    w.finish(&cfg.hash(), None)?;
    Ok(format!(
        "topics: {}\ntweet topic rows: {}\n",
        summary.topics, summary.tweet_rows
    ))
}

fn write_url_stats(w: &mut StageWriter, stats: &UrlStats) -> Result<(), CliError> {
    let days: BTreeSet<_> = stats.daily_tweets.keys().chain(stats.daily_urls.keys()).collect();
    let daily = days.into_iter().map(|d| {
        vec![
            d.to_string(),
            stats.daily_tweets.get(d).copied().unwrap_or(0).to_string(),
            stats.daily_urls.get(d).copied().unwrap_or(0).to_string(),
        ]
    });
    w.write("url_daily.csv", &csv_bytes(&["date", "tweets", "urls"], daily)?)?;
    let hist = stats
        .histogram
        .iter()
        .map(|(k, n)| vec![k.to_string(), n.to_string()]);
    w.write("url_histogram.csv", &csv_bytes(&["urls_per_tweet", "tweets"], hist)?)?;
    Ok(())
}
