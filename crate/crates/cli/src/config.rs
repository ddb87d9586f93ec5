//! Pipeline configuration, loaded from a single TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tweetlinks::corpus::{parse_stop_words, TokenRules};
use tweetlinks::evolve::Similarity;
use tweetlinks::extract::TagPolicy;
use tweetlinks::fetch::FetchPolicy;
use tweetlinks::hdp::{ChainSchedule, HdpHyperparams};
use tweetlinks::ingest::DEFAULT_STEMS;

use crate::error::CliError;

/// The full-default example shipped with the repository.
pub const EXAMPLE_CONFIG: &str = include_str!("../../../tweetlinks.example.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for training; each epoch's chain seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub fetch: FetchPolicy,
    pub extract: ExtractConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub track: TrackConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            ingest: IngestConfig::default(),
            fetch: FetchPolicy::default(),
            extract: ExtractConfig::default(),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            track: TrackConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Newline-delimited tweet JSON.
    pub input: PathBuf,
    pub cache_dir: PathBuf,
    pub work_dir: PathBuf,
    /// JSON synth plan read by the `synth` stage.
    pub synth_plan: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input: "tweets.jsonl".into(),
            cache_dir: "cache".into(),
            work_dir: "work".into(),
            synth_plan: "plan.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub stems: Vec<String>,
    pub strict: bool,
    /// Keep only tweets matching a stem.
    pub keyword_filter: bool,
    /// When false, tweet text is blanked in the stored records.
    pub store_text: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            stems: DEFAULT_STEMS.iter().map(|s| s.to_string()).collect(),
            strict: false,
            keyword_filter: true,
            store_text: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// JSON tag policy file; overrides `policy` when set.
    pub policy_file: Option<PathBuf>,
    pub policy: TagPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub lowercase: bool,
    pub min_len: usize,
    pub alphabetic_only: bool,
    /// One stop word per line; the built-in English list when unset.
    pub stop_words_file: Option<PathBuf>,
    pub coverage: f64,
    pub epoch_span_hours: i64,
    pub epoch_step_hours: i64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            min_len: 2,
            alphabetic_only: true,
            stop_words_file: None,
            coverage: 0.9,
            epoch_span_hours: 72,
            epoch_step_hours: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha0: f64,
    pub eta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub min_mass: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = HdpHyperparams::default();
        let s = ChainSchedule::default();
        Self {
            gamma: h.gamma,
            alpha0: h.alpha0,
            eta: h.eta,
            sweeps: s.sweeps,
            burn_in: s.burn_in,
            min_mass: 10,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> HdpHyperparams {
        HdpHyperparams {
            gamma: self.gamma,
            alpha0: self.alpha0,
            eta: self.eta,
        }
    }

    pub fn schedule(&self) -> ChainSchedule {
        ChainSchedule {
            sweeps: self.sweeps,
            burn_in: self.burn_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub tau: f64,
    pub similarity: Similarity,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            similarity: Similarity::WeightedJaccard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Terms per topic in the word-cloud export.
    pub top_terms: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { top_terms: 50 }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub offline: bool,
    pub strict: bool,
    pub input: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub max_redirects: Option<usize>,
    pub timeout_ms: Option<u64>,
    pub allow_types: Vec<String>,
    pub policy_file: Option<PathBuf>,
    pub synth_plan: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses TOML. Relative paths are resolved against `base`.
    pub fn from_toml(raw: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: PipelineConfig =
            toml::from_str(raw).map_err(|e| CliError::Validation(vec![format!("config: {e}")]))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Loads `path`, or the defaults relative to the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(vec![format!("cannot read config {}: {e}", p.display())])
                })?;
                let base = p.parent().unwrap_or(Path::new(""));
                Self::from_toml(&raw, base)
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.input);
        fix(&mut self.paths.cache_dir);
        fix(&mut self.paths.work_dir);
        fix(&mut self.paths.synth_plan);
        if let Some(p) = self.extract.policy_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.corpus.stop_words_file.as_mut() {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.fetch.offline |= o.offline;
        self.ingest.strict |= o.strict;
        if let Some(p) = &o.input {
            self.paths.input = p.clone();
        }
        if let Some(p) = &o.cache_dir {
            self.paths.cache_dir = p.clone();
        }
        if let Some(n) = o.max_redirects {
            self.fetch.max_redirects = n;
        }
        if let Some(t) = o.timeout_ms {
            self.fetch.timeout_ms = t;
        }
        if !o.allow_types.is_empty() {
            self.fetch.allowed_types = o.allow_types.clone();
        }
        if let Some(p) = &o.policy_file {
            self.extract.policy_file = Some(p.clone());
        }
        if let Some(p) = &o.synth_plan {
            self.paths.synth_plan = p.clone();
        }
    }

    /// Checks every numeric range and set constraint, reporting all
    /// violations at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut v = Vec::new();
        if self.ingest.keyword_filter && self.ingest.stems.is_empty() {
            v.push("ingest.stems must not be empty when keyword_filter is on".into());
        }
        if self.ingest.stems.iter().any(|s| s.is_empty() || *s != s.to_lowercase()) {
            v.push("ingest.stems must be non-empty lowercase strings".into());
        }
        let f = &self.fetch;
        if f.allowed_types.is_empty() {
            v.push("fetch.allowed_types must not be empty".into());
        }
        if f.max_body_bytes == 0 {
            v.push("fetch.max_body_bytes must be > 0".into());
        }
        if f.timeout_ms == 0 {
            v.push("fetch.timeout_ms must be > 0".into());
        }
        if f.max_concurrency == 0 {
            v.push("fetch.max_concurrency must be >= 1".into());
        }
        if let Err(e) = self.extract.policy.validate() {
            v.push(format!("extract.policy: {e}"));
        }
        let c = &self.corpus;
        if c.min_len == 0 {
            v.push("corpus.min_len must be >= 1".into());
        }
        if !(c.coverage > 0.0 && c.coverage <= 1.0) {
            v.push(format!("corpus.coverage must be in (0, 1], got {}", c.coverage));
        }
        if c.epoch_span_hours <= 0 {
            v.push("corpus.epoch_span_hours must be > 0".into());
        }
        if c.epoch_step_hours <= 0 || c.epoch_step_hours > c.epoch_span_hours {
            v.push("corpus.epoch_step_hours must be in (0, epoch_span_hours]".into());
        }
        let t = &self.train;
        for (name, x) in [("gamma", t.gamma), ("alpha0", t.alpha0), ("eta", t.eta)] {
            if !(x.is_finite() && x > 0.0) {
                v.push(format!("train.{name} must be finite and > 0, got {x}"));
            }
        }
        if t.sweeps <= t.burn_in {
            v.push(format!("train.sweeps ({}) must exceed train.burn_in ({})", t.sweeps, t.burn_in));
        }
        if !(0.0..=1.0).contains(&self.track.tau) {
            v.push(format!("track.tau must be in [0, 1], got {}", self.track.tau));
        }
        if let Similarity::TopK { k: 0 } = self.track.similarity {
            v.push("track.similarity top_k needs k >= 1".into());
        }
        if self.report.top_terms == 0 {
            v.push("report.top_terms must be >= 1".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(v))
        }
    }

    /// Token rules, reading the stop-word file if one is configured.
    pub fn token_rules(&self) -> Result<TokenRules, CliError> {
        let mut rules = TokenRules {
            lowercase: self.corpus.lowercase,
            min_len: self.corpus.min_len,
            alphabetic_only: self.corpus.alphabetic_only,
            ..TokenRules::default()
        };
        if let Some(p) = &self.corpus.stop_words_file {
            let raw = fs::read_to_string(p).map_err(|e| {
                CliError::Validation(vec![format!("cannot read stop words {}: {e}", p.display())])
            })?;
            rules.stop_words = parse_stop_words(&raw);
        }
        Ok(rules)
    }

    /// Tag policy, reading the policy file if one is configured.
    pub fn tag_policy(&self) -> Result<TagPolicy, CliError> {
        let policy = match &self.extract.policy_file {
            None => self.extract.policy.clone(),
            Some(p) => {
                let raw = fs::read(p).map_err(|e| {
                    CliError::Validation(vec![format!("cannot read policy {}: {e}", p.display())])
                })?;
                serde_json::from_slice(&raw)
                    .map_err(|e| CliError::Validation(vec![format!("policy {}: {e}", p.display())]))?
            }
        };
        policy
            .validate()
            .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
        Ok(policy)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Seed of the chain for `epoch`, a splitmix64 mix of the global seed and
/// the epoch index.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
