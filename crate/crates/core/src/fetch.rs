//! Page retrieval with content-type gating, redirect following and a
//! replayable on-disk cache.
//!
//! The cache directory holds `manifest.json` plus `bodies/<sha256>.bin`.
//! Entries are keyed by the canonical requested URL; a secondary index by
//! canonical final URL lets different short links to one page share a body
//! without another request.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("invalid url {0:?}")]
    InvalidUrl(String),
    #[error("network failure fetching {url}: {reason}")]
    Network { url: String, reason: String },
    #[error("timed out fetching {0}")]
    Timeout(String),
    #[error("redirect loop at {0}")]
    RedirectLoop(String),
    #[error("more than {max} redirects starting from {url}")]
    TooManyRedirects { url: String, max: usize },
    #[error("body of {url} exceeds {limit} bytes")]
    Oversize { url: String, limit: usize },
    #[error("{0} is not cached and fetching is offline")]
    OfflineMiss(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl From<std::io::Error> for FetchError {
    fn from(e: std::io::Error) -> Self {
        FetchError::Cache(e.to_string())
    }
}

/// Lowercases scheme and host, drops the default port and fragment.
/// Path and query are kept as written.
pub fn canonicalize_url(raw: &str) -> Result<String, FetchError> {
    let mut url = Url::parse(raw.trim()).map_err(|_| FetchError::InvalidUrl(raw.to_string()))?;
    if !url.has_host() {
        return Err(FetchError::InvalidUrl(raw.to_string()));
    }
    url.set_fragment(None);
    // `Url` already lowercases scheme and registered host names and strips
    // default ports on parse.
    Ok(url.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchPolicy {
    pub allowed_types: Vec<String>,
    pub max_redirects: usize,
    pub max_body_bytes: usize,
    pub timeout_ms: u64,
    /// Minimum spacing between two requests to the same host.
    pub per_host_spacing_ms: u64,
    pub max_concurrency: usize,
    pub offline: bool,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        Self {
            allowed_types: vec!["text/html".into(), "application/xhtml+xml".into()],
            max_redirects: 10,
            max_body_bytes: 5 * 1024 * 1024,
            timeout_ms: 15_000,
            per_host_spacing_ms: 1_000,
            max_concurrency: 8,
            offline: false,
        }
    }
}

impl FetchPolicy {
    pub fn allows(&self, content_type: &str) -> bool {
        self.allowed_types.iter().any(|t| t.eq_ignore_ascii_case(content_type))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchResult {
    pub requested_url: String,
    pub final_url: String,
    pub status: u16,
    pub content_type: String,
    #[serde(skip)]
    pub body: Vec<u8>,
    pub fetched_at: DateTime<Utc>,
}

impl FetchResult {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// Accepted pages carry a body; rejected ones are kept as evidence only.
    pub fn is_accepted(&self) -> bool {
        !self.body.is_empty()
    }
}

/// One HTTP exchange without redirect handling.
#[derive(Debug, Clone)]
pub struct RawResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub location: Option<String>,
    pub body: Vec<u8>,
}

pub trait Transport: Send + Sync {
    /// Issues a single GET. Implementations must not follow redirects and
    /// must fail with [`FetchError::Oversize`] past `max_body_bytes`.
    fn get(&self, url: &str, max_body_bytes: usize) -> Result<RawResponse, FetchError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(timeout)
            .user_agent(concat!("tweetlinks/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| FetchError::Network {
                url: String::new(),
                reason: e.to_string(),
            })?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str, max_body_bytes: usize) -> Result<RawResponse, FetchError> {
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                FetchError::Timeout(url.to_string())
            } else {
                FetchError::Network {
                    url: url.to_string(),
                    reason: e.to_string(),
                }
            }
        };
        let resp = self.client.get(url).send().map_err(classify)?;
        let status = resp.status().as_u16();
        let header = |name: reqwest::header::HeaderName| {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        };
        let content_type = header(reqwest::header::CONTENT_TYPE);
        let location = header(reqwest::header::LOCATION);
        if let Some(len) = resp.content_length() {
            if len > max_body_bytes as u64 {
                return Err(FetchError::Oversize {
                    url: url.to_string(),
                    limit: max_body_bytes,
                });
            }
        }
        let mut body = Vec::new();
        resp.take(max_body_bytes as u64 + 1)
            .read_to_end(&mut body)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::TimedOut {
                    FetchError::Timeout(url.to_string())
                } else {
                    FetchError::Network {
                        url: url.to_string(),
                        reason: e.to_string(),
                    }
                }
            })?;
        if body.len() > max_body_bytes {
            return Err(FetchError::Oversize {
                url: url.to_string(),
                limit: max_body_bytes,
            });
        }
        Ok(RawResponse {
            status,
            content_type,
            location,
            body,
        })
    }
}

/// `text/html; charset=utf-8` -> `text/html`.
pub fn media_type(header: Option<&str>) -> String {
    header
        .and_then(|h| h.split(';').next())
        .map(|s| s.trim().to_ascii_lowercase())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub requested_url: String,
    pub final_url: String,
    pub status: u16,
    pub content_type: String,
    pub body_file: Option<String>,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Another writer stored this key first; its entry is kept.
    AlreadyPresent,
}

#[derive(Default)]
struct CacheIndex {
    by_requested: BTreeMap<String, ManifestEntry>,
    by_final: BTreeMap<String, String>,
}

pub struct PageCache {
    dir: PathBuf,
    index: Mutex<CacheIndex>,
}

impl PageCache {
    pub fn open(dir: &Path) -> Result<Self, FetchError> {
        fs::create_dir_all(dir.join("bodies"))?;
        let mut index = CacheIndex::default();
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let raw = fs::read(&manifest_path)?;
            let manifest: Manifest =
                serde_json::from_slice(&raw).map_err(|e| FetchError::Cache(e.to_string()))?;
            for entry in manifest.entries {
                index
                    .by_final
                    .entry(entry.final_url.clone())
                    .or_insert_with(|| entry.requested_url.clone());
                index.by_requested.insert(entry.requested_url.clone(), entry);
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index: Mutex::new(index),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().by_requested.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load(&self, entry: &ManifestEntry) -> Result<FetchResult, FetchError> {
        let body = match &entry.body_file {
            Some(name) => fs::read(self.dir.join("bodies").join(name))?,
            None => Vec::new(),
        };
        Ok(FetchResult {
            requested_url: entry.requested_url.clone(),
            final_url: entry.final_url.clone(),
            status: entry.status,
            content_type: entry.content_type.clone(),
            body,
            fetched_at: entry.fetched_at,
        })
    }

    pub fn get(&self, canonical_requested: &str) -> Result<Option<FetchResult>, FetchError> {
        let entry = self
            .index
            .lock()
            .unwrap()
            .by_requested
            .get(canonical_requested)
            .cloned();
        entry.map(|e| self.load(&e)).transpose()
    }

    pub fn get_by_final(&self, canonical_final: &str) -> Result<Option<FetchResult>, FetchError> {
        let entry = {
            let index = self.index.lock().unwrap();
            index
                .by_final
                .get(canonical_final)
                .and_then(|k| index.by_requested.get(k))
                .cloned()
        };
        entry.map(|e| self.load(&e)).transpose()
    }

    pub fn insert(&self, result: &FetchResult) -> Result<InsertOutcome, FetchError> {
        if self
            .index
            .lock()
            .unwrap()
            .by_requested
            .contains_key(&result.requested_url)
        {
            return Ok(InsertOutcome::AlreadyPresent);
        }
        let body_file = if result.body.is_empty() {
            None
        } else {
            let name = format!("{}.bin", hex::encode(Sha256::digest(&result.body)));
            let path = self.dir.join("bodies").join(&name);
            if !path.exists() {
                write_atomic(&path, &result.body)?;
            }
            Some(name)
        };
        let entry = ManifestEntry {
            requested_url: result.requested_url.clone(),
            final_url: result.final_url.clone(),
            status: result.status,
            content_type: result.content_type.clone(),
            body_file,
            fetched_at: result.fetched_at,
        };
        let mut index = self.index.lock().unwrap();
        if index.by_requested.contains_key(&entry.requested_url) {
            return Ok(InsertOutcome::AlreadyPresent);
        }
        index
            .by_final
            .entry(entry.final_url.clone())
            .or_insert_with(|| entry.requested_url.clone());
        index.by_requested.insert(entry.requested_url.clone(), entry);
        Ok(InsertOutcome::Inserted)
    }

    /// Writes `manifest.json` (entries sorted by requested URL).
    pub fn flush(&self) -> Result<(), FetchError> {
        let manifest = Manifest {
            entries: self
                .index
                .lock()
                .unwrap()
                .by_requested
                .values()
                .cloned()
                .collect(),
        };
        let raw = serde_json::to_vec_pretty(&manifest).map_err(|e| FetchError::Cache(e.to_string()))?;
        write_atomic(&self.dir.join("manifest.json"), &raw)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FetchError> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Fetcher<T: Transport> {
    transport: T,
    cache: PageCache,
    policy: FetchPolicy,
    next_slot: Mutex<HashMap<String, Instant>>,
}

impl<T: Transport> Fetcher<T> {
    pub fn new(transport: T, cache: PageCache, policy: FetchPolicy) -> Self {
        Self {
            transport,
            cache,
            policy,
            next_slot: Mutex::new(HashMap::new()),
        }
    }

    pub fn cache(&self) -> &PageCache {
        &self.cache
    }

    pub fn policy(&self) -> &FetchPolicy {
        &self.policy
    }

    fn wait_for_host(&self, url: &str) {
        let spacing = Duration::from_millis(self.policy.per_host_spacing_ms);
        if spacing.is_zero() {
            return;
        }
        let host = Url::parse(url)
            .ok()
            .and_then(|u| u.host_str().map(str::to_string))
            .unwrap_or_default();
        let now = Instant::now();
        let slot = {
            let mut slots = self.next_slot.lock().unwrap();
            let slot = slots.get(&host).copied().unwrap_or(now).max(now);
            slots.insert(host, slot + spacing);
            slot
        };
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }

    /// Fetches one URL, consulting the cache first. Disallowed media types and
    /// non-success statuses produce a rejected result with an empty body.
    pub fn fetch_page(&self, url: &str) -> Result<FetchResult, FetchError> {
        let requested = canonicalize_url(url)?;
        if let Some(hit) = self.cache.get(&requested)? {
            return Ok(hit);
        }
        if self.policy.offline {
            return Err(FetchError::OfflineMiss(requested));
        }

        let mut current = requested.clone();
        let mut visited: HashSet<String> = HashSet::from([requested.clone()]);
        let mut hops = 0usize;
        loop {
            if hops > 0 {
                if let Some(shared) = self.cache.get_by_final(&current)? {
                    let result = FetchResult {
                        requested_url: requested.clone(),
                        ..shared
                    };
                    self.cache.insert(&result)?;
                    return Ok(result);
                }
            }
            self.wait_for_host(&current);
            let resp = self.transport.get(&current, self.policy.max_body_bytes)?;

            if (300..400).contains(&resp.status) {
                if let Some(loc) = resp.location.as_deref() {
                    let base = Url::parse(&current).map_err(|_| FetchError::InvalidUrl(current.clone()))?;
                    let next = base
                        .join(loc)
                        .map_err(|_| FetchError::InvalidUrl(loc.to_string()))?;
                    let next = canonicalize_url(next.as_str())?;
                    if !visited.insert(next.clone()) {
                        return Err(FetchError::RedirectLoop(next));
                    }
                    hops += 1;
                    if hops > self.policy.max_redirects {
                        return Err(FetchError::TooManyRedirects {
                            url: requested,
                            max: self.policy.max_redirects,
                        });
                    }
                    current = next;
                    continue;
                }
            }

            let content_type = media_type(resp.content_type.as_deref());
            let accepted = (200..300).contains(&resp.status) && self.policy.allows(&content_type);
            let result = FetchResult {
                requested_url: requested,
                final_url: current,
                status: resp.status,
                content_type,
                body: if accepted { resp.body } else { Vec::new() },
                fetched_at: Utc::now(),
            };
            self.cache.insert(&result)?;
            return Ok(result);
        }
    }

    /// Fetches many URLs with at most `max_concurrency` workers. Requests to a
    /// single host are issued by one worker at a time. Results come back in
    /// input order.
    pub fn fetch_all(&self, urls: &[String]) -> Vec<Result<FetchResult, FetchError>> {
        let mut by_host: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, u) in urls.iter().enumerate() {
            let host = Url::parse(u)
                .ok()
                .and_then(|p| p.host_str().map(str::to_string))
                .unwrap_or_default();
            by_host.entry(host).or_default().push(i);
        }
        let queue: Mutex<VecDeque<Vec<usize>>> = Mutex::new(by_host.into_values().collect());
        let slots: Vec<Mutex<Option<Result<FetchResult, FetchError>>>> =
            urls.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.policy.max_concurrency.max(1);

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let Some(group) = queue.lock().unwrap().pop_front() else {
                        break;
                    };
                    for i in group {
                        let r = self.fetch_page(&urls[i]);
                        *slots[i].lock().unwrap() = Some(r);
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every url is visited"))
            .collect()
    }
}
