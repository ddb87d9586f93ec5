//! Tweet ingestion from newline-delimited JSON.
//!
//! Two record shapes are accepted: the public tweet JSON export
//! (`id_str`, `text`, `created_at`, `entities.urls[].expanded_url`) and a
//! flat shape used by synthetic fixtures (`id`, `text`, `created_at`, `urls`).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

/// Stems used by [`keyword_filter`] when none are configured.
pub const DEFAULT_STEMS: [&str; 4] = ["autism", "adhd", "asperger", "aspie"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub urls: Vec<String>,
    #[serde(default)]
    pub hashtags: Vec<String>,
    #[serde(default)]
    pub author_id: String,
}

/// Line accounting for one parsed stream. `read == parsed + skipped` always.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub read: usize,
    pub parsed: usize,
    pub skipped: usize,
    /// Skipped lines that were duplicates of an earlier tweet id.
    pub duplicates: usize,
    /// URL entries dropped because they were not valid absolute URLs.
    pub invalid_urls: usize,
}

impl IngestReport {
    pub fn summary(&self) -> String {
        format!(
            "lines read: {}\nrecords parsed: {}\nlines skipped: {} ({} duplicate ids)\ninvalid urls dropped: {}\n",
            self.read, self.parsed, self.skipped, self.duplicates, self.invalid_urls
        )
    }
}

/// Parses a timestamp in either the classic tweet format
/// (`Mon Sep 24 03:35:21 +0000 2012`) or RFC 3339 / ISO-8601.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_str(raw, "%a %b %d %H:%M:%S %z %Y") {
        return Some(t.with_timezone(&Utc));
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    // ISO-8601 without an offset is taken as UTC.
    if let Ok(t) = chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S") {
        return Some(t.and_utc());
    }
    None
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

/// Converts one JSON line into a record. Invalid URL entries are dropped and
/// counted in `invalid_urls`; everything else missing is a parse failure.
pub fn parse_record(line: &str, invalid_urls: &mut usize) -> Result<TweetRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if !v.is_object() {
        return Err("record is not a JSON object".into());
    }

    let tweet_id = match (v.get("id_str"), v.get("id")) {
        (Some(Value::String(s)), _) => s.clone(),
        (_, Some(Value::String(s))) => s.clone(),
        (_, Some(Value::Number(n))) => n.to_string(),
        _ => return Err("missing id_str".into()),
    };
    if tweet_id.is_empty() {
        return Err("empty tweet id".into());
    }

    let text = str_field(&v, "full_text")
        .or_else(|| str_field(&v, "text"))
        .ok_or("missing text")?
        .to_string();

    let created_raw = str_field(&v, "created_at").ok_or("missing created_at")?;
    let created_at =
        parse_timestamp(created_raw).ok_or_else(|| format!("bad created_at {created_raw:?}"))?;

    let mut raw_urls: Vec<String> = Vec::new();
    let entities = v.get("entities");
    if let Some(list) = entities.and_then(|e| e.get("urls")).and_then(Value::as_array) {
        for u in list {
            let candidate = str_field(u, "expanded_url").or_else(|| str_field(u, "url"));
            if let Some(c) = candidate {
                raw_urls.push(c.to_string());
            } else {
                *invalid_urls += 1;
            }
        }
    } else if let Some(list) = v.get("urls").and_then(Value::as_array) {
        for u in list {
            match u.as_str() {
                Some(s) => raw_urls.push(s.to_string()),
                None => *invalid_urls += 1,
            }
        }
    }
    let mut urls = Vec::with_capacity(raw_urls.len());
    for u in raw_urls {
        match Url::parse(&u) {
            Ok(parsed) if parsed.has_host() => urls.push(u),
            _ => *invalid_urls += 1,
        }
    }

    let hashtags = if let Some(list) = entities
        .and_then(|e| e.get("hashtags"))
        .and_then(Value::as_array)
    {
        list.iter()
            .filter_map(|h| str_field(h, "text"))
            .map(|s| s.trim_start_matches('#').to_string())
            .collect()
    } else if let Some(list) = v.get("hashtags").and_then(Value::as_array) {
        list.iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim_start_matches('#').to_string())
            .collect()
    } else {
        Vec::new()
    };

    let author_id = v
        .get("user")
        .and_then(|u| str_field(u, "id_str"))
        .or_else(|| str_field(&v, "author_id"))
        .unwrap_or_default()
        .to_string();

    Ok(TweetRecord {
        tweet_id,
        text,
        created_at,
        urls,
        hashtags,
        author_id,
    })
}

/// Parses an NDJSON stream. Blank lines are not counted.
pub fn parse_tweet_reader<R: BufRead>(
    reader: R,
    strict: bool,
) -> Result<(Vec<TweetRecord>, IngestReport), IngestError> {
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let mut seen: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IngestError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        report.read += 1;
        match parse_record(&line, &mut report.invalid_urls) {
            Ok(rec) => {
                if seen.insert(rec.tweet_id.clone()) {
                    report.parsed += 1;
                    records.push(rec);
                } else {
                    report.skipped += 1;
                    report.duplicates += 1;
                }
            }
            Err(reason) if strict => {
                return Err(IngestError::Malformed {
                    line: idx + 1,
                    reason,
                })
            }
            Err(_) => report.skipped += 1,
        }
    }
    Ok((records, report))
}

pub fn parse_tweet_stream(
    path: &Path,
    strict: bool,
) -> Result<(Vec<TweetRecord>, IngestReport), IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tweet_reader(BufReader::new(file), strict)
}

/// True iff some token of the lowercased text starts with one of `stems`.
/// Tokens are maximal runs of alphanumeric characters.
pub fn keyword_filter<S: AsRef<str>>(record: &TweetRecord, stems: &[S]) -> bool {
    let lower = record.text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .any(|tok| stems.iter().any(|s| tok.starts_with(s.as_ref())))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrlStats {
    /// Number of tweets carrying exactly `k` URLs, keyed by `k`.
    pub histogram: BTreeMap<usize, usize>,
    pub daily_tweets: BTreeMap<NaiveDate, usize>,
    pub daily_urls: BTreeMap<NaiveDate, usize>,
}

pub fn url_stats(records: &[TweetRecord]) -> UrlStats {
    let mut stats = UrlStats::default();
    for r in records {
        *stats.histogram.entry(r.urls.len()).or_default() += 1;
        let day = r.created_at.date_naive();
        *stats.daily_tweets.entry(day).or_default() += 1;
        *stats.daily_urls.entry(day).or_default() += r.urls.len();
    }
    stats
}
