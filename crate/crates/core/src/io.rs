//! File formats: JSONL event streams, JSON model snapshots and configs, CSV
//! reports and run manifests.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HdhpError, Result};
use crate::evaluation::{GofReport, PatternSummary, UserSummary};
use crate::generative::Event;
use crate::smc::InferenceResult;

pub const SNAPSHOT_VERSION: u32 = 1;

/// Average Gregorian month in seconds.
pub const SECONDS_PER_MONTH: f64 = 365.2425 * 86_400.0 / 12.0;

/// Converts a Unix timestamp to months since `epoch_seconds`.
pub fn seconds_to_months(seconds: f64, epoch_seconds: f64) -> f64 {
    (seconds - epoch_seconds) / SECONDS_PER_MONTH
}

/// One line of an events file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub user: String,
    pub words: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_pattern: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_task: Option<usize>,
}

/// Events with their user and word dictionaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub users: Vec<String>,
    pub vocab: Vec<String>,
}

impl Dataset {
    pub fn record(&self, event: &Event) -> EventRecord {
        EventRecord {
            time: event.time,
            user: self.users[event.user].clone(),
            words: event.words.iter().map(|&w| self.vocab[w].clone()).collect(),
            true_pattern: event.true_pattern,
            true_task: event.true_task,
        }
    }

    /// Index of the first event at or after `time`.
    pub fn split_index_at_time(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.time < time)
    }

    /// Index that keeps the first `fraction` of events for training.
    pub fn split_index_by_fraction(&self, fraction: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(HdhpError::Config(format!("train fraction must lie in [0, 1], got {fraction}")));
        }
        Ok((fraction * self.events.len() as f64).round() as usize)
    }

    /// Keeps events in `range`, renumbering users to those that remain.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut users = Vec::new();
        let events = self.events[range]
            .iter()
            .map(|e| {
                let user = *remap.entry(e.user).or_insert_with(|| {
                    users.push(self.users[e.user].clone());
                    users.len() - 1
                });
                Event { user, ..e.clone() }
            })
            .collect();
        Dataset {
            events,
            users,
            vocab: self.vocab.clone(),
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| HdhpError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HdhpError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HdhpError::io(path, e))
}

/// Parses JSONL events. With `vocab` given, words outside it are rejected;
/// otherwise the vocabulary is every word in order of first appearance.
pub fn read_events<R: BufRead>(reader: R, source: &Path, vocab: Option<&[String]>) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| HdhpError::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut vocab_list: Vec<String> = vocab.map(|v| v.to_vec()).unwrap_or_default();
    let mut vocab_index: HashMap<String, usize> =
        vocab_list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    let mut users = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut events: Vec<Event> = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| HdhpError::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !(rec.time.is_finite() && rec.time >= 0.0) {
            return Err(parse_err(lineno, format!("time must be finite and >= 0, got {}", rec.time)));
        }
        if rec.words.is_empty() {
            return Err(parse_err(lineno, "event has no words".into()));
        }
        if let Some(prev) = events.last() {
            if rec.time < prev.time {
                return Err(parse_err(
                    lineno,
                    format!("time {} is earlier than the previous event at {}", rec.time, prev.time),
                ));
            }
        }
        let user = *user_index.entry(rec.user.clone()).or_insert_with(|| {
            users.push(rec.user.clone());
            users.len() - 1
        });
        let mut words = Vec::with_capacity(rec.words.len());
        for w in rec.words {
            let id = match vocab_index.get(&w) {
                Some(&id) => id,
                None if vocab.is_some() => {
                    return Err(parse_err(lineno, HdhpError::UnknownWord(w).to_string()));
                }
                None => {
                    vocab_list.push(w.clone());
                    vocab_index.insert(w, vocab_list.len() - 1);
                    vocab_list.len() - 1
                }
            };
            words.push(id);
        }
        events.push(Event {
            time: rec.time,
            user,
            words,
            true_pattern: rec.true_pattern,
            true_task: rec.true_task,
        });
    }
    if events.is_empty() {
        return Err(HdhpError::EmptyStream);
    }
    Ok(Dataset {
        events,
        users,
        vocab: vocab_list,
    })
}

pub fn load_events(path: &Path, vocab: Option<&[String]>) -> Result<Dataset> {
    read_events(BufReader::new(open(path)?), path, vocab)
}

pub fn write_events<W: Write>(mut out: W, data: &Dataset) -> Result<()> {
    for e in &data.events {
        serde_json::to_writer(&mut out, &data.record(e))?;
        out.write_all(b"\n").map_err(|e| HdhpError::io("<events>", e))?;
    }
    Ok(())
}

pub fn save_events(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = create(path)?;
    write_events(&mut out, data)?;
    out.flush().map_err(|e| HdhpError::io(path, e))
}

/// One word per line; blank lines are ignored.
pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| HdhpError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn save_vocab(path: &Path, vocab: &[String]) -> Result<()> {
    let mut out = create(path)?;
    for w in vocab {
        writeln!(out, "{w}").map_err(|e| HdhpError::io(path, e))?;
    }
    out.flush().map_err(|e| HdhpError::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HdhpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HdhpError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| HdhpError::io(path, e))?;
    out.flush().map_err(|e| HdhpError::io(path, e))
}

#[derive(Serialize)]
struct SnapshotRef<'a> {
    format_version: u32,
    model: &'a InferenceResult,
}

#[derive(Deserialize)]
struct SnapshotOwned {
    model: InferenceResult,
}

pub fn snapshot_to_string(model: &InferenceResult) -> Result<String> {
    Ok(serde_json::to_string(&SnapshotRef {
        format_version: SNAPSHOT_VERSION,
        model,
    })?)
}

pub fn snapshot_from_str(text: &str) -> Result<InferenceResult> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| HdhpError::Config("snapshot has no format_version".into()))?;
    if found != SNAPSHOT_VERSION as u64 {
        return Err(HdhpError::Version {
            found: found as u32,
            expected: SNAPSHOT_VERSION,
        });
    }
    let snap: SnapshotOwned = serde_json::from_value(value)?;
    Ok(snap.model)
}

pub fn save_snapshot(model: &InferenceResult, path: &Path) -> Result<()> {
    let text = snapshot_to_string(model)?;
    let mut out = create(path)?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .and_then(|_| out.flush())
        .map_err(|e| HdhpError::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<InferenceResult> {
    let text = std::fs::read_to_string(path).map_err(|e| HdhpError::io(path, e))?;
    snapshot_from_str(&text)
}

/// Checks that every word of `data` has the same index in the model.
pub fn check_vocab_compatible(model: &InferenceResult, data: &Dataset) -> Result<()> {
    let model_vocab = model.vocab();
    let index: HashMap<&str, usize> = model_vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    for (i, w) in data.vocab.iter().enumerate() {
        match index.get(w.as_str()) {
            Some(&j) if j == i => {}
            Some(_) => {
                return Err(HdhpError::Config(format!(
                    "word `{w}` has a different index in the model vocabulary"
                )))
            }
            None => return Err(HdhpError::UnknownWord(w.clone())),
        }
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HdhpError + '_ {
    move |e| HdhpError::io(path, std::io::Error::other(e))
}

pub fn write_pattern_csv(path: &Path, rows: &[PatternSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["pattern", "popularity", "burstiness", "alpha", "top_words"])
        .map_err(&err)?;
    for r in rows {
        let words: Vec<&str> = r.top_words.iter().map(|(w, _)| w.as_str()).collect();
        w.write_record([
            r.pattern.to_string(),
            r.popularity.to_string(),
            r.burstiness.to_string(),
            r.alpha.to_string(),
            words.join(" "),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| HdhpError::io(path, e))
}

pub fn write_user_csv(path: &Path, rows: &[UserSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["user", "mu", "tasks", "patterns_adopted", "mean_task_duration"])
        .map_err(&err)?;
    for r in rows {
        w.write_record([
            r.user.clone(),
            r.mu.to_string(),
            r.tasks.to_string(),
            r.patterns_adopted.to_string(),
            r.mean_task_duration.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| HdhpError::io(path, e))
}

pub fn write_gof_csv(path: &Path, report: &GofReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["user", "gaps", "ks_statistic", "ks_pvalue", "ks_reject", "ad_statistic", "ad_reject"])
        .map_err(&err)?;
    for u in &report.users {
        w.write_record([
            u.user.clone(),
            u.gaps.to_string(),
            u.ks_statistic.to_string(),
            u.ks_pvalue.to_string(),
            u.ks_reject.to_string(),
            u.ad_statistic.to_string(),
            u.ad_reject.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| HdhpError::io(path, e))
}

/// Rows of `(event index, user, time, log-likelihood)`.
pub fn write_loglik_csv(path: &Path, rows: &[(usize, String, f64, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["event", "user", "time", "loglik"]).map_err(&err)?;
    for (i, u, t, l) in rows {
        w.write_record([i.to_string(), u.clone(), t.to_string(), l.to_string()])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| HdhpError::io(path, e))
}

/// Everything needed to rerun a CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Effective configuration after defaults and flag overrides.
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            threads: None,
            config,
            outputs: Vec::new(),
        }
    }
}

/// `<path>.manifest.json` next to a file output.
pub fn manifest_path_for(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
