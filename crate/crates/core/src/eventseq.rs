//! Multi-type event sequences, datasets, splits and JSON-lines I/O.
//!
//! File layout: an optional header line `{"header":{"K":5}}` followed by one
//! sequence per line,
//!
//! ```text
//! {"seq_id":"a","t_end":10.0,"events":[{"t":1.0,"k":0},{"t":2.5,"k":1}]}
//! ```
//!
//! A ground-truth causality matrix, when present, lives in the sidecar file
//! `<path>.gt.json` as `{"K":5,"matrix":[[...],...]}`, where `matrix[k][k']`
//! is the influence of type `k'` on type `k`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sequence {seq_id:?}: timestamps are not sorted (event {index})")]
    Unsorted { seq_id: String, index: usize },
    #[error("sequence {seq_id:?}: negative or non-finite timestamp at event {index}")]
    BadTimestamp { seq_id: String, index: usize },
    #[error("sequence {seq_id:?}: event {index} at t={t} lies after t_end={t_end}")]
    AfterWindow {
        seq_id: String,
        index: usize,
        t: f64,
        t_end: f64,
    },
    #[error("sequence {seq_id:?}: event type {k} outside 0..{num_types}")]
    TypeOutOfRange {
        seq_id: String,
        k: usize,
        num_types: usize,
    },
    #[error("dataset has no sequences and no header declaring K")]
    MissingTypeCount,
    #[error("ground truth must be {expected}x{expected} with finite nonnegative entries")]
    BadGroundTruth { expected: usize },
    #[error("invalid split fractions {0:?}: must be positive and sum to 1")]
    BadFractions([f64; 3]),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One event: timestamp and 0-based type index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub k: usize,
}

impl Event {
    pub fn new(t: f64, k: usize) -> Self {
        Self { t, k }
    }
}

/// A single realization observed on `[0, t_end]`.
///
/// Timestamps are nondecreasing; equal timestamps keep their file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    seq_id: String,
    events: Vec<Event>,
    t_end: f64,
}

impl EventSequence {
    /// Validates ordering and window. `t_end` defaults to the last timestamp
    /// (or 0 for an empty sequence).
    pub fn new(seq_id: impl Into<String>, events: Vec<Event>, t_end: Option<f64>) -> Result<Self> {
        let seq_id = seq_id.into();
        let mut prev = 0.0_f64;
        for (index, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(DataError::BadTimestamp { seq_id, index });
            }
            if e.t < prev {
                return Err(DataError::Unsorted { seq_id, index });
            }
            prev = e.t;
        }
        let t_end = t_end.unwrap_or(prev);
        if !t_end.is_finite() || t_end < 0.0 {
            return Err(DataError::BadTimestamp {
                seq_id,
                index: events.len(),
            });
        }
        if let Some((index, e)) = events.iter().enumerate().find(|(_, e)| e.t > t_end) {
            return Err(DataError::AfterWindow {
                seq_id,
                index,
                t: e.t,
                t_end,
            });
        }
        Ok(Self {
            seq_id,
            events,
            t_end,
        })
    }

    pub fn seq_id(&self) -> &str {
        &self.seq_id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().map(|e| e.t)
    }

    pub fn types(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().map(|e| e.k)
    }

    fn max_type(&self) -> Option<usize> {
        self.types().max()
    }
}

/// Row-major square matrix of causal strengths; `get(k, k2)` is the
/// influence of type `k2` on type `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalMatrix {
    #[serde(rename = "K")]
    num_types: usize,
    matrix: Vec<Vec<f64>>,
}

impl CausalMatrix {
    pub fn zeros(num_types: usize) -> Self {
        Self {
            num_types,
            matrix: vec![vec![0.0; num_types]; num_types],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self {
            num_types: rows.len(),
            matrix: rows,
        }
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn get(&self, k: usize, k2: usize) -> f64 {
        self.matrix[k][k2]
    }

    pub fn set(&mut self, k: usize, k2: usize, v: f64) {
        self.matrix[k][k2] = v;
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    /// Row-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.matrix.iter().flatten().copied().collect()
    }

    pub fn is_square(&self) -> bool {
        self.matrix.len() == self.num_types && self.matrix.iter().all(|r| r.len() == self.num_types)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json_file(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: CausalMatrix = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        if !m.is_square() {
            return Err(DataError::BadGroundTruth {
                expected: m.num_types,
            });
        }
        Ok(m)
    }
}

/// A collection of sequences over `K` event types, optionally paired with a
/// ground-truth causality matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sequences: Vec<EventSequence>,
    num_types: usize,
    ground_truth: Option<CausalMatrix>,
}

impl Dataset {
    pub fn new(
        sequences: Vec<EventSequence>,
        num_types: usize,
        ground_truth: Option<CausalMatrix>,
    ) -> Result<Self> {
        for s in &sequences {
            if let Some(k) = s.types().find(|&k| k >= num_types) {
                return Err(DataError::TypeOutOfRange {
                    seq_id: s.seq_id.clone(),
                    k,
                    num_types,
                });
            }
        }
        if let Some(gt) = &ground_truth {
            let ok = gt.is_square()
                && gt.num_types == num_types
                && gt.flatten().iter().all(|v| v.is_finite() && *v >= 0.0);
            if !ok {
                return Err(DataError::BadGroundTruth {
                    expected: num_types,
                });
            }
        }
        Ok(Self {
            sequences,
            num_types,
            ground_truth,
        })
    }

    pub fn sequences(&self) -> &[EventSequence] {
        &self.sequences
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn ground_truth(&self) -> Option<&CausalMatrix> {
        self.ground_truth.as_ref()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Longest sequence length, the padding target for batched layouts.
    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).max().unwrap_or(0)
    }

    /// Sub-dataset of the given sequence indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            num_types: self.num_types,
            ground_truth: self.ground_truth.clone(),
        }
    }

    /// Events per type divided by total observed time.
    pub fn empirical_rates(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_types];
        for s in &self.sequences {
            for k in s.types() {
                counts[k] += 1;
            }
        }
        let time: f64 = self.sequences.iter().map(EventSequence::t_end).sum();
        counts
            .into_iter()
            .map(|c| if time > 0.0 { c as f64 / time } else { 0.0 })
            .collect()
    }

    /// Mean gap between consecutive events (the first gap measured from 0).
    pub fn mean_inter_event_time(&self) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in &self.sequences {
            let mut prev = 0.0;
            for t in s.times() {
                total += t - prev;
                prev = t;
                n += 1;
            }
        }
        if n == 0 || total <= 0.0 {
            1.0
        } else {
            total / n as f64
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "K")]
    num_types: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Header { header: Header },
    Sequence(SequenceRecord),
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    seq_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_end: Option<f64>,
    events: Vec<Event>,
}

/// Path of the ground-truth sidecar for a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".gt.json");
    PathBuf::from(s)
}

/// Reads a JSON-lines dataset and its ground-truth sidecar when one exists.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut header_k = None;
    let mut sequences = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        match parsed {
            Line::Header { header } => {
                if !sequences.is_empty() || header_k.is_some() {
                    return Err(DataError::Parse {
                        line: lineno,
                        msg: "header must be the first record".into(),
                    });
                }
                header_k = Some(header.num_types);
            }
            Line::Sequence(rec) => {
                sequences.push(EventSequence::new(rec.seq_id, rec.events, rec.t_end)?);
            }
        }
    }
    let num_types = match header_k {
        Some(k) => k,
        None => sequences
            .iter()
            .filter_map(EventSequence::max_type)
            .max()
            .map(|m| m + 1)
            .ok_or(DataError::MissingTypeCount)?,
    };
    let gt_path = sidecar_path(path);
    let ground_truth = if gt_path.exists() {
        Some(CausalMatrix::read_json(&gt_path)?)
    } else {
        None
    };
    Dataset::new(sequences, num_types, ground_truth)
}

/// Writes the dataset (with header) and, if present, its ground-truth sidecar.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({ "header": Header { num_types: ds.num_types } });
    writeln!(w, "{header}").map_err(io_err)?;
    for s in &ds.sequences {
        let rec = SequenceRecord {
            seq_id: s.seq_id.clone(),
            t_end: Some(s.t_end),
            events: s.events.clone(),
        };
        let text = serde_json::to_string(&rec).expect("sequence record serializes");
        writeln!(w, "{text}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    if let Some(gt) = &ds.ground_truth {
        gt.write_json(&sidecar_path(path))?;
    }
    Ok(())
}

pub(crate) fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Train / validation / test partition of sequence indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle followed by a largest-remainder allocation of sizes.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let valid = fractions.iter().all(|f| f.is_finite() && *f > 0.0)
        && (fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if !valid {
        return Err(DataError::BadFractions(fractions));
    }
    let n = ds.len();
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        sizes[i] += 1;
        missing -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let validation = idx.split_off(sizes[0]);
    Ok(Split {
        train: idx,
        validation,
        test,
    })
}
