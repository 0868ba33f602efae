//! Attributed-conversion logs: records, slices, per-slice aggregates and CSV
//! ingestion with a timestamp-ordered train/test split.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Opaque impression identifier, interned to a dense integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImpressionId(pub u64);

/// One attributed conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record<T> {
    pub impression: ImpressionId,
    /// Position in the impression's attribution order.
    pub arrival_index: u64,
    pub slice: usize,
    /// `values[l - 1]` is query `l` evaluated on this record.
    pub values: Vec<T>,
}

impl<T: Scalar> Record<T> {
    pub fn new(impression: u64, arrival_index: u64, slice: usize, values: Vec<T>) -> Self {
        Self {
            impression: ImpressionId(impression),
            arrival_index,
            slice,
            values,
        }
    }
}

/// Records partitioned into `m` slices, with `d` value queries each.
///
/// Immutable once built. Records of one impression are kept in arrival
/// order, and impressions are listed in first-seen order.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    m: usize,
    d: usize,
    records: Vec<Record<T>>,
    impressions: IndexMap<ImpressionId, Vec<usize>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(m: usize, d: usize, records: Vec<Record<T>>) -> Result<Self> {
        let mut impressions: IndexMap<ImpressionId, Vec<usize>> = IndexMap::new();
        for (pos, r) in records.iter().enumerate() {
            if r.slice >= m {
                return Err(Error::Data(format!(
                    "record {pos}: slice {} out of range for m = {m}",
                    r.slice
                )));
            }
            if r.values.len() != d {
                return Err(Error::Data(format!(
                    "record {pos}: expected {d} values, got {}",
                    r.values.len()
                )));
            }
            if let Some(v) = r.values.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
                return Err(Error::Data(format!("record {pos}: invalid value {v}")));
            }
            impressions.entry(r.impression).or_default().push(pos);
        }
        for (id, positions) in impressions.iter_mut() {
            positions.sort_by_key(|&p| records[p].arrival_index);
            if positions
                .windows(2)
                .any(|w| records[w[0]].arrival_index == records[w[1]].arrival_index)
            {
                return Err(Error::Data(format!(
                    "impression {}: duplicate arrival index",
                    id.0
                )));
            }
        }
        Ok(Self {
            m,
            d,
            records,
            impressions,
        })
    }

    pub fn empty(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            records: Vec::new(),
            impressions: IndexMap::new(),
        }
    }

    pub fn num_slices(&self) -> usize {
        self.m
    }

    pub fn num_queries(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record<T>] {
        &self.records
    }

    pub fn num_impressions(&self) -> usize {
        self.impressions.len()
    }

    /// Impressions in first-seen order, each with its records in arrival
    /// order.
    pub fn impressions(&self) -> impl Iterator<Item = (ImpressionId, ImpressionRecords<'_, T>)> {
        self.impressions.iter().map(move |(&id, positions)| {
            (
                id,
                ImpressionRecords {
                    records: &self.records,
                    positions,
                },
            )
        })
    }

    pub fn impression(&self, id: ImpressionId) -> Option<ImpressionRecords<'_, T>> {
        self.impressions.get(&id).map(|positions| ImpressionRecords {
            records: &self.records,
            positions,
        })
    }

    /// The dataset minus every record of `id`.
    pub fn without_impression(&self, id: ImpressionId) -> Self {
        let records = self
            .records
            .iter()
            .filter(|r| r.impression != id)
            .cloned()
            .collect();
        Self::new(self.m, self.d, records).expect("subset of a valid dataset")
    }

    /// Per-slice aggregates, shape `(d + 1) x m`; row 0 is the record count.
    pub fn true_aggregates(&self) -> Array2<T> {
        let mut v = Array2::from_elem((self.d + 1, self.m), T::zero());
        for r in &self.records {
            v[[0, r.slice]] = v[[0, r.slice]] + T::one();
            for (l, &x) in r.values.iter().enumerate() {
                v[[l + 1, r.slice]] = v[[l + 1, r.slice]] + x;
            }
        }
        v
    }

    pub fn conversion_counts(&self) -> ConversionCounts {
        let counts: IndexMap<ImpressionId, usize> = self
            .impressions
            .iter()
            .map(|(&id, p)| (id, p.len()))
            .collect();
        let max = counts.values().copied().max().unwrap_or(0);
        ConversionCounts { counts, max }
    }

    /// Thresholds for the relative-error metric: five times the median of
    /// each query over all records. The count query is constant 1, so its
    /// threshold is 5.
    pub fn median_tau(&self) -> Result<Vec<T>> {
        if self.records.is_empty() {
            return Err(Error::Data("median threshold of an empty dataset".into()));
        }
        let five = T::lit(5.0);
        let mut tau = vec![five];
        for l in 0..self.d {
            let mut col: Vec<T> = self.records.iter().map(|r| r.values[l]).collect();
            let med = median(&mut col);
            if med <= T::zero() {
                return Err(Error::Data(format!(
                    "query {}: median is zero, threshold would be degenerate",
                    l + 1
                )));
            }
            tau.push(five * med);
        }
        Ok(tau)
    }

    /// Column `l` (1-based query index) over all records.
    pub fn query_values(&self, l: usize) -> impl Iterator<Item = T> + '_ {
        self.records.iter().map(move |r| r.values[l - 1])
    }
}

/// Records belonging to one impression, in arrival order.
#[derive(Clone, Copy)]
pub struct ImpressionRecords<'a, T> {
    records: &'a [Record<T>],
    positions: &'a [usize],
}

impl<'a, T> ImpressionRecords<'a, T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &'a [usize] {
        self.positions
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a Record<T>> + 'a {
        let records = self.records;
        self.positions.iter().map(move |&p| &records[p])
    }
}

#[derive(Clone, Debug, Default)]
pub struct ConversionCounts {
    pub counts: IndexMap<ImpressionId, usize>,
    pub max: usize,
}

/// Median; even lengths average the two middle elements. Sorts in place.
pub fn median<T: Scalar>(xs: &mut [T]) -> T {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / T::lit(2.0)
    }
}

/// Nearest-rank quantile: the smallest element with at least `q * n`
/// elements at or below it.
pub fn quantile<T: Scalar>(xs: &mut [T], q: f64) -> T {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = (q * xs.len() as f64).ceil() as usize;
    xs[rank.clamp(1, xs.len()) - 1]
}

/// Feature tuple → slice index, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceDictionary {
    slices: IndexMap<String, usize>,
}

impl SliceDictionary {
    pub const SEPARATOR: &'static str = "|";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(features: &[&str]) -> String {
        features.join(Self::SEPARATOR)
    }

    /// Slice for `features`, allocating the next index if unseen.
    pub fn slice_for(&mut self, features: &[&str]) -> usize {
        let key = Self::key(features);
        let next = self.slices.len();
        *self.slices.entry(key).or_insert(next)
    }

    pub fn get(&self, features: &[&str]) -> Option<usize> {
        self.slices.get(&Self::key(features)).copied()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.slices.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Column roles and split policy for [`ingest_csv`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestSpec {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub impression_column: String,
    pub slice_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub timestamp_column: String,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Existing dictionary to extend; slices seen for the first time are
    /// appended.
    #[serde(default)]
    pub dictionary: Option<SliceDictionary>,
}

fn default_delimiter() -> char {
    ','
}

fn default_train_fraction() -> f64 {
    0.5
}

impl IngestSpec {
    pub fn new(
        path: impl AsRef<Path>,
        impression_column: &str,
        slice_columns: &[&str],
        value_columns: &[&str],
        timestamp_column: &str,
    ) -> Self {
        Self {
            path: path.as_ref().to_path_buf(),
            delimiter: default_delimiter(),
            impression_column: impression_column.into(),
            slice_columns: slice_columns.iter().map(|s| s.to_string()).collect(),
            value_columns: value_columns.iter().map(|s| s.to_string()).collect(),
            timestamp_column: timestamp_column.into(),
            train_fraction: default_train_fraction(),
            dictionary: None,
        }
    }
}

#[derive(Debug)]
pub struct Ingested<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub dictionary: SliceDictionary,
    pub accepted: usize,
    /// Rows dropped for a missing, negative or non-numeric value.
    pub rejected: usize,
    /// File row numbers (0-based, header excluded) of the train and test
    /// records, in dataset record order.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, PartialOrd)]
enum Timestamp {
    Numeric(f64),
    Text(String),
}

struct Row {
    file_row: usize,
    impression: String,
    features: Vec<String>,
    values: Vec<f64>,
    timestamp: String,
}

/// Reads a conversion log and splits it by timestamp: the earliest
/// `train_fraction` of accepted rows (ties broken by file order) form the
/// training set, the rest the test set. Both share one slice dictionary.
pub fn ingest_csv<T: Scalar>(spec: &IngestSpec) -> Result<Ingested<T>> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if !spec.delimiter.is_ascii() {
        return Err(Error::Config("delimiter must be a single ASCII character".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .from_path(&spec.path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column '{name}'")))
    };
    let id_col = column(&spec.impression_column)?;
    let ts_col = column(&spec.timestamp_column)?;
    let slice_cols = spec
        .slice_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let value_cols = spec
        .value_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut rejected = 0;
    for (file_row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: Option<Vec<f64>> = value_cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v >= 0.0)
            })
            .collect();
        let Some(values) = parsed else {
            rejected += 1;
            continue;
        };
        rows.push(Row {
            file_row,
            impression: rec.get(id_col).unwrap_or("").to_string(),
            features: slice_cols
                .iter()
                .map(|&c| rec.get(c).unwrap_or("").to_string())
                .collect(),
            values,
            timestamp: rec.get(ts_col).unwrap_or("").trim().to_string(),
        });
    }

    let numeric = rows.iter().all(|r| r.timestamp.parse::<f64>().is_ok());
    let stamp = |r: &Row| {
        if numeric {
            Timestamp::Numeric(r.timestamp.parse().expect("checked numeric"))
        } else {
            Timestamp::Text(r.timestamp.clone())
        }
    };
    let mut keyed: Vec<(Timestamp, Row)> = rows.into_iter().map(|r| (stamp(&r), r)).collect();
    keyed.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.file_row.cmp(&b.1.file_row))
    });

    // Slice indices follow file order, not timestamp order.
    let mut dictionary = spec.dictionary.clone().unwrap_or_default();
    let mut by_file: Vec<&Row> = keyed.iter().map(|(_, r)| r).collect();
    by_file.sort_by_key(|r| r.file_row);
    for r in &by_file {
        let f: Vec<&str> = r.features.iter().map(String::as_str).collect();
        dictionary.slice_for(&f);
    }
    let m = dictionary.len();
    let d = value_cols.len();

    let accepted = keyed.len();
    let n_train = (spec.train_fraction * accepted as f64).floor() as usize;
    let mut ids: HashMap<String, u64> = HashMap::new();
    let mut arrivals: HashMap<u64, u64> = HashMap::new();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(accepted - n_train);
    let mut train_rows = Vec::with_capacity(n_train);
    let mut test_rows = Vec::with_capacity(accepted - n_train);
    for (i, (_, row)) in keyed.iter().enumerate() {
        let next = ids.len() as u64;
        let id = *ids.entry(row.impression.clone()).or_insert(next);
        let arrival = arrivals.entry(id).or_insert(0);
        let f: Vec<&str> = row.features.iter().map(String::as_str).collect();
        let record = Record {
            impression: ImpressionId(id),
            arrival_index: *arrival,
            slice: dictionary.get(&f).expect("registered above"),
            values: row.values.iter().map(|&v| T::lit(v)).collect(),
        };
        *arrival += 1;
        if i < n_train {
            train.push(record);
            train_rows.push(row.file_row);
        } else {
            test.push(record);
            test_rows.push(row.file_row);
        }
    }

    Ok(Ingested {
        train: Dataset::new(m, d, train)?,
        test: Dataset::new(m, d, test)?,
        dictionary,
        accepted,
        rejected,
        train_rows,
        test_rows,
    })
}
