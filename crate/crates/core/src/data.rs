//! Multi-series observation tables.
//!
//! A [`Dataset`] holds one or more time series stacked row-wise. Rows of the
//! same series are contiguous and keep their file order. Three column names
//! are reserved: `ID` (series label), `time` (checked for regular spacing,
//! then ignored) and `state` (known states, `1..=K` or missing).
//!
//! Missing cells are written as an empty field or the literal `NA`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::util::fmt17;

pub const ID_COLUMN: &str = "ID";
pub const TIME_COLUMN: &str = "time";
pub const STATE_COLUMN: &str = "state";

/// A covariate column. Categorical columns store level codes into `levels`.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical {
        levels: Vec<String>,
        codes: Vec<Option<usize>>,
    },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_missing(&self, row: usize) -> bool {
        match self {
            Column::Numeric(v) => v[row].is_none(),
            Column::Categorical { codes, .. } => codes[row].is_none(),
        }
    }

    fn copy_cell(&mut self, from: usize, to: usize) {
        match self {
            Column::Numeric(v) => v[to] = v[from],
            Column::Categorical { codes, .. } => codes[to] = codes[from],
        }
    }

    fn subset(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical { levels, codes } => Column::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
            },
        }
    }
}

/// Which columns of a CSV file to read, and how.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub responses: Vec<String>,
    pub covariates: Vec<String>,
    /// Covariates to read as categorical (factor) columns. Must be a subset of `covariates`.
    pub categorical: Vec<String>,
}

impl Schema {
    pub fn new<S: AsRef<str>>(responses: &[S], covariates: &[S]) -> Self {
        Schema {
            responses: responses.iter().map(|s| s.as_ref().to_string()).collect(),
            covariates: covariates.iter().map(|s| s.as_ref().to_string()).collect(),
            categorical: Vec::new(),
        }
    }

    pub fn with_categorical<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.categorical = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }
}

/// A stacked multi-series observation table. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    labels: Vec<String>,
    series: Vec<Range<usize>>,
    has_id: bool,
    responses: IndexMap<String, Vec<Option<f64>>>,
    covariates: IndexMap<String, Column>,
    states: Option<Vec<Option<usize>>>,
    time: Option<Vec<String>>,
}

/// A borrowed view of one series.
#[derive(Debug, Clone)]
pub struct SeriesView<'a> {
    pub label: &'a str,
    pub rows: Range<usize>,
    pub data: &'a Dataset,
}

impl SeriesView<'_> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Group per-row series labels into contiguous blocks.
pub fn group_series(ids: &[String]) -> Result<(Vec<String>, Vec<Range<usize>>)> {
    let mut labels: Vec<String> = Vec::new();
    let mut ranges: Vec<Range<usize>> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (row, id) in ids.iter().enumerate() {
        match labels.last() {
            Some(last) if last == id => ranges.last_mut().unwrap().end = row + 1,
            _ => {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Data(format!(
                        "series '{id}' is not contiguous (reappears at data row {})",
                        row + 1
                    )));
                }
                labels.push(id.clone());
                ranges.push(row..row + 1);
            }
        }
    }
    Ok((labels, ranges))
}

impl Dataset {
    /// Build a dataset from per-row series labels and columns.
    ///
    /// `states` holds 1-based known states (or `None`); they are stored 0-based.
    pub fn new(
        ids: Option<Vec<String>>,
        responses: IndexMap<String, Vec<Option<f64>>>,
        covariates: IndexMap<String, Column>,
        states: Option<Vec<Option<usize>>>,
    ) -> Result<Self> {
        let n = responses
            .values()
            .map(|v| v.len())
            .chain(covariates.values().map(|c| c.len()))
            .chain(ids.iter().map(|v| v.len()))
            .chain(states.iter().map(|v| v.len()))
            .next()
            .ok_or_else(|| Error::Data("dataset has no columns".into()))?;
        Self::with_rows(n, ids, responses, covariates, states)
    }

    /// Like [`Dataset::new`] but with an explicit row count, so covariate-free tables work.
    pub fn with_rows(
        n: usize,
        ids: Option<Vec<String>>,
        responses: IndexMap<String, Vec<Option<f64>>>,
        covariates: IndexMap<String, Column>,
        states: Option<Vec<Option<usize>>>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        for (name, v) in &responses {
            if v.len() != n {
                return Err(Error::Data(format!("column '{name}' has {} rows, expected {n}", v.len())));
            }
        }
        for (name, c) in &covariates {
            if c.len() != n {
                return Err(Error::Data(format!("column '{name}' has {} rows, expected {n}", c.len())));
            }
            if let Column::Categorical { levels, codes } = c {
                if codes.iter().flatten().any(|&c| c >= levels.len()) {
                    return Err(Error::Data(format!("column '{name}' has a level code out of range")));
                }
            }
        }
        let has_id = ids.is_some();
        let ids = ids.unwrap_or_else(|| vec!["1".to_string(); n]);
        if ids.len() != n {
            return Err(Error::Data(format!("ID column has {} rows, expected {n}", ids.len())));
        }
        let (labels, series) = group_series(&ids)?;
        let states = match states {
            Some(s) => {
                if s.len() != n {
                    return Err(Error::Data("state column length mismatch".into()));
                }
                let mut out = Vec::with_capacity(n);
                for (row, v) in s.into_iter().enumerate() {
                    out.push(match v {
                        Some(0) => {
                            return Err(Error::Data(format!(
                                "known state 0 at data row {}: states are numbered from 1",
                                row + 1
                            )))
                        }
                        Some(k) => Some(k - 1),
                        None => None,
                    });
                }
                Some(out)
            }
            None => None,
        };
        Ok(Dataset {
            labels,
            series,
            has_id,
            responses,
            covariates,
            states,
            time: None,
        })
    }

    /// Read a CSV file. A missing `ID` column means a single series.
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(file, schema)
    }

    pub fn from_csv_reader<R: Read>(reader: R, schema: &Schema) -> Result<Self> {
        for c in &schema.categorical {
            if !schema.covariates.contains(c) && c != ID_COLUMN {
                return Err(Error::Load(format!(
                    "categorical column '{c}' is not listed as a covariate"
                )));
            }
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = match rdr.headers() {
            Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
            Err(e) => return Err(Error::Load(format!("cannot read header: {e}"))),
        };
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(Error::Load("empty file: a header row is required".into()));
        }
        let find = |name: &str| headers.iter().position(|h| h == name);
        let mut wanted: Vec<(String, usize)> = Vec::new();
        for name in schema.responses.iter().chain(schema.covariates.iter()) {
            if name == ID_COLUMN {
                continue;
            }
            match find(name) {
                Some(i) => wanted.push((name.clone(), i)),
                None => return Err(Error::Load(format!("required column '{name}' not found"))),
            }
        }
        let id_col = find(ID_COLUMN);
        let time_col = find(TIME_COLUMN);
        let state_col = find(STATE_COLUMN);

        let records: Vec<csv::StringRecord> = rdr
            .records()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Load(format!("malformed CSV: {e}")))?;
        if records.is_empty() {
            return Err(Error::Load("file contains no data rows".into()));
        }
        let n = records.len();
        let cell = |rec: &csv::StringRecord, i: usize| rec.get(i).unwrap_or("").trim().to_string();

        let ids = id_col.map(|i| records.iter().map(|r| cell(r, i)).collect::<Vec<_>>());
        let mut responses = IndexMap::new();
        for name in &schema.responses {
            let (_, i) = wanted.iter().find(|(n, _)| n == name).unwrap();
            let mut v = Vec::with_capacity(n);
            for (row, rec) in records.iter().enumerate() {
                v.push(parse_numeric(&cell(rec, *i), row, name)?);
            }
            responses.insert(name.clone(), v);
        }
        let mut covariates = IndexMap::new();
        for name in &schema.covariates {
            if name == ID_COLUMN {
                continue;
            }
            let (_, i) = wanted.iter().find(|(n, _)| n == name).unwrap();
            let raw: Vec<String> = records.iter().map(|r| cell(r, *i)).collect();
            let col = if schema.categorical.contains(name) {
                categorical_from_strings(&raw)
            } else {
                let mut v = Vec::with_capacity(n);
                for (row, s) in raw.iter().enumerate() {
                    v.push(parse_numeric(s, row, name)?);
                }
                Column::Numeric(v)
            };
            covariates.insert(name.clone(), col);
        }
        let states = match state_col {
            Some(i) => {
                let mut v = Vec::with_capacity(n);
                for (row, rec) in records.iter().enumerate() {
                    let s = cell(rec, i);
                    v.push(if is_missing(&s) {
                        None
                    } else {
                        Some(s.parse::<usize>().map_err(|_| Error::Parse {
                            row: row + 1,
                            column: STATE_COLUMN.into(),
                            message: format!("'{s}' is not a positive integer state"),
                        })?)
                    });
                }
                Some(v)
            }
            None => None,
        };
        let mut data = Dataset::with_rows(n, ids, responses, covariates, states)?;
        if let Some(i) = time_col {
            let time: Vec<String> = records.iter().map(|r| cell(r, i)).collect();
            data.check_time_regularity(&time);
            data.time = Some(time);
        }
        Ok(data)
    }

    /// Returns `Some(true)` when every series has equal numeric time steps.
    fn check_time_regularity(&self, time: &[String]) -> Option<bool> {
        let parsed: Option<Vec<f64>> = time.iter().map(|s| s.parse::<f64>().ok()).collect();
        let Some(t) = parsed else {
            log::warn!("'time' column is not numeric; regularity of time steps was not checked");
            return None;
        };
        for r in &self.series {
            let steps: Vec<f64> = t[r.clone()].windows(2).map(|w| w[1] - w[0]).collect();
            if let Some(&first) = steps.first() {
                let scale = first.abs().max(1e-300);
                if steps.iter().any(|s| ((s - first) / scale).abs() > 1e-8) {
                    log::warn!("time intervals are not regular; the 'time' column is ignored");
                    return Some(false);
                }
            }
        }
        Some(true)
    }

    /// Write the dataset as CSV using the same reserved column names it was read with.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = Vec::new();
        if self.has_id {
            header.push(ID_COLUMN.into());
        }
        if self.time.is_some() {
            header.push(TIME_COLUMN.into());
        }
        header.extend(self.responses.keys().cloned());
        header.extend(self.covariates.keys().cloned());
        if self.states.is_some() {
            header.push(STATE_COLUMN.into());
        }
        w.write_record(&header)?;
        for row in 0..self.n_rows() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if self.has_id {
                rec.push(self.labels[self.series_of_row(row)].clone());
            }
            if let Some(t) = &self.time {
                rec.push(t[row].clone());
            }
            for v in self.responses.values() {
                rec.push(v[row].map(fmt17).unwrap_or_else(|| "NA".into()));
            }
            for c in self.covariates.values() {
                rec.push(match c {
                    Column::Numeric(v) => v[row].map(fmt17).unwrap_or_else(|| "NA".into()),
                    Column::Categorical { levels, codes } => {
                        codes[row].map(|k| levels[k].clone()).unwrap_or_else(|| "NA".into())
                    }
                });
            }
            if let Some(s) = &self.states {
                rec.push(s[row].map(|k| (k + 1).to_string()).unwrap_or_else(|| "NA".into()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// The schema that reproduces this dataset when its CSV output is read back.
    pub fn schema(&self) -> Schema {
        Schema {
            responses: self.responses.keys().cloned().collect(),
            covariates: self.covariates.keys().cloned().collect(),
            categorical: self
                .covariates
                .iter()
                .filter(|(_, c)| matches!(c, Column::Categorical { .. }))
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }

    /// Replace missing covariate cells by the last non-missing value of the same
    /// series, or the next one when no earlier value exists. Responses are untouched.
    pub fn fill_covariate_gaps(&self) -> Result<Dataset> {
        let mut out = self.clone();
        for (name, col) in out.covariates.iter_mut() {
            for (label, range) in self.labels.iter().zip(&self.series) {
                let first = range.clone().find(|&r| !col.is_missing(r));
                let Some(first) = first else {
                    return Err(Error::Data(format!(
                        "covariate '{name}' is entirely missing in series '{label}'"
                    )));
                };
                for r in range.start..first {
                    col.copy_cell(first, r);
                }
                for r in first + 1..range.end {
                    if col.is_missing(r) {
                        col.copy_cell(r - 1, r);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-series views, in row order. Concatenating them reproduces the dataset.
    pub fn split_series(&self) -> Vec<SeriesView<'_>> {
        self.labels
            .iter()
            .zip(&self.series)
            .map(|(label, rows)| SeriesView {
                label,
                rows: rows.clone(),
                data: self,
            })
            .collect()
    }

    pub fn n_rows(&self) -> usize {
        self.series.last().map(|r| r.end).unwrap_or(0)
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn series_ranges(&self) -> &[Range<usize>] {
        &self.series
    }

    pub fn series_labels(&self) -> &[String] {
        &self.labels
    }

    pub fn has_id_column(&self) -> bool {
        self.has_id
    }

    pub fn series_of_row(&self, row: usize) -> usize {
        self.series.partition_point(|r| r.end <= row)
    }

    /// Position of `row` within its series, from 0.
    pub fn time_index(&self, row: usize) -> usize {
        row - self.series[self.series_of_row(row)].start
    }

    pub fn responses(&self) -> &IndexMap<String, Vec<Option<f64>>> {
        &self.responses
    }

    pub fn response(&self, name: &str) -> Result<&[Option<f64>]> {
        self.responses
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("response '{name}' not found")))
    }

    pub fn covariates(&self) -> &IndexMap<String, Column> {
        &self.covariates
    }

    /// Look up a covariate. `ID` resolves to the series labels as a factor.
    pub fn covariate(&self, name: &str) -> Result<Column> {
        if let Some(c) = self.covariates.get(name) {
            return Ok(c.clone());
        }
        if name == ID_COLUMN {
            let codes = (0..self.n_rows()).map(|r| Some(self.series_of_row(r))).collect();
            return Ok(Column::Categorical {
                levels: self.labels.clone(),
                codes,
            });
        }
        Err(Error::Data(format!("covariate '{name}' not found")))
    }

    /// Known states, 0-based.
    pub fn known_states(&self) -> Option<&[Option<usize>]> {
        self.states.as_deref()
    }

    pub fn time(&self) -> Option<&[String]> {
        self.time.as_deref()
    }

    /// Response `name` lagged by `lag` steps within each series; the first `lag`
    /// rows of every series are missing.
    pub fn lagged_response(&self, name: &str, lag: usize) -> Result<Vec<Option<f64>>> {
        let z = self.response(name)?;
        let mut out = vec![None; z.len()];
        for r in &self.series {
            for row in r.start + lag..r.end {
                out[row] = z[row - lag];
            }
        }
        Ok(out)
    }

    /// A copy without the known-state column.
    pub fn without_states(&self) -> Dataset {
        let mut out = self.clone();
        out.states = None;
        out
    }

    /// A copy with extra or replaced covariate columns.
    pub fn with_covariate(&self, name: &str, col: Column) -> Result<Dataset> {
        if col.len() != self.n_rows() {
            return Err(Error::Data(format!("covariate '{name}' has the wrong length")));
        }
        let mut out = self.clone();
        out.covariates.insert(name.to_string(), col);
        Ok(out)
    }

    /// A copy with the given responses replaced (or added) and known states set.
    pub fn with_responses(
        &self,
        responses: IndexMap<String, Vec<Option<f64>>>,
        states: Option<Vec<Option<usize>>>,
    ) -> Result<Dataset> {
        let n = self.n_rows();
        if responses.values().any(|v| v.len() != n) {
            return Err(Error::Data("response length mismatch".into()));
        }
        if let Some(s) = &states {
            if s.len() != n {
                return Err(Error::Data("state column length mismatch".into()));
            }
        }
        let mut out = self.clone();
        out.responses = responses;
        out.states = states;
        Ok(out)
    }

    /// Rows `rows` of this dataset, keeping series labels.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let ids: Vec<String> = rows.iter().map(|&r| self.labels[self.series_of_row(r)].clone()).collect();
        let responses = self
            .responses
            .iter()
            .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r]).collect()))
            .collect();
        let covariates = self.covariates.iter().map(|(k, c)| (k.clone(), c.subset(rows))).collect();
        let mut out = Dataset::with_rows(rows.len(), Some(ids), responses, covariates, None)?;
        out.has_id = self.has_id;
        out.states = self.states.as_ref().map(|s| rows.iter().map(|&r| s[r]).collect());
        Ok(out)
    }
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

fn parse_numeric(s: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if is_missing(s) {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        row: row + 1,
        column: column.to_string(),
        message: format!("'{s}' is not a number"),
    })
}

fn categorical_from_strings(raw: &[String]) -> Column {
    let mut levels: Vec<String> = Vec::new();
    let codes = raw
        .iter()
        .map(|s| {
            if is_missing(s) {
                None
            } else if let Some(k) = levels.iter().position(|l| l == s) {
                Some(k)
            } else {
                levels.push(s.clone());
                Some(levels.len() - 1)
            }
        })
        .collect();
    Column::Categorical { levels, codes }
}
