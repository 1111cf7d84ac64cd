//! Datasets, file formats and feature standardization.
//!
//! Tabular files are CSV with header `feature_0,...,feature_{d-1},label` and 1-based labels.
//! Sequence files hold one example per line, `seq_id<TAB>label_string<TAB>features`, where the
//! features of consecutive positions are comma-separated blocks joined by `|`; a label string is
//! either lowercase letters (`a` is state 1) or comma-separated 1-based states. Ranking files are
//! CSV with `feature_*` columns followed by `rank_1..rank_M`, where `rank_i` is the 1-based
//! position of item `i`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{M4nError, Result};
use crate::loss::{Label, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(M4nError::DimensionMismatch { expected: inputs.len(), got: labels.len() });
        }
        let d = inputs.first().map(|x| x.len()).unwrap_or(0);
        if let Some((i, x)) = inputs.iter().enumerate().find(|(_, x)| x.len() != d) {
            return Err(M4nError::InvalidArgument(format!("input {i} has {} features, expected {d}", x.len())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.first().map(|x| x.len()).unwrap_or(0)
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(M4nError::DimensionMismatch { expected: self.inputs.len(), got: self.labels.len() });
        }
        for y in &self.labels {
            task.validate_label(y)?;
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Hex SHA-256 over features and labels; splits are keyed on it.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            for v in x {
                h.update(v.to_le_bytes());
            }
            h.update(y.to_string().as_bytes());
            h.update(b";");
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Smallest task of `kind`'s family that accepts every label.
    pub fn infer_task(&self, format: DataFormat, ordinal: bool) -> Result<TaskSpec> {
        let first = self.labels.first().ok_or_else(|| M4nError::InvalidArgument("empty dataset".into()))?;
        match (format, first) {
            (DataFormat::Tabular, _) => {
                let k = self
                    .labels
                    .iter()
                    .map(|y| match y {
                        Label::Class(c) => *c + 1,
                        _ => 0,
                    })
                    .max()
                    .unwrap_or(0)
                    .max(2);
                if ordinal {
                    TaskSpec::ordinal(k)
                } else {
                    TaskSpec::multiclass(k)
                }
            }
            (DataFormat::Sequence, Label::Sequence(s)) => {
                let states = self
                    .labels
                    .iter()
                    .flat_map(|y| match y {
                        Label::Sequence(s) => s.clone(),
                        _ => vec![],
                    })
                    .max()
                    .unwrap_or(0)
                    + 1;
                TaskSpec::chain(s.len(), states.max(2))
            }
            (DataFormat::Ranking, Label::Permutation(p)) => TaskSpec::ranking(p.len()),
            _ => Err(M4nError::InvalidArgument("labels do not match the data format".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tabular,
    Sequence,
    Ranking,
}

impl DataFormat {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Multiclass { .. } | TaskKind::Ordinal { .. } => DataFormat::Tabular,
            TaskKind::Chain { .. } => DataFormat::Sequence,
            TaskKind::Ranking { .. } => DataFormat::Ranking,
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> M4nError {
    M4nError::Parse { line, message: message.into() }
}

fn parse_float(s: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| parse_err(line, format!("cannot parse {what} '{}' as a number", s.trim())))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what} is not finite")));
    }
    Ok(v)
}

fn parse_index(s: &str, line: usize, what: &str) -> Result<usize> {
    let v: usize = s.trim().parse().map_err(|_| parse_err(line, format!("cannot parse {what} '{}' as a positive integer", s.trim())))?;
    if v == 0 {
        return Err(parse_err(line, format!("{what} must be 1-based, got 0")));
    }
    Ok(v - 1)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r'))).filter(|(_, l)| !l.trim().is_empty())
}

fn check_feature_header(cols: &[&str], line: usize) -> Result<usize> {
    let d = cols.iter().take_while(|c| c.trim().starts_with("feature_")).count();
    for (j, c) in cols[..d].iter().enumerate() {
        if c.trim() != format!("feature_{j}") {
            return Err(parse_err(line, format!("expected column 'feature_{j}', found '{}'", c.trim())));
        }
    }
    if d == 0 {
        return Err(parse_err(line, "header has no feature columns"));
    }
    Ok(d)
}

/// Parses a tabular CSV. With `classes`, labels above it are rejected.
pub fn parse_tabular(text: &str, classes: Option<usize>) -> Result<Dataset> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = check_feature_header(&cols, hl)?;
    if cols.len() != d + 1 || cols[d].trim() != "label" {
        return Err(parse_err(hl, "header must end with a single 'label' column"));
    }
    let mut ds = Dataset::default();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(parse_err(ln, format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        let x = fields[..d].iter().map(|f| parse_float(f, ln, "feature")).collect::<Result<Vec<_>>>()?;
        let c = parse_index(fields[d], ln, "label")?;
        if let Some(k) = classes {
            if c >= k {
                return Err(parse_err(ln, format!("label {} outside 1..={k}", c + 1)));
            }
        }
        ds.inputs.push(x);
        ds.labels.push(Label::Class(c));
    }
    Ok(ds)
}

fn parse_label_string(s: &str, line: usize) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Err(parse_err(line, "empty label string"));
    }
    if s.chars().all(|c| c.is_ascii_lowercase()) {
        Ok(s.bytes().map(|b| (b - b'a') as usize).collect())
    } else {
        s.split(',').map(|t| parse_index(t, line, "state")).collect()
    }
}

/// Parses a sequence TSV; every sequence must have the same length.
pub fn parse_sequences(text: &str) -> Result<(Vec<String>, Dataset)> {
    let mut ids = Vec::new();
    let mut ds = Dataset::default();
    let mut shape: Option<(usize, usize)> = None;
    for (ln, line) in content_lines(text) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(ln, format!("expected 3 tab-separated fields, found {}", parts.len())));
        }
        let states = parse_label_string(parts[1], ln)?;
        let blocks: Vec<&str> = parts[2].split('|').collect();
        if blocks.len() != states.len() {
            return Err(parse_err(ln, format!("{} feature blocks for a label of length {}", blocks.len(), states.len())));
        }
        let mut x = Vec::new();
        let mut width = None;
        for b in blocks {
            let fs = b.split(',').map(|f| parse_float(f, ln, "feature")).collect::<Result<Vec<_>>>()?;
            if *width.get_or_insert(fs.len()) != fs.len() {
                return Err(parse_err(ln, "feature blocks have different widths"));
            }
            x.extend(fs);
        }
        let this = (states.len(), width.unwrap_or(0));
        if *shape.get_or_insert(this) != this {
            let (m, w) = shape.unwrap_or_default();
            return Err(parse_err(ln, format!("sequence shape {:?} differs from the first one ({m}, {w})", this)));
        }
        ids.push(parts[0].to_string());
        ds.inputs.push(x);
        ds.labels.push(Label::Sequence(states));
    }
    Ok((ids, ds))
}

/// Parses a ranking CSV.
pub fn parse_ranking(text: &str) -> Result<Dataset> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = check_feature_header(&cols, hl)?;
    let m = cols.len() - d;
    if m < 2 {
        return Err(parse_err(hl, "need at least two rank columns"));
    }
    for (j, c) in cols[d..].iter().enumerate() {
        if c.trim() != format!("rank_{}", j + 1) {
            return Err(parse_err(hl, format!("expected column 'rank_{}', found '{}'", j + 1, c.trim())));
        }
    }
    let mut ds = Dataset::default();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + m {
            return Err(parse_err(ln, format!("expected {} fields, found {}", d + m, fields.len())));
        }
        let x = fields[..d].iter().map(|f| parse_float(f, ln, "feature")).collect::<Result<Vec<_>>>()?;
        let p = fields[d..].iter().map(|f| parse_index(f, ln, "rank")).collect::<Result<Vec<_>>>()?;
        let mut seen = vec![false; m];
        for &r in &p {
            if r >= m || seen[r] {
                return Err(parse_err(ln, format!("ranks do not form a permutation of 1..={m}")));
            }
            seen[r] = true;
        }
        ds.inputs.push(x);
        ds.labels.push(Label::Permutation(p));
    }
    Ok(ds)
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn join_indices(xs: &[usize]) -> String {
    xs.iter().map(|v| (v + 1).to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_tabular(ds: &Dataset) -> String {
    let d = ds.feature_dim();
    let mut out = (0..d).map(|j| format!("feature_{j},")).collect::<String>();
    out.push_str("label\n");
    for (x, y) in ds.inputs.iter().zip(&ds.labels) {
        let c = match y {
            Label::Class(c) => c + 1,
            _ => 0,
        };
        let _ = writeln!(out, "{},{c}", join_floats(x));
    }
    out
}

/// Writes a sequence TSV; each input is split evenly into one block per position.
pub fn write_sequences(ds: &Dataset, ids: Option<&[String]>) -> String {
    let mut out = String::new();
    for (i, (x, y)) in ds.inputs.iter().zip(&ds.labels).enumerate() {
        let Label::Sequence(s) = y else { continue };
        let width = x.len() / s.len().max(1);
        let blocks: Vec<String> = x.chunks(width.max(1)).map(join_floats).collect();
        let id = ids.map(|v| v[i].clone()).unwrap_or_else(|| format!("s{i}"));
        let _ = writeln!(out, "{id}\t{}\t{}", join_indices(s), blocks.join("|"));
    }
    out
}

pub fn write_ranking(ds: &Dataset) -> String {
    let d = ds.feature_dim();
    let m = match ds.labels.first() {
        Some(Label::Permutation(p)) => p.len(),
        _ => 0,
    };
    let mut cols: Vec<String> = (0..d).map(|j| format!("feature_{j}")).collect();
    cols.extend((1..=m).map(|j| format!("rank_{j}")));
    let mut out = cols.join(",");
    out.push('\n');
    for (x, y) in ds.inputs.iter().zip(&ds.labels) {
        let Label::Permutation(p) = y else { continue };
        let _ = writeln!(out, "{},{}", join_floats(x), join_indices(p));
    }
    out
}

pub fn write_dataset(ds: &Dataset, format: DataFormat) -> String {
    match format {
        DataFormat::Tabular => write_tabular(ds),
        DataFormat::Sequence => write_sequences(ds, None),
        DataFormat::Ranking => write_ranking(ds),
    }
}

pub fn parse_dataset(text: &str, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Tabular => parse_tabular(text, None),
        DataFormat::Sequence => parse_sequences(text).map(|(_, ds)| ds),
        DataFormat::Ranking => parse_ranking(text),
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| M4nError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_dataset(&text, format)
}

/// Per-feature affine map to zero mean and unit variance, fitted on one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.feature_dim();
        let n = ds.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in &ds.inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in &ds.inputs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // constant features are centered but left unscaled
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let inputs = ds
            .inputs
            .iter()
            .map(|x| x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        Dataset { inputs, labels: ds.labels.clone() }
    }
}
