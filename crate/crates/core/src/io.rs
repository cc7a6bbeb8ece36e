//! Text formats: logit files, CSV matrices, label lists and `key=value`
//! configs. All readers are strict and report the file (and line, when
//! known) of the first problem.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::composite::LossWeights;
use crate::error::{Error, Result};
use crate::harness::DistillConfig;
use crate::numeric::{LogitMatrix, Matrix};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitFile {
    tokens: usize,
    vocab: usize,
    logits: Vec<Vec<f64>>,
}

fn parse_error(path: &Path, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses `{"tokens": T, "vocab": V, "logits": [[...], ...]}`.
pub fn parse_logit_file(text: &str, path: &Path) -> Result<LogitMatrix> {
    let file: LogitFile =
        serde_json::from_str(text).map_err(|e| parse_error(path, Some(e.line()), e.to_string()))?;
    if file.logits.len() != file.tokens {
        return Err(parse_error(
            path,
            None,
            format!(
                "declared {} tokens but found {} rows",
                file.tokens,
                file.logits.len()
            ),
        ));
    }
    if let Some((i, row)) = file
        .logits
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != file.vocab)
    {
        return Err(parse_error(
            path,
            None,
            format!(
                "row {i} has {} entries, declared vocab is {}",
                row.len(),
                file.vocab
            ),
        ));
    }
    let m = Matrix::from_rows(&file.logits).map_err(|e| parse_error(path, None, e.to_string()))?;
    LogitMatrix::new(m).map_err(|e| parse_error(path, None, e.to_string()))
}

pub fn read_logit_file(path: impl AsRef<Path>) -> Result<LogitMatrix> {
    let path = path.as_ref();
    parse_logit_file(&read_text(path)?, path)
}

pub fn format_logit_file(logits: &Matrix) -> String {
    serde_json::json!({
        "tokens": logits.rows(),
        "vocab": logits.cols(),
        "logits": logits.to_rows(),
    })
    .to_string()
}

/// Headerless comma-separated matrix; every row must have the same width
/// and every entry must be a finite number.
pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let row = record
            .iter()
            .map(|field| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_error(
                    path,
                    line,
                    format!("not a finite number: {field:?}"),
                )),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_error(path, None, "empty matrix"));
    }
    Matrix::from_rows(&rows).map_err(|e| parse_error(path, None, e.to_string()))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    parse_matrix_csv(&read_text(path)?, path)
}

/// One row per line; floats in shortest round-trip form.
pub fn format_matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path.as_ref(), format_matrix_csv(m).as_bytes())
}

/// One non-negative integer per line; blank lines are skipped.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                parse_error(
                    path,
                    Some(i + 1),
                    format!("not a label index: {:?}", l.trim()),
                )
            })
        })
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    parse_labels(&read_text(path)?, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// `key=value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<KeyValue>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            parse_error(
                path,
                Some(i + 1),
                format!("expected key=value, got {line:?}"),
            )
        })?;
        out.push(KeyValue {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

fn with_line(path: &Path, line: usize, e: Error) -> Error {
    match e {
        Error::InvalidConfig(message) | Error::InvalidInput(message) => {
            parse_error(path, Some(line), message)
        }
        other => other,
    }
}

/// Loss weights from a config file: defaults overridden by `alpha`, `beta`,
/// `gamma`, `tau_sl`, `tau_sd`, `k`, `lambda`, `n_iters` (and `match`).
pub fn load_loss_weights(path: impl AsRef<Path>) -> Result<LossWeights> {
    let path = path.as_ref();
    let mut w = LossWeights::default();
    for kv in parse_key_values(&read_text(path)?, path)? {
        match w.set(&kv.key, &kv.value) {
            Ok(true) => {}
            Ok(false) => {
                return Err(parse_error(
                    path,
                    Some(kv.line),
                    format!("unknown key {:?}", kv.key),
                ))
            }
            Err(e) => return Err(with_line(path, kv.line, e)),
        }
    }
    w.validate()
        .map_err(|e| parse_error(path, None, e.to_string()))?;
    Ok(w)
}

pub fn load_distill_config(path: impl AsRef<Path>) -> Result<DistillConfig> {
    let path = path.as_ref();
    let mut cfg = DistillConfig::default();
    for kv in parse_key_values(&read_text(path)?, path)? {
        cfg.set(&kv.key, &kv.value)
            .map_err(|e| with_line(path, kv.line, e))?;
    }
    cfg.validate()
        .map_err(|e| parse_error(path, None, e.to_string()))?;
    Ok(cfg)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: PathBuf::from(path),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
