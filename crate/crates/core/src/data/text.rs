use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationDataset {
    pub vocab: usize,
    pub classes: usize,
    pub items: Vec<LabeledSequence>,
    /// Records dropped while loading (empty token lists).
    pub rejected: usize,
}

#[derive(Deserialize)]
struct Header {
    vocab: usize,
    classes: usize,
}

/// Read one record per line. An optional first line
/// `{"vocab": V, "classes": C}` fixes the vocabulary and class counts;
/// otherwise both are inferred as the largest id plus one.
pub fn load_jsonl_classification(path: &Path) -> Result<ClassificationDataset, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut header: Option<Header> = None;
    let mut items = Vec::new();
    let mut rejected = 0;
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if k == 0 && value.get("tokens").is_none() && value.get("vocab").is_some() {
            header = Some(
                serde_json::from_value(value).map_err(|e| parse_err(format!("bad header: {e}")))?,
            );
            continue;
        }
        let rec: LabeledSequence =
            serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        if rec.tokens.is_empty() {
            rejected += 1;
            continue;
        }
        if let Some(h) = &header {
            if rec.label >= h.classes {
                return Err(parse_err(format!(
                    "label {} outside {} classes",
                    rec.label, h.classes
                )));
            }
            if let Some(&t) = rec.tokens.iter().find(|&&t| t >= h.vocab) {
                return Err(parse_err(format!(
                    "token {t} outside vocabulary of {}",
                    h.vocab
                )));
            }
        }
        items.push(rec);
    }
    let (vocab, classes) = match header {
        Some(h) => (h.vocab, h.classes),
        None => (
            items
                .iter()
                .flat_map(|s| s.tokens.iter())
                .max()
                .map_or(0, |m| m + 1),
            items.iter().map(|s| s.label).max().map_or(0, |m| m + 1),
        ),
    };
    Ok(ClassificationDataset {
        vocab,
        classes,
        items,
        rejected,
    })
}

/// Write a dataset with a header line.
pub fn write_jsonl_classification(
    path: &Path,
    ds: &ClassificationDataset,
) -> Result<(), DataError> {
    let mut out = Vec::new();
    writeln!(
        out,
        "{}",
        serde_json::json!({"vocab": ds.vocab, "classes": ds.classes})
    )
    .expect("vec write");
    for item in &ds.items {
        writeln!(
            out,
            "{}",
            serde_json::to_string(item).expect("serializable")
        )
        .expect("vec write");
    }
    fs::write(path, out).map_err(io_err(path))
}
