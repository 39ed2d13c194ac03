use std::fs;
use std::path::Path;

use super::{io_err, DataError};

/// Per-token feature vectors for the kernel prior.
///
/// File format: a header line `<dim> <vocab>`, then `vocab` lines of `dim`
/// whitespace-separated reals; line `k + 2` holds token id `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn get(&self, token: usize) -> Option<&[f64]> {
        self.rows.get(token).map(Vec::as_slice)
    }
}

pub fn load_feature_vectors(path: &Path) -> Result<FeatureTable, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, msg: String| DataError::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg,
    };
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "missing header".into()))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| parse_err(hl, format!("bad header field {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    let [dim, vocab] = nums[..] else {
        return Err(parse_err(hl, "header must be `<dim> <vocab>`".into()));
    };
    let mut rows = Vec::with_capacity(vocab);
    for (ln, line) in lines {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(ln, format!("bad value {s:?}")))
            })
            .collect::<Result<_, _>>()?;
        if v.len() != dim {
            return Err(parse_err(ln, format!("{} values, expected {dim}", v.len())));
        }
        rows.push(v);
    }
    if rows.len() != vocab {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            msg: format!("{} rows, header says {vocab}", rows.len()),
        });
    }
    Ok(FeatureTable { dim, rows })
}

pub fn write_feature_vectors(path: &Path, table: &FeatureTable) -> Result<(), DataError> {
    let mut s = format!("{} {}\n", table.dim, table.rows.len());
    for r in &table.rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}
