//! One-sample-per-file CSV alternative to EMB1: `n` lines of `d`
//! comma-separated values, with the label in a sidecar file.

use std::fs;
use std::path::{Path, PathBuf};

use super::TokenMatrix;
use crate::error::{Result, WsError};

pub fn label_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".label");
    PathBuf::from(os)
}

pub fn parse_sample(text: &str) -> Result<TokenMatrix> {
    let mut values = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|e| WsError::Config {
                    line: lineno + 1,
                    msg: format!("bad number {t:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        match d {
            None => d = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(WsError::DimMismatch(format!(
                    "line {} has {} columns, expected {d}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        n += 1;
    }
    TokenMatrix::from_row_major(n, d.unwrap_or(0), &values)
}

pub fn format_sample(x: &TokenMatrix) -> String {
    let mut out = String::new();
    for row in x.values().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Reads a sample and its optional sidecar label.
pub fn read_sample(path: impl AsRef<Path>) -> Result<(TokenMatrix, Option<i8>)> {
    let path = path.as_ref();
    let x = parse_sample(&fs::read_to_string(path)?)?;
    let label_file = label_path(path);
    let label = if label_file.exists() {
        let raw = fs::read_to_string(&label_file)?;
        let v: i64 = raw
            .trim()
            .parse()
            .map_err(|_| WsError::InvalidConfig(format!("bad label file {}", label_file.display())))?;
        if v != 1 && v != -1 {
            return Err(WsError::BadLabel(v));
        }
        Some(v as i8)
    } else {
        None
    };
    Ok((x, label))
}

pub fn write_sample(path: impl AsRef<Path>, x: &TokenMatrix, label: Option<i8>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_sample(x))?;
    if let Some(label) = label {
        fs::write(label_path(path), format!("{label}\n"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_context;

    #[test]
    fn csv_round_trip_with_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let x = synth_context(3, 4, 2);
        write_sample(&path, &x, Some(-1)).unwrap();
        let (back, label) = read_sample(&path).unwrap();
        assert_eq!(back, x);
        assert_eq!(label, Some(-1));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(matches!(parse_sample("1,2\n3\n"), Err(WsError::DimMismatch(_))));
    }
}
