//! File formats: CSV matrices and datasets, the Γ table, and JSON helpers.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file reloads to bit-identical values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{default_names, Category, Dataset, Pair, Task};
use crate::error::{Error, Result};
use crate::fdr::{InteractionScoreSet, ScoreEntry};
use crate::knockoffs::AugmentedDataset;

pub const RESPONSE_COLUMN: &str = "y";
const KNOCKOFF_SUFFIX: &str = "_ko";

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Header plus rows of numbers.
pub fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an all-numeric CSV. Empty or `NA`/`NaN` cells are reported as
/// missing, by 1-based data row.
pub fn read_table(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    let mut n = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                row + 1,
                rec.len(),
                header.len()
            )));
        }
        let mut row_missing = false;
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if is_missing(cell) {
                row_missing = true;
                values.push(f64::NAN);
                continue;
            }
            values.push(cell.parse::<f64>().map_err(|_| {
                Error::Parse(format!("{}: row {} column {:?}: {cell:?} is not a number", path.display(), row + 1, header[c]))
            })?);
        }
        if row_missing {
            missing.push(row + 1);
        }
        n += 1;
    }
    if !missing.is_empty() {
        return Err(Error::MissingValues { rows: missing });
    }
    Ok((header.clone(), DMatrix::from_row_slice(n, header.len(), &values)))
}

pub(crate) fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

fn matrix_rows(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..m.nrows()).map(move |r| m.row(r).iter().copied().collect())
}

/// `x1..xP,y`.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut header = data.feature_names.clone();
    header.push(RESPONSE_COLUMN.into());
    let rows = (0..data.n_samples()).map(|r| {
        let mut row: Vec<f64> = data.x.row(r).iter().copied().collect();
        row.push(data.y[r]);
        row
    });
    write_table(path, &header, rows)
}

/// Reads a numeric dataset whose response column is `response`.
pub fn read_dataset(path: &Path, response: &str, task: Task) -> Result<Dataset> {
    let (header, m) = read_table(path)?;
    let yc = header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| Error::Parse(format!("{}: no response column {response:?}", path.display())))?;
    let keep: Vec<usize> = (0..header.len()).filter(|&c| c != yc).collect();
    let x = DMatrix::from_fn(m.nrows(), keep.len(), |r, c| m[(r, keep[c])]);
    let names = keep.iter().map(|&c| header[c].clone()).collect();
    Dataset::new(names, x, m.column(yc).iter().copied().collect(), task)
}

/// Knockoff columns `x1_ko..xP_ko` (suffix applied to the source names).
pub fn write_knockoffs(path: &Path, names: &[String], x_tilde: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = names.iter().map(|n| format!("{n}{KNOCKOFF_SUFFIX}")).collect();
    write_table(path, &header, matrix_rows(x_tilde))
}

pub fn read_knockoffs(path: &Path) -> Result<DMatrix<f64>> {
    Ok(read_table(path)?.1)
}

/// Originals, then knockoffs, then `y`.
pub fn write_augmented(path: &Path, aug: &AugmentedDataset, names: Option<&[String]>) -> Result<()> {
    let p = aug.p();
    let base = names.map(|n| n.to_vec()).unwrap_or_else(|| default_names(p));
    let mut header = base.clone();
    header.extend(base.iter().map(|n| format!("{n}{KNOCKOFF_SUFFIX}")));
    header.push(RESPONSE_COLUMN.into());
    let rows = (0..aug.n_samples()).map(|r| {
        let mut row: Vec<f64> = aug.columns.row(r).iter().copied().collect();
        row.push(aug.response[r]);
        row
    });
    write_table(path, &header, rows)
}

/// Reads an augmented file; the last column is the response and the rest
/// must split evenly into originals and `_ko` knockoffs.
pub fn read_augmented(path: &Path, task: Task) -> Result<(Vec<String>, AugmentedDataset)> {
    let (header, m) = read_table(path)?;
    if header.last().map(String::as_str) != Some(RESPONSE_COLUMN) || header.len() % 2 == 0 {
        return Err(Error::Parse(format!(
            "{}: expected 2p feature columns followed by {RESPONSE_COLUMN:?}",
            path.display()
        )));
    }
    let p = (header.len() - 1) / 2;
    for j in 0..p {
        if header[p + j] != format!("{}{KNOCKOFF_SUFFIX}", header[j]) {
            return Err(Error::Parse(format!(
                "{}: column {} should be {}{KNOCKOFF_SUFFIX}",
                path.display(),
                header[p + j],
                header[j]
            )));
        }
    }
    let columns = m.columns(0, 2 * p).into_owned();
    let response = m.column(2 * p).iter().copied().collect();
    Ok((header[..p].to_vec(), AugmentedDataset { columns, response, task }))
}

/// `i,j,category,score,weight` with 1-based augmented-column indices.
pub fn write_gamma(path: &Path, gamma: &InteractionScoreSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "category", "score", "weight"])?;
    for e in &gamma.entries {
        w.write_record([
            (e.pair.i + 1).to_string(),
            (e.pair.j + 1).to_string(),
            e.category.as_str().to_string(),
            e.score.to_string(),
            e.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a Γ table; `p` is inferred from the largest index (an OK/KK pair
/// always reaches into the knockoff half).
pub fn read_gamma(path: &Path) -> Result<InteractionScoreSet> {
    let mut r = csv::Reader::from_path(path)?;
    let mut raw = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).map(str::trim).ok_or_else(|| Error::Parse(format!("gamma row {} is short", row + 1)));
        let num = |k: usize| -> Result<f64> {
            field(k)?.parse().map_err(|_| Error::Parse(format!("gamma row {}: bad number", row + 1)))
        };
        let idx = |k: usize| -> Result<usize> {
            match field(k)?.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(Error::Parse(format!("gamma row {}: bad index", row + 1))),
            }
        };
        raw.push((idx(0)?, idx(1)?, Category::parse(field(2)?)?, num(3)?, num(4)?));
    }
    let max_index = raw.iter().map(|r| r.0.max(r.1)).max().unwrap_or(0);
    let p = (max_index + 2) / 2;
    let entries = raw
        .into_iter()
        .map(|(i, j, category, score, weight)| ScoreEntry { pair: Pair::new(i, j), score, category, weight })
        .collect();
    let gamma = InteractionScoreSet { p, entries };
    gamma.validate()?;
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let x = DMatrix::from_fn(5, 3, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0));
        let d = Dataset::new(default_names(3), x, vec![1.0 / 3.0, 2.0, -1e-300, 4.5, 5.0], Task::Regression).unwrap();
        write_dataset(&path, &d).unwrap();
        assert_eq!(read_dataset(&path, "y", Task::Regression).unwrap(), d);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,x2,x3,y\n"));
    }

    #[test]
    fn missing_cells_are_reported_by_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b\n1,2\n,3\n4,NA\n5,6\n").unwrap();
        match read_table(&path) {
            Err(Error::MissingValues { rows }) => assert_eq!(rows, vec![2, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn augmented_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.csv");
        let x = DMatrix::from_fn(4, 2, |r, c| r as f64 * 0.3 + c as f64);
        let xt = DMatrix::from_fn(4, 2, |r, c| r as f64 * 0.7 - c as f64);
        let aug = AugmentedDataset::new(&x, &xt, vec![0.1, 0.2, 0.3, 0.4], Task::Regression).unwrap();
        write_augmented(&path, &aug, None).unwrap();
        let (names, back) = read_augmented(&path, Task::Regression).unwrap();
        assert_eq!(names, vec!["x1", "x2"]);
        assert_eq!(back, aug);
    }

    #[test]
    fn gamma_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let p = 3;
        let entries = (0..6)
            .flat_map(|i| (i + 1..6).map(move |j| Pair::new(i, j)))
            .filter(|pair| !pair.is_self_pair(p))
            .enumerate()
            .map(|(k, pair)| ScoreEntry { pair, score: k as f64 * 0.37 - 1.0, category: pair.category(p), weight: 0.5 + k as f64 / 100.0 })
            .collect();
        let gamma = InteractionScoreSet { p, entries };
        write_gamma(&path, &gamma).unwrap();
        assert_eq!(read_gamma(&path).unwrap(), gamma);
    }
}
