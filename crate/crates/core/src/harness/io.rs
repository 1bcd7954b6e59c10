use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{HarnessError, Stage};

fn data_err(path: &Path, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::new(Stage::Data, format!("{}: {msg}", path.display()))
}

/// Reads one sample per row. A first row that does not parse as numbers is
/// taken as a header.
pub fn read_dataset_csv(path: &Path) -> Result<DMatrix<f64>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(data_err(path, format!("row {}: {e}", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(data_err(path, "no samples"));
    }
    let m = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != m) {
        return Err(data_err(path, format!("row {} has {} columns, expected {m}", bad + 1, rows[bad].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]))
}

pub fn write_dataset_csv(path: &Path, data: &DMatrix<f64>) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| data_err(path, e))?;
    let header: Vec<String> = (0..data.ncols()).map(|j| format!("x{j}")).collect();
    wtr.write_record(&header).map_err(|e| data_err(path, e))?;
    for row in data.row_iter() {
        wtr.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| data_err(path, e))?;
    }
    wtr.flush().map_err(|e| data_err(path, e))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<bool>, HarnessError> {
    let m = read_dataset_csv(path)?;
    if m.ncols() != 1 {
        return Err(data_err(path, "label file must have a single column"));
    }
    Ok(m.iter().map(|&v| v != 0.0).collect())
}

pub fn write_labels_csv(path: &Path, labels: &[bool]) -> Result<(), HarnessError> {
    let mut text = String::from("label\n");
    for &l in labels {
        text.push_str(if l { "1\n" } else { "0\n" });
    }
    fs::write(path, text).map_err(|e| data_err(path, e))
}

pub fn participant_file(dir: &Path, s: usize) -> PathBuf {
    dir.join(format!("participant_{s:03}.csv"))
}

pub fn labels_file(dir: &Path, s: usize) -> PathBuf {
    dir.join(format!("labels_{s:03}.csv"))
}

/// Participant datasets of a directory written by [`write_dataset_dir`]
/// (`participant_000.csv`, ...), with labels where `labels_000.csv`, ...
/// exist.
pub fn read_dataset_dir(dir: &Path) -> Result<(Vec<DMatrix<f64>>, Option<Vec<Vec<bool>>>), HarnessError> {
    let mut datasets = Vec::new();
    let mut labels = Vec::new();
    let mut all_labeled = true;
    while participant_file(dir, datasets.len()).exists() {
        let s = datasets.len();
        let data = read_dataset_csv(&participant_file(dir, s))?;
        let lf = labels_file(dir, s);
        if lf.exists() {
            let l = read_labels_csv(&lf)?;
            if l.len() != data.nrows() {
                return Err(data_err(&lf, format!("{} labels for {} samples", l.len(), data.nrows())));
            }
            labels.push(l);
        } else {
            all_labeled = false;
        }
        datasets.push(data);
    }
    if datasets.is_empty() {
        return Err(data_err(dir, "no participant_NNN.csv files"));
    }
    let m = datasets[0].ncols();
    if datasets.iter().any(|d| d.ncols() != m) {
        return Err(data_err(dir, "participants disagree on the number of features"));
    }
    Ok((datasets, all_labeled.then_some(labels)))
}

pub fn write_dataset_dir(
    dir: &Path,
    datasets: &[DMatrix<f64>],
    labels: Option<&[Vec<bool>]>,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    for (s, d) in datasets.iter().enumerate() {
        write_dataset_csv(&participant_file(dir, s), d)?;
        if let Some(l) = labels {
            write_labels_csv(&labels_file(dir, s), &l[s])?;
        }
    }
    Ok(())
}
