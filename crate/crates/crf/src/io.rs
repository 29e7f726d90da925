//! CSV readers and writers for grouped data, query rows and predictions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crf_core::{Cluster, ClusteredDataset, IntervalEstimate};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty input")]
    Empty,
    #[error("schema: {0}")]
    Schema(String),
    #[error("row {row}: {msg}")]
    Parse { row: u64, msg: String },
    #[error(transparent)]
    Invalid(#[from] crf_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Open { path: path.display().to_string(), source })
}

fn parse_cell(cell: &str, row: u64, column: &str) -> Result<f64, DataError> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| DataError::Parse { row, msg: format!("column {column}: cannot parse {cell:?} as a number") })?;
    if !v.is_finite() {
        return Err(DataError::Parse { row, msg: format!("column {column}: non-finite value {cell:?}") });
    }
    Ok(v)
}

/// Reads `cluster_id,y,x1,...,xd`. Rows are grouped by first appearance of
/// their cluster id and keep file order within a cluster. Row numbers in
/// errors are file line numbers.
pub fn read_dataset<R: Read>(reader: R, expected_dim: Option<usize>) -> Result<ClusteredDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::Empty);
    }
    if headers.len() < 3 || &headers[0] != "cluster_id" || &headers[1] != "y" {
        return Err(DataError::Schema(format!(
            "expected header cluster_id,y,x1,...,xd but found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let d = headers.len() - 2;
    if let Some(e) = expected_dim {
        if e != d {
            return Err(DataError::Schema(format!("file has {d} covariate columns, expected {e}")));
        }
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, expected_len, len } => DataError::Schema(format!(
                "row {}: {len} fields, header has {expected_len}",
                pos.as_ref().map_or(0, |p| p.line())
            )),
            _ => DataError::Csv(e),
        })?;
        if !more {
            break;
        }
        let row = record.position().map_or(0, |p| p.line());
        let id = &record[0];
        if id.is_empty() {
            return Err(DataError::Parse { row, msg: "empty cluster_id".into() });
        }
        let y = parse_cell(&record[1], row, "y")?;
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            clusters.push(Cluster { id: id.to_string(), y: Vec::new(), x: Vec::new() });
            clusters.len() - 1
        });
        let c = &mut clusters[slot];
        c.y.push(y);
        for f in 0..d {
            c.x.push(parse_cell(&record[f + 2], row, &headers[f + 2])?);
        }
    }
    if clusters.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(ClusteredDataset::new(clusters, d)?)
}

pub fn load_dataset(path: &Path, expected_dim: Option<usize>) -> Result<ClusteredDataset, DataError> {
    read_dataset(open(path)?, expected_dim)
}

pub fn write_dataset<W: Write>(writer: W, ds: &ClusteredDataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster_id".to_string(), "y".to_string()];
    header.extend((1..=ds.dim()).map(|f| format!("x{f}")));
    w.write_record(&header)?;
    for c in ds.clusters() {
        for j in 0..c.len() {
            let mut rec = vec![c.id.clone(), c.y[j].to_string()];
            rec.extend(c.row(j, ds.dim()).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, ds: &ClusteredDataset) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Open { path: path.display().to_string(), source })?;
    write_dataset(file, ds)
}

/// Covariate rows, with or without a header line. A first line is a header
/// when any of its cells is not a number.
pub fn read_rows<R: Read>(reader: R, expected_dim: Option<usize>) -> Result<(Vec<f64>, usize), DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    let mut d = None;
    let mut record = csv::StringRecord::new();
    let mut first = true;
    while rdr.read_record(&mut record)? {
        let row = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if record.iter().any(|c| c.parse::<f64>().is_err()) {
                continue;
            }
        }
        match d {
            None => d = Some(record.len()),
            Some(n) if n != record.len() => {
                return Err(DataError::Schema(format!("row {row}: {} fields, expected {n}", record.len())))
            }
            _ => {}
        }
        for (f, cell) in record.iter().enumerate() {
            rows.push(parse_cell(cell, row, &format!("{}", f + 1))?);
        }
    }
    let d = d.ok_or(DataError::Empty)?;
    if let Some(e) = expected_dim {
        if e != d {
            return Err(DataError::Schema(format!("rows have {d} columns, expected {e}")));
        }
    }
    Ok((rows, d))
}

pub fn load_rows(path: &Path, expected_dim: Option<usize>) -> Result<(Vec<f64>, usize), DataError> {
    read_rows(open(path)?, expected_dim)
}

/// Writes `x1..xd,mu_hat`.
pub fn write_predictions<W: Write>(writer: W, rows: &[f64], d: usize, mu: &[f64]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=d).map(|f| format!("x{f}")).collect();
    header.push("mu_hat".into());
    w.write_record(&header)?;
    for (x, m) in rows.chunks_exact(d).zip(mu) {
        let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
        rec.push(m.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `x1..xd,mu_hat,v_hat,lo,hi`.
pub fn write_intervals<W: Write>(writer: W, rows: &[f64], d: usize, est: &[IntervalEstimate]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=d).map(|f| format!("x{f}")).collect();
    header.extend(["mu_hat", "v_hat", "lo", "hi"].map(String::from));
    w.write_record(&header)?;
    for (x, e) in rows.chunks_exact(d).zip(est) {
        let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
        rec.extend([e.point, e.variance, e.lo, e.hi].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
