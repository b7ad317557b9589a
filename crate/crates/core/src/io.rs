//! CSV matrices and atomic file output.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A numeric table with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub data: DMatrix<f64>,
}

impl Table {
    pub fn new(header: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        if header.len() != data.ncols() {
            return Err(Error::DimensionMismatch {
                expected: data.ncols(),
                found: header.len(),
            });
        }
        Ok(Table { header, data })
    }

    /// Columns named `u1, u2, ...`.
    pub fn with_default_header(data: DMatrix<f64>) -> Self {
        let header = (1..=data.ncols()).map(|j| format!("u{j}")).collect();
        Table { header, data }
    }
}

fn csv_error(line: usize, message: impl Into<String>, row: &csv::StringRecord) -> Error {
    Error::Csv {
        line,
        message: message.into(),
        row: row.iter().collect::<Vec<_>>().join(","),
    }
}

/// Parses comma-separated numbers with a header row.
pub fn parse_csv<R: std::io::Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
            row: String::new(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let p = header.len();
    if p == 0 {
        return Err(Error::Csv {
            line: 1,
            message: "empty header".into(),
            row: String::new(),
        });
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |pos| pos.line() as usize),
            message: e.to_string(),
            row: String::new(),
        })?;
        let line = rec.position().map_or(rows + 2, |pos| pos.line() as usize);
        if rec.len() != p {
            return Err(csv_error(line, format!("expected {p} fields, found {}", rec.len()), &rec));
        }
        for field in rec.iter() {
            let x: f64 = field
                .parse()
                .map_err(|_| csv_error(line, format!("not a number: {field:?}"), &rec))?;
            if !x.is_finite() {
                return Err(csv_error(line, format!("non-finite value {field:?}"), &rec));
            }
            values.push(x);
        }
        rows += 1;
    }
    Ok(Table {
        header,
        data: DMatrix::from_row_slice(rows, p, &values),
    })
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let f = fs::File::open(path)?;
    parse_csv(std::io::BufReader::new(f))
}

/// Checks that every entry lies in `[0, 1]`.
pub fn check_unit(data: &DMatrix<f64>) -> Result<()> {
    for i in 0..data.nrows() {
        for j in 0..data.ncols() {
            let x = data[(i, j)];
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Csv {
                    line: i + 2,
                    message: format!("value {x} outside [0, 1]; use --ranks for raw data"),
                    row: data.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
                });
            }
        }
    }
    Ok(())
}

/// Formats a double with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv_string(table: &Table) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&table.header).map_err(io)?;
    for i in 0..table.data.nrows() {
        w.write_record(table.data.row(i).iter().map(|&x| format_f64(x))).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    write_atomic(path, csv_string(table)?.as_bytes())
}
