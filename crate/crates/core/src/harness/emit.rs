//! Plot-ready CSV / JSON-lines output.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    /// `.jsonl` / `.json` select JSON lines; anything else is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json-lines" => Ok(Format::Jsonl),
            other => Err(Error::InvalidConfig(format!("unknown format `{other}`"))),
        }
    }
}

/// One output value. Non-finite floats and `Missing` are written as an
/// empty CSV cell or JSON `null`.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Str(String),
    Int(u64),
    Float(f64),
    Missing,
}

/// A fixed-column output row.
pub trait Row {
    fn columns() -> &'static [&'static str];
    fn cells(&self) -> Vec<Cell>;
}

/// `x` rounded to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn csv_text(c: &Cell) -> String {
    match c {
        Cell::Str(s) => s.clone(),
        Cell::Int(i) => i.to_string(),
        Cell::Float(x) if x.is_finite() => round_sig9(*x).to_string(),
        Cell::Float(_) | Cell::Missing => String::new(),
    }
}

fn json_value(c: &Cell) -> Value {
    match c {
        Cell::Str(s) => Value::String(s.clone()),
        Cell::Int(i) => Value::from(*i),
        Cell::Float(x) => serde_json::Number::from_f64(round_sig9(*x)).map_or(Value::Null, Value::Number),
        Cell::Missing => Value::Null,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::csv(path, e)
}

fn line<R: Row>(row: &R, format: Format) -> Result<String> {
    Ok(match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(row.cells().iter().map(csv_text)).map_err(csv_err(Path::new("<memory>")))?;
            String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 cells")
        }
        Format::Jsonl => {
            let obj: Map<String, Value> = R::columns()
                .iter()
                .zip(row.cells())
                .map(|(k, c)| (k.to_string(), json_value(&c)))
                .collect();
            format!("{}\n", Value::Object(obj))
        }
    })
}

fn header<R: Row>() -> String {
    format!("{}\n", R::columns().join(","))
}

/// Writes `rows` to `path`, replacing any existing file. CSV always gets a
/// header, so an empty list yields a header-only file.
pub fn emit<R: Row>(rows: &[R], path: &Path, format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if format == Format::Csv {
        w.write_all(header::<R>().as_bytes()).map_err(io)?;
    }
    for r in rows {
        w.write_all(line(r, format)?.as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Append-only writer; every row is flushed as soon as it is pushed.
pub struct Sink {
    file: File,
    format: Format,
    path: std::path::PathBuf,
}

impl Sink {
    pub fn create<R: Row>(path: &Path, format: Format) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if format == Format::Csv {
            file.write_all(header::<R>().as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(Sink {
            file,
            format,
            path: path.to_path_buf(),
        })
    }

    pub fn push<R: Row>(&mut self, row: &R) -> Result<()> {
        let text = line(row, self.format)?;
        self.file.write_all(text.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Rows as column-name → text maps; missing values become empty strings.
pub fn read_rows(path: &Path, format: Format) -> Result<Vec<Map<String, Value>>> {
    match format {
        Format::Csv => {
            let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
            let headers = rdr.headers().map_err(csv_err(path))?.clone();
            rdr.records()
                .map(|rec| {
                    let rec = rec.map_err(csv_err(path))?;
                    Ok(headers
                        .iter()
                        .zip(rec.iter())
                        .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
                        .collect())
                })
                .collect()
        }
        Format::Jsonl => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            BufReader::new(file)
                .lines()
                .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .map(|l| {
                    let l = l.map_err(|e| Error::io(path, e))?;
                    match serde_json::from_str(&l)? {
                        Value::Object(m) => Ok(m),
                        other => Err(Error::Checkpoint(format!("expected a JSON object per line, got {other}"))),
                    }
                })
                .collect()
        }
    }
}

pub(crate) fn field_str(row: &Map<String, Value>, key: &str) -> Result<Option<String>> {
    match row.get(key) {
        None => Err(Error::MissingColumn(key.to_string())),
        Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Ok(Some(other.to_string())),
    }
}

pub(crate) fn field_f64(row: &Map<String, Value>, key: &str) -> Result<f64> {
    match field_str(row, key)? {
        None => Ok(f64::NAN),
        Some(s) => s.parse().map_err(|_| Error::NonNumeric {
            row: 0,
            column: key.to_string(),
            value: s,
        }),
    }
}

pub(crate) fn field_u64(row: &Map<String, Value>, key: &str) -> Result<u64> {
    let s = field_str(row, key)?.ok_or_else(|| Error::MissingColumn(key.to_string()))?;
    s.parse().map_err(|_| Error::NonNumeric {
        row: 0,
        column: key.to_string(),
        value: s,
    })
}
