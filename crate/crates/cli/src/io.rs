//! CSV ingestion and atomic result files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use bootstrap_msprt::metrics::SessionRecord;
use serde::Deserialize;
use thiserror::Error;

use crate::error::CliError;

pub const HEADER: [&str; 4] = ["ts", "queries", "successful_queries", "revenue"];

#[derive(Debug, Error, PartialEq)]
pub enum CsvError {
    #[error("missing or wrong header: expected `{}`", HEADER.join(","))]
    MissingHeader,
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("{0}")]
    Io(String),
}

impl From<CsvError> for CliError {
    fn from(e: CsvError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Deserialize)]
struct Row {
    ts: i64,
    queries: u32,
    successful_queries: u32,
    revenue: f64,
}

/// Reads session records in file order.
pub fn read_sessions<R: Read>(reader: R) -> Result<Vec<SessionRecord>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CsvError::Io(e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(CsvError::MissingHeader);
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| CsvError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        let line = out.len() as u64 + 2;
        let rec = SessionRecord::new(row.ts, row.queries, row.successful_queries, row.revenue)
            .map_err(|e| CsvError::MalformedRow { line, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_csv(path: &Path) -> Result<Vec<SessionRecord>, CsvError> {
    let file = fs::File::open(path).map_err(|e| CsvError::Io(format!("{}: {e}", path.display())))?;
    read_sessions(std::io::BufReader::new(file))
}

pub fn sessions_csv(records: &[SessionRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.timestamp.to_string(),
            r.queries.to_string(),
            r.successful_queries.to_string(),
            r.revenue.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// CSV bytes from a header and rows of already formatted cells.
pub fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Result files of one command, held in memory until the command succeeds.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file into `dir` through a temp file and a rename.
    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir)?;
        self.files
            .iter()
            .map(|(name, bytes)| {
                let target = dir.join(name);
                let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
                tmp.write_all(bytes)?;
                tmp.as_file().sync_all()?;
                tmp.persist(&target).map_err(|e| CliError::Io(e.to_string()))?;
                Ok(target)
            })
            .collect()
    }
}
