use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Conversation, PreferencePair, PromptInstance, RankedRecord};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: expected schema {expected:?}, found {found:?}")]
    Schema { line: usize, expected: &'static str, found: String },
    #[error("line {line}: unsupported schema version {found}")]
    Version { line: usize, found: u32 },
}

/// A record type stored one-per-line with a schema tag.
pub trait JsonlRecord: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;
}

impl JsonlRecord for Conversation {
    const SCHEMA: &'static str = "conversation";
}
impl JsonlRecord for PreferencePair {
    const SCHEMA: &'static str = "pair";
}
impl JsonlRecord for RankedRecord {
    const SCHEMA: &'static str = "ranked";
}
impl JsonlRecord for PromptInstance {
    const SCHEMA: &'static str = "prompt";
}

#[derive(Serialize)]
struct Out<'a, T> {
    schema: &'static str,
    v: u32,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct Header {
    schema: String,
    v: u32,
}

pub fn to_jsonl_line<T: JsonlRecord>(record: &T) -> String {
    serde_json::to_string(&Out { schema: T::SCHEMA, v: SCHEMA_VERSION, record }).expect("records serialize")
}

pub fn write_jsonl<T: JsonlRecord>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        w.write_all(to_jsonl_line(r).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_jsonl_line<T: JsonlRecord>(text: &str, line: usize) -> Result<T, JsonlError> {
    let parse_err = |e: serde_json::Error| JsonlError::Parse { line, msg: e.to_string() };
    let header: Header = serde_json::from_str(text).map_err(parse_err)?;
    if header.schema != T::SCHEMA {
        return Err(JsonlError::Schema { line, expected: T::SCHEMA, found: header.schema });
    }
    if header.v != SCHEMA_VERSION {
        return Err(JsonlError::Version { line, found: header.v });
    }
    serde_json::from_str(text).map_err(parse_err)
}

/// Reads every non-blank line; errors carry the 1-based line number.
pub fn read_jsonl<T: JsonlRecord>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_jsonl_line(&line, i + 1)?);
    }
    Ok(out)
}
