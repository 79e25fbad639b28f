//! RTTM line format:
//! `SPEAKER <file> 1 <onset:.3f> <duration:.3f> <NA> <NA> <label> <NA> <NA>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Annotation, Turn};

/// Formats one turn as an RTTM line (no trailing newline).
pub fn rttm_line(file_id: &str, turn: &Turn) -> String {
    format!(
        "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
        file_id, turn.onset, turn.duration, turn.speaker
    )
}

/// Writes annotations as an RTTM file, one line per turn.
pub fn write_rttm(annotations: &[Annotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ann in annotations {
        for turn in &ann.turns {
            out.push_str(&rttm_line(&ann.file_id, turn));
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an RTTM file, grouping turns by file id (sorted).
pub fn read_rttm(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_file: BTreeMap<String, Vec<Turn>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 9 || fields[0] != "SPEAKER" {
            return Err(Error::Format(format!(
                "{}:{}: expected 'SPEAKER <file> 1 <onset> <dur> <NA> <NA> <label> <NA> <NA>'",
                path.display(),
                lineno + 1
            )));
        }
        let onset: f64 = fields[3].parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad onset {}", path.display(), lineno + 1, fields[3]))
        })?;
        let duration: f64 = fields[4].parse().map_err(|_| {
            Error::Format(format!(
                "{}:{}: bad duration {}",
                path.display(),
                lineno + 1,
                fields[4]
            ))
        })?;
        by_file
            .entry(fields[1].to_string())
            .or_default()
            .push(Turn::new(onset, duration, fields[7]));
    }
    by_file
        .into_iter()
        .map(|(file_id, turns)| Annotation::new(file_id, turns))
        .collect()
}
