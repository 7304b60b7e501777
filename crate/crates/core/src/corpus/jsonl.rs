// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::ParallelExample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ReadOptions {
    /// Reject records without `x_en`.
    pub require_x_en: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self { require_x_en: true }
    }
}

/// One record per line, fields in `id, lang, task, x, x_en, y` order.
pub fn write_jsonl(path: &Path, records: &[ParallelExample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole file; any bad line fails the read with its line number.
pub fn read_jsonl(path: &Path, opts: ReadOptions) -> Result<Vec<ParallelExample>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: ParallelExample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if opts.require_x_en && rec.x_en.is_none() {
            return Err(parse_err("missing field `x_en`".into()));
        }
        out.push(rec);
    }
    Ok(out)
}
