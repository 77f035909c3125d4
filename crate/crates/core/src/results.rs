//! Run results as a CSV table plus a JSON-lines log with the same records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::ppt_score;
use crate::train::RunResult;

pub const HEADER: [&str; 7] = [
    "variant",
    "adapter_params",
    "top1",
    "ppt",
    "seed",
    "config_hash",
    "wall_time",
];

/// The JSON-lines companion of a CSV path: same stem, `.jsonl` extension.
pub fn jsonl_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("jsonl")
}

/// Writes `path` (CSV, header first) and its `.jsonl` companion.
pub fn emit_results(results: &[RunResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    csv.write_record(HEADER).map_err(csv_err)?;
    for r in results {
        csv.serialize(r).map_err(csv_err)?;
    }
    csv.flush()?;

    let mut log = BufWriter::new(File::create(jsonl_path(path))?);
    for r in results {
        serde_json::to_writer(&mut log, r).map_err(|e| Error::Results(e.to_string()))?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Results(format!("{other:?}")),
    }
}

fn check(r: RunResult) -> Result<RunResult> {
    let want = ppt_score(r.top1, r.adapter_params);
    if r.ppt != want {
        return Err(Error::Results(format!(
            "row for {} has ppt {} but the score recomputes to {want}",
            r.variant, r.ppt
        )));
    }
    Ok(r)
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?;
    if header.iter().ne(HEADER) {
        return Err(Error::Results(format!("unexpected header {header:?}")));
    }
    rdr.deserialize()
        .map(|r| r.map_err(csv_err).and_then(check))
        .collect()
}

pub fn read_results_jsonl(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|line| {
            let r = serde_json::from_str(&line?).map_err(|e| Error::Results(e.to_string()))?;
            check(r)
        })
        .collect()
}
