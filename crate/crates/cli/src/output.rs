use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use latentlab_core::datasets::{format_f64, write_corpus, write_csv, write_seq};
use latentlab_core::datasets::Dataset;
use latentlab_core::lda::Corpus;
use latentlab_core::sequential::Sequence;
use latentlab_core::Mat;

use crate::error::CliResult;
use crate::model::{Table, Trace};

/// Generated or sampled observations in their family's file format.
pub enum Observations {
    Matrix(Mat),
    /// Integer codes, one row per observation.
    Codes(Vec<Vec<usize>>),
    Corpus(Corpus),
    Sequences(Vec<Sequence>),
}

impl Observations {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        match self {
            Observations::Matrix(m) => write_csv(path, &Dataset::from_mat(m.clone()))?,
            Observations::Codes(rows) => {
                let d = rows.first().map_or(0, Vec::len);
                let header = (0..d).map(|j| format!("x{j}")).collect();
                let body = rows.iter().map(|r| r.iter().map(usize::to_string).collect()).collect();
                write_table(path, &Table { header, rows: body })?;
            }
            Observations::Corpus(c) => write_corpus(path, c)?,
            Observations::Sequences(s) => write_seq(path, s)?,
        }
        Ok(())
    }
}

/// `<path><suffix>`, e.g. `model.json.trace.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_table(path: &Path, table: &Table) -> CliResult<()> {
    let mut out = String::new();
    out.push_str(&table.header.join(","));
    out.push('\n');
    for r in &table.rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &Trace) -> CliResult<()> {
    let rows = trace
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![i.to_string()];
            row.extend(r.iter().map(|&v| format_f64(v)));
            row
        })
        .collect();
    let header = trace.header.iter().map(|s| s.to_string()).collect();
    write_table(path, &Table { header, rows })
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
