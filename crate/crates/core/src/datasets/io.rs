use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::lda::Corpus;
use crate::linalg::Mat;
use crate::rng::RNG_ALGORITHM;
use crate::sequential::Sequence;

/// Schema tag written into every model file.
pub const MODEL_SCHEMA: &str = "latentlab.model/v1";

/// Formats a value with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let t = s.trim();
    t.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("'{t}' is not a number") })
}

pub fn write_csv_to<W: Write>(w: W, data: &Dataset) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(&data.names).map_err(csv_err)?;
    for row in data.values.row_iter() {
        wr.write_record(row.iter().map(|&v| format_f64(v))).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// CSV with a header row of column names and one numeric row per observation.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    write_csv_to(fs::File::create(path)?, data)
}

pub fn read_csv_from<R: Read>(r: R) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let names: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(|s| s.trim().to_string()).collect();
    if names.is_empty() || (names.len() == 1 && names[0].is_empty()) {
        return Err(Error::Parse { line: 1, msg: "missing header row".into() });
    }
    let d = names.len();
    let mut values = Vec::new();
    let mut n = 0;
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d {
            return Err(Error::Parse { line, msg: format!("expected {d} fields, found {}", rec.len()) });
        }
        for field in rec.iter() {
            values.push(parse_f64(field, line)?);
        }
        n += 1;
    }
    Dataset::with_names(names, Mat::from_vec(n, d, values)?)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv_from(fs::File::open(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, msg: format!("{kind:?}") },
    }
}

/// Non-blank lines with their 1-based line numbers, CR stripped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Parses the sequence format: one sequence per line. Without a header the
/// entries are integer symbols; a first line `# dx=<n>` declares continuous
/// sequences whose lines hold flattened `n`-dimensional vectors.
pub fn parse_sequences(text: &str) -> Result<Vec<Sequence>> {
    let mut lines = content_lines(text).peekable();
    let mut dx = None;
    if let Some(&(no, first)) = lines.peek() {
        if let Some(rest) = first.strip_prefix('#') {
            let rest = rest.trim();
            let v = rest
                .strip_prefix("dx=")
                .ok_or_else(|| Error::Parse { line: no, msg: format!("unknown header '{first}'") })?;
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: no, msg: format!("bad dimension '{v}'") })?;
            if n == 0 {
                return Err(Error::Parse { line: no, msg: "dimension must be positive".into() });
            }
            dx = Some(n);
            lines.next();
        }
    }
    let mut out = Vec::new();
    for (no, line) in lines {
        match dx {
            None => {
                let syms = line
                    .split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|_| Error::Parse { line: no, msg: format!("'{t}' is not a symbol index") }))
                    .collect::<Result<Vec<_>>>()?;
                out.push(Sequence::Discrete(syms));
            }
            Some(d) => {
                let vals = line.split_whitespace().map(|t| parse_f64(t, no)).collect::<Result<Vec<_>>>()?;
                if vals.len() % d != 0 {
                    return Err(Error::Parse { line: no, msg: format!("{} values is not a multiple of dx = {d}", vals.len()) });
                }
                out.push(Sequence::Continuous(Mat::from_vec(vals.len() / d, d, vals)?));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("no sequences in input".into()));
    }
    Ok(out)
}

pub fn format_sequences(seqs: &[Sequence]) -> Result<String> {
    let mut s = String::new();
    let dx = match seqs.first() {
        Some(Sequence::Continuous(m)) => Some(m.cols()),
        _ => None,
    };
    if let Some(d) = dx {
        s.push_str(&format!("# dx={d}\n"));
    }
    for seq in seqs {
        let fields: Vec<String> = match (seq, dx) {
            (Sequence::Discrete(v), None) => v.iter().map(usize::to_string).collect(),
            (Sequence::Continuous(m), Some(d)) if m.cols() == d => m.as_slice().iter().map(|&v| format_f64(v)).collect(),
            _ => return Err(Error::InvalidData("sequences must all be discrete or all share one dimension".into())),
        };
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn read_seq(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    parse_sequences(&fs::read_to_string(path)?)
}

pub fn write_seq(path: impl AsRef<Path>, seqs: &[Sequence]) -> Result<()> {
    fs::write(path, format_sequences(seqs)?)?;
    Ok(())
}

/// Parses the corpus format: one document per line of whitespace-separated
/// word indices. The vocabulary size defaults to the largest index plus one.
pub fn parse_corpus(text: &str, vocab_size: Option<usize>) -> Result<Corpus> {
    let mut docs = Vec::new();
    for (no, line) in content_lines(text) {
        let doc = line
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::Parse { line: no, msg: format!("'{t}' is not a word index") }))
            .collect::<Result<Vec<_>>>()?;
        docs.push(doc);
    }
    let v = vocab_size.unwrap_or_else(|| docs.iter().flatten().max().map_or(0, |&m| m + 1));
    Corpus::new(docs, v)
}

pub fn format_corpus(corpus: &Corpus) -> String {
    let mut s = String::new();
    for doc in &corpus.docs {
        let f: Vec<String> = doc.iter().map(usize::to_string).collect();
        s.push_str(&f.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_corpus(path: impl AsRef<Path>, vocab_size: Option<usize>) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?, vocab_size)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    fs::write(path, format_corpus(corpus))?;
    Ok(())
}

/// Versioned model envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: String,
    pub family: String,
    /// Random-number algorithm the model was produced with.
    pub rng: String,
    /// Configuration of the run that produced the model.
    pub config: serde_json::Value,
    pub params: serde_json::Value,
}

impl ModelFile {
    pub fn new(family: &str, config: &impl Serialize, params: &impl Serialize) -> Result<Self> {
        Ok(Self {
            schema: MODEL_SCHEMA.to_string(),
            family: family.to_string(),
            rng: RNG_ALGORITHM.to_string(),
            config: serde_json::to_value(config)?,
            params: serde_json::to_value(params)?,
        })
    }

    pub fn params_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.params.clone())?)
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(text)?;
        if m.schema != MODEL_SCHEMA {
            return Err(Error::InvalidData(format!("unsupported model schema '{}'", m.schema)));
        }
        Ok(m)
    }
}

pub fn write_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    ModelFile::from_json(&fs::read_to_string(path)?)
}
