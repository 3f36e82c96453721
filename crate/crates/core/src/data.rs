//! Line-oriented, tab-separated UTF-8 data files.
//!
//! Token id lists are space-separated integers. Lines starting with `#` are
//! header/provenance lines and are kept verbatim; blank lines are skipped.
//!
//! | file      | columns                                                         |
//! |-----------|-----------------------------------------------------------------|
//! | corpus    | `doc_id  tokens  surface_text`                                  |
//! | triples   | `query_id  query_tokens  teacher_query_tokens  pos_id  neg_id` |
//! | parallel  | `pair_id  english_tokens  foreign_tokens`                       |
//! | eval      | `query_id  query_tokens  english_tokens  answers`               |
//!
//! Optional token columns may be empty. Eval answers are separated by
//! ` | `.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::retrieval::{DocumentRecord, EvalExample};
use crate::trainer::{ParallelText, Triple};

pub const ANSWER_SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRecord {
    pub query_id: String,
    pub query_tokens: Vec<u32>,
    pub query_tokens_teacher: Option<Vec<u32>>,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub pair_id: String,
    pub english_tokens: Vec<u32>,
    pub non_english_tokens: Vec<u32>,
}

impl ParallelPair {
    pub fn to_text(&self) -> ParallelText {
        ParallelText {
            english: self.english_tokens.clone(),
            foreign: self.non_english_tokens.clone(),
        }
    }
}

/// A record type that occupies one TSV line.
pub trait TsvRecord: Sized {
    const COLUMNS: usize;
    /// Uniqueness key; a second record with the same key is rejected.
    fn key(&self) -> String;
    fn parse(fields: &[&str]) -> std::result::Result<Self, String>;
    fn to_fields(&self) -> Vec<String>;
}

pub fn parse_tokens(field: &str) -> std::result::Result<Vec<u32>, String> {
    field
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| format!("bad token id `{t}`")))
        .collect()
}

pub fn format_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn required_tokens(field: &str, what: &str) -> std::result::Result<Vec<u32>, String> {
    let t = parse_tokens(field)?;
    if t.is_empty() {
        return Err(format!("{what} is empty"));
    }
    Ok(t)
}

fn optional_tokens(field: &str) -> std::result::Result<Option<Vec<u32>>, String> {
    let t = parse_tokens(field)?;
    Ok((!t.is_empty()).then_some(t))
}

fn id(field: &str, what: &str) -> std::result::Result<String, String> {
    let f = field.trim();
    if f.is_empty() {
        return Err(format!("{what} is empty"));
    }
    Ok(f.to_string())
}

impl TsvRecord for DocumentRecord {
    const COLUMNS: usize = 3;

    fn key(&self) -> String {
        self.doc_id.clone()
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        DocumentRecord::new(id(f[0], "doc_id")?, required_tokens(f[1], "token list")?, f[2])
            .map_err(|e| e.to_string())
    }

    fn to_fields(&self) -> Vec<String> {
        vec![self.doc_id.clone(), format_tokens(&self.token_ids), self.surface_text.clone()]
    }
}

impl TsvRecord for TripleRecord {
    const COLUMNS: usize = 5;

    fn key(&self) -> String {
        format!("{}/{}/{}", self.query_id, self.positive, self.negative)
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        Ok(TripleRecord {
            query_id: id(f[0], "query_id")?,
            query_tokens: required_tokens(f[1], "query")?,
            query_tokens_teacher: optional_tokens(f[2])?,
            positive: id(f[3], "positive doc id")?,
            negative: id(f[4], "negative doc id")?,
        })
    }

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.query_id.clone(),
            format_tokens(&self.query_tokens),
            self.query_tokens_teacher.as_deref().map(format_tokens).unwrap_or_default(),
            self.positive.clone(),
            self.negative.clone(),
        ]
    }
}

impl TsvRecord for ParallelPair {
    const COLUMNS: usize = 3;

    fn key(&self) -> String {
        self.pair_id.clone()
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        Ok(ParallelPair {
            pair_id: id(f[0], "pair_id")?,
            english_tokens: required_tokens(f[1], "English side")?,
            non_english_tokens: required_tokens(f[2], "non-English side")?,
        })
    }

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.pair_id.clone(),
            format_tokens(&self.english_tokens),
            format_tokens(&self.non_english_tokens),
        ]
    }
}

impl TsvRecord for EvalExample {
    const COLUMNS: usize = 4;

    fn key(&self) -> String {
        self.query_id.clone()
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        let gold_answers: Vec<String> = f[3]
            .split(ANSWER_SEPARATOR.trim())
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty())
            .collect();
        if gold_answers.is_empty() {
            return Err("no gold answers".into());
        }
        Ok(EvalExample {
            query_id: id(f[0], "query_id")?,
            query_tokens: required_tokens(f[1], "query")?,
            english_tokens: optional_tokens(f[2])?,
            gold_answers,
        })
    }

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.query_id.clone(),
            format_tokens(&self.query_tokens),
            self.english_tokens.as_deref().map(format_tokens).unwrap_or_default(),
            self.gold_answers.join(ANSWER_SEPARATOR),
        ]
    }
}

/// Records of one file plus its `#` header lines (without the `#`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvFile<T> {
    pub header: Vec<String>,
    pub records: Vec<T>,
}

impl<T> TsvFile<T> {
    pub fn new(records: Vec<T>) -> Self {
        TsvFile {
            header: Vec::new(),
            records,
        }
    }
}

pub fn load<T: TsvRecord>(path: &Path) -> Result<TsvFile<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(BufReader::new(file), path)
}

/// Streams records from `reader`; `path` is used for diagnostics only.
pub fn read_from<T: TsvRecord>(reader: impl BufRead, path: &Path) -> Result<TsvFile<T>> {
    let mut header = Vec::new();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if let Some(h) = line.strip_prefix('#') {
            header.push(h.trim_start().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if fields.len() != T::COLUMNS {
            return Err(parse_err(format!(
                "expected {} tab-separated fields, found {}",
                T::COLUMNS,
                fields.len()
            )));
        }
        let record = T::parse(&fields).map_err(parse_err)?;
        let key = record.key();
        if !seen.insert(key.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: key,
            });
        }
        records.push(record);
    }
    Ok(TsvFile { header, records })
}

pub fn save<T: TsvRecord>(path: &Path, file: &TsvFile<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_to(&mut w, file).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_to<T: TsvRecord>(w: &mut impl Write, file: &TsvFile<T>) -> std::io::Result<()> {
    for h in &file.header {
        writeln!(w, "# {h}")?;
    }
    for r in &file.records {
        let fields = r.to_fields();
        debug_assert!(fields.iter().all(|f| !f.contains('\t') && !f.contains('\n')));
        writeln!(w, "{}", fields.join("\t"))?;
    }
    Ok(())
}

/// Turns triple records into trainer triples indexing `corpus`.
pub fn resolve_triples(records: &[TripleRecord], corpus: &[DocumentRecord]) -> Result<(Vec<Vec<u32>>, Vec<Triple>)> {
    let position: HashMap<&str, usize> = corpus
        .iter()
        .enumerate()
        .map(|(i, d)| (d.doc_id.as_str(), i))
        .collect();
    let lookup = |id: &str| {
        position
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownDocument(id.to_string()))
    };
    let triples = records
        .iter()
        .map(|r| {
            Ok(Triple {
                query: r.query_tokens.clone(),
                teacher_query: r.query_tokens_teacher.clone(),
                positive: lookup(&r.positive)?,
                negative: lookup(&r.negative)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let docs = corpus.iter().map(|d| d.token_ids.clone()).collect();
    Ok((docs, triples))
}
