//! Exhaustive max-sim retrieval over a pre-encoded corpus, and recall
//! measured within a fixed budget of retrieved tokens.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::late_interaction::maxsim_unchecked;
use crate::tensor::{EmbeddingMatrix, Matrix};

/// Default retrieved-token budget for recall.
pub const DEFAULT_TOKEN_BUDGET: usize = 5000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub token_ids: Vec<u32>,
    pub surface_text: String,
}

impl DocumentRecord {
    /// Checks that the surface text has one whitespace-delimited word per
    /// token id.
    pub fn new(doc_id: impl Into<String>, token_ids: Vec<u32>, surface_text: impl Into<String>) -> Result<Self> {
        let doc = DocumentRecord {
            doc_id: doc_id.into(),
            token_ids,
            surface_text: surface_text.into(),
        };
        let words = doc.surface_text.split_whitespace().count();
        if words != doc.token_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "document `{}` has {} token ids but {words} surface words",
                doc.doc_id,
                doc.token_ids.len()
            )));
        }
        Ok(doc)
    }

    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub query_id: String,
    /// Query in the student's language.
    pub query_tokens: Vec<u32>,
    /// Oracle English rendering, used when evaluating the teacher.
    pub english_tokens: Option<Vec<u32>>,
    pub gold_answers: Vec<String>,
}

/// Which rendering of an evaluation query is fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySide {
    Native,
    English,
}

impl EvalExample {
    pub fn query(&self, side: QuerySide) -> Result<&[u32]> {
        match side {
            QuerySide::Native => Ok(&self.query_tokens),
            QuerySide::English => self
                .english_tokens
                .as_deref()
                .ok_or(Error::EmptyInput("evaluation example has no English query")),
        }
    }
}

/// Pre-computed document embeddings tied to the encoder that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    fingerprint: String,
    dim: usize,
    doc_ids: Vec<String>,
    embeddings: Vec<EmbeddingMatrix>,
    /// Free-form provenance lines stored in the file header.
    pub provenance: Vec<String>,
}

impl RetrievalIndex {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embedding(&self, i: usize) -> &EmbeddingMatrix {
        &self.embeddings[i]
    }

    /// Validates the encoder against the stored fingerprint once, so
    /// repeated queries skip the check.
    pub fn searcher<'a>(&'a self, params: &'a EncoderParams) -> Result<Searcher<'a>> {
        let fp = params.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint.clone(),
                encoder: fp,
            });
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        Ok(Searcher { index: self, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(INDEX_MAGIC)?;
        put(&INDEX_VERSION.to_le_bytes())?;
        put(&(self.dim as u64).to_le_bytes())?;
        put(&(self.len() as u64).to_le_bytes())?;
        put_str(&mut put, &self.fingerprint)?;
        put_str(&mut put, &self.provenance.join("\n"))?;
        for (id, emb) in self.doc_ids.iter().zip(&self.embeddings) {
            put_str(&mut put, id)?;
            put(&(emb.tokens() as u64).to_le_bytes())?;
            for v in emb.matrix().as_slice() {
                put(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            path,
        };
        let mut magic = [0u8; 8];
        r.exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(r.format("not an index file"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.format(&format!("unsupported index version {version}")));
        }
        let dim = r.u64()? as usize;
        let count = r.u64()? as usize;
        let fingerprint = r.string()?;
        let provenance_text = r.string()?;
        let provenance = if provenance_text.is_empty() {
            Vec::new()
        } else {
            provenance_text.lines().map(str::to_string).collect()
        };
        let mut doc_ids = Vec::with_capacity(count);
        let mut embeddings = Vec::with_capacity(count);
        for _ in 0..count {
            doc_ids.push(r.string()?);
            let rows = r.u64()? as usize;
            let mut data = Vec::with_capacity(rows * dim);
            for _ in 0..rows * dim {
                data.push(f64::from_bits(r.u64()?));
            }
            let m = Matrix::from_vec(rows, dim, data)?;
            embeddings.push(EmbeddingMatrix::from_unit_rows(m));
        }
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(r.format("trailing bytes after last record"));
        }
        Ok(RetrievalIndex {
            fingerprint,
            dim,
            doc_ids,
            embeddings,
            provenance,
        })
    }
}

const INDEX_MAGIC: &[u8; 8] = b"XLCBIDX\0";
const INDEX_VERSION: u32 = 1;

fn put_str(put: &mut impl FnMut(&[u8]) -> Result<()>, s: &str) -> Result<()> {
    put(&(s.len() as u32).to_le_bytes())?;
    put(s.as_bytes())
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn format(&self, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.format("truncated file")
            } else {
                Error::io(self.path, e)
            }
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut b = vec![0u8; len];
        self.exact(&mut b)?;
        String::from_utf8(b).map_err(|_| self.format("invalid UTF-8 string"))
    }
}

/// Encodes every document with `params`.
pub fn build_index(docs: &[DocumentRecord], params: &EncoderParams, max_doc_tokens: usize) -> Result<RetrievalIndex> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let embeddings = docs
        .par_iter()
        .map(|d| {
            params
                .encode_truncated(&d.token_ids, max_doc_tokens)
                .map_err(|e| Error::Document {
                    doc_id: d.doc_id.clone(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalIndex {
        fingerprint: params.fingerprint(),
        dim: params.out_dim(),
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        embeddings,
        provenance: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

/// An index paired with the encoder it was verified against.
#[derive(Debug, Clone, Copy)]
pub struct Searcher<'a> {
    index: &'a RetrievalIndex,
    params: &'a EncoderParams,
}

impl<'a> Searcher<'a> {
    pub fn index(&self) -> &'a RetrievalIndex {
        self.index
    }

    /// Every document, best first (ties by ascending doc id), as index
    /// positions with scores.
    pub fn rank_all(&self, query: &[u32], max_query_tokens: usize) -> Result<Vec<(usize, f64)>> {
        let q = self.params.encode_truncated(query, max_query_tokens)?;
        let scores: Vec<f64> = self
            .index
            .embeddings
            .par_iter()
            .map(|d| maxsim_unchecked(q.matrix(), d.matrix()))
            .collect();
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        let ids = &self.index.doc_ids;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0])));
        Ok(ranked)
    }

    pub fn search(&self, query: &[u32], k: usize, max_query_tokens: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let mut ranked = self.rank_all(query, max_query_tokens)?;
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .map(|(i, score)| SearchHit {
                doc_id: self.index.doc_ids[i].clone(),
                score,
            })
            .collect())
    }
}

/// Top-`k` documents for a query. Rejects an index built by a different
/// encoder.
pub fn search(
    index: &RetrievalIndex,
    query: &[u32],
    params: &EncoderParams,
    k: usize,
    max_query_tokens: usize,
) -> Result<Vec<SearchHit>> {
    index.searcher(params)?.search(query, k, max_query_tokens)
}

/// Lower-cases and collapses whitespace runs to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// True iff a gold answer appears in the first `budget` whitespace tokens
/// of the retrieved documents, taken in rank order.
///
/// The document that crosses the budget is cut at the last admitted token.
/// Each document is matched on its own, so an answer cannot straddle two
/// passages.
pub fn recall_at_tokens<'t>(
    ranked_texts: impl IntoIterator<Item = &'t str>,
    gold_answers: &[String],
    budget: usize,
) -> bool {
    let answers: Vec<String> = gold_answers
        .iter()
        .map(|a| normalize_text(a))
        .filter(|a| !a.is_empty())
        .collect();
    if answers.is_empty() {
        return false;
    }
    let mut remaining = budget;
    for text in ranked_texts {
        if remaining == 0 {
            break;
        }
        let words: Vec<&str> = text.split_whitespace().take(remaining).collect();
        remaining -= words.len();
        let included = normalize_text(&words.join(" "));
        if answers.iter().any(|a| included.contains(a.as_str())) {
            return true;
        }
    }
    false
}

/// Hit counts for one system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecallSummary {
    pub hits: usize,
    pub total: usize,
}

impl RecallSummary {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.fraction()
    }

    pub fn merge(self, other: RecallSummary) -> RecallSummary {
        RecallSummary {
            hits: self.hits + other.hits,
            total: self.total + other.total,
        }
    }
}

/// Fraction of examples whose answer appears within the token budget.
pub fn evaluate(
    searcher: &Searcher<'_>,
    corpus: &[DocumentRecord],
    examples: &[EvalExample],
    side: QuerySide,
    budget: usize,
    max_query_tokens: usize,
) -> Result<RecallSummary> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let by_id: HashMap<&str, &DocumentRecord> = corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let index = searcher.index();
    let texts: Vec<&str> = index
        .doc_ids()
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|d| d.surface_text.as_str())
                .ok_or_else(|| Error::UnknownDocument(id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut hits = 0;
    for ex in examples {
        if ex.gold_answers.is_empty() {
            return Err(Error::EmptyInput("evaluation example without gold answers"));
        }
        let ranked = searcher.rank_all(ex.query(side)?, max_query_tokens)?;
        if recall_at_tokens(ranked.iter().map(|&(i, _)| texts[i]), &ex.gold_answers, budget) {
            hits += 1;
        }
    }
    Ok(RecallSummary {
        hits,
        total: examples.len(),
    })
}

/// Plain-text `system  R@5kt` table, percentages with one decimal.
pub fn format_report(rows: &[(String, RecallSummary)], budget: usize) -> String {
    let header = format!("R@{}kt", budget as f64 / 1000.0);
    let width = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max("system".len());
    let mut out = format!("{:<width$}  {header}\n", "system");
    for (system, summary) in rows {
        out.push_str(&format!("{system:<width$}  {:.1}\n", summary.percent()));
    }
    out
}
