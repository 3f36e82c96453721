//! Seeded synthetic bilingual retrieval world.
//!
//! Two vocabularies share one id space: English tokens are
//! `0..english_vocab`, foreign tokens follow. A token-level "translation"
//! maps English ids to foreign ids. Documents are English only; every
//! query is drawn from a block of its source document (the block also
//! holds the gold answer span), copied into extra positive documents, and
//! then corrupted. Foreign queries and parallel text are token-wise
//! translations in shuffled word order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{self, ParallelPair, TripleRecord, TsvFile};
use crate::error::{Error, Result};
use crate::retrieval::{normalize_text, DocumentRecord, EvalExample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenMapping {
    /// Every English token has exactly one foreign translation.
    Bijective,
    /// As bijective, but each occurrence is replaced by a random foreign
    /// token with the given probability.
    Noisy(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldSpec {
    pub english_vocab: usize,
    pub foreign_vocab: usize,
    pub mapping: TokenMapping,
    pub corpus_size: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub query_len: usize,
    /// Length of the source block the query and answer are drawn from.
    pub block_len: usize,
    pub answer_len: usize,
    /// Probability that a query token is replaced by a random one.
    pub query_noise: f64,
    pub positives_per_query: usize,
    /// Documents that receive only the answer span. Training positives are
    /// drawn from these and the true positives alike, so some labels are
    /// answer-string matches without the query's context.
    pub distractors_per_query: usize,
    pub negatives_per_query: usize,
    pub parallel_pairs: usize,
    pub parallel_len_min: usize,
    pub parallel_len_max: usize,
    /// Shuffle foreign word order relative to English.
    pub reorder: bool,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            english_vocab: 200,
            foreign_vocab: 200,
            mapping: TokenMapping::Noisy(0.1),
            corpus_size: 2000,
            doc_len_min: 20,
            doc_len_max: 60,
            train_queries: 500,
            eval_queries: 200,
            query_len: 8,
            block_len: 12,
            answer_len: 2,
            query_noise: 0.2,
            positives_per_query: 3,
            distractors_per_query: 6,
            negatives_per_query: 100,
            parallel_pairs: 2000,
            parallel_len_min: 6,
            parallel_len_max: 14,
            reorder: true,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn vocab_size(&self) -> usize {
        self.english_vocab + self.foreign_vocab
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.english_vocab == 0 || self.foreign_vocab == 0 {
            return bad("vocabularies must be non-empty");
        }
        if self.english_vocab + self.foreign_vocab > u32::MAX as usize {
            return bad("vocabulary too large");
        }
        match self.mapping {
            TokenMapping::Bijective if self.english_vocab != self.foreign_vocab => {
                return bad("a bijective mapping needs equal vocabulary sizes")
            }
            TokenMapping::Noisy(p) if !(0.0..=1.0).contains(&p) => return bad("mapping noise must lie in [0, 1]"),
            _ => {}
        }
        if self.english_vocab < self.foreign_vocab && matches!(self.mapping, TokenMapping::Noisy(_)) {
            return bad("foreign vocabulary larger than English is not supported");
        }
        if self.doc_len_min == 0 || self.doc_len_min > self.doc_len_max {
            return bad("need 1 <= doc_len_min <= doc_len_max");
        }
        if self.answer_len == 0 || self.query_len == 0 {
            return bad("answer and query lengths must be positive");
        }
        if self.answer_len + self.query_len > self.block_len {
            return bad("block must hold the answer and the query tokens");
        }
        if self.block_len > self.doc_len_min {
            return bad("block longer than the shortest document");
        }
        if !(0.0..=1.0).contains(&self.query_noise) {
            return bad("query noise must lie in [0, 1]");
        }
        if self.positives_per_query == 0 || self.negatives_per_query == 0 {
            return bad("need at least one positive and one negative per query");
        }
        if self.positives_per_query + self.distractors_per_query + self.negatives_per_query > self.corpus_size {
            return bad("corpus too small for the requested positives and negatives");
        }
        if self.train_queries + self.eval_queries == 0 {
            return bad("no queries requested");
        }
        if self.parallel_len_min == 0 || self.parallel_len_min > self.parallel_len_max {
            return bad("need 1 <= parallel_len_min <= parallel_len_max");
        }
        if self.parallel_len_max > self.doc_len_min {
            return bad("parallel sentences must fit in the shortest document");
        }
        Ok(())
    }

    /// Reads every field from `config`, falling back to `self`.
    pub fn with_config(&self, config: &Config) -> Result<Self> {
        let mapping = match config.get("mapping_noise") {
            None => self.mapping,
            Some(_) => {
                let p: f64 = config.get_or("mapping_noise", 0.0)?;
                if p == 0.0 {
                    TokenMapping::Bijective
                } else {
                    TokenMapping::Noisy(p)
                }
            }
        };
        Ok(SyntheticWorldSpec {
            english_vocab: config.get_or("english_vocab", self.english_vocab)?,
            foreign_vocab: config.get_or("foreign_vocab", self.foreign_vocab)?,
            mapping,
            corpus_size: config.get_or("corpus_size", self.corpus_size)?,
            doc_len_min: config.get_or("doc_len_min", self.doc_len_min)?,
            doc_len_max: config.get_or("doc_len_max", self.doc_len_max)?,
            train_queries: config.get_or("train_queries", self.train_queries)?,
            eval_queries: config.get_or("eval_queries", self.eval_queries)?,
            query_len: config.get_or("query_len", self.query_len)?,
            block_len: config.get_or("block_len", self.block_len)?,
            answer_len: config.get_or("answer_len", self.answer_len)?,
            query_noise: config.get_or("query_noise", self.query_noise)?,
            positives_per_query: config.get_or("positives_per_query", self.positives_per_query)?,
            distractors_per_query: config.get_or("distractors_per_query", self.distractors_per_query)?,
            negatives_per_query: config.get_or("negatives_per_query", self.negatives_per_query)?,
            parallel_pairs: config.get_or("parallel_pairs", self.parallel_pairs)?,
            parallel_len_min: config.get_or("parallel_len_min", self.parallel_len_min)?,
            parallel_len_max: config.get_or("parallel_len_max", self.parallel_len_max)?,
            reorder: config.get_or("reorder", self.reorder)?,
            seed: config.get_or("seed", self.seed)?,
        })
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("english_vocab", self.english_vocab);
        c.set("foreign_vocab", self.foreign_vocab);
        c.set(
            "mapping_noise",
            match self.mapping {
                TokenMapping::Bijective => 0.0,
                TokenMapping::Noisy(p) => p,
            },
        );
        c.set("corpus_size", self.corpus_size);
        c.set("doc_len_min", self.doc_len_min);
        c.set("doc_len_max", self.doc_len_max);
        c.set("train_queries", self.train_queries);
        c.set("eval_queries", self.eval_queries);
        c.set("query_len", self.query_len);
        c.set("block_len", self.block_len);
        c.set("answer_len", self.answer_len);
        c.set("query_noise", self.query_noise);
        c.set("positives_per_query", self.positives_per_query);
        c.set("distractors_per_query", self.distractors_per_query);
        c.set("negatives_per_query", self.negatives_per_query);
        c.set("parallel_pairs", self.parallel_pairs);
        c.set("parallel_len_min", self.parallel_len_min);
        c.set("parallel_len_max", self.parallel_len_max);
        c.set("reorder", self.reorder);
        c.set("seed", self.seed);
        c
    }
}

/// Everything a pipeline run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub corpus: Vec<DocumentRecord>,
    /// English queries against English documents.
    pub triples_english: Vec<TripleRecord>,
    /// Foreign queries with their English rendering for the teacher.
    pub triples_cross_lingual: Vec<TripleRecord>,
    pub parallel: Vec<ParallelPair>,
    pub eval: Vec<EvalExample>,
    /// Primary foreign id of every English id.
    pub translation: Vec<u32>,
}

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const TRIPLES_ENGLISH_FILE: &str = "triples_en.tsv";
pub const TRIPLES_CROSS_LINGUAL_FILE: &str = "triples_xl.tsv";
pub const PARALLEL_FILE: &str = "parallel.tsv";
pub const EVAL_FILE: &str = "eval.tsv";
pub const WORLD_FILE: &str = "world.conf";

/// Fixed-width surface word for an English token, so substring matches of
/// rendered text always fall on word boundaries.
pub fn surface_word(token: u32, english_vocab: usize) -> String {
    let width = (english_vocab.max(2) - 1).to_string().len();
    format!("w{token:0width$}")
}

pub fn render(tokens: &[u32], english_vocab: usize) -> String {
    tokens
        .iter()
        .map(|&t| surface_word(t, english_vocab))
        .collect::<Vec<_>>()
        .join(" ")
}

struct QueryDraft {
    english: Vec<u32>,
    foreign: Vec<u32>,
    answer: String,
    positives: Vec<usize>,
    /// Positives as labelled in the training triples.
    labelled: Vec<usize>,
}

struct Generator<'s> {
    spec: &'s SyntheticWorldSpec,
    rng: ChaCha8Rng,
    docs: Vec<Vec<u32>>,
    protected: Vec<Vec<(usize, usize)>>,
    translation: Vec<u32>,
}

impl Generator<'_> {
    fn english_token(&mut self) -> u32 {
        self.rng.random_range(0..self.spec.english_vocab as u32)
    }

    fn translate(&mut self, tokens: &[u32]) -> Vec<u32> {
        let base = self.spec.english_vocab as u32;
        let mut out: Vec<u32> = tokens
            .iter()
            .map(|&t| match self.spec.mapping {
                TokenMapping::Noisy(p) if self.rng.random_bool(p) => {
                    base + self.rng.random_range(0..self.spec.foreign_vocab as u32)
                }
                _ => self.translation[t as usize],
            })
            .collect();
        if self.spec.reorder {
            out.shuffle(&mut self.rng);
        }
        out
    }

    fn free_span(&mut self, doc: usize, len: usize) -> Option<usize> {
        let doc_len = self.docs[doc].len();
        if doc_len < len {
            return None;
        }
        for _ in 0..20 {
            let start = self.rng.random_range(0..=doc_len - len);
            let end = start + len;
            if self.protected[doc].iter().all(|&(a, b)| end <= a || start >= b) {
                return Some(start);
            }
        }
        None
    }

    fn draft_query(&mut self) -> Result<QueryDraft> {
        let spec = self.spec;
        let (source, start) = (0..1000)
            .find_map(|_| {
                let d = self.rng.random_range(0..self.docs.len());
                self.free_span(d, spec.block_len).map(|s| (d, s))
            })
            .ok_or_else(|| Error::InvalidSpec("corpus too crowded to place another query".into()))?;
        let block: Vec<u32> = self.docs[source][start..start + spec.block_len].to_vec();
        self.protected[source].push((start, start + spec.block_len));

        let answer_at = self.rng.random_range(0..=spec.block_len - spec.answer_len);
        let answer = render(&block[answer_at..answer_at + spec.answer_len], spec.english_vocab);
        let mut candidates: Vec<usize> = (0..spec.block_len)
            .filter(|&p| p < answer_at || p >= answer_at + spec.answer_len)
            .collect();
        candidates.shuffle(&mut self.rng);
        let mut picked: Vec<usize> = candidates[..spec.query_len].to_vec();
        picked.sort_unstable();
        let english: Vec<u32> = picked
            .iter()
            .map(|&p| {
                if self.rng.random_bool(spec.query_noise) {
                    self.english_token()
                } else {
                    block[p]
                }
            })
            .collect();
        let foreign = self.translate(&english);

        let mut positives = vec![source];
        let mut attempts = 0;
        while positives.len() < spec.positives_per_query {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidSpec("could not place extra positives".into()));
            }
            let d = self.rng.random_range(0..self.docs.len());
            if positives.contains(&d) {
                continue;
            }
            if let Some(s) = self.free_span(d, spec.block_len) {
                self.docs[d][s..s + spec.block_len].copy_from_slice(&block);
                self.protected[d].push((s, s + spec.block_len));
                positives.push(d);
            }
        }
        let answer_tokens = block[answer_at..answer_at + spec.answer_len].to_vec();
        let mut pool = positives.clone();
        let mut attempts = 0;
        while pool.len() < spec.positives_per_query + spec.distractors_per_query {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidSpec("could not place distractors".into()));
            }
            let d = self.rng.random_range(0..self.docs.len());
            if pool.contains(&d) {
                continue;
            }
            if let Some(s) = self.free_span(d, spec.answer_len) {
                self.docs[d][s..s + spec.answer_len].copy_from_slice(&answer_tokens);
                self.protected[d].push((s, s + spec.answer_len));
                pool.push(d);
            }
        }
        let labelled = if spec.distractors_per_query == 0 {
            positives.clone()
        } else {
            pool.shuffle(&mut self.rng);
            pool.truncate(spec.positives_per_query);
            pool
        };
        Ok(QueryDraft {
            english,
            foreign,
            answer,
            positives,
            labelled,
        })
    }
}

/// Builds a world and verifies it before returning.
pub fn gen_synthetic(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = spec.english_vocab as u32;
    let translation = primary_translation(spec, &mut rng);

    let docs: Vec<Vec<u32>> = (0..spec.corpus_size)
        .map(|_| {
            let len = rng.random_range(spec.doc_len_min..=spec.doc_len_max);
            (0..len).map(|_| rng.random_range(0..base)).collect()
        })
        .collect();
    let mut g = Generator {
        spec,
        rng,
        protected: vec![Vec::new(); docs.len()],
        docs,
        translation,
    };

    let total = spec.train_queries + spec.eval_queries;
    let drafts = (0..total).map(|_| g.draft_query()).collect::<Result<Vec<_>>>()?;

    let corpus = g
        .docs
        .iter()
        .enumerate()
        .map(|(i, toks)| DocumentRecord::new(doc_id(i), toks.clone(), render(toks, spec.english_vocab)))
        .collect::<Result<Vec<_>>>()?;
    let normalized: Vec<String> = corpus.iter().map(|d| normalize_text(&d.surface_text)).collect();

    let mut triples_english = Vec::new();
    let mut triples_cross_lingual = Vec::new();
    let mut eval = Vec::new();
    for (qi, draft) in drafts.iter().enumerate() {
        let answer = normalize_text(&draft.answer);
        if let Some(&bad) = draft.positives.iter().chain(&draft.labelled).find(|&&d| !normalized[d].contains(&answer)) {
            return Err(Error::SelfCheck(format!("positive {} lacks the answer of query {qi}", doc_id(bad))));
        }
        if qi >= spec.train_queries {
            eval.push(EvalExample {
                query_id: format!("e{:05}", qi - spec.train_queries),
                query_tokens: draft.foreign.clone(),
                english_tokens: Some(draft.english.clone()),
                gold_answers: vec![draft.answer.clone()],
            });
            continue;
        }
        let query_id = format!("q{qi:05}");
        let mut negatives = Vec::with_capacity(spec.negatives_per_query);
        let mut used: HashSet<usize> = draft.positives.iter().chain(&draft.labelled).copied().collect();
        let mut attempts = 0;
        while negatives.len() < spec.negatives_per_query {
            attempts += 1;
            if attempts > 100 * spec.corpus_size {
                return Err(Error::InvalidSpec(format!("not enough negatives for query {qi}")));
            }
            let d = g.rng.random_range(0..corpus.len());
            if used.contains(&d) || normalized[d].contains(&answer) {
                continue;
            }
            used.insert(d);
            negatives.push(d);
        }
        for &p in &draft.labelled {
            for &n in &negatives {
                if normalized[n].contains(&answer) {
                    return Err(Error::SelfCheck(format!("negative {} contains the answer of query {qi}", doc_id(n))));
                }
                triples_english.push(TripleRecord {
                    query_id: query_id.clone(),
                    query_tokens: draft.english.clone(),
                    query_tokens_teacher: None,
                    positive: doc_id(p),
                    negative: doc_id(n),
                });
                triples_cross_lingual.push(TripleRecord {
                    query_id: query_id.clone(),
                    query_tokens: draft.foreign.clone(),
                    query_tokens_teacher: Some(draft.english.clone()),
                    positive: doc_id(p),
                    negative: doc_id(n),
                });
            }
        }
    }

    let parallel = (0..spec.parallel_pairs)
        .map(|i| {
            let len = g.rng.random_range(spec.parallel_len_min..=spec.parallel_len_max);
            let doc = g.docs.choose(&mut g.rng).expect("non-empty corpus").clone();
            let start = g.rng.random_range(0..=doc.len() - len);
            let english = doc[start..start + len].to_vec();
            let foreign = g.translate(&english);
            ParallelPair {
                pair_id: format!("p{i:05}"),
                english_tokens: english,
                non_english_tokens: foreign,
            }
        })
        .collect();

    let world = SyntheticWorld {
        spec: spec.clone(),
        corpus,
        triples_english,
        triples_cross_lingual,
        parallel,
        eval,
        translation: g.translation,
    };
    world.self_check()?;
    Ok(world)
}

/// Drawn first from the world seed, so it can be recomputed from `SyntheticWorldSpec` alone.
fn primary_translation(spec: &SyntheticWorldSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let base = spec.english_vocab as u32;
    let mut t: Vec<u32> = (0..base).map(|t| base + t % spec.foreign_vocab as u32).collect();
    t.shuffle(rng);
    t
}

fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

impl SyntheticWorld {
    /// Re-verifies mapping consistency of parallel text (bijective worlds
    /// only) and id uniqueness.
    pub fn self_check(&self) -> Result<()> {
        if self.spec.mapping == TokenMapping::Bijective {
            for p in &self.parallel {
                let mut expect: Vec<u32> = p.english_tokens.iter().map(|&t| self.translation[t as usize]).collect();
                let mut got = p.non_english_tokens.clone();
                expect.sort_unstable();
                got.sort_unstable();
                if expect != got {
                    return Err(Error::SelfCheck(format!("pair {} is not a token-wise translation", p.pair_id)));
                }
            }
        }
        let ids: HashSet<&str> = self.corpus.iter().map(|d| d.doc_id.as_str()).collect();
        if ids.len() != self.corpus.len() {
            return Err(Error::SelfCheck("duplicate document ids".into()));
        }
        Ok(())
    }

    /// Writes all data files plus `world.conf` into `dir`; `header` lines
    /// are echoed at the top of every file.
    pub fn write(&self, dir: &Path, header: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fn with_header<T>(header: &[String], records: Vec<T>) -> TsvFile<T> {
            TsvFile {
                header: header.to_vec(),
                records,
            }
        }
        data::save(&dir.join(CORPUS_FILE), &with_header(header, self.corpus.clone()))?;
        data::save(&dir.join(TRIPLES_ENGLISH_FILE), &with_header(header, self.triples_english.clone()))?;
        data::save(&dir.join(TRIPLES_CROSS_LINGUAL_FILE), &with_header(header, self.triples_cross_lingual.clone()))?;
        data::save(&dir.join(PARALLEL_FILE), &with_header(header, self.parallel.clone()))?;
        data::save(&dir.join(EVAL_FILE), &with_header(header, self.eval.clone()))?;
        let mut conf: String = header.iter().map(|h| format!("# {h}\n")).collect();
        conf.push_str(&self.spec.to_config().to_string());
        let path = dir.join(WORLD_FILE);
        fs::write(&path, conf).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`SyntheticWorld::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let spec = SyntheticWorldSpec::default().with_config(&Config::load(&dir.join(WORLD_FILE))?)?;
        let corpus = data::load(&dir.join(CORPUS_FILE))?.records;
        let parallel: Vec<ParallelPair> = data::load(&dir.join(PARALLEL_FILE))?.records;
        let translation = primary_translation(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
        Ok(SyntheticWorld {
            spec,
            corpus,
            triples_english: data::load(&dir.join(TRIPLES_ENGLISH_FILE))?.records,
            triples_cross_lingual: data::load(&dir.join(TRIPLES_CROSS_LINGUAL_FILE))?.records,
            parallel,
            eval: data::load(&dir.join(EVAL_FILE))?.records,
            translation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            english_vocab: 50,
            foreign_vocab: 50,
            corpus_size: 120,
            doc_len_min: 20,
            doc_len_max: 40,
            train_queries: 20,
            eval_queries: 10,
            mapping: TokenMapping::Bijective,
            positives_per_query: 2,
            distractors_per_query: 1,
            negatives_per_query: 5,
            parallel_pairs: 30,
            seed: 42,
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = SyntheticWorldSpec { seed: 43, ..small() };
        assert_ne!(gen_synthetic(&small()).unwrap().corpus, gen_synthetic(&other).unwrap().corpus);
    }

    #[test]
    fn counts_and_containment() {
        let spec = small();
        let w = gen_synthetic(&spec).unwrap();
        assert_eq!(w.corpus.len(), 120);
        assert_eq!(w.eval.len(), 10);
        assert_eq!(w.triples_english.len(), 20 * 2 * 5);
        assert_eq!(w.triples_cross_lingual.len(), w.triples_english.len());
        assert_eq!(w.parallel.len(), 30);
        let text = |id: &str| {
            normalize_text(&w.corpus.iter().find(|d| d.doc_id == id).unwrap().surface_text)
        };
        for ex in &w.eval {
            assert!(w.corpus.iter().any(|d| normalize_text(&d.surface_text).contains(&normalize_text(&ex.gold_answers[0]))));
        }
        for t in &w.triples_cross_lingual {
            assert!(t.query_tokens.iter().all(|&x| x >= 50 && x < 100));
            assert!(t.query_tokens_teacher.as_ref().unwrap().iter().all(|&x| x < 50));
            assert_ne!(text(&t.positive), text(&t.negative));
        }
    }

    #[test]
    fn bijective_parallel_text_is_exact_translation() {
        let w = gen_synthetic(&small()).unwrap();
        let mut targets: Vec<u32> = w.translation.clone();
        targets.sort_unstable();
        targets.dedup();
        assert_eq!(targets.len(), 50);
        for p in &w.parallel {
            let mut a: Vec<u32> = p.english_tokens.iter().map(|&t| w.translation[t as usize]).collect();
            let mut b = p.non_english_tokens.clone();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn labelled_positives_all_contain_the_answer() {
        let w = gen_synthetic(&SyntheticWorldSpec {
            distractors_per_query: 4,
            ..small()
        })
        .unwrap();
        let text: std::collections::HashMap<&str, String> =
            w.corpus.iter().map(|d| (d.doc_id.as_str(), d.surface_text.clone())).collect();
        let mut by_query: std::collections::HashMap<&str, HashSet<&str>> = Default::default();
        for t in &w.triples_english {
            by_query.entry(t.query_id.as_str()).or_default().insert(t.positive.as_str());
            assert!(!text[t.negative.as_str()].is_empty());
        }
        assert_eq!(by_query.len(), 20);
        assert!(by_query.values().all(|p| p.len() == 2));
    }

    #[test]
    fn noisy_mapping_perturbs_some_tokens() {
        let w = gen_synthetic(&SyntheticWorldSpec {
            mapping: TokenMapping::Noisy(0.5),
            ..small()
        })
        .unwrap();
        let exact = w.parallel.iter().filter(|p| {
            let mut a: Vec<u32> = p.english_tokens.iter().map(|&t| w.translation[t as usize]).collect();
            let mut b = p.non_english_tokens.clone();
            a.sort_unstable();
            b.sort_unstable();
            a == b
        });
        assert!(exact.count() < w.parallel.len());
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            gen_synthetic(&SyntheticWorldSpec { foreign_vocab: 49, ..small() }),
            Err(Error::InvalidSpec(_))
        ));
        assert!(gen_synthetic(&SyntheticWorldSpec { block_len: 5, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticWorldSpec { negatives_per_query: 500, ..small() }).is_err());
    }

    #[test]
    fn write_and_read_back() {
        let w = gen_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write(dir.path(), &["seed = 42".to_string()]).unwrap();
        let back = SyntheticWorld::read(dir.path()).unwrap();
        assert_eq!(back, w);
        let again = tempfile::tempdir().unwrap();
        w.write(again.path(), &["seed = 42".to_string()]).unwrap();
        for f in [CORPUS_FILE, TRIPLES_ENGLISH_FILE, PARALLEL_FILE, EVAL_FILE, WORLD_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn surface_words_have_fixed_width() {
        assert_eq!(surface_word(7, 200), "w007");
        assert_eq!(surface_word(199, 200), "w199");
        assert_eq!(render(&[1, 12], 50), "w01 w12");
    }
}
