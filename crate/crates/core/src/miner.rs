//! Retrieve-then-rerank knowledge mining.
//!
//! BM25 builds candidate pools over serialized source texts. The retriever
//! is a dual encoder scored by a dot product; the reranker is a small
//! cross encoder over `[example; hint; context; question]` with a scalar head.
//! Top reranked hints are joined into the knowledge prompt.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Attention, FeedForward};
use crate::metrics::serialize_instance;
use crate::oracle::{Hint, HintCache, LmOracle, ModelTag, ScoringDistribution};
use crate::params::{Bound, ParamId, ParamSet};
use crate::task_registry::QAInstance;
use crate::text::{tokenize, Vocab, SEP, UNK};
use crate::util::rng_for;
use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const HINT_SEPARATOR: &str = " | ";
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Text both retrieval sides and BM25 see for an instance.
pub fn retrieval_text(instance: &QAInstance) -> String {
    serialize_instance(instance).source_text
}

/// Descending score, then ascending tie key.
fn rank_order(scores: &[f64], keys: &[(String, usize)], candidates: &mut [usize]) {
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| keys[a].cmp(&keys[b]))
    });
}

fn tie_keys(pool: &[QAInstance]) -> Vec<(String, usize)> {
    pool.iter().map(|e| (e.task_id.clone(), e.offset)).collect()
}

/// Okapi BM25 over an immutable document pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<(usize, usize)>>,
    doc_len: Vec<f64>,
    avg_len: f64,
    ids: Vec<String>,
    keys: Vec<(String, usize)>,
}

impl Bm25Index {
    pub fn build(pool: &[QAInstance]) -> Self {
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(pool.len());
        for (d, inst) in pool.iter().enumerate() {
            let toks = tokenize(&retrieval_text(inst));
            doc_len.push(toks.len() as f64);
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((d, n));
            }
        }
        let avg_len = if pool.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<f64>() / pool.len() as f64
        };
        Self {
            postings,
            doc_len,
            avg_len,
            ids: pool.iter().map(QAInstance::id).collect(),
            keys: tie_keys(pool),
        }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every document; repeated query terms count once per occurrence.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * self.doc_len[d] / self.avg_len);
                out[d] += idf * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }
        out
    }

    /// Top `c` documents for `instance`, excluding the instance itself.
    pub fn top(&self, instance: &QAInstance, c: usize) -> Result<Vec<usize>> {
        let own = instance.id();
        let mut docs: Vec<usize> = (0..self.len()).filter(|&d| self.ids[d] != own).collect();
        if docs.len() < c || c == 0 {
            return Err(Error::invalid(format!(
                "candidate pool of {} examples cannot supply {c} candidates for {own}",
                docs.len()
            )));
        }
        let scores = self.scores(&retrieval_text(instance));
        rank_order(&scores, &self.keys, &mut docs);
        docs.truncate(c);
        Ok(docs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Bm25Pool,
    Retrieved,
}

/// Candidate examples for one instance, as indices into the training pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub instance_id: String,
    pub examples: Vec<usize>,
    pub hints: Vec<Option<Hint>>,
    pub scores: BTreeMap<ModelTag, Vec<f64>>,
    pub provenance: Provenance,
}

impl CandidateSet {
    pub fn new(instance_id: String, examples: Vec<usize>, provenance: Provenance) -> Self {
        let n = examples.len();
        Self {
            instance_id,
            examples,
            hints: vec![None; n],
            scores: BTreeMap::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Uniform subsample of `k` candidates, keeping their original order.
    pub fn subsample(&self, k: usize, seed: u64, label: &str) -> CandidateSet {
        if k >= self.len() {
            return self.clone();
        }
        let mut rng = rng_for(seed, label);
        let mut picked = sample(&mut rng, self.len(), k).into_vec();
        picked.sort_unstable();
        CandidateSet {
            instance_id: self.instance_id.clone(),
            examples: picked.iter().map(|&i| self.examples[i]).collect(),
            hints: picked.iter().map(|&i| self.hints[i].clone()).collect(),
            scores: self
                .scores
                .iter()
                .map(|(t, s)| (*t, picked.iter().map(|&i| s[i]).collect()))
                .collect(),
            provenance: self.provenance,
        }
    }

    /// Fetches a hint for every candidate through the cache.
    pub fn fill_hints(&mut self, pool: &[QAInstance], instance: &QAInstance, oracle: &dyn LmOracle, cache: &mut HintCache) -> Result<()> {
        for (slot, &e) in self.hints.iter_mut().zip(&self.examples) {
            if slot.is_none() {
                *slot = Some(cache.hint(oracle, &pool[e], instance)?);
            }
        }
        Ok(())
    }

    pub fn hint_texts(&self) -> Result<Vec<&str>> {
        self.hints
            .iter()
            .map(|h| h.as_ref().map(|h| h.text.as_str()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::precondition(format!("hints missing for candidates of {}", self.instance_id)))
    }
}

pub fn bm25_candidates(index: &Bm25Index, instance: &QAInstance, c: usize) -> Result<CandidateSet> {
    Ok(CandidateSet::new(instance.id(), index.top(instance, c)?, Provenance::Bm25Pool))
}

/// Candidate-set cache: one JSON line per set, keyed by instance id.
pub fn save_candidate_sets(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sets {
        writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_candidate_sets(path: &Path) -> Result<BTreeMap<String, CandidateSet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let set: CandidateSet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(set.instance_id.clone(), set);
    }
    Ok(out)
}

/// Hard prompt made of reranked hints.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePrompt {
    pub hints: Vec<String>,
    pub rendered_text: String,
}

impl KnowledgePrompt {
    pub fn new(hints: Vec<String>) -> Self {
        let rendered_text = hints.join(HINT_SEPARATOR);
        Self { hints, rendered_text }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.hints.is_empty()
    }
}

/// Picks the hints of the `k` best-scoring candidates, best first. Ties go to
/// the smaller tie key, so the result does not depend on input order.
pub fn select_hints(scores: &[f64], keys: &[(String, usize)], hints: &[&str], k: usize) -> KnowledgePrompt {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    rank_order(scores, keys, &mut order);
    KnowledgePrompt::new(order.into_iter().take(k).map(|i| hints[i].to_string()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    /// BM25 pool size.
    pub candidates: usize,
    /// Retriever top-l.
    pub retrieve: usize,
    /// Hints kept in the knowledge prompt.
    pub hints: usize,
    pub dim: usize,
    /// Dot-product scale: both encodings have norm `sqrt(scale)`.
    pub retriever_scale: f64,
    pub reranker_max_len: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            candidates: 512,
            retrieve: 64,
            hints: 4,
            dim: 64,
            retriever_scale: 10.0,
            reranker_max_len: 96,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hints == 0 || self.hints >= self.retrieve {
            return Err(Error::Config(format!(
                "miner.hints ({}) must be positive and smaller than miner.retrieve ({})",
                self.hints, self.retrieve
            )));
        }
        if self.candidates == 0 || self.dim == 0 || self.reranker_max_len < 4 || self.retriever_scale <= 0.0 {
            return Err(Error::Config("miner sizes must be positive".into()));
        }
        Ok(())
    }
}

fn token_ids(vocab: &Vocab, text: &str) -> Vec<usize> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

/// Dual encoder `E_X`, `E_D`: mean token embedding, linear map, then scaled
/// to a fixed norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retriever {
    pub params: ParamSet,
    emb_x: ParamId,
    proj_x: ParamId,
    emb_d: ParamId,
    proj_d: ParamId,
    scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

impl Retriever {
    pub fn new(vocab_size: usize, config: &RankerConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "retriever");
        let d = config.dim;
        let mut params = ParamSet::new();
        let emb_x = params.add_normal("query.embedding", vocab_size, d, 1.0, &mut rng);
        let proj_x = params.add_glorot("query.projection", d, d, &mut rng);
        let emb_d = params.add_normal("document.embedding", vocab_size, d, 1.0, &mut rng);
        let proj_d = params.add_glorot("document.projection", d, d, &mut rng);
        Self {
            params,
            emb_x,
            proj_x,
            emb_d,
            proj_d,
            scale: config.retriever_scale,
        }
    }

    /// Copies the query encoder into the document encoder.
    pub fn tie_encoders(&mut self) {
        let e = self.params.get(self.emb_x).clone();
        let p = self.params.get(self.proj_x).clone();
        *self.params.get_mut(self.emb_d) = e;
        *self.params.get_mut(self.proj_d) = p;
    }

    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, side: Side, ids: &[usize]) -> Var {
        let (emb, proj) = match side {
            Side::Query => (self.emb_x, self.proj_x),
            Side::Document => (self.emb_d, self.proj_d),
        };
        let rows = tape.gather(bound.var(emb), ids);
        let pooled = tape.mean_rows(rows);
        let mapped = tape.matmul(pooled, bound.var(proj));
        let unit = tape.l2_normalize_rows(mapped);
        tape.scale(unit, self.scale.sqrt())
    }

    /// `1 × k` row of dot-product scores on the tape.
    pub fn scores_on(&self, tape: &mut Tape, bound: &Bound, vocab: &Vocab, instance: &QAInstance, examples: &[&QAInstance]) -> Var {
        let q = self.encode_on(tape, bound, Side::Query, &token_ids(vocab, &retrieval_text(instance)));
        let docs: Vec<Var> = examples
            .iter()
            .map(|e| self.encode_on(tape, bound, Side::Document, &token_ids(vocab, &retrieval_text(e))))
            .collect();
        let docs = tape.concat_rows(&docs);
        tape.matmul_t(q, docs)
    }

    pub fn encode(&self, vocab: &Vocab, side: Side, text: &str) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let v = self.encode_on(&mut tape, &bound, side, &token_ids(vocab, text));
        tape.value(v).row(0).to_vec()
    }

    pub fn scores(&self, vocab: &Vocab, instance: &QAInstance, examples: &[&QAInstance]) -> Vec<f64> {
        let q = self.encode(vocab, Side::Query, &retrieval_text(instance));
        examples
            .iter()
            .map(|e| dot(&q, &self.encode(vocab, Side::Document, &retrieval_text(e))))
            .collect()
    }

    /// Document encodings of the whole pool, for exact search.
    pub fn index(&self, vocab: &Vocab, pool: &[QAInstance]) -> RetrievalIndex {
        let d = self.params.get(self.proj_d).ncols();
        let mut encodings = Array2::zeros((pool.len(), d));
        for (i, e) in pool.iter().enumerate() {
            let v = self.encode(vocab, Side::Document, &retrieval_text(e));
            encodings.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        RetrievalIndex {
            encodings,
            ids: pool.iter().map(QAInstance::id).collect(),
            keys: tie_keys(pool),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed document encodings of a frozen retriever snapshot.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    encodings: Array2<f64>,
    ids: Vec<String>,
    keys: Vec<(String, usize)>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Exact top-`l` by `E_X([c; q]) · E_D(e)`, self excluded.
    pub fn retrieve(&self, retriever: &Retriever, vocab: &Vocab, instance: &QAInstance, l: usize) -> Result<CandidateSet> {
        let own = instance.id();
        let mut docs: Vec<usize> = (0..self.len()).filter(|&d| self.ids[d] != own).collect();
        if docs.len() < l || l == 0 {
            return Err(Error::invalid(format!(
                "retrieval pool of {} examples cannot supply {l} candidates for {own}",
                docs.len()
            )));
        }
        let q = ndarray::Array1::from(retriever.encode(vocab, Side::Query, &retrieval_text(instance)));
        let scores = self.encodings.dot(&q).to_vec();
        rank_order(&scores, &self.keys, &mut docs);
        docs.truncate(l);
        let mut set = CandidateSet::new(own, docs.clone(), Provenance::Retrieved);
        set.scores.insert(ModelTag::R1, docs.iter().map(|&d| scores[d]).collect());
        Ok(set)
    }
}

/// Cross encoder `E_C` (token + segment + position embeddings, one attention
/// block, one feed-forward block, mean pooling) with an MLP head `f_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reranker {
    pub params: ParamSet,
    emb: ParamId,
    segment: ParamId,
    position: ParamId,
    attention: Attention,
    ffn: FeedForward,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
    max_len: usize,
}

impl Reranker {
    pub fn new(vocab_size: usize, config: &RankerConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "reranker");
        let d = config.dim;
        let mut params = ParamSet::new();
        let emb = params.add_normal("embedding", vocab_size, d, 0.5, &mut rng);
        let segment = params.add_normal("segment", 2, d, 0.5, &mut rng);
        let position = params.add_normal("position", config.reranker_max_len, d, 0.1, &mut rng);
        let attention = Attention::new(&mut params, "attention", d, &mut rng);
        let ffn = FeedForward::new(&mut params, "ffn", d, 2 * d, &mut rng);
        let head_w1 = params.add_glorot("head.w1", d, d, &mut rng);
        let head_b1 = params.add("head.b1", Array2::zeros((1, d)));
        let head_w2 = params.add_glorot("head.w2", d, 1, &mut rng);
        let head_b2 = params.add("head.b2", Array2::zeros((1, 1)));
        Self {
            params,
            emb,
            segment,
            position,
            attention,
            ffn,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            max_len: config.reranker_max_len,
        }
    }

    /// Token ids and segment ids of `[e; h] SEP [c; q]`, each half truncated
    /// from the end to fit.
    fn encode_pair(&self, vocab: &Vocab, example: &QAInstance, hint: &str, instance: &QAInstance) -> (Vec<usize>, Vec<usize>) {
        let pair = serialize_instance(example);
        let mut left = vocab.encode(&format!("{} {} {}", pair.source_text, pair.target_text, hint));
        let mut right = vocab.encode(&retrieval_text(instance));
        let budget = self.max_len - 1;
        let half = budget / 2;
        if left.len() + right.len() > budget {
            let keep_right = right.len().min(budget - left.len().min(half));
            right.truncate(keep_right);
            left.truncate(budget - right.len());
        }
        let mut ids = left.clone();
        ids.push(SEP);
        ids.extend(&right);
        let segs = (0..ids.len()).map(|i| usize::from(i > left.len())).collect();
        (ids, segs)
    }

    pub fn score_on(&self, tape: &mut Tape, bound: &Bound, vocab: &Vocab, example: &QAInstance, hint: &str, instance: &QAInstance) -> Var {
        let (ids, segs) = self.encode_pair(vocab, example, hint, instance);
        let tok = tape.gather(bound.var(self.emb), &ids);
        let seg = tape.gather(bound.var(self.segment), &segs);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(bound.var(self.position), &positions);
        let x = tape.add(tok, seg);
        let x = tape.add(x, pos);
        let h = self.attention.forward(tape, bound, x, x, None).hidden;
        let h = self.ffn.forward(tape, bound, h);
        let pooled = tape.mean_rows(h);
        let z = tape.matmul(pooled, bound.var(self.head_w1));
        let z = tape.add_row(z, bound.var(self.head_b1));
        let z = tape.tanh(z);
        let s = tape.matmul(z, bound.var(self.head_w2));
        tape.add_row(s, bound.var(self.head_b2))
    }

    /// `1 × k` score row over a candidate set with hints.
    pub fn scores_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        vocab: &Vocab,
        pool: &[QAInstance],
        set: &CandidateSet,
        instance: &QAInstance,
    ) -> Result<Var> {
        if set.is_empty() {
            return Err(Error::invalid("empty candidate set"));
        }
        let hints = set.hint_texts()?;
        let cols: Vec<Var> = set
            .examples
            .iter()
            .zip(hints)
            .map(|(&e, h)| self.score_on(tape, bound, vocab, &pool[e], h, instance))
            .collect();
        let column = tape.concat_rows(&cols);
        Ok(tape.transpose(column))
    }

    pub fn scores(&self, vocab: &Vocab, pool: &[QAInstance], set: &CandidateSet, instance: &QAInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let row = self.scores_on(&mut tape, &bound, vocab, pool, set, instance)?;
        Ok(tape.value(row).row(0).to_vec())
    }
}

/// Reranks a retrieved set and keeps the top `k` hints.
pub fn rerank(
    reranker: &Reranker,
    vocab: &Vocab,
    pool: &[QAInstance],
    set: &CandidateSet,
    instance: &QAInstance,
    k: usize,
) -> Result<KnowledgePrompt> {
    let scores = reranker.scores(vocab, pool, set, instance)?;
    let keys: Vec<(String, usize)> = set.examples.iter().map(|&e| (pool[e].task_id.clone(), pool[e].offset)).collect();
    let hints = set.hint_texts()?;
    Ok(select_hints(&scores, &keys, &hints, k))
}

/// Softmax of a ranker's raw scores over the candidate set.
pub fn ranker_distribution(
    tag: ModelTag,
    retriever: &Retriever,
    reranker: &Reranker,
    vocab: &Vocab,
    pool: &[QAInstance],
    set: &CandidateSet,
    instance: &QAInstance,
) -> Result<ScoringDistribution> {
    if set.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let scores = match tag {
        ModelTag::R1 => {
            let examples: Vec<&QAInstance> = set.examples.iter().map(|&e| &pool[e]).collect();
            retriever.scores(vocab, instance, &examples)
        }
        ModelTag::R2 => reranker.scores(vocab, pool, set, instance)?,
        other => return Err(Error::invalid(format!("{} is not a ranker", other.as_str()))),
    };
    ScoringDistribution::from_scores(tag, &scores)
}
