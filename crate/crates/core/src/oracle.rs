//! Language-model oracle: hint generation, answer scoring and the `lm`
//! candidate distribution.
//!
//! Training code talks to [`LmOracle`] only. Two backends exist: the
//! deterministic [`MockOracle`] and [`RemoteOracle`], a thin JSON-over-HTTP
//! client. Everything the trainer consumes goes through a [`HintCache`], so a
//! full run issues at most one generation call per `(example, instance)` pair.

use crate::error::{Error, Result};
use crate::task_registry::QAInstance;
use crate::text::{normalize, tokenize};
use crate::util::{hex_digest, stable_hash};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hint {
    pub text: String,
    pub source_example_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Lm,
    R1,
    R2,
    F,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Lm => "lm",
            ModelTag::R1 => "r1",
            ModelTag::R2 => "r2",
            ModelTag::F => "f",
        }
    }
}

/// Softmax distribution over a candidate set under one model's scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringDistribution {
    pub model_tag: ModelTag,
    pub probabilities: Vec<f64>,
}

impl ScoringDistribution {
    /// Max-subtracted softmax over raw scores.
    pub fn from_scores(model_tag: ModelTag, scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("cannot build a distribution over an empty candidate set"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("candidate scores must be finite"));
        }
        Ok(Self {
            model_tag,
            probabilities: softmax(scores),
        })
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub trait LmOracle {
    /// Identifies the backend in cache keys.
    fn name(&self) -> String;

    /// Greedy generation of `p_g(h | [example; context; question])`.
    fn generate_hint(&self, example: &QAInstance, context: &str, question: &str) -> Result<String>;

    /// `log p_g(answer | [example; context; question])`, summed over tokens.
    fn score_answer(&self, example: &QAInstance, context: &str, question: &str, answer: &str) -> Result<f64>;
}

fn check_inputs(question: &str) -> Result<()> {
    if tokenize(question).is_empty() {
        return Err(Error::invalid("question is empty"));
    }
    Ok(())
}

/// Renders `[e; c; q]` as plain text for text-generation backends.
pub fn render_prompt(example: &QAInstance, context: &str, question: &str) -> String {
    let pair = crate::metrics::serialize_instance(example);
    format!(
        "example: {} answer: {}\ncontext: {}\nquestion: {}\nhint:",
        pair.source_text.replace('\n', " "),
        pair.target_text,
        context.trim(),
        question.trim()
    )
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "of", "in", "on", "to", "what", "which", "who", "does", "do", "did", "for", "and", "or", "it",
    "its", "by", "with", "as", "at", "be", "this", "that",
];

fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Deterministic rule-based oracle.
///
/// * Hint: the example's answer when the example's question shares a content
///   token (non-stopword) with the query question, otherwise a noise token
///   derived from the seed. Hints are capped at `max_hint_tokens`.
/// * Score: `-similarity_weight · (1 - J) - miss_penalty · [hint ≠ answer]`,
///   where `J` is the Jaccard overlap of content tokens between the example's
///   source text and the query's. An identical example whose hint equals the
///   answer scores exactly 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockOracle {
    pub seed: u64,
    pub max_hint_tokens: usize,
    pub noise_vocab: usize,
    pub similarity_weight: f64,
    pub miss_penalty: f64,
}

impl Default for MockOracle {
    fn default() -> Self {
        Self {
            seed: 0,
            max_hint_tokens: 32,
            noise_vocab: 16,
            similarity_weight: 2.0,
            miss_penalty: 3.0,
        }
    }
}

impl MockOracle {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

impl LmOracle for MockOracle {
    fn name(&self) -> String {
        format!(
            "mock:{}:{}:{}:{}:{}",
            self.seed, self.max_hint_tokens, self.noise_vocab, self.similarity_weight, self.miss_penalty
        )
    }

    fn generate_hint(&self, example: &QAInstance, _context: &str, question: &str) -> Result<String> {
        check_inputs(question)?;
        let query = content_tokens(question);
        let theirs = content_tokens(&example.question);
        if query.intersection(&theirs).next().is_some() {
            let toks = tokenize(&example.answer);
            return Ok(toks.into_iter().take(self.max_hint_tokens).collect::<Vec<_>>().join(" "));
        }
        let k = stable_hash(&[&self.seed.to_le_bytes(), example.id().as_bytes(), normalize(question).as_bytes()])
            % self.noise_vocab.max(1) as u64;
        Ok(format!("noise{k}"))
    }

    fn score_answer(&self, example: &QAInstance, context: &str, question: &str, answer: &str) -> Result<f64> {
        check_inputs(question)?;
        if tokenize(answer).is_empty() {
            return Err(Error::invalid("answer is empty"));
        }
        let hint = self.generate_hint(example, context, question)?;
        let ex = crate::metrics::serialize_instance(example).source_text;
        let sim = jaccard(&content_tokens(&ex), &content_tokens(&format!("{question}\n{context}")));
        let miss = if normalize(&hint) == normalize(answer) {
            0.0
        } else {
            self.miss_penalty
        };
        Ok(-self.similarity_weight * (1.0 - sim) - miss)
    }
}

/// JSON-over-HTTP text-generation backend.
///
/// * `POST {endpoint}/generate` with `{"model", "prompt", "max_tokens"}`
///   answers `{"text": "..."}` (greedy decoding on the server side).
/// * `POST {endpoint}/score` with `{"model", "prompt", "continuation"}`
///   answers `{"logprob": <sum of token log-probabilities>}`.
#[derive(Clone, Debug)]
pub struct RemoteOracle {
    pub endpoint: String,
    pub model: String,
    pub max_hint_tokens: usize,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprob: f64,
}

impl RemoteOracle {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, max_hint_tokens: usize, timeout_secs: u64) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(timeout_secs))
            .build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            max_hint_tokens,
            agent,
        }
    }

    fn post<T: serde::de::DeserializeOwned>(&self, route: &str, body: serde_json::Value) -> Result<T> {
        let url = format!("{}/{route}", self.endpoint);
        let resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Oracle(format!("{url}: {e}")))?;
        resp.into_json::<T>()
            .map_err(|e| Error::Oracle(format!("{url}: bad response body: {e}")))
    }
}

impl LmOracle for RemoteOracle {
    fn name(&self) -> String {
        format!("remote:{}:{}", self.endpoint, self.model)
    }

    fn generate_hint(&self, example: &QAInstance, context: &str, question: &str) -> Result<String> {
        check_inputs(question)?;
        let body = serde_json::json!({
            "model": self.model,
            "prompt": render_prompt(example, context, question),
            "max_tokens": self.max_hint_tokens,
        });
        let resp: GenerateResponse = self.post("generate", body)?;
        let text = resp.text.trim().to_string();
        if text.is_empty() {
            return Err(Error::Oracle("backend returned an empty hint".into()));
        }
        Ok(text)
    }

    fn score_answer(&self, example: &QAInstance, context: &str, question: &str, answer: &str) -> Result<f64> {
        check_inputs(question)?;
        if tokenize(answer).is_empty() {
            return Err(Error::invalid("answer is empty"));
        }
        let body = serde_json::json!({
            "model": self.model,
            "prompt": render_prompt(example, context, question),
            "continuation": answer,
        });
        let resp: ScoreResponse = self.post("score", body)?;
        if !resp.logprob.is_finite() || resp.logprob > 0.0 {
            return Err(Error::Oracle(format!("backend returned invalid log-probability {}", resp.logprob)));
        }
        Ok(resp.logprob)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    key_hash: String,
    example_id: String,
    instance_id: String,
    hint: String,
    #[serde(default)]
    score: Option<f64>,
}

/// Hint/score cache keyed by `(example id, instance id)` and guarded by a
/// content hash of the oracle name and both instances.
///
/// When backed by a file, every insert or update appends one JSON line; the
/// last line for a key wins on reload.
#[derive(Debug, Default)]
pub struct HintCache {
    entries: BTreeMap<(String, String), CacheRecord>,
    path: Option<PathBuf>,
    generation_calls: usize,
    score_calls: usize,
}

fn key_hash(oracle: &str, example: &QAInstance, instance: &QAInstance) -> String {
    let ex = serde_json::to_string(example).unwrap_or_default();
    let inst = serde_json::to_string(instance).unwrap_or_default();
    hex_digest(&[oracle.as_bytes(), ex.as_bytes(), inst.as_bytes()])
}

impl HintCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) an append-only cache file and loads its records.
    pub fn open(path: &Path) -> Result<Self> {
        let mut cache = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        if path.exists() {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                cache.entries.insert((rec.example_id.clone(), rec.instance_id.clone()), rec);
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation_calls(&self) -> usize {
        self.generation_calls
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls
    }

    fn append(&self, rec: &CacheRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn valid_entry(&self, oracle: &dyn LmOracle, example: &QAInstance, instance: &QAInstance) -> Option<(&CacheRecord, String)> {
        let hash = key_hash(&oracle.name(), example, instance);
        self.entries
            .get(&(example.id(), instance.id()))
            .filter(|r| r.key_hash == hash)
            .map(|r| (r, hash))
    }

    /// Returns the cached hint, generating and inserting it if absent.
    pub fn hint(&mut self, oracle: &dyn LmOracle, example: &QAInstance, instance: &QAInstance) -> Result<Hint> {
        if let Some((rec, _)) = self.valid_entry(oracle, example, instance) {
            return Ok(Hint {
                text: rec.hint.clone(),
                source_example_id: rec.example_id.clone(),
            });
        }
        let text = oracle.generate_hint(example, &instance.context, &instance.question)?;
        self.generation_calls += 1;
        let rec = CacheRecord {
            key_hash: key_hash(&oracle.name(), example, instance),
            example_id: example.id(),
            instance_id: instance.id(),
            hint: text.clone(),
            score: None,
        };
        self.append(&rec)?;
        self.entries.insert((rec.example_id.clone(), rec.instance_id.clone()), rec);
        Ok(Hint {
            text,
            source_example_id: example.id(),
        })
    }

    /// Returns the cached `log p_g(a | [e; c; q])` for the instance's gold answer.
    pub fn score(&mut self, oracle: &dyn LmOracle, example: &QAInstance, instance: &QAInstance) -> Result<f64> {
        self.hint(oracle, example, instance)?;
        let key = (example.id(), instance.id());
        if let Some(s) = self.entries[&key].score {
            return Ok(s);
        }
        let s = oracle.score_answer(example, &instance.context, &instance.question, &instance.answer)?;
        self.score_calls += 1;
        let rec = self.entries.get_mut(&key).expect("hint inserted above");
        rec.score = Some(s);
        let rec = rec.clone();
        self.append(&rec)?;
        Ok(s)
    }

    /// Read-only lookup used once the cache has been filled.
    pub fn cached_hint(&self, example_id: &str, instance_id: &str) -> Option<Hint> {
        self.entries.get(&(example_id.to_string(), instance_id.to_string())).map(|r| Hint {
            text: r.hint.clone(),
            source_example_id: r.example_id.clone(),
        })
    }

    pub fn cached_score(&self, example_id: &str, instance_id: &str) -> Option<f64> {
        self.entries
            .get(&(example_id.to_string(), instance_id.to_string()))
            .and_then(|r| r.score)
    }
}

/// `p_lm` over the candidate examples of one instance.
pub fn lm_distribution(
    examples: &[&QAInstance],
    instance: &QAInstance,
    oracle: &dyn LmOracle,
    cache: &mut HintCache,
) -> Result<ScoringDistribution> {
    if examples.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let scores = examples
        .iter()
        .map(|e| cache.score(oracle, e, instance))
        .collect::<Result<Vec<_>>>()?;
    ScoringDistribution::from_scores(ModelTag::Lm, &scores)
}
