//! Instance-level meta-prompt pool.
//!
//! The pool holds `s` soft prompts, each `prompt_len × d_model`, and one key
//! per prompt living in the query space of a frozen encoder. An instance's
//! query vector selects the `s̃` nearest keys by cosine distance; the matching
//! prompts are concatenated in ascending index order to form its meta prompt.
//!
//! Keys are trained with a hinge loss that pulls selected keys to within `eta`
//! of the query and pushes every ordered pair of selected keys at least
//! `gamma` apart. The query is a plain vector, never a tape node, so no
//! gradient can reach the frozen encoder.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::task_registry::QAInstance;
use crate::util::{rng_for, stable_hash};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Number of meta prompts `s`.
    pub size: usize,
    /// Prompts selected per instance.
    pub select_count: usize,
    pub prompt_len: usize,
    pub eta: f64,
    pub gamma: f64,
    pub init_std: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            size: 30,
            select_count: 5,
            prompt_len: 10,
            eta: 0.15,
            gamma: 0.3,
            init_std: 0.1,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.select_count == 0 || self.prompt_len == 0 {
            return Err(Error::invalid("pool size, select_count and prompt_len must be >= 1"));
        }
        if self.select_count > self.size {
            return Err(Error::invalid(format!(
                "select_count {} exceeds pool size {}",
                self.select_count, self.size
            )));
        }
        Ok(())
    }
}

/// Output of the frozen query function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryVector(pub Vec<f64>);

impl QueryVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A fixed, non-trainable text encoder producing per-token representations.
pub trait FrozenEncoder {
    fn dim(&self) -> usize;

    fn encode_tokens(&self, tokens: &[String]) -> Vec<Vec<f64>>;

    /// Always false: frozen encoders expose no trainable state.
    fn is_trainable(&self) -> bool {
        false
    }
}

/// Deterministic hashed token embeddings standing in for a pre-trained encoder.
///
/// Each token maps to a seeded Gaussian vector. An optional lexicon maps
/// surface forms onto shared concepts, so synonyms receive identical vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedEncoder {
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub lexicon: BTreeMap<String, String>,
}

impl HashedEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            lexicon: BTreeMap::new(),
        }
    }

    pub fn with_lexicon(mut self, lexicon: BTreeMap<String, String>) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let concept = self.lexicon.get(token).map(String::as_str).unwrap_or(token);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), concept.as_bytes()]));
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

impl FrozenEncoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_tokens(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        tokens.iter().map(|t| self.token_vector(t)).collect()
    }
}

/// Mean-pooled frozen encoding of the serialised `(question, context)`.
pub fn query_vector(context: &str, question: &str, encoder: &dyn FrozenEncoder) -> Result<QueryVector> {
    if encoder.is_trainable() {
        return Err(Error::invalid("query function must be frozen"));
    }
    let source = format!("{}\n{}", question.trim(), context.trim()).to_lowercase();
    let tokens = crate::text::tokenize(&source);
    if tokens.is_empty() {
        return Err(Error::invalid("query source text is empty"));
    }
    let reps = encoder.encode_tokens(&tokens);
    let mut out = vec![0.0; encoder.dim()];
    for r in &reps {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = reps.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(QueryVector(out))
}

pub fn query_for(instance: &QAInstance, encoder: &dyn FrozenEncoder) -> Result<QueryVector> {
    let pair = crate::metrics::serialize_instance(instance);
    let (question, context) = pair.source_text.split_once('\n').unwrap_or((&pair.source_text, ""));
    query_vector(context, question, encoder)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// d/da of the cosine distance between `a` and `b`.
fn cosine_distance_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter()
        .zip(b)
        .map(|(ai, bi)| -(bi / (na * nb) - dot * ai / (na * na * na * nb)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaPromptPool {
    pub config: PoolConfig,
    /// `size × query_dim`
    pub keys: ParamSet,
    pub prompts: ParamSet,
    key_id: ParamId,
    prompt_ids: Vec<ParamId>,
}

impl MetaPromptPool {
    /// Keys uniform on the unit sphere, prompts Gaussian with `init_std`.
    pub fn new(config: PoolConfig, query_dim: usize, model_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "prompt_pool");
        let mut keys_arr = Array2::<f64>::zeros((config.size, query_dim));
        for mut row in keys_arr.rows_mut() {
            loop {
                row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-8 {
                    row.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        let mut keys = ParamSet::new();
        let key_id = keys.add("keys", keys_arr);
        let mut prompts = ParamSet::new();
        let prompt_ids = (0..config.size)
            .map(|i| prompts.add_normal(format!("prompt.{i}"), config.prompt_len, model_dim, config.init_std, &mut rng))
            .collect();
        Ok(Self {
            config,
            keys,
            prompts,
            key_id,
            prompt_ids,
        })
    }

    pub fn key_id(&self) -> ParamId {
        self.key_id
    }

    pub fn key(&self, i: usize) -> Vec<f64> {
        self.keys.get(self.key_id).row(i).to_vec()
    }

    pub fn query_dim(&self) -> usize {
        self.keys.get(self.key_id).ncols()
    }

    pub fn prompt(&self, i: usize) -> &Array2<f64> {
        self.prompts.get(self.prompt_ids[i])
    }

    pub fn prompt_id(&self, i: usize) -> ParamId {
        self.prompt_ids[i]
    }

    pub fn meta_prompt_len(&self) -> usize {
        self.config.select_count * self.config.prompt_len
    }

    fn check_query(&self, x: &QueryVector) -> Result<()> {
        if x.dim() != self.query_dim() {
            return Err(Error::invalid(format!(
                "query dimension {} does not match key dimension {}",
                x.dim(),
                self.query_dim()
            )));
        }
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("query vector has non-finite entries"));
        }
        Ok(())
    }

    /// The `s̃` keys nearest to `x`, returned in ascending index order.
    pub fn select_keys(&self, x: &QueryVector) -> Result<Vec<usize>> {
        self.check_query(x)?;
        let keys = self.keys.get(self.key_id);
        let mut scored: Vec<(f64, usize)> = keys
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, k)| (cosine_distance(k.as_slice().expect("row-major keys"), &x.0), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = scored[..self.config.select_count].iter().map(|(_, i)| *i).collect();
        chosen.sort_unstable();
        Ok(chosen)
    }

    /// Key loss for one instance.
    pub fn key_loss(&self, x: &QueryVector, selected: &[usize]) -> Result<f64> {
        Ok(self.key_loss_and_grad(x, selected)?.0)
    }

    /// Key loss and its gradient with respect to the full key matrix. Hinges
    /// sitting exactly on their margin contribute zero gradient.
    pub fn key_loss_and_grad(&self, x: &QueryVector, selected: &[usize]) -> Result<(f64, Array2<f64>)> {
        self.check_query(x)?;
        let s_tilde = self.config.select_count;
        if selected.len() != s_tilde {
            return Err(Error::invalid(format!("expected {s_tilde} selected keys, got {}", selected.len())));
        }
        let keys = self.keys.get(self.key_id);
        let mut grad = Array2::zeros(keys.dim());
        let (eta, gamma) = (self.config.eta, self.config.gamma);
        let row = |i: usize| keys.row(i).to_vec();

        let mut pull = 0.0;
        for &i in selected {
            let k = row(i);
            let d = cosine_distance(&k, &x.0);
            if d > eta {
                pull += d - eta;
                for (g, v) in grad.row_mut(i).iter_mut().zip(cosine_distance_grad(&k, &x.0)) {
                    *g += v;
                }
            }
        }

        let norm = (s_tilde * s_tilde) as f64;
        let mut push = 0.0;
        for &i in selected {
            for &j in selected {
                if i == j {
                    continue;
                }
                let (ki, kj) = (row(i), row(j));
                let d = cosine_distance(&ki, &kj);
                if d < gamma {
                    push += gamma - d;
                    for (g, v) in grad.row_mut(i).iter_mut().zip(cosine_distance_grad(&ki, &kj)) {
                        *g -= v / norm;
                    }
                    for (g, v) in grad.row_mut(j).iter_mut().zip(cosine_distance_grad(&kj, &ki)) {
                        *g -= v / norm;
                    }
                }
            }
        }
        Ok((pull + push / norm, grad))
    }

    /// Meta prompt as a trainable tape node.
    pub fn compose_on(&self, tape: &mut Tape, bound: &Bound, selected: &[usize]) -> Var {
        let mut order = selected.to_vec();
        order.sort_unstable();
        let parts: Vec<Var> = order.iter().map(|&i| bound.var(self.prompt_ids[i])).collect();
        tape.concat_rows(&parts)
    }

    /// Meta prompt values, `(s̃·prompt_len) × d_model`.
    pub fn compose_meta_prompt(&self, selected: &[usize]) -> Array2<f64> {
        let mut order = selected.to_vec();
        order.sort_unstable();
        let views: Vec<_> = order.iter().map(|&i| self.prompt(i).view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("prompts share a width")
    }

    /// Hash over keys and prompts; checkpoints record it to pair pools with models.
    pub fn fingerprint(&self) -> String {
        crate::util::hex_digest(&[self.keys.fingerprint().as_bytes(), self.prompts.fingerprint().as_bytes()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-task counts of how often each prompt index is selected.
pub fn selection_frequency<'a>(
    instances: impl IntoIterator<Item = &'a QAInstance>,
    pool: &MetaPromptPool,
    encoder: &dyn FrozenEncoder,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for inst in instances {
        let x = query_for(inst, encoder)?;
        let row = out.entry(inst.task_id.clone()).or_insert_with(|| vec![0; pool.config.size]);
        for i in pool.select_keys(&x)? {
            row[i] += 1;
        }
    }
    Ok(out)
}

/// Heat-map export: one row per task, one column per prompt index.
pub fn write_heatmap_csv(path: &Path, freq: &BTreeMap<String, Vec<usize>>, pool_size: usize) -> Result<()> {
    let mut text = String::from("task_id");
    for i in 0..pool_size {
        text.push_str(&format!(",p{i}"));
    }
    text.push('\n');
    for (task, row) in freq {
        text.push_str(task);
        for c in row {
            text.push_str(&format!(",{c}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
