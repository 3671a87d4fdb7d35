//! Two-stage training loop.
//!
//! Stage I fits the retriever and reranker to the oracle's candidate
//! distribution. Stage II runs, per epoch: a scoreboard evaluation on a fixed
//! validation subsample, then per batch (a) key updates, (b) QA model and
//! meta-prompt updates under the current rankers' knowledge prompts, and
//! (d) gated mutual KD across retriever, reranker and QA model.
//!
//! All randomness comes from `(seed, label)` streams, so a run resumed from
//! an epoch checkpoint replays the uninterrupted run exactly.

use crate::autodiff::{Tape, Var};
use crate::config::{Ablation, Config, OracleBackend, ENDPOINT_ENV};
use crate::distill::{
    evaluate_models, gated_kd_loss_on, kl_divergence, mutual_kd_loss_on, stage1_loss_on, KDEdgeSet, Scoreboard, ValidationCase,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_prediction, Gold, ScoreSummary};
use crate::miner::{bm25_candidates, rerank, Bm25Index, CandidateSet, KnowledgePrompt, Reranker, RetrievalIndex, Retriever};
use crate::oracle::{lm_distribution, softmax, HintCache, LmOracle, ModelTag, RemoteOracle};
use crate::params::{AdamW, GradBuffer};
use crate::prompt_pool::{query_for, selection_frequency, HashedEncoder, MetaPromptPool};
use crate::qa_model::QAModel;
use crate::synthetic;
use crate::task_registry::{curate, load_jsonl, registry_from, split_seen_unseen, LongTailManifest, MetricKind, QAInstance, Split};
use crate::text::Vocab;
use crate::util::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Curated data and everything derived from it without training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: Config,
    pub manifest: LongTailManifest,
    pub train: Vec<QAInstance>,
    pub val: Vec<QAInstance>,
    pub test: Vec<QAInstance>,
    pub vocab: Vocab,
    pub encoder: HashedEncoder,
    pub metrics: BTreeMap<String, MetricKind>,
}

/// Loads (or generates) the corpus and curates it.
pub fn prepare(config: &Config) -> Result<Prepared> {
    config.validate()?;
    let (originals, test, unseen_default, lexicon) = if config.data.is_synthetic() {
        let suite = synthetic::generate(&config.synthetic);
        (suite.train, suite.test, suite.unseen_task_ids, Some(suite.lexicon))
    } else {
        if config.data.test_path.is_empty() {
            return Err(Error::Config("data.test_path is required with data.train_path".into()));
        }
        let train = load_jsonl(Path::new(&config.data.train_path), Split::Train)?;
        let test = load_jsonl(Path::new(&config.data.test_path), Split::Test)?;
        (train, test, Vec::new(), None)
    };
    let registry = registry_from(&originals, &test, &BTreeMap::new())?;
    let cur = &config.curation;
    let unseen = if !config.data.unseen_tasks.is_empty() {
        config.data.unseen_tasks.clone()
    } else if config.data.unseen_count > 0 {
        split_seen_unseen(&registry, config.data.unseen_count, cur.seed)?.1
    } else {
        unseen_default
    };
    let manifest = curate(&registry, &unseen, cur.alpha, cur.head_budget, cur.seed)?;
    let (train, val) = manifest.select(&originals);
    let train: Vec<QAInstance> = train.into_iter().cloned().collect();
    let val: Vec<QAInstance> = val.into_iter().cloned().collect();
    if train.len() < 2 {
        return Err(Error::invalid("curated training set needs at least two instances"));
    }
    let pairs: Vec<_> = train.iter().map(crate::metrics::serialize_instance).collect();
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.source_text.as_str(), p.target_text.as_str()]));
    let mut encoder = HashedEncoder::new(config.encoder.dim, config.encoder.seed);
    if config.encoder.use_lexicon {
        if let Some(lex) = lexicon {
            encoder = encoder.with_lexicon(lex);
        }
    }
    let metrics = registry.iter().map(|t| (t.task_id.clone(), t.metric_kind)).collect();
    Ok(Prepared {
        config: config.clone(),
        manifest,
        train,
        val,
        test,
        vocab,
        encoder,
        metrics,
    })
}

pub fn build_oracle(config: &Config) -> Result<Box<dyn LmOracle>> {
    let o = &config.oracle;
    Ok(match o.backend {
        OracleBackend::Mock => Box::new(o.mock.clone()),
        OracleBackend::Remote => {
            let endpoint = if o.endpoint.is_empty() {
                std::env::var(ENDPOINT_ENV).map_err(|_| Error::Config(format!("remote oracle needs oracle.endpoint or {ENDPOINT_ENV}")))?
            } else {
                o.endpoint.clone()
            };
            Box::new(RemoteOracle::new(endpoint, o.model.clone(), o.max_hint_tokens, o.timeout_secs))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss_m: Option<f64>,
    pub loss_f: Option<f64>,
    pub loss_lm: Option<f64>,
    pub loss_mkd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreboardRecord {
    pub epoch: usize,
    pub v_r1: f64,
    pub v_r2: f64,
    pub v_f: f64,
    /// Edges that actually drove KD this epoch, as `teacher->student`.
    pub active_edges: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub ablation: Ablation,
    pub steps: Vec<StepRecord>,
    pub scoreboards: Vec<ScoreboardRecord>,
    /// Held-out `KL(p_lm || p_r1)` before Stage I and after each epoch.
    pub heldout_kl: Vec<f64>,
    /// Excluded from determinism comparisons.
    pub wall_clock_secs: f64,
}

impl RunLog {
    /// Every logged loss in step order.
    pub fn loss_sequence(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| [s.loss_m, s.loss_f, s.loss_lm, s.loss_mkd])
            .flatten()
            .collect()
    }

    fn push(&mut self, mut record: StepRecord) {
        record.step = self.steps.last().map_or(0, |s| s.step + 1);
        self.steps.push(record);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimizers {
    pub retriever: AdamW,
    pub reranker: AdamW,
    pub keys: AdamW,
    pub model: AdamW,
    pub prompts: AdamW,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub retriever: Retriever,
    pub reranker: Reranker,
    pub pool: MetaPromptPool,
    pub model: QAModel,
    pub optim: Optimizers,
    pub log: RunLog,
    pub stage1_done: usize,
    pub stage2_done: usize,
    /// Scoreboard frozen at the first Stage II epoch (static MKD).
    pub static_board: Option<Scoreboard>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointMeta {
    manifest_hash: String,
    vocab: String,
    pool: String,
    model: String,
    retriever: String,
    reranker: String,
    seed: u64,
    ablation: Ablation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    meta: CheckpointMeta,
    state: TrainState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub task_id: String,
    pub prediction: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub summary: ScoreSummary,
    pub frequency: BTreeMap<String, Vec<usize>>,
    pub predictions: Vec<Prediction>,
}

/// One training run: data, oracle, hint cache and an optional run directory.
pub struct Run {
    pub data: Prepared,
    pub oracle: Box<dyn LmOracle>,
    pub cache: HintCache,
    pub bm25: Bm25Index,
    pub dir: Option<PathBuf>,
    /// Stage I BM25 pools, computed once.
    pools: Option<BTreeMap<String, CandidateSet>>,
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const HINT_CACHE_FILE: &str = "hints.jsonl";
pub const RUN_LOG_FILE: &str = "run_log.json";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Run {
    pub fn new(data: Prepared, dir: Option<&Path>) -> Result<Self> {
        let oracle = build_oracle(&data.config)?;
        let cache = match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                HintCache::open(&d.join(HINT_CACHE_FILE))?
            }
            None => HintCache::in_memory(),
        };
        let bm25 = Bm25Index::build(&data.train);
        Ok(Self {
            data,
            oracle,
            cache,
            bm25,
            dir: dir.map(Path::to_path_buf),
            pools: None,
        })
    }

    pub fn with_oracle(mut self, oracle: Box<dyn LmOracle>) -> Self {
        self.oracle = oracle;
        self
    }

    pub fn config(&self) -> &Config {
        &self.data.config
    }

    /// Candidate pool size, capped by the training pool.
    fn pool_size(&self) -> usize {
        self.config().miner.candidates.min(self.data.train.len() - 1)
    }

    fn subsample_size(&self) -> usize {
        self.config().train.candidate_subsample.min(self.pool_size())
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let cfg = self.config();
        let seed = cfg.train.seed;
        let v = self.data.vocab.len();
        let mut retriever = Retriever::new(v, &cfg.miner, seed);
        retriever.tie_encoders();
        let reranker = Reranker::new(v, &cfg.miner, seed);
        let pool = MetaPromptPool::new(cfg.pool.clone(), self.data.encoder.dim, cfg.model.dim, seed)?;
        let model = QAModel::new(cfg.model.clone(), v, seed)?;
        let t = &cfg.train;
        let optim = Optimizers {
            retriever: AdamW::new(t.optimizer(t.ranker_learning_rate), &retriever.params),
            reranker: AdamW::new(t.optimizer(t.ranker_learning_rate), &reranker.params),
            keys: AdamW::new(t.optimizer(t.learning_rate), &pool.keys),
            model: AdamW::new(t.optimizer(t.learning_rate), &model.params),
            prompts: AdamW::new(t.optimizer(t.learning_rate), &pool.prompts),
        };
        Ok(TrainState {
            retriever,
            reranker,
            pool,
            model,
            optim,
            log: RunLog {
                seed,
                ablation: t.ablation,
                ..RunLog::default()
            },
            stage1_done: 0,
            stage2_done: 0,
            static_board: None,
        })
    }

    fn stage1_pools(&mut self) -> Result<&BTreeMap<String, CandidateSet>> {
        if self.pools.is_none() {
            let c = self.pool_size();
            let mut pools = BTreeMap::new();
            for inst in &self.data.train {
                pools.insert(inst.id(), bm25_candidates(&self.bm25, inst, c)?);
            }
            self.pools = Some(pools);
        }
        Ok(self.pools.as_ref().expect("filled above"))
    }

    /// BM25 candidates for `inst`, subsampled under `label`, hints filled.
    fn candidates(&mut self, inst: &QAInstance, label: &str) -> Result<CandidateSet> {
        let k = self.subsample_size();
        let seed = self.config().train.seed;
        let full = match self.stage1_pools()?.get(&inst.id()) {
            Some(set) => set.clone(),
            None => bm25_candidates(&self.bm25, inst, self.pool_size())?,
        };
        let mut set = full.subsample(k, seed, label);
        set.fill_hints(&self.data.train, inst, self.oracle.as_ref(), &mut self.cache)?;
        Ok(set)
    }

    fn p_lm(&mut self, inst: &QAInstance, set: &CandidateSet) -> Result<Vec<f64>> {
        let examples: Vec<&QAInstance> = set.examples.iter().map(|&e| &self.data.train[e]).collect();
        Ok(lm_distribution(&examples, inst, self.oracle.as_ref(), &mut self.cache)?.probabilities)
    }

    fn validation_instances(&self) -> Vec<QAInstance> {
        let mut val = self.data.val.clone();
        val.shuffle(&mut rng_for(self.config().train.seed, "validation/subsample"));
        val.truncate(self.config().train.validation_subsample);
        val
    }

    /// Mean `KL(p_lm || p_r1)` over the validation subsample.
    pub fn heldout_kl(&mut self, state: &TrainState) -> Result<f64> {
        let val = self.validation_instances();
        if val.is_empty() {
            return Err(Error::precondition("no validation instances for held-out KL"));
        }
        let mut total = 0.0;
        for inst in &val {
            let set = self.candidates(inst, &format!("heldout/{}", inst.id()))?;
            let p_lm = self.p_lm(inst, &set)?;
            let examples: Vec<&QAInstance> = set.examples.iter().map(|&e| &self.data.train[e]).collect();
            let p_r1 = softmax(&state.retriever.scores(&self.data.vocab, inst, &examples));
            total += kl_divergence(&p_lm, &p_r1)?;
        }
        Ok(total / val.len() as f64)
    }

    fn batches(&self, stage: &str, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng_for(self.config().train.seed, &format!("{stage}/order/{epoch}")));
        order.chunks(self.config().train.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Stage I: `L_lm` on the retriever and reranker.
    pub fn run_stage1(&mut self, state: &mut TrainState) -> Result<()> {
        let start = Instant::now();
        if state.log.heldout_kl.is_empty() {
            let kl = self.heldout_kl(state)?;
            state.log.heldout_kl.push(kl);
        }
        let epochs = self.config().train.stage1_epochs;
        for epoch in state.stage1_done + 1..=epochs {
            for batch in self.batches("stage1", epoch) {
                let loss = self.stage1_step(state, epoch, &batch)?;
                state.log.push(StepRecord {
                    stage: 1,
                    epoch,
                    step: 0,
                    loss_m: None,
                    loss_f: None,
                    loss_lm: Some(loss),
                    loss_mkd: None,
                });
            }
            let kl = self.heldout_kl(state)?;
            state.log.heldout_kl.push(kl);
            log::info!("stage 1 epoch {epoch}: held-out KL(p_lm || p_r1) = {kl:.4}");
            state.stage1_done = epoch;
            state.log.wall_clock_secs += start.elapsed().as_secs_f64();
            self.save_checkpoint(state, &format!("s1-{epoch:03}"))?;
        }
        Ok(())
    }

    fn stage1_step(&mut self, state: &mut TrainState, epoch: usize, batch: &[usize]) -> Result<f64> {
        let mut prepared = Vec::with_capacity(batch.len());
        for &i in batch {
            let inst = self.data.train[i].clone();
            let set = self.candidates(&inst, &format!("stage1/{epoch}/{}", inst.id()))?;
            let p_lm = self.p_lm(&inst, &set)?;
            prepared.push((inst, set, p_lm));
        }
        let mut tape = Tape::new();
        let rb = state.retriever.params.bind(&mut tape);
        let cb = state.reranker.params.bind(&mut tape);
        let mut terms = Vec::with_capacity(prepared.len());
        for (inst, set, p_lm) in &prepared {
            let examples: Vec<&QAInstance> = set.examples.iter().map(|&e| &self.data.train[e]).collect();
            let r1 = state.retriever.scores_on(&mut tape, &rb, &self.data.vocab, inst, &examples);
            let r2 = state
                .reranker
                .scores_on(&mut tape, &cb, &self.data.vocab, &self.data.train, set, inst)?;
            terms.push(stage1_loss_on(&mut tape, p_lm, r1, r2)?);
        }
        let loss = mean_on(&mut tape, &terms);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let mut rbuf = GradBuffer::new(&state.retriever.params);
        rbuf.accumulate(&rb, &grads);
        let mut cbuf = GradBuffer::new(&state.reranker.params);
        cbuf.accumulate(&cb, &grads);
        state.optim.retriever.step(&mut state.retriever.params, &rbuf);
        state.optim.reranker.step(&mut state.reranker.params, &cbuf);
        Ok(value)
    }

    fn meta_selection(&self, state: &TrainState, inst: &QAInstance) -> Result<Option<Vec<usize>>> {
        if !self.config().train.ablation.uses_meta_prompt() {
            return Ok(None);
        }
        let x = query_for(inst, &self.data.encoder)?;
        Ok(Some(state.pool.select_keys(&x)?))
    }

    /// Knowledge prompt from the current rankers: retriever top-l over the
    /// training pool, oracle hints, reranker top hints.
    fn knowledge_prompt(&mut self, state: &TrainState, index: &RetrievalIndex, inst: &QAInstance) -> Result<KnowledgePrompt> {
        if !self.config().train.ablation.uses_knowledge_prompt() {
            return Ok(KnowledgePrompt::empty());
        }
        let l = self.config().miner.retrieve.min(self.data.train.len() - 1);
        let mut set = index.retrieve(&state.retriever, &self.data.vocab, inst, l)?;
        set.fill_hints(&self.data.train, inst, self.oracle.as_ref(), &mut self.cache)?;
        rerank(
            &state.reranker,
            &self.data.vocab,
            &self.data.train,
            &set,
            inst,
            self.config().miner.hints,
        )
    }

    /// Scoreboard over the fixed validation subsample.
    pub fn scoreboard(&mut self, state: &TrainState, epoch: usize) -> Result<Scoreboard> {
        let val = self.validation_instances();
        let mut owned = Vec::with_capacity(val.len());
        for inst in &val {
            let set = self.candidates(inst, &format!("validation/{}", inst.id()))?;
            let prefix = self.meta_selection(state, inst)?.map(|s| state.pool.compose_meta_prompt(&s));
            let hints: Vec<String> = set.hint_texts()?.into_iter().map(String::from).collect();
            let examples: Vec<&QAInstance> = set.examples.iter().map(|&e| &self.data.train[e]).collect();
            let keys = examples.iter().map(|e| (e.task_id.clone(), e.offset)).collect();
            let vocab = &self.data.vocab;
            let mut scores = BTreeMap::new();
            scores.insert(ModelTag::R1, state.retriever.scores(vocab, inst, &examples));
            scores.insert(ModelTag::R2, state.reranker.scores(vocab, &self.data.train, &set, inst)?);
            let f: Vec<f64> = hints
                .iter()
                .map(|h| {
                    state
                        .model
                        .answer_log_prob(vocab, inst, prefix.as_ref(), &KnowledgePrompt::new(vec![h.clone()]))
                })
                .collect();
            scores.insert(ModelTag::F, f);
            owned.push((prefix, hints, keys, scores));
        }
        let cases: Vec<ValidationCase<'_>> = val
            .iter()
            .zip(owned)
            .map(|(instance, (prefix, hints, keys, scores))| ValidationCase {
                instance,
                prefix,
                hints,
                keys,
                scores,
            })
            .collect();
        evaluate_models(&cases, &state.model, &self.data.vocab, self.config().miner.hints, epoch)
    }

    /// Stage II for epochs `stage2_done + 1 ..= epochs`, stopping after
    /// `stop_after` epochs when given (a simulated interruption).
    pub fn run_stage2(&mut self, state: &mut TrainState, stop_after: Option<usize>) -> Result<()> {
        let start = Instant::now();
        let epochs = self.config().train.epochs;
        let ablation = self.config().train.ablation;
        for epoch in state.stage2_done + 1..=epochs {
            if stop_after.is_some_and(|k| epoch > k) {
                break;
            }
            let board = self.scoreboard(state, epoch)?;
            if state.static_board.is_none() {
                state.static_board = Some(board.clone());
            }
            let edges = match ablation {
                Ablation::NoMkd | Ablation::NoPk => KDEdgeSet::fixed(Vec::new()),
                Ablation::BackKd => KDEdgeSet::fixed(vec![(ModelTag::F, ModelTag::R1), (ModelTag::F, ModelTag::R2)]),
                Ablation::StaticMkd => KDEdgeSet::from_scoreboard(state.static_board.as_ref().expect("set above")),
                Ablation::None | Ablation::NoPm => KDEdgeSet::from_scoreboard(&board),
            };
            state.log.scoreboards.push(ScoreboardRecord {
                epoch,
                v_r1: board.get(ModelTag::R1),
                v_r2: board.get(ModelTag::R2),
                v_f: board.get(ModelTag::F),
                active_edges: edges.labels(),
            });
            for batch in self.batches("stage2", epoch) {
                let loss_m = if ablation.uses_meta_prompt() {
                    Some(self.key_step(state, &batch)?)
                } else {
                    None
                };
                let index = if ablation.uses_knowledge_prompt() {
                    Some(state.retriever.index(&self.data.vocab, &self.data.train))
                } else {
                    None
                };
                let loss_f = self.qa_step(state, index.as_ref(), &batch)?;
                let loss_mkd = if edges.is_empty() {
                    None
                } else {
                    let gate = (ablation == Ablation::None || ablation == Ablation::NoPm).then_some(&board);
                    Some(self.mkd_step(state, epoch, &edges, gate, &batch)?)
                };
                state.log.push(StepRecord {
                    stage: 2,
                    epoch,
                    step: 0,
                    loss_m,
                    loss_f: Some(loss_f),
                    loss_lm: None,
                    loss_mkd,
                });
            }
            log::info!(
                "stage 2 epoch {epoch}: v = ({:.4}, {:.4}, {:.4}), edges [{}]",
                board.get(ModelTag::R1),
                board.get(ModelTag::R2),
                board.get(ModelTag::F),
                edges.labels().join(" ")
            );
            state.stage2_done = epoch;
            state.log.wall_clock_secs += start.elapsed().as_secs_f64();
            self.save_checkpoint(state, &format!("s2-{epoch:03}"))?;
        }
        Ok(())
    }

    /// (a) key loss over the batch.
    fn key_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<f64> {
        let w = self.config().train.key_loss_weight;
        let mut buf = GradBuffer::new(&state.pool.keys);
        let mut total = 0.0;
        for &i in batch {
            let x = query_for(&self.data.train[i], &self.data.encoder)?;
            let selected = state.pool.select_keys(&x)?;
            let (loss, mut grad) = state.pool.key_loss_and_grad(&x, &selected)?;
            grad.mapv_inplace(|g| g * w);
            buf.add(state.pool.key_id(), &grad);
            buf.mark_example();
            total += loss;
        }
        state.optim.keys.step(&mut state.pool.keys, &buf);
        Ok(total / batch.len() as f64)
    }

    /// (b) answer NLL with meta and knowledge prompts.
    fn qa_step(&mut self, state: &mut TrainState, index: Option<&RetrievalIndex>, batch: &[usize]) -> Result<f64> {
        let mut items = Vec::with_capacity(batch.len());
        for &i in batch {
            let inst = self.data.train[i].clone();
            let selection = self.meta_selection(state, &inst)?;
            let kp = match index {
                Some(index) => self.knowledge_prompt(state, index, &inst)?,
                None => KnowledgePrompt::empty(),
            };
            items.push((inst, selection, kp));
        }
        let mut tape = Tape::new();
        let mb = state.model.params.bind(&mut tape);
        let pb = state.pool.prompts.bind(&mut tape);
        let batch_items: Vec<(&QAInstance, Option<Var>, &KnowledgePrompt)> = items
            .iter()
            .map(|(inst, sel, kp)| (inst, sel.as_ref().map(|s| state.pool.compose_on(&mut tape, &pb, s)), kp))
            .collect();
        let loss = state.model.qa_loss_on(&mut tape, &mb, &self.data.vocab, &batch_items)?;
        let value = tape.scalar(loss);
        let weighted = tape.scale(loss, self.config().train.qa_loss_weight);
        let grads = tape.backward(weighted);
        let mut mbuf = GradBuffer::new(&state.model.params);
        mbuf.accumulate(&mb, &grads);
        let mut pbuf = GradBuffer::new(&state.pool.prompts);
        pbuf.accumulate(&pb, &grads);
        state.optim.model.step(&mut state.model.params, &mbuf);
        state.optim.prompts.step(&mut state.pool.prompts, &pbuf);
        Ok(value)
    }

    /// (d) mutual KD on the BM25 subsample; moves rankers, QA model and prompts.
    fn mkd_step(
        &mut self,
        state: &mut TrainState,
        epoch: usize,
        edges: &KDEdgeSet,
        gate: Option<&Scoreboard>,
        batch: &[usize],
    ) -> Result<f64> {
        let mut prepared = Vec::with_capacity(batch.len());
        for &i in batch {
            let inst = self.data.train[i].clone();
            let set = self.candidates(&inst, &format!("stage2/{epoch}/{}", inst.id()))?;
            let selection = self.meta_selection(state, &inst)?;
            prepared.push((inst, set, selection));
        }
        let vocab = &self.data.vocab;
        let mut tape = Tape::new();
        let rb = state.retriever.params.bind(&mut tape);
        let cb = state.reranker.params.bind(&mut tape);
        let mb = state.model.params.bind(&mut tape);
        let pb = state.pool.prompts.bind(&mut tape);
        let mut terms = Vec::new();
        for (inst, set, selection) in &prepared {
            let examples: Vec<&QAInstance> = set.examples.iter().map(|&e| &self.data.train[e]).collect();
            let hints = set.hint_texts()?;
            let prefix = selection.as_ref().map(|s| state.pool.compose_on(&mut tape, &pb, s));
            let mut scores = BTreeMap::new();
            scores.insert(ModelTag::R1, state.retriever.scores_on(&mut tape, &rb, vocab, inst, &examples));
            scores.insert(
                ModelTag::R2,
                state.reranker.scores_on(&mut tape, &cb, vocab, &self.data.train, set, inst)?,
            );
            scores.insert(
                ModelTag::F,
                state.model.candidate_scores_on(&mut tape, &mb, vocab, inst, prefix, &hints)?,
            );
            let term = match gate {
                Some(board) => gated_kd_loss_on(&mut tape, &scores, board, epoch)?,
                None => mutual_kd_loss_on(&mut tape, &scores, edges)?,
            };
            terms.extend(term);
        }
        if terms.is_empty() {
            return Ok(0.0);
        }
        let total = tape.concat_rows(&terms);
        let total = tape.sum(total);
        let loss = tape.scale(total, 1.0 / prepared.len() as f64);
        let value = tape.scalar(loss);
        let weighted = tape.scale(loss, self.config().train.mkd_loss_weight);
        let grads = tape.backward(weighted);
        let mut rbuf = GradBuffer::new(&state.retriever.params);
        rbuf.accumulate(&rb, &grads);
        let mut cbuf = GradBuffer::new(&state.reranker.params);
        cbuf.accumulate(&cb, &grads);
        let mut mbuf = GradBuffer::new(&state.model.params);
        mbuf.accumulate(&mb, &grads);
        let mut pbuf = GradBuffer::new(&state.pool.prompts);
        pbuf.accumulate(&pb, &grads);
        state.optim.retriever.step(&mut state.retriever.params, &rbuf);
        state.optim.reranker.step(&mut state.reranker.params, &cbuf);
        state.optim.model.step(&mut state.model.params, &mbuf);
        state.optim.prompts.step(&mut state.pool.prompts, &pbuf);
        Ok(value)
    }

    /// Stage I (if not done) followed by Stage II.
    pub fn train(&mut self, state: &mut TrainState, stop_after: Option<usize>) -> Result<()> {
        if state.stage1_done < self.config().train.stage1_epochs {
            self.run_stage1(state)?;
        }
        self.run_stage2(state, stop_after)?;
        self.write_run_log(state)
    }

    /// Predicts every test instance and aggregates per-task scores.
    pub fn evaluate_suite(&mut self, state: &TrainState) -> Result<Evaluation> {
        let index = state.retriever.index(&self.data.vocab, &self.data.train);
        let test = self.data.test.clone();
        let mut per_task: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut predictions = Vec::with_capacity(test.len());
        for inst in &test {
            let prefix = self.meta_selection(state, inst)?.map(|s| state.pool.compose_meta_prompt(&s));
            let kp = self.knowledge_prompt(state, &index, inst)?;
            let prediction = state.model.predict(&self.data.vocab, inst, prefix.as_ref(), &kp);
            let metric = self
                .data
                .metrics
                .get(&inst.task_id)
                .copied()
                .unwrap_or(MetricKind::default_for(inst.format));
            let score = score_prediction(metric, &prediction, Gold::of(inst))?;
            let slot = per_task.entry(inst.task_id.clone()).or_default();
            slot.0 += score;
            slot.1 += 1;
            predictions.push(Prediction {
                instance_id: inst.id(),
                task_id: inst.task_id.clone(),
                prediction,
                score,
            });
        }
        let per_task: BTreeMap<String, f64> = per_task.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect();
        let manifest = &self.data.manifest;
        let seen = manifest.seen_task_ids.len();
        let eval = &self.config().eval;
        let summary = aggregate(&per_task, manifest, eval.head_m.min(seen), eval.tail_n.min(seen))?;
        let frequency = selection_frequency(&test, &state.pool, &self.data.encoder)?;
        Ok(Evaluation {
            summary,
            frequency,
            predictions,
        })
    }

    fn meta(&self, state: &TrainState) -> CheckpointMeta {
        CheckpointMeta {
            manifest_hash: self.data.manifest.hash(),
            vocab: self.data.vocab.fingerprint(),
            pool: state.pool.fingerprint(),
            model: state.model.params.fingerprint(),
            retriever: state.retriever.params.fingerprint(),
            reranker: state.reranker.params.fingerprint(),
            seed: self.config().train.seed,
            ablation: self.config().train.ablation,
        }
    }

    fn save_checkpoint(&self, state: &TrainState, name: &str) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let ckpt = Checkpoint {
            meta: self.meta(state),
            state: state.clone(),
        };
        let path = ckpt_dir.join(format!("{name}.json"));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.data.manifest.save(&dir.join(MANIFEST_FILE))?;
        self.write_run_log(state)
    }

    pub fn write_run_log(&self, state: &TrainState) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(RUN_LOG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&state.log)?).map_err(|e| Error::io(&path, e))
    }

    /// Latest checkpoint in the run directory, verified against this run's
    /// data and settings.
    pub fn load_latest(&self) -> Result<Option<TrainState>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let Some(path) = latest_checkpoint(dir)? else { return Ok(None) };
        self.load_checkpoint(&path).map(Some)
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<TrainState> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let expected = self.meta(&ckpt.state);
        let m = &ckpt.meta;
        let check = |what: &str, stored: &str, now: &str| {
            if stored == now {
                Ok(())
            } else {
                Err(Error::Mismatch(format!(
                    "{}: {what} hash {stored} does not match {now}",
                    path.display()
                )))
            }
        };
        check("manifest", &m.manifest_hash, &expected.manifest_hash)?;
        check("vocabulary", &m.vocab, &expected.vocab)?;
        check("prompt pool", &m.pool, &expected.pool)?;
        check("model", &m.model, &expected.model)?;
        check("retriever", &m.retriever, &expected.retriever)?;
        check("reranker", &m.reranker, &expected.reranker)?;
        if m.seed != expected.seed || m.ablation != expected.ablation {
            return Err(Error::Mismatch(format!(
                "{}: checkpoint was trained with seed {} / {}, run asks for seed {} / {}",
                path.display(),
                m.seed,
                m.ablation.as_str(),
                expected.seed,
                expected.ablation.as_str()
            )));
        }
        Ok(ckpt.state)
    }
}

/// Highest `s{stage}-{epoch}.json` in `dir/checkpoints`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    if !ckpt_dir.exists() {
        return Ok(None);
    }
    let mut names: Vec<String> = std::fs::read_dir(&ckpt_dir)
        .map_err(|e| Error::io(&ckpt_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('s') && n.ends_with(".json"))
        .collect();
    names.sort();
    Ok(names.pop().map(|n| ckpt_dir.join(n)))
}

fn mean_on(tape: &mut Tape, terms: &[Var]) -> Var {
    let column = tape.concat_rows(terms);
    let total = tape.sum(column);
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Compact state fingerprint for tests and logs.
pub fn state_fingerprint(state: &TrainState) -> String {
    crate::util::hex_digest(&[
        state.retriever.params.fingerprint().as_bytes(),
        state.reranker.params.fingerprint().as_bytes(),
        state.pool.fingerprint().as_bytes(),
        state.model.params.fingerprint().as_bytes(),
    ])
}
