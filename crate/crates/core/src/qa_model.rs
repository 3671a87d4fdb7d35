//! Prompt-conditioned encoder-decoder QA model.
//!
//! The encoder reads a soft prefix (the composed meta prompt) followed by hard
//! tokens `[knowledge prompt] SEP [context] SEP [question]`. The decoder
//! mixes a vocabulary softmax with a copy distribution over source tokens,
//! weighted by a learned gate; switching the copy path off leaves a plain
//! softmax decoder.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, key_padding_mask, Attention, FeedForward};
use crate::metrics::render_options;
use crate::miner::KnowledgePrompt;
use crate::oracle::{ModelTag, ScoringDistribution};
use crate::params::{Bound, ParamId, ParamSet};
use crate::task_registry::{Format, QAInstance};
use crate::text::{Vocab, BOS, EOS, PAD, SEP};
use crate::util::rng_for;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Budget for hard source tokens (knowledge prompt, context, question).
    pub max_source_len: usize,
    /// Answer tokens kept, before the end-of-sequence marker.
    pub max_target_len: usize,
    /// Longest soft prefix the position table must cover.
    pub max_prefix_len: usize,
    pub copy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_source_len: 192,
            max_target_len: 16,
            max_prefix_len: 64,
            copy: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ffn_dim == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.max_source_len < 8 || self.max_target_len == 0 {
            return Err(Error::Config(
                "model.max_source_len must be at least 8 and max_target_len positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderLayer {
    attention: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderLayer {
    self_attention: Attention,
    cross_attention: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QAModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    embedding: ParamId,
    source_position: ParamId,
    target_position: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    vocab_size: usize,
    #[serde(skip)]
    truncations: Arc<AtomicUsize>,
}

/// Hard source tokens after truncation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceTokens {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

struct Encoded {
    memory: Var,
    /// Vocabulary id per source position; `None` for soft-prefix and padding.
    source_vocab: Vec<Option<usize>>,
    valid: usize,
}

impl QAModel {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "qa_model");
        let d = config.dim;
        let mut params = ParamSet::new();
        let embedding = params.add_normal("embedding", vocab_size, d, 0.3, &mut rng);
        let source_position = params.add_normal(
            "source_position",
            config.max_prefix_len + config.max_source_len + 1,
            d,
            0.05,
            &mut rng,
        );
        let target_position = params.add_normal("target_position", config.max_target_len + 2, d, 0.05, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                attention: Attention::new(&mut params, &format!("encoder.{i}.attention"), d, &mut rng),
                ffn: FeedForward::new(&mut params, &format!("encoder.{i}.ffn"), d, config.ffn_dim, &mut rng),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer {
                self_attention: Attention::new(&mut params, &format!("decoder.{i}.self"), d, &mut rng),
                cross_attention: Attention::new(&mut params, &format!("decoder.{i}.cross"), d, &mut rng),
                ffn: FeedForward::new(&mut params, &format!("decoder.{i}.ffn"), d, config.ffn_dim, &mut rng),
            })
            .collect();
        let out_w = params.add_glorot("output.w", d, vocab_size, &mut rng);
        let out_b = params.add("output.b", Array2::zeros((1, vocab_size)));
        let gate_w = params.add_glorot("gate.w", d, 1, &mut rng);
        let gate_b = params.add("gate.b", Array2::zeros((1, 1)));
        Ok(Self {
            config,
            params,
            embedding,
            source_position,
            target_position,
            encoder,
            decoder,
            out_w,
            out_b,
            gate_w,
            gate_b,
            vocab_size,
            truncations: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of inputs cut to fit the source budget so far.
    pub fn truncations(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Zeroes the output layer so the vocabulary softmax is uniform.
    pub fn zero_output(&mut self) {
        self.params.get_mut(self.out_w).fill(0.0);
        self.params.get_mut(self.out_b).fill(0.0);
    }

    /// `[knowledge] SEP [context] SEP [question (+ options)]`. Over budget,
    /// the context loses its tail first, then hints are dropped from the
    /// end; the question is never cut.
    pub fn source_tokens(&self, vocab: &Vocab, instance: &QAInstance, knowledge: &KnowledgePrompt) -> SourceTokens {
        let mut question = instance.question.clone();
        if instance.format == Format::MultipleChoice {
            if let Some(options) = &instance.options {
                question.push(' ');
                question.push_str(&render_options(options));
            }
        }
        let question = vocab.encode(&question);
        let mut context = vocab.encode(&instance.context);
        let mut hints: Vec<Vec<usize>> = knowledge.hints.iter().map(|h| vocab.encode(h)).collect();
        let hints_len = |h: &Vec<Vec<usize>>| h.iter().map(|x| x.len() + 1).sum::<usize>();
        let total = |h: &Vec<Vec<usize>>, c: &Vec<usize>| hints_len(h) + c.len() + 1 + question.len();
        let budget = self.config.max_source_len;
        let mut truncated = false;
        if total(&hints, &context) > budget {
            truncated = true;
            let excess = total(&hints, &context) - budget;
            let keep = context.len().saturating_sub(excess);
            context.truncate(keep);
            while total(&hints, &context) > budget && !hints.is_empty() {
                hints.pop();
            }
        }
        if truncated {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        let mut ids = Vec::with_capacity(total(&hints, &context));
        for h in &hints {
            ids.extend(h);
            ids.push(SEP);
        }
        ids.extend(&context);
        ids.push(SEP);
        ids.extend(&question);
        SourceTokens { ids, truncated }
    }

    /// Answer tokens (capped) followed by the end marker.
    pub fn target_ids(&self, vocab: &Vocab, answer: &str) -> Vec<usize> {
        let mut ids = vocab.encode(answer);
        ids.truncate(self.config.max_target_len);
        ids.push(EOS);
        ids
    }

    fn encode(&self, tape: &mut Tape, bound: &Bound, prefix: Option<Var>, ids: &[usize], pad_to: usize) -> Encoded {
        let mut padded = ids.to_vec();
        padded.resize(ids.len().max(pad_to), PAD);
        let tok = tape.gather(bound.var(self.embedding), &padded);
        let (x, prefix_len) = match prefix {
            Some(p) => {
                let n = tape.value(p).nrows();
                (tape.concat_rows(&[p, tok]), n)
            }
            None => (tok, 0),
        };
        let total = tape.value(x).nrows();
        let max_pos = tape.value(bound.var(self.source_position)).nrows() - 1;
        let positions: Vec<usize> = (0..total).map(|i| i.min(max_pos)).collect();
        let pos = tape.gather(bound.var(self.source_position), &positions);
        let mut h = tape.add(x, pos);
        let valid = prefix_len + ids.len();
        let mask = (total > valid).then(|| key_padding_mask(total, total, valid));
        for layer in &self.encoder {
            h = layer.attention.forward(tape, bound, h, h, mask.as_ref()).hidden;
            h = layer.ffn.forward(tape, bound, h);
        }
        let mut source_vocab = vec![None; prefix_len];
        source_vocab.extend(padded.iter().enumerate().map(|(i, &t)| (i < ids.len()).then_some(t)));
        Encoded {
            memory: h,
            source_vocab,
            valid,
        }
    }

    /// Log-probabilities `T × V` for each decoder input position.
    fn decode(&self, tape: &mut Tape, bound: &Bound, enc: &Encoded, inputs: &[usize]) -> Var {
        let t = inputs.len();
        let s = enc.source_vocab.len();
        let tok = tape.gather(bound.var(self.embedding), inputs);
        let max_pos = tape.value(bound.var(self.target_position)).nrows() - 1;
        let positions: Vec<usize> = (0..t).map(|i| i.min(max_pos)).collect();
        let pos = tape.gather(bound.var(self.target_position), &positions);
        let mut h = tape.add(tok, pos);
        let self_mask = causal_mask(t, t);
        let cross_mask = (s > enc.valid).then(|| key_padding_mask(t, s, enc.valid));
        let mut cross_weights = None;
        for layer in &self.decoder {
            h = layer.self_attention.forward(tape, bound, h, h, Some(&self_mask)).hidden;
            let cross = layer.cross_attention.forward(tape, bound, h, enc.memory, cross_mask.as_ref());
            h = cross.hidden;
            cross_weights = Some(cross.weights);
            h = layer.ffn.forward(tape, bound, h);
        }
        let logits = tape.matmul(h, bound.var(self.out_w));
        let logits = tape.add_row(logits, bound.var(self.out_b));
        if !self.config.copy {
            return tape.log_softmax_rows(logits);
        }
        let vocab_probs = tape.softmax_rows(logits);
        let mut onehot = Array2::zeros((s, self.vocab_size));
        for (i, v) in enc.source_vocab.iter().enumerate() {
            if let Some(v) = v {
                onehot[[i, *v]] = 1.0;
            }
        }
        let onehot = tape.constant(onehot);
        let copy_probs = tape.matmul(cross_weights.expect("at least one decoder layer"), onehot);
        let g = tape.matmul(h, bound.var(self.gate_w));
        let g = tape.add_row(g, bound.var(self.gate_b));
        let g = tape.sigmoid(g);
        let ones = tape.constant(Array2::ones((1, self.vocab_size)));
        let gate = tape.matmul(g, ones);
        let generated = tape.mul(vocab_probs, gate);
        let negated = tape.scale(gate, -1.0);
        let complement = tape.add_const(negated, &Array2::ones((t, self.vocab_size)));
        let copied = tape.mul(copy_probs, complement);
        let mixed = tape.add(generated, copied);
        tape.log_floor(mixed, PROB_FLOOR)
    }

    /// Summed negative log-likelihood of `target` (1 × 1).
    pub fn nll_on(&self, tape: &mut Tape, bound: &Bound, prefix: Option<Var>, source: &[usize], target: &[usize], pad_to: usize) -> Var {
        let enc = self.encode(tape, bound, prefix, source, pad_to);
        let mut inputs = vec![BOS];
        inputs.extend(&target[..target.len() - 1]);
        let logp = self.decode(tape, bound, &enc, &inputs);
        let entries: Vec<(usize, usize)> = target.iter().enumerate().map(|(t, &y)| (t, y)).collect();
        let picked = tape.pick(logp, &entries);
        let total = tape.sum(picked);
        tape.scale(total, -1.0)
    }

    /// `log p_F(a | [P_m; P_k; c; q])` on the tape (1 × 1).
    pub fn answer_log_prob_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        vocab: &Vocab,
        instance: &QAInstance,
        prefix: Option<Var>,
        knowledge: &KnowledgePrompt,
    ) -> Var {
        let source = self.source_tokens(vocab, instance, knowledge);
        let target = self.target_ids(vocab, &instance.answer);
        let nll = self.nll_on(tape, bound, prefix, &source.ids, &target, 0);
        tape.scale(nll, -1.0)
    }

    /// Mean answer NLL over a batch, each item with its own prefix and prompt.
    pub fn qa_loss_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        vocab: &Vocab,
        batch: &[(&QAInstance, Option<Var>, &KnowledgePrompt)],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let terms: Vec<Var> = batch
            .iter()
            .map(|(inst, prefix, kp)| {
                let lp = self.answer_log_prob_on(tape, bound, vocab, inst, *prefix, kp);
                tape.scale(lp, -1.0)
            })
            .collect();
        let column = tape.concat_rows(&terms);
        let total = tape.sum(column);
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// Value-only version of [`Self::qa_loss_on`] with fixed prefixes.
    pub fn qa_loss(&self, vocab: &Vocab, batch: &[(&QAInstance, Option<&Array2<f64>>, &KnowledgePrompt)]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let items: Vec<(&QAInstance, Option<Var>, &KnowledgePrompt)> = batch
            .iter()
            .map(|(i, p, k)| (*i, p.map(|p| tape.constant(p.clone())), *k))
            .collect();
        let loss = self.qa_loss_on(&mut tape, &bound, vocab, &items)?;
        Ok(tape.scalar(loss))
    }

    pub fn answer_log_prob(&self, vocab: &Vocab, instance: &QAInstance, prefix: Option<&Array2<f64>>, knowledge: &KnowledgePrompt) -> f64 {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let p = prefix.map(|p| tape.constant(p.clone()));
        let v = self.answer_log_prob_on(&mut tape, &bound, vocab, instance, p, knowledge);
        tape.scalar(v)
    }

    /// `1 × k` row of `log p_F(a | [P_m; h_i; c; q])`, one per hint.
    pub fn candidate_scores_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        vocab: &Vocab,
        instance: &QAInstance,
        prefix: Option<Var>,
        hints: &[&str],
    ) -> Result<Var> {
        if hints.is_empty() {
            return Err(Error::invalid("empty candidate set"));
        }
        let cols: Vec<Var> = hints
            .iter()
            .map(|h| {
                let kp = KnowledgePrompt::new(vec![h.to_string()]);
                self.answer_log_prob_on(tape, bound, vocab, instance, prefix, &kp)
            })
            .collect();
        let column = tape.concat_rows(&cols);
        Ok(tape.transpose(column))
    }

    /// `p_f` over candidates whose hints act as pseudo knowledge prompts.
    pub fn qa_candidate_distribution(
        &self,
        vocab: &Vocab,
        instance: &QAInstance,
        hints: &[Option<&str>],
        prefix: Option<&Array2<f64>>,
    ) -> Result<ScoringDistribution> {
        let hints: Vec<&str> = hints
            .iter()
            .copied()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::precondition(format!("hints missing for candidates of {}", instance.id())))?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let p = prefix.map(|p| tape.constant(p.clone()));
        let row = self.candidate_scores_on(&mut tape, &bound, vocab, instance, p, &hints)?;
        ScoringDistribution::from_scores(ModelTag::F, tape.value(row).row(0).as_slice().expect("contiguous row"))
    }

    /// Greedy decoding up to `max_target_len` tokens.
    pub fn predict(&self, vocab: &Vocab, instance: &QAInstance, prefix: Option<&Array2<f64>>, knowledge: &KnowledgePrompt) -> String {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let p = prefix.map(|p| tape.constant(p.clone()));
        let source = self.source_tokens(vocab, instance, knowledge);
        let enc = self.encode(&mut tape, &bound, p, &source.ids, 0);
        let mut inputs = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..self.config.max_target_len {
            let logp = self.decode(&mut tape, &bound, &enc, &inputs);
            let last = tape.value(logp).row(inputs.len() - 1).to_owned();
            // Padding, unknown and separator tokens are never emitted.
            let mut best = EOS;
            for (i, v) in last.iter().enumerate() {
                if (i == EOS || i > SEP) && *v > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            inputs.push(best);
        }
        vocab.decode(&out)
    }
}
