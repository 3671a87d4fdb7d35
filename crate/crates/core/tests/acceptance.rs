//! Acceptance run: every criterion executes in sequence, prints one
//! PASS/FAIL line, and the test fails if any criterion fails.
//!
//! Expected values come from independent re-implementations in this file
//! (exhaustive scorers, formula-level losses, finite differences) rather
//! than from the code under test.

mod common;

use common::{desk_config, grad_mass, inst, tiny_config};
use ndarray::Array2;
use oltqa_core::autodiff::Tape;
use oltqa_core::config::Ablation;
use oltqa_core::distill::{kl_divergence, kl_on_tape, mutual_kd_loss_on, stage1_loss_on, KDEdgeSet, Scoreboard};
use oltqa_core::metrics::{bleu, f1_token_overlap, rouge_l, score_prediction, Gold};
use oltqa_core::miner::{
    ranker_distribution, retrieval_text, Bm25Index, CandidateSet, Provenance, RankerConfig, Reranker, Retriever, BM25_B, BM25_K1,
};
use oltqa_core::oracle::{lm_distribution, Hint, HintCache, MockOracle, ModelTag, ScoringDistribution};
use oltqa_core::prompt_pool::{MetaPromptPool, PoolConfig, QueryVector};
use oltqa_core::qa_model::{ModelConfig, QAModel};
use oltqa_core::task_registry::{downsample_tasks, Format, MetricKind, QAInstance, TaskSpec};
use oltqa_core::text::{tokenize, Vocab};
use oltqa_core::trainer::{prepare, Run, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    check(start.elapsed() < limit, format!("took {secs:.1}s, limit {}s", limit.as_secs()))?;
    Ok(secs)
}

// ---------------------------------------------------------------- criterion 1

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Key loss straight from its definition.
fn key_loss_reference(keys: &Array2<f64>, x: &[f64], sel: &[usize], eta: f64, gamma: f64) -> f64 {
    let row = |i: usize| keys.row(i).to_vec();
    let pull: f64 = sel.iter().map(|&i| (cos_dist(&row(i), x) - eta).max(0.0)).sum();
    let mut push = 0.0;
    for &i in sel {
        for &j in sel {
            if i != j {
                push += (gamma - cos_dist(&row(i), &row(j))).max(0.0);
            }
        }
    }
    pull + push / (sel.len() * sel.len()) as f64
}

fn near_kink(keys: &Array2<f64>, x: &[f64], sel: &[usize], eta: f64, gamma: f64) -> bool {
    let row = |i: usize| keys.row(i).to_vec();
    sel.iter().any(|&i| (cos_dist(&row(i), x) - eta).abs() < 1e-3)
        || sel
            .iter()
            .any(|&i| sel.iter().any(|&j| i != j && (cos_dist(&row(i), &row(j)) - gamma).abs() < 1e-3))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut active_push = 0;
    while checked < 100 {
        let size = rng.random_range(3..9);
        let select = rng.random_range(2..=size.min(5));
        let dim = rng.random_range(3..9);
        let config = PoolConfig {
            size,
            select_count: select,
            prompt_len: 1,
            ..PoolConfig::default()
        };
        let mut pool = MetaPromptPool::new(config, dim, 2, rng.random()).map_err(|e| e.to_string())?;
        // Keys cluster around two centres so both hinge families are active.
        let centres: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let keys = Array2::from_shape_fn((size, dim), |(i, j)| centres[i % 2][j] + rng.random_range(-0.3..0.3));
        *pool.keys.get_mut(pool.key_id()) = keys.clone();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = QueryVector(x.clone());
        let sel = pool.select_keys(&q).map_err(|e| e.to_string())?;
        let (eta, gamma) = (pool.config.eta, pool.config.gamma);
        if near_kink(&keys, &x, &sel, eta, gamma) {
            continue;
        }
        let (loss, grad) = pool.key_loss_and_grad(&q, &sel).map_err(|e| e.to_string())?;
        let reference = key_loss_reference(&keys, &x, &sel, eta, gamma);
        check((loss - reference).abs() < 1e-12, format!("loss {loss} vs reference {reference}"))?;
        if sel.iter().any(|&i| {
            sel.iter()
                .any(|&j| i != j && cos_dist(&keys.row(i).to_vec(), &keys.row(j).to_vec()) < gamma)
        }) {
            active_push += 1;
        }
        let h = 1e-6;
        for i in 0..size {
            for j in 0..dim {
                let mut plus = keys.clone();
                plus[[i, j]] += h;
                let mut minus = keys.clone();
                minus[[i, j]] -= h;
                let numeric =
                    (key_loss_reference(&plus, &x, &sel, eta, gamma) - key_loss_reference(&minus, &x, &sel, eta, gamma)) / (2.0 * h);
                let analytic = grad[[i, j]];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                check(rel < 1e-4, format!("key {i} dim {j}: analytic {analytic} numeric {numeric}"))?;
            }
        }
        checked += 1;
    }
    check(active_push > 0, "no configuration exercised the separation hinge")?;

    // Margin-satisfying configurations: margins set just past the realised distances.
    for trial in 0..100 {
        let dim = rng.random_range(2..8);
        let size = rng.random_range(2..7);
        let select = rng.random_range(1..=size);
        let keys = Array2::from_shape_fn((size, dim), |_| rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sel: Vec<usize> = (0..select).collect();
        let max_pull = sel.iter().map(|&i| cos_dist(&keys.row(i).to_vec(), &x)).fold(0.0, f64::max);
        let min_pair = sel
            .iter()
            .flat_map(|&i| sel.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
            .map(|(i, j)| cos_dist(&keys.row(i).to_vec(), &keys.row(j).to_vec()))
            .fold(f64::INFINITY, f64::min);
        let config = PoolConfig {
            size,
            select_count: select,
            prompt_len: 1,
            eta: max_pull + 1e-9,
            gamma: if min_pair.is_finite() { (min_pair - 1e-9).max(0.0) } else { 0.3 },
            init_std: 0.1,
        };
        let mut pool = MetaPromptPool::new(config, dim, 2, trial).map_err(|e| e.to_string())?;
        *pool.keys.get_mut(pool.key_id()) = keys;
        let (loss, grad) = pool.key_loss_and_grad(&QueryVector(x), &sel).map_err(|e| e.to_string())?;
        check(loss == 0.0, format!("margin-satisfying trial {trial} has loss {loss}"))?;
        check(
            grad.iter().all(|g| *g == 0.0),
            format!("margin-satisfying trial {trial} has a gradient"),
        )?;
    }
    let secs = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "100 configs, worst relative error {worst:.2e}, 100 zero-loss configs, {secs:.2}s"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn softmax_reference(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn check_distribution(tag: ModelTag, scores: &[f64], probs: &[f64], shift: f64) -> Result<(), String> {
    let total: f64 = probs.iter().sum();
    check((total - 1.0).abs() <= 1e-6, format!("{} sums to {total}", tag.as_str()))?;
    let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
    let again = ScoringDistribution::from_scores(tag, &shifted).map_err(|e| e.to_string())?;
    for (a, b) in probs.iter().zip(&again.probabilities) {
        check((a - b).abs() <= 1e-9, format!("{} not shift invariant: {a} vs {b}", tag.as_str()))?;
    }
    check(argmax(probs) == argmax(&again.probabilities), "argmax moved under shift")?;
    for (a, b) in probs.iter().zip(softmax_reference(scores)) {
        check((a - b).abs() <= 1e-12, format!("{} differs from reference softmax", tag.as_str()))?;
    }
    Ok(())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Real producers on a miniature pool.
    let pool: Vec<QAInstance> = (0..6)
        .map(|i| {
            inst(
                "t",
                i,
                &format!("ent{i} has color red"),
                &format!("what color does ent{} have", i % 3),
                "red",
            )
        })
        .collect();
    let query = inst("q", 0, "ent1 notes", "which color is linked to ent1", "red");
    let vocab = Vocab::build(
        pool.iter()
            .map(|p| p.question.as_str())
            .chain(pool.iter().map(|p| p.context.as_str())),
    );
    let oracle = MockOracle::new(3);
    let mut cache = HintCache::in_memory();
    let mut set = CandidateSet::new(query.id(), (0..6).collect(), Provenance::Bm25Pool);
    set.fill_hints(&pool, &query, &oracle, &mut cache).map_err(|e| e.to_string())?;
    let refs: Vec<&QAInstance> = pool.iter().collect();
    let lm = lm_distribution(&refs, &query, &oracle, &mut cache).map_err(|e| e.to_string())?;
    let lm_scores: Vec<f64> = refs
        .iter()
        .map(|e| cache.cached_score(&e.id(), &query.id()).expect("scored"))
        .collect();
    let rcfg = RankerConfig {
        dim: 8,
        reranker_max_len: 40,
        retrieve: 4,
        hints: 2,
        ..RankerConfig::default()
    };
    let retriever = Retriever::new(vocab.len(), &rcfg, 5);
    let reranker = Reranker::new(vocab.len(), &rcfg, 5);
    let r1 = ranker_distribution(ModelTag::R1, &retriever, &reranker, &vocab, &pool, &set, &query).map_err(|e| e.to_string())?;
    let r2 = ranker_distribution(ModelTag::R2, &retriever, &reranker, &vocab, &pool, &set, &query).map_err(|e| e.to_string())?;
    let r1_scores = retriever.scores(&vocab, &query, &refs);
    let r2_scores = reranker.scores(&vocab, &pool, &set, &query).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig {
        dim: 8,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        max_source_len: 48,
        max_target_len: 4,
        max_prefix_len: 4,
        copy: true,
    };
    let model = QAModel::new(mcfg, vocab.len(), 5).map_err(|e| e.to_string())?;
    let hints = set.hint_texts().map_err(|e| e.to_string())?;
    let opt_hints: Vec<Option<&str>> = hints.iter().map(|h| Some(*h)).collect();
    let f = model
        .qa_candidate_distribution(&vocab, &query, &opt_hints, None)
        .map_err(|e| e.to_string())?;
    let f_scores: Vec<f64> = hints
        .iter()
        .map(|h| model.answer_log_prob(&vocab, &query, None, &oltqa_core::miner::KnowledgePrompt::new(vec![h.to_string()])))
        .collect();
    for (tag, scores, dist) in [
        (ModelTag::Lm, &lm_scores, &lm.probabilities),
        (ModelTag::R1, &r1_scores, &r1.probabilities),
        (ModelTag::R2, &r2_scores, &r2.probabilities),
        (ModelTag::F, &f_scores, &f.probabilities),
    ] {
        check_distribution(tag, scores, dist, 123.456)?;
    }

    // Random score vectors, wide magnitudes.
    for _ in 0..1000 {
        let k = rng.random_range(1..40);
        let scale = 10f64.powi(rng.random_range(-2..4));
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let tag = [ModelTag::Lm, ModelTag::R1, ModelTag::R2, ModelTag::F][rng.random_range(0..4)];
        let d = ScoringDistribution::from_scores(tag, &scores).map_err(|e| e.to_string())?;
        check_distribution(tag, &scores, &d.probabilities, rng.random_range(-1e3..1e3))?;
    }

    // KL on 1000 random pairs against a direct sum.
    let mut equal_pairs = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..30);
        let p = softmax_reference(&(0..k).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>());
        let same = rng.random_bool(0.2);
        let q = if same {
            p.clone()
        } else {
            softmax_reference(&(0..k).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>())
        };
        let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        let reference: f64 = p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum();
        check(kl >= 0.0, format!("negative KL {kl}"))?;
        check((kl - reference).abs() < 1e-9, format!("KL {kl} vs reference {reference}"))?;
        if p == q {
            equal_pairs += 1;
            check(kl == 0.0, format!("KL of equal distributions is {kl}"))?;
        } else {
            check(kl > 0.0, "KL of distinct distributions is zero")?;
        }
    }
    let secs = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "4 producers + 1000 score vectors normalise, 1000 KL pairs ({equal_pairs} equal), {secs:.2}s"
    ))
}

// ---------------------------------------------------------------- criterion 3

struct Mini {
    pool: Vec<QAInstance>,
    query: QAInstance,
    vocab: Vocab,
    set: CandidateSet,
    retriever: Retriever,
    reranker: Reranker,
    model: QAModel,
    prompts: MetaPromptPool,
}

fn mini() -> Mini {
    let pool: Vec<QAInstance> = (0..5)
        .map(|i| {
            inst(
                "lookup",
                i,
                &format!("ent{i} has pet owl"),
                &format!("what pet does ent{i} have"),
                "owl",
            )
        })
        .collect();
    let query = inst("open_pet", 0, "notes about ent2", "which pet is linked to ent2", "owl");
    let vocab = Vocab::build(
        pool.iter()
            .flat_map(|p| [p.question.as_str(), p.context.as_str(), p.answer.as_str()])
            .chain([query.question.as_str(), query.context.as_str(), "cat"]),
    );
    let mut set = CandidateSet::new(query.id(), (0..5).collect(), Provenance::Bm25Pool);
    for (i, h) in set.hints.iter_mut().enumerate() {
        *h = Some(Hint {
            text: if i % 2 == 0 { "owl".into() } else { "cat".into() },
            source_example_id: pool[i].id(),
        });
    }
    let rcfg = RankerConfig {
        dim: 8,
        reranker_max_len: 40,
        retrieve: 4,
        hints: 2,
        ..RankerConfig::default()
    };
    let mcfg = ModelConfig {
        dim: 8,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        max_source_len: 48,
        max_target_len: 4,
        max_prefix_len: 4,
        copy: true,
    };
    let pcfg = PoolConfig {
        size: 4,
        select_count: 2,
        prompt_len: 2,
        ..PoolConfig::default()
    };
    Mini {
        retriever: Retriever::new(vocab.len(), &rcfg, 11),
        reranker: Reranker::new(vocab.len(), &rcfg, 11),
        model: QAModel::new(mcfg, vocab.len(), 11).expect("model"),
        prompts: MetaPromptPool::new(pcfg, 6, 8, 11).expect("pool"),
        pool,
        query,
        vocab,
        set,
    }
}

/// Gradient mass per model (F includes its meta prompts) for a KD graph.
fn kd_probe(m: &Mini, edges: &KDEdgeSet) -> Result<BTreeMap<ModelTag, f64>, String> {
    let mut tape = Tape::new();
    let rb = m.retriever.params.bind(&mut tape);
    let cb = m.reranker.params.bind(&mut tape);
    let mb = m.model.params.bind(&mut tape);
    let pb = m.prompts.prompts.bind(&mut tape);
    let refs: Vec<&QAInstance> = m.set.examples.iter().map(|&e| &m.pool[e]).collect();
    let hints = m.set.hint_texts().map_err(|e| e.to_string())?;
    let prefix = m.prompts.compose_on(&mut tape, &pb, &[0, 2]);
    let mut scores = BTreeMap::new();
    scores.insert(ModelTag::R1, m.retriever.scores_on(&mut tape, &rb, &m.vocab, &m.query, &refs));
    scores.insert(
        ModelTag::R2,
        m.reranker
            .scores_on(&mut tape, &cb, &m.vocab, &m.pool, &m.set, &m.query)
            .map_err(|e| e.to_string())?,
    );
    scores.insert(
        ModelTag::F,
        m.model
            .candidate_scores_on(&mut tape, &mb, &m.vocab, &m.query, Some(prefix), &hints)
            .map_err(|e| e.to_string())?,
    );
    let mut out = BTreeMap::from([(ModelTag::R1, 0.0), (ModelTag::R2, 0.0), (ModelTag::F, 0.0)]);
    let Some(loss) = mutual_kd_loss_on(&mut tape, &scores, edges).map_err(|e| e.to_string())? else {
        return Ok(out);
    };
    let grads = tape.backward(loss);
    out.insert(ModelTag::R1, grad_mass(&grads, &rb, &m.retriever.params));
    out.insert(ModelTag::R2, grad_mass(&grads, &cb, &m.reranker.params));
    out.insert(
        ModelTag::F,
        grad_mass(&grads, &mb, &m.model.params) + grad_mass(&grads, &pb, &m.prompts.prompts),
    );
    Ok(out)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let m = mini();
    let refs: Vec<&QAInstance> = m.set.examples.iter().map(|&e| &m.pool[e]).collect();

    // Ranker pre-training loss: the oracle distribution is produced by a
    // parameterised node here, and must receive nothing.
    let mut tape = Tape::new();
    let rb = m.retriever.params.bind(&mut tape);
    let cb = m.reranker.params.bind(&mut tape);
    let lm_logits = tape.param(std::sync::Arc::new(ndarray::array![[0.3, -1.0, 2.0, 0.1, -0.4]]));
    let p_lm = tape.softmax_rows(lm_logits);
    let r1 = m.retriever.scores_on(&mut tape, &rb, &m.vocab, &m.query, &refs);
    let r2 = m
        .reranker
        .scores_on(&mut tape, &cb, &m.vocab, &m.pool, &m.set, &m.query)
        .map_err(|e| e.to_string())?;
    let a = kl_on_tape(&mut tape, p_lm, r1).map_err(|e| e.to_string())?;
    let b = kl_on_tape(&mut tape, p_lm, r2).map_err(|e| e.to_string())?;
    let loss = tape.add(a, b);
    let grads = tape.backward(loss);
    let lm_mass = grads.get(lm_logits).map_or(0.0, |g| g.iter().map(|v| v.abs()).sum());
    check(lm_mass == 0.0, format!("oracle-side producer received gradient {lm_mass}"))?;
    check(grad_mass(&grads, &rb, &m.retriever.params) > 0.0, "retriever received no gradient")?;
    check(grad_mass(&grads, &cb, &m.reranker.params) > 0.0, "reranker received no gradient")?;

    // The production loss takes oracle probabilities as plain values.
    let p_values = ScoringDistribution::from_scores(ModelTag::Lm, &[0.3, -1.0, 2.0, 0.1, -0.4]).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let rb = m.retriever.params.bind(&mut tape);
    let cb = m.reranker.params.bind(&mut tape);
    let r1 = m.retriever.scores_on(&mut tape, &rb, &m.vocab, &m.query, &refs);
    let r2 = m
        .reranker
        .scores_on(&mut tape, &cb, &m.vocab, &m.pool, &m.set, &m.query)
        .map_err(|e| e.to_string())?;
    let loss = stage1_loss_on(&mut tape, &p_values.probabilities, r1, r2).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss);
    check(
        grad_mass(&grads, &rb, &m.retriever.params) > 0.0,
        "stage-1 loss left the retriever untouched",
    )?;

    // Every single edge: the teacher gets nothing, the student gets something.
    let tags = [ModelTag::R1, ModelTag::R2, ModelTag::F];
    for &t in &tags {
        for &s in &tags {
            if t == s {
                continue;
            }
            let mass = kd_probe(&m, &KDEdgeSet::fixed(vec![(t, s)]))?;
            check(
                mass[&t] == 0.0,
                format!("teacher {} of {}->{} received {}", t.as_str(), t.as_str(), s.as_str(), mass[&t]),
            )?;
            check(
                mass[&s] > 0.0,
                format!("student {} of {}->{} received nothing", s.as_str(), t.as_str(), s.as_str()),
            )?;
        }
    }
    // Gated edge sets: models that only teach receive nothing.
    let mut probes = 6;
    for (v1, v2, vf) in [(-1.0, -2.0, -3.0), (-3.0, -1.0, -2.0), (-2.0, -2.0, -1.0), (-1.0, -1.0, -1.0)] {
        let board = Scoreboard::new(v1, v2, vf, 1).map_err(|e| e.to_string())?;
        let edges = KDEdgeSet::from_scoreboard(&board);
        let mass = kd_probe(&m, &edges)?;
        for &tag in &tags {
            let is_student = edges.edges.iter().any(|&(_, s)| s == tag);
            if is_student {
                check(mass[&tag] > 0.0, format!("student {} received nothing", tag.as_str()))?;
            } else {
                check(mass[&tag] == 0.0, format!("non-student {} received {}", tag.as_str(), mass[&tag]))?;
            }
        }
        probes += 1;
    }
    let secs = within(start, Duration::from_secs(30))?;
    Ok(format!("oracle producer detached, {probes} KD probes clean, {secs:.2}s"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let tags = [ModelTag::R1, ModelTag::R2, ModelTag::F];
    let mut seen_types: BTreeSet<Vec<usize>> = BTreeSet::new();
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let v = [a as f64, b as f64, c as f64];
                // Order type: rank of each value among the distinct values.
                let mut distinct: Vec<i64> = v.iter().map(|x| *x as i64).collect();
                distinct.sort_unstable();
                distinct.dedup();
                let order: Vec<usize> = v
                    .iter()
                    .map(|x| distinct.iter().position(|d| *d == *x as i64).expect("present"))
                    .collect();
                if !seen_types.insert(order) {
                    continue;
                }
                let board = Scoreboard::new(-10.0 + v[0], -10.0 + v[1], -10.0 + v[2], 1).map_err(|e| e.to_string())?;
                let got: BTreeSet<(ModelTag, ModelTag)> = KDEdgeSet::from_scoreboard(&board).edges.into_iter().collect();
                let mut want = BTreeSet::new();
                for i in 0..3 {
                    for j in 0..3 {
                        if v[i] > v[j] {
                            want.insert((tags[i], tags[j]));
                        }
                    }
                }
                check(got == want, format!("values {v:?}: edges {got:?}, expected {want:?}"))?;
            }
        }
    }
    check(seen_types.len() == 13, format!("enumerated {} order types", seen_types.len()))?;
    Ok("13 order types match the indicator table".into())
}

// ---------------------------------------------------------------- criterion 5

fn bm25_reference(pool: &[QAInstance], query: &QAInstance, c: usize) -> Vec<usize> {
    let docs: Vec<Vec<String>> = pool.iter().map(|d| tokenize(&retrieval_text(d))).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut df: HashMap<&str, f64> = HashMap::new();
    for d in &docs {
        for t in d.iter().map(String::as_str).collect::<BTreeSet<_>>() {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let q = tokenize(&retrieval_text(query));
    let mut scored: Vec<(f64, &str, usize, usize)> = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if pool[i].id() == query.id() {
            continue;
        }
        let mut s = 0.0;
        for t in &q {
            let tf = d.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let dfi = df[t.as_str()];
            let idf = (1.0 + (n - dfi + 0.5) / (dfi + 0.5)).ln();
            s += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * d.len() as f64 / avg));
        }
        scored.push((s, pool[i].task_id.as_str(), pool[i].offset, i));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    scored.into_iter().take(c).map(|s| s.3).collect()
}

fn matrix_by_name(set: &oltqa_core::params::ParamSet, name: &str) -> Array2<f64> {
    let id = set.ids().find(|&id| set.name(id) == name).expect("param present");
    set.get(id).clone()
}

fn encode_reference(emb: &Array2<f64>, proj: &Array2<f64>, scale: f64, vocab: &Vocab, text: &str) -> Vec<f64> {
    let mut ids = vocab.encode(text);
    if ids.is_empty() {
        ids.push(oltqa_core::text::UNK);
    }
    let mut mean = vec![0.0; emb.ncols()];
    for &i in &ids {
        for (m, v) in mean.iter_mut().zip(emb.row(i)) {
            *m += v / ids.len() as f64;
        }
    }
    let mapped: Vec<f64> = (0..proj.ncols())
        .map(|j| (0..proj.nrows()).map(|k| mean[k] * proj[[k, j]]).sum())
        .collect();
    let norm = mapped.iter().map(|v| v * v).sum::<f64>().sqrt();
    mapped.iter().map(|v| v / norm * scale.sqrt()).collect()
}

fn random_pool(rng: &mut ChaCha8Rng, n: usize) -> Vec<QAInstance> {
    let words = [
        "red", "blue", "cat", "dog", "paris", "rome", "soup", "tea", "ent1", "ent2", "ent3", "fox",
    ];
    let mut pool: Vec<QAInstance> = Vec::with_capacity(n);
    for i in 0..n {
        // Every fifth document duplicates an earlier one so ties occur.
        if i % 5 == 4 {
            let src = pool[rng.random_range(0..i)].clone();
            pool.push(QAInstance {
                task_id: format!("t{}", rng.random_range(0..4)),
                offset: i,
                ..src
            });
            continue;
        }
        let mut pick = |k: usize| {
            (0..k)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let (q, c) = (pick(3), pick(4));
        pool.push(inst(&format!("t{}", i % 4), i, &c, &format!("what {q}"), "x"));
    }
    pool
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut queries = 0;
    for &n in &[12usize, 150, 1000] {
        let pool = random_pool(&mut rng, n);
        let index = Bm25Index::build(&pool);
        let vocab = Vocab::build(
            pool.iter()
                .map(|p| p.question.as_str())
                .chain(pool.iter().map(|p| p.context.as_str())),
        );
        let rcfg = RankerConfig {
            dim: 8,
            retrieve: 16.min(n - 2),
            hints: 2,
            ..RankerConfig::default()
        };
        let retriever = Retriever::new(vocab.len(), &rcfg, n as u64);
        let r_index = retriever.index(&vocab, &pool);
        let (ex, px) = (
            matrix_by_name(&retriever.params, "query.embedding"),
            matrix_by_name(&retriever.params, "query.projection"),
        );
        let (ed, pd) = (
            matrix_by_name(&retriever.params, "document.embedding"),
            matrix_by_name(&retriever.params, "document.projection"),
        );
        let doc_codes: Vec<Vec<f64>> = pool
            .iter()
            .map(|d| encode_reference(&ed, &pd, rcfg.retriever_scale, &vocab, &retrieval_text(d)))
            .collect();
        for qi in (0..n).step_by((n / 15).max(1)) {
            let query = &pool[qi];
            for &c in &[1usize, 7, n - 1] {
                let got = index.top(query, c).map_err(|e| e.to_string())?;
                let want = bm25_reference(&pool, query, c);
                check(got == want, format!("BM25 pool {n} query {qi} c={c}: {got:?} vs {want:?}"))?;
            }
            let l = rcfg.retrieve;
            let got = r_index.retrieve(&retriever, &vocab, query, l).map_err(|e| e.to_string())?;
            let qv = encode_reference(&ex, &px, rcfg.retriever_scale, &vocab, &retrieval_text(query));
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&d| pool[d].id() != query.id())
                .map(|d| (qv.iter().zip(&doc_codes[d]).map(|(a, b)| a * b).sum(), d))
                .collect();
            // Scores equal within rounding count as tied.
            scored.sort_by(|a, b| {
                let by_score = if (a.0 - b.0).abs() < 1e-9 {
                    std::cmp::Ordering::Equal
                } else {
                    b.0.partial_cmp(&a.0).expect("finite")
                };
                by_score.then((&pool[a.1].task_id, pool[a.1].offset).cmp(&(&pool[b.1].task_id, pool[b.1].offset)))
            });
            let want: Vec<usize> = scored.iter().take(l).map(|s| s.1).collect();
            check(
                got.examples == want,
                format!("retriever pool {n} query {qi}: {:?} vs {want:?}", got.examples),
            )?;
            for (s, &d) in got.scores[&ModelTag::R1].iter().zip(&want) {
                let r = scored.iter().find(|x| x.1 == d).expect("present").0;
                check((s - r).abs() < 1e-9, format!("retriever score {s} vs {r}"))?;
            }
            queries += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(format!(
        "{queries} queries over pools of 12/150/1000 match exhaustive scorers, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let registry: Vec<TaskSpec> = ["a", "b", "c"]
        .iter()
        .map(|t| TaskSpec::new(*t, Format::Extractive, 5000))
        .collect();
    let m = downsample_tasks(&registry, 2.0, 1000, 42).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = ["a", "b", "c"].iter().map(|t| m.sampled_train_sizes[*t]).collect();
    let reference: Vec<usize> = (1..=3).map(|r: i32| (1000.0 * (r as f64).powi(-2)).floor() as usize).collect();
    check(sizes == vec![1000, 250, 111] && sizes == reference, format!("sizes {sizes:?}"))?;
    check(sizes[0] as f64 / sizes[1] as f64 == 4.0, "uncapped ratio is not 4")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    m.save(&p1).map_err(|e| e.to_string())?;
    downsample_tasks(&registry, 2.0, 1000, 42)
        .map_err(|e| e.to_string())?
        .save(&p2)
        .map_err(|e| e.to_string())?;
    let (b1, b2) = (
        std::fs::read(&p1).map_err(|e| e.to_string())?,
        std::fs::read(&p2).map_err(|e| e.to_string())?,
    );
    check(b1 == b2, "manifests differ across reruns")?;
    check(m.training_size() == 1361, format!("training size {}", m.training_size()))?;
    Ok(format!("sizes {sizes:?}, ratio 4, {} identical manifest bytes", b1.len()))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let tol = 1e-9;
    let f1 = f1_token_overlap("a cat sat", "the cat").map_err(|e| e.to_string())?;
    check((f1 - 0.4).abs() < tol, format!("f1 {f1}"))?;
    let rl = rouge_l("a b c", "a c");
    check((rl - 0.8).abs() < tol, format!("rouge_l {rl}"))?;
    let acc_hit = score_prediction(MetricKind::Accuracy, "  PARIS ", Gold::Text("paris")).map_err(|e| e.to_string())?;
    let acc_miss = score_prediction(MetricKind::Accuracy, "rome", Gold::Text("paris")).map_err(|e| e.to_string())?;
    check(acc_hit == 1.0 && acc_miss == 0.0, format!("accuracy {acc_hit} / {acc_miss}"))?;
    let b_same = bleu("the quick brown fox jumps", "the quick brown fox jumps");
    let b_none = bleu("alpha beta", "gamma delta");
    check((b_same - 1.0).abs() < tol && b_none == 0.0, format!("bleu {b_same} / {b_none}"))?;
    Ok(format!("f1 {f1}, rouge_l {rl}, accuracy 1/0, bleu {b_same}/{b_none}"))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let base = desk_config();
    // Head budget and seen/unseen split giving a 200-instance training
    // corpus under the Zipf profile; the default split skips 200.
    let mut chosen = None;
    'search: for unseen in [0usize, 2, 3, 4] {
        for head in 100..200 {
            let overrides = [format!("curation.head_budget={head}"), format!("data.unseen_count={unseen}")];
            let cfg = base.with_overrides(&overrides).map_err(|e| e.to_string())?;
            let data = prepare(&cfg).map_err(|e| e.to_string())?;
            if data.train.len() == 200 {
                chosen = Some(data);
                break 'search;
            }
        }
    }
    let data = chosen.ok_or("no head budget yields 200 training instances")?;
    let head = data.config.curation.head_budget;
    let mut run = Run::new(data, None).map_err(|e| e.to_string())?;
    let mut state = run.init_state().map_err(|e| e.to_string())?;
    check(run.config().train.stage1_epochs == 3, "desk config runs 3 ranker epochs")?;
    run.run_stage1(&mut state).map_err(|e| e.to_string())?;
    let kl = &state.log.heldout_kl;
    check(kl.len() == 4, format!("{} KL points", kl.len()))?;
    check(kl[3] < 0.5 * kl[0], format!("KL {:.4} -> {:.4}", kl[0], kl[3]))?;
    let secs = within(start, Duration::from_secs(180))?;
    Ok(format!(
        "200 instances (head {head}), held-out KL {:.4} -> {:.4} (ratio {:.3}), {secs:.1}s",
        kl[0],
        kl[3],
        kl[3] / kl[0]
    ))
}

// ---------------------------------------------------------------- criterion 9

fn stage2_summary(
    base: &TrainState,
    cfg: &oltqa_core::config::Config,
    ablation: Ablation,
) -> Result<oltqa_core::metrics::ScoreSummary, String> {
    let mut cfg = cfg.clone();
    cfg.train.ablation = ablation;
    let mut run = Run::new(prepare(&cfg).map_err(|e| e.to_string())?, None).map_err(|e| e.to_string())?;
    let mut state = base.clone();
    state.log.ablation = ablation;
    run.run_stage2(&mut state, None).map_err(|e| e.to_string())?;
    Ok(run.evaluate_suite(&state).map_err(|e| e.to_string())?.summary)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut tail_wins = 0;
    let mut unseen_wins = 0;
    let mut rows = Vec::new();
    for seed in [42u64, 43, 44] {
        let mut cfg = desk_config();
        cfg.train.seed = seed;
        // Ranker pre-training does not depend on the ablation switch, so the
        // three runs of a seed share it.
        let mut run = Run::new(prepare(&cfg).map_err(|e| e.to_string())?, None).map_err(|e| e.to_string())?;
        let mut base = run.init_state().map_err(|e| e.to_string())?;
        run.run_stage1(&mut base).map_err(|e| e.to_string())?;
        let full = stage2_summary(&base, &cfg, Ablation::None)?;
        let no_pk = stage2_summary(&base, &cfg, Ablation::NoPk)?;
        let no_pm = stage2_summary(&base, &cfg, Ablation::NoPm)?;
        let (fu, nu) = (full.a_unseen.ok_or("no unseen tasks")?, no_pm.a_unseen.ok_or("no unseen tasks")?);
        if full.tail_at_n - no_pk.tail_at_n > 0.0 {
            tail_wins += 1;
        }
        if fu - nu > 0.0 {
            unseen_wins += 1;
        }
        rows.push(format!(
            "seed {seed}: tail {:.3} vs {:.3}, unseen {fu:.3} vs {nu:.3}",
            full.tail_at_n, no_pk.tail_at_n
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    check(tail_wins >= 2, format!("tail wins {tail_wins}/3"))?;
    check(unseen_wins >= 2, format!("unseen wins {unseen_wins}/3"))?;
    let secs = within(start, Duration::from_secs(20 * 60))?;
    Ok(format!("tail wins {tail_wins}/3, unseen wins {unseen_wins}/3, {secs:.0}s"))
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let mut cfg = tiny_config();
    cfg.train.epochs = 3;
    let fresh = || -> Result<(Run, TrainState), String> {
        let run = Run::new(prepare(&cfg).map_err(|e| e.to_string())?, None).map_err(|e| e.to_string())?;
        let state = run.init_state().map_err(|e| e.to_string())?;
        Ok((run, state))
    };
    let (mut run_a, mut a) = fresh()?;
    run_a.train(&mut a, None).map_err(|e| e.to_string())?;
    let (mut run_b, mut b) = fresh()?;
    run_b.train(&mut b, None).map_err(|e| e.to_string())?;
    let bits = |s: &TrainState| s.log.loss_sequence().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(!a.log.loss_sequence().is_empty(), "empty loss sequence")?;
    check(bits(&a) == bits(&b), "loss sequences differ between identical runs")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut killed = Run::new(prepare(&cfg).map_err(|e| e.to_string())?, Some(dir.path())).map_err(|e| e.to_string())?;
    let mut k = killed.init_state().map_err(|e| e.to_string())?;
    killed.train(&mut k, Some(2)).map_err(|e| e.to_string())?;
    check(k.stage2_done == 2, format!("interrupted run stopped at {}", k.stage2_done))?;
    drop(killed);
    let mut resumed = Run::new(prepare(&cfg).map_err(|e| e.to_string())?, Some(dir.path())).map_err(|e| e.to_string())?;
    let mut r = resumed.load_latest().map_err(|e| e.to_string())?.ok_or("no checkpoint written")?;
    check(r.stage2_done == 2, "checkpoint is not the epoch-2 state")?;
    resumed.train(&mut r, None).map_err(|e| e.to_string())?;
    let (x, y) = (&a.log.scoreboards[2], &r.log.scoreboards[2]);
    check(x.epoch == 3 && y.epoch == 3, "third scoreboard is not epoch 3")?;
    let diff = (x.v_r1 - y.v_r1).abs().max((x.v_r2 - y.v_r2).abs()).max((x.v_f - y.v_f).abs());
    check(diff <= 1e-6, format!("epoch-3 scoreboard differs by {diff}"))?;
    check(bits(&a) == bits(&r), "resumed loss sequence differs")?;
    Ok(format!(
        "{} losses bit-identical, resumed epoch-3 scoreboard max diff {diff:.1e}",
        a.log.loss_sequence().len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("key-loss gradients and zero-margin configurations", criterion_1),
        ("distribution normalisation, shift invariance and KL", criterion_2),
        ("stop-gradient probes", criterion_3),
        ("gating truth table", criterion_4),
        ("retrieval equals exhaustive search", criterion_5),
        ("zipf curation", criterion_6),
        ("metric fixtures", criterion_7),
        ("ranker pre-training halves held-out KL", criterion_8),
        ("directional ablations on the planted suite", criterion_9),
        ("determinism and kill-and-resume", criterion_10),
    ];
    // ACCEPTANCE_ONLY=8,10 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
