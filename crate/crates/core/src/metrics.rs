//! Text-to-text serialisation and per-format QA metrics.
//!
//! Every metric tokenises through [`crate::text::tokenize`]: lowercase,
//! punctuation replaced by spaces, whitespace collapsed. Articles are kept.

use crate::error::{Error, Result};
use crate::task_registry::{Format, LongTailManifest, MetricKind, QAInstance};
use crate::text::{normalize, tokenize};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub source_text: String,
    pub target_text: String,
}

/// Renders options as `(a) first (b) second ...`.
pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {}", option_label(i), o))
        .collect::<Vec<_>>()
        .join(" ")
}

fn option_label(i: usize) -> char {
    (b'a' + (i % 26) as u8) as char
}

/// Source is the question (plus rendered options for multiple choice), a
/// newline, then the context; everything lowercased.
pub fn serialize_instance(instance: &QAInstance) -> SerializedPair {
    let mut source = instance.question.trim().to_string();
    if instance.format == Format::MultipleChoice {
        if let Some(options) = &instance.options {
            source.push(' ');
            source.push_str(&render_options(options));
        }
    }
    source.push('\n');
    source.push_str(instance.context.trim());
    SerializedPair {
        source_text: source.to_lowercase(),
        target_text: instance.answer.trim().to_lowercase(),
    }
}

fn bag(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Bag-of-tokens F1 between a prediction and the gold answer.
pub fn f1_token_overlap(prediction: &str, gold: &str) -> Result<f64> {
    let gold_toks = tokenize(gold);
    if gold_toks.is_empty() {
        return Err(Error::invalid("gold answer is empty after normalisation"));
    }
    let pred_toks = tokenize(prediction);
    Ok(f1_tokens(&pred_toks, &gold_toks))
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let gb = bag(gold);
    let common: usize = bag(pred).iter().map(|(t, &c)| c.min(gb.get(t).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1) over tokens.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (tokenize(prediction), tokenize(gold));
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let prec = lcs / p.len() as f64;
    let rec = lcs / g.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU up to 4-grams with add-one smoothing on orders 2..4 and the
/// standard brevity penalty.
pub fn bleu(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (tokenize(prediction), tokenize(gold));
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let pg = ngram_counts(&p, n);
        let gg = ngram_counts(&g, n);
        let total: usize = pg.values().sum();
        let matched: usize = pg.iter().map(|(k, &c)| c.min(gg.get(k).copied().unwrap_or(0))).sum();
        let precision = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += precision.ln() / 4.0;
    }
    let (c, r) = (p.len() as f64, g.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Gold side of a scored prediction.
#[derive(Clone, Copy, Debug)]
pub enum Gold<'a> {
    Text(&'a str),
    Choice { answer: &'a str, options: &'a [String] },
}

impl<'a> Gold<'a> {
    pub fn of(instance: &'a QAInstance) -> Self {
        match (&instance.format, &instance.options) {
            (Format::MultipleChoice, Some(options)) => Gold::Choice {
                answer: &instance.answer,
                options,
            },
            _ => Gold::Text(&instance.answer),
        }
    }

    fn answer(&self) -> &'a str {
        match *self {
            Gold::Text(a) => a,
            Gold::Choice { answer, .. } => answer,
        }
    }
}

/// Maps free text onto an option: a bare option letter selects that option,
/// otherwise the option with the highest token F1 wins (first on ties).
pub fn map_to_option<'o>(prediction: &str, options: &'o [String]) -> Option<&'o str> {
    let norm = normalize(prediction);
    if norm.len() == 1 {
        let c = norm.as_bytes()[0];
        if c.is_ascii_lowercase() && ((c - b'a') as usize) < options.len() {
            return Some(&options[(c - b'a') as usize]);
        }
    }
    let pred = tokenize(prediction);
    let mut best: Option<(&str, f64)> = None;
    for o in options {
        let f = f1_tokens(&pred, &tokenize(o));
        if best.is_none_or(|(_, b)| f > b) {
            best = Some((o, f));
        }
    }
    best.map(|(o, _)| o)
}

/// Score in `[0, 1]` of one prediction under the given metric.
pub fn score_prediction(metric: MetricKind, prediction: &str, gold: Gold<'_>) -> Result<f64> {
    let answer = gold.answer();
    if tokenize(answer).is_empty() {
        return Err(Error::invalid("gold answer is empty after normalisation"));
    }
    Ok(match metric {
        MetricKind::F1Overlap => f1_token_overlap(prediction, answer)?,
        MetricKind::RougeL => rouge_l(prediction, answer),
        MetricKind::Bleu => bleu(prediction, answer),
        MetricKind::Accuracy => {
            let chosen = match gold {
                Gold::Choice { options, .. } => map_to_option(prediction, options).unwrap_or(prediction),
                Gold::Text(_) => prediction,
            };
            if normalize(chosen) == normalize(answer) {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Same as [`score_prediction`] with the metric given by name.
pub fn score_prediction_named(metric: &str, prediction: &str, gold: Gold<'_>) -> Result<f64> {
    score_prediction(MetricKind::parse(metric)?, prediction, gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub per_task: BTreeMap<String, f64>,
    pub a_seen: f64,
    pub a_unseen: Option<f64>,
    pub head_at_m: f64,
    pub tail_at_n: f64,
    pub m: usize,
    pub n: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Averages per-task scores into seen/unseen/head/tail summaries.
///
/// Head@m takes the `m` seen tasks with the largest sampled training sets and
/// Tail@n the `n` smallest; equal sizes are ordered by task id.
pub fn aggregate(per_task: &BTreeMap<String, f64>, manifest: &LongTailManifest, m: usize, n: usize) -> Result<ScoreSummary> {
    let seen = &manifest.seen_task_ids;
    if seen.is_empty() {
        return Err(Error::invalid("manifest has no seen tasks"));
    }
    if m == 0 || n == 0 || m > seen.len() || n > seen.len() {
        return Err(Error::invalid(format!("head/tail sizes ({m}, {n}) must lie in 1..={}", seen.len())));
    }
    for t in manifest.all_task_ids() {
        if !per_task.contains_key(t) {
            return Err(Error::invalid(format!("no score for task {t}")));
        }
    }
    let size = |t: &String| manifest.sampled_train_sizes.get(t).copied().unwrap_or(0);
    let mut by_size: Vec<&String> = seen.iter().collect();
    by_size.sort_by(|a, b| size(b).cmp(&size(a)).then(a.cmp(b)));
    let head = mean(by_size[..m].iter().map(|t| per_task[*t])).expect("m >= 1");
    by_size.sort_by(|a, b| size(a).cmp(&size(b)).then(a.cmp(b)));
    let tail = mean(by_size[..n].iter().map(|t| per_task[*t])).expect("n >= 1");

    Ok(ScoreSummary {
        per_task: per_task.clone(),
        a_seen: mean(seen.iter().map(|t| per_task[t])).expect("seen non-empty"),
        a_unseen: mean(manifest.unseen_task_ids.iter().map(|t| per_task[t])),
        head_at_m: head,
        tail_at_n: tail,
        m,
        n,
    })
}

/// Writes the per-task rows followed by the summary row block.
pub fn write_summary_csv(
    path: &Path,
    summary: &ScoreSummary,
    manifest: &LongTailManifest,
    metrics: &BTreeMap<String, MetricKind>,
) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["task_id", "metric", "score", "split", "sampled_size"])
        .map_err(io)?;
    for task in manifest.all_task_ids() {
        let split = if manifest.is_seen(task) { "seen" } else { "unseen" };
        let metric = metrics.get(task).map(|m| m.as_str()).unwrap_or("");
        let size = manifest.sampled_train_sizes.get(task).copied().unwrap_or(0).to_string();
        let score = format!("{:.4}", summary.per_task[task]);
        w.write_record([task.as_str(), metric, &score, split, &size]).map_err(io)?;
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let rows = [
        ("A_seen".to_string(), fmt(Some(summary.a_seen))),
        ("A_unseen".to_string(), fmt(summary.a_unseen)),
        (format!("Head@{}", summary.m), fmt(Some(summary.head_at_m))),
        (format!("Tail@{}", summary.n), fmt(Some(summary.tail_at_n))),
    ];
    for (name, value) in rows {
        w.write_record([name.as_str(), "summary", &value, "", ""]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
