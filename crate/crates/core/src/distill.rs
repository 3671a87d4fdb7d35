//! KL-based distillation: ranker pre-training against the oracle, the
//! validation scoreboard, and performance-gated mutual distillation between
//! the retriever, the reranker and the QA model.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::miner::select_hints;
use crate::oracle::ModelTag;
use crate::qa_model::QAModel;
use crate::task_registry::QAInstance;
use crate::text::Vocab;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Student probabilities are clamped here before the logarithm.
pub const KL_FLOOR: f64 = 1e-12;

pub const MODELS: [ModelTag; 3] = [ModelTag::R1, ModelTag::R2, ModelTag::F];

/// `Σ p_t ln(p_t / max(p_s, floor))` in nats.
pub fn kl_divergence(teacher: &[f64], student: &[f64]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "distribution lengths differ: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - s.max(KL_FLOOR).ln()))
        .sum())
}

fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|t| **t > 0.0).map(|t| t * t.ln()).sum()
}

/// `KL(stopgrad(teacher) ‖ softmax(student_scores))` on the tape. `teacher`
/// holds probabilities; no gradient ever reaches it.
pub fn kl_on_tape(tape: &mut Tape, teacher: Var, student_scores: Var) -> Result<Var> {
    let (tr, tc) = tape.value(teacher).dim();
    let (sr, sc) = tape.value(student_scores).dim();
    if tr != 1 || sr != 1 || tc != sc {
        return Err(Error::invalid(format!("distribution shapes differ: 1x{tc} vs {sr}x{sc}")));
    }
    let teacher = tape.stop_grad(teacher);
    let constant = neg_entropy(tape.value(teacher).as_slice().expect("row"));
    let student = tape.softmax_rows(student_scores);
    let log_student = tape.log_floor(student, KL_FLOOR);
    let cross = tape.mul(teacher, log_student);
    let cross = tape.sum(cross);
    let negated = tape.scale(cross, -1.0);
    Ok(tape.add_const(negated, &Array2::from_elem((1, 1), constant)))
}

/// `KL(p_lm ‖ p_r1) + KL(p_lm ‖ p_r2)` over aligned distributions.
pub fn stage1_loss(p_lm: &[f64], p_r1: &[f64], p_r2: &[f64]) -> Result<f64> {
    Ok(kl_divergence(p_lm, p_r1)? + kl_divergence(p_lm, p_r2)?)
}

/// Tape form of [`stage1_loss`]; `r1_scores` and `r2_scores` are `1 × k`.
pub fn stage1_loss_on(tape: &mut Tape, p_lm: &[f64], r1_scores: Var, r2_scores: Var) -> Result<Var> {
    let teacher = tape.row(p_lm);
    let a = kl_on_tape(tape, teacher, r1_scores)?;
    let b = kl_on_tape(tape, teacher, r2_scores)?;
    Ok(tape.add(a, b))
}

/// Validation values `v_i` for the three models at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub values: BTreeMap<ModelTag, f64>,
    pub evaluated_at: usize,
}

impl Scoreboard {
    pub fn new(r1: f64, r2: f64, f: f64, evaluated_at: usize) -> Result<Self> {
        let values = BTreeMap::from([(ModelTag::R1, r1), (ModelTag::R2, r2), (ModelTag::F, f)]);
        if values.values().any(|v| !v.is_finite()) {
            return Err(Error::invalid("scoreboard values must be finite"));
        }
        Ok(Self { values, evaluated_at })
    }

    pub fn get(&self, tag: ModelTag) -> f64 {
        self.values[&tag]
    }
}

/// Ordered `(teacher, student)` pairs with `v_teacher > v_student`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KDEdgeSet {
    pub edges: Vec<(ModelTag, ModelTag)>,
}

impl KDEdgeSet {
    pub fn from_scoreboard(board: &Scoreboard) -> Self {
        let mut edges = Vec::new();
        for &i in &MODELS {
            for &j in &MODELS {
                if i != j && board.get(i) > board.get(j) {
                    edges.push((i, j));
                }
            }
        }
        Self { edges }
    }

    /// Fixed edges regardless of performance.
    pub fn fixed(edges: Vec<(ModelTag, ModelTag)>) -> Self {
        Self { edges }
    }

    pub fn contains(&self, teacher: ModelTag, student: ModelTag) -> bool {
        self.edges.contains(&(teacher, student))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `"r1->f"` style labels for logs.
    pub fn labels(&self) -> Vec<String> {
        self.edges.iter().map(|(t, s)| format!("{}->{}", t.as_str(), s.as_str())).collect()
    }
}

fn check_epoch(board: &Scoreboard, expected_epoch: usize) -> Result<()> {
    if board.evaluated_at != expected_epoch {
        return Err(Error::precondition(format!(
            "scoreboard from epoch {} used at epoch {expected_epoch}",
            board.evaluated_at
        )));
    }
    Ok(())
}

/// Gated mutual KD over value distributions.
pub fn mutual_kd_loss(dists: &BTreeMap<ModelTag, Vec<f64>>, board: &Scoreboard, expected_epoch: usize) -> Result<f64> {
    check_epoch(board, expected_epoch)?;
    let edges = KDEdgeSet::from_scoreboard(board);
    let mut total = 0.0;
    for &(t, s) in &edges.edges {
        let (pt, ps) = (distribution(dists, t)?, distribution(dists, s)?);
        total += kl_divergence(pt, ps)?;
    }
    Ok(total)
}

fn distribution(dists: &BTreeMap<ModelTag, Vec<f64>>, tag: ModelTag) -> Result<&Vec<f64>> {
    dists
        .get(&tag)
        .ok_or_else(|| Error::invalid(format!("missing {} distribution", tag.as_str())))
}

/// Tape form: `scores` maps each model to its `1 × k` raw score row. Teachers
/// are detached, so gradient reaches only the student of every edge.
pub fn mutual_kd_loss_on(tape: &mut Tape, scores: &BTreeMap<ModelTag, Var>, edges: &KDEdgeSet) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for &(t, s) in &edges.edges {
        let (Some(&ts), Some(&ss)) = (scores.get(&t), scores.get(&s)) else {
            return Err(Error::invalid(format!("missing scores for edge {}->{}", t.as_str(), s.as_str())));
        };
        let teacher = tape.softmax_rows(ts);
        terms.push(kl_on_tape(tape, teacher, ss)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let column = tape.concat_rows(&terms);
    Ok(Some(tape.sum(column)))
}

/// Tape form with the staleness check of [`mutual_kd_loss`].
pub fn gated_kd_loss_on(
    tape: &mut Tape,
    scores: &BTreeMap<ModelTag, Var>,
    board: &Scoreboard,
    expected_epoch: usize,
) -> Result<Option<Var>> {
    check_epoch(board, expected_epoch)?;
    mutual_kd_loss_on(tape, scores, &KDEdgeSet::from_scoreboard(board))
}

/// One validation instance with its candidates' hints and every model's
/// scores over them.
#[derive(Clone, Debug)]
pub struct ValidationCase<'a> {
    pub instance: &'a QAInstance,
    pub prefix: Option<Array2<f64>>,
    pub hints: Vec<String>,
    pub keys: Vec<(String, usize)>,
    pub scores: BTreeMap<ModelTag, Vec<f64>>,
}

/// `v_i = mean log p_F(a | [P_m; P_k^i; c; q])`, where `P_k^i` holds the
/// top hints under model `i`.
pub fn evaluate_models(
    cases: &[ValidationCase<'_>],
    model: &QAModel,
    vocab: &Vocab,
    hints_per_prompt: usize,
    epoch: usize,
) -> Result<Scoreboard> {
    if cases.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut sums = [0.0; 3];
    for case in cases {
        let hints: Vec<&str> = case.hints.iter().map(String::as_str).collect();
        for (k, tag) in MODELS.iter().enumerate() {
            let scores = case
                .scores
                .get(tag)
                .ok_or_else(|| Error::precondition(format!("no {} scores for {}", tag.as_str(), case.instance.id())))?;
            let kp = select_hints(scores, &case.keys, &hints, hints_per_prompt);
            sums[k] += model.answer_log_prob(vocab, case.instance, case.prefix.as_ref(), &kp);
        }
    }
    let n = cases.len() as f64;
    Scoreboard::new(sums[0] / n, sums[1] / n, sums[2] / n, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn kl_fixtures() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn stage1_fixtures() {
        let u = [0.5, 0.5];
        assert_eq!(stage1_loss(&u, &u, &u).unwrap(), 0.0);
        let eps = 1e-3;
        let r1 = [1.0 - eps, eps];
        let total = stage1_loss(&u, &r1, &u).unwrap();
        assert!((total - kl_divergence(&u, &r1).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn tape_kl_matches_values_and_detaches_teacher() {
        let mut tape = Tape::new();
        let t_scores = tape.param(Arc::new(ndarray::array![[0.2, -0.1, 0.9]]));
        let s_scores = tape.param(Arc::new(ndarray::array![[1.0, 0.0, -1.0]]));
        let teacher = tape.softmax_rows(t_scores);
        let kl = kl_on_tape(&mut tape, teacher, s_scores).unwrap();
        let expected = kl_divergence(
            &crate::oracle::softmax(&[0.2, -0.1, 0.9]),
            &crate::oracle::softmax(&[1.0, 0.0, -1.0]),
        )
        .unwrap();
        assert!((tape.scalar(kl) - expected).abs() < 1e-12);
        let grads = tape.backward(kl);
        assert!(grads.get(t_scores).is_none());
        assert!(grads.get(s_scores).is_some());
    }

    #[test]
    fn edge_fixtures() {
        let b = Scoreboard::new(-1.0, -3.0, -2.0, 0).unwrap();
        let e = KDEdgeSet::from_scoreboard(&b);
        let mut got = e.edges.clone();
        got.sort();
        let mut want = vec![
            (ModelTag::R1, ModelTag::F),
            (ModelTag::R1, ModelTag::R2),
            (ModelTag::F, ModelTag::R2),
        ];
        want.sort();
        assert_eq!(got, want);
        let tie = Scoreboard::new(-2.0, -2.0, -2.0, 0).unwrap();
        assert!(KDEdgeSet::from_scoreboard(&tie).is_empty());
    }

    #[test]
    fn mutual_kd_fixtures() {
        let dists = BTreeMap::from([
            (ModelTag::R1, vec![0.7, 0.3]),
            (ModelTag::R2, vec![0.1, 0.9]),
            (ModelTag::F, vec![0.7, 0.3]),
        ]);
        let equal = Scoreboard::new(-1.0, -1.0, -1.0, 2).unwrap();
        assert_eq!(mutual_kd_loss(&dists, &equal, 2).unwrap(), 0.0);
        let b = Scoreboard::new(-1.0, -3.0, -2.0, 2).unwrap();
        let expected = 2.0 * kl_divergence(&dists[&ModelTag::R1], &dists[&ModelTag::R2]).unwrap();
        assert!((mutual_kd_loss(&dists, &b, 2).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(mutual_kd_loss(&dists, &b, 3), Err(Error::Precondition(_))));
    }
}
