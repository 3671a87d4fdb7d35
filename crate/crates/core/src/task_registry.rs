//! QA task universe, seen/unseen partitioning and Zipf long-tail curation.

use crate::error::{Error, Result};
use crate::text::normalize;
use crate::util::rng_for;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Extractive,
    Abstractive,
    MultipleChoice,
    YesNo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    F1Overlap,
    Accuracy,
    RougeL,
    Bleu,
}

impl MetricKind {
    /// Default metric for a format: accuracy for multiple choice, token F1
    /// for everything else.
    pub fn default_for(format: Format) -> Self {
        match format {
            Format::MultipleChoice => MetricKind::Accuracy,
            _ => MetricKind::F1Overlap,
        }
    }

    pub fn is_consistent_with(self, format: Format) -> bool {
        match format {
            Format::MultipleChoice => self == MetricKind::Accuracy,
            Format::Extractive | Format::YesNo => self == MetricKind::F1Overlap,
            Format::Abstractive => matches!(self, MetricKind::F1Overlap | MetricKind::RougeL | MetricKind::Bleu),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::F1Overlap => "f1_overlap",
            MetricKind::Accuracy => "accuracy",
            MetricKind::RougeL => "rouge_l",
            MetricKind::Bleu => "bleu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f1_overlap" | "f1" => Ok(MetricKind::F1Overlap),
            "accuracy" => Ok(MetricKind::Accuracy),
            "rouge_l" => Ok(MetricKind::RougeL),
            "bleu" => Ok(MetricKind::Bleu),
            other => Err(Error::invalid(format!("unknown metric kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One `(context, question, answer)` tuple.
///
/// `offset` is the instance's position among records of the same task in
/// its source file; together with `task_id` and `split` it forms the
/// instance id and the deterministic tie-break key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub task_id: String,
    pub format: Format,
    pub context: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(skip)]
    pub split: Split,
    #[serde(skip)]
    pub offset: usize,
}

impl QAInstance {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.split, self.task_id, self.offset)
    }

    /// Ordering key used wherever scores tie.
    pub fn tie_key(&self) -> (&str, usize, Split) {
        (&self.task_id, self.offset, self.split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.trim().is_empty() {
            return Err(Error::invalid("task_id is empty"));
        }
        if normalize(&self.answer).is_empty() {
            return Err(Error::invalid(format!("{}: answer is empty", self.id())));
        }
        if self.format == Format::MultipleChoice {
            let options = self
                .options
                .as_ref()
                .filter(|o| !o.is_empty())
                .ok_or_else(|| Error::invalid(format!("{}: multiple choice without options", self.id())))?;
            let gold = normalize(&self.answer);
            if !options.iter().any(|o| normalize(o) == gold) {
                return Err(Error::invalid(format!(
                    "{}: answer {:?} is not among the options",
                    self.id(),
                    self.answer
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub format: Format,
    pub metric_kind: MetricKind,
    pub original_train_size: usize,
    pub split_sizes: SplitSizes,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, format: Format, original_train_size: usize) -> Self {
        Self {
            task_id: task_id.into(),
            format,
            metric_kind: MetricKind::default_for(format),
            original_train_size,
            split_sizes: SplitSizes::default(),
        }
    }
}

/// Curated long-tailed training composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailManifest {
    pub alpha: f64,
    pub head_budget: usize,
    pub seed: u64,
    /// Seen tasks ordered by descending sampled size (ties keep rank order).
    pub seen_task_ids: Vec<String>,
    pub unseen_task_ids: Vec<String>,
    pub sampled_train_sizes: BTreeMap<String, usize>,
    pub original_train_sizes: BTreeMap<String, usize>,
    /// Offsets into each seen task's original training records.
    pub train_offsets: BTreeMap<String, Vec<usize>>,
    pub val_offsets: BTreeMap<String, Vec<usize>>,
}

impl LongTailManifest {
    pub fn training_size(&self) -> usize {
        self.seen_task_ids.iter().map(|t| self.sampled_train_sizes[t]).sum()
    }

    pub fn is_seen(&self, task_id: &str) -> bool {
        self.seen_task_ids.iter().any(|t| t == task_id)
    }

    pub fn all_task_ids(&self) -> impl Iterator<Item = &String> {
        self.seen_task_ids.iter().chain(&self.unseen_task_ids)
    }

    /// Selects curated train and validation instances from the task originals.
    pub fn select<'a>(&self, originals: &'a [QAInstance]) -> (Vec<&'a QAInstance>, Vec<&'a QAInstance>) {
        let mut by_task: BTreeMap<&str, Vec<&QAInstance>> = BTreeMap::new();
        for inst in originals {
            by_task.entry(inst.task_id.as_str()).or_default().push(inst);
        }
        let pick = |offsets: &BTreeMap<String, Vec<usize>>| {
            let mut out = Vec::new();
            for task in &self.seen_task_ids {
                let Some(pool) = by_task.get(task.as_str()) else { continue };
                for &off in offsets.get(task).map(Vec::as_slice).unwrap_or(&[]) {
                    if let Some(inst) = pool.iter().find(|i| i.offset == off) {
                        out.push(*inst);
                    }
                }
            }
            out
        };
        (pick(&self.train_offsets), pick(&self.val_offsets))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> String {
        crate::util::hex_digest(&[self.to_json().unwrap_or_default().as_bytes()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Zipf weights `r^(-alpha)` for ranks `1..=n`.
pub fn zipf_weights(n: usize, alpha: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("zipf_weights needs n >= 1"));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!("zipf alpha must be a finite value >= 0, got {alpha}")));
    }
    Ok((1..=n).map(|r| (r as f64).powf(-alpha)).collect())
}

/// Down-samples every task of `registry` (taken as seen tasks in rank order)
/// to a Zipf-shaped size profile.
pub fn downsample_tasks(registry: &[TaskSpec], alpha: f64, head_budget: usize, seed: u64) -> Result<LongTailManifest> {
    if registry.is_empty() {
        return Err(Error::invalid("registry is empty"));
    }
    if head_budget == 0 {
        return Err(Error::invalid("head_budget must be >= 1"));
    }
    let weights = zipf_weights(registry.len(), alpha)?;
    let head = head_budget.min(registry[0].original_train_size);

    let mut sizes = BTreeMap::new();
    let mut originals = BTreeMap::new();
    let mut train_offsets = BTreeMap::new();
    let mut val_offsets = BTreeMap::new();
    let mut ranked = Vec::with_capacity(registry.len());

    for (rank, (task, w)) in registry.iter().zip(&weights).enumerate() {
        let size = if rank == 0 {
            head
        } else {
            ((head as f64 * w).floor() as usize).max(1).min(task.original_train_size)
        };
        let mut rng = rng_for(seed, &format!("downsample/{}", task.task_id));
        let mut order: Vec<usize> = index::sample(&mut rng, task.original_train_size, task.original_train_size).into_vec();
        if order.is_empty() && size > 0 {
            return Err(Error::invalid(format!("task {} has no training records", task.task_id)));
        }
        let mut train: Vec<usize> = order.drain(..size).collect();
        let val_target = (size / 8).max(1);
        let mut val: Vec<usize> = if order.len() >= val_target {
            order.drain(..val_target).collect()
        } else if !order.is_empty() {
            std::mem::take(&mut order)
        } else {
            // No records left over: validate on the tail of the train sample.
            train[train.len().saturating_sub(val_target)..].to_vec()
        };
        train.sort_unstable();
        val.sort_unstable();
        sizes.insert(task.task_id.clone(), size);
        originals.insert(task.task_id.clone(), task.original_train_size);
        train_offsets.insert(task.task_id.clone(), train);
        val_offsets.insert(task.task_id.clone(), val);
        ranked.push((rank, task.task_id.clone(), size));
    }
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));

    Ok(LongTailManifest {
        alpha,
        head_budget,
        seed,
        seen_task_ids: ranked.into_iter().map(|(_, id, _)| id).collect(),
        unseen_task_ids: Vec::new(),
        sampled_train_sizes: sizes,
        original_train_sizes: originals,
        train_offsets,
        val_offsets,
    })
}

/// Seeded disjoint partition of task ids into `(seen, unseen)`; both lists
/// keep registry order.
pub fn split_seen_unseen(registry: &[TaskSpec], n_unseen: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if n_unseen >= registry.len() {
        return Err(Error::invalid(format!(
            "n_unseen ({n_unseen}) must be smaller than the number of tasks ({})",
            registry.len()
        )));
    }
    let mut idx: Vec<usize> = (0..registry.len()).collect();
    idx.shuffle(&mut rng_for(seed, "split_seen_unseen"));
    let mut unseen_mask = vec![false; registry.len()];
    for &i in &idx[..n_unseen] {
        unseen_mask[i] = true;
    }
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (task, is_unseen) in registry.iter().zip(unseen_mask) {
        if is_unseen {
            unseen.push(task.task_id.clone());
        } else {
            seen.push(task.task_id.clone());
        }
    }
    Ok((seen, unseen))
}

/// Builds a manifest: seen tasks (in registry order) are down-sampled, the
/// listed unseen tasks contribute nothing to training or validation.
pub fn curate(registry: &[TaskSpec], unseen: &[String], alpha: f64, head_budget: usize, seed: u64) -> Result<LongTailManifest> {
    for id in unseen {
        if !registry.iter().any(|t| &t.task_id == id) {
            return Err(Error::invalid(format!("unknown unseen task {id:?}")));
        }
    }
    let seen: Vec<TaskSpec> = registry.iter().filter(|t| !unseen.contains(&t.task_id)).cloned().collect();
    let mut manifest = downsample_tasks(&seen, alpha, head_budget, seed)?;
    for task in registry.iter().filter(|t| unseen.contains(&t.task_id)) {
        manifest.unseen_task_ids.push(task.task_id.clone());
        manifest.sampled_train_sizes.insert(task.task_id.clone(), 0);
        manifest.original_train_sizes.insert(task.task_id.clone(), task.original_train_size);
    }
    Ok(manifest)
}

/// Reads QA instances from a JSON-lines file, one record per line.
pub fn load_jsonl(path: &Path, split: Split) -> Result<Vec<QAInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offsets: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut inst: QAInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let next = offsets.entry(inst.task_id.clone()).or_insert(0);
        inst.offset = *next;
        inst.split = split;
        *next += 1;
        inst.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[QAInstance]) -> Result<()> {
    let mut text = String::new();
    for inst in instances {
        text.push_str(&serde_json::to_string(inst)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Task specs in first-appearance order of the training file, followed by
/// tasks that only occur in the test file.
pub fn registry_from(train: &[QAInstance], test: &[QAInstance], metric_overrides: &BTreeMap<String, MetricKind>) -> Result<Vec<TaskSpec>> {
    let mut specs: Vec<TaskSpec> = Vec::new();
    for inst in train.iter().chain(test) {
        let spec = match specs.iter_mut().find(|s| s.task_id == inst.task_id) {
            Some(s) => s,
            None => {
                specs.push(TaskSpec::new(inst.task_id.clone(), inst.format, 0));
                specs.last_mut().expect("just pushed")
            }
        };
        if spec.format != inst.format {
            return Err(Error::invalid(format!("task {} mixes formats", inst.task_id)));
        }
        match inst.split {
            Split::Train => spec.original_train_size += 1,
            Split::Val => spec.split_sizes.val += 1,
            Split::Test => spec.split_sizes.test += 1,
        }
    }
    for spec in &mut specs {
        spec.split_sizes.train = spec.original_train_size;
        if let Some(&m) = metric_overrides.get(&spec.task_id) {
            if !m.is_consistent_with(spec.format) {
                return Err(Error::invalid(format!(
                    "metric {} is not valid for {:?} task {}",
                    m.as_str(),
                    spec.format,
                    spec.task_id
                )));
            }
            spec.metric_kind = m;
        }
    }
    Ok(specs)
}
