//! Seeded synthetic QA suite with planted retrieval structure.
//!
//! A small world of entities carries one value per attribute (color, city,
//! pet, food). A large extractive lookup task states facts in its contexts;
//! the other seen tasks ask about the same facts without stating them, so
//! answering them well requires hints mined from other training examples.
//! Unseen tasks repeat the seen templates with attribute words that never
//! occur in training; the frozen query encoder knows those words through a
//! synonym lexicon, the trainable models do not.

use crate::task_registry::{Format, QAInstance, Split};
use crate::util::rng_for;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub entities: usize,
    /// Original training records per task before curation.
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 30,
            train_per_task: 300,
            test_per_task: 40,
            seed: 7,
        }
    }
}

struct Attribute {
    concept: &'static str,
    seen_words: [&'static str; 3],
    unseen_words: [&'static str; 2],
    values: [&'static str; 6],
}

const ATTRIBUTES: [Attribute; 4] = [
    Attribute {
        concept: "color",
        seen_words: ["color", "shade", "colour"],
        unseen_words: ["hue", "tint"],
        values: ["red", "blue", "green", "yellow", "purple", "orange"],
    },
    Attribute {
        concept: "city",
        seen_words: ["city", "town", "hometown"],
        unseen_words: ["place", "residence"],
        values: ["paris", "rome", "oslo", "lima", "cairo", "tokyo"],
    },
    Attribute {
        concept: "pet",
        seen_words: ["pet", "animal", "beast"],
        unseen_words: ["companion", "creature"],
        values: ["dog", "cat", "owl", "fox", "horse", "rabbit"],
    },
    Attribute {
        concept: "food",
        seen_words: ["food", "dish", "snack"],
        unseen_words: ["meal", "cuisine"],
        values: ["rice", "soup", "bread", "figs", "tea", "cake"],
    },
];

#[derive(Clone, Copy)]
enum Kind {
    Lookup,
    Open(usize),
    Choice(usize),
    Verify(usize),
}

struct TaskDef {
    id: &'static str,
    kind: Kind,
    unseen: bool,
}

/// Seen tasks in curation rank order, then unseen tasks.
const TASKS: [TaskDef; 10] = [
    TaskDef {
        id: "lookup",
        kind: Kind::Lookup,
        unseen: false,
    },
    TaskDef {
        id: "open_color",
        kind: Kind::Open(0),
        unseen: false,
    },
    TaskDef {
        id: "open_city",
        kind: Kind::Open(1),
        unseen: false,
    },
    TaskDef {
        id: "verify_food",
        kind: Kind::Verify(3),
        unseen: false,
    },
    TaskDef {
        id: "choice_pet",
        kind: Kind::Choice(2),
        unseen: false,
    },
    TaskDef {
        id: "open_pet",
        kind: Kind::Open(2),
        unseen: false,
    },
    TaskDef {
        id: "open_food",
        kind: Kind::Open(3),
        unseen: false,
    },
    TaskDef {
        id: "novel_color",
        kind: Kind::Open(0),
        unseen: true,
    },
    TaskDef {
        id: "novel_city",
        kind: Kind::Open(1),
        unseen: true,
    },
    TaskDef {
        id: "novel_pet_choice",
        kind: Kind::Choice(2),
        unseen: true,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSuite {
    pub train: Vec<QAInstance>,
    pub test: Vec<QAInstance>,
    pub unseen_task_ids: Vec<String>,
    /// Surface word → shared concept, for the frozen query encoder.
    pub lexicon: BTreeMap<String, String>,
    /// Entity → attribute value per attribute.
    pub facts: Vec<[usize; 4]>,
}

pub fn lexicon() -> BTreeMap<String, String> {
    let mut lex = BTreeMap::new();
    for a in &ATTRIBUTES {
        for w in a.seen_words.iter().chain(&a.unseen_words) {
            lex.insert(w.to_string(), a.concept.to_string());
        }
    }
    lex
}

fn entity(i: usize) -> String {
    format!("ent{i}")
}

fn words(rng: &mut impl Rng, attr: &Attribute, unseen: bool) -> String {
    let pool: &[&str] = if unseen { &attr.unseen_words } else { &attr.seen_words };
    let mut picked: Vec<&str> = pool.choose_multiple(rng, 2).copied().collect();
    picked.shuffle(rng);
    picked.join(" ")
}

fn make(task: &TaskDef, facts: &[[usize; 4]], rng: &mut impl Rng, split: Split, offset: usize) -> QAInstance {
    let e = rng.random_range(0..facts.len());
    let name = entity(e);
    let notes = format!("notes about {name}");
    let (format, context, question, answer, options) = match task.kind {
        Kind::Lookup => {
            let a = rng.random_range(0..ATTRIBUTES.len());
            let other = (a + rng.random_range(1..ATTRIBUTES.len())) % ATTRIBUTES.len();
            let mut lines = [a, other].map(|k| format!("{name} has {} {}", ATTRIBUTES[k].seen_words[0], ATTRIBUTES[k].values[facts[e][k]]));
            lines.shuffle(rng);
            (
                Format::Extractive,
                lines.join(" . "),
                format!("what {} does {name} have", words(rng, &ATTRIBUTES[a], false)),
                ATTRIBUTES[a].values[facts[e][a]].to_string(),
                None,
            )
        }
        Kind::Open(a) => (
            Format::Abstractive,
            notes,
            format!("which {} is linked to {name}", words(rng, &ATTRIBUTES[a], task.unseen)),
            ATTRIBUTES[a].values[facts[e][a]].to_string(),
            None,
        ),
        Kind::Choice(a) => {
            let gold = facts[e][a];
            let mut opts: Vec<usize> = (0..ATTRIBUTES[a].values.len()).filter(|&v| v != gold).collect();
            opts.shuffle(rng);
            opts.truncate(2);
            opts.push(gold);
            opts.shuffle(rng);
            (
                Format::MultipleChoice,
                notes,
                format!("choose the {} of {name}", words(rng, &ATTRIBUTES[a], task.unseen)),
                ATTRIBUTES[a].values[gold].to_string(),
                Some(opts.iter().map(|&v| ATTRIBUTES[a].values[v].to_string()).collect()),
            )
        }
        Kind::Verify(a) => {
            let truth = rng.random_bool(0.5);
            let v = if truth {
                facts[e][a]
            } else {
                (facts[e][a] + rng.random_range(1..ATTRIBUTES[a].values.len())) % ATTRIBUTES[a].values.len()
            };
            (
                Format::YesNo,
                notes,
                format!(
                    "is the {} of {name} {}",
                    words(rng, &ATTRIBUTES[a], task.unseen),
                    ATTRIBUTES[a].values[v]
                ),
                if truth { "yes" } else { "no" }.to_string(),
                None,
            )
        }
    };
    QAInstance {
        task_id: task.id.to_string(),
        format,
        context,
        question,
        answer,
        options,
        split,
        offset,
    }
}

pub fn generate(config: &SyntheticConfig) -> SyntheticSuite {
    let mut rng = rng_for(config.seed, "synthetic/world");
    let facts: Vec<[usize; 4]> = (0..config.entities.max(1))
        .map(|_| std::array::from_fn(|k| rng.random_range(0..ATTRIBUTES[k].values.len())))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for task in &TASKS {
        let mut rng = rng_for(config.seed, &format!("synthetic/{}/train", task.id));
        for i in 0..config.train_per_task {
            train.push(make(task, &facts, &mut rng, Split::Train, i));
        }
        let mut rng = rng_for(config.seed, &format!("synthetic/{}/test", task.id));
        for i in 0..config.test_per_task {
            test.push(make(task, &facts, &mut rng, Split::Test, i));
        }
    }
    SyntheticSuite {
        train,
        test,
        unseen_task_ids: TASKS.iter().filter(|t| t.unseen).map(|t| t.id.to_string()).collect(),
        lexicon: lexicon(),
        facts,
    }
}
