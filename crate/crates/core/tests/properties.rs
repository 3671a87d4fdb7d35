mod common;

use common::{desk_config, inst};
use oltqa_core::config::Config;
use oltqa_core::distill::{kl_divergence, KDEdgeSet, Scoreboard};
use oltqa_core::miner::{select_hints, Bm25Index, CandidateSet, Provenance};
use oltqa_core::oracle::{softmax, ModelTag};
use oltqa_core::prompt_pool::{MetaPromptPool, PoolConfig, QueryVector};
use oltqa_core::task_registry::{downsample_tasks, Format, QAInstance, TaskSpec};
use proptest::prelude::*;

const WORDS: [&str; 8] = ["red", "blue", "cat", "owl", "rome", "tea", "ent1", "ent2"];

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..max).prop_map(|w| w.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn pool_strategy() -> impl Strategy<Value = Vec<QAInstance>> {
    prop::collection::vec((sentence(5), sentence(4)), 2..20).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, (c, q))| inst(&format!("t{}", i % 3), i, &c, &q, "x"))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn curated_sizes_are_monotone_bounded_and_positive(
        originals in prop::collection::vec(1usize..3000, 1..12),
        alpha in 0.0f64..3.0,
        head in 1usize..2000,
    ) {
        let registry: Vec<TaskSpec> = originals.iter().enumerate().map(|(i, &n)| TaskSpec::new(format!("t{i:02}"), Format::Extractive, n)).collect();
        let m = downsample_tasks(&registry, alpha, head, 0).unwrap();
        let sizes: Vec<usize> = registry.iter().map(|t| m.sampled_train_sizes[&t.task_id]).collect();
        for (s, t) in sizes.iter().zip(&registry) {
            prop_assert!(*s >= 1);
            prop_assert!(*s <= t.original_train_size);
        }
        // Before capping by the original size, the profile never increases with rank.
        let h = head.min(originals[0]) as f64;
        let uncapped: Vec<usize> = (1..=originals.len()).map(|r| ((h * (r as f64).powf(-alpha)).floor() as usize).max(1)).collect();
        prop_assert!(uncapped.windows(2).all(|w| w[0] >= w[1]));
        for (s, (u, o)) in sizes.iter().zip(uncapped.iter().zip(&originals)) {
            prop_assert_eq!(*s, (*u).min(*o));
        }
    }

    #[test]
    fn softmax_normalises_and_ignores_shifts(scores in prop::collection::vec(-50.0f64..50.0, 1..30), shift in -1e3f64..1e3) {
        let p = softmax(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(a in prop::collection::vec(-5.0f64..5.0, 1..20), b in prop::collection::vec(-5.0f64..5.0, 20)) {
        let p = softmax(&a);
        let q = softmax(&b[..a.len()]);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn bm25_never_returns_the_query_itself(pool in pool_strategy(), pick in any::<prop::sample::Index>(), c in 1usize..25) {
        let index = Bm25Index::build(&pool);
        let q = pick.index(pool.len());
        if c > pool.len() - 1 {
            prop_assert!(index.top(&pool[q], c).is_err());
        }
        let c = c.min(pool.len() - 1);
        let top = index.top(&pool[q], c).unwrap();
        prop_assert!(!top.contains(&q));
        prop_assert_eq!(top.len(), c);
        let mut distinct = top.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), top.len());
    }

    #[test]
    fn selected_keys_are_distinct_and_closest(
        size in 2usize..10,
        dim in 2usize..6,
        seed in any::<u64>(),
        x in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let select = 1 + (seed as usize) % size;
        let config = PoolConfig { size, select_count: select, prompt_len: 1, ..PoolConfig::default() };
        let pool = MetaPromptPool::new(config, dim, 2, seed).unwrap();
        let q = QueryVector(x[..dim].to_vec());
        prop_assume!(q.0.iter().any(|v| v.abs() > 1e-3));
        let sel = pool.select_keys(&q).unwrap();
        prop_assert_eq!(sel.len(), select);
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        let d = |i: usize| oltqa_core::prompt_pool::cosine_distance(&pool.key(i), &q.0);
        let worst_in = sel.iter().map(|&i| d(i)).fold(f64::NEG_INFINITY, f64::max);
        for i in (0..size).filter(|i| !sel.contains(i)) {
            prop_assert!(d(i) >= worst_in);
        }
    }

    #[test]
    fn gated_edges_are_strict_and_antisymmetric(v in prop::collection::vec(-3i32..=0, 3)) {
        let board = Scoreboard::new(v[0] as f64, v[1] as f64, v[2] as f64, 1).unwrap();
        let edges = KDEdgeSet::from_scoreboard(&board);
        for &(t, s) in &edges.edges {
            prop_assert_ne!(t, s);
            prop_assert!(board.get(t) > board.get(s));
            prop_assert!(!edges.contains(s, t));
        }
    }

    #[test]
    fn subsample_is_an_ordered_subset(n in 1usize..40, k in 1usize..40, seed in any::<u64>()) {
        let set = CandidateSet::new("q".into(), (0..n).map(|i| i * 3).collect(), Provenance::Bm25Pool);
        let sub = set.subsample(k, seed, "prop");
        prop_assert_eq!(sub.len(), k.min(n));
        prop_assert!(sub.examples.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sub.examples.iter().all(|e| set.examples.contains(e)));
        prop_assert_eq!(sub.examples, set.subsample(k, seed, "prop").examples);
    }

    #[test]
    fn hint_selection_ignores_input_order(
        scores in prop::collection::vec(-2i32..2, 1..12),
        perm_seed in any::<u64>(),
        k in 1usize..6,
    ) {
        let n = scores.len();
        let keys: Vec<(String, usize)> = (0..n).map(|i| (format!("t{}", i % 2), i)).collect();
        let hints: Vec<String> = (0..n).map(|i| format!("h{i}")).collect();
        let f: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let refs: Vec<&str> = hints.iter().map(String::as_str).collect();
        let base = select_hints(&f, &keys, &refs, k);

        let mut order: Vec<usize> = (0..n).collect();
        let mut state = perm_seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let f2: Vec<f64> = order.iter().map(|&i| f[i]).collect();
        let k2: Vec<(String, usize)> = order.iter().map(|&i| keys[i].clone()).collect();
        let h2: Vec<&str> = order.iter().map(|&i| refs[i]).collect();
        prop_assert_eq!(base, select_hints(&f2, &k2, &h2, k));
    }

    #[test]
    fn config_survives_a_toml_roundtrip(alpha in 0.0f64..4.0, seed in any::<u32>(), epochs in 1usize..9) {
        let mut c = desk_config();
        c.curation.alpha = alpha;
        c.train.seed = seed as u64;
        c.train.epochs = epochs;
        let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn gating_never_pairs_a_model_with_itself() {
    let board = Scoreboard::new(-1.0, -1.0, -1.0, 1).unwrap();
    assert!(KDEdgeSet::from_scoreboard(&board).is_empty());
    let tags = [ModelTag::R1, ModelTag::R2, ModelTag::F];
    let board = Scoreboard::new(-1.0, -2.0, -3.0, 1).unwrap();
    let edges = KDEdgeSet::from_scoreboard(&board);
    assert_eq!(edges.len(), 3);
    assert!(tags.iter().all(|&t| !edges.contains(t, t)));
}
