use std::collections::HashSet;

use proptest::prelude::*;

use relnet::crn::{binomial, combinations, sample_subsets};
use relnet::gap::{kl_attention_loss, pool_priors, ParseTree};
use relnet::optim::{Adam, AdamConfig};
use relnet::synth::{
    gen_scene_task, gen_sequence_task, left_of, Dataset, SceneObject, SceneSpec, SequenceSpec, TaskKind, TaskSpec,
};
use relnet::{Graph, ParamStore, Tensor};

fn distribution(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

/// Random binary bracketing of `s` words from a list of merge positions.
fn bracketing(s: usize, merges: &[usize]) -> (Vec<Option<usize>>, Vec<String>, Vec<bool>) {
    let mut parent: Vec<Option<usize>> = vec![None; s];
    let mut frontier: Vec<usize> = (0..s).collect();
    let mut m = merges.iter().cycle();
    while frontier.len() > 1 {
        let i = m.next().copied().unwrap_or(0) % (frontier.len() - 1);
        let node = parent.len();
        parent.push(None);
        parent[frontier[i]] = Some(node);
        parent[frontier[i + 1]] = Some(node);
        frontier.splice(i..i + 2, [node]);
    }
    let n = parent.len();
    (parent, vec!["X".to_string(); n], (0..n).map(|i| i >= s).collect())
}

proptest! {
    #[test]
    fn combinations_match_popcount_enumeration(n in 2usize..=12, k in 1usize..=12) {
        prop_assume!(k <= n);
        let brute = (0u32..1 << n).filter(|m| m.count_ones() as usize == k).count();
        let all = combinations(n, k);
        prop_assert_eq!(all.len(), brute);
        prop_assert_eq!(binomial(n, k), brute as u128);
        let distinct: HashSet<_> = all.iter().collect();
        prop_assert_eq!(distinct.len(), all.len());
        prop_assert!(all.iter().all(|s| s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&i| i < n)));
    }

    #[test]
    fn sampled_subsets_are_ascending_and_distinct_when_possible(n in 3usize..=30, k in 2usize..=8, t in 1usize..=20, seed in any::<u64>()) {
        prop_assume!(k < n);
        let subsets = sample_subsets(n, k, t, &mut relnet::rng(seed)).unwrap();
        prop_assert_eq!(subsets.len(), t);
        for s in &subsets {
            prop_assert_eq!(s.len(), k);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]) && s[k - 1] < n);
        }
        if (t as u128) <= binomial(n, k) {
            let distinct: HashSet<_> = subsets.iter().collect();
            prop_assert_eq!(distinct.len(), t);
        }
    }

    #[test]
    fn parse_trees_round_trip_and_spans_are_contiguous(s in 1usize..=9, merges in prop::collection::vec(0usize..16, 1..10)) {
        let (parent, tags, re) = bracketing(s, &merges);
        let tree = ParseTree::new(parent.clone(), tags, re).unwrap();
        let back: ParseTree = serde_json::from_str(&serde_json::to_string(&tree).unwrap()).unwrap();
        prop_assert_eq!(&back, &tree);
        prop_assert_eq!(tree.spans()[tree.root()].clone(), 0..s);
        for w in 0..s {
            prop_assert_eq!(tree.spans()[w].clone(), w..w + 1);
        }
        // a parent's span is the union of its children's
        for node in s..tree.len() {
            let kids = tree.children(node);
            let lo = kids.iter().map(|&c| tree.spans()[c].start).min().unwrap();
            let hi = kids.iter().map(|&c| tree.spans()[c].end).max().unwrap();
            prop_assert_eq!(tree.spans()[node].clone(), lo..hi);
        }
    }

    #[test]
    fn cycles_are_rejected(s in 2usize..=6, merges in prop::collection::vec(0usize..16, 1..6)) {
        let (mut parent, tags, re) = bracketing(s, &merges);
        let root = parent.iter().position(Option::is_none).unwrap();
        // hang the root under one of its own descendants
        parent[root] = Some(0);
        prop_assert!(ParseTree::new(parent, tags, re).is_err());
    }

    #[test]
    fn pooled_priors_are_distributions(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 1..6)) {
        let p = pool_priors(&raw).unwrap();
        for i in 0..5 {
            let naive = raw.iter().map(|v| v[i]).sum::<f64>() / raw.len() as f64;
            prop_assert!((p.mean[i] - naive).abs() < 1e-12);
        }
        prop_assert!((p.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_on_agreement(a in prop::collection::vec(0.0f64..1.0, 2..8), b_seed in any::<u64>()) {
        prop_assume!(a.iter().sum::<f64>() > 1e-3);
        let prior = distribution(&a);
        let n = prior.len();
        let other = distribution(&relnet::gradcheck::random_tensor(&[n], 1.0, &mut relnet::rng(b_seed)).map(|v| v.abs() + 1e-3).into_data());
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let prior_t = Tensor::new(vec![1, n], prior.clone()).unwrap();
        let same = kl_attention_loss(&g, g.constant(prior_t.clone()).unwrap(), &prior_t).unwrap().item().unwrap();
        let diff = kl_attention_loss(&g, g.constant(Tensor::new(vec![1, n], other).unwrap()).unwrap(), &prior_t).unwrap().item().unwrap();
        prop_assert!(same.abs() < 1e-12, "{}", same);
        prop_assert!(diff >= -1e-12, "{}", diff);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..5), c in -100.0f64..100.0) {
        let b = rows.len();
        let flat: Vec<f64> = rows.concat();
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let p = g.constant(Tensor::new(vec![b, 4], flat.clone()).unwrap()).unwrap().softmax(-1).unwrap().value();
        let q = g.constant(Tensor::new(vec![b, 4], flat.iter().map(|v| v + c).collect()).unwrap()).unwrap().softmax(-1).unwrap().value();
        for r in 0..b {
            prop_assert!((p.data()[r * 4..r * 4 + 4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn left_of_matches_brute_force(xs in prop::collection::vec(0.0f64..1.0, 2..8), reference in 0usize..8) {
        prop_assume!(reference < xs.len());
        let objects: Vec<SceneObject> = xs.iter().map(|&x| SceneObject { color: 0, shape: 0, x, y: 0.5, w: 0.1, h: 0.1 }).collect();
        let rx = xs[reference];
        let brute = (0..xs.len())
            .filter(|&i| xs[i] < rx)
            .max_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let got = left_of(&objects, reference);
        prop_assert_eq!(got.map(|i| xs[i]), brute.map(|i| xs[i]));
    }

    #[test]
    fn adam_first_step_moves_each_coordinate_by_lr(grad in prop::collection::vec(prop_oneof![-5.0f64..-0.01, 0.01f64..5.0], 1..8), lr in 1e-4f64..1e-1) {
        let n = grad.len();
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[n]));
        let mut adam = Adam::new(AdamConfig { lr, ..Default::default() }, &store).unwrap();
        let grads = {
            let g = Graph::training(&store);
            let loss = g.param(w).mul(g.constant(Tensor::vector(&grad)).unwrap()).unwrap().sum_all().unwrap();
            g.backward(loss).unwrap()
        };
        adam.step(&mut store, &grads, lr).unwrap();
        for (v, gr) in store.get(w).data().iter().zip(&grad) {
            prop_assert!((v + lr * gr.signum()).abs() < 1e-6 * lr, "{} vs {}", v, gr);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequence_labels_follow_from_features(kind in prop_oneof![Just(TaskKind::CountSymbol), Just(TaskKind::TransitionOrder)],
                                            symbols in 3usize..=6, seed in any::<u64>()) {
        let spec = SequenceSpec { kind, num_clips: 3, clip_len: 4, symbols, d: 8, n_samples: 30, seed };
        let task = gen_sequence_task(&spec).unwrap();
        for s in &task.samples {
            prop_assert_eq!(task.recompute_label(&task.features(s), &s.question), s.label);
        }
    }

    #[test]
    fn scene_labels_follow_from_features(kind in prop_oneof![Just(TaskKind::AttributeQuery), Just(TaskKind::RelationQuery)],
                                         n_objects in 2usize..=7, seed in any::<u64>()) {
        let spec = SceneSpec { kind, n_objects, colors: n_objects + 2, shapes: 3, d_app: 8, n_samples: 30, seed };
        let task = gen_scene_task(&spec).unwrap();
        let batch = task.batch(&(0..30).collect::<Vec<_>>()).unwrap();
        let (per_app, per_box) = (n_objects * 8, n_objects * 7);
        for (i, s) in task.samples.iter().enumerate() {
            let app = &batch.appearance.data()[i * per_app..(i + 1) * per_app];
            let boxes = &batch.boxes.data()[i * per_box..(i + 1) * per_box];
            prop_assert_eq!(task.recompute_label(app, boxes, &s.question), Some(s.label));
        }
    }

    #[test]
    fn datasets_survive_jsonl_round_trips(seed in any::<u64>(), scene in any::<bool>()) {
        let spec = if scene {
            TaskSpec::Scene(SceneSpec { kind: TaskKind::RelationQuery, n_objects: 4, colors: 6, shapes: 3, d_app: 6, n_samples: 12, seed })
        } else {
            TaskSpec::Sequence(SequenceSpec { kind: TaskKind::CountSymbol, num_clips: 3, clip_len: 4, symbols: 4, d: 5, n_samples: 12, seed })
        };
        let data = Dataset::generate(&spec).unwrap();
        let mut first = Vec::new();
        data.write_jsonl(&mut first).unwrap();
        let back = Dataset::read_jsonl(first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write_jsonl(&mut second).unwrap();
        prop_assert_eq!(first, second);
    }
}
