use std::collections::BTreeSet;

use proptest::prelude::*;

use nodemoe::analysis::{expert_weight_profile, per_bucket_accuracy, quantile_buckets, read_csv, write_csv, BucketAccuracyRow};
use nodemoe::checkpoint::{Checkpoint, TensorInfo};
use nodemoe::experts::{Expert, ExpertKind, ExpertSpec};
use nodemoe::gate::{GateMode, GatingNetwork};
use nodemoe::graph::graph_homophily;
use nodemoe::nn::softmax_rows;
use nodemoe::pattern::{sample_walks, PATTERN_DIM, SENTINEL};
use nodemoe::rng::rng_for;
use nodemoe::trainer::{accuracy, make_splits, mean_std, SplitSpec};
use nodemoe::{Graph, GraphOperators, Matrix, PropagationKind, Propagator};

fn graph_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..3 * n)))
}

fn signal(n: usize, d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, n * d).prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
}

/// Homophily computed from a dense adjacency built straight from the edge list.
fn homophily_oracle(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> Option<f64> {
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in edges {
        if u != v {
            adj[u][v] = true;
            adj[v][u] = true;
        }
    }
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        let deg = adj[i].iter().filter(|&&a| a).count();
        if deg == 0 {
            continue;
        }
        let same = (0..n).filter(|&j| adj[i][j] && labels[j] == labels[i]).count();
        total += same as f64 / deg as f64;
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn homophily_matches_dense_oracle((n, edges) in graph_strategy(25), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| ((seed >> (i % 60)) as usize + i) % 3).collect();
        let g = Graph::from_edges(n, &edges).unwrap();
        match homophily_oracle(n, &edges, &labels) {
            Some(h) => prop_assert!((graph_homophily(&g, &labels).unwrap() - h).abs() <= 1e-12),
            None => prop_assert!(graph_homophily(&g, &labels).is_err()),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn row_normalized_preserves_constants(n in 2usize..20, extra in prop::collection::vec((0usize..20, 0usize..20), 0..30), c in -5.0..5.0f64) {
        // A cycle guarantees min degree 1.
        let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        edges.extend(extra.into_iter().filter(|&(a, b)| a < n && b < n));
        let g = Graph::from_edges(n, &edges).unwrap();
        let p = Propagator::new(&g, PropagationKind::RowNormalized);
        let y = p.apply(&Matrix::filled(n, 2, c)).unwrap();
        for v in y.as_slice() {
            prop_assert!((v - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn low_plus_high_is_identity(((n, edges), x) in graph_strategy(20).prop_flat_map(|(n, e)| (Just((n, e)), signal(n, 3)))) {
        let g = Graph::from_edges(n, &edges).unwrap();
        let ops = GraphOperators::new(&g);
        let mut sum = ops.low.apply(&x).unwrap();
        sum.add_assign(&ops.high.apply(&x).unwrap());
        prop_assert!(sum.max_abs_diff(&x) <= 1e-10);
    }

    #[test]
    fn propagation_is_linear(
        ((n, edges), x, z) in graph_strategy(20).prop_flat_map(|(n, e)| (Just((n, e)), signal(n, 2), signal(n, 2))),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let g = Graph::from_edges(n, &edges).unwrap();
        for kind in [PropagationKind::RowNormalized, PropagationKind::SymNormalized, PropagationKind::HighPass] {
            let p = Propagator::new(&g, kind);
            let mut combo = x.scaled(a);
            combo.axpy(b, &z);
            let lhs = p.apply(&combo).unwrap();
            let mut rhs = p.apply(&x).unwrap().scaled(a);
            rhs.axpy(b, &p.apply(&z).unwrap());
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in signal(6, 4), shift in -50.0..50.0f64) {
        let p = softmax_rows(&x.scaled(5.0));
        let q = softmax_rows(&x.scaled(5.0).map(|v| v + shift));
        for r in 0..6 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(p.max_abs_diff(&q) <= 1e-9);
    }

    #[test]
    fn splits_partition_nodes(n in 5usize..400, seed in any::<u64>(), idx in 0usize..10) {
        let spec = SplitSpec { seed, split_index: idx };
        let s = make_splits(n, spec).unwrap();
        prop_assert_eq!(s.train.len(), n * 6 / 10);
        prop_assert_eq!(s.val.len(), n * 2 / 10);
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        prop_assert_eq!(s, make_splits(n, spec).unwrap());
    }

    #[test]
    fn buckets_partition_and_recombine(
        values in prop::collection::vec(0u8..12, 1..120),
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let items: Vec<(usize, f64)> = values.iter().enumerate().map(|(i, &v)| (i, v as f64 / 11.0)).collect();
        let b = quantile_buckets(&items, k).unwrap();
        prop_assert_eq!(&b, &quantile_buckets(&items, k).unwrap());
        prop_assert!(b.buckets.len() <= k);
        prop_assert_eq!(b.merged, b.buckets.len() < k);
        let mut seen = BTreeSet::new();
        for bucket in &b.buckets {
            prop_assert!(!bucket.nodes.is_empty());
            for &i in &bucket.nodes {
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(seen.len(), items.len());
        // Equal values never straddle a boundary.
        for w in b.buckets.windows(2) {
            prop_assert!(w[0].upper < w[1].lower);
        }

        let n = items.len();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let preds: Vec<usize> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as usize + (i % 2)).collect();
        let rows = per_bucket_accuracy(&b, &[("m".into(), preds.clone())], &labels).unwrap();
        let weighted: f64 = rows.iter().map(|r| r.accuracy.unwrap() * r.count as f64).sum::<f64>() / n as f64;
        let all: Vec<usize> = (0..n).collect();
        prop_assert!((weighted - accuracy(&preds, &labels, &all)).abs() <= 1e-12);
    }

    #[test]
    fn weight_profiles_stay_on_the_simplex(raw in signal(30, 4), k in 1usize..6) {
        let w = softmax_rows(&raw);
        let items: Vec<(usize, f64)> = (0..30).map(|i| (i, raw.get(i, 0))).collect();
        let b = quantile_buckets(&items, k).unwrap();
        let names: Vec<String> = (0..4).map(|j| format!("e{j}")).collect();
        let rows = expert_weight_profile(&b, &w, &names).unwrap();
        for chunk in rows.chunks(4) {
            let s: f64 = chunk.iter().map(|r| r.mean_weight.unwrap()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn walks_are_reproducible_and_well_formed((n, edges) in graph_strategy(25), node in 0usize..25, len in 1usize..12, walks in 1usize..5, seed in any::<u64>()) {
        let node = node % n;
        let g = Graph::from_edges(n, &edges).unwrap();
        let a = sample_walks(&g, node, len, walks, seed).unwrap();
        prop_assert_eq!(&a, &sample_walks(&g, node, len, walks, seed).unwrap());
        prop_assert_eq!(a.target, node);
        prop_assert_eq!(a.context.len(), len);
        let real: Vec<usize> = a.nodes().collect();
        let unique: BTreeSet<usize> = real.iter().copied().collect();
        prop_assert_eq!(unique.len(), real.len());
        prop_assert!(!unique.contains(&node));
        // Padding only after the real entries.
        let first_pad = a.context.iter().position(|&v| v == SENTINEL).unwrap_or(len);
        prop_assert!(a.context[first_pad..].iter().all(|&v| v == SENTINEL));
        if g.degree(node) == 0 {
            prop_assert!(real.is_empty());
        }
    }

    #[test]
    fn gate_outputs_are_distributions(local in signal(12, PATTERN_DIM), global in signal(1, PATTERN_DIM), seed in any::<u64>(), layers in 1usize..5) {
        for mode in [GateMode::Full, GateMode::NoLocal, GateMode::NoGlobal, GateMode::Uniform] {
            let g = GatingNetwork::new(5, 32, 32, layers, 0.3, mode, &mut rng_for(seed, 1)).unwrap();
            let (w, _) = g.forward(&local, &global, Some(&mut rng_for(seed, 2))).unwrap();
            for r in 0..12 {
                prop_assert!(w.row(r).iter().all(|&v| v >= 0.0));
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn experts_eval_deterministic_and_filters_differ(((n, edges), x) in graph_strategy(15).prop_flat_map(|(n, e)| (Just((n, e)), signal(n, 3))), seed in any::<u64>()) {
        let g = Graph::from_edges(n, &edges).unwrap();
        let ops = GraphOperators::new(&g);
        let mk = |k| Expert::new(ExpertSpec::new(k, 2, 32, 0.5), 3, 2, &mut rng_for(seed, 3)).unwrap();
        let gcn = mk(ExpertKind::Gcn);
        let hp = mk(ExpertKind::Highpass);
        let a = gcn.forward_eval(&ops, &x).unwrap();
        prop_assert_eq!(&a, &gcn.forward_eval(&ops, &x).unwrap());
        let nonconstant = (1..n).any(|r| x.row(r) != x.row(0));
        if g.num_edges() > 0 && nonconstant {
            // Same weights, different operator.
            prop_assert!(a != hp.forward_eval(&ops, &x).unwrap());
        }
    }

    #[test]
    fn mean_std_ignore_run_order(mut accs in prop::collection::vec(0.0..1.0f64, 1..40), seed in any::<u64>()) {
        let (m, s) = mean_std(&accs);
        use rand::seq::SliceRandom;
        accs.shuffle(&mut rng_for(seed, 0));
        let (m2, s2) = mean_std(&accs);
        prop_assert!((m - m2).abs() <= 1e-12 && (s - s2).abs() <= 1e-12);
    }

    #[test]
    fn bucket_csv_round_trips(vals in prop::collection::vec((any::<f64>(), prop::option::of(0.0..=1.0f64), 0usize..1000), 1..20)) {
        let rows: Vec<BucketAccuracyRow> = vals
            .iter()
            .enumerate()
            .filter(|(_, (x, _, _))| x.is_finite())
            .map(|(i, &(x, acc, count))| BucketAccuracyRow { model: format!("m{i}"), bucket: i, lower: x, upper: x, count, accuracy: acc })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_csv(&p, &rows).unwrap();
        prop_assert_eq!(read_csv::<BucketAccuracyRow>(&p).unwrap(), rows);
    }

    #[test]
    fn checkpoint_bytes_round_trip(tensors in prop::collection::vec(prop::collection::vec(any::<f64>(), 0..20), 0..6)) {
        let ckpt = Checkpoint {
            metadata: serde_json::json!({ "k": 1 }),
            tensors: tensors
                .iter()
                .enumerate()
                .map(|(i, t)| (TensorInfo { name: format!("t{i}"), shape: vec![t.len()] }, t.clone()))
                .collect(),
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for ((ia, a), (ib, b)) in back.tensors.iter().zip(&ckpt.tensors) {
            prop_assert_eq!(ia, ib);
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn matmul_matches_naive(a in signal(5, 7), b in signal(7, 3)) {
        let c = a.matmul(&b);
        for i in 0..5 {
            for j in 0..3 {
                let s: f64 = (0..7).map(|k| a.get(i, k) * b.get(k, j)).sum();
                prop_assert!((c.get(i, j) - s).abs() <= 1e-12);
            }
        }
        prop_assert!(a.t_matmul(&a).max_abs_diff(&a.transpose().matmul(&a)) <= 1e-12);
    }
}
