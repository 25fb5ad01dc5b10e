//! Node pattern extraction: random-walk contexts, an edge discriminator
//! scoring (target, context) pairs, and fixed-size summaries of those scores
//! plus a degree channel.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::nn::{sigmoid, Gradients, Linear, Trainable};
use crate::rng::{derive_seed, Rng};

/// Padding value for unused context slots.
pub const SENTINEL: usize = usize::MAX;

/// Width of a [`PatternVector`]: five score statistics and the degree channel.
pub const PATTERN_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkConfig {
    /// Maximum steps per walk; also the context capacity `K`.
    pub walk_length: usize,
    #[serde(default = "default_num_walks")]
    pub num_walks: usize,
}

fn default_num_walks() -> usize {
    4
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walk_length: 10,
            num_walks: default_num_walks(),
        }
    }
}

impl WalkConfig {
    pub fn new(walk_length: usize, num_walks: usize) -> Self {
        Self {
            walk_length,
            num_walks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkContext {
    pub target: usize,
    /// Exactly `K` entries; unused slots hold [`SENTINEL`].
    pub context: Vec<usize>,
}

impl WalkContext {
    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.context.iter().copied().filter(|&v| v != SENTINEL)
    }

    pub fn len(&self) -> usize {
        self.nodes().count()
    }

    pub fn is_empty(&self) -> bool {
        self.context.first().is_none_or(|&v| v == SENTINEL)
    }
}

/// One uniform-neighbour walk of up to `steps` steps; stops early at an
/// isolated node. The start node is not included.
pub fn random_walk(graph: &Graph, start: usize, steps: usize, rng: &mut Rng) -> Vec<usize> {
    let mut path = Vec::with_capacity(steps);
    let mut cur = start;
    for _ in 0..steps {
        match graph.neighbors(cur).choose(rng) {
            Some(&next) => {
                path.push(next);
                cur = next;
            }
            None => break,
        }
    }
    path
}

/// Context of `node`: deduplicated nodes visited by `num_walks` walks,
/// target excluded, in first-visit order, truncated or padded to
/// `walk_length` slots.
pub fn sample_walks(graph: &Graph, node: usize, walk_length: usize, num_walks: usize, seed: u64) -> Result<WalkContext> {
    if node >= graph.num_nodes() {
        return Err(Error::InvalidParameter(format!(
            "node {node} out of range for a graph with {} nodes",
            graph.num_nodes()
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut context = Vec::with_capacity(walk_length);
    'walks: for _ in 0..num_walks {
        for v in random_walk(graph, node, walk_length, &mut rng) {
            if context.len() == walk_length {
                break 'walks;
            }
            if v != node && !context.contains(&v) {
                context.push(v);
            }
        }
    }
    context.resize(walk_length, SENTINEL);
    Ok(WalkContext { target: node, context })
}

/// Contexts for every node; node `i` uses seed `derive_seed(seed, i)`.
pub fn sample_contexts(graph: &Graph, config: WalkConfig, seed: u64) -> Vec<WalkContext> {
    (0..graph.num_nodes())
        .into_par_iter()
        .map(|i| {
            sample_walks(graph, i, config.walk_length, config.num_walks, derive_seed(seed, i as u64))
                .expect("node index in range")
        })
        .collect()
}

/// Node features in both dense and sparse form. The discriminator's
/// interaction term only touches coordinates where both endpoints are
/// nonzero, which keeps bag-of-words features cheap.
#[derive(Clone, Debug)]
pub struct FeatureIndex {
    dense: Matrix,
    nonzero: Vec<Vec<(usize, f64)>>,
}

impl FeatureIndex {
    pub fn new(features: &Matrix) -> Self {
        let nonzero = (0..features.rows())
            .map(|r| {
                features
                    .row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self {
            dense: features.clone(),
            nonzero,
        }
    }

    pub fn dense(&self) -> &Matrix {
        &self.dense
    }

    pub fn num_nodes(&self) -> usize {
        self.dense.rows()
    }

    pub fn dim(&self) -> usize {
        self.dense.cols()
    }

    /// Calls `f(k, x_uk · x_vk)` for every shared nonzero coordinate.
    fn for_each_product(&self, u: usize, v: usize, mut f: impl FnMut(usize, f64)) {
        let (a, b) = (&self.nonzero[u], &self.nonzero[v]);
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    f(a[i].0, a[i].1 * b[j].1);
                    i += 1;
                    j += 1;
                }
            }
        }
    }
}

/// Two-layer MLP on `[x_u ‖ x_v ‖ x_u ⊙ x_v]` followed by a sigmoid.
///
/// The first layer's weight is stored as three `d × h` blocks so the
/// concatenated input never has to be materialised.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDiscriminator {
    w_target: Matrix,
    w_context: Matrix,
    w_product: Matrix,
    bias: Vec<f64>,
    head: Linear,
}

/// Cached pair activations for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct PairCache {
    pairs: Vec<(usize, usize)>,
    pre: Matrix,
    hidden: Matrix,
    scores: Vec<f64>,
}

impl EdgeDiscriminator {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::InvalidParameter(format!(
                "discriminator needs positive sizes (dim {dim}, hidden {hidden})"
            )));
        }
        let first = Linear::new(3 * dim, hidden, rng);
        let block = |k: usize| Matrix::from_fn(dim, hidden, |r, c| first.weight.get(k * dim + r, c));
        Ok(Self {
            w_target: block(0),
            w_context: block(1),
            w_product: block(2),
            bias: first.bias.clone(),
            head: Linear::new(hidden, 1, rng),
        })
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w_target: Matrix::zeros(dim, hidden),
            w_context: Matrix::zeros(dim, hidden),
            w_product: Matrix::zeros(dim, hidden),
            bias: vec![0.0; hidden],
            head: Linear::zeros(hidden, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_target.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_target.cols()
    }

    /// Scores for `(target, context)` pairs.
    pub fn score_pairs(&self, features: &FeatureIndex, pairs: &[(usize, usize)]) -> Result<(Vec<f64>, PairCache)> {
        if features.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "discriminator feature dimension",
                expected: self.input_dim(),
                actual: features.dim(),
            });
        }
        let n = features.num_nodes();
        if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::InvalidParameter(format!(
                "pair ({u}, {v}) references a node outside 0..{n}"
            )));
        }
        let h = self.hidden_dim();
        let from_target = features.dense().matmul(&self.w_target);
        let from_context = features.dense().matmul(&self.w_context);
        let mut pre = Matrix::zeros(pairs.len(), h);
        pre.as_mut_slice()
            .par_chunks_mut(h.max(1))
            .zip(pairs.par_iter())
            .for_each(|(row, &(u, v))| {
                for ((z, a), b) in row.iter_mut().zip(from_target.row(u)).zip(from_context.row(v)) {
                    *z = a + b;
                }
                features.for_each_product(u, v, |k, x| {
                    for (z, w) in row.iter_mut().zip(self.w_product.row(k)) {
                        *z += x * w;
                    }
                });
                for (z, b) in row.iter_mut().zip(&self.bias) {
                    *z += b;
                }
            });
        let hidden = pre.map(|z| z.max(0.0));
        let logits = self.head.forward(&hidden);
        let scores: Vec<f64> = logits.as_slice().iter().map(|&a| sigmoid(a)).collect();
        let cache = PairCache {
            pairs: pairs.to_vec(),
            pre,
            hidden,
            scores: scores.clone(),
        };
        Ok((scores, cache))
    }

    /// Parameter gradients given `dL/d score` for every cached pair.
    pub fn backward(&self, features: &FeatureIndex, cache: &PairCache, grad_scores: &[f64]) -> Result<Gradients> {
        if grad_scores.len() != cache.scores.len() {
            return Err(Error::DimensionMismatch {
                context: "discriminator score gradient",
                expected: cache.scores.len(),
                actual: grad_scores.len(),
            });
        }
        let (n, d, h) = (features.num_nodes(), self.input_dim(), self.hidden_dim());
        let grad_logit: Vec<f64> = grad_scores
            .iter()
            .zip(&cache.scores)
            .map(|(g, s)| g * s * (1.0 - s))
            .collect();
        let grad_logit = Matrix::from_vec(grad_logit.len(), 1, grad_logit)?;
        let head_w = cache.hidden.t_matmul(&grad_logit).into_vec();
        let head_b = grad_logit.column_sums();

        let mut grad_pre = grad_logit.matmul_t(&self.head.weight);
        for (g, &z) in grad_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let mut by_target = Matrix::zeros(n, h);
        let mut by_context = Matrix::zeros(n, h);
        let mut w_product = Matrix::zeros(d, h);
        for (p, &(u, v)) in cache.pairs.iter().enumerate() {
            let g = grad_pre.row(p);
            for (a, b) in by_target.row_mut(u).iter_mut().zip(g) {
                *a += b;
            }
            for (a, b) in by_context.row_mut(v).iter_mut().zip(g) {
                *a += b;
            }
            features.for_each_product(u, v, |k, x| {
                for (a, b) in w_product.row_mut(k).iter_mut().zip(g) {
                    *a += x * b;
                }
            });
        }
        Ok(Gradients(vec![
            features.dense().t_matmul(&by_target).into_vec(),
            features.dense().t_matmul(&by_context).into_vec(),
            w_product.into_vec(),
            grad_pre.column_sums(),
            head_w,
            head_b,
        ]))
    }
}

impl Trainable for EdgeDiscriminator {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.w_target.as_slice(),
            self.w_context.as_slice(),
            self.w_product.as_slice(),
            &self.bias,
            self.head.weight.as_slice(),
            &self.head.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_target.as_mut_slice(),
            self.w_context.as_mut_slice(),
            self.w_product.as_mut_slice(),
            &mut self.bias,
            self.head.weight.as_mut_slice(),
            &mut self.head.bias,
        ]
    }

    fn param_names(&self) -> Vec<String> {
        ["w_target", "w_context", "w_product", "bias", "head.weight", "head.bias"]
            .iter()
            .map(|s| format!("discriminator.{s}"))
            .collect()
    }
}

/// Local pattern of one node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternVector {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub frac_above_half: f64,
    pub degree_channel: f64,
}

impl PatternVector {
    /// Summary used when a node has no context: neutral scores.
    pub const NEUTRAL_STATS: [f64; 5] = [0.5, 0.0, 0.5, 0.5, 0.0];

    pub fn from_scores(scores: &[f64], degree: usize) -> Self {
        let [mean, std, min, max, frac_above_half] = summarize(scores);
        Self {
            mean,
            std,
            min,
            max,
            frac_above_half,
            degree_channel: degree_channel(degree),
        }
    }

    pub fn to_array(&self) -> [f64; PATTERN_DIM] {
        [self.mean, self.std, self.min, self.max, self.frac_above_half, self.degree_channel]
    }

    pub fn from_array(a: [f64; PATTERN_DIM]) -> Self {
        Self {
            mean: a[0],
            std: a[1],
            min: a[2],
            max: a[3],
            frac_above_half: a[4],
            degree_channel: a[5],
        }
    }

    pub const COLUMNS: [&'static str; PATTERN_DIM] = ["mean", "std", "min", "max", "frac_above_half", "degree_channel"];
}

pub fn degree_channel(degree: usize) -> f64 {
    (degree as f64).ln_1p()
}

/// `[mean, population std, min, max, fraction > 0.5]`.
fn summarize(scores: &[f64]) -> [f64; 5] {
    if scores.is_empty() {
        return PatternVector::NEUTRAL_STATS;
    }
    let m = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / m;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / m;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let above = scores.iter().filter(|&&s| s > 0.5).count() as f64 / m;
    [mean, var.sqrt(), min, max, above]
}

/// Back-propagates `grad` (over the five statistics) onto the scores.
/// Min and max route to the first extremal entry; the fraction is a step
/// function with zero derivative.
fn summarize_backward(scores: &[f64], grad: &[f64], out: &mut [f64]) {
    if scores.is_empty() {
        return;
    }
    let m = scores.len() as f64;
    let [mean, std, min, max, _] = summarize(scores);
    for (o, s) in out.iter_mut().zip(scores) {
        *o = grad[0] / m;
        if std > 0.0 {
            *o += grad[1] * (s - mean) / (m * std);
        }
    }
    if let Some(i) = scores.iter().position(|&s| s == min) {
        out[i] += grad[2];
    }
    if let Some(i) = scores.iter().position(|&s| s == max) {
        out[i] += grad[3];
    }
}

/// Scores and patterns for a batch of contexts.
#[derive(Clone, Debug, Default)]
pub struct PatternCache {
    pairs: PairCache,
    /// `offsets[i]..offsets[i + 1]` indexes node `i`'s pairs.
    offsets: Vec<usize>,
}

impl PatternCache {
    /// Discriminator scores of node `i`'s valid context entries.
    pub fn scores(&self, i: usize) -> &[f64] {
        &self.pairs.scores[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn pairs(&self, i: usize) -> &[(usize, usize)] {
        &self.pairs.pairs[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Local patterns for every context, as an `n × PATTERN_DIM` matrix (row
/// `i` belongs to `contexts[i]`).
pub fn local_patterns(
    graph: &Graph,
    features: &FeatureIndex,
    contexts: &[WalkContext],
    discriminator: &EdgeDiscriminator,
) -> Result<(Matrix, PatternCache)> {
    let mut pairs = Vec::new();
    let mut offsets = Vec::with_capacity(contexts.len() + 1);
    offsets.push(0);
    for ctx in contexts {
        if ctx.target >= graph.num_nodes() {
            return Err(Error::InvalidParameter(format!("context target {} out of range", ctx.target)));
        }
        pairs.extend(ctx.nodes().map(|v| (ctx.target, v)));
        offsets.push(pairs.len());
    }
    let (_, pair_cache) = discriminator.score_pairs(features, &pairs)?;
    let cache = PatternCache {
        pairs: pair_cache,
        offsets,
    };
    let mut out = Matrix::zeros(contexts.len(), PATTERN_DIM);
    for (i, ctx) in contexts.iter().enumerate() {
        let pv = PatternVector::from_scores(cache.scores(i), graph.degree(ctx.target));
        out.row_mut(i).copy_from_slice(&pv.to_array());
    }
    Ok((out, cache))
}

/// Single-node convenience wrapper around [`local_patterns`].
pub fn local_pattern(
    graph: &Graph,
    features: &FeatureIndex,
    context: &WalkContext,
    discriminator: &EdgeDiscriminator,
) -> Result<PatternVector> {
    let (m, _) = local_patterns(graph, features, std::slice::from_ref(context), discriminator)?;
    let mut a = [0.0; PATTERN_DIM];
    a.copy_from_slice(m.row(0));
    Ok(PatternVector::from_array(a))
}

/// Discriminator gradients from `dL/d patterns` (`n × PATTERN_DIM`).
pub fn local_patterns_backward(
    features: &FeatureIndex,
    discriminator: &EdgeDiscriminator,
    cache: &PatternCache,
    grad_patterns: &Matrix,
) -> Result<Gradients> {
    let n = cache.offsets.len().saturating_sub(1);
    if grad_patterns.shape() != (n, PATTERN_DIM) {
        return Err(Error::DimensionMismatch {
            context: "pattern gradient rows",
            expected: n,
            actual: grad_patterns.rows(),
        });
    }
    let mut grad_scores = vec![0.0; cache.pairs.scores.len()];
    for i in 0..n {
        let (a, b) = (cache.offsets[i], cache.offsets[i + 1]);
        summarize_backward(cache.scores(i), &grad_patterns.row(i)[..5], &mut grad_scores[a..b]);
    }
    discriminator.backward(features, &cache.pairs, &grad_scores)
}

/// Componentwise mean of local patterns.
pub fn global_pattern(local: &[PatternVector]) -> Result<PatternVector> {
    if local.is_empty() {
        return Err(Error::Empty("local patterns"));
    }
    let mut acc = [0.0; PATTERN_DIM];
    for p in local {
        for (a, v) in acc.iter_mut().zip(p.to_array()) {
            *a += v;
        }
    }
    Ok(PatternVector::from_array(acc.map(|a| a / local.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use crate::rng::rng_for;

    fn clique(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn isolated_node_gets_all_sentinels() {
        let g = Graph::from_edges(3, &[(1, 2)]).unwrap();
        let ctx = sample_walks(&g, 0, 5, 4, 1).unwrap();
        assert_eq!(ctx.context, vec![SENTINEL; 5]);
        assert!(ctx.is_empty());
    }

    #[test]
    fn single_edge_forces_context() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        for len in [1, 5, 40] {
            let ctx = sample_walks(&g, 0, len, 4, 3).unwrap();
            assert_eq!(ctx.context[0], 1);
            assert!(ctx.context[1..].iter().all(|&v| v == SENTINEL));
        }
    }

    #[test]
    fn contexts_are_deduplicated_and_exclude_target() {
        let g = clique(8);
        for seed in 0..20 {
            let ctx = sample_walks(&g, 3, 10, 4, seed).unwrap();
            let nodes: Vec<_> = ctx.nodes().collect();
            assert!(!nodes.contains(&3));
            let mut sorted = nodes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), nodes.len());
            assert_eq!(ctx.context.len(), 10);
        }
    }

    #[test]
    fn walks_are_reproducible() {
        let g = clique(6);
        assert_eq!(sample_contexts(&g, WalkConfig::default(), 9), sample_contexts(&g, WalkConfig::default(), 9));
        assert_ne!(sample_walks(&g, 0, 5, 1, 1).unwrap(), sample_walks(&g, 0, 5, 1, 2).unwrap());
    }

    #[test]
    fn zero_discriminator_scores_half() {
        let feats = FeatureIndex::new(&Matrix::from_fn(4, 3, |r, c| (r + c) as f64));
        let disc = EdgeDiscriminator::zeros(3, 5);
        let (scores, _) = disc.score_pairs(&feats, &[(0, 1), (2, 3), (1, 1)]).unwrap();
        assert!(scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn decomposed_first_layer_matches_concatenation() {
        let mut rng = rng_for(1, 0);
        let x = Matrix::from_fn(5, 3, |r, c| if (r + c) % 3 == 0 { 0.0 } else { r as f64 - c as f64 * 0.7 });
        let feats = FeatureIndex::new(&x);
        let disc = EdgeDiscriminator::new(3, 4, &mut rng).unwrap();
        let pairs = [(0, 1), (2, 4), (3, 3), (4, 0)];
        let (scores, _) = disc.score_pairs(&feats, &pairs).unwrap();
        let w = Matrix::from_fn(9, 4, |r, c| match r / 3 {
            0 => disc.w_target.get(r, c),
            1 => disc.w_context.get(r - 3, c),
            _ => disc.w_product.get(r - 6, c),
        });
        for (&(u, v), s) in pairs.iter().zip(scores) {
            let mut input: Vec<f64> = x.row(u).to_vec();
            input.extend_from_slice(x.row(v));
            input.extend(x.row(u).iter().zip(x.row(v)).map(|(a, b)| a * b));
            let hidden: Vec<f64> = (0..4)
                .map(|c| ((0..9).map(|r| input[r] * w.get(r, c)).sum::<f64>() + disc.bias[c]).max(0.0))
                .collect();
            let logit = (0..4).map(|c| hidden[c] * disc.head.weight.get(c, 0)).sum::<f64>() + disc.head.bias[0];
            assert!((sigmoid(logit) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_pattern_uses_fallback() {
        let g = Graph::from_edges(3, &[(1, 2)]).unwrap();
        let feats = FeatureIndex::new(&Matrix::filled(3, 2, 1.0));
        let mut rng = rng_for(2, 0);
        let disc = EdgeDiscriminator::new(2, 3, &mut rng).unwrap();
        let ctx = sample_walks(&g, 0, 5, 4, 0).unwrap();
        let pv = local_pattern(&g, &feats, &ctx, &disc).unwrap();
        assert_eq!(pv.to_array(), [0.5, 0.0, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn identical_nodes_have_identical_patterns() {
        // Nodes 0 and 1 are twins: same features, both adjacent only to 2 and 3.
        let g = Graph::from_edges(4, &[(0, 2), (0, 3), (1, 2), (1, 3)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.5], vec![1.0, 0.5], vec![0.0, 2.0], vec![-1.0, 1.0]]).unwrap();
        let feats = FeatureIndex::new(&x);
        let disc = EdgeDiscriminator::new(2, 4, &mut rng_for(3, 0)).unwrap();
        let a = WalkContext { target: 0, context: vec![2, 3, SENTINEL] };
        let b = WalkContext { target: 1, context: vec![2, 3, SENTINEL] };
        assert_eq!(
            local_pattern(&g, &feats, &a, &disc).unwrap(),
            local_pattern(&g, &feats, &b, &disc).unwrap()
        );
    }

    #[test]
    fn degree_channel_is_increasing() {
        assert_eq!(degree_channel(0), 0.0);
        for d in 0..100 {
            assert!(degree_channel(d + 1) > degree_channel(d));
        }
    }

    #[test]
    fn global_pattern_examples() {
        let a = PatternVector::from_array([0.2, 0.1, 0.1, 0.4, 0.0, 1.0]);
        let b = PatternVector::from_array([0.6, 0.3, 0.5, 0.9, 1.0, 2.0]);
        let same = global_pattern(&[a, a, a]).unwrap().to_array();
        for (x, y) in same.iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-15);
        }
        let mid = global_pattern(&[a, b]).unwrap().to_array();
        for ((m, x), y) in mid.iter().zip(a.to_array()).zip(b.to_array()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
        assert_eq!(global_pattern(&[a, b]).unwrap(), global_pattern(&[b, a]).unwrap());
        assert!(global_pattern(&[]).is_err());
    }

    #[test]
    fn summary_statistics_by_hand() {
        let s = summarize(&[0.2, 0.8, 0.6, 0.4]);
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!((s[1] - 0.05f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[2], 0.2);
        assert_eq!(s[3], 0.8);
        assert_eq!(s[4], 0.5);
    }

    struct Harness<'a> {
        graph: &'a Graph,
        feats: &'a FeatureIndex,
        contexts: &'a [WalkContext],
        weights: Matrix,
    }

    impl Harness<'_> {
        fn loss(&self, disc: &EdgeDiscriminator) -> f64 {
            let (p, _) = local_patterns(self.graph, self.feats, self.contexts, disc).unwrap();
            p.as_slice().iter().zip(self.weights.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        }
    }

    #[test]
    fn discriminator_gradients_through_patterns() {
        let g = Graph::from_edges(
            10,
            &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (5, 6), (6, 7), (7, 5), (2, 7), (8, 9)],
        )
        .unwrap();
        for seed in 0..3u64 {
            let x = Matrix::from_fn(10, 4, |r, c| {
                if (r * 3 + c + seed as usize) % 5 == 0 {
                    0.0
                } else {
                    ((r * 7 + c * 11 + seed as usize) % 13) as f64 / 6.0 - 1.0
                }
            });
            let feats = FeatureIndex::new(&x);
            let contexts = sample_contexts(&g, WalkConfig::new(5, 2), seed);
            let mut disc = EdgeDiscriminator::new(4, 6, &mut rng_for(seed, 1)).unwrap();
            for (k, b) in disc.bias.iter_mut().enumerate() {
                *b = 0.05 * (k as f64 + 1.0);
            }
            let h = Harness {
                graph: &g,
                feats: &feats,
                contexts: &contexts,
                // The fraction-above-half column is a step function of the
                // parameters; finite differences straddling 0.5 would see a jump.
                weights: Matrix::from_fn(10, PATTERN_DIM, |r, c| {
                    if c == 4 {
                        0.0
                    } else {
                        ((r + 2 * c) % 5) as f64 * 0.3 - 0.6
                    }
                }),
            };
            let (_, cache) = local_patterns(&g, &feats, &contexts, &disc).unwrap();
            let grads = local_patterns_backward(&feats, &disc, &cache, &h.weights).unwrap();
            let report = check_gradients(&mut disc, &grads, 1e-5, |d| h.loss(d));
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
