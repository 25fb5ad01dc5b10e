//! Contextual stochastic block models and the generalization-bound bench.
//!
//! A two-class CSBM connects same-label pairs with probability `p` and
//! cross-label pairs with probability `q`; node features are Gaussian around
//! the class mean (`mu` for class 0, `nu` for class 1). Embeddings are one hop
//! of row-normalized propagation, classified by a sigmoid linear model.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PropagationKind, Propagator};
use crate::matrix::Matrix;
use crate::nn::{bce_loss, sigmoid};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsbmParams {
    pub n: usize,
    pub p: f64,
    pub q: f64,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma: f64,
    /// Fraction of nodes in class 0.
    #[serde(default = "half")]
    pub class_balance: f64,
}

fn half() -> f64 {
    0.5
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CsbmParams {
    pub fn new(n: usize, p: f64, q: f64, mu: Vec<f64>, nu: Vec<f64>, sigma: f64) -> Self {
        Self {
            n,
            p,
            q,
            mu,
            nu,
            sigma,
            class_balance: 0.5,
        }
    }

    /// Same model with different edge probabilities.
    pub fn with_probabilities(&self, p: f64, q: f64) -> Self {
        Self {
            p,
            q,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `‖mu - nu‖`
    pub fn separation(&self) -> f64 {
        let diff: Vec<f64> = self.mu.iter().zip(&self.nu).map(|(a, b)| a - b).collect();
        norm(&diff)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        for (name, v) in [("p", self.p), ("q", self.q)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma = {} must be positive", self.sigma));
        }
        if self.mu.is_empty() || self.mu.len() != self.nu.len() {
            return bad(format!(
                "class means must share a positive dimension, got {} and {}",
                self.mu.len(),
                self.nu.len()
            ));
        }
        for (name, v) in [("mu", &self.mu), ("nu", &self.nu)] {
            if norm(v) > 1.0 + 1e-12 {
                return bad(format!("‖{name}‖ = {} exceeds 1", norm(v)));
            }
        }
        if !(0.0 < self.class_balance && self.class_balance < 1.0) {
            return bad(format!("class_balance = {} outside (0, 1)", self.class_balance));
        }
        Ok(())
    }

    /// Edge probabilities below `log²(n)/n` fall outside the dense regime the
    /// bounds assume. Returned as messages; sampling still proceeds.
    pub fn sparsity_warnings(&self) -> Vec<String> {
        let threshold = (self.n as f64).ln().powi(2) / self.n as f64;
        [("p", self.p), ("q", self.q)]
            .into_iter()
            .filter(|&(_, v)| v < threshold)
            .map(|(name, v)| format!("{name} = {v} is below log²(n)/n = {threshold:.4} for n = {}", self.n))
            .collect()
    }

    /// Closed-form class-conditional means of the propagated features,
    /// `((p·mu + q·nu)/(p+q), (q·mu + p·nu)/(p+q))`.
    pub fn expected_embedding_means(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.p + self.q;
        if s <= 0.0 {
            return Err(Error::InvalidParameter("p + q must be positive".into()));
        }
        let class0 = self.mu.iter().zip(&self.nu).map(|(m, v)| (self.p * m + self.q * v) / s).collect();
        let class1 = self.mu.iter().zip(&self.nu).map(|(m, v)| (self.q * m + self.p * v) / s).collect();
        Ok((class0, class1))
    }
}

/// A sampled graph with node features and binary labels.
#[derive(Clone, Debug)]
pub struct CsbmSample {
    pub graph: Graph,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

/// Draws one CSBM instance. Class sizes are `⌊n·balance⌋` and the rest,
/// assigned to shuffled node positions.
pub fn sample_csbm(params: &CsbmParams, seed: u64) -> Result<CsbmSample> {
    params.validate()?;
    for w in params.sparsity_warnings() {
        log::warn!("{w}");
    }
    let mut rng = rng_for(seed, stream::CSBM);
    let n = params.n;
    let n0 = ((n as f64) * params.class_balance).floor() as usize;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n0)).collect();
    labels.shuffle(&mut rng);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let prob = if labels[i] == labels[j] { params.p } else { params.q };
            if rng.random::<f64>() < prob {
                edges.push((i, j));
            }
        }
    }
    let graph = Graph::from_edges(n, &edges)?;

    let d = params.dim();
    let mut features = Matrix::zeros(n, d);
    for (i, &label) in labels.iter().enumerate() {
        let mean = if label == 0 { &params.mu } else { &params.nu };
        for (k, x) in features.row_mut(i).iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = mean[k] + params.sigma * z;
        }
    }
    Ok(CsbmSample {
        graph,
        features,
        labels,
    })
}

/// One hop of row-normalized propagation, `D⁻¹ A X` (no self-loops).
pub fn sgc_embed(graph: &Graph, features: &Matrix) -> Result<Matrix> {
    Propagator::new(graph, PropagationKind::RowNormalized).apply(features)
}

/// Empirical class-conditional means of `embeddings` over non-isolated nodes.
pub fn class_conditional_means(graph: &Graph, embeddings: &Matrix, labels: &[usize]) -> [Vec<f64>; 2] {
    let d = embeddings.cols();
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for i in 0..graph.num_nodes() {
        if graph.degree(i) == 0 {
            continue;
        }
        let c = labels[i];
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
    }
    for c in 0..2 {
        for s in &mut sums[c] {
            *s /= counts[c].max(1) as f64;
        }
    }
    sums
}

/// `ŷ = σ(⟨w, x⟩ + b)` with `‖w‖ ≤ r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
    pub b: f64,
    pub r: f64,
}

impl LinearClassifier {
    pub fn new(w: Vec<f64>, b: f64, r: f64) -> Result<Self> {
        if norm(&w) > r * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!("‖w‖ = {} exceeds R = {r}", norm(&w))));
        }
        Ok(Self { w, b, r })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.w, x) + self.b)
    }
}

/// The norm-`r` classifier pointing from `mu` to `nu`, thresholded at the
/// midpoint: `w = r(nu - mu)/‖nu - mu‖`, `b = -½⟨nu + mu, w⟩`.
pub fn optimal_classifier(params: &CsbmParams, r: f64) -> Result<LinearClassifier> {
    let diff: Vec<f64> = params.nu.iter().zip(&params.mu).map(|(v, m)| v - m).collect();
    let len = norm(&diff);
    if len == 0.0 {
        return Err(Error::DegenerateSeparation);
    }
    let w: Vec<f64> = diff.iter().map(|x| r * x / len).collect();
    let mid: Vec<f64> = params.nu.iter().zip(&params.mu).map(|(v, m)| v + m).collect();
    let b = -0.5 * dot(&mid, &w);
    Ok(LinearClassifier { w, b, r })
}

/// Classifier loss on one graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLoss {
    pub loss: f64,
    pub evaluated: usize,
    /// Isolated nodes have no propagated feature and are left out.
    pub dropped_isolated: usize,
}

/// Embeds with [`sgc_embed`], applies the classifier and returns the mean
/// binary cross-entropy over non-isolated nodes.
pub fn evaluate_classifier(
    clf: &LinearClassifier,
    graph: &Graph,
    features: &Matrix,
    labels: &[usize],
) -> Result<ClassifierLoss> {
    if features.cols() != clf.w.len() {
        return Err(Error::DimensionMismatch {
            context: "classifier weight",
            expected: features.cols(),
            actual: clf.w.len(),
        });
    }
    if labels.len() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: graph.num_nodes(),
            actual: labels.len(),
        });
    }
    let embedded = sgc_embed(graph, features)?;
    let mut preds = Vec::with_capacity(graph.num_nodes());
    let mut targets = Vec::with_capacity(graph.num_nodes());
    for i in 0..graph.num_nodes() {
        if graph.degree(i) == 0 {
            continue;
        }
        preds.push(clf.predict(embedded.row(i)));
        targets.push(labels[i] as f64);
    }
    let dropped = graph.num_nodes() - preds.len();
    if preds.is_empty() {
        return Err(Error::AllNodesIsolated);
    }
    Ok(ClassifierLoss {
        loss: bce_loss(&preds, &targets)?,
        evaluated: preds.len(),
        dropped_isolated: dropped,
    })
}

/// Projected separation of the expected class-1 and class-0 embeddings,
/// `⟨w, E[x̃|y=1] - E[x̃|y=0]⟩`. For the closed-form optimum this equals
/// `R‖mu - nu‖(p - q)/(p + q)`.
pub fn margin(params: &CsbmParams, clf: &LinearClassifier) -> Result<f64> {
    let s = params.p + params.q;
    if s == 0.0 {
        return Err(Error::InvalidParameter("margin undefined for p + q = 0".into()));
    }
    let (m0, m1) = params.expected_embedding_means()?;
    let diff: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
    Ok(dot(&clf.w, &diff))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Train and test disagree on the sign of `p - q`.
    OpposingHomophily,
    /// Same sign of `p - q`, different expected degree `p + q`.
    DegreeShift,
}

/// Lower bound on the test loss when the homophily signs oppose:
/// `R(q' - p')‖mu - nu‖ / (2(p' + q'))`.
pub fn opposing_homophily_bound(test: &CsbmParams, r: f64) -> f64 {
    r * (test.q - test.p) * test.separation() / (2.0 * (test.p + test.q))
}

/// Lower bound on the test loss under a degree shift, clamped at zero:
/// `log 2 · (1 - R‖mu - nu‖|p' - q'| / (√8 σ (p' + q')))`.
pub fn degree_shift_bound(test: &CsbmParams, r: f64) -> f64 {
    let ratio = r * test.separation() * (test.p - test.q).abs() / (8f64.sqrt() * test.sigma * (test.p + test.q));
    (std::f64::consts::LN_2 * (1.0 - ratio)).max(0.0)
}

/// Monte-Carlo comparison of a measured test loss against a bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub regime: Regime,
    pub train: CsbmParams,
    pub test: CsbmParams,
    pub r: f64,
    pub trials: usize,
    pub trial_losses: Vec<f64>,
    pub measured_loss: f64,
    pub std_error: f64,
    pub theoretical_bound: f64,
    /// Allowed shortfall: two standard errors of the mean.
    pub slack: f64,
    pub satisfied: bool,
    pub mean_dropped_isolated: f64,
}

fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn run_bound_trials(
    regime: Regime,
    train: &CsbmParams,
    test: &CsbmParams,
    r: f64,
    trials: usize,
    seed: u64,
    bound: f64,
) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    train.validate()?;
    test.validate()?;
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            context: "train/test feature dimension",
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    let clf = optimal_classifier(train, r)?;
    let results: Vec<ClassifierLoss> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let sample = sample_csbm(test, derive_seed(seed, t as u64))?;
            evaluate_classifier(&clf, &sample.graph, &sample.features, &sample.labels)
        })
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
    let (mean, se) = mean_and_std_error(&losses);
    let slack = 2.0 * se;
    let dropped = results.iter().map(|r| r.dropped_isolated as f64).sum::<f64>() / trials as f64;
    Ok(BoundReport {
        regime,
        train: train.clone(),
        test: test.clone(),
        r,
        trials,
        trial_losses: losses,
        measured_loss: mean,
        std_error: se,
        theoretical_bound: bound,
        slack,
        satisfied: mean >= bound - slack,
        mean_dropped_isolated: dropped,
    })
}

/// Fits the closed-form classifier to `train` and measures its loss on fresh
/// `test` graphs whose homophily sign opposes the training graph's.
pub fn opposing_homophily_check(
    train: &CsbmParams,
    test: &CsbmParams,
    r: f64,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if (train.p - train.q) * (test.p - test.q) > 0.0 {
        return Err(Error::RegimeMismatch(
            "train and test share the sign of p - q; use degree_shift_check".into(),
        ));
    }
    let bound = opposing_homophily_bound(test, r);
    run_bound_trials(Regime::OpposingHomophily, train, test, r, trials, seed, bound)
}

/// Same as [`opposing_homophily_check`] for train/test pairs that agree on
/// the sign of `p - q` but differ in `p + q`. Requires balanced classes.
pub fn degree_shift_check(
    train: &CsbmParams,
    test: &CsbmParams,
    r: f64,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if (train.p - train.q) * (test.p - test.q) < 0.0 {
        return Err(Error::RegimeMismatch(
            "train and test have opposing signs of p - q; use opposing_homophily_check".into(),
        ));
    }
    if (train.p + train.q - test.p - test.q).abs() < 1e-15 {
        return Err(Error::RegimeMismatch("p + q must differ between train and test".into()));
    }
    for params in [train, test] {
        if params.class_balance != 0.5 {
            return Err(Error::RegimeMismatch("the degree-shift bound assumes balanced classes".into()));
        }
    }
    let bound = degree_shift_bound(test, r);
    run_bound_trials(Regime::DegreeShift, train, test, r, trials, seed, bound)
}

/// Standard validation grids: `n = 2000`, `d = 4`, `sigma = 0.3`,
/// `‖mu - nu‖ = 1`.
fn grid_params(p: f64, q: f64) -> CsbmParams {
    CsbmParams::new(2000, p, q, vec![0.5, 0.0, 0.0, 0.0], vec![-0.5, 0.0, 0.0, 0.0], 0.3)
}

/// Twelve (train, test) pairs with `(p - q)(p' - q') < 0`.
pub fn opposing_homophily_grid() -> Vec<(CsbmParams, CsbmParams)> {
    let train = grid_params(0.05, 0.01);
    let mut out = Vec::new();
    for p in [0.005, 0.01, 0.02] {
        for q in [0.03, 0.05, 0.08, 0.12] {
            out.push((train.clone(), grid_params(p, q)));
        }
    }
    out
}

/// Twelve same-sign (train, test) pairs whose expected degree differs.
pub fn degree_shift_grid() -> Vec<(CsbmParams, CsbmParams)> {
    let mut out = Vec::new();
    for (p, q) in [(0.05, 0.01), (0.02, 0.005)] {
        for k in [0.25, 0.5, 2.0, 3.0, 4.0, 6.0] {
            out.push((grid_params(p, q), grid_params(p * k, q * k)));
        }
    }
    out
}
