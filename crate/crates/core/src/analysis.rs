//! Bucketed accuracy and gate-weight reports, ablations, the walk-length
//! sweep, and the CSV artifacts the figure scripts read.
//!
//! All node-level analyses take an explicit node list; callers pass the
//! test split so numbers line up with reported accuracy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::gate::GateMode;
use crate::graph::{node_homophily, Graph};
use crate::matrix::Matrix;
use crate::moe::MoeForward;
use crate::trainer::{mean_std, run_experiment, RunResult, TrainConfig};

// ---------------------------------------------------------------- buckets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub index: usize,
    /// Smallest and largest value inside the bucket.
    pub lower: f64,
    pub upper: f64,
    pub nodes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub requested: usize,
    pub buckets: Vec<Bucket>,
    /// Set when ties forced fewer buckets than requested.
    pub merged: bool,
}

impl Buckets {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.nodes.len()).sum()
    }

    /// Bucket index per node, `None` for nodes outside the analysis.
    pub fn assignment(&self, num_nodes: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_nodes];
        for b in &self.buckets {
            for &i in &b.nodes {
                out[i] = Some(b.index);
            }
        }
        out
    }
}

/// Equal-count buckets over `(node, value)` pairs, ordered by value then
/// node index. A cut that would split equal values moves forward past the
/// tie, so equal values always share a bucket; cuts that collapse are
/// dropped and reported through `merged`.
pub fn quantile_buckets(items: &[(usize, f64)], num_buckets: usize) -> Result<Buckets> {
    if num_buckets == 0 {
        return Err(Error::InvalidParameter("num_buckets must be positive".into()));
    }
    if items.is_empty() {
        return Err(Error::Empty("bucketing input"));
    }
    if let Some(&(node, v)) = items.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bucketing value {v} for node {node}")));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let m = sorted.len();

    let mut cuts = Vec::new();
    for i in 1..num_buckets {
        let mut c = i * m / num_buckets;
        while c > 0 && c < m && sorted[c - 1].1 == sorted[c].1 {
            c += 1;
        }
        if c > 0 && c < m && cuts.last() != Some(&c) {
            cuts.push(c);
        }
    }
    cuts.push(m);

    let mut buckets = Vec::with_capacity(cuts.len());
    let mut start = 0;
    for (index, &end) in cuts.iter().enumerate() {
        let chunk = &sorted[start..end];
        buckets.push(Bucket {
            index,
            lower: chunk[0].1,
            upper: chunk[chunk.len() - 1].1,
            nodes: chunk.iter().map(|p| p.0).collect(),
        });
        start = end;
    }
    let merged = buckets.len() < num_buckets;
    if merged {
        log::warn!("requested {num_buckets} buckets, ties allow only {}", buckets.len());
    }
    Ok(Buckets {
        requested: num_buckets,
        buckets,
        merged,
    })
}

/// Homophily quantile buckets over the degree-≥1 members of `nodes`.
pub fn bucket_by_homophily(graph: &Graph, labels: &[usize], nodes: &[usize], num_buckets: usize) -> Result<Buckets> {
    let items: Vec<(usize, f64)> = nodes
        .iter()
        .filter_map(|&i| node_homophily(graph, labels, i).ok().map(|h| (i, h)))
        .collect();
    if items.is_empty() {
        return Err(Error::AllNodesIsolated);
    }
    quantile_buckets(&items, num_buckets)
}

/// Degree quantile buckets over `nodes`.
pub fn bucket_by_degree(graph: &Graph, nodes: &[usize], num_buckets: usize) -> Result<Buckets> {
    let items: Vec<(usize, f64)> = nodes.iter().map(|&i| (i, graph.degree(i) as f64)).collect();
    quantile_buckets(&items, num_buckets)
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracyRow {
    pub model: String,
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Empty for an empty bucket.
    pub accuracy: Option<f64>,
}

/// Accuracy of every named model in every bucket.
pub fn per_bucket_accuracy(buckets: &Buckets, models: &[(String, Vec<usize>)], labels: &[usize]) -> Result<Vec<BucketAccuracyRow>> {
    let mut rows = Vec::new();
    for (name, preds) in models {
        if preds.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "predictions vs labels",
                expected: labels.len(),
                actual: preds.len(),
            });
        }
        for b in &buckets.buckets {
            let hits = b.nodes.iter().filter(|&&i| preds[i] == labels[i]).count();
            rows.push(BucketAccuracyRow {
                model: name.clone(),
                bucket: b.index,
                lower: b.lower,
                upper: b.upper,
                count: b.nodes.len(),
                accuracy: (!b.nodes.is_empty()).then(|| hits as f64 / b.nodes.len() as f64),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightProfileRow {
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub expert: String,
    pub mean_weight: Option<f64>,
}

/// Mean gate weight per (bucket, expert), long format.
pub fn expert_weight_profile(buckets: &Buckets, weights: &Matrix, expert_names: &[String]) -> Result<Vec<WeightProfileRow>> {
    if weights.cols() != expert_names.len() {
        return Err(Error::DimensionMismatch {
            context: "gate weight columns vs expert names",
            expected: expert_names.len(),
            actual: weights.cols(),
        });
    }
    let mut rows = Vec::new();
    for b in &buckets.buckets {
        for (j, name) in expert_names.iter().enumerate() {
            let mean = (!b.nodes.is_empty())
                .then(|| b.nodes.iter().map(|&i| weights.get(i, j)).sum::<f64>() / b.nodes.len() as f64);
            rows.push(WeightProfileRow {
                bucket: b.index,
                lower: b.lower,
                upper: b.upper,
                count: b.nodes.len(),
                expert: name.clone(),
                mean_weight: mean,
            });
        }
    }
    Ok(rows)
}

/// Per-node total weight on low-pass experts.
pub fn low_pass_weight(weights: &Matrix, kinds: &[ExpertKind]) -> Vec<f64> {
    (0..weights.rows())
        .map(|i| {
            kinds
                .iter()
                .enumerate()
                .filter(|(_, k)| k.is_low_pass())
                .map(|(j, _)| weights.get(i, j))
                .sum()
        })
        .collect()
}

/// One row per analysed node: structure, prediction, and the pattern
/// vector the gate saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub node: usize,
    pub degree: usize,
    pub homophily: Option<f64>,
    pub label: usize,
    pub prediction: usize,
    pub pattern_mean: f64,
    pub pattern_std: f64,
    pub pattern_min: f64,
    pub pattern_max: f64,
    pub pattern_frac_above_half: f64,
    pub pattern_degree: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeWeightRow {
    pub node: usize,
    pub expert: String,
    pub weight: f64,
}

pub fn node_rows(graph: &Graph, labels: &[usize], fwd: &MoeForward, nodes: &[usize]) -> Vec<NodeRow> {
    let preds = fwd.predictions();
    nodes
        .iter()
        .map(|&i| {
            let p = fwd.patterns.row(i);
            NodeRow {
                node: i,
                degree: graph.degree(i),
                homophily: node_homophily(graph, labels, i).ok(),
                label: labels[i],
                prediction: preds[i],
                pattern_mean: p[0],
                pattern_std: p[1],
                pattern_min: p[2],
                pattern_max: p[3],
                pattern_frac_above_half: p[4],
                pattern_degree: p[5],
            }
        })
        .collect()
}

pub fn node_weight_rows(weights: &Matrix, expert_names: &[String], nodes: &[usize]) -> Vec<NodeWeightRow> {
    nodes
        .iter()
        .flat_map(|&i| {
            expert_names.iter().enumerate().map(move |(j, name)| NodeWeightRow {
                node: i,
                expert: name.clone(),
                weight: weights.get(i, j),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoGlobal,
    NoLocal,
    AverageWeights,
    NoResidualExperts,
    /// Pretrain experts on the whole training split.
    FullSamplePretrain,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoGlobal,
        Ablation::NoLocal,
        Ablation::AverageWeights,
        Ablation::NoResidualExperts,
        Ablation::FullSamplePretrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoGlobal => "no_global",
            Ablation::NoLocal => "no_local",
            Ablation::AverageWeights => "average_weights",
            Ablation::NoResidualExperts => "no_residual_experts",
            Ablation::FullSamplePretrain => "full_sample_pretrain",
        }
    }

    /// The ablated configuration. Idempotent.
    pub fn apply(self, config: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = config.clone();
        match self {
            Ablation::NoGlobal => cfg.gate.mode = GateMode::NoGlobal,
            Ablation::NoLocal => cfg.gate.mode = GateMode::NoLocal,
            Ablation::AverageWeights => cfg.gate.mode = GateMode::Uniform,
            Ablation::NoResidualExperts => {
                cfg.experts.retain(|e| !e.kind.is_residual());
                if cfg.experts.is_empty() {
                    return Err(Error::InvalidConfig("no non-residual experts left".into()));
                }
            }
            Ablation::FullSamplePretrain => cfg.pretrain.fraction = 1.0,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub full: RunResult,
    pub ablated: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub arm: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        [("full", &self.full), (self.ablation.as_str(), &self.ablated)]
            .into_iter()
            .map(|(arm, r)| AblationRow {
                ablation: self.ablation.to_string(),
                arm: arm.to_string(),
                mean: r.mean,
                std: r.std,
                runs: r.runs.len(),
            })
            .collect()
    }
}

/// Full protocol for the configuration and for its ablated variant.
pub fn run_ablation(ablation: Ablation, config: &TrainConfig, dataset: &Dataset) -> Result<AblationReport> {
    let ablated_cfg = ablation.apply(config)?;
    Ok(AblationReport {
        ablation,
        full: run_experiment(config, dataset, None)?,
        ablated: run_experiment(&ablated_cfg, dataset, None)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub walk_length: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn sweep_walk_length(config: &TrainConfig, dataset: &Dataset, lengths: &[usize]) -> Result<Vec<SweepRow>> {
    lengths
        .iter()
        .map(|&l| {
            let mut cfg = config.clone();
            cfg.walk.walk_length = l;
            let r = run_experiment(&cfg, dataset, None)?;
            let (mean, std) = mean_std(&r.runs.iter().map(|x| x.test_acc).collect::<Vec<_>>());
            Ok(SweepRow {
                walk_length: l,
                mean,
                std,
                runs: r.runs.len(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- csv

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
