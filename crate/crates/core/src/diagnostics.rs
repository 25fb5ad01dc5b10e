//! Finite-difference gradient checks for every trainable component and the
//! composed mixture loss, on a small fixed graph.

use serde::Serialize;

use crate::experts::{Expert, ExpertEnsemble, ExpertKind, ExpertSpec};
use crate::gate::{GateMode, GatingNetwork};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::moe::{GraphInputs, MoeModel, MoeRngs};
use crate::nn::{check_gradients, softmax_cross_entropy_rows, Activation, GradCheckReport, Mlp, Trainable};
use crate::pattern::{local_patterns, local_patterns_backward, sample_contexts, EdgeDiscriminator, WalkConfig, WalkContext, PATTERN_DIM};
use crate::rng::{rng_for, Rng};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub worst: Option<String>,
}

impl ComponentCheck {
    fn new(component: impl Into<String>, seed: u64, r: GradCheckReport) -> Self {
        Self {
            component: component.into(),
            seed,
            max_rel_error: r.max_rel_error,
            entries_checked: r.entries_checked,
            worst: r.worst.map(|w| format!("{w:?}")),
        }
    }
}

/// A 14-node graph with a few chords, sparse-ish features and 3 classes.
pub struct Fixture {
    pub data: GraphInputs,
    pub labels: Vec<usize>,
    pub rows: Vec<usize>,
    pub contexts: Vec<WalkContext>,
    pub num_classes: usize,
}

pub fn fixture(seed: u64) -> Result<Fixture> {
    let n = 14;
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    edges.extend([(0, 5), (2, 9), (3, 12), (7, 13), (4, 10)]);
    let graph = Graph::from_edges(n, &edges)?;
    let s = seed as usize;
    let x = Matrix::from_fn(n, 3, |r, c| {
        if (r + c + s) % 4 == 0 {
            0.0
        } else {
            ((r * 5 + c * 7 + s) % 9) as f64 / 4.0 - 1.0
        }
    });
    let labels = (0..n).map(|i| (i * 7 + s) % 3).collect();
    let data = GraphInputs::new(graph, &x)?;
    let contexts = sample_contexts(data.graph(), WalkConfig::new(5, 2), seed);
    Ok(Fixture {
        data,
        labels,
        rows: (0..n).filter(|i| i % 3 != 1).collect(),
        contexts,
        num_classes: 3,
    })
}

/// Moves every bias off zero so no ReLU sits on its kink, and lifts the
/// discriminator's output so scores stay clear of the 0.5 threshold of the
/// (piecewise-constant) fraction statistic.
fn offset_biases<M: Trainable + ?Sized>(model: &mut M) {
    let names = model.param_names();
    for (name, p) in names.iter().zip(model.params_mut()) {
        if name.ends_with("bias") {
            for (k, v) in p.iter_mut().enumerate() {
                *v = 0.05 + 0.02 * k as f64;
            }
        }
        if name.ends_with("discriminator.head.bias") {
            p[0] = 1.5;
        }
    }
}

/// Fixed pseudo-random upstream gradient.
fn probe(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| (((r * 31 + c * 17 + seed as usize * 7) % 13) as f64 - 6.0) / 6.0)
}

fn weighted_sum(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn check_expert(f: &Fixture, kind: ExpertKind, seed: u64) -> Result<ComponentCheck> {
    let mut rng = rng_for(seed, 11);
    let mut e = Expert::new(ExpertSpec::new(kind, 3, 32, 0.3), 3, f.num_classes, &mut rng)?;
    offset_biases(&mut e);
    let ops = f.data.ops();
    let x = f.data.features();
    let loss = |m: &Expert| {
        let (z, _) = m.forward(ops, x, Some(&mut rng_for(seed, 12))).expect("forward");
        softmax_cross_entropy_rows(&z, &f.labels, &f.rows).expect("loss").0
    };
    let (z, cache) = e.forward(ops, x, Some(&mut rng_for(seed, 12)))?;
    let (_, g) = softmax_cross_entropy_rows(&z, &f.labels, &f.rows)?;
    let grads = e.backward(ops, x, &cache, &g)?;
    Ok(ComponentCheck::new(format!("expert/{kind}"), seed, check_gradients(&mut e, &grads, FD_STEP, loss)))
}

fn check_mlp(seed: u64) -> Result<ComponentCheck> {
    let mut rng = rng_for(seed, 13);
    let mut m = Mlp::new(&[4, 6, 5, 3], Activation::Relu, 0.25, &mut rng)?;
    offset_biases(&mut m);
    let x = probe(7, 4, seed + 1);
    let up = probe(7, 3, seed + 2);
    let loss = |m: &Mlp| weighted_sum(&m.forward(&x, Some(&mut rng_for(seed, 14))).expect("mlp").0, &up);
    let (_, cache) = m.forward(&x, Some(&mut rng_for(seed, 14)))?;
    let (grads, _) = m.backward(&cache, &up)?;
    Ok(ComponentCheck::new("mlp", seed, check_gradients(&mut m, &grads, FD_STEP, loss)))
}

fn check_pattern_extractor(f: &Fixture, seed: u64) -> Result<ComponentCheck> {
    let mut d = EdgeDiscriminator::new(3, 8, &mut rng_for(seed, 15))?;
    offset_biases(&mut d);
    let mut up = probe(f.data.num_nodes(), PATTERN_DIM, seed);
    for r in 0..up.rows() {
        // The fraction-above-half column carries no gradient by construction.
        up.set(r, 4, 0.0);
    }
    let loss = |d: &EdgeDiscriminator| {
        let (p, _) = local_patterns(f.data.graph(), f.data.feature_index(), &f.contexts, d).expect("patterns");
        weighted_sum(&p, &up)
    };
    let (_, cache) = local_patterns(f.data.graph(), f.data.feature_index(), &f.contexts, &d)?;
    let grads = local_patterns_backward(f.data.feature_index(), &d, &cache, &up)?;
    Ok(ComponentCheck::new("pattern_extractor", seed, check_gradients(&mut d, &grads, FD_STEP, loss)))
}

fn check_gate(seed: u64) -> Result<ComponentCheck> {
    let mut g = GatingNetwork::new(5, 4, 6, 3, 0.2, GateMode::Full, &mut rng_for(seed, 16))?;
    offset_biases(&mut g);
    let local = probe(9, PATTERN_DIM, seed + 3).scaled(0.7);
    let global = probe(1, PATTERN_DIM, seed + 4).scaled(0.5);
    let up = probe(9, 5, seed + 5);
    let drop = |s: u64| -> Rng { rng_for(s, 17) };
    let loss = |g: &GatingNetwork| weighted_sum(&g.forward(&local, &global, Some(&mut drop(seed))).expect("gate").0, &up);
    let (_, cache) = g.forward(&local, &global, Some(&mut drop(seed)))?;
    let (grads, _, _) = g.backward(&cache, &up)?;
    Ok(ComponentCheck::new("gate", seed, check_gradients(&mut g, &grads, FD_STEP, loss)))
}

fn check_composed(f: &Fixture, seed: u64) -> Result<ComponentCheck> {
    let mut rng = rng_for(seed, 1);
    let experts = ExpertKind::ALL
        .iter()
        .map(|&k| Expert::new(ExpertSpec::new(k, 2, 32, 0.2), 3, f.num_classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut model = MoeModel::new(
        ExpertEnsemble::new(experts)?,
        EdgeDiscriminator::new(3, 4, &mut rng)?,
        GatingNetwork::new(5, 4, 6, 2, 0.2, GateMode::Full, &mut rng)?,
    )?;
    offset_biases(&mut model);
    let loss = |m: &MoeModel| {
        let mut rngs = MoeRngs::new(seed, 5);
        m.loss_and_gradients(&f.data, &f.contexts, &f.labels, &f.rows, Some(&mut rngs)).expect("loss").0
    };
    let mut rngs = MoeRngs::new(seed, 5);
    let (_, grads, _) = model.loss_and_gradients(&f.data, &f.contexts, &f.labels, &f.rows, Some(&mut rngs))?;
    Ok(ComponentCheck::new("moe_loss", seed, check_gradients(&mut model, &grads.flatten(), FD_STEP, loss)))
}

/// Every component check for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<ComponentCheck>> {
    let f = fixture(seed)?;
    let mut out = Vec::new();
    for kind in ExpertKind::ALL {
        out.push(check_expert(&f, kind, seed)?);
    }
    out.push(check_mlp(seed)?);
    out.push(check_pattern_extractor(&f, seed)?);
    out.push(check_gate(seed)?);
    out.push(check_composed(&f, seed)?);
    Ok(out)
}
