//! The composed classifier: experts mixed per node by gate weights computed
//! from discriminator-based node patterns.

use crate::error::{Error, Result};
use crate::experts::{ExpertCache, ExpertEnsemble};
use crate::gate::{GateCache, GateMode, GatingNetwork};
use crate::graph::{Graph, GraphOperators};
use crate::matrix::Matrix;
use crate::nn::{softmax_cross_entropy_rows, Gradients, Trainable};
use crate::pattern::{local_patterns, local_patterns_backward, EdgeDiscriminator, FeatureIndex, PatternCache, WalkContext, PATTERN_DIM};
use crate::rng::{rng_for, stream, Rng};

/// A graph with its features and the derived operators every component needs.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    graph: Graph,
    ops: GraphOperators,
    features: FeatureIndex,
}

impl GraphInputs {
    pub fn new(graph: Graph, features: &Matrix) -> Result<Self> {
        if features.rows() != graph.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "feature rows vs graph nodes",
                expected: graph.num_nodes(),
                actual: features.rows(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("node features".into()));
        }
        Ok(Self {
            ops: GraphOperators::new(&graph),
            features: FeatureIndex::new(features),
            graph,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn ops(&self) -> &GraphOperators {
        &self.ops
    }

    pub fn features(&self) -> &Matrix {
        self.features.dense()
    }

    pub fn feature_index(&self) -> &FeatureIndex {
        &self.features
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// `Σ_j w_j ⊙ logits_j`, row by row.
pub fn mix_logits(expert_logits: &[Matrix], weights: &Matrix) -> Result<Matrix> {
    let first = expert_logits.first().ok_or(Error::Empty("expert logits"))?;
    if weights.shape() != (first.rows(), expert_logits.len()) {
        return Err(Error::DimensionMismatch {
            context: "gate weights vs experts",
            expected: expert_logits.len(),
            actual: weights.cols(),
        });
    }
    let mut mixed = Matrix::zeros(first.rows(), first.cols());
    for (j, logits) in expert_logits.iter().enumerate() {
        if logits.shape() != first.shape() {
            return Err(Error::DimensionMismatch {
                context: "expert logit shapes",
                expected: first.cols(),
                actual: logits.cols(),
            });
        }
        for r in 0..mixed.rows() {
            let w = weights.get(r, j);
            for (m, z) in mixed.row_mut(r).iter_mut().zip(logits.row(r)) {
                *m += w * z;
            }
        }
    }
    Ok(mixed)
}

#[derive(Clone, Debug)]
pub struct MoeLoss {
    pub loss: f64,
    pub mixed: Matrix,
    pub grad_expert_logits: Vec<Matrix>,
    pub grad_weights: Matrix,
}

/// Cross-entropy of the mixed logits over `rows`. With two classes this is
/// exactly the logistic loss `log(1 + exp(-y·Δ))` of the logit gap `Δ`.
pub fn moe_loss(expert_logits: &[Matrix], weights: &Matrix, labels: &[usize], rows: &[usize]) -> Result<MoeLoss> {
    let mixed = mix_logits(expert_logits, weights)?;
    let (loss, grad_mixed) = softmax_cross_entropy_rows(&mixed, labels, rows)?;
    let mut grad_weights = Matrix::zeros(weights.rows(), weights.cols());
    let mut grad_expert_logits = Vec::with_capacity(expert_logits.len());
    for (j, logits) in expert_logits.iter().enumerate() {
        let mut g = grad_mixed.clone();
        for r in 0..g.rows() {
            let w = weights.get(r, j);
            let dot: f64 = grad_mixed.row(r).iter().zip(logits.row(r)).map(|(a, b)| a * b).sum();
            grad_weights.set(r, j, dot);
            for v in g.row_mut(r) {
                *v *= w;
            }
        }
        grad_expert_logits.push(g);
    }
    Ok(MoeLoss {
        loss,
        mixed,
        grad_expert_logits,
        grad_weights,
    })
}

/// Dropout generators for one training run.
#[derive(Clone, Debug)]
pub struct MoeRngs {
    pub experts: Vec<Rng>,
    pub gate: Rng,
}

impl MoeRngs {
    /// Expert `j` draws from stream `EXPERT_DROPOUT + j`, the same stream it
    /// uses when trained on its own.
    pub fn new(seed: u64, num_experts: usize) -> Self {
        Self {
            experts: (0..num_experts).map(|j| expert_dropout_rng(seed, j)).collect(),
            gate: rng_for(seed, stream::GATE_DROPOUT),
        }
    }
}

pub fn expert_dropout_rng(seed: u64, index: usize) -> Rng {
    rng_for(seed, stream::EXPERT_DROPOUT + index as u64)
}

#[derive(Clone, Debug)]
pub struct MoeForward {
    pub expert_logits: Vec<Matrix>,
    pub weights: Matrix,
    pub patterns: Matrix,
    pub global: Matrix,
    pub mixed: Matrix,
    expert_caches: Vec<ExpertCache>,
    pattern_cache: Option<PatternCache>,
    gate_cache: GateCache,
}

impl MoeForward {
    pub fn predictions(&self) -> Vec<usize> {
        self.mixed.argmax_rows()
    }

    pub fn pattern_cache(&self) -> Option<&PatternCache> {
        self.pattern_cache.as_ref()
    }
}

/// Gradients grouped by component, each in its component's parameter order.
#[derive(Clone, Debug)]
pub struct MoeGradients {
    pub experts: Vec<Gradients>,
    pub discriminator: Gradients,
    pub gate: Gradients,
}

impl MoeGradients {
    /// Concatenated in [`MoeModel`]'s [`Trainable`] order.
    pub fn flatten(self) -> Gradients {
        let mut out = Gradients(Vec::new());
        for g in self.experts {
            out.extend(g);
        }
        out.extend(self.discriminator);
        out.extend(self.gate);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub experts: ExpertEnsemble,
    pub discriminator: EdgeDiscriminator,
    pub gate: GatingNetwork,
}

impl MoeModel {
    pub fn new(experts: ExpertEnsemble, discriminator: EdgeDiscriminator, gate: GatingNetwork) -> Result<Self> {
        if gate.num_experts() != experts.len() {
            return Err(Error::DimensionMismatch {
                context: "gate outputs vs experts",
                expected: experts.len(),
                actual: gate.num_experts(),
            });
        }
        if discriminator.input_dim() != experts.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "discriminator vs expert input dimension",
                expected: experts.input_dim(),
                actual: discriminator.input_dim(),
            });
        }
        Ok(Self {
            experts,
            discriminator,
            gate,
        })
    }

    fn check_contexts(data: &GraphInputs, contexts: &[WalkContext]) -> Result<()> {
        if contexts.len() != data.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "walk contexts vs nodes",
                expected: data.num_nodes(),
                actual: contexts.len(),
            });
        }
        if let Some((i, c)) = contexts.iter().enumerate().find(|(i, c)| c.target != *i) {
            return Err(Error::InvalidParameter(format!(
                "context {i} targets node {}; contexts must be indexed by node",
                c.target
            )));
        }
        Ok(())
    }

    /// Local patterns for all nodes and their mean; zero in uniform mode,
    /// where the gate ignores them.
    fn patterns(&self, data: &GraphInputs, contexts: &[WalkContext]) -> Result<(Matrix, Matrix, Option<PatternCache>)> {
        if self.gate.mode() == GateMode::Uniform {
            return Ok((Matrix::zeros(data.num_nodes(), PATTERN_DIM), Matrix::zeros(1, PATTERN_DIM), None));
        }
        let (local, cache) = local_patterns(data.graph(), data.feature_index(), contexts, &self.discriminator)?;
        let global = Matrix::from_vec(1, PATTERN_DIM, local.column_means())?;
        Ok((local, global, Some(cache)))
    }

    /// Full forward pass; `rngs` enables dropout.
    pub fn forward(&self, data: &GraphInputs, contexts: &[WalkContext], rngs: Option<&mut MoeRngs>) -> Result<MoeForward> {
        Self::check_contexts(data, contexts)?;
        let (expert_out, gate_rng) = match rngs {
            Some(r) => (self.experts.forward(data.ops(), data.features(), Some(&mut r.experts))?, Some(&mut r.gate)),
            None => (self.experts.forward(data.ops(), data.features(), None)?, None),
        };
        let (expert_logits, expert_caches): (Vec<_>, Vec<_>) = expert_out.into_iter().unzip();
        let (patterns, global, pattern_cache) = self.patterns(data, contexts)?;
        let (weights, gate_cache) = self.gate.forward(&patterns, &global, gate_rng)?;
        let mixed = mix_logits(&expert_logits, &weights)?;
        Ok(MoeForward {
            expert_logits,
            weights,
            patterns,
            global,
            mixed,
            expert_caches,
            pattern_cache,
            gate_cache,
        })
    }

    pub fn predict(&self, data: &GraphInputs, contexts: &[WalkContext]) -> Result<Vec<usize>> {
        Ok(self.forward(data, contexts, None)?.predictions())
    }

    /// Training loss over `rows` and gradients for every component.
    pub fn loss_and_gradients(
        &self,
        data: &GraphInputs,
        contexts: &[WalkContext],
        labels: &[usize],
        rows: &[usize],
        rngs: Option<&mut MoeRngs>,
    ) -> Result<(f64, MoeGradients, MoeForward)> {
        let fwd = self.forward(data, contexts, rngs)?;
        let loss = moe_loss(&fwd.expert_logits, &fwd.weights, labels, rows)?;
        let grads = self.backward(data, &fwd, &loss)?;
        Ok((loss.loss, grads, fwd))
    }

    pub fn backward(&self, data: &GraphInputs, fwd: &MoeForward, loss: &MoeLoss) -> Result<MoeGradients> {
        let experts = self
            .experts
            .experts()
            .iter()
            .zip(&fwd.expert_caches)
            .zip(&loss.grad_expert_logits)
            .map(|((e, cache), g)| e.backward(data.ops(), data.features(), cache, g))
            .collect::<Result<Vec<_>>>()?;
        let (gate, grad_local, grad_global) = self.gate.backward(&fwd.gate_cache, &loss.grad_weights)?;
        let discriminator = match &fwd.pattern_cache {
            Some(cache) => {
                let n = grad_local.rows() as f64;
                let mut grad_patterns = grad_local;
                for r in 0..grad_patterns.rows() {
                    for (g, gg) in grad_patterns.row_mut(r).iter_mut().zip(grad_global.row(0)) {
                        *g += gg / n;
                    }
                }
                local_patterns_backward(data.feature_index(), &self.discriminator, cache, &grad_patterns)?
            }
            None => Gradients::zeros_like(&self.discriminator),
        };
        Ok(MoeGradients {
            experts,
            discriminator,
            gate,
        })
    }
}

impl Trainable for MoeModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = self.experts.experts().iter().flat_map(|e| e.params()).collect();
        p.extend(self.discriminator.params());
        p.extend(self.gate.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p: Vec<&mut [f64]> = self.experts.experts_mut().iter_mut().flat_map(|e| e.params_mut()).collect();
        p.extend(self.discriminator.params_mut());
        p.extend(self.gate.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.experts.experts().iter().flat_map(|e| e.param_names()).collect();
        names.extend(self.discriminator.param_names());
        names.extend(self.gate.param_names());
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{Expert, ExpertKind, ExpertSpec};
    use crate::nn::{check_gradients, softmax_cross_entropy};
    use crate::pattern::{sample_contexts, WalkConfig};
    use crate::rng::rng_for;

    #[test]
    fn single_expert_reduces_to_its_loss() {
        let logits = Matrix::from_fn(4, 3, |r, c| (r as f64 - c as f64) * 0.7);
        let labels = [0, 2, 1, 1];
        let out = moe_loss(std::slice::from_ref(&logits), &Matrix::filled(4, 1, 1.0), &labels, &[0, 1, 2, 3]).unwrap();
        let (alone, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert_eq!(out.loss, alone);
        assert_eq!(out.grad_expert_logits[0], grad);
    }

    #[test]
    fn binary_zero_margin_costs_log_two() {
        let logits = Matrix::from_rows(&[vec![0.3, 0.3], vec![-1.0, -1.0]]).unwrap();
        let out = moe_loss(&[logits], &Matrix::filled(2, 1, 1.0), &[0, 1], &[0, 1]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn opposite_experts_cancel_under_uniform_gate() {
        let z = Matrix::from_fn(5, 4, |r, c| ((r * 3 + c) % 7) as f64 - 3.0);
        let out = moe_loss(&[z.clone(), z.scaled(-1.0)], &Matrix::filled(5, 2, 0.5), &[0, 1, 2, 3, 0], &[0, 1, 2, 3, 4]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let z = Matrix::zeros(3, 2);
        assert!(moe_loss(&[z], &Matrix::filled(3, 1, 1.0), &[0, 1, 0], &[]).is_err());
    }

    fn small_system(seed: u64, mode: GateMode) -> (MoeModel, GraphInputs, Vec<WalkContext>, Vec<usize>) {
        let n = 14;
        let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        edges.extend([(0, 5), (2, 9), (3, 12), (7, 13), (4, 10)]);
        let graph = Graph::from_edges(n, &edges).unwrap();
        let x = Matrix::from_fn(n, 3, |r, c| {
            if (r + c + seed as usize) % 4 == 0 {
                0.0
            } else {
                ((r * 5 + c * 7 + seed as usize) % 9) as f64 / 4.0 - 1.0
            }
        });
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let data = GraphInputs::new(graph, &x).unwrap();
        let mut rng = rng_for(seed, 1);
        let experts = ExpertKind::ALL
            .iter()
            .map(|&k| Expert::new(ExpertSpec::new(k, 2, 5, 0.2), 3, 3, &mut rng).unwrap())
            .collect();
        let mut model = MoeModel::new(
            ExpertEnsemble::new(experts).unwrap(),
            EdgeDiscriminator::new(3, 4, &mut rng).unwrap(),
            GatingNetwork::new(5, 4, 6, 2, 0.2, mode, &mut rng).unwrap(),
        )
        .unwrap();
        // Move biases off zero so no ReLU sits exactly on its kink, and push
        // discriminator scores away from the 0.5 step of the fraction statistic.
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut()) {
            if name.ends_with("bias") || name.ends_with("head.bias") {
                for (k, v) in p.iter_mut().enumerate() {
                    *v = 0.05 + 0.02 * k as f64;
                }
            }
            if name == "discriminator.head.bias" {
                p[0] = 1.5;
            }
        }
        let contexts = sample_contexts(data.graph(), WalkConfig::new(5, 2), seed);
        (model, data, contexts, labels)
    }

    #[test]
    fn composed_loss_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let (mut model, data, contexts, labels) = small_system(seed, GateMode::Full);
            let rows: Vec<usize> = (0..14).filter(|i| i % 3 != 1).collect();
            let loss = |m: &MoeModel| {
                let mut rngs = MoeRngs::new(seed, 5);
                let (l, _, _) = m.loss_and_gradients(&data, &contexts, &labels, &rows, Some(&mut rngs)).unwrap();
                l
            };
            let mut rngs = MoeRngs::new(seed, 5);
            let (_, grads, _) = model.loss_and_gradients(&data, &contexts, &labels, &rows, Some(&mut rngs)).unwrap();
            let report = check_gradients(&mut model, &grads.flatten(), 1e-5, loss);
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn gate_weights_stay_on_the_simplex() {
        let (model, data, contexts, _) = small_system(4, GateMode::Full);
        let fwd = model.forward(&data, &contexts, None).unwrap();
        for r in 0..fwd.weights.rows() {
            assert!(fwd.weights.row(r).iter().all(|&w| w >= 0.0));
            assert!((fwd.weights.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn contexts_must_be_indexed_by_node() {
        let (model, data, mut contexts, _) = small_system(0, GateMode::Full);
        contexts.swap(0, 1);
        assert!(model.forward(&data, &contexts, None).is_err());
        contexts.pop();
        assert!(model.forward(&data, &contexts, None).is_err());
    }

    #[test]
    fn uniform_mode_skips_discriminator() {
        let (model, data, contexts, labels) = small_system(1, GateMode::Uniform);
        let (_, grads, fwd) = model.loss_and_gradients(&data, &contexts, &labels, &[0, 1, 2], None).unwrap();
        assert!(fwd.pattern_cache().is_none());
        assert_eq!(grads.discriminator.max_abs(), 0.0);
        assert_eq!(grads.gate.max_abs(), 0.0);
    }
}
