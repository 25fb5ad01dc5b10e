//! The five node predictors mixed by the gate.
//!
//! Every expert maps `n × d` features to `n × C` logits. Graph experts
//! propagate after each linear map (`P h W + b`); residual variants add a
//! learned projection of the raw features at every layer (`+ X R`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphOperators, Propagator};
use crate::matrix::Matrix;
use crate::nn::layers::{dropout_mask, hadamard};
use crate::nn::{Activation, Gradients, Linear, Trainable};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Gcn,
    GcnResidual,
    Highpass,
    HighpassResidual,
    Mlp,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 5] = [
        ExpertKind::Gcn,
        ExpertKind::GcnResidual,
        ExpertKind::Highpass,
        ExpertKind::HighpassResidual,
        ExpertKind::Mlp,
    ];

    pub fn is_residual(self) -> bool {
        matches!(self, ExpertKind::GcnResidual | ExpertKind::HighpassResidual)
    }

    pub fn is_low_pass(self) -> bool {
        matches!(self, ExpertKind::Gcn | ExpertKind::GcnResidual)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Gcn => "gcn",
            ExpertKind::GcnResidual => "gcn_residual",
            ExpertKind::Highpass => "highpass",
            ExpertKind::HighpassResidual => "highpass_residual",
            ExpertKind::Mlp => "mlp",
        }
    }

    fn operator<'a>(self, ops: &'a GraphOperators) -> Option<&'a Propagator> {
        match self {
            ExpertKind::Gcn | ExpertKind::GcnResidual => Some(&ops.low),
            ExpertKind::Highpass | ExpertKind::HighpassResidual => Some(&ops.high),
            ExpertKind::Mlp => None,
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExpertKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown expert kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl ExpertSpec {
    pub fn new(kind: ExpertKind, layers: usize, hidden: usize, dropout: f64) -> Self {
        Self {
            kind,
            layers,
            hidden,
            dropout,
        }
    }

    /// Checks the tuned search space: 2–4 layers, hidden width in
    /// {32, 64, 128, 256}, dropout in [0, 0.9].
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.layers) {
            return Err(Error::InvalidConfig(format!(
                "{}: layers = {} not in {{2, 3, 4}}",
                self.kind, self.layers
            )));
        }
        if ![32, 64, 128, 256].contains(&self.hidden) {
            return Err(Error::InvalidConfig(format!(
                "{}: hidden = {} not in {{32, 64, 128, 256}}",
                self.kind, self.hidden
            )));
        }
        if !(0.0..=0.9).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "{}: dropout = {} outside [0, 0.9]",
                self.kind, self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    spec: ExpertSpec,
    input_dim: usize,
    num_classes: usize,
    layers: Vec<Linear>,
    /// Raw-feature projections, one per layer; empty for non-residual kinds.
    residual: Vec<Matrix>,
}

/// Intermediates of one expert forward pass.
#[derive(Clone, Debug, Default)]
pub struct ExpertCache {
    inputs: Vec<Matrix>,
    propagated: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
}

impl Expert {
    pub fn new(spec: ExpertSpec, input_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if spec.layers == 0 || spec.hidden == 0 || input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidParameter(format!(
                "expert {} needs positive sizes (layers {}, hidden {}, input {input_dim}, classes {num_classes})",
                spec.kind, spec.layers, spec.hidden
            )));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {} outside [0, 1)", spec.dropout)));
        }
        let sizes = Self::layer_sizes(&spec, input_dim, num_classes);
        let layers: Vec<Linear> = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        let residual = if spec.kind.is_residual() {
            sizes[1..]
                .iter()
                .map(|&out| Linear::new(input_dim, out, rng).weight)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            input_dim,
            num_classes,
            layers,
            residual,
        })
    }

    fn layer_sizes(spec: &ExpertSpec, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat_n(spec.hidden, spec.layers - 1));
        sizes.push(num_classes);
        sizes
    }

    pub fn spec(&self) -> &ExpertSpec {
        &self.spec
    }

    pub fn kind(&self) -> ExpertKind {
        self.spec.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn residual_mut(&mut self) -> &mut [Matrix] {
        &mut self.residual
    }

    fn check_inputs(&self, ops: &GraphOperators, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "expert input features",
                expected: self.input_dim,
                actual: x.cols(),
            });
        }
        if x.rows() != ops.low.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "expert feature rows vs graph nodes",
                expected: ops.low.num_nodes(),
                actual: x.rows(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("expert input features".into()));
        }
        Ok(())
    }

    /// Per-node class logits. Passing a generator enables dropout.
    pub fn forward(
        &self,
        ops: &GraphOperators,
        x: &Matrix,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<(Matrix, ExpertCache)> {
        self.check_inputs(ops, x)?;
        let op = self.spec.kind.operator(ops);
        let mut cache = ExpertCache::default();
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.spec.dropout > 0.0 => Some(dropout_mask(h.rows(), h.cols(), self.spec.dropout, rng)),
                _ => None,
            };
            if let Some(m) = &mask {
                h = hadamard(&h, m);
            }
            let hw = h.matmul(&layer.weight);
            let mut z = match op {
                Some(p) => p.apply_unchecked(&hw),
                None => hw,
            };
            z.add_row_vector(&layer.bias);
            if let Some(r) = self.residual.get(l) {
                z.add_assign(&x.matmul(r));
            }
            let next = if l == last {
                z.clone()
            } else {
                z.map(|v| Activation::Relu.apply(v))
            };
            cache.inputs.push(h);
            cache.propagated.push(Matrix::zeros(0, 0));
            cache.pre.push(z);
            cache.masks.push(mask);
            h = next;
        }
        Ok((h, cache))
    }

    pub fn forward_eval(&self, ops: &GraphOperators, x: &Matrix) -> Result<Matrix> {
        self.forward(ops, x, None).map(|(out, _)| out)
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(
        &self,
        ops: &GraphOperators,
        x: &Matrix,
        cache: &ExpertCache,
        grad_logits: &Matrix,
    ) -> Result<Gradients> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::MissingForward);
        }
        let op = self.spec.kind.operator(ops);
        let per_layer = if self.spec.kind.is_residual() { 3 } else { 2 };
        let mut grads = vec![Vec::new(); per_layer * self.layers.len()];
        let last = self.layers.len() - 1;
        let mut g = grad_logits.clone();
        for l in (0..self.layers.len()).rev() {
            if l != last {
                for (gv, &p) in g.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                    *gv *= Activation::Relu.derivative(p);
                }
            }
            let base = per_layer * l;
            grads[base + 1] = g.column_sums();
            if self.spec.kind.is_residual() {
                grads[base + 2] = x.t_matmul(&g).into_vec();
            }
            let u = match op {
                Some(p) => p.apply_transpose_unchecked(&g),
                None => g.clone(),
            };
            grads[base] = cache.inputs[l].t_matmul(&u).into_vec();
            if l > 0 {
                let mut gin = u.matmul_t(&self.layers[l].weight);
                if let Some(mask) = &cache.masks[l] {
                    gin = hadamard(&gin, mask);
                }
                g = gin;
            }
        }
        Ok(Gradients(grads))
    }
}

impl Trainable for Expert {
    fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
            if let Some(r) = self.residual.get(l) {
                out.push(r.as_slice());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        let mut residual = self.residual.iter_mut();
        for layer in self.layers.iter_mut() {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
            if let Some(r) = residual.next() {
                out.push(r.as_mut_slice());
            }
        }
        out
    }

    fn param_names(&self) -> Vec<String> {
        let kind = self.spec.kind;
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            out.push(format!("{kind}.layer{l}.weight"));
            out.push(format!("{kind}.layer{l}.bias"));
            if self.spec.kind.is_residual() {
                out.push(format!("{kind}.layer{l}.residual"));
            }
        }
        out
    }
}

/// Ordered experts sharing input dimension and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertEnsemble {
    experts: Vec<Expert>,
}

impl ExpertEnsemble {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let first = experts.first().ok_or(Error::Empty("expert ensemble"))?;
        for e in &experts[1..] {
            if e.input_dim != first.input_dim {
                return Err(Error::DimensionMismatch {
                    context: "ensemble input dimension",
                    expected: first.input_dim,
                    actual: e.input_dim,
                });
            }
            if e.num_classes != first.num_classes {
                return Err(Error::DimensionMismatch {
                    context: "ensemble class count",
                    expected: first.num_classes,
                    actual: e.num_classes,
                });
            }
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert] {
        &mut self.experts
    }

    pub fn into_experts(self) -> Vec<Expert> {
        self.experts
    }

    pub fn kinds(&self) -> Vec<ExpertKind> {
        self.experts.iter().map(Expert::kind).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.experts[0].num_classes
    }

    /// Logits of every expert, in ensemble order. With `dropout_rngs`, expert
    /// `j` draws its dropout masks from `dropout_rngs[j]`.
    pub fn forward(
        &self,
        ops: &GraphOperators,
        x: &Matrix,
        dropout_rngs: Option<&mut [Rng]>,
    ) -> Result<Vec<(Matrix, ExpertCache)>> {
        match dropout_rngs {
            Some(rngs) => {
                if rngs.len() != self.experts.len() {
                    return Err(Error::DimensionMismatch {
                        context: "dropout generators per expert",
                        expected: self.experts.len(),
                        actual: rngs.len(),
                    });
                }
                self.experts
                    .iter()
                    .zip(rngs.iter_mut())
                    .map(|(e, rng)| e.forward(ops, x, Some(rng)))
                    .collect()
            }
            None => self.experts.iter().map(|e| e.forward(ops, x, None)).collect(),
        }
    }

    pub fn forward_eval(&self, ops: &GraphOperators, x: &Matrix) -> Result<Vec<Matrix>> {
        self.experts.iter().map(|e| e.forward_eval(ops, x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::{check_gradients, softmax_cross_entropy};
    use crate::rng::rng_for;

    fn features(n: usize, d: usize, seed: usize) -> Matrix {
        Matrix::from_fn(n, d, |r, c| (((r * 7 + c * 13 + seed * 5) % 17) as f64) / 8.0 - 1.0)
    }

    fn randomize_biases(expert: &mut Expert) {
        for layer in expert.layers_mut() {
            for (k, b) in layer.bias.iter_mut().enumerate() {
                *b = 0.05 + 0.03 * k as f64;
            }
        }
    }

    #[test]
    fn mlp_expert_ignores_graph() {
        let mut rng = rng_for(0, 0);
        let e = Expert::new(ExpertSpec::new(ExpertKind::Mlp, 2, 8, 0.0), 3, 2, &mut rng).unwrap();
        let x = features(5, 3, 0);
        let a = GraphOperators::new(&Graph::from_edges(5, &[(0, 1), (2, 3)]).unwrap());
        let b = GraphOperators::new(&Graph::from_edges(5, &[(0, 4), (1, 2), (3, 4)]).unwrap());
        assert_eq!(e.forward_eval(&a, &x).unwrap(), e.forward_eval(&b, &x).unwrap());
    }

    #[test]
    fn gcn_on_edgeless_graph_is_an_mlp() {
        let mut rng = rng_for(1, 0);
        let gcn = Expert::new(ExpertSpec::new(ExpertKind::Gcn, 3, 8, 0.0), 4, 3, &mut rng).unwrap();
        let mut mlp = gcn.clone();
        mlp.spec.kind = ExpertKind::Mlp;
        let ops = GraphOperators::new(&Graph::empty(6));
        let x = features(6, 4, 1);
        let diff = gcn.forward_eval(&ops, &x).unwrap().max_abs_diff(&mlp.forward_eval(&ops, &x).unwrap());
        assert!(diff < 1e-14);
    }

    #[test]
    fn two_layer_gcn_matches_dense_unrolling() {
        let graph = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let ops = GraphOperators::new(&graph);
        let mut rng = rng_for(2, 0);
        let mut e = Expert::new(ExpertSpec::new(ExpertKind::Gcn, 2, 3, 0.0), 2, 2, &mut rng).unwrap();
        e.layers[0].weight = Matrix::from_rows(&[vec![1.0, -1.0, 0.5], vec![0.5, 2.0, -1.0]]).unwrap();
        e.layers[0].bias = vec![0.1, 0.0, -0.2];
        e.layers[1].weight = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0], vec![0.5, 0.5]]).unwrap();
        e.layers[1].bias = vec![0.0, 0.3];
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]]).unwrap();

        // Â = D̃^{-1/2}(A+I)D̃^{-1/2} by hand; degrees with self-loops are 2, 3, 3, 2.
        let dt = [2.0f64, 3.0, 3.0, 2.0];
        let adj = Matrix::from_fn(4, 4, |i, j| {
            if i == j || i.abs_diff(j) == 1 {
                1.0 / (dt[i] * dt[j]).sqrt()
            } else {
                0.0
            }
        });
        let mut h1 = adj.matmul(&x.matmul(&e.layers[0].weight));
        h1.add_row_vector(&e.layers[0].bias);
        let h1 = h1.map(|v| v.max(0.0));
        let mut out = adj.matmul(&h1.matmul(&e.layers[1].weight));
        out.add_row_vector(&e.layers[1].bias);
        assert!(e.forward_eval(&ops, &x).unwrap().max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn low_and_high_pass_outputs_differ() {
        let graph = Graph::from_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let ops = GraphOperators::new(&graph);
        let mut rng = rng_for(3, 0);
        let gcn = Expert::new(ExpertSpec::new(ExpertKind::Gcn, 2, 8, 0.0), 3, 2, &mut rng).unwrap();
        let mut hp = gcn.clone();
        hp.spec.kind = ExpertKind::Highpass;
        let x = features(5, 3, 2);
        let diff = gcn.forward_eval(&ops, &x).unwrap().max_abs_diff(&hp.forward_eval(&ops, &x).unwrap());
        assert!(diff > 1e-6);
    }

    #[test]
    fn every_kind_passes_gradient_check() {
        let graph = Graph::from_edges(
            9,
            &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 4), (7, 8), (1, 5)],
        )
        .unwrap();
        let ops = GraphOperators::new(&graph);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        for kind in ExpertKind::ALL {
            for seed in 0..3u64 {
                let mut rng = rng_for(seed, 7);
                let mut e = Expert::new(ExpertSpec::new(kind, 3, 6, 0.2), 4, 3, &mut rng).unwrap();
                randomize_biases(&mut e);
                let x = features(9, 4, seed as usize);
                let loss = |m: &Expert| {
                    let mut drop = rng_for(seed, 11);
                    let (out, _) = m.forward(&ops, &x, Some(&mut drop)).unwrap();
                    softmax_cross_entropy(&out, &labels).unwrap().0
                };
                let mut drop = rng_for(seed, 11);
                let (out, cache) = e.forward(&ops, &x, Some(&mut drop)).unwrap();
                let (_, g) = softmax_cross_entropy(&out, &labels).unwrap();
                let grads = e.backward(&ops, &x, &cache, &g).unwrap();
                let report = check_gradients(&mut e, &grads, 1e-5, loss);
                assert!(report.max_rel_error < 1e-4, "{kind} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn scaling_the_loss_scales_gradients() {
        let graph = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let ops = GraphOperators::new(&graph);
        let mut rng = rng_for(5, 0);
        let e = Expert::new(ExpertSpec::new(ExpertKind::HighpassResidual, 2, 5, 0.0), 3, 2, &mut rng).unwrap();
        let x = features(4, 3, 4);
        let (out, cache) = e.forward(&ops, &x, None).unwrap();
        let (_, g) = softmax_cross_entropy(&out, &[0, 1, 1, 0]).unwrap();
        let single = e.backward(&ops, &x, &cache, &g).unwrap();
        let double = e.backward(&ops, &x, &cache, &g.scaled(2.0)).unwrap();
        for (a, b) in single.0.iter().flatten().zip(double.0.iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
        let zero = e.backward(&ops, &x, &cache, &Matrix::zeros(4, 2)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn ensemble_order_and_equality() {
        let graph = Graph::from_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let ops = GraphOperators::new(&graph);
        let mut rng = rng_for(6, 0);
        let experts: Vec<Expert> = [ExpertKind::Gcn, ExpertKind::Highpass, ExpertKind::Mlp]
            .into_iter()
            .map(|k| Expert::new(ExpertSpec::new(k, 2, 4, 0.5), 3, 2, &mut rng).unwrap())
            .collect();
        let x = features(5, 3, 3);
        let ens = ExpertEnsemble::new(experts.clone()).unwrap();
        let mut rngs: Vec<Rng> = (0..3).map(|j| rng_for(9, j)).collect();
        let outs = ens.forward(&ops, &x, Some(&mut rngs)).unwrap();
        for (j, e) in experts.iter().enumerate() {
            let mut r = rng_for(9, j as u64);
            let (alone, _) = e.forward(&ops, &x, Some(&mut r)).unwrap();
            assert_eq!(outs[j].0, alone);
        }
        let reversed = ExpertEnsemble::new(experts.iter().rev().cloned().collect()).unwrap();
        let rev_out = reversed.forward_eval(&ops, &x).unwrap();
        let fwd_out = ens.forward_eval(&ops, &x).unwrap();
        for j in 0..3 {
            assert_eq!(rev_out[j], fwd_out[2 - j]);
        }
        let single = ExpertEnsemble::new(vec![experts[0].clone()]).unwrap();
        assert_eq!(single.forward_eval(&ops, &x).unwrap()[0], experts[0].forward_eval(&ops, &x).unwrap());
    }

    #[test]
    fn ensemble_rejects_mismatched_experts() {
        let mut rng = rng_for(0, 0);
        let a = Expert::new(ExpertSpec::new(ExpertKind::Gcn, 2, 4, 0.0), 3, 2, &mut rng).unwrap();
        let b = Expert::new(ExpertSpec::new(ExpertKind::Gcn, 2, 4, 0.0), 3, 4, &mut rng).unwrap();
        assert!(ExpertEnsemble::new(vec![a, b]).is_err());
        assert!(ExpertEnsemble::new(vec![]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ExpertSpec::new(ExpertKind::Gcn, 2, 64, 0.5).validate().is_ok());
        assert!(ExpertSpec::new(ExpertKind::Gcn, 5, 64, 0.5).validate().is_err());
        assert!(ExpertSpec::new(ExpertKind::Gcn, 2, 48, 0.5).validate().is_err());
        assert!(ExpertSpec::new(ExpertKind::Gcn, 2, 64, 0.95).validate().is_err());
        assert_eq!("highpass_residual".parse::<ExpertKind>().unwrap(), ExpertKind::HighpassResidual);
        assert!("gat".parse::<ExpertKind>().is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let graph = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let ops = GraphOperators::new(&graph);
        let mut rng = rng_for(4, 0);
        let e = Expert::new(ExpertSpec::new(ExpertKind::GcnResidual, 2, 4, 0.5), 3, 2, &mut rng).unwrap();
        let x = features(4, 3, 1);
        assert_eq!(e.forward_eval(&ops, &x).unwrap(), e.forward_eval(&ops, &x).unwrap());
    }
}
