//! Gating model: local and global pattern embeddings, concatenated and
//! mapped to softmax weights over experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{softmax_rows, Activation, Gradients, Mlp, MlpCache, Trainable};
use crate::pattern::PATTERN_DIM;
use crate::rng::Rng;

/// Which gate inputs are live. The ablated variants keep the full
/// architecture but zero the named embedding (or skip the network).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Full,
    NoLocal,
    NoGlobal,
    /// Every expert gets `1/t`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingNetwork {
    local_embed: Mlp,
    global_embed: Mlp,
    gate: Mlp,
    mode: GateMode,
}

#[derive(Clone, Debug, Default)]
pub struct GateCache {
    local: MlpCache,
    global: MlpCache,
    gate: MlpCache,
    weights: Matrix,
}

impl GatingNetwork {
    /// `layers` counts the linear maps of the gating MLP (1 = a single
    /// affine map from the concatenated embeddings to expert logits).
    pub fn new(
        num_experts: usize,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        mode: GateMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_experts == 0 || embed_dim == 0 || layers == 0 {
            return Err(Error::InvalidParameter(format!(
                "gate needs positive sizes (experts {num_experts}, embed {embed_dim}, layers {layers})"
            )));
        }
        let local_embed = Mlp::new(&[PATTERN_DIM, embed_dim, embed_dim], Activation::Relu, 0.0, rng)?;
        let global_embed = Mlp::new(&[PATTERN_DIM, embed_dim, embed_dim], Activation::Relu, 0.0, rng)?;
        let mut sizes = vec![2 * embed_dim];
        sizes.extend(std::iter::repeat_n(hidden, layers - 1));
        sizes.push(num_experts);
        let gate = Mlp::new(&sizes, Activation::Relu, dropout, rng)?;
        Ok(Self {
            local_embed,
            global_embed,
            gate,
            mode,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.gate.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.local_embed.output_dim()
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
    }

    pub fn gate_mlp_mut(&mut self) -> &mut Mlp {
        &mut self.gate
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.local_embed, &mut self.global_embed, &mut self.gate]
    }

    /// Expert weights (`n × t`) from local patterns (`n × PATTERN_DIM`) and
    /// the shared global pattern (`1 × PATTERN_DIM`).
    pub fn forward(&self, local: &Matrix, global: &Matrix, dropout_rng: Option<&mut Rng>) -> Result<(Matrix, GateCache)> {
        if local.cols() != PATTERN_DIM || global.cols() != PATTERN_DIM {
            return Err(Error::DimensionMismatch {
                context: "gate pattern width",
                expected: PATTERN_DIM,
                actual: if local.cols() != PATTERN_DIM { local.cols() } else { global.cols() },
            });
        }
        if global.rows() != 1 {
            return Err(Error::DimensionMismatch {
                context: "global pattern rows",
                expected: 1,
                actual: global.rows(),
            });
        }
        let n = local.rows();
        let t = self.num_experts();
        if self.mode == GateMode::Uniform {
            let weights = Matrix::filled(n, t, 1.0 / t as f64);
            return Ok((
                weights.clone(),
                GateCache {
                    weights,
                    ..GateCache::default()
                },
            ));
        }
        let (mut local_emb, local_cache) = self.local_embed.forward(local, None)?;
        let (global_emb, global_cache) = self.global_embed.forward(global, None)?;
        let mut global_rows = Matrix::zeros(n, self.embed_dim());
        if self.mode != GateMode::NoGlobal {
            for r in 0..n {
                global_rows.row_mut(r).copy_from_slice(global_emb.row(0));
            }
        }
        if self.mode == GateMode::NoLocal {
            local_emb = Matrix::zeros(n, self.embed_dim());
        }
        let (logits, gate_cache) = self.gate.forward(&local_emb.hconcat(&global_rows), dropout_rng)?;
        let weights = softmax_rows(&logits);
        if !weights.is_finite() {
            return Err(Error::NonFinite("gate weights".into()));
        }
        Ok((
            weights.clone(),
            GateCache {
                local: local_cache,
                global: global_cache,
                gate: gate_cache,
                weights,
            },
        ))
    }

    /// Returns parameter gradients and the gradients with respect to the
    /// local patterns and the global pattern.
    pub fn backward(&self, cache: &GateCache, grad_weights: &Matrix) -> Result<(Gradients, Matrix, Matrix)> {
        let w = &cache.weights;
        if grad_weights.shape() != w.shape() {
            return Err(Error::DimensionMismatch {
                context: "gate weight gradient",
                expected: w.rows(),
                actual: grad_weights.rows(),
            });
        }
        let n = w.rows();
        if self.mode == GateMode::Uniform {
            return Ok((
                Gradients::zeros_like(self),
                Matrix::zeros(n, PATTERN_DIM),
                Matrix::zeros(1, PATTERN_DIM),
            ));
        }
        let mut grad_logits = Matrix::zeros(n, w.cols());
        for r in 0..n {
            let dot: f64 = w.row(r).iter().zip(grad_weights.row(r)).map(|(a, b)| a * b).sum();
            for ((g, &wi), &gw) in grad_logits.row_mut(r).iter_mut().zip(w.row(r)).zip(grad_weights.row(r)) {
                *g = wi * (gw - dot);
            }
        }
        let (gate_grads, grad_concat) = self.gate.backward(&cache.gate, &grad_logits)?;
        let (grad_local_emb, grad_global_rows) = grad_concat.hsplit(self.embed_dim());

        let (local_grads, grad_local) = if self.mode == GateMode::NoLocal {
            (Gradients::zeros_like(&self.local_embed), Matrix::zeros(n, PATTERN_DIM))
        } else {
            self.local_embed.backward(&cache.local, &grad_local_emb)?
        };
        let (global_grads, grad_global) = if self.mode == GateMode::NoGlobal {
            (Gradients::zeros_like(&self.global_embed), Matrix::zeros(1, PATTERN_DIM))
        } else {
            let summed = Matrix::from_vec(1, self.embed_dim(), grad_global_rows.column_sums())?;
            self.global_embed.backward(&cache.global, &summed)?
        };
        let mut grads = local_grads;
        grads.extend(global_grads);
        grads.extend(gate_grads);
        Ok((grads, grad_local, grad_global))
    }
}

impl Trainable for GatingNetwork {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.local_embed.params();
        p.extend(self.global_embed.params());
        p.extend(self.gate.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.local_embed.params_mut();
        p.extend(self.global_embed.params_mut());
        p.extend(self.gate.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, m) in [
            ("gate.local_embed", &self.local_embed),
            ("gate.global_embed", &self.global_embed),
            ("gate.mlp", &self.gate),
        ] {
            names.extend(m.param_names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use crate::rng::rng_for;

    fn patterns(n: usize, seed: usize) -> Matrix {
        Matrix::from_fn(n, PATTERN_DIM, |r, c| (((r * 5 + c * 3 + seed) % 11) as f64) / 10.0)
    }

    fn global_of(local: &Matrix) -> Matrix {
        Matrix::from_vec(1, PATTERN_DIM, local.column_means()).unwrap()
    }

    #[test]
    fn zero_gate_is_uniform() {
        let mut g = GatingNetwork::new(5, 4, 8, 2, 0.0, GateMode::Full, &mut rng_for(0, 0)).unwrap();
        g.gate_mlp_mut().zero_parameters();
        let local = patterns(7, 0);
        let (w, _) = g.forward(&local, &global_of(&local), None).unwrap();
        assert!(w.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rows_are_simplex_points_and_twins_match() {
        let g = GatingNetwork::new(4, 6, 16, 3, 0.3, GateMode::Full, &mut rng_for(1, 0)).unwrap();
        let mut local = patterns(9, 2);
        let row = local.row(2).to_vec();
        local.row_mut(6).copy_from_slice(&row);
        let (w, _) = g.forward(&local, &global_of(&local), None).unwrap();
        for r in 0..9 {
            assert!(w.row(r).iter().all(|&v| v >= 0.0));
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(w.row(2), w.row(6));
    }

    #[test]
    fn uniform_mode_ignores_patterns() {
        let g = GatingNetwork::new(3, 4, 8, 2, 0.0, GateMode::Uniform, &mut rng_for(2, 0)).unwrap();
        let local = patterns(5, 1);
        let (w, cache) = g.forward(&local, &global_of(&local), None).unwrap();
        assert!(w.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let (grads, gl, gg) = g.backward(&cache, &Matrix::filled(5, 3, 1.0)).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(gl.as_slice().iter().chain(gg.as_slice()).fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    }

    #[test]
    fn no_local_makes_rows_identical() {
        let g = GatingNetwork::new(3, 4, 8, 2, 0.0, GateMode::NoLocal, &mut rng_for(3, 0)).unwrap();
        let local = patterns(6, 3);
        let (w, _) = g.forward(&local, &global_of(&local), None).unwrap();
        for r in 1..6 {
            assert_eq!(w.row(r), w.row(0));
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        for mode in [GateMode::Full, GateMode::NoLocal, GateMode::NoGlobal] {
            for seed in 0..3u64 {
                let mut g = GatingNetwork::new(4, 5, 7, 3, 0.25, mode, &mut rng_for(seed, 4)).unwrap();
                for m in g.mlps_mut() {
                    for layer in &mut m.layers {
                        for (k, b) in layer.bias.iter_mut().enumerate() {
                            *b = 0.1 + 0.05 * k as f64;
                        }
                    }
                }
                let local = patterns(8, seed as usize);
                let global = global_of(&local);
                let target = Matrix::from_fn(8, 4, |r, c| ((r * 3 + c) % 4) as f64 - 1.5);
                let loss = |m: &GatingNetwork| {
                    let (w, _) = m.forward(&local, &global, Some(&mut rng_for(seed, 99))).unwrap();
                    w.as_slice().iter().zip(target.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                };
                let (_, cache) = g.forward(&local, &global, Some(&mut rng_for(seed, 99))).unwrap();
                let (grads, _, _) = g.backward(&cache, &target).unwrap();
                let report = check_gradients(&mut g, &grads, 1e-5, loss);
                assert!(report.max_rel_error < 1e-4, "{mode:?} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let g = GatingNetwork::new(3, 4, 6, 2, 0.0, GateMode::Full, &mut rng_for(5, 0)).unwrap();
        let local = patterns(5, 4);
        let global = global_of(&local);
        let target = Matrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.4);
        let f = |l: &Matrix, gl: &Matrix| {
            let (w, _) = g.forward(l, gl, None).unwrap();
            w.as_slice().iter().zip(target.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = g.forward(&local, &global, None).unwrap();
        let (_, gl, gg) = g.backward(&cache, &target).unwrap();
        let h = 1e-6;
        for i in 0..local.as_slice().len() {
            let mut plus = local.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = local.clone();
            minus.as_mut_slice()[i] -= h;
            let num = (f(&plus, &global) - f(&minus, &global)) / (2.0 * h);
            assert!((num - gl.as_slice()[i]).abs() < 1e-7);
        }
        for i in 0..PATTERN_DIM {
            let mut plus = global.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = global.clone();
            minus.as_mut_slice()[i] -= h;
            let num = (f(&local, &plus) - f(&local, &minus)) / (2.0 * h);
            assert!((num - gg.as_slice()[i]).abs() < 1e-7);
        }
    }
}
