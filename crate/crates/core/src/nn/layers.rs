use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Gradients, Trainable};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map `x W + b` with `W` stored as `input × output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        let weight = Matrix::from_fn(input, output, |_, _| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        out.add_row_vector(&self.bias);
        out
    }
}

/// Draws an inverted-dropout mask (`0` or `1/(1-rate)` per entry).
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

pub(crate) fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.shape(), b.shape());
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Multilayer perceptron. The activation follows every layer but the last;
/// dropout (when training) is applied to the input of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

/// Intermediates recorded by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
}

impl Mlp {
    /// `sizes` lists the layer widths, input first: `[d, h, ..., out]`.
    pub fn new(sizes: &[usize], activation: Activation, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "an MLP needs at least two layer sizes, got {sizes:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidParameter(format!("dropout {dropout} outside [0, 1)")));
        }
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Ok(Self {
            layers,
            activation,
            dropout,
        })
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "Mlp layer chain",
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            dropout,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Linear::output_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn zero_parameters(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }

    /// Forward pass. Passing a generator enables dropout.
    pub fn forward(&self, input: &Matrix, dropout_rng: Option<&mut Rng>) -> Result<(Matrix, MlpCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "Mlp input",
                expected: self.input_dim(),
                actual: input.cols(),
            });
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("Mlp input".into()));
        }
        Ok(self.forward_unchecked(input, dropout_rng))
    }

    pub fn forward_eval(&self, input: &Matrix) -> Result<Matrix> {
        self.forward(input, None).map(|(out, _)| out)
    }

    pub(crate) fn forward_unchecked(&self, input: &Matrix, mut dropout_rng: Option<&mut Rng>) -> (Matrix, MlpCache) {
        let mut cache = MlpCache::default();
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => Some(dropout_mask(h.rows(), h.cols(), self.dropout, rng)),
                _ => None,
            };
            if let Some(m) = &mask {
                h = hadamard(&h, m);
            }
            let z = layer.forward(&h);
            let next = if l == last {
                z.clone()
            } else {
                z.map(|v| self.activation.apply(v))
            };
            cache.inputs.push(h);
            cache.pre.push(z);
            cache.masks.push(mask);
            h = next;
        }
        (h, cache)
    }

    /// Backward pass from the gradient of the output. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::MissingForward);
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); 2 * self.layers.len()];
        let mut g = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            if l != last {
                let pre = &cache.pre[l];
                for (gv, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *gv *= self.activation.derivative(p);
                }
            }
            let layer = &self.layers[l];
            grads[2 * l] = cache.inputs[l].t_matmul(&g).into_vec();
            grads[2 * l + 1] = g.column_sums();
            let mut gin = g.matmul_t(&layer.weight);
            if let Some(mask) = &cache.masks[l] {
                gin = hadamard(&gin, mask);
            }
            g = gin;
        }
        Ok((Gradients(grads), g))
    }
}

impl Trainable for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")])
            .collect()
    }
}
