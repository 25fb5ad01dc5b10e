//! Dense neural-network building blocks with hand-written backward passes.

mod gradcheck;
pub(crate) mod layers;
mod loss;
mod optim;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use layers::{Activation, Linear, Mlp, MlpCache};
pub use loss::{
    bce_loss, binary_logistic_loss, sigmoid, softmax_cross_entropy, softmax_cross_entropy_rows,
    softmax_rows,
};
pub use optim::{AdamW, AdamWConfig};

/// Gradient buffers, one per parameter tensor, in [`Trainable::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like<T: Trainable + ?Sized>(model: &T) -> Self {
        Self(model.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in &mut self.0 {
            for v in g {
                *v *= alpha;
            }
        }
    }

    pub fn extend(&mut self, other: Gradients) {
        self.0.extend(other.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Anything holding trainable `f64` tensors.
pub trait Trainable {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    fn param_names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}
