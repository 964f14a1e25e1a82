//! Parameter containers.
//!
//! Every parameter struct is generic over its handle type `P`: stored models
//! use `P = Tensor<T>`, and a forward pass binds them to a tape, yielding the
//! same structure with `P = Var`. `views` / `views_mut` list the handles in a
//! fixed order, which is also the checkpoint order.

use rand::Rng;
use rand_distr::Uniform;

use crate::tensor::{Real, Tape, Tensor, Var};

/// Kernel and bias of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<P> {
    pub kernel: P,
    pub bias: P,
}

impl<P> Conv<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Conv<Q> {
        Conv {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }

    pub fn views(&self) -> Vec<&P> {
        vec![&self.kernel, &self.bias]
    }

    pub fn views_mut(&mut self) -> Vec<&mut P> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

impl<T: Real> Conv<Tensor<T>> {
    /// Uniform `±sqrt(6 / fan_in)` kernel, zero bias.
    pub fn fan_in_uniform(rng: &mut impl Rng, out_c: usize, in_c: usize, ksize: usize) -> Self {
        let fan_in = (in_c * ksize * ksize) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let kernel = Tensor::from_fn(vec![out_c, in_c, ksize, ksize], |_| T::lit(rng.sample(dist)))
            .expect("positive dims");
        Conv {
            kernel,
            bias: Tensor::zeros(vec![out_c]).expect("positive dims"),
        }
    }

    pub fn zeros(out_c: usize, in_c: usize, ksize: usize) -> Self {
        Conv {
            kernel: Tensor::zeros(vec![out_c, in_c, ksize, ksize]).expect("positive dims"),
            bias: Tensor::zeros(vec![out_c]).expect("positive dims"),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// Binds stored parameters to `tape` as trainable leaves.
pub fn bind<T: Real>(tape: &mut Tape<T>) -> impl FnMut(&Tensor<T>) -> Var + '_ {
    move |t| tape.param(t.clone())
}

/// Binds stored parameters to `tape` as constants (no gradient).
pub fn bind_frozen<T: Real>(tape: &mut Tape<T>) -> impl FnMut(&Tensor<T>) -> Var + '_ {
    move |t| tape.constant(t.clone())
}
