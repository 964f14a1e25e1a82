//! Momentum SGD and the step schedule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr: 0.001,
            decay_every: 1000,
            decay_factor: 0.95,
        }
    }
}

/// `lr · factor^⌊iteration / decay_every⌋`
pub fn lr_at(iteration: usize, s: &Schedule) -> f64 {
    let steps = (iteration / s.decay_every.max(1)) as i32;
    s.lr * s.decay_factor.powi(steps)
}

/// Classical momentum: `v ← μv + g`, `p ← p − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), v.shape()));
        }
        match g {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::shape("sgd_step", p.shape(), g.shape()));
                }
                for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = mu * *vi + gi;
                }
            }
            None => v.data_mut().iter_mut().for_each(|vi| *vi *= mu),
        }
        for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = Schedule::default();
        assert_eq!(lr_at(0, &s), 0.001);
        assert_eq!(lr_at(999, &s), 0.001);
        assert!((lr_at(1000, &s) - 0.00095).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for it in (0..10_000).step_by(137) {
            let lr = lr_at(it, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![3]).unwrap();
        let mut v = vec![Tensor::zeros(vec![3]).unwrap()];
        sgd_step(&mut [&mut p], &[Some(&g)], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn no_momentum_is_plain_descent() {
        let mut p = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let mut v = vec![Tensor::zeros(vec![2]).unwrap()];
        sgd_step(&mut [&mut p], &[Some(&g)], &mut v, 0.1, 0.0).unwrap();
        sgd_step(&mut [&mut p], &[Some(&g)], &mut v, 0.1, 0.0).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15 && (p.data()[1] - 2.2).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(p) = ½p², gradient p
        let mut p = Tensor::new(vec![1], vec![5.0f64]).unwrap();
        let mut v = vec![Tensor::zeros(vec![1]).unwrap()];
        for _ in 0..200 {
            let g = p.clone();
            sgd_step(&mut [&mut p], &[Some(&g)], &mut v, 0.1, 0.9).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-3, "{}", p.data()[0]);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let mut v = vec![Tensor::zeros(vec![3]).unwrap()];
        assert!(sgd_step(&mut [&mut p], &[None], &mut v, 0.1, 0.9).is_err());
    }
}
