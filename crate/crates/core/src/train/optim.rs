use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with decoupled weight decay.
///
/// Decay applies only to parameters with two or more axes; biases and
/// norm gains/shifts are left alone. Both the adaptive step and the decay
/// are scaled by the learning rate, so `lr = 0` leaves parameters bitwise
/// unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters whose gradient is `None` (unused in
    /// this step) keep their value and moments.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim("adamw", "parameter count", params.len(), grads.len()));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bias1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let bias2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::lit(self.eps);
        let lr_t = T::lit(lr);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", "gradient shape", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
            let decay = if p.ndim() >= 2 { T::lit(self.weight_decay) } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *w -= lr_t * (mhat / (vhat.sqrt() + eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts: the first cycle lasts `period`
/// steps and each later cycle is `mult` times longer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestarts {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: usize,
    pub mult: usize,
}

impl CosineRestarts {
    pub fn lr(&self, step: usize) -> f64 {
        let (mut start, mut len) = (0usize, self.period.max(1));
        while step >= start + len {
            start += len;
            len *= self.mult.max(1);
        }
        let frac = (step - start) as f64 / len as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        s.insert("b", Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
        s
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.01);
        let grads = vec![Some(Tensor::full(&[2, 2], 3.0)), Some(Tensor::full(&[2], -1.0))];
        opt.step(&mut s, &grads, 0.0).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), before.iter().collect::<Vec<_>>());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-12, 0.0);
        let grads = vec![Some(Tensor::full(&[2, 2], 0.3)), Some(Tensor::full(&[2], -5.0))];
        opt.step(&mut s, &grads, 0.01).unwrap();
        let w = s.get(s.id("w").unwrap()).to_f64_vec();
        let b = s.get(s.id("b").unwrap()).to_f64_vec();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((b[0] - 0.11).abs() < 1e-9);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.5);
        let grads = vec![Some(Tensor::zeros(&[2, 2])), Some(Tensor::zeros(&[2]))];
        opt.step(&mut s, &grads, 0.1).unwrap();
        assert!((s.get(s.id("w").unwrap()).data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(s.get(s.id("b").unwrap()).data()[0], 0.1);
    }

    #[test]
    fn schedule_restarts_and_doubles() {
        let s = CosineRestarts {
            lr_max: 1.0,
            lr_min: 0.0,
            period: 10,
            mult: 2,
        };
        assert_eq!(s.lr(0), 1.0);
        assert!((s.lr(5) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(20) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(30), 1.0);
        assert!(s.lr(29) < 0.01);
    }
}
