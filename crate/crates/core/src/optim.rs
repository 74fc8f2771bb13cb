//! Optimizers shared by victim training and the attack loop.

use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction; one instance per parameter tensor.
pub struct Adam<T: Scalar> {
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(dim: usize) -> Self {
        Adam {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            m: vec![T::ZERO; dim],
            v: vec![T::ZERO; dim],
            step: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = T::from_f64(beta1);
        self.beta2 = T::from_f64(beta2);
        self.eps = T::from_f64(eps);
        self
    }

    /// One descent step: `param -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) {
        assert_eq!(param.numel(), self.m.len(), "adam state dimension");
        assert_eq!(grad.numel(), self.m.len(), "adam gradient dimension");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::ONE - pow(self.beta1, t);
        let bc2 = T::ONE - pow(self.beta2, t);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (T::ONE - self.beta1) * g;
            *v = self.beta2 * *v + (T::ONE - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn pow<T: Scalar>(base: T, exp: i32) -> T {
    let mut acc = T::ONE;
    for _ in 0..exp {
        acc = acc * base;
    }
    acc
}

/// Plain SGD with classical momentum.
pub struct SgdMomentum<T: Scalar> {
    momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(dim: usize, momentum: f64) -> Self {
        SgdMomentum {
            momentum: T::from_f64(momentum),
            velocity: vec![T::ZERO; dim],
        }
    }

    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) {
        assert_eq!(param.numel(), self.velocity.len(), "sgd state dimension");
        for ((p, &g), vel) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.velocity.iter_mut())
        {
            *vel = self.momentum * *vel + g;
            *p -= lr * *vel;
        }
    }
}

/// Step decay schedule: `lr(t) = lr0 * decay^(floor(t / step_size))` with
/// `t` counted from 0.
#[derive(Debug, Clone, Copy)]
pub struct StepLr {
    pub initial: f64,
    pub step_size: usize,
    pub decay: f64,
}

impl StepLr {
    pub fn new(initial: f64, step_size: usize, decay: f64) -> Self {
        assert!(step_size >= 1, "scheduler step size must be positive");
        StepLr {
            initial,
            step_size,
            decay,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi((epoch / self.step_size) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![2.0f64, -2.0]).unwrap();
        let mut opt = Adam::new(2);
        opt.step(&mut p, &g, 0.1);
        assert!(p.data()[0] < 1.0);
        assert!(p.data()[1] > -1.0);
        // First step with bias correction moves by ~lr regardless of scale.
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut p = Tensor::new(vec![2], vec![0.5f64, -0.5]).unwrap();
        let g = Tensor::full(&[2], 3.0f64);
        let mut opt = Adam::new(2);
        let before = p.clone();
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut opt = SgdMomentum::new(1, 0.9);
        opt.step(&mut p, &g, 1.0); // v=1, p=-1
        opt.step(&mut p, &g, 1.0); // v=1.9, p=-2.9
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn step_lr_halves_on_schedule() {
        let sched = StepLr::new(0.01, 10, 0.5);
        assert_eq!(sched.lr_at(0), 0.01);
        assert_eq!(sched.lr_at(9), 0.01);
        assert_eq!(sched.lr_at(10), 0.005);
        assert_eq!(sched.lr_at(25), 0.0025);
    }
}
