//! SGD with momentum and weight decay under a polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::params::Params;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct OptimState<T: Real = f32> {
    pub lr_base: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iter: usize,
    pub max_iter: usize,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(lr_base: f64, max_iter: usize) -> Self {
        Self {
            lr_base,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            iter: 0,
            max_iter,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

/// `lr_base · (1 − iter/max_iter)^power`.
pub fn poly_lr<T: Real>(state: &OptimState<T>) -> f64 {
    assert!(state.max_iter > 0, "poly_lr needs max_iter > 0");
    let progress = (state.iter.min(state.max_iter)) as f64 / state.max_iter as f64;
    state.lr_base * (1.0 - progress).powf(state.power)
}

/// One update from the gradients held in each parameter's grad slot:
/// `v ← momentum·v + g + weight_decay·p`, `p ← p − lr·v`. Returns the learning rate used.
///
/// A parameter without a stored gradient is treated as having a zero gradient.
pub fn sgd_step<T: Real>(params: &mut Params<T>, state: &mut OptimState<T>) -> Result<f64> {
    if state.iter >= state.max_iter {
        return Err(Error::Usage(format!(
            "optimizer already ran {} of {} iterations",
            state.iter, state.max_iter
        )));
    }
    for (name, t) in params.iter() {
        if let Some(grad) = t.grad() {
            if let Some((index, v)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                    value: v.as_f64(),
                });
            }
        }
    }
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
    }
    let lr = poly_lr(state);
    let (lr_t, mu, wd) = (T::of(lr), T::of(state.momentum), T::of(state.weight_decay));
    for ((_, t), vel) in params.tensors_mut().zip(&mut state.velocity) {
        let grad = t.grad().map(<[T]>::to_vec);
        let data = t.data_mut();
        for (i, (p, v)) in data.iter_mut().zip(vel.iter_mut()).enumerate() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
            *v = mu * *v + g + wd * *p;
            *p = *p - lr_t * *v;
        }
    }
    state.iter += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> Params<f64> {
        let mut p = Params::new();
        let id = p.add("w", Tensor::scalar(value));
        p.get_mut(id).set_grad(vec![grad]).unwrap();
        p
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        let mut s = OptimState::<f32>::new(0.01, 100);
        assert_eq!(poly_lr(&s), 0.01);
        s.iter = 50;
        // 0.01 · 0.5^0.9
        assert!((poly_lr(&s) - 0.005_358_867_3).abs() < 1e-9);
        s.iter = 100;
        assert_eq!(poly_lr(&s), 0.0);
    }

    #[test]
    fn poly_is_non_increasing() {
        let mut s = OptimState::<f32>::new(0.05, 37);
        let mut prev = f64::INFINITY;
        for i in 0..=37 {
            s.iter = i;
            let lr = poly_lr(&s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = single(2.0, 0.75);
        let mut s = OptimState::new(1.0, 10)
            .with_momentum(0.0)
            .with_weight_decay(0.0)
            .with_power(0.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.get(p.find("w").unwrap()).item(), 1.25);
        assert_eq!(s.iter, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = single(-3.5, 0.0);
        let mut s = OptimState::new(0.1, 10).with_weight_decay(0.0);
        for _ in 0..3 {
            sgd_step(&mut p, &mut s).unwrap();
        }
        assert_eq!(p.get(p.find("w").unwrap()).item(), -3.5);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr0, mu, wd, power, max_iter) = (0.1, 0.9, 0.01, 0.9, 4usize);
        let (g1, g2) = (0.5, -0.2);
        let mut p = single(1.0, g1);
        let mut s = OptimState::new(lr0, max_iter)
            .with_momentum(mu)
            .with_weight_decay(wd)
            .with_power(power);
        let id = p.find("w").unwrap();
        sgd_step(&mut p, &mut s).unwrap();
        p.get_mut(id).set_grad(vec![g2]).unwrap();
        sgd_step(&mut p, &mut s).unwrap();

        let lr = |i: usize| lr0 * (1.0 - i as f64 / max_iter as f64).powf(power);
        let mut x = 1.0;
        let v1 = g1 + wd * x;
        x -= lr(0) * v1;
        let v2 = mu * v1 + g2 + wd * x;
        x -= lr(1) * v2;
        assert!((p.get(id).item() - x).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0, f64::NAN);
        let mut s = OptimState::new(0.1, 10);
        match sgd_step(&mut p, &mut s) {
            Err(Error::NonFiniteGradient { name, index, .. }) => {
                assert_eq!(name, "w");
                assert_eq!(index, 0);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert_eq!(s.iter, 0);
    }
}
