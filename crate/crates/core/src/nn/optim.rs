//! Adaptive-moment optimizers and learning-rate schedules.

use ndarray::ArrayD;

use super::layers::ParamSet;

/// Adam / AdamW. With `weight_decay > 0` the decay is decoupled (applied
/// directly to the weights, not through the moments).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = (0..params.len())
            .map(|i| ArrayD::zeros(params.value(super::layers::ParamId(i)).raw_dim()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. `grads[i]` pairs with parameter `i`; `None` leaves it
    /// untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<ArrayD<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, value) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            if self.weight_decay > 0.0 {
                value.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|x, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Learning rate halved every `period` epochs.
pub fn halving_lr(initial: f64, period: usize, epoch: usize) -> f64 {
    initial * 0.5_f64.powi((epoch / period.max(1)) as i32)
}

/// Cosine annealing from `initial` to 0 over `total` epochs.
pub fn cosine_lr(initial: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return initial;
    }
    let frac = (epoch as f64 / total as f64).min(1.0);
    0.5 * initial * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Init;
    use crate::nn::Graph;
    use ndarray::IxDyn;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::new(0);
        let id = ps.register("x", &[4], Init::Ones);
        let mut opt = Adam::new(&ps, 0.0);
        for _ in 0..300 {
            let mut g = Graph::new();
            let vars = ps.bind(&mut g, true);
            let x2 = g.mul(vars[id.0], vars[id.0]);
            let loss = g.sum_all(x2);
            g.backward(loss);
            let grads: Vec<Option<ndarray::ArrayD<f64>>> =
                vars.iter().map(|&v| g.grad(v).cloned()).collect();
            opt.step(&mut ps, &grads, 0.05);
        }
        assert!(ps.value(id).iter().all(|&x| x.abs() < 1e-2));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_unused_weights() {
        let mut ps = ParamSet::new(0);
        let id = ps.register("x", &[2], Init::Ones);
        let mut opt = Adam::new(&ps, 0.1);
        let grads = vec![Some(ndarray::ArrayD::zeros(IxDyn(&[2])))];
        for _ in 0..10 {
            opt.step(&mut ps, &grads, 0.1);
        }
        assert!(ps.value(id).iter().all(|&x| x < 1.0 && x > 0.8));
    }

    #[test]
    fn schedules_match_contracts() {
        assert_eq!(halving_lr(3e-4, 20, 0), 3e-4);
        assert_eq!(halving_lr(3e-4, 20, 19), 3e-4);
        assert_eq!(halving_lr(3e-4, 20, 20), 1.5e-4);
        assert_eq!(halving_lr(3e-4, 20, 40), 7.5e-5);
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10) < 1e-12);
    }
}
