use super::{NumError, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let m: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::ZERO; t.len()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// Applies one update from the gradient buffers in `params`.
    ///
    /// Parameters without a gradient buffer are treated as having zero
    /// gradient. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<(), NumError> {
        if !(lr >= 0.0) {
            return Err(NumError::Invalid(format!("learning rate {lr}")));
        }
        if params.len() != self.m.len() {
            return Err(NumError::Invalid(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if t.len() != self.m[i].len() {
                return Err(NumError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("{name}: {} values vs state {}", t.len(), self.m[i].len()),
                });
            }
            if let Some(g) = t.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NumError::NumericFault { op: "adamw" });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::ONE - b1, T::ONE - b2);
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);
        let lr = T::from_f64(lr);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[T]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::ZERO, |g| g[j]);
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::from_vec(values.to_vec());
        t.accumulate_grad(grads);
        s.insert("w", t);
        s
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = store(&[1.0, -2.0], &[0.3, 0.7]);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        opt.step(&mut p, 0.0).unwrap();
        assert_eq!(p.tensor(0).data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let g = [0.5, -3.0, 1e-3];
        let mut p = store(&[0.0, 0.0, 0.0], &g);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let lr = 1e-2;
        opt.step(&mut p, lr).unwrap();
        for (x, gi) in p.tensor(0).data().iter().zip(g) {
            let want = -lr * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-12, "{x} vs {want}");
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = store(&[1.0, 2.0], &[f64::NAN, 0.0]);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        assert!(matches!(opt.step(&mut p, 0.1), Err(NumError::NumericFault { .. })));
        assert_eq!(p.tensor(0).data(), &[1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn same_state_same_result() {
        let p0 = store(&[0.2, -0.4], &[0.1, 0.9]);
        let mut warm = p0.clone();
        let mut opt = AdamW::new(&warm, AdamWConfig::default());
        opt.step(&mut warm, 0.01).unwrap();
        let (mut a, mut b) = (warm.clone(), warm.clone());
        let (mut oa, mut ob) = (opt.clone(), opt.clone());
        oa.step(&mut a, 0.01).unwrap();
        ob.step(&mut b, 0.01).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn zero_betas_step_bounded_by_lr() {
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, ..AdamWConfig::default() };
        let mut p = store(&[0.0; 4], &[3.0, -0.2, 1e-6, -50.0]);
        let mut opt = AdamW::new(&p, cfg);
        for _ in 0..3 {
            let before = p.tensor(0).data().to_vec();
            opt.step(&mut p, 0.05).unwrap();
            for (a, b) in p.tensor(0).data().iter().zip(before) {
                assert!((a - b).abs() <= 0.05 + 1e-12);
            }
        }
    }
}
