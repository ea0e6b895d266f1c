use crate::nn::param::ParamStore;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let decay = T::one() - lr * T::of(self.weight_decay);
        for p in store.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let (value, grad, m, v) = (p.value.data_mut(), p.grad.data_mut(), p.m.data_mut(), p.v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] = value[i] * decay - lr * mhat / (vhat.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
    }
}
