//! Bias-corrected Adam over one parameter group.

use crate::tensor::{sc, Group, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: Self::EPS }
    }

    /// Updates every parameter of `group` from its accumulated gradient (a
    /// missing gradient is zero), then clears those gradients.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, group: Group) {
        for p in store.iter_mut().filter(|p| p.group == group) {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.value.data_mut().iter_mut();
            let moments = p.adam_m.data_mut().iter_mut().zip(p.adam_v.data_mut().iter_mut());
            for ((w, (m, v)), g) in values.zip(moments).zip(p.grad.data_mut().iter_mut()) {
                let gf = g.to_f64().unwrap_or(0.0);
                let mf = self.beta1 * m.to_f64().unwrap_or(0.0) + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * v.to_f64().unwrap_or(0.0) + (1.0 - self.beta2) * gf * gf;
                let update = self.lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *w = *w - sc(update);
                *m = sc(mf);
                *v = sc(vf);
                *g = T::zero();
            }
        }
    }
}
