use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            for (mi, gi) in m.values_mut().iter_mut().zip(g.values()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("inserted");
            for (vi, gi) in v.values_mut().iter_mut().zip(g.values()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.m.get(name).expect("inserted");
            let v = self.v.get(name).expect("inserted");
            for ((pi, mi), vi) in p.values_mut().iter_mut().zip(m.values()).zip(v.values()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
