//! AdamW with decoupled weight decay.

use ndarray::ArrayD;

use crate::autodiff::Elem;
use crate::encoder::Param;

pub struct AdamW<E: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<ArrayD<E>>,
    pub v: Vec<ArrayD<E>>,
}

impl<E: Elem> AdamW<E> {
    pub fn new(lr: f64, weight_decay: f64, params: &[Param<E>]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    /// One update: decay applied directly to the weights, then the
    /// bias-corrected adaptive step.
    pub fn step(&mut self, params: &mut [Param<E>], grads: &[ArrayD<E>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.beta2);
        let bc1 = E::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let bc2 = E::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let decay = E::from_f64(1.0 - self.lr * self.weight_decay);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|pv, &gv, mv, vv| {
                    *mv = b1 * *mv + one_m_b1 * gv;
                    *vv = b2 * *vv + one_m_b2 * gv * gv;
                    let mhat = *mv * bc1;
                    let vhat = *vv * bc2;
                    *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
