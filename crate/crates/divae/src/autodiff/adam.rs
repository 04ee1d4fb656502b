//! Adam with bias correction over named parameter tensors.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// Moments keyed by parameter name; BTreeMap for deterministic iteration.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    /// One update over `(name, param, grad)` triples. Shapes must agree;
    /// `t` advances by exactly one per call.
    pub fn step<'a>(&mut self, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in updates {
            assert_eq!(
                param.shape(),
                grad.shape(),
                "adam shape mismatch for `{name}`: {:?} vs {:?}",
                param.shape(),
                grad.shape()
            );
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));
            assert_eq!(m.shape(), param.shape(), "adam moment shape drift for `{name}`");
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
