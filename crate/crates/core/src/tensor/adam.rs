use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter in `store`, then zeroes their grads.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first_moment.is_empty() {
            for id in store.ids() {
                let n = store.get(id).numel();
                self.first_moment.push(vec![0.0; n]);
                self.second_moment.push(vec![0.0; n]);
            }
        } else if self.first_moment.len() != store.len() {
            return Err(Error::Contract(
                "optimizer state was built for a different parameter store".into(),
            ));
        }
        let trainable: Vec<_> = store.trainable().collect();
        for &id in &trainable {
            if store.get(id).grad.is_none() {
                return Err(Error::Contract(format!(
                    "parameter {} has no gradient",
                    store.name(id)
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for id in trainable {
            let (m, v) = (
                &mut self.first_moment[id.index()],
                &mut self.second_moment[id.index()],
            );
            let tensor = store.get_mut(id);
            let grad = tensor.grad.take().expect("checked above");
            for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            tensor.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(())
    }
}
