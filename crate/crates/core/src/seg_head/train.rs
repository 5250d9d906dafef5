use super::Model;
use crate::episodes::Episode;
use crate::error::{Result, TbsError};
use crate::params::ParamStore;
use crate::tbs::Ablation;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Adam with bias correction. Moment buffers mirror the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (id, g) in params.ids().zip(grads) {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: Adam,
    pub ablation: Ablation,
}

impl TrainState {
    pub fn new(model: Model<f32>, ablation: Ablation) -> Self {
        let adam = Adam::new(&model.params);
        TrainState { model, adam, ablation }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One Adam step on the mean loss of `batch`. Returns that mean loss.
    pub fn train_step(&mut self, batch: &[Episode], lr: f32) -> Result<f64> {
        if batch.is_empty() {
            return Err(TbsError::Degenerate {
                op: "train_step",
                detail: "empty batch".into(),
            });
        }
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        for ep in batch {
            let (loss, grads) = self.model.loss_and_grads(ep, self.ablation)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TbsError::NonFinite {
                    step: self.adam.step,
                    seed: ep.seed,
                    loss,
                });
            }
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        let scale = 1.0 / batch.len() as f32;
        let grads: Vec<Tensor<f32>> = acc.expect("nonempty batch").iter().map(|g| g.map(|v| v * scale)).collect();
        self.adam.update(&mut self.model.params, &grads, lr);
        Ok(total / batch.len() as f64)
    }
}
