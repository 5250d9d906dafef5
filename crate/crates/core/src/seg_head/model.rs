use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{predict_mask, AaStats, HeadParams};
use crate::episodes::{extract_features, EncoderParams, Episode, FEAT_CHANNELS};
use crate::error::{Result, TbsError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tbs::{tbs_forward, Ablation, TbsParams, TbsTrace};
use crate::tensor::{Scalar, Tensor};

/// Where each layer lives in the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub encoder: EncoderParams,
    pub tbs: TbsParams,
    pub head: HeadParams,
}

impl ModelSpec {
    fn init<T: Scalar>(store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(store, &mut rng);
        let tbs = TbsParams::init(store, FEAT_CHANNELS, &mut rng);
        let head = HeadParams::init(store, FEAT_CHANNELS, &mut rng);
        ModelSpec { encoder, tbs, head }
    }
}

/// Encoder, suppression module and head with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

/// Tape handles for one episode's forward pass.
pub struct Forward {
    pub fq: Var,
    /// Per shot: support features, feature-resolution mask, suppression trace.
    pub shots: Vec<(Var, Vec<bool>, TbsTrace)>,
    pub probs: Var,
    pub attn: Var,
    pub loss: Var,
    pub query_mask: Vec<bool>,
}

impl Forward {
    pub fn support_mask(&self) -> Vec<bool> {
        self.shots.iter().flat_map(|(_, m, _)| m.iter().copied()).collect()
    }
}

/// Forward results read back from the tape.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// 8×8 foreground probabilities.
    pub probs: Vec<f32>,
    pub attn: Tensor<f32>,
    pub loss: f64,
    pub aa: AaStats,
}

impl Prediction {
    /// Binary 8×8 mask at threshold 0.5.
    pub fn mask(&self) -> Vec<bool> {
        self.probs.iter().map(|&p| p >= 0.5).collect()
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let spec = ModelSpec::init(&mut params, seed);
        Model { spec, params }
    }

    /// Rebuilds the layer layout around loaded parameters. Names and shapes
    /// must match a freshly initialized model.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let reference = Model::<T>::init(0);
        if reference.params.len() != params.len() {
            return Err(TbsError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(TbsError::Checkpoint(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(Model {
            spec: reference.spec,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            params: self.params.cast(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, ep: &Episode, ablation: Ablation) -> Result<Forward> {
        let qimg = g.constant(ep.query.image.cast());
        let fq = extract_features(g, b, &self.spec.encoder, qimg)?;
        let mut shots = Vec::with_capacity(ep.supports.len());
        for s in &ep.supports {
            let img = g.constant(s.image.cast());
            let fs = extract_features(g, b, &self.spec.encoder, img)?;
            let mask = s.mask_feat();
            let trace = tbs_forward(g, b, &self.spec.tbs, fq, fs, &mask, ablation)?;
            shots.push((fs, mask, trace));
        }
        let adapted: Vec<(Var, &[bool])> = shots.iter().map(|(_, m, t)| (t.adapted, m.as_slice())).collect();
        let head = predict_mask(g, b, &self.spec.head, fq, &adapted)?;
        let query_mask = ep.query.mask_feat();
        let target = Tensor::from_fn(&[query_mask.len()], |i| if query_mask[i] { T::one() } else { T::zero() });
        let loss = g.bce_loss(head.probs, target)?;
        Ok(Forward {
            fq,
            shots,
            probs: head.probs,
            attn: head.attn,
            loss,
            query_mask,
        })
    }

    /// Loss and one gradient tensor per parameter (zeros where the loss does
    /// not depend on it).
    pub fn loss_and_grads(&self, ep: &Episode, ablation: Ablation) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        self.loss_and_grads_on(&mut g, ep, ablation)
    }

    #[doc(hidden)]
    pub fn loss_and_grads_on(
        &self,
        g: &mut Graph<T>,
        ep: &Episode,
        ablation: Ablation,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let b = self.params.bind(g);
        let fwd = self.forward(g, &b, ep, ablation)?;
        let loss = g.value(fwd.loss).data()[0].as_f64();
        let mut grads = g.backward(fwd.loss)?;
        let out = self
            .params
            .ids()
            .map(|id| {
                grads
                    .take(b.var(id))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect();
        Ok((loss, out))
    }

    pub fn loss(&self, ep: &Episode, ablation: Ablation) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &b, ep, ablation)?;
        Ok(g.value(fwd.loss).data()[0].as_f64())
    }

    pub fn predict(&self, ep: &Episode, ablation: Ablation) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &b, ep, ablation)?;
        let attn: Tensor<f32> = g.value(fwd.attn).cast();
        let aa = super::averaged_attention(&attn, &fwd.query_mask, &fwd.support_mask())?;
        Ok(Prediction {
            probs: g.value(fwd.probs).data().iter().map(|v| v.as_f64() as f32).collect(),
            attn,
            loss: g.value(fwd.loss).data()[0].as_f64(),
            aa,
        })
    }

    pub fn tbs_param_ids(&self) -> Vec<ParamId> {
        self.spec.tbs.param_ids()
    }
}
