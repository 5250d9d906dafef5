//! Episodic training and evaluation drivers.

use std::collections::BTreeMap;

use crate::episodes::{fold_split, mix64, upsample_bilinear, Episode, EpisodeSampler, GenConfig};
use crate::error::Result;
use crate::metrics::{EpisodeResult, EvalReport, FoldReport, MetricAccumulator, MiouMode};
use crate::seg_head::{AaStats, Model, TrainState};
use crate::tbs::Ablation;

/// Foreground threshold on upsampled probabilities.
pub const PRED_THRESHOLD: f32 = 0.5;

const EVAL_SALT: u64 = 0x6576_616c_5f73_6565;

/// Run seed of the evaluation sampler; disjoint from the training stream.
pub fn eval_run_seed(seed: u64) -> u64 {
    mix64(seed ^ EVAL_SALT)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub fold: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub gen: GenConfig,
    pub ablation: Ablation,
}

impl TrainOptions {
    pub fn sampler(&self) -> Result<EpisodeSampler> {
        let split = fold_split(self.fold)?;
        Ok(EpisodeSampler::new(self.gen.clone().with_classes(&split.train_classes), self.seed))
    }
}

/// Trains from `Model::init(seed)`. `on_step` sees the state after every
/// step together with the step's mean loss.
pub fn train<F>(opts: &TrainOptions, mut on_step: F) -> Result<TrainState>
where
    F: FnMut(&TrainState, f64) -> Result<()>,
{
    let sampler = opts.sampler()?;
    let mut state = TrainState::new(Model::init(opts.seed), opts.ablation);
    for step in 0..opts.steps {
        let first = step * opts.batch as u64;
        let batch = (first..first + opts.batch as u64)
            .map(|i| sampler.episode(i))
            .collect::<Result<Vec<_>>>()?;
        let loss = state.train_step(&batch, opts.lr)?;
        on_step(&state, loss)?;
    }
    Ok(state)
}

/// Produces a 64×64 foreground mask for an episode's query.
pub trait Predictor {
    fn predict(&self, ep: &Episode) -> Result<(Vec<bool>, Option<AaStats>)>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model<f32>,
    pub ablation: Ablation,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, ep: &Episode) -> Result<(Vec<bool>, Option<AaStats>)> {
        let p = self.model.predict(ep, self.ablation)?;
        let mask = upsample_bilinear(&p.probs).iter().map(|&v| v >= PRED_THRESHOLD).collect();
        Ok((mask, Some(p.aa)))
    }
}

/// Returns the ground truth. Test hook for the metric plumbing.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, ep: &Episode) -> Result<(Vec<bool>, Option<AaStats>)> {
        Ok((ep.query.mask.clone(), None))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub fold: usize,
    pub episodes: u64,
    pub gen: GenConfig,
}

impl EvalOptions {
    pub fn sampler(&self) -> Result<EpisodeSampler> {
        let split = fold_split(self.fold)?;
        Ok(EpisodeSampler::new(self.gen.clone().with_classes(&split.test_classes), eval_run_seed(self.seed)))
    }

    /// Seeds of the episodes an evaluation visits, in order.
    pub fn episode_seeds(&self) -> Result<Vec<u64>> {
        let s = self.sampler()?;
        (0..self.episodes).map(|i| s.episode(i).map(|e| e.seed)).collect()
    }
}

pub fn evaluate_with(pred: &dyn Predictor, opts: &EvalOptions) -> Result<MetricAccumulator> {
    let sampler = opts.sampler()?;
    let mut acc = MetricAccumulator::default();
    for i in 0..opts.episodes {
        let ep = sampler.episode(i)?;
        let (mask, aa) = pred.predict(&ep)?;
        acc.add(&EpisodeResult::from_masks(ep.category, &mask, &ep.query.mask)?);
        if let Some(aa) = aa {
            acc.aa.add(&aa);
        }
    }
    Ok(acc)
}

pub fn report(acc: &MetricAccumulator, opts: &EvalOptions, ablation: Ablation) -> Result<EvalReport> {
    let split = fold_split(opts.fold)?;
    let mut per_fold = BTreeMap::new();
    per_fold.insert(opts.fold, FoldReport::from_accumulator(acc, &split.test_classes, MiouMode::Accumulated));
    Ok(EvalReport {
        per_fold,
        episode_count: acc.episodes,
        seed: opts.seed,
        ablation,
    })
}

pub fn evaluate(model: &Model<f32>, opts: &EvalOptions, ablation: Ablation) -> Result<EvalReport> {
    let acc = evaluate_with(&ModelPredictor { model, ablation }, opts)?;
    report(&acc, opts, ablation)
}
