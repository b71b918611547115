use super::batching::{apply_context_drop, cluster_batches, BatchError};
use super::format::{FormatError, Formatter, TaskRecord};
use crate::imagecodec::Codebook;
use crate::model::{adamw_step, AdamWConfig, AdamWState, Example, LossBreakdown, ModelError, ModelParams};
use crate::resolution::StagePlan;
use crate::unirep::MultimodalSequence;
use crate::vocab::VocabManifest;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at stage {stage}, step {step}")]
    Diverged { stage: usize, step: usize },
    #[error("sequence of {len} tokens exceeds the model window of {max_seq}")]
    TooLong { len: usize, max_seq: usize },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub adamw: AdamWConfig,
    pub z_weight: f64,
    /// Probability of dropping the pre-image context of a sequence.
    pub drop_p: f64,
    pub batch_size: usize,
    /// Optimizer steps per stage.
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { adamw: AdamWConfig::default(), z_weight: 1e-5, drop_p: 0.1, batch_size: 8, steps: 100, seed: 0 }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: usize,
    pub step: usize,
    pub ce: f64,
    /// Mean `(log Z)²`.
    pub zloss: f64,
    pub total: f64,
    pub mean_abs_log_z: f64,
    pub max_abs_logit: f64,
    pub positions: usize,
}

impl StepMetrics {
    fn new(stage: usize, step: usize, l: &LossBreakdown) -> Self {
        Self {
            stage,
            step,
            ce: l.ce,
            zloss: l.zloss,
            total: l.total,
            mean_abs_log_z: l.mean_abs_log_z,
            max_abs_logit: l.max_abs_logit,
            positions: l.positions,
        }
    }
}

/// Per-purpose RNG streams derived from one seed.
fn stream(seed: u64, stage: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 8) | purpose);
    rng
}

/// Trains `params` on `dataset` for `hyper.steps` AdamW steps with a fresh
/// optimizer state. Each epoch re-applies context drop, re-clusters by length
/// and shuffles the batch order.
pub fn run_stage(
    params: &mut ModelParams,
    dataset: &[MultimodalSequence],
    stage: usize,
    hyper: &TrainHyper,
) -> Result<Vec<StepMetrics>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let max_seq = params.config.max_seq;
    if let Some(s) = dataset.iter().find(|s| s.len() > max_seq + 1) {
        return Err(TrainError::TooLong { len: s.len(), max_seq });
    }
    let mut drop_rng = stream(hyper.seed, stage, 1);
    let mut order_rng = stream(hyper.seed, stage, 2);
    let mut dropout_rng = stream(hyper.seed, stage, 3);
    let mut opt = AdamWState::new(params);
    let mut metrics = Vec::with_capacity(hyper.steps);

    while metrics.len() < hyper.steps {
        let epoch: Vec<MultimodalSequence> =
            dataset.iter().map(|s| apply_context_drop(s, hyper.drop_p, &mut drop_rng).0).collect();
        let mut batches = cluster_batches(&epoch, hyper.batch_size)?;
        batches.shuffle(&mut order_rng);
        for batch in batches {
            if metrics.len() == hyper.steps {
                break;
            }
            let step = metrics.len();
            let examples = batch.examples();
            let (l, grads) = match params.grad(&examples, hyper.z_weight, Some(dropout_rng.random())) {
                Err(ModelError::NonFiniteLoss) => return Err(TrainError::Diverged { stage, step }),
                Err(ModelError::AllMasked) => continue,
                r => r?,
            };
            if !l.ce.is_finite() {
                return Err(TrainError::Diverged { stage, step });
            }
            adamw_step(params, &grads, &mut opt, &hyper.adamw)?;
            metrics.push(StepMetrics::new(stage, step, &l));
        }
    }
    Ok(metrics)
}

/// Loss of `params` on the undropped dataset, without dropout.
pub fn dataset_loss(params: &ModelParams, dataset: &[MultimodalSequence], z_weight: f64) -> Result<LossBreakdown, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let examples: Vec<Example> = dataset.iter().map(Example::from_sequence).collect();
    Ok(params.eval_loss(&examples, z_weight)?)
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: usize,
    /// Loss on the stage's data before its first update.
    pub initial: LossBreakdown,
    pub metrics: Vec<StepMetrics>,
    /// Weights at the end of the stage.
    pub params: ModelParams,
}

/// Runs every stage of `plan` in order, formatting `records` with each
/// stage's buckets and handing the weights from one stage to the next.
pub fn run_progressive(
    params: &mut ModelParams,
    manifest: &VocabManifest,
    codebook: &Codebook,
    plan: &StagePlan,
    records: &[TaskRecord],
    hyper: &TrainHyper,
) -> Result<Vec<StageResult>, TrainError> {
    let mut out = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        let fmt = Formatter { manifest, codebook, buckets: &stage.buckets };
        let data = records.iter().map(|r| fmt.format_task(r)).collect::<Result<Vec<_>, _>>()?;
        let initial = dataset_loss(params, &data, hyper.z_weight)?;
        let metrics = run_stage(params, &data, i, hyper)?;
        out.push(StageResult { stage: i, initial, metrics, params: params.clone() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::batching::dummy_sequence;
    use crate::training::synthetic::{color_codebook, color_records, desk_manifest};

    fn tiny(vocab: usize, max_seq: usize) -> ModelParams {
        ModelParams::init(&ModelConfig::new(1, 2, 16, vocab, max_seq).with_seed(3)).unwrap()
    }

    #[test]
    fn zero_lr_only_decays() {
        let data: Vec<_> = (5..9).map(dummy_sequence).collect();
        let p0 = tiny(20, 16);
        let mut hyper = TrainHyper { steps: 3, batch_size: 2, ..Default::default() };
        hyper.adamw.lr = 0.0;
        let mut p = p0.clone();
        let m = run_stage(&mut p, &data, 0, &hyper).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(p, p0);

        hyper.adamw.weight_decay = 0.0;
        let mut p = p0.clone();
        run_stage(&mut p, &data, 0, &hyper).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn errors() {
        let mut p = tiny(20, 4);
        let hyper = TrainHyper::default();
        assert!(matches!(run_stage(&mut p, &[], 0, &hyper), Err(TrainError::EmptyDataset)));
        assert!(matches!(run_stage(&mut p, &[dummy_sequence(9)], 0, &hyper), Err(TrainError::TooLong { .. })));
    }

    #[test]
    fn progressive_tags_stages_in_order() {
        let manifest = desk_manifest();
        let codebook = color_codebook(manifest.patch_px);
        let plan = StagePlan::generate(&[16 * 16, 24 * 24, 32 * 32], 8, 16, 0.15, crate::resolution::AspectRange::new(1.0, 1.0))
            .unwrap();
        let records = color_records(32, 32);
        let mut p = ModelParams::init(&ModelConfig::new(1, 2, 16, manifest.total() as usize, 128).with_seed(1)).unwrap();
        let hyper = TrainHyper { steps: 2, batch_size: 4, adamw: AdamWConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
        let res = run_progressive(&mut p, &manifest, &codebook, &plan, &records, &hyper).unwrap();
        let tags: Vec<usize> = res.iter().flat_map(|r| r.metrics.iter().map(|m| m.stage)).collect();
        assert_eq!(tags, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(res[2].params, p);
        assert!(res.iter().all(|r| r.initial.ce.is_finite()));
    }

    #[test]
    fn memorizes_color_set() {
        let manifest = desk_manifest();
        let codebook = color_codebook(manifest.patch_px);
        let buckets = [crate::resolution::ResolutionBucket::new(16, 16)];
        let fmt = Formatter { manifest: &manifest, codebook: &codebook, buckets: &buckets };
        let data: Vec<_> = color_records(16, 16).iter().map(|r| fmt.format_task(r).unwrap()).collect();
        let mut p = ModelParams::init(&ModelConfig::new(1, 2, 16, manifest.total() as usize, 96).with_seed(2)).unwrap();
        let hyper = TrainHyper {
            steps: 200,
            batch_size: 8,
            drop_p: 0.0,
            adamw: AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..Default::default() },
            ..Default::default()
        };
        let m = run_stage(&mut p, &data, 0, &hyper).unwrap();
        assert_eq!(m.len(), 200);
        assert!(m[199].ce < m[0].ce * 0.5, "{} -> {}", m[0].ce, m[199].ce);
    }
}
