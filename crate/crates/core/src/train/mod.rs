//! Training loop for S+T, naive pseudo-labeling and prior-guided refinement.
//!
//! Each iteration updates the semi-supervised head `h` (and the extractor, when it
//! is learnable) from `L_l + mu(t) * L_u`, and, for PGPR, independently updates the
//! prior head on the labeled batch alone with the extractor output held fixed.

mod config;
mod step;

pub use config::{AugmentConfig, ExtractorConfig, Method, TrainConfig};
pub use step::{
    draw_inputs, compute_step, LabeledBatch, StepComputation, StepInputs, StepReport, TrainState,
    UnlabeledBatch,
};

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{class_groups, ClassGroups, Domain, FeatureDataset, LabelSpaceConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, SplitKind};
use crate::model::{
    argmax, forward, softmax_rows, ClassifierParams, DomainMasks, InferenceModel,
};
use crate::pgpr::{refine_with, RefinementLog, RefinementResult, RefinementSteps};
use crate::rng::{self, StreamRng};

/// `mu(t) = 1/2 - 1/2 * cos(min(pi, pi * t / T))`.
pub fn warmup_weight(t: usize, warmup_steps: u64) -> f64 {
    let phase = (std::f64::consts::PI * t as f64 / warmup_steps as f64).min(std::f64::consts::PI);
    0.5 - 0.5 * phase.cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Feature-space augmentation. Weak adds Gaussian noise; strong adds (larger)
/// Gaussian noise and then inverted dropout.
pub fn augment(
    features: ArrayView2<f64>,
    kind: AugmentKind,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let (sigma, rate) = match kind {
        AugmentKind::Weak => (cfg.weak_noise_sigma, 0.0),
        AugmentKind::Strong => (cfg.strong_noise_sigma, cfg.strong_dropout_rate),
    };
    let mut out = features.to_owned();
    if sigma > 0.0 {
        out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    if rate > 0.0 {
        let keep_scale = 1.0 / (1.0 - rate);
        out.mapv_inplace(|v| if rng.gen::<f64>() < rate { 0.0 } else { v * keep_scale });
    }
    out
}

/// Confidence-dependent weights: 1 at or above `c_tau`, 1/2 below.
pub fn pseudo_label_weights(refined: &[RefinementResult], c_tau: f64) -> Vec<f64> {
    refined
        .iter()
        .map(|r| if r.confidence >= c_tau { 1.0 } else { 0.5 })
        .collect()
}

/// Weighted mean cross-entropy of the strong-view predictions against the hard
/// pseudo-labels. Returns the loss and the per-sample weights.
pub fn unlabeled_loss(
    refined: &[RefinementResult],
    strong_probs: &Array2<f64>,
    c_tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if refined.len() != strong_probs.nrows() {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {} strong predictions",
            refined.len(),
            strong_probs.nrows()
        )));
    }
    let weights = pseudo_label_weights(refined, c_tau);
    if refined.is_empty() {
        return Ok((0.0, weights));
    }
    let total: f64 = refined
        .iter()
        .zip(strong_probs.rows())
        .zip(&weights)
        .map(|((r, p), w)| -w * p[r.pseudo_label].ln())
        .sum();
    Ok((total / refined.len() as f64, weights))
}

/// Training data split into the pools the sampler draws from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: FeatureDataset,
    /// Target domain after splitting and k-shot labeling.
    pub target: FeatureDataset,
    pub label_space: LabelSpaceConfig,
    pub groups: ClassGroups,
    pub masks: DomainMasks,
    labeled_source: Vec<usize>,
    labeled_target: Vec<usize>,
    unlabeled_target: Vec<usize>,
}

impl TrainData {
    pub fn new(source: FeatureDataset, target: FeatureDataset, label_space: LabelSpaceConfig) -> Result<Self> {
        if source.domain != Domain::Source || target.domain != Domain::Target {
            return Err(Error::Data("expected a source and a target dataset".into()));
        }
        if source.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "source has {} features, target {}",
                source.dim(),
                target.dim()
            )));
        }
        source.check_label_set(&label_space.source_classes)?;
        target.check_label_set(&label_space.target_classes)?;
        let masks = DomainMasks::from_label_space(&label_space)?;
        let groups = class_groups(&label_space);
        let labeled_source = source.indices(None, None);
        let labeled_target = target.indices(Some(Split::Train), Some(true));
        let unlabeled_target = target.indices(Some(Split::Train), Some(false));
        if labeled_source.is_empty() && labeled_target.is_empty() {
            return Err(Error::Data("no labeled samples".into()));
        }
        Ok(TrainData {
            source,
            target,
            label_space,
            groups,
            masks,
            labeled_source,
            labeled_target,
            unlabeled_target,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn unlabeled_target(&self) -> FeatureDataset {
        self.target.subset(&self.unlabeled_target)
    }

    pub fn test_target(&self) -> FeatureDataset {
        SplitKind::InductiveTest.select(&self.target)
    }
}

/// Endless shuffled pass over a fixed index set; reshuffles when exhausted.
#[derive(Debug, Clone)]
struct CyclingSampler {
    items: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl CyclingSampler {
    fn new(items: Vec<usize>, mut rng: StreamRng) -> Self {
        let mut items = items;
        items.shuffle(&mut rng);
        CyclingSampler { items, pos: 0, rng }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                if self.pos == self.items.len() {
                    self.items.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.items[self.pos - 1]
            })
            .collect()
    }
}

/// Labeled pool entries are `(domain, index)`.
struct BatchSource {
    labeled: CyclingSampler,
    pooled: Vec<(Domain, usize)>,
    split: Option<(f64, CyclingSampler, CyclingSampler, StreamRng)>,
    unlabeled: CyclingSampler,
}

impl BatchSource {
    fn new(cfg: &TrainConfig, data: &TrainData) -> Self {
        let pooled: Vec<(Domain, usize)> = data
            .labeled_source
            .iter()
            .map(|&i| (Domain::Source, i))
            .chain(data.labeled_target.iter().map(|&i| (Domain::Target, i)))
            .collect();
        let split = cfg.labeled_target_fraction.map(|f| {
            (
                f,
                CyclingSampler::new(data.labeled_source.clone(), rng::stream(cfg.seed, "batch/labeled/source")),
                CyclingSampler::new(data.labeled_target.clone(), rng::stream(cfg.seed, "batch/labeled/target")),
                rng::stream(cfg.seed, "batch/labeled/mix"),
            )
        });
        BatchSource {
            labeled: CyclingSampler::new((0..pooled.len()).collect(), rng::stream(cfg.seed, "batch/labeled")),
            pooled,
            split,
            unlabeled: CyclingSampler::new(data.unlabeled_target.clone(), rng::stream(cfg.seed, "batch/unlabeled")),
        }
    }

    fn labeled(&mut self, n: usize, data: &TrainData) -> LabeledBatch {
        let picks: Vec<(Domain, usize)> = match &mut self.split {
            None => self.labeled.next_batch(n).into_iter().map(|i| self.pooled[i]).collect(),
            Some((fraction, src, trg, mix)) => (0..n)
                .map(|_| {
                    let use_target = !trg.items.is_empty()
                        && (src.items.is_empty() || mix.gen::<f64>() < *fraction);
                    if use_target {
                        (Domain::Target, trg.next_batch(1)[0])
                    } else {
                        (Domain::Source, src.next_batch(1)[0])
                    }
                })
                .collect(),
        };
        let d = data.dim();
        let mut features = Array2::zeros((picks.len(), d));
        let mut labels = Vec::with_capacity(picks.len());
        let mut domains = Vec::with_capacity(picks.len());
        for (row, &(domain, i)) in picks.iter().enumerate() {
            let ds = match domain {
                Domain::Source => &data.source,
                Domain::Target => &data.target,
            };
            features.row_mut(row).assign(&ds.features.row(i));
            labels.push(ds.class_ids[i]);
            domains.push(domain);
        }
        LabeledBatch {
            features,
            labels,
            domains,
        }
    }

    fn unlabeled(&mut self, n: usize, data: &TrainData) -> UnlabeledBatch {
        let idx = self.unlabeled.next_batch(n);
        UnlabeledBatch {
            features: data.target.features.select(ndarray::Axis(0), &idx),
            truths: idx.iter().map(|&i| data.target.class_ids[i]).collect(),
        }
    }
}

/// One logged iteration. `iteration` is the step index just taken; metrics are
/// measured after its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    pub mu: f64,
    pub c_tau: Option<f64>,
    /// Over all unlabeled training targets, pseudo-labeled with the current heads.
    pub pseudo_label_accuracy: Option<f64>,
    pub fraction_above_threshold: Option<f64>,
    /// The retained model on the unlabeled training targets.
    pub transductive: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainHistory { records })
    }
}

/// Fraction of pseudo-labels that match the held-out ground truth.
pub fn pseudo_label_accuracy(results: &[RefinementResult], truths: &[usize]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .zip(truths)
        .filter(|(r, &t)| r.pseudo_label == t)
        .count();
    hits as f64 / results.len() as f64
}

/// Pseudo-labels the current heads would assign to `features` (no augmentation).
/// `None` for S+T, which has no pseudo-labels.
pub fn pseudo_label_snapshot(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    features: ArrayView2<f64>,
) -> Result<Option<Vec<RefinementResult>>> {
    let steps = match cfg.method {
        Method::SPlusT => return Ok(None),
        Method::NaivePseudoLabel => RefinementSteps::NONE,
        Method::Pgpr => cfg.refinement,
    };
    let z = state.extractor.forward(features)?;
    let p = softmax_rows(&forward(&state.head, z.view(), &data.masks.target)?)?;
    let prior = match &state.prior {
        Some(prior) => softmax_rows(&forward(prior, z.view(), &data.masks.target)?)?,
        None => p.clone(),
    };
    let mut out = Vec::with_capacity(p.nrows());
    for (pu, pr) in p.rows().into_iter().zip(prior.rows()) {
        let mut r = refine_with(
            pu.as_slice().expect("standard layout"),
            pr.as_slice().expect("standard layout"),
            &data.groups,
            steps,
        )?;
        r.above_threshold = state.threshold_value(cfg).map(|c| r.confidence >= c);
        out.push(r);
    }
    Ok(Some(out))
}

/// Result of a full training run; the prior head is not part of the returned model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: InferenceModel,
    pub history: TrainHistory,
}

/// Trains from the config seed. Fails with [`Error::Numerical`] if a loss turns
/// non-finite.
pub fn run(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    let (state, history) = run_with_state(cfg, data, None)?;
    Ok(TrainOutcome {
        model: state.into_inference_model(),
        history,
    })
}

/// Like [`run`] but returns the final state, prior head included, and can stream
/// the pseudo-labels of every step's unlabeled batch.
pub fn run_with_state(
    cfg: &TrainConfig,
    data: &TrainData,
    mut refinement_log: Option<&mut RefinementLog>,
) -> Result<(TrainState, TrainHistory)> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg, data)?;
    let mut batches = BatchSource::new(cfg, data);
    let uses_unlabeled = cfg.method != Method::SPlusT;
    let unlabeled_pool = data.unlabeled_target();
    let mut history = TrainHistory::default();

    for t in 0..cfg.iterations {
        let labeled = batches.labeled(cfg.batch_labeled, data);
        let unlabeled = if uses_unlabeled {
            batches.unlabeled(cfg.batch_unlabeled, data)
        } else {
            UnlabeledBatch::empty(data.dim())
        };
        let report = state.step(cfg, data, &labeled, &unlabeled)?;
        if let Some(log) = refinement_log.as_deref_mut() {
            for (i, r) in report.refinements.iter().enumerate() {
                log.record(t, i, r)?;
            }
        }

        let last = t + 1 == cfg.iterations;
        if cfg.log_interval > 0 && (t % cfg.log_interval == 0 || last) {
            history.records.push(log_record(&state, cfg, data, &unlabeled_pool, &report)?);
        }
    }
    if let Some(log) = refinement_log {
        log.flush()?;
    }
    Ok((state, history))
}

fn log_record(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    unlabeled_pool: &FeatureDataset,
    report: &StepReport,
) -> Result<HistoryRecord> {
    let model = state.inference_model();
    let transductive = evaluate(
        &model,
        unlabeled_pool,
        &data.groups,
        &data.masks.target,
        SplitKind::TransductiveUnlabeledTrain,
    )?;
    let snapshot = pseudo_label_snapshot(state, cfg, data, unlabeled_pool.features.view())?;
    let (pl_acc, above) = match &snapshot {
        Some(results) => (
            Some(pseudo_label_accuracy(results, &unlabeled_pool.class_ids)),
            Some(
                results.iter().filter(|r| r.above_threshold == Some(true)).count() as f64
                    / results.len().max(1) as f64,
            ),
        ),
        None => (None, None),
    };
    Ok(HistoryRecord {
        iteration: report.iteration,
        labeled_loss: report.labeled_loss,
        unlabeled_loss: report.unlabeled_loss,
        mu: report.mu,
        c_tau: report.c_tau,
        pseudo_label_accuracy: pl_acc,
        fraction_above_threshold: above,
        transductive,
    })
}

/// Predictions of a bare head on raw features under `mask`.
pub fn head_predictions(
    head: &ClassifierParams,
    x: ArrayView2<f64>,
    mask: &crate::model::LogitMask,
) -> Result<Vec<usize>> {
    let p = softmax_rows(&forward(head, x, mask)?)?;
    Ok(p.rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("standard layout")))
        .collect())
}

#[cfg(test)]
mod tests;
