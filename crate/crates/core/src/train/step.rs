use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{augment, pseudo_label_weights, warmup_weight, AugmentKind, ExtractorConfig, Method, TrainConfig, TrainData};
use crate::datagen::Domain;
use crate::error::{Error, Result};
use crate::model::{
    ce_from_logits, ce_full, forward, forward_rows, sgd_step, softmax_rows, ClassifierParams,
    FeatureExtractor, HeadGrads, InferenceModel, LogitMask, OptimizerState, Parameters, RowMasks, TanhGrads,
    TanhLayer, MASK_SENTINEL,
};
use crate::pgpr::{refine_with, RefinementResult, RefinementSteps, ThresholdEstimator};
use crate::rng::{self, StreamRng};

const STD_FLOOR: f64 = 1e-6;

/// Parameters larger than this in magnitude count as diverged; logits would
/// otherwise approach the mask sentinel.
pub const DIVERGENCE_LIMIT: f64 = 1e20;

fn diverged<P: Parameters + ?Sized>(params: &P) -> bool {
    params
        .tensors()
        .iter()
        .any(|t| t.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub features: Array2<f64>,
    /// Held out from every loss; used only for diagnostics.
    pub truths: Vec<usize>,
}

impl UnlabeledBatch {
    pub fn empty(dim: usize) -> Self {
        UnlabeledBatch {
            features: Array2::zeros((0, dim)),
            truths: Vec::new(),
        }
    }
}

/// Augmented views and the interpolation weight for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub labeled_weak: Array2<f64>,
    /// Labeled features re-standardized from labeled+unlabeled statistics to
    /// labeled-only statistics; present with logit interpolation.
    pub labeled_alt: Option<Array2<f64>>,
    pub lambda: Option<f64>,
    pub unlabeled_weak: Array2<f64>,
    pub unlabeled_strong: Array2<f64>,
}

/// Everything one step computes before any parameter moves.
#[derive(Debug, Clone)]
pub struct StepComputation {
    pub mu: f64,
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    /// Gradient of `L_l`, weight decay included.
    pub head_labeled: HeadGrads,
    /// Gradient of `L_u`, no weight decay.
    pub head_unlabeled: HeadGrads,
    /// `head_labeled + mu * head_unlabeled`.
    pub head_total: HeadGrads,
    pub prior_grads: Option<HeadGrads>,
    pub extractor_grads: Option<TanhGrads>,
    pub c_tau: Option<f64>,
    pub threshold: ThresholdEstimator,
    pub refinements: Vec<RefinementResult>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    pub mu: f64,
    pub c_tau: Option<f64>,
    pub refinements: Vec<RefinementResult>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub extractor: FeatureExtractor,
    pub head: ClassifierParams,
    /// Prior head; PGPR only.
    pub prior: Option<ClassifierParams>,
    pub head_opt: OptimizerState,
    pub prior_opt: Option<OptimizerState>,
    pub extractor_opt: Option<OptimizerState>,
    pub threshold: ThresholdEstimator,
    /// Number of completed steps.
    pub iteration: usize,
    augment_labeled: StreamRng,
    augment_unlabeled: StreamRng,
    interp: StreamRng,
}

impl TrainState {
    /// Fresh parameters from the config seed's `init` streams.
    pub fn new(cfg: &TrainConfig, data: &TrainData) -> Result<Self> {
        let (c, d) = (data.num_classes(), data.dim());
        let extractor = match cfg.extractor {
            ExtractorConfig::Identity => FeatureExtractor::Identity,
            ExtractorConfig::Tanh { width } => {
                FeatureExtractor::Tanh(TanhLayer::init(d, width, &mut rng::stream(cfg.seed, "init/extractor")))
            }
        };
        let dz = extractor.output_dim(d);
        let head = ClassifierParams::init(c, dz, cfg.temperature, cfg.cosine_mode, &mut rng::stream(cfg.seed, "init"))?;
        let prior = match cfg.method {
            Method::Pgpr => Some(ClassifierParams::init(
                c,
                dz,
                cfg.temperature,
                cfg.cosine_mode,
                &mut rng::stream(cfg.seed, "init/prior"),
            )?),
            _ => None,
        };
        let extractor_opt = match &extractor {
            FeatureExtractor::Tanh(layer) => Some(OptimizerState::new(cfg.extractor_optimizer, layer)),
            FeatureExtractor::Identity => None,
        };
        Ok(TrainState {
            head_opt: OptimizerState::new(cfg.head_optimizer, &head),
            prior_opt: prior.as_ref().map(|p| OptimizerState::new(cfg.prior_optimizer, p)),
            extractor_opt,
            threshold: ThresholdEstimator::new(cfg.tau, c, cfg.threshold_ema)?,
            extractor,
            head,
            prior,
            iteration: 0,
            augment_labeled: rng::stream(cfg.seed, "augment/labeled"),
            augment_unlabeled: rng::stream(cfg.seed, "augment/unlabeled"),
            interp: rng::stream(cfg.seed, "interp"),
        })
    }

    pub fn inference_model(&self) -> InferenceModel {
        InferenceModel {
            extractor: self.extractor.clone(),
            head: self.head.clone(),
        }
    }

    /// Drops the prior head.
    pub fn into_inference_model(self) -> InferenceModel {
        InferenceModel {
            extractor: self.extractor,
            head: self.head,
        }
    }

    /// Threshold separating full-weight from half-weight pseudo-labels.
    pub fn threshold_value(&self, cfg: &TrainConfig) -> Option<f64> {
        match cfg.method {
            Method::SPlusT => None,
            Method::NaivePseudoLabel => Some(cfg.tau),
            Method::Pgpr => Some(self.threshold.current()),
        }
    }

    /// Draws augmentations, computes all gradients, then updates every head.
    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        data: &TrainData,
        labeled: &LabeledBatch,
        unlabeled: &UnlabeledBatch,
    ) -> Result<StepReport> {
        let inputs = draw_inputs(self, cfg, labeled, unlabeled);
        let comp = compute_step(self, cfg, data, labeled, &inputs)?;
        self.apply(comp)
    }

    fn numerical_error(&self, labeled_loss: f64, unlabeled_loss: f64, mu: f64) -> Error {
        let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        Error::Numerical {
            iteration: self.iteration,
            detail: format!(
                "labeled loss {labeled_loss}, unlabeled loss {unlabeled_loss}, mu {mu}, head weight norm {}, prior weight norm {:?}",
                norm(&self.head.weights),
                self.prior.as_ref().map(|p| norm(&p.weights)),
            ),
        }
    }

    fn apply(&mut self, comp: StepComputation) -> Result<StepReport> {
        let t = self.iteration;
        if !comp.labeled_loss.is_finite() || !comp.unlabeled_loss.is_finite() {
            return Err(self.numerical_error(comp.labeled_loss, comp.unlabeled_loss, comp.mu));
        }
        sgd_step(&mut self.head, &comp.head_total, &mut self.head_opt, t);
        if let (Some(prior), Some(opt), Some(g)) = (&mut self.prior, &mut self.prior_opt, &comp.prior_grads) {
            sgd_step(prior, g, opt, t);
        }
        if let (FeatureExtractor::Tanh(layer), Some(opt), Some(g)) =
            (&mut self.extractor, &mut self.extractor_opt, &comp.extractor_grads)
        {
            sgd_step(layer, g, opt, t);
        }
        let head_bad = diverged(&self.head);
        let prior_bad = self.prior.as_ref().is_some_and(diverged);
        let extractor_bad = matches!(&self.extractor, FeatureExtractor::Tanh(l) if diverged(l));
        if head_bad || prior_bad || extractor_bad {
            return Err(Error::Numerical {
                iteration: t,
                detail: format!(
                    "parameters left [-{DIVERGENCE_LIMIT:e}, {DIVERGENCE_LIMIT:e}] after the update (head {head_bad}, prior {prior_bad}, extractor {extractor_bad}); labeled loss {}, unlabeled loss {}",
                    comp.labeled_loss, comp.unlabeled_loss
                ),
            });
        }
        self.threshold = comp.threshold;
        self.iteration += 1;
        Ok(StepReport {
            iteration: t,
            labeled_loss: comp.labeled_loss,
            unlabeled_loss: comp.unlabeled_loss,
            mu: comp.mu,
            c_tau: comp.c_tau,
            refinements: comp.refinements,
        })
    }
}

fn column_stats(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
    (mean, std)
}

/// Maps labeled features from the labeled-only batch statistics onto the
/// labeled+unlabeled statistics, column by column.
fn restandardize(labeled: &Array2<f64>, unlabeled: &Array2<f64>) -> Array2<f64> {
    if labeled.nrows() == 0 {
        return labeled.clone();
    }
    let combined = ndarray::concatenate(Axis(0), &[labeled.view(), unlabeled.view()]).expect("same width");
    let (ml, sl) = column_stats(labeled.view());
    let (mc, sc) = column_stats(combined.view());
    (labeled - &ml) / &sl * &sc + &mc
}

/// Consumes the state's augmentation and interpolation streams.
pub fn draw_inputs(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
) -> StepInputs {
    let aug = &cfg.augmentation;
    let labeled_weak = augment(labeled.features.view(), AugmentKind::Weak, aug, &mut state.augment_labeled);
    let unlabeled_weak = augment(unlabeled.features.view(), AugmentKind::Weak, aug, &mut state.augment_unlabeled);
    let unlabeled_strong = augment(unlabeled.features.view(), AugmentKind::Strong, aug, &mut state.augment_unlabeled);
    let (labeled_alt, lambda) = if cfg.logit_interpolation {
        let lambda: f64 = state.interp.gen();
        (Some(restandardize(&labeled_weak, &unlabeled_weak)), Some(lambda))
    } else {
        (None, None)
    };
    StepInputs {
        labeled_weak,
        labeled_alt,
        lambda,
        unlabeled_weak,
        unlabeled_strong,
    }
}

fn tanh_grads(layer: &TanhLayer, x: ArrayView2<f64>, d_out: &Array2<f64>) -> TanhGrads {
    let out = layer.forward(x);
    layer.backward(x, &out, d_out)
}

fn remask(logits: &mut Array2<f64>, masks: RowMasks<'_>) {
    for (n, mut row) in logits.rows_mut().into_iter().enumerate() {
        for (v, &ok) in row.iter_mut().zip(masks.get(n).as_slice()) {
            if !ok {
                *v = MASK_SENTINEL;
            }
        }
    }
}

/// Losses and gradients of one step at the current parameters. Pure apart from
/// reading `state`.
pub fn compute_step(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    labeled: &LabeledBatch,
    inputs: &StepInputs,
) -> Result<StepComputation> {
    let t = state.iteration;
    let mu = warmup_weight(t, cfg.warmup_t);
    let row_masks: Vec<&LogitMask> = labeled.domains.iter().map(|&d| data.masks.for_domain(d)).collect();
    let masks = RowMasks::PerRow(&row_masks);
    let head = &state.head;
    let tanh = match &state.extractor {
        FeatureExtractor::Tanh(l) => Some(l),
        FeatureExtractor::Identity => None,
    };
    let mut extractor_grads = tanh.map(|l| TanhGrads {
        weights: Array2::zeros(l.weights.raw_dim()),
        bias: Array1::zeros(l.bias.len()),
    });
    let mut add_extractor = |x: ArrayView2<f64>, d_out: &Array2<f64>, scale: f64| {
        if let (Some(layer), Some(acc)) = (tanh, extractor_grads.as_mut()) {
            let g = tanh_grads(layer, x, d_out);
            acc.weights.scaled_add(scale, &g.weights);
            acc.bias.scaled_add(scale, &g.bias);
        }
    };

    // Labeled loss on the weak view, optionally with interpolated logits.
    let zl = state.extractor.forward(inputs.labeled_weak.view())?;
    let (labeled_loss, mut head_labeled, labeled_probs) = match (&inputs.labeled_alt, inputs.lambda) {
        (Some(alt), Some(lambda)) => {
            let z_alt = state.extractor.forward(alt.view())?;
            let g = forward_rows(head, zl.view(), masks)?;
            let g_alt = forward_rows(head, z_alt.view(), masks)?;
            let mut mixed = &g * lambda + &g_alt * (1.0 - lambda);
            remask(&mut mixed, masks);
            let (loss, dlogits) = ce_from_logits(&mixed, &labeled.labels, None)?;
            let (mut grads, dz) = head.backward(&zl.view(), &(&dlogits * lambda));
            let (grads_alt, dz_alt) = head.backward(&z_alt.view(), &(&dlogits * (1.0 - lambda)));
            grads.add_scaled(&grads_alt, 1.0);
            add_extractor(inputs.labeled_weak.view(), &dz, 1.0);
            add_extractor(alt.view(), &dz_alt, 1.0);
            (loss, grads, softmax_rows(&mixed)?)
        }
        _ => {
            let out = ce_full(head, zl.view(), &labeled.labels, None, masks, 0.0)?;
            add_extractor(inputs.labeled_weak.view(), &out.d_features, 1.0);
            let probs = softmax_rows(&forward_rows(head, zl.view(), masks)?)?;
            (out.loss, out.grads, probs)
        }
    };
    if !labeled_loss.is_finite() {
        return Err(state.numerical_error(labeled_loss, f64::NAN, mu));
    }
    let wd = state.head_opt.config.weight_decay;
    if wd != 0.0 {
        head_labeled.weights.scaled_add(wd, &head.weights);
        head_labeled.bias.scaled_add(wd, &head.bias);
    }

    let mut threshold = state.threshold.clone();
    let c_tau = match cfg.method {
        Method::SPlusT => None,
        Method::NaivePseudoLabel => Some(cfg.tau),
        Method::Pgpr => {
            let maxes: Vec<f64> = labeled_probs
                .rows()
                .into_iter()
                .map(|r| r.iter().copied().fold(0.0, f64::max))
                .collect();
            Some(threshold.update(&maxes)?)
        }
    };

    let mut head_unlabeled = HeadGrads::zeros(head.num_classes(), head.dim());
    let mut unlabeled_loss = 0.0;
    let mut refinements = Vec::new();
    let mut weights = Vec::new();
    if let (Some(c_tau), true) = (c_tau, inputs.unlabeled_weak.nrows() > 0) {
        let target = &data.masks.target;
        let zu = state.extractor.forward(inputs.unlabeled_weak.view())?;
        let p_u = softmax_rows(&forward(head, zu.view(), target)?)?;
        let (prior_probs, steps) = match (&state.prior, cfg.method) {
            (Some(prior), Method::Pgpr) => (softmax_rows(&forward(prior, zu.view(), target)?)?, cfg.refinement),
            _ => (p_u.clone(), RefinementSteps::NONE),
        };
        for (pu, pr) in p_u.rows().into_iter().zip(prior_probs.rows()) {
            let mut r = refine_with(
                pu.as_slice().expect("standard layout"),
                pr.as_slice().expect("standard layout"),
                &data.groups,
                steps,
            )?;
            r.above_threshold = Some(r.confidence >= c_tau);
            refinements.push(r);
        }
        weights = pseudo_label_weights(&refinements, c_tau);
        let pseudo: Vec<usize> = refinements.iter().map(|r| r.pseudo_label).collect();
        let zs = state.extractor.forward(inputs.unlabeled_strong.view())?;
        let out = ce_full(head, zs.view(), &pseudo, Some(&weights), RowMasks::Shared(target), 0.0)?;
        add_extractor(inputs.unlabeled_strong.view(), &out.d_features, mu);
        unlabeled_loss = out.loss;
        head_unlabeled = out.grads;
    }

    let mut head_total = head_labeled.clone();
    head_total.add_scaled(&head_unlabeled, mu);

    // The prior head sees the extractor output as a constant.
    let prior_grads = match (&state.prior, &state.prior_opt) {
        (Some(prior), Some(opt)) => Some(
            ce_full(prior, zl.view(), &labeled.labels, None, masks, opt.config.weight_decay)?.grads,
        ),
        _ => None,
    };

    if let (FeatureExtractor::Tanh(layer), Some(acc), Some(opt)) =
        (&state.extractor, extractor_grads.as_mut(), &state.extractor_opt)
    {
        acc.weights.scaled_add(opt.config.weight_decay, &layer.weights);
        acc.bias.scaled_add(opt.config.weight_decay, &layer.bias);
    }

    Ok(StepComputation {
        mu,
        labeled_loss,
        unlabeled_loss,
        head_labeled,
        head_unlabeled,
        head_total,
        prior_grads,
        extractor_grads,
        c_tau,
        threshold,
        refinements,
        weights,
    })
}
