//! Softmax classification heads over feature vectors.
//!
//! A head maps features to `C` logits, one per class of the union label set.
//! Classes absent from a sample's domain are masked by overwriting their logit
//! with [`MASK_SENTINEL`], which underflows to exactly zero probability.

mod checkpoint;
mod extractor;
mod optim;

pub use checkpoint::{params_from_bytes, params_to_bytes, read_params, write_params};
pub use extractor::{FeatureExtractor, TanhGrads, TanhLayer};
pub use optim::{sgd_step, LrSchedule, OptimizerConfig, OptimizerState, Parameters};

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, LabelSpaceConfig};
use crate::error::{Error, Result};

pub const MASK_SENTINEL: f64 = -1e30;

/// Standard deviation of the Gaussian head initialization.
pub const INIT_STD: f64 = 0.01;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitMask {
    allowed: Vec<bool>,
}

impl LogitMask {
    pub fn new(allowed: Vec<bool>) -> Result<Self> {
        if !allowed.iter().any(|&a| a) {
            return Err(Error::Domain("logit mask allows no class".into()));
        }
        Ok(LogitMask { allowed })
    }

    pub fn all(num_classes: usize) -> Self {
        LogitMask {
            allowed: vec![true; num_classes],
        }
    }

    pub fn from_classes(num_classes: usize, classes: &BTreeSet<usize>) -> Result<Self> {
        Self::new((0..num_classes).map(|c| classes.contains(&c)).collect())
    }

    pub fn allows(&self, class: usize) -> bool {
        self.allowed.get(class).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Source and target masks for one label-space configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainMasks {
    pub source: LogitMask,
    pub target: LogitMask,
}

impl DomainMasks {
    pub fn from_label_space(ls: &LabelSpaceConfig) -> Result<Self> {
        let c = ls.num_classes();
        Ok(DomainMasks {
            source: LogitMask::from_classes(c, &ls.source_classes)?,
            target: LogitMask::from_classes(c, &ls.target_classes)?,
        })
    }

    pub fn for_domain(&self, domain: Domain) -> &LogitMask {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

/// Mask per batch row.
#[derive(Debug, Clone, Copy)]
pub enum RowMasks<'a> {
    Shared(&'a LogitMask),
    PerRow(&'a [&'a LogitMask]),
}

impl<'a> RowMasks<'a> {
    pub fn get(&self, row: usize) -> &'a LogitMask {
        match *self {
            RowMasks::Shared(m) => m,
            RowMasks::PerRow(ms) => ms[row],
        }
    }

    fn check(&self, rows: usize, classes: usize) -> Result<()> {
        let ok = match self {
            RowMasks::Shared(m) => m.len() == classes,
            RowMasks::PerRow(ms) => ms.len() == rows && ms.iter().all(|m| m.len() == classes),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "masks do not cover {rows} rows of {classes} classes"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `C x d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub temperature: f64,
    /// Cosine similarity between weight rows and inputs; the bias is unused.
    pub cosine_mode: bool,
}

/// Gradient with the shape of [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadGrads {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        HeadGrads {
            weights: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &HeadGrads, scale: f64) {
        self.weights.scaled_add(scale, &other.weights);
        self.bias.scaled_add(scale, &other.bias);
    }
}

impl ClassifierParams {
    pub fn zeros(classes: usize, dim: usize, temperature: f64, cosine_mode: bool) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ClassifierParams {
            weights: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
            temperature,
            cosine_mode,
        })
    }

    /// Gaussian weights with standard deviation [`INIT_STD`], zero bias.
    pub fn init(
        classes: usize,
        dim: usize,
        temperature: f64,
        cosine_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(classes, dim, temperature, cosine_mode)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        p.weights.mapv_inplace(|_| normal.sample(rng));
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Logits before masking.
    fn raw_logits(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        if self.cosine_mode {
            let w_hat = normalize_rows(&self.weights.view());
            let x_hat = normalize_rows(x);
            x_hat.dot(&w_hat.t()) / self.temperature
        } else {
            (x.dot(&self.weights.t()) + &self.bias) / self.temperature
        }
    }

    /// Backpropagates `dlogits` (gradient of a loss w.r.t. the temperature-scaled
    /// logits) into the parameters and the inputs.
    pub fn backward(&self, x: &ArrayView2<f64>, dlogits: &Array2<f64>) -> (HeadGrads, Array2<f64>) {
        let t = self.temperature;
        if !self.cosine_mode {
            let grads = HeadGrads {
                weights: dlogits.t().dot(x) / t,
                bias: dlogits.sum_axis(Axis(0)) / t,
            };
            let dx = dlogits.dot(&self.weights) / t;
            return (grads, dx);
        }

        let w_norms: Vec<f64> = self
            .weights
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let x_norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let w_hat = normalize_rows(&self.weights.view());
        let x_hat = normalize_rows(x);
        let cos = x_hat.dot(&w_hat.t());

        let mut gw = Array2::<f64>::zeros(self.weights.raw_dim());
        let mut dx = Array2::<f64>::zeros(x.raw_dim());
        for n in 0..x.nrows() {
            for c in 0..self.num_classes() {
                let g = dlogits[[n, c]] / t;
                if g == 0.0 {
                    continue;
                }
                let s = cos[[n, c]];
                let xr = x_hat.row(n);
                let wr = w_hat.row(c);
                gw.row_mut(c)
                    .zip_mut_with(&xr, |acc, &xv| *acc += g * xv / w_norms[c]);
                gw.row_mut(c)
                    .zip_mut_with(&wr, |acc, &wv| *acc -= g * s * wv / w_norms[c]);
                dx.row_mut(n)
                    .zip_mut_with(&wr, |acc, &wv| *acc += g * wv / x_norms[n]);
                dx.row_mut(n)
                    .zip_mut_with(&xr, |acc, &xv| *acc -= g * s * xv / x_norms[n]);
            }
        }
        let grads = HeadGrads {
            weights: gw,
            bias: Array1::zeros(self.num_classes()),
        };
        (grads, dx)
    }
}

fn normalize_rows(m: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(NORM_FLOOR);
        row /= norm;
    }
    out
}

fn apply_masks(logits: &mut Array2<f64>, masks: RowMasks<'_>) {
    for (n, mut row) in logits.rows_mut().into_iter().enumerate() {
        let mask = masks.get(n);
        for (v, &allowed) in row.iter_mut().zip(mask.as_slice()) {
            if !allowed {
                *v = MASK_SENTINEL;
            }
        }
    }
}

/// `N x C` logits, masked classes set to [`MASK_SENTINEL`].
pub fn forward(params: &ClassifierParams, x: ArrayView2<f64>, mask: &LogitMask) -> Result<Array2<f64>> {
    forward_rows(params, x, RowMasks::Shared(mask))
}

pub fn forward_rows(
    params: &ClassifierParams,
    x: ArrayView2<f64>,
    masks: RowMasks<'_>,
) -> Result<Array2<f64>> {
    params.check_input(&x)?;
    masks.check(x.nrows(), params.num_classes())?;
    let mut logits = params.raw_logits(&x);
    apply_masks(&mut logits, masks);
    Ok(logits)
}

fn is_masked(v: f64) -> bool {
    v <= MASK_SENTINEL
}

/// Max-subtracted softmax of one logit vector. A NaN logit makes every unmasked
/// probability NaN.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().all(|&v| is_masked(v)) {
        return Err(Error::Domain("softmax over fully masked logits".into()));
    }
    let max = logits
        .iter()
        .copied()
        .filter(|&v| !is_masked(v))
        .fold(f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&v| if is_masked(v) { 0.0 } else { (v - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let logits = logits.as_standard_layout();
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let p = softmax(src.as_slice().expect("standard layout"))?;
        dst.assign(&Array1::from(p));
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(lambda * g + (1 - lambda) * g_prime)`.
pub fn interpolate_logits(g: &[f64], g_prime: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if g.len() != g_prime.len() {
        return Err(Error::Shape(format!(
            "logit lengths differ: {} vs {}",
            g.len(),
            g_prime.len()
        )));
    }
    let mixed: Vec<f64> = g
        .iter()
        .zip(g_prime)
        .map(|(&a, &b)| {
            if is_masked(a) || is_masked(b) {
                MASK_SENTINEL
            } else {
                lambda * a + (1.0 - lambda) * b
            }
        })
        .collect();
    softmax(&mixed)
}

/// Weighted mean cross-entropy of masked logits and its gradient w.r.t. the logits.
///
/// `loss = sum_i w_i * (-log p_i[y_i]) / N`.
pub fn ce_from_logits(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if labels.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let logits = logits.as_standard_layout();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        let row = row.as_slice().expect("standard layout");
        if y >= row.len() || is_masked(row[y]) {
            return Err(Error::Label(format!("label {y} is masked or out of range")));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        let max = row
            .iter()
            .copied()
            .filter(|&v| !is_masked(v))
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .filter(|&&v| !is_masked(v))
                .map(|&v| (v - max).exp())
                .sum::<f64>()
                .ln();
        loss += w * (lse - row[y]);
        let p = softmax(row)?;
        let mut d = dlogits.row_mut(i);
        for (c, pc) in p.into_iter().enumerate() {
            d[c] = w * (pc - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, dlogits))
}

/// Loss, parameter gradient and input gradient of one cross-entropy evaluation.
#[derive(Debug, Clone)]
pub struct CeOutput {
    pub loss: f64,
    pub grads: HeadGrads,
    pub d_features: Array2<f64>,
}

pub fn ce_full(
    params: &ClassifierParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
    masks: RowMasks<'_>,
    weight_decay: f64,
) -> Result<CeOutput> {
    let logits = forward_rows(params, x, masks)?;
    let (loss, dlogits) = ce_from_logits(&logits, labels, weights)?;
    let (mut grads, d_features) = params.backward(&x, &dlogits);
    if weight_decay != 0.0 {
        grads.weights.scaled_add(weight_decay, &params.weights);
        grads.bias.scaled_add(weight_decay, &params.bias);
    }
    Ok(CeOutput {
        loss,
        grads,
        d_features,
    })
}

/// Weighted mean cross-entropy and its gradient w.r.t. the head parameters. The
/// gradient includes `weight_decay * params`; the returned loss does not.
pub fn ce_loss_and_grad(
    params: &ClassifierParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
    masks: RowMasks<'_>,
    weight_decay: f64,
) -> Result<(f64, HeadGrads)> {
    let out = ce_full(params, x, labels, weights, masks, weight_decay)?;
    Ok((out.loss, out.grads))
}

/// Feature extractor followed by the retained semi-supervised head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceModel {
    pub extractor: FeatureExtractor,
    pub head: ClassifierParams,
}

impl InferenceModel {
    pub fn probabilities(&self, x: ArrayView2<f64>, mask: &LogitMask) -> Result<Array2<f64>> {
        let z = self.extractor.forward(x)?;
        softmax_rows(&forward(&self.head, z.view(), mask)?)
    }

    pub fn predict(&self, x: ArrayView2<f64>, mask: &LogitMask) -> Result<Vec<usize>> {
        let p = self.probabilities(x, mask)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect())
    }
}
