//! Prior-guided pseudo-label refinement.
//!
//! The semi-supervised head's distribution `p_u` over an unlabeled sample is
//! corrected with the distribution `prior` of a head trained on labeled samples only:
//!
//! 1. group reweighting rescales `p_u` inside each class group (common,
//!    source-private, target-private) so that the group's total mass matches the
//!    prior's mass for that group, keeping within-group ratios;
//! 2. aggregation averages the reweighted distribution with the prior.
//!
//! The argmax of the result is the pseudo-label. Both inputs are expected to be
//! target-masked, so source-private classes carry zero mass throughout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::ClassGroups;
use crate::error::{Error, Result};
use crate::model::argmax;

/// Group masses at or below this are treated as empty.
pub const GROUP_MASS_EPS: f64 = 1e-12;

/// Default `tau` of the adaptive threshold.
pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub reweighted: Vec<f64>,
    pub refined: Vec<f64>,
    pub pseudo_label: usize,
    /// `max(refined)`.
    pub confidence: f64,
    /// Unset until compared with the threshold.
    pub above_threshold: Option<bool>,
    /// Some group had no mass under `p_u` but positive prior mass and was filled uniformly.
    pub uniform_filled: bool,
}

/// Output of [`group_reweight`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reweighted {
    pub probs: Vec<f64>,
    pub uniform_filled: bool,
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distributions have {} and {} classes",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn mass(p: &[f64], group: &std::collections::BTreeSet<usize>) -> f64 {
    group.iter().map(|&i| p[i]).sum()
}

/// Aligns the class-group masses of `p_u` with those of `prior`.
///
/// With at most one group carrying mass, both vectors put all of it in that group
/// and `p_u` is returned unchanged.
pub fn group_reweight(p_u: &[f64], prior: &[f64], groups: &ClassGroups) -> Result<Reweighted> {
    check_lengths(p_u, prior)?;
    if let Some(&c) = groups.union().iter().find(|&&c| c >= p_u.len()) {
        return Err(Error::Shape(format!(
            "class {c} outside a distribution over {} classes",
            p_u.len()
        )));
    }

    let masses: Vec<(&std::collections::BTreeSet<usize>, f64, f64)> = groups
        .iter()
        .map(|(_, g)| (g, mass(p_u, g), mass(prior, g)))
        .filter(|(g, mp, mq)| !g.is_empty() && (*mp > 0.0 || *mq > 0.0))
        .collect();
    if masses.len() <= 1 {
        return Ok(Reweighted {
            probs: p_u.to_vec(),
            uniform_filled: false,
        });
    }

    let mut out = p_u.to_vec();
    let mut uniform_filled = false;
    for (g, mp, mq) in masses {
        if mp > GROUP_MASS_EPS {
            let scale = mq / mp;
            for &i in g {
                out[i] = p_u[i] * scale;
            }
        } else if mq > 0.0 {
            let share = mq / g.len() as f64;
            for &i in g {
                out[i] = share;
            }
            uniform_filled = true;
        } else {
            for &i in g {
                out[i] = 0.0;
            }
        }
    }
    Ok(Reweighted {
        probs: out,
        uniform_filled,
    })
}

/// Elementwise mean of two distributions.
pub fn aggregate(reweighted: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
    check_lengths(reweighted, prior)?;
    Ok(reweighted
        .iter()
        .zip(prior)
        .map(|(a, b)| (a + b) / 2.0)
        .collect())
}

/// Which refinement steps run; both on is the full method, both off is plain
/// argmax of `p_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSteps {
    pub group_reweight: bool,
    pub aggregate: bool,
}

impl Default for RefinementSteps {
    fn default() -> Self {
        RefinementSteps {
            group_reweight: true,
            aggregate: true,
        }
    }
}

impl RefinementSteps {
    pub const NONE: RefinementSteps = RefinementSteps {
        group_reweight: false,
        aggregate: false,
    };
}

/// Group reweighting followed by aggregation with the prior.
pub fn refine(p_u: &[f64], prior: &[f64], groups: &ClassGroups) -> Result<RefinementResult> {
    refine_with(p_u, prior, groups, RefinementSteps::default())
}

pub fn refine_with(
    p_u: &[f64],
    prior: &[f64],
    groups: &ClassGroups,
    steps: RefinementSteps,
) -> Result<RefinementResult> {
    check_lengths(p_u, prior)?;
    let reweighted = if steps.group_reweight {
        group_reweight(p_u, prior, groups)?
    } else {
        Reweighted {
            probs: p_u.to_vec(),
            uniform_filled: false,
        }
    };
    let refined = if steps.aggregate {
        aggregate(&reweighted.probs, prior)?
    } else {
        reweighted.probs.clone()
    };
    let pseudo_label = argmax(&refined);
    Ok(RefinementResult {
        confidence: refined[pseudo_label],
        reweighted: reweighted.probs,
        refined,
        pseudo_label,
        above_threshold: None,
        uniform_filled: reweighted.uniform_filled,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// `tau * mean(labeled_max_probs)`, or `None` for an empty batch.
pub fn confidence_threshold(labeled_max_probs: &[f64], tau: f64) -> Result<Option<f64>> {
    check_tau(tau)?;
    if labeled_max_probs.is_empty() {
        return Ok(None);
    }
    if let Some(p) = labeled_max_probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!("labeled max probability {p} outside (0, 1]")));
    }
    let mean = labeled_max_probs.iter().sum::<f64>() / labeled_max_probs.len() as f64;
    Ok(Some(tau * mean))
}

/// Tracks the adaptive threshold across batches.
///
/// The expectation is taken per labeled batch unless an EMA decay is set. An empty
/// batch keeps the previous threshold; before any labeled batch the threshold is
/// `tau / C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEstimator {
    tau: f64,
    num_classes: usize,
    ema_decay: Option<f64>,
    expectation: Option<f64>,
}

impl ThresholdEstimator {
    pub fn new(tau: f64, num_classes: usize, ema_decay: Option<f64>) -> Result<Self> {
        check_tau(tau)?;
        if let Some(d) = ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {d}")));
            }
        }
        Ok(ThresholdEstimator {
            tau,
            num_classes: num_classes.max(1),
            ema_decay,
            expectation: None,
        })
    }

    pub fn update(&mut self, labeled_max_probs: &[f64]) -> Result<f64> {
        if let Some(c) = confidence_threshold(labeled_max_probs, self.tau)? {
            let batch_mean = c / self.tau;
            self.expectation = Some(match (self.ema_decay, self.expectation) {
                (Some(d), Some(prev)) => d * prev + (1.0 - d) * batch_mean,
                _ => batch_mean,
            });
        }
        Ok(self.current())
    }

    pub fn current(&self) -> f64 {
        match self.expectation {
            Some(e) => self.tau * e,
            None => self.tau / self.num_classes as f64,
        }
    }
}

#[derive(Serialize)]
struct LoggedRefinement<'a> {
    iteration: usize,
    sample: usize,
    #[serde(flatten)]
    result: &'a RefinementResult,
}

/// Streams per-sample refinement records to JSONL.
pub struct RefinementLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RefinementLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(RefinementLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn record(&mut self, iteration: usize, sample: usize, result: &RefinementResult) -> Result<()> {
        let rec = LoggedRefinement {
            iteration,
            sample,
            result,
        };
        serde_json::to_writer(&mut self.out, &rec).map_err(|e| Error::json(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
