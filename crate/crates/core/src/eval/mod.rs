//! Target-domain accuracy and common-class bias diagnostics.
//!
//! Accuracies are micro-averaged over samples. Every number the runner reports
//! comes from [`report_from_predictions`], which both inductive (held-out test) and
//! transductive (unlabeled training targets) evaluation go through.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{ClassGroups, Domain, FeatureDataset, Group, Split};
use crate::error::{Error, Result};
use crate::model::{InferenceModel, LogitMask};

/// Version of the CSV column layout below.
pub const CSV_VERSION: u32 = 1;

pub const REPORT_CSV_COLUMNS: [&str; 12] = [
    "method",
    "setting",
    "seed",
    "split_kind",
    "n_samples",
    "n_common",
    "n_target_private",
    "overall_accuracy",
    "common_accuracy",
    "target_private_accuracy",
    "private_as_common_rate",
    "predicted_private_fraction",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    InductiveTest,
    TransductiveUnlabeledTrain,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::InductiveTest => "inductive_test",
            SplitKind::TransductiveUnlabeledTrain => "transductive_unlabeled_train",
        }
    }

    /// The samples this kind of evaluation covers.
    pub fn select(self, ds: &FeatureDataset) -> FeatureDataset {
        let idx = match self {
            SplitKind::InductiveTest => ds.indices(Some(Split::Test), None),
            SplitKind::TransductiveUnlabeledTrain => ds.indices(Some(Split::Train), Some(false)),
        };
        ds.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split_kind: SplitKind,
    pub n_samples: usize,
    pub n_common: usize,
    pub n_target_private: usize,
    pub overall_accuracy: f64,
    /// Zero when there are no common samples.
    pub common_accuracy: f64,
    /// Zero when there are no target-private samples.
    pub target_private_accuracy: f64,
    /// Fraction of target-private samples predicted as a common class.
    pub private_as_common_rate: f64,
    /// No target-private samples, so the rate above is a placeholder zero.
    pub private_denominator_empty: bool,
    /// Fraction of all predictions that fall in a target-private class.
    pub predicted_private_fraction: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub per_class_count: BTreeMap<usize, usize>,
    pub averaging: String,
}

/// Rate with a flag for an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivateAsCommon {
    pub rate: f64,
    pub empty: bool,
}

fn check_aligned(predictions: &[usize], truths: &[usize]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truths.len()
        )));
    }
    Ok(())
}

pub fn private_as_common_rate(
    predictions: &[usize],
    truths: &[usize],
    groups: &ClassGroups,
) -> Result<PrivateAsCommon> {
    check_aligned(predictions, truths)?;
    let (mut total, mut hits) = (0usize, 0usize);
    for (p, t) in predictions.iter().zip(truths) {
        if groups.target_private.contains(t) {
            total += 1;
            if groups.common.contains(p) {
                hits += 1;
            }
        }
    }
    Ok(if total == 0 {
        PrivateAsCommon {
            rate: 0.0,
            empty: true,
        }
    } else {
        PrivateAsCommon {
            rate: hits as f64 / total as f64,
            empty: false,
        }
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Builds a report from aligned predictions and ground truth.
pub fn report_from_predictions(
    predictions: &[usize],
    truths: &[usize],
    groups: &ClassGroups,
    split_kind: SplitKind,
) -> Result<MetricsReport> {
    check_aligned(predictions, truths)?;
    if truths.is_empty() {
        return Err(Error::Eval(format!("no samples for {}", split_kind.name())));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut correct, mut common_n, mut common_ok, mut priv_n, mut priv_ok, mut pred_priv) =
        (0, 0, 0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        let hit = p == t;
        let e = per_class.entry(t).or_insert((0, 0));
        e.0 += 1;
        e.1 += usize::from(hit);
        correct += usize::from(hit);
        match groups.group_of(t) {
            Some(Group::Common) => {
                common_n += 1;
                common_ok += usize::from(hit);
            }
            Some(Group::TargetPrivate) => {
                priv_n += 1;
                priv_ok += usize::from(hit);
            }
            _ => {}
        }
        if groups.target_private.contains(&p) {
            pred_priv += 1;
        }
    }
    let pac = private_as_common_rate(predictions, truths, groups)?;
    Ok(MetricsReport {
        split_kind,
        n_samples: truths.len(),
        n_common: common_n,
        n_target_private: priv_n,
        overall_accuracy: ratio(correct, truths.len()),
        common_accuracy: ratio(common_ok, common_n),
        target_private_accuracy: ratio(priv_ok, priv_n),
        private_as_common_rate: pac.rate,
        private_denominator_empty: pac.empty,
        predicted_private_fraction: ratio(pred_priv, truths.len()),
        per_class_accuracy: per_class.iter().map(|(&c, &(n, ok))| (c, ratio(ok, n))).collect(),
        per_class_count: per_class.iter().map(|(&c, &(n, _))| (c, n)).collect(),
        averaging: "micro".into(),
    })
}

/// Evaluates `model` on every sample of a target-domain dataset.
pub fn evaluate(
    model: &InferenceModel,
    dataset: &FeatureDataset,
    groups: &ClassGroups,
    mask: &LogitMask,
    split_kind: SplitKind,
) -> Result<MetricsReport> {
    if dataset.domain != Domain::Target {
        return Err(Error::Eval("evaluation expects a target-domain dataset".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Eval(format!("empty dataset for {}", split_kind.name())));
    }
    let predictions = model.predict(dataset.features.view(), mask)?;
    report_from_predictions(&predictions, &dataset.class_ids, groups, split_kind)
}

impl MetricsReport {
    pub fn csv_row(&self, method: &str, setting: &str, seed: u64) -> String {
        format!(
            "{method},{setting},{seed},{},{},{},{},{},{},{},{},{}",
            self.split_kind.name(),
            self.n_samples,
            self.n_common,
            self.n_target_private,
            self.overall_accuracy,
            self.common_accuracy,
            self.target_private_accuracy,
            self.private_as_common_rate,
            self.predicted_private_fraction
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`); zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub overall_accuracy: Stat,
    pub common_accuracy: Stat,
    pub target_private_accuracy: Stat,
    pub private_as_common_rate: Stat,
    pub predicted_private_fraction: Stat,
}

pub const SUMMARY_CSV_COLUMNS: [&str; 14] = [
    "method",
    "setting",
    "split_kind",
    "n_runs",
    "overall_accuracy_mean",
    "overall_accuracy_std",
    "common_accuracy_mean",
    "common_accuracy_std",
    "target_private_accuracy_mean",
    "target_private_accuracy_std",
    "private_as_common_rate_mean",
    "private_as_common_rate_std",
    "predicted_private_fraction_mean",
    "predicted_private_fraction_std",
];

/// Mean and standard deviation of every rate across runs, in input order.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::Eval("no runs to aggregate".into()));
    }
    let field = |f: fn(&MetricsReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(RunSummary {
        n_runs: reports.len(),
        overall_accuracy: field(|r| r.overall_accuracy),
        common_accuracy: field(|r| r.common_accuracy),
        target_private_accuracy: field(|r| r.target_private_accuracy),
        private_as_common_rate: field(|r| r.private_as_common_rate),
        predicted_private_fraction: field(|r| r.predicted_private_fraction),
    })
}

impl RunSummary {
    pub fn csv_row(&self, method: &str, setting: &str, split_kind: SplitKind) -> String {
        format!(
            "{method},{setting},{},{},{},{},{},{},{},{},{},{},{},{}",
            split_kind.name(),
            self.n_runs,
            self.overall_accuracy.mean,
            self.overall_accuracy.std,
            self.common_accuracy.mean,
            self.common_accuracy.std,
            self.target_private_accuracy.mean,
            self.target_private_accuracy.std,
            self.private_as_common_rate.mean,
            self.private_as_common_rate.std,
            self.predicted_private_fraction.mean,
            self.predicted_private_fraction.std
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierParams, FeatureExtractor};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn op_groups() -> ClassGroups {
        ClassGroups {
            common: [0, 1].into(),
            source_private: [2].into(),
            target_private: [3, 4].into(),
        }
    }

    #[test]
    fn perfect_predictor() {
        let truths = [0, 1, 3, 4, 4, 0];
        let r = report_from_predictions(&truths, &truths, &op_groups(), SplitKind::InductiveTest).unwrap();
        assert_eq!(
            (r.overall_accuracy, r.common_accuracy, r.target_private_accuracy, r.private_as_common_rate),
            (1.0, 1.0, 1.0, 0.0)
        );
    }

    #[test]
    fn constant_common_predictor() {
        let truths = [0, 0, 1, 0, 3, 4, 4];
        let preds = [0; 7];
        let r = report_from_predictions(&preds, &truths, &op_groups(), SplitKind::InductiveTest).unwrap();
        assert_eq!(r.common_accuracy, 3.0 / 4.0);
        assert_eq!(r.private_as_common_rate, 1.0);
        assert_eq!(r.target_private_accuracy, 0.0);
        assert_eq!(r.predicted_private_fraction, 0.0);
    }

    #[test]
    fn private_as_common_counts() {
        let g = op_groups();
        // 10 private samples: 4 -> common, 3 -> wrong private, 3 correct
        let truths = [3, 3, 3, 3, 3, 4, 4, 4, 4, 4, 0];
        let preds = [0, 1, 0, 4, 3, 0, 3, 3, 4, 4, 0];
        let r = private_as_common_rate(&preds, &truths, &g).unwrap();
        assert_eq!((r.rate, r.empty), (0.4, false));

        let closed = ClassGroups {
            common: [0, 1].into(),
            ..ClassGroups::default()
        };
        let r = private_as_common_rate(&[0, 1], &[1, 1], &closed).unwrap();
        assert_eq!((r.rate, r.empty), (0.0, true));

        let r = private_as_common_rate(&[0, 1, 0], &[3, 4, 4], &g).unwrap();
        assert_eq!(r.rate, 1.0);
        assert!(private_as_common_rate(&[0], &[0, 1], &g).is_err());
    }

    #[test]
    fn overall_is_weighted_group_mix() {
        let truths = [0, 1, 3, 4, 4, 0, 1, 3];
        let preds = [0, 0, 3, 1, 4, 0, 1, 0];
        let r = report_from_predictions(&preds, &truths, &op_groups(), SplitKind::InductiveTest).unwrap();
        let mix = (r.common_accuracy * r.n_common as f64
            + r.target_private_accuracy * r.n_target_private as f64)
            / r.n_samples as f64;
        assert!((mix - r.overall_accuracy).abs() < 1e-12);
        let per_class: f64 = r
            .per_class_accuracy
            .iter()
            .map(|(c, a)| a * r.per_class_count[c] as f64)
            .sum::<f64>()
            / r.n_samples as f64;
        assert!((per_class - r.overall_accuracy).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            report_from_predictions(&[], &[], &op_groups(), SplitKind::InductiveTest),
            Err(Error::Eval(_))
        ));
    }

    /// Random 5-class instance against a confusion matrix tallied independently.
    #[test]
    fn matches_confusion_matrix_tally() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let g = ClassGroups {
            common: [0, 1, 2].into(),
            source_private: [].into(),
            target_private: [3, 4].into(),
        };
        let truths: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
        let preds: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
        let mut cm = [[0usize; 5]; 5];
        for (&t, &p) in truths.iter().zip(&preds) {
            cm[t][p] += 1;
        }
        let row = |t: usize| cm[t].iter().sum::<usize>();
        let diag = |ts: &[usize]| ts.iter().map(|&t| cm[t][t]).sum::<usize>();
        let rows = |ts: &[usize]| ts.iter().map(|&t| row(t)).sum::<usize>();
        let to_common: usize = [3, 4].iter().map(|&t| cm[t][0] + cm[t][1] + cm[t][2]).sum();
        let pred_priv: usize = (0..5).map(|t| cm[t][3] + cm[t][4]).sum();

        let r = report_from_predictions(&preds, &truths, &g, SplitKind::TransductiveUnlabeledTrain).unwrap();
        assert_eq!(r.overall_accuracy, diag(&[0, 1, 2, 3, 4]) as f64 / 50.0);
        assert_eq!(r.common_accuracy, diag(&[0, 1, 2]) as f64 / rows(&[0, 1, 2]) as f64);
        assert_eq!(r.target_private_accuracy, diag(&[3, 4]) as f64 / rows(&[3, 4]) as f64);
        assert_eq!(r.private_as_common_rate, to_common as f64 / rows(&[3, 4]) as f64);
        assert_eq!(r.predicted_private_fraction, pred_priv as f64 / 50.0);
        for (c, counts) in cm.iter().enumerate() {
            assert_eq!(r.per_class_accuracy[&c], counts[c] as f64 / row(c) as f64);
        }
    }

    #[test]
    fn evaluate_uses_masked_argmax_and_leaves_model_alone() {
        // Head whose raw argmax is the masked class 2; masking must redirect it.
        let mut head = ClassifierParams::zeros(4, 2, 1.0, false).unwrap();
        head.bias = ndarray::array![0.0, 1.0, 5.0, 0.5];
        let model = InferenceModel {
            extractor: FeatureExtractor::Identity,
            head,
        };
        let before = model.clone();
        let ds = FeatureDataset::new(
            Array2::zeros((3, 2)),
            vec![1, 1, 3],
            Domain::Target,
            vec![false; 3],
            vec![Split::Test; 3],
        )
        .unwrap();
        let g = ClassGroups {
            common: [0, 1].into(),
            source_private: [2].into(),
            target_private: [3].into(),
        };
        let mask = LogitMask::new(vec![true, true, false, true]).unwrap();
        let r = evaluate(&model, &ds, &g, &mask, SplitKind::InductiveTest).unwrap();
        assert_eq!(r.overall_accuracy, 2.0 / 3.0);
        assert_eq!(r.private_as_common_rate, 1.0);
        assert_eq!(model, before);

        let mut src = ds.clone();
        src.domain = Domain::Source;
        src.labeled_mask = vec![true; 3];
        assert!(matches!(
            evaluate(&model, &src, &g, &mask, SplitKind::InductiveTest),
            Err(Error::Eval(_))
        ));
    }

    fn report_with(acc: f64) -> MetricsReport {
        let mut r = report_from_predictions(&[0], &[0], &op_groups(), SplitKind::InductiveTest).unwrap();
        r.overall_accuracy = acc;
        r
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_runs(&[report_with(0.6)]).unwrap();
        assert_eq!((s.overall_accuracy.mean, s.overall_accuracy.std), (0.6, 0.0));

        let s = aggregate_runs(&[report_with(0.6), report_with(0.8)]).unwrap();
        assert!((s.overall_accuracy.mean - 0.7).abs() < 1e-15);
        assert!((s.overall_accuracy.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((s.overall_accuracy.std - 0.1414).abs() < 1e-4);

        let s = aggregate_runs(&[report_with(0.3), report_with(0.3), report_with(0.3)]).unwrap();
        assert_eq!(s.overall_accuracy.std, 0.0);
        assert_eq!(s.common_accuracy.std, 0.0);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn csv_rows_match_column_count() {
        let r = report_with(0.5);
        assert_eq!(r.csv_row("pgpr", "open_partial", 3).split(',').count(), REPORT_CSV_COLUMNS.len());
        let s = aggregate_runs(&[r]).unwrap();
        assert_eq!(
            s.csv_row("pgpr", "open_partial", SplitKind::InductiveTest).split(',').count(),
            SUMMARY_CSV_COLUMNS.len()
        );
    }
}
