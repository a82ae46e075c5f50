//! Synthetic source/target feature domains.
//!
//! Class means are drawn uniformly on a sphere of radius `10 * cluster_spread`. The
//! target domain shares class identity with the source but every class mean is
//! translated along one seeded direction by `shift_magnitude`, and all target
//! features are then rotated by `rotation_angle` (a Givens rotation applied to each
//! consecutive coordinate pair).

mod io;

pub(crate) use io::ByteReader;

pub use io::{
    dataset_digest, from_binary_bytes, read_binary, read_jsonl, to_binary_bytes, write_binary,
    write_jsonl, SampleRecord,
};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Per-rank keep ratio for target class counts under label distribution shift.
pub const LABEL_SHIFT_RATIO: f64 = 0.85;

pub const TRAIN_FRACTION: f64 = 0.5;
pub const VAL_FRACTION: f64 = 0.2;
pub const TEST_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Closed,
    ClosedLabelShift,
    Open,
    Partial,
    OpenPartial,
}

impl Setting {
    pub const ALL: [Setting; 5] = [
        Setting::Closed,
        Setting::ClosedLabelShift,
        Setting::Open,
        Setting::Partial,
        Setting::OpenPartial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Closed => "closed",
            Setting::ClosedLabelShift => "closed_label_shift",
            Setting::Open => "open",
            Setting::Partial => "partial",
            Setting::OpenPartial => "open_partial",
        }
    }

    pub fn is_closed(self) -> bool {
        matches!(self, Setting::Closed | Setting::ClosedLabelShift)
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes_total: usize,
    pub feature_dim: usize,
    pub samples_per_class_per_domain: usize,
    /// Within-class standard deviation.
    pub cluster_spread: f64,
    /// Norm of the per-class mean translation between domains.
    pub shift_magnitude: f64,
    /// Rotation applied to target features, radians.
    pub rotation_angle: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes_total: 12,
            feature_dim: 16,
            samples_per_class_per_domain: 60,
            cluster_spread: 1.0,
            shift_magnitude: 3.0,
            rotation_angle: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.num_classes_total < 2 {
            return Err(Error::Config(format!(
                "num_classes_total must be at least 2, got {}",
                self.num_classes_total
            )));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::Config(
                "samples_per_class_per_domain must be positive".into(),
            ));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be finite and nonnegative".into()));
        }
        if !(self.shift_magnitude >= 0.0 && self.shift_magnitude.is_finite()) {
            return Err(Error::Config("shift_magnitude must be finite and nonnegative".into()));
        }
        if !self.rotation_angle.is_finite() {
            return Err(Error::Config("rotation_angle must be finite".into()));
        }
        Ok(())
    }
}

/// Number of classes in each group, assigned as contiguous index blocks:
/// common first, then source-private, then target-private.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCounts {
    pub common: usize,
    #[serde(default)]
    pub source_private: usize,
    #[serde(default)]
    pub target_private: usize,
}

impl GroupCounts {
    pub fn new(common: usize, source_private: usize, target_private: usize) -> Self {
        GroupCounts {
            common,
            source_private,
            target_private,
        }
    }

    pub fn total(&self) -> usize {
        self.common + self.source_private + self.target_private
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaceConfig {
    pub source_classes: BTreeSet<usize>,
    pub target_classes: BTreeSet<usize>,
    pub setting: Setting,
}

impl LabelSpaceConfig {
    /// Checks the set relations each setting requires.
    pub fn new(
        source_classes: BTreeSet<usize>,
        target_classes: BTreeSet<usize>,
        setting: Setting,
    ) -> Result<Self> {
        let cfg = LabelSpaceConfig {
            source_classes,
            target_classes,
            setting,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let groups = class_groups(self);
        if groups.common.is_empty() {
            return Err(Error::Config(
                "source and target label sets must share at least one class".into(),
            ));
        }
        let (sp, tp) = (!groups.source_private.is_empty(), !groups.target_private.is_empty());
        let ok = match self.setting {
            Setting::Closed | Setting::ClosedLabelShift => !sp && !tp,
            Setting::Open => !sp && tp,
            Setting::Partial => sp && !tp,
            Setting::OpenPartial => sp && tp,
        };
        if !ok {
            return Err(Error::Config(format!(
                "label sets do not form a valid {} setting ({} common, {} source-private, {} target-private)",
                self.setting,
                groups.common.len(),
                groups.source_private.len(),
                groups.target_private.len()
            )));
        }
        Ok(())
    }

    /// Size of the union label set; both heads output this many logits.
    pub fn num_classes(&self) -> usize {
        self.source_classes.union(&self.target_classes).count()
    }

    pub fn classes(&self, domain: Domain) -> &BTreeSet<usize> {
        match domain {
            Domain::Source => &self.source_classes,
            Domain::Target => &self.target_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassGroups {
    pub common: BTreeSet<usize>,
    pub source_private: BTreeSet<usize>,
    pub target_private: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Common,
    SourcePrivate,
    TargetPrivate,
}

impl ClassGroups {
    pub fn group_of(&self, class: usize) -> Option<Group> {
        if self.common.contains(&class) {
            Some(Group::Common)
        } else if self.source_private.contains(&class) {
            Some(Group::SourcePrivate)
        } else if self.target_private.contains(&class) {
            Some(Group::TargetPrivate)
        } else {
            None
        }
    }

    /// The three groups in fixed order.
    pub fn iter(&self) -> impl Iterator<Item = (Group, &BTreeSet<usize>)> {
        [
            (Group::Common, &self.common),
            (Group::SourcePrivate, &self.source_private),
            (Group::TargetPrivate, &self.target_private),
        ]
        .into_iter()
    }

    pub fn union(&self) -> BTreeSet<usize> {
        self.iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }
}

/// Splits the union label set into common, source-private and target-private classes.
pub fn class_groups(cfg: &LabelSpaceConfig) -> ClassGroups {
    ClassGroups {
        common: cfg
            .source_classes
            .intersection(&cfg.target_classes)
            .copied()
            .collect(),
        source_private: cfg
            .source_classes
            .difference(&cfg.target_classes)
            .copied()
            .collect(),
        target_private: cfg
            .target_classes
            .difference(&cfg.source_classes)
            .copied()
            .collect(),
    }
}

/// Samples from one domain. Splits and the labeled flag are per sample; the
/// domain tag is per dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub features: Array2<f64>,
    pub class_ids: Vec<usize>,
    pub domain: Domain,
    pub labeled_mask: Vec<bool>,
    pub splits: Vec<Split>,
}

impl FeatureDataset {
    pub fn new(
        features: Array2<f64>,
        class_ids: Vec<usize>,
        domain: Domain,
        labeled_mask: Vec<bool>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = features.nrows();
        if class_ids.len() != n || labeled_mask.len() != n || splits.len() != n {
            return Err(Error::Shape(format!(
                "dataset has {n} feature rows but {} class ids, {} labeled flags, {} splits",
                class_ids.len(),
                labeled_mask.len(),
                splits.len()
            )));
        }
        if domain == Domain::Source && labeled_mask.iter().any(|l| !l) {
            return Err(Error::Data("source samples must all be labeled".into()));
        }
        Ok(FeatureDataset {
            features,
            class_ids,
            domain,
            labeled_mask,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.class_ids.iter().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &c in &self.class_ids {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }

    /// Indices of samples matching `split` and, when given, the labeled flag.
    pub fn indices(&self, split: Option<Split>, labeled: Option<bool>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| split.is_none_or(|s| self.splits[i] == s))
            .filter(|&i| labeled.is_none_or(|l| self.labeled_mask[i] == l))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            features: self.features.select(Axis(0), indices),
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
            domain: self.domain,
            labeled_mask: indices.iter().map(|&i| self.labeled_mask[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Checks that every class id belongs to `label_set`.
    pub fn check_label_set(&self, label_set: &BTreeSet<usize>) -> Result<()> {
        match self.class_ids.iter().find(|c| !label_set.contains(c)) {
            Some(c) => Err(Error::Data(format!(
                "{:?} dataset contains class {c} outside its label set",
                self.domain
            ))),
            None => Ok(()),
        }
    }
}

fn unit_gaussian(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Rotates each consecutive coordinate pair (0,1), (2,3), ... by `angle`.
fn rotate_pairs(x: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for pair in x.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}

/// Source and target datasets with identical per-class counts. Source samples are
/// all labeled; target samples start unlabeled. All samples start in the train split.
pub fn generate_domain_pair(cfg: &SyntheticConfig) -> Result<(FeatureDataset, FeatureDataset)> {
    cfg.validate()?;
    let (c, d, n) = (
        cfg.num_classes_total,
        cfg.feature_dim,
        cfg.samples_per_class_per_domain,
    );
    let radius = 10.0 * cfg.cluster_spread;

    let mut mean_rng = rng::stream(cfg.seed, "datagen/means");
    let means: Vec<Array1<f64>> = (0..c)
        .map(|_| unit_gaussian(d, &mut mean_rng) * radius)
        .collect();
    let shift = unit_gaussian(d, &mut mean_rng) * cfg.shift_magnitude;

    let sample = |domain: Domain, label: &str| {
        let mut r = rng::stream(cfg.seed, label);
        let mut features = Array2::<f64>::zeros((c * n, d));
        let mut class_ids = Vec::with_capacity(c * n);
        for (class, mean) in means.iter().enumerate() {
            for i in 0..n {
                let mut row = features.row_mut(class * n + i);
                for (j, v) in row.iter_mut().enumerate() {
                    let noise: f64 = r.sample(StandardNormal);
                    *v = mean[j] + cfg.cluster_spread * noise;
                    if domain == Domain::Target {
                        *v += shift[j];
                    }
                }
                if domain == Domain::Target {
                    rotate_pairs(row.as_slice_mut().expect("standard layout"), cfg.rotation_angle);
                }
                class_ids.push(class);
            }
        }
        let labeled = vec![domain == Domain::Source; c * n];
        FeatureDataset::new(features, class_ids, domain, labeled, vec![Split::Train; c * n])
    };

    Ok((
        sample(Domain::Source, "datagen/source")?,
        sample(Domain::Target, "datagen/target")?,
    ))
}

/// Restricts both domains to the classes of `setting`, with class blocks laid out
/// as common, source-private, target-private. Classes beyond the three blocks are
/// dropped from both domains. For the closed settings a zero `counts.common` means
/// "every class present in the source".
pub fn apply_label_space_setting(
    src: &FeatureDataset,
    trg: &FeatureDataset,
    setting: Setting,
    counts: GroupCounts,
) -> Result<(FeatureDataset, FeatureDataset, LabelSpaceConfig)> {
    let available = src.classes().union(&trg.classes()).count();
    let mut counts = counts;
    if setting.is_closed() && counts.common == 0 {
        counts.common = available;
    }
    if counts.total() > available {
        return Err(Error::Config(format!(
            "group counts need {} classes but only {available} are available",
            counts.total()
        )));
    }

    let common = 0..counts.common;
    let source_private = counts.common..counts.common + counts.source_private;
    let target_private = source_private.end..source_private.end + counts.target_private;
    let source_classes: BTreeSet<usize> = common.clone().chain(source_private).collect();
    let target_classes: BTreeSet<usize> = common.chain(target_private).collect();
    let label_space = LabelSpaceConfig::new(source_classes, target_classes, setting)?;

    let keep = |ds: &FeatureDataset, classes: &BTreeSet<usize>| {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| classes.contains(&ds.class_ids[i]))
            .collect();
        ds.subset(&idx)
    };
    let src_out = keep(src, &label_space.source_classes);
    let mut trg_out = keep(trg, &label_space.target_classes);

    if setting == Setting::ClosedLabelShift {
        trg_out = downsample_geometric(&trg_out, LABEL_SHIFT_RATIO);
    }
    Ok((src_out, trg_out, label_space))
}

/// Keeps `round(n * ratio^rank)` (at least one) samples of each class, where rank is
/// the class's position in ascending id order. Earliest samples are kept.
fn downsample_geometric(ds: &FeatureDataset, ratio: f64) -> FeatureDataset {
    let quotas: BTreeMap<usize, usize> = ds
        .class_counts()
        .into_iter()
        .enumerate()
        .map(|(rank, (class, n))| {
            let kept = (n as f64 * ratio.powi(rank as i32)).round() as usize;
            (class, kept.clamp(1, n))
        })
        .collect();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let c = ds.class_ids[i];
            let s = seen.entry(c).or_insert(0);
            *s += 1;
            *s <= quotas[&c]
        })
        .collect();
    ds.subset(&idx)
}

/// Per-class split sizes `(train, val, test)`; the rounding remainder goes to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * VAL_FRACTION).round() as usize;
    let test = ((n as f64 * TEST_FRACTION).round() as usize).min(n - val);
    (n - val - test, val, test)
}

/// Assigns 50/20/30 train/val/test splits per class and marks exactly `k`
/// training samples of every class as labeled. Both draws use `seed`.
pub fn split_and_label(ds: &FeatureDataset, k: usize, seed: u64) -> Result<FeatureDataset> {
    let mut split_rng = rng::stream(seed, "split/assign");
    let mut label_rng = rng::stream(seed, "split/label");

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in ds.class_ids.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }

    let mut out = ds.clone();
    for (class, mut idx) in by_class {
        idx.shuffle(&mut split_rng);
        let (n_train, n_val, _) = split_sizes(idx.len());
        if n_train < k {
            return Err(Error::Data(format!(
                "class {class} has {n_train} training samples, fewer than k = {k}"
            )));
        }
        for (pos, &i) in idx.iter().enumerate() {
            out.splits[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        if ds.domain == Domain::Target {
            for &i in &idx {
                out.labeled_mask[i] = false;
            }
            for &i in idx[..n_train].choose_multiple(&mut label_rng, k) {
                out.labeled_mask[i] = true;
            }
        }
    }
    Ok(out)
}
