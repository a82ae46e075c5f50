//! Experiment runner behind the `unissda` binary.
//!
//! Output layout of `run`, under the output directory:
//!
//! ```text
//! runs.jsonl                                  one RunIndexEntry per grid cell, grid order
//! runs/<setting>/<method>/seed<seed>/report.jsonl      RunRecord lines (inductive, transductive)
//! runs/<setting>/<method>/seed<seed>/history.jsonl     HistoryRecord lines
//! runs/<setting>/<method>/seed<seed>/checkpoint.jsonl  retained model as one JSON line
//! runs/<setting>/<method>/seed<seed>/head.bin          retained head, binary layout
//! reports.csv                                 one row per run and split kind
//! aggregate.csv                               mean/std per method, inductive test
//! aggregate_transductive.csv                  mean/std per method, unlabeled train targets
//! ```
//!
//! Aggregates are recomputed from `runs.jsonl` and the report files alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    apply_label_space_setting, class_groups, dataset_digest, generate_domain_pair, split_and_label,
    write_binary, write_jsonl, GroupCounts, LabelSpaceConfig, Setting, Split, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, evaluate, MetricsReport, SplitKind, CSV_VERSION, REPORT_CSV_COLUMNS,
    SUMMARY_CSV_COLUMNS,
};
use crate::model::{write_params, InferenceModel};
use crate::pgpr::RefinementLog;
use crate::train::{run_with_state, Method, TrainConfig, TrainData, TrainHistory};

/// Environment variable that overrides `output_dir` (a `--out` flag still wins).
pub const OUTPUT_DIR_ENV: &str = "UNISSDA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed `s` generates its instance from `synthetic.seed + s`.
    pub synthetic: SyntheticConfig,
    pub setting: Setting,
    pub group_counts: GroupCounts,
    pub k_shot: usize,
    /// `method` and `seed` are overridden per grid cell.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Stream every step's pseudo-labels to `refinements.jsonl` in each run directory.
    pub debug_refinements: bool,
}

impl Default for ExperimentConfig {
    /// The shipped open-partial benchmark: 12 classes split 6/3/3, 3-shot targets.
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticConfig {
                num_classes_total: 12,
                feature_dim: 8,
                samples_per_class_per_domain: 100,
                cluster_spread: 0.5,
                shift_magnitude: 3.0,
                rotation_angle: 0.8,
                seed: 0,
            },
            setting: Setting::OpenPartial,
            group_counts: GroupCounts::new(6, 3, 3),
            k_shot: 3,
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            debug_refinements: false,
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub methods: Option<Vec<Method>>,
    pub setting: Option<Setting>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Config file (or defaults), then the environment, then flags.
    pub fn resolve(path: Option<&Path>, overrides: Overrides, env_out: Option<PathBuf>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_json_file(p)?,
            None => Self::default(),
        };
        if let Some(dir) = env_out {
            cfg.output_dir = dir;
        }
        if let Some(s) = overrides.seeds {
            cfg.seeds = s;
        }
        if let Some(m) = overrides.methods {
            cfg.methods = m;
        }
        if let Some(s) = overrides.setting {
            cfg.setting = s;
        }
        if let Some(o) = overrides.out {
            cfg.output_dir = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.synthetic.validate()?;
        self.train.validate()?;
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if methods.len() != self.methods.len() || seeds.len() != self.seeds.len() {
            return Err(Error::Config("methods and seeds must not repeat".into()));
        }
        Ok(())
    }

    /// Group counts restricted to the groups the setting has; closed settings use
    /// every class.
    pub fn effective_group_counts(&self) -> GroupCounts {
        let g = self.group_counts;
        match self.setting {
            Setting::Closed | Setting::ClosedLabelShift => GroupCounts::default(),
            Setting::Open => GroupCounts::new(g.common, 0, g.target_private),
            Setting::Partial => GroupCounts::new(g.common, g.source_private, 0),
            Setting::OpenPartial => g,
        }
    }

    pub fn synthetic_for(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.synthetic.seed.wrapping_add(seed),
            ..self.synthetic.clone()
        }
    }

    pub fn train_for(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            seed,
            ..self.train.clone()
        }
    }

    /// Grid cells in execution and aggregation order: methods outer, seeds inner.
    pub fn grid(&self) -> Vec<(Method, u64)> {
        self.methods
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .collect()
    }

    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        relative_run_dir(self.setting, method, seed)
    }
}

fn relative_run_dir(setting: Setting, method: Method, seed: u64) -> PathBuf {
    PathBuf::from("runs")
        .join(setting.name())
        .join(method.name())
        .join(format!("seed{seed}"))
}

/// Generates, restricts, splits and labels the data of one run seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<TrainData> {
    let (src, trg) = generate_domain_pair(&cfg.synthetic_for(seed))?;
    let (src, trg, ls) = apply_label_space_setting(&src, &trg, cfg.setting, cfg.effective_group_counts())?;
    let trg = split_and_label(&trg, cfg.k_shot, seed)?;
    TrainData::new(src, trg, ls)
}

/// Everything one grid cell produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub model: InferenceModel,
    pub history: TrainHistory,
    pub inductive: MetricsReport,
    pub transductive: MetricsReport,
}

pub fn run_single(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    refinement_log: Option<&mut RefinementLog>,
) -> Result<RunResult> {
    let data = prepare_data(cfg, seed)?;
    let (state, history) = run_with_state(&cfg.train_for(method, seed), &data, refinement_log)?;
    let model = state.into_inference_model();
    let report = |kind: SplitKind| {
        evaluate(&model, &kind.select(&data.target), &data.groups, &data.masks.target, kind)
    };
    Ok(RunResult {
        method,
        seed,
        inductive: report(SplitKind::InductiveTest)?,
        transductive: report(SplitKind::TransductiveUnlabeledTrain)?,
        model,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Aborted,
}

/// One line of `report.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub setting: Setting,
    pub seed: u64,
    pub report: MetricsReport,
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndexEntry {
    pub method: Method,
    pub setting: Setting,
    pub seed: u64,
    pub status: RunStatus,
    /// Relative to the output directory.
    pub dir: PathBuf,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDigests {
    pub seed: u64,
    pub source: String,
    pub target: String,
    /// Digest of the target sample indices in each split, plus the labeled subset.
    pub splits: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub csv_version: u32,
    pub report_csv_columns: Vec<String>,
    pub summary_csv_columns: Vec<String>,
    pub label_space: LabelSpaceConfig,
    pub group_sizes: BTreeMap<String, usize>,
    pub groups: crate::datagen::ClassGroups,
    pub datasets: Vec<DatasetDigests>,
}

fn index_digest(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    let mut s = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    Ok(s)
}

/// Writes every seed's source/target datasets (binary and JSONL) and `manifest.json`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let out = &cfg.output_dir;
    let mut datasets = Vec::new();
    let mut label_space = None;
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, seed)?;
        let dir = out.join("data").join(format!("seed{seed}"));
        create_dir(&dir)?;
        write_binary(&data.source, &dir.join("source.bin"))?;
        write_binary(&data.target, &dir.join("target.bin"))?;
        write_jsonl(&data.source, &dir.join("source.jsonl"))?;
        write_jsonl(&data.target, &dir.join("target.jsonl"))?;
        let t = &data.target;
        let splits = [
            ("train", t.indices(Some(Split::Train), None)),
            ("val", t.indices(Some(Split::Val), None)),
            ("test", t.indices(Some(Split::Test), None)),
            ("labeled", t.indices(None, Some(true))),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), index_digest(&v)))
        .collect();
        datasets.push(DatasetDigests {
            seed,
            source: dataset_digest(&data.source),
            target: dataset_digest(&data.target),
            splits,
        });
        label_space = Some(data.label_space);
    }
    let label_space = label_space.expect("seeds validated nonempty");
    let groups = class_groups(&label_space);
    let manifest = Manifest {
        csv_version: CSV_VERSION,
        report_csv_columns: REPORT_CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
        summary_csv_columns: SUMMARY_CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
        group_sizes: [
            ("common".to_string(), groups.common.len()),
            ("source_private".to_string(), groups.source_private.len()),
            ("target_private".to_string(), groups.target_private.len()),
        ]
        .into(),
        groups,
        label_space,
        datasets,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_text(&path, &(text + "\n"))?;
    Ok(manifest)
}

/// Human-readable grid for `--dry-run`.
pub fn describe_grid(cfg: &ExperimentConfig) -> String {
    let mut s = format!(
        "setting {} ({} classes, groups {:?}), k = {}, {} iterations, output {}\n",
        cfg.setting,
        cfg.synthetic.num_classes_total,
        cfg.effective_group_counts(),
        cfg.k_shot,
        cfg.train.iterations,
        cfg.output_dir.display()
    );
    for (m, seed) in cfg.grid() {
        s.push_str(&format!("  {m} seed {seed} -> {}\n", cfg.run_dir(m, seed).display()));
    }
    s.push_str(&format!("{} runs\n", cfg.grid().len()));
    s
}

fn write_run(cfg: &ExperimentConfig, result: &RunResult, dir: &Path) -> Result<()> {
    let report_path = dir.join("report.jsonl");
    let mut text = String::new();
    for report in [&result.inductive, &result.transductive] {
        let rec = RunRecord {
            method: result.method,
            setting: cfg.setting,
            seed: result.seed,
            report: report.clone(),
        };
        text.push_str(&json_line(&rec, &report_path)?);
    }
    write_text(&report_path, &text)?;
    result.history.write_jsonl(&dir.join("history.jsonl"))?;
    let ckpt = dir.join("checkpoint.jsonl");
    write_text(&ckpt, &json_line(&result.model, &ckpt)?)?;
    write_params(&result.model.head, &dir.join("head.bin"))
}

/// Outcome of `cmd_run`.
#[derive(Debug, Clone)]
pub struct RunSummaryFiles {
    pub index: Vec<RunIndexEntry>,
    pub warnings: Vec<String>,
}

fn execute_cell(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<RunIndexEntry> {
    let rel = cfg.run_dir(method, seed);
    let dir = cfg.output_dir.join(&rel);
    create_dir(&dir)?;
    let mut log = if cfg.debug_refinements {
        Some(RefinementLog::create(&dir.join("refinements.jsonl"))?)
    } else {
        None
    };
    let entry = |status, error| RunIndexEntry {
        method,
        setting: cfg.setting,
        seed,
        status,
        dir: rel.clone(),
        error,
    };
    match run_single(cfg, method, seed, log.as_mut()) {
        Ok(result) => {
            write_run(cfg, &result, &dir)?;
            Ok(entry(RunStatus::Ok, None))
        }
        Err(e @ Error::Numerical { .. }) => Ok(entry(RunStatus::Aborted, Some(e.to_string()))),
        Err(e) => Err(e),
    }
}

/// Runs every grid cell, using up to `workers` threads, then aggregates.
pub fn cmd_run(cfg: &ExperimentConfig, workers: usize) -> Result<RunSummaryFiles> {
    create_dir(&cfg.output_dir)?;
    let grid = cfg.grid();
    let workers = workers.clamp(1, grid.len().max(1));
    let mut slots: Vec<Option<Result<RunIndexEntry>>> = (0..grid.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(method, seed)) = grid.get(i) else { break };
                let r = execute_cell(cfg, method, seed);
                results.lock().expect("no poisoned runs")[i] = Some(r);
            });
        }
    });
    let index = slots
        .into_iter()
        .map(|s| s.expect("every cell executed"))
        .collect::<Result<Vec<_>>>()?;

    let index_path = cfg.output_dir.join("runs.jsonl");
    let mut text = String::new();
    for e in &index {
        text.push_str(&json_line(e, &index_path)?);
    }
    write_text(&index_path, &text)?;
    let warnings = reaggregate(&cfg.output_dir)?;
    Ok(RunSummaryFiles { index, warnings })
}

pub fn read_run_index(out_dir: &Path) -> Result<Vec<RunIndexEntry>> {
    read_jsonl_lines(&out_dir.join("runs.jsonl"))
}

fn read_jsonl_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Rebuilds `reports.csv`, `aggregate.csv` and `aggregate_transductive.csv` from
/// `runs.jsonl` and the per-run report files. Returns warnings for excluded runs.
pub fn reaggregate(out_dir: &Path) -> Result<Vec<String>> {
    let index = read_run_index(out_dir)?;
    let mut warnings = Vec::new();
    let mut per_run = format!("{}\n", REPORT_CSV_COLUMNS.join(","));
    let mut groups: BTreeMap<(SplitKind, usize), (Method, Setting, Vec<MetricsReport>)> = BTreeMap::new();
    let mut method_order: Vec<(Method, Setting)> = Vec::new();
    for e in &index {
        if !method_order.contains(&(e.method, e.setting)) {
            method_order.push((e.method, e.setting));
        }
        if e.status != RunStatus::Ok {
            warnings.push(format!(
                "excluding aborted run {} seed {}: {}",
                e.method,
                e.seed,
                e.error.as_deref().unwrap_or("unknown error")
            ));
            continue;
        }
        let order = method_order.iter().position(|k| *k == (e.method, e.setting)).expect("just inserted");
        let records: Vec<RunRecord> = read_jsonl_lines(&out_dir.join(&e.dir).join("report.jsonl"))?;
        for r in records {
            per_run.push_str(&r.report.csv_row(r.method.name(), r.setting.name(), r.seed));
            per_run.push('\n');
            groups
                .entry((r.report.split_kind, order))
                .or_insert_with(|| (r.method, r.setting, Vec::new()))
                .2
                .push(r.report);
        }
    }
    write_text(&out_dir.join("reports.csv"), &per_run)?;
    for (kind, file) in [
        (SplitKind::InductiveTest, "aggregate.csv"),
        (SplitKind::TransductiveUnlabeledTrain, "aggregate_transductive.csv"),
    ] {
        let mut text = format!("{}\n", SUMMARY_CSV_COLUMNS.join(","));
        for ((k, _), (method, setting, reports)) in &groups {
            if *k != kind {
                continue;
            }
            let summary = aggregate_runs(reports)?;
            text.push_str(&summary.csv_row(method.name(), setting.name(), kind));
            text.push('\n');
        }
        write_text(&out_dir.join(file), &text)?;
    }
    Ok(warnings)
}

pub const DIAGNOSTIC_CSV_COLUMNS: [&str; 8] = [
    "iteration",
    "mu",
    "private_as_common_rate",
    "target_private_accuracy",
    "predicted_private_fraction",
    "common_accuracy",
    "overall_accuracy",
    "pseudo_label_accuracy",
];

/// Per-iteration diagnostics of one history; every value is copied from the
/// history's evaluation reports.
pub fn diagnostics_csv(history: &TrainHistory) -> String {
    let mut s = format!("{}\n", DIAGNOSTIC_CSV_COLUMNS.join(","));
    for r in &history.records {
        let m = &r.transductive;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.mu,
            m.private_as_common_rate,
            m.target_private_accuracy,
            m.predicted_private_fraction,
            m.common_accuracy,
            m.overall_accuracy,
            r.pseudo_label_accuracy.map_or(String::new(), |v| v.to_string()),
        ));
    }
    s
}

/// Writes `diagnostics.csv` next to every `history.jsonl` under `run_dir`.
pub fn cmd_diagnose(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut histories = Vec::new();
    find_histories(run_dir, &mut histories)?;
    if histories.is_empty() {
        return Err(Error::Data(format!("no history.jsonl under {}", run_dir.display())));
    }
    histories.sort();
    let mut written = Vec::new();
    for h in histories {
        let history = TrainHistory::read_jsonl(&h)?;
        if history.records.is_empty() {
            return Err(Error::Data(format!("{} has no logged iterations", h.display())));
        }
        let out = h.with_file_name("diagnostics.csv");
        write_text(&out, &diagnostics_csv(&history))?;
        written.push(out);
    }
    Ok(written)
}

fn find_histories(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            find_histories(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "history.jsonl") {
            out.push(path);
        }
    }
    Ok(())
}
