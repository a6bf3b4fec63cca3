//! Experiment grid at desk scale: reference training, baseline and
//! ablation arms, multi-seed aggregation, and table rendering.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_synthetic, load_dataset, partition_by_frequency, DataError, Dataset, LabelPartition,
    SplitSpec, SyntheticConfig,
};
use crate::grpo::{train_from, Mode, OptimizerState, TrainConfig, TrainError, TrainState, TrainTrace};
use crate::losses::{LossConfig, PrivilegedFlags, Variant};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{snapshot_reference, Checkpoint, ModelError, ModelParams, ReferenceParams};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("duplicate arm name `{0}`")]
    DuplicateArm(String),
    #[error("arm `{arm}` depends on reference arm `{reference}`, which is not in the plan")]
    MissingReferenceArm { arm: String, reference: String },
    #[error("reference arm `{0}` must use a single-loss mode")]
    BadReferenceMode(String),
    #[error("delta baseline arm `{0}` is not in the plan")]
    MissingDeltaBaseline(String),
    #[error("arms were evaluated on different test splits; refusing to aggregate")]
    SplitMismatch,
    #[error("no arms in plan")]
    EmptyPlan,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("plan file invalid: {0}")]
    BadPlan(String),
}

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Files { features: PathBuf, labels: PathBuf },
}

/// Head architecture for every model in the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![16, 8]
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec::Linear
    }
}

impl HeadSpec {
    fn init(&self, n_labels: usize, n_features: usize, seed: u64) -> ModelParams<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        match self {
            HeadSpec::Linear => ModelParams::init_linear(n_labels, n_features, &mut rng),
            HeadSpec::Mlp { hidden } => {
                ModelParams::init_mlp(n_labels, n_features, hidden, &mut rng)
            }
        }
    }
}

/// Per-arm hyperparameter overrides on top of the plan defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    pub eta_theta: Option<f64>,
    pub eta_alpha: Option<f64>,
    pub max_iterations: Option<u64>,
    pub batch_size: Option<usize>,
    pub fixed_weight_p: Option<f64>,
    pub beta: Option<f64>,
    pub gamma_margin: Option<f64>,
    pub lambda_cpo: Option<f64>,
    pub epsilon_slack: Option<f64>,
    pub focal_gamma: Option<f64>,
    pub focal_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub mode: Mode,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub flags: PrivilegedFlags,
    #[serde(default)]
    pub np_constraint_off: bool,
    /// Name of the arm providing this arm's reference checkpoint. The
    /// reference arm itself leaves this unset.
    #[serde(default)]
    pub reference_arm: Option<String>,
    #[serde(default)]
    pub hyperparameters: HyperOverrides,
}

fn default_variant() -> Variant {
    Variant::Cpo
}

impl ArmSpec {
    fn to_config(&self, plan: &ExperimentPlan, seed: u64) -> TrainConfig<f64> {
        let h = &self.hyperparameters;
        let d = &plan.defaults;
        let loss = LossConfig {
            beta: h.beta.unwrap_or(d.beta),
            gamma_margin: h.gamma_margin.unwrap_or(d.gamma_margin),
            lambda_cpo: h.lambda_cpo.unwrap_or(d.lambda_cpo),
            epsilon_slack: h.epsilon_slack.unwrap_or(d.epsilon_slack),
            focal_gamma: h.focal_gamma.unwrap_or(d.focal_gamma),
            focal_alpha: h.focal_alpha.unwrap_or(d.focal_alpha),
        };
        TrainConfig {
            eta_theta: h.eta_theta.unwrap_or(d.eta_theta),
            eta_alpha: h.eta_alpha.unwrap_or(d.eta_alpha),
            max_iterations: h.max_iterations.unwrap_or(d.max_iterations),
            batch_size: h.batch_size.unwrap_or(d.batch_size),
            variant: self.variant,
            mode: self.mode,
            fixed_weight_p: h.fixed_weight_p.unwrap_or(0.5),
            flags: self.flags,
            np_constraint_off: self.np_constraint_off,
            loss,
            seed,
            eval_every: 0,
        }
    }
}

/// Plan-level hyperparameter defaults, overridable per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDefaults {
    #[serde(default = "d_eta_theta")]
    pub eta_theta: f64,
    #[serde(default = "d_eta_alpha")]
    pub eta_alpha: f64,
    #[serde(default = "d_max_iterations")]
    pub max_iterations: u64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_gamma_margin")]
    pub gamma_margin: f64,
    #[serde(default = "d_lambda_cpo")]
    pub lambda_cpo: f64,
    #[serde(default = "d_epsilon_slack")]
    pub epsilon_slack: f64,
    #[serde(default = "d_focal_gamma")]
    pub focal_gamma: f64,
    #[serde(default = "d_focal_alpha")]
    pub focal_alpha: f64,
}

fn d_eta_theta() -> f64 {
    0.05
}
fn d_eta_alpha() -> f64 {
    0.1
}
fn d_max_iterations() -> u64 {
    20_000
}
fn d_batch_size() -> usize {
    32
}
fn d_beta() -> f64 {
    1.0
}
fn d_gamma_margin() -> f64 {
    0.3
}
fn d_lambda_cpo() -> f64 {
    1.0
}
fn d_epsilon_slack() -> f64 {
    0.05
}
fn d_focal_gamma() -> f64 {
    2.0
}
fn d_focal_alpha() -> f64 {
    0.25
}

impl Default for PlanDefaults {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: DatasetSource,
    pub partition_fraction: f64,
    pub split: SplitSpec,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub defaults: PlanDefaults,
    pub arms: Vec<ArmSpec>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Arm whose mean report anchors the ΔmAP columns.
    #[serde(default = "default_delta_baseline")]
    pub delta_baseline: String,
}

fn default_delta_baseline() -> String {
    "BCE-SFT".to_string()
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let text = fs::read_to_string(path).map_err(|e| PlanError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let plan: ExperimentPlan =
            serde_json::from_str(&text).map_err(|e| PlanError::BadPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.arms.is_empty() {
            return Err(PlanError::EmptyPlan);
        }
        let mut seen = std::collections::BTreeSet::new();
        for arm in &self.arms {
            if !seen.insert(arm.name.clone()) {
                return Err(PlanError::DuplicateArm(arm.name.clone()));
            }
        }
        for arm in &self.arms {
            if let Some(reference) = &arm.reference_arm {
                let found = self
                    .arms
                    .iter()
                    .find(|a| &a.name == reference)
                    .ok_or_else(|| PlanError::MissingReferenceArm {
                        arm: arm.name.clone(),
                        reference: reference.clone(),
                    })?;
                if !matches!(found.mode, Mode::SingleLossBce | Mode::SingleLossFocal) {
                    return Err(PlanError::BadReferenceMode(found.name.clone()));
                }
            }
        }
        if !self.arms.iter().any(|a| a.name == self.delta_baseline) {
            return Err(PlanError::MissingDeltaBaseline(self.delta_baseline.clone()));
        }
        Ok(())
    }

    /// The Tables 1 and 3/4 arm grid on the synthetic benchmark.
    pub fn default_plan(out_dir: PathBuf) -> Self {
        let fairpo = |name: &str, variant: Variant| ArmSpec {
            name: name.to_string(),
            mode: Mode::FairPo,
            variant,
            flags: PrivilegedFlags::default(),
            np_constraint_off: false,
            reference_arm: Some("BCE-SFT".to_string()),
            hyperparameters: HyperOverrides::default(),
        };
        let arms = vec![
            ArmSpec {
                name: "BCE-SFT".to_string(),
                mode: Mode::SingleLossBce,
                variant: Variant::Cpo,
                flags: PrivilegedFlags::default(),
                np_constraint_off: false,
                reference_arm: None,
                hyperparameters: HyperOverrides::default(),
            },
            ArmSpec {
                name: "GDRO + BCE".to_string(),
                mode: Mode::FairPo,
                variant: Variant::Cpo,
                flags: PrivilegedFlags { preference_off: true, ..Default::default() },
                np_constraint_off: true,
                reference_arm: Some("BCE-SFT".to_string()),
                hyperparameters: HyperOverrides::default(),
            },
            ArmSpec {
                name: "Focal Loss".to_string(),
                mode: Mode::SingleLossFocal,
                variant: Variant::Cpo,
                flags: PrivilegedFlags::default(),
                np_constraint_off: false,
                reference_arm: None,
                hyperparameters: HyperOverrides::default(),
            },
            fairpo("FairPO-DPO", Variant::Dpo),
            fairpo("FairPO-SimPO", Variant::SimPo),
            fairpo("FairPO-CPO", Variant::Cpo),
            ArmSpec {
                flags: PrivilegedFlags { preference_off: true, ..Default::default() },
                ..fairpo("w/o Preference Loss", Variant::Cpo)
            },
            ArmSpec {
                np_constraint_off: true,
                ..fairpo("w/o P̄ Constraint", Variant::Cpo)
            },
            ArmSpec {
                mode: Mode::FixedWeights,
                ..fairpo("w/o GRPO", Variant::Cpo)
            },
            ArmSpec {
                mode: Mode::GlobalPreference,
                ..fairpo("Global CPO", Variant::Cpo)
            },
            ArmSpec {
                flags: PrivilegedFlags { only_confusing_negatives: true, ..Default::default() },
                ..fairpo("Only Confusing Negatives", Variant::Cpo)
            },
            ArmSpec {
                flags: PrivilegedFlags { no_bce_fallback: true, ..Default::default() },
                ..fairpo("w/o BCE Fallback", Variant::Cpo)
            },
        ];
        ExperimentPlan {
            dataset: DatasetSource::Synthetic(SyntheticConfig {
                n_instances: 2000,
                n_labels: 20,
                n_features: 16,
                base_prevalence: 0.4,
                zipf_exponent: 1.0,
                sibling_overlap: 0.7,
                seed: 2024,
            }),
            partition_fraction: 0.2,
            split: SplitSpec { train_fraction: 0.7, seed: 99 },
            head: HeadSpec::Linear,
            defaults: PlanDefaults::default(),
            arms,
            seeds: vec![1, 2, 3],
            out_dir,
            delta_baseline: default_delta_baseline(),
        }
    }

    pub fn materialize_dataset(&self) -> Result<Dataset<f64>, PlanError> {
        match &self.dataset {
            DatasetSource::Synthetic(cfg) => Ok(generate_synthetic(cfg)?),
            DatasetSource::Files { features, labels } => Ok(load_dataset(features, labels)?),
        }
    }
}

/// Mean/std summary across seeds for the headline metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub map_p: f64,
    pub map_np: f64,
    pub sample_f1_p: f64,
    pub sample_f1_np: f64,
    pub accuracy_p: f64,
    pub accuracy_np: f64,
}

impl MetricsSummary {
    fn fields(r: &MetricsReport) -> [f64; 6] {
        [r.map_p, r.map_np, r.sample_f1_p, r.sample_f1_np, r.accuracy_p, r.accuracy_np]
    }

    fn from_array(a: [f64; 6]) -> Self {
        MetricsSummary {
            map_p: a[0],
            map_np: a[1],
            sample_f1_p: a[2],
            sample_f1_np: a[3],
            accuracy_p: a[4],
            accuracy_np: a[5],
        }
    }
}

/// Mean and sample standard deviation per headline metric.
pub fn summarize(reports: &[MetricsReport]) -> (MetricsSummary, MetricsSummary) {
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(MetricsSummary::fields(r)) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 6];
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in std.iter_mut().zip(MetricsSummary::fields(r)).zip(mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        for s in &mut std {
            *s = s.sqrt();
        }
    }
    (MetricsSummary::from_array(mean), MetricsSummary::from_array(std))
}

/// One arm's aggregated outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsSummary,
    pub std: MetricsSummary,
    pub delta_map_p: Option<f64>,
    pub delta_map_np: Option<f64>,
    /// Cheap identity of the test split the reports were computed on.
    pub test_fingerprint: u64,
}

/// Order-sensitive fingerprint of a dataset's contents.
pub fn dataset_fingerprint(ds: &Dataset<f64>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    ds.n_instances().hash(&mut h);
    ds.n_labels().hash(&mut h);
    for i in 0..ds.n_instances() {
        for v in ds.features(i) {
            v.to_bits().hash(&mut h);
        }
        ds.labels(i).hash(&mut h);
    }
    h.finish()
}

/// Plain BCE training from scratch; the snapshot anchors every dependent arm.
pub fn train_reference(
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    partition: &LabelPartition,
    head: &HeadSpec,
    cfg: &TrainConfig<f64>,
) -> Result<(ReferenceParams<f64>, MetricsReport, TrainState<f64>, TrainTrace<f64>), PlanError> {
    let initial = head.init(train.n_labels(), train.n_features(), cfg.seed);
    let (state, trace) = train_from(initial, train, partition, None, cfg)?;
    let reference = snapshot_reference(&state.model);
    let report = evaluate(&state.model, test, partition, None)?;
    Ok((reference, report, state, trace))
}

struct SeedRun {
    seed: u64,
    reports: Vec<(String, MetricsReport)>,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PlanError> {
    let io_err = |p: &Path, source| PlanError::Io {
        path: p.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn arm_slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Report JSON wrapper carrying provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub arm: String,
    pub seed: u64,
    pub config: TrainConfig<f64>,
    pub report: MetricsReport,
}

fn run_seed(
    plan: &ExperimentPlan,
    train_ds: &Dataset<f64>,
    test_ds: &Dataset<f64>,
    partition: &LabelPartition,
    seed: u64,
    write_outputs: bool,
) -> Result<SeedRun, PlanError> {
    // Train every referenced single-loss arm first so dependents can reuse it.
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    let mut references: std::collections::BTreeMap<String, ReferenceParams<f64>> =
        std::collections::BTreeMap::new();

    let out_arm = |arm: &ArmSpec, state: &TrainState<f64>, trace: &TrainTrace<f64>,
                   report: &MetricsReport, cfg: &TrainConfig<f64>|
     -> Result<(), PlanError> {
        if !write_outputs {
            return Ok(());
        }
        let dir = plan.out_dir.join(arm_slug(&arm.name)).join(format!("seed_{seed}"));
        Checkpoint::from_model(&state.model, seed).save(&dir.join("model.json"))?;
        OptimizerState::from_state(state).save(&dir.join("optimizer.json"))?;
        trace.write_csv(&dir.join("trace.csv"))?;
        let wrapped = ReportFile {
            format_version: 1,
            arm: arm.name.clone(),
            seed,
            config: cfg.clone(),
            report: report.clone(),
        };
        let json = serde_json::to_vec_pretty(&wrapped).map_err(|e| PlanError::BadPlan(e.to_string()))?;
        atomic_write(&dir.join("report.json"), &json)?;
        Ok(())
    };

    for arm in &self_and_deps_order(&plan.arms) {
        let cfg = arm.to_config(plan, seed);
        match arm.reference_arm.as_deref() {
            None => {
                let (reference, report, state, trace) =
                    train_reference(train_ds, test_ds, partition, &plan.head, &cfg)?;
                out_arm(arm, &state, &trace, &report, &cfg)?;
                references.insert(arm.name.clone(), reference);
                reports.push((arm.name.clone(), report));
            }
            Some(ref_name) => {
                let reference = references
                    .get(ref_name)
                    .ok_or_else(|| PlanError::MissingReferenceArm {
                        arm: arm.name.clone(),
                        reference: ref_name.to_string(),
                    })?
                    .clone();
                let (state, trace) = crate::grpo::train(train_ds, partition, &reference, &cfg)?;
                let report = evaluate(&state.model, test_ds, partition, None)?;
                out_arm(arm, &state, &trace, &report, &cfg)?;
                reports.push((arm.name.clone(), report));
            }
        }
    }
    Ok(SeedRun { seed, reports })
}

/// Referenced arms (no `reference_arm`) first, in plan order, then the rest.
fn self_and_deps_order(arms: &[ArmSpec]) -> Vec<ArmSpec> {
    let mut ordered: Vec<ArmSpec> = arms.iter().filter(|a| a.reference_arm.is_none()).cloned().collect();
    ordered.extend(arms.iter().filter(|a| a.reference_arm.is_some()).cloned());
    ordered
}

/// Executes the whole grid: every arm, every seed. `jobs > 1` runs seeds in
/// parallel. Returns the per-arm results in plan order.
pub fn run_plan(plan: &ExperimentPlan, jobs: usize, write_outputs: bool) -> Result<Vec<ArmResult>, PlanError> {
    plan.validate()?;
    let dataset = plan.materialize_dataset()?;
    let (train_ds, test_ds) = dataset.split(&plan.split)?;
    let partition = partition_by_frequency(&train_ds, plan.partition_fraction)?;
    let fingerprint = dataset_fingerprint(&test_ds);

    let mut seed_runs: Vec<SeedRun> = Vec::with_capacity(plan.seeds.len());
    if jobs > 1 {
        let results: Vec<Result<SeedRun, PlanError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = plan
                .seeds
                .iter()
                .map(|&seed| {
                    let (train_ds, test_ds, partition) = (&train_ds, &test_ds, &partition);
                    scope.spawn(move || {
                        run_seed(plan, train_ds, test_ds, partition, seed, write_outputs)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed thread")).collect()
        });
        for r in results {
            seed_runs.push(r?);
        }
    } else {
        for &seed in &plan.seeds {
            seed_runs.push(run_seed(plan, &train_ds, &test_ds, &partition, seed, write_outputs)?);
        }
    }
    seed_runs.sort_by_key(|r| {
        plan.seeds.iter().position(|&s| s == r.seed).unwrap_or(usize::MAX)
    });

    // Per-arm aggregation with deltas against the baseline arm's mean.
    let mut results = Vec::with_capacity(plan.arms.len());
    let baseline_mean = {
        let reports: Vec<MetricsReport> = seed_runs
            .iter()
            .flat_map(|run| {
                run.reports
                    .iter()
                    .filter(|(n, _)| n == &plan.delta_baseline)
                    .map(|(_, r)| r.clone())
            })
            .collect();
        summarize(&reports).0
    };
    for arm in &plan.arms {
        let per_seed: Vec<MetricsReport> = seed_runs
            .iter()
            .flat_map(|run| {
                run.reports
                    .iter()
                    .filter(|(n, _)| n == &arm.name)
                    .map(|(_, r)| r.clone())
            })
            .collect();
        let (mean, std) = summarize(&per_seed);
        results.push(ArmResult {
            name: arm.name.clone(),
            per_seed,
            delta_map_p: Some(mean.map_p - baseline_mean.map_p),
            delta_map_np: Some(mean.map_np - baseline_mean.map_np),
            mean,
            std,
            test_fingerprint: fingerprint,
        });
    }

    if write_outputs {
        let (text, json) = aggregate(&results)?;
        atomic_write(&plan.out_dir.join("aggregate.txt"), text.as_bytes())?;
        atomic_write(&plan.out_dir.join("aggregate.json"), json.as_bytes())?;
        let plan_json =
            serde_json::to_vec_pretty(plan).map_err(|e| PlanError::BadPlan(e.to_string()))?;
        atomic_write(&plan.out_dir.join("plan.json"), &plan_json)?;
    }
    Ok(results)
}

/// Cross-arm comparison: plain-text table (columns mAP/F1/Acc × P/P̄ plus
/// ΔmAP) and machine-readable JSON. The best value per column is starred.
pub fn aggregate(results: &[ArmResult]) -> Result<(String, String), PlanError> {
    if results.is_empty() {
        return Err(PlanError::EmptyPlan);
    }
    let fp = results[0].test_fingerprint;
    if results.iter().any(|r| r.test_fingerprint != fp) {
        return Err(PlanError::SplitMismatch);
    }

    let col = |f: fn(&MetricsSummary) -> f64| -> Vec<f64> {
        results.iter().map(|r| f(&r.mean)).collect()
    };
    let best = |vals: &[f64]| -> usize {
        vals.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    };
    let columns: Vec<Vec<f64>> = vec![
        col(|m| m.map_p),
        col(|m| m.map_np),
        col(|m| m.sample_f1_p),
        col(|m| m.sample_f1_np),
        col(|m| m.accuracy_p),
        col(|m| m.accuracy_np),
    ];
    let bests: Vec<usize> = columns.iter().map(|c| best(c)).collect();

    let mut text = String::new();
    text.push_str(&format!(
        "{:<28} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14} {:>9} {:>9}\n",
        "Method", "mAP(P)", "mAP(P~)", "F1(P)", "F1(P~)", "Acc(P)", "Acc(P~)", "dmAP(P)", "dmAP(P~)"
    ));
    for (i, r) in results.iter().enumerate() {
        let cell = |c: usize, mean: f64, std: f64| {
            let star = if bests[c] == i { "*" } else { "" };
            format!("{mean:.2}±{std:.2}{star}")
        };
        let s = &r.std;
        let m = &r.mean;
        text.push_str(&format!(
            "{:<28} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14} {:>9} {:>9}\n",
            r.name,
            cell(0, m.map_p, s.map_p),
            cell(1, m.map_np, s.map_np),
            cell(2, m.sample_f1_p, s.sample_f1_p),
            cell(3, m.sample_f1_np, s.sample_f1_np),
            cell(4, m.accuracy_p, s.accuracy_p),
            cell(5, m.accuracy_np, s.accuracy_np),
            r.delta_map_p.map_or("-".to_string(), |d| format!("{d:+.2}")),
            r.delta_map_np.map_or("-".to_string(), |d| format!("{d:+.2}")),
        ));
    }
    let json = serde_json::to_string_pretty(results).map_err(|e| PlanError::BadPlan(e.to_string()))?;
    Ok((text, json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::bce;

    fn tiny_plan(out: PathBuf) -> ExperimentPlan {
        let mut plan = ExperimentPlan::default_plan(out);
        plan.dataset = DatasetSource::Synthetic(SyntheticConfig {
            n_instances: 150,
            n_labels: 8,
            n_features: 6,
            base_prevalence: 0.4,
            zipf_exponent: 1.0,
            sibling_overlap: 0.7,
            seed: 4,
        });
        plan.partition_fraction = 0.25;
        plan.defaults.max_iterations = 60;
        plan.defaults.batch_size = 4;
        plan.seeds = vec![1, 2];
        plan.arms.retain(|a| {
            matches!(a.name.as_str(), "BCE-SFT" | "FairPO-CPO" | "w/o GRPO")
        });
        plan
    }

    fn mean_bce(model: &ModelParams<f64>, ds: &Dataset<f64>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..ds.n_instances() {
            let scores = model.forward(ds.features(i)).unwrap();
            for t in 0..ds.n_labels() {
                total += bce(scores.get(t), ds.labels(i)[t]).0;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn reference_training_improves_train_bce() {
        let plan = tiny_plan(PathBuf::from("unused"));
        let ds = plan.materialize_dataset().unwrap();
        let (train_ds, test_ds) = ds.split(&plan.split).unwrap();
        let partition = partition_by_frequency(&train_ds, plan.partition_fraction).unwrap();
        let cfg = plan.arms[0].to_config(&plan, 1);
        let initial = plan.head.init(train_ds.n_labels(), train_ds.n_features(), cfg.seed);
        let before = mean_bce(&initial, &train_ds);
        let (reference, _report, _state, _trace) =
            train_reference(&train_ds, &test_ds, &partition, &plan.head, &cfg).unwrap();
        let after = mean_bce(reference.model(), &train_ds);
        assert!(after < before, "bce before {before}, after {after}");
    }

    #[test]
    fn plan_validation_catches_errors() {
        let mut plan = tiny_plan(PathBuf::from("unused"));
        plan.arms[1].reference_arm = Some("nope".to_string());
        assert!(matches!(
            plan.validate(),
            Err(PlanError::MissingReferenceArm { .. })
        ));

        let mut plan = tiny_plan(PathBuf::from("unused"));
        plan.arms[1].name = "BCE-SFT".to_string();
        assert!(matches!(plan.validate(), Err(PlanError::DuplicateArm(_))));

        let mut plan = tiny_plan(PathBuf::from("unused"));
        plan.delta_baseline = "missing".to_string();
        assert!(matches!(plan.validate(), Err(PlanError::MissingDeltaBaseline(_))));
    }

    #[test]
    fn run_plan_is_deterministic_and_fixed_weights_stay_fixed() {
        let plan = tiny_plan(PathBuf::from("unused"));
        let r1 = run_plan(&plan, 1, false).unwrap();
        let r2 = run_plan(&plan, 1, false).unwrap();
        assert_eq!(r1, r2);
        // Parallel seed execution gives identical numbers.
        let r3 = run_plan(&plan, 2, false).unwrap();
        assert_eq!(r1, r3);
        assert_eq!(r1.len(), 3);
        // Baseline deltas: BCE-SFT vs itself is zero.
        let bce_arm = &r1[0];
        assert_eq!(bce_arm.name, "BCE-SFT");
        assert_eq!(bce_arm.delta_map_p, Some(0.0));
    }

    #[test]
    fn aggregate_math_on_fixtures() {
        let mk_report = |map_p: f64| MetricsReport {
            format_version: 1,
            map_p,
            map_np: 50.0,
            sample_f1_p: 10.0,
            sample_f1_np: 20.0,
            accuracy_p: 30.0,
            accuracy_np: 40.0,
            per_label_ap: vec![],
            delta_map_p: None,
            delta_map_np: None,
            excluded_labels: vec![],
            empty_f1_instances_p: 0,
            empty_f1_instances_np: 0,
        };
        let reports = vec![mk_report(10.0), mk_report(20.0), mk_report(30.0)];
        let (mean, std) = summarize(&reports);
        assert!((mean.map_p - 20.0).abs() < 1e-12);
        assert!((std.map_p - 10.0).abs() < 1e-12);

        let arm = |name: &str, map_p: f64| ArmResult {
            name: name.to_string(),
            per_seed: vec![],
            mean: MetricsSummary { map_p, ..Default::default() },
            std: MetricsSummary::default(),
            delta_map_p: Some(map_p - 10.0),
            delta_map_np: Some(0.0),
            test_fingerprint: 7,
        };
        let (text, _json) = aggregate(&[arm("a", 10.0), arm("b", 15.0)]).unwrap();
        assert!(text.contains("+5.00"));

        let mut mismatched = arm("c", 1.0);
        mismatched.test_fingerprint = 8;
        assert!(matches!(
            aggregate(&[arm("a", 10.0), mismatched]),
            Err(PlanError::SplitMismatch)
        ));
    }

    #[test]
    fn run_plan_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(dir.path().join("out"));
        plan.seeds = vec![1];
        plan.defaults.max_iterations = 20;
        run_plan(&plan, 1, true).unwrap();
        for sub in ["bce_sft", "fairpo_cpo", "w_o_grpo"] {
            let d = plan.out_dir.join(sub).join("seed_1");
            for f in ["model.json", "optimizer.json", "trace.csv", "report.json"] {
                assert!(d.join(f).exists(), "{sub}/{f} missing");
            }
        }
        assert!(plan.out_dir.join("aggregate.txt").exists());
        assert!(plan.out_dir.join("aggregate.json").exists());
    }
}
