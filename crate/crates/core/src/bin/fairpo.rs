//! Command-line front end: dataset generation, reference and robust
//! training, evaluation, and experiment-plan execution.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fairpo::data::{
    generate_synthetic, load_dataset, partition_by_frequency, write_dataset, Dataset,
    LabelPartition, SplitSpec, SyntheticConfig,
};
use fairpo::experiments::{aggregate, run_plan, ArmResult, ExperimentPlan, HeadSpec};
use fairpo::grpo::{Mode, TrainConfig, TrainState, TrainTrace};
use fairpo::losses::{LossConfig, PrivilegedFlags, Variant};
use fairpo::metrics::{evaluate, MetricsReport};
use fairpo::model::{snapshot_reference, Checkpoint, ReferenceParams};

#[derive(Parser)]
#[command(name = "fairpo", version, about = "Group-robust preference optimization for multi-label classification", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write features.csv / labels.csv.
    GenData(GenDataArgs),
    /// Train a plain BCE reference model from scratch.
    TrainRef(TrainRefArgs),
    /// Train a model against a frozen reference checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Execute an experiment plan (all arms, all seeds).
    RunPlan(RunPlanArgs),
    /// Write the default experiment plan to a file.
    InitPlan(InitPlanArgs),
    /// Render the comparison table from a run's aggregate.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator config (JSON); explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_instances: Option<usize>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    base_prevalence: Option<f64>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
    #[arg(long)]
    sibling_overlap: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for features.csv and labels.csv.
    #[arg(long)]
    out: PathBuf,
}

/// Dataset + split + partition options shared by the training commands.
#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 99)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    partition_fraction: f64,
}

#[derive(Args)]
struct HyperArgs {
    /// Training config (JSON, the config.json a run writes); explicit
    /// flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta_theta: Option<f64>,
    #[arg(long)]
    eta_alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma_margin: Option<f64>,
    #[arg(long)]
    lambda_cpo: Option<f64>,
    #[arg(long)]
    epsilon_slack: Option<f64>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    #[arg(long)]
    focal_alpha: Option<f64>,
    #[arg(long)]
    fixed_weight_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Steps between interim test-split evaluations (0 = only at the end).
    #[arg(long)]
    eval_every: Option<u64>,
}

impl HyperArgs {
    fn to_config(
        &self,
        mode: Option<Mode>,
        variant: Option<Variant>,
        flags: PrivilegedFlags,
        np_constraint_off: bool,
    ) -> Result<TrainConfig<f64>> {
        let mut cfg: TrainConfig<f64> = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig {
                eta_theta: 0.05,
                eta_alpha: 0.1,
                max_iterations: 20_000,
                batch_size: 32,
                variant: Variant::Cpo,
                mode: Mode::FairPo,
                fixed_weight_p: 0.5,
                flags: PrivilegedFlags::default(),
                np_constraint_off: false,
                loss: LossConfig {
                    beta: 1.0,
                    gamma_margin: 0.3,
                    lambda_cpo: 1.0,
                    epsilon_slack: 0.05,
                    focal_gamma: 2.0,
                    focal_alpha: 0.25,
                },
                seed: 0,
                eval_every: 0,
            },
        };
        if let Some(m) = mode {
            cfg.mode = m;
        }
        if let Some(v) = variant {
            cfg.variant = v;
        }
        // Boolean switches only turn behavior on; a config file's settings
        // survive when the flag is absent.
        cfg.flags.only_confusing_negatives |= flags.only_confusing_negatives;
        cfg.flags.no_bce_fallback |= flags.no_bce_fallback;
        cfg.flags.preference_off |= flags.preference_off;
        cfg.np_constraint_off |= np_constraint_off;
        if let Some(v) = self.eta_theta { cfg.eta_theta = v; }
        if let Some(v) = self.eta_alpha { cfg.eta_alpha = v; }
        if let Some(v) = self.iterations { cfg.max_iterations = v; }
        if let Some(v) = self.batch_size { cfg.batch_size = v; }
        if let Some(v) = self.beta { cfg.loss.beta = v; }
        if let Some(v) = self.gamma_margin { cfg.loss.gamma_margin = v; }
        if let Some(v) = self.lambda_cpo { cfg.loss.lambda_cpo = v; }
        if let Some(v) = self.epsilon_slack { cfg.loss.epsilon_slack = v; }
        if let Some(v) = self.focal_gamma { cfg.loss.focal_gamma = v; }
        if let Some(v) = self.focal_alpha { cfg.loss.focal_alpha = v; }
        if let Some(v) = self.fixed_weight_p { cfg.fixed_weight_p = v; }
        if let Some(v) = self.seed { cfg.seed = v; }
        if let Some(v) = self.eval_every { cfg.eval_every = v; }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainRefArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Hidden layer widths; empty means a linear head.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Use the focal loss instead of plain BCE.
    #[arg(long)]
    focal: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Reference checkpoint (model.json from train-ref).
    #[arg(long)]
    reference: PathBuf,
    /// Training mode: fair_po, fixed_weights, single_loss_bce,
    /// single_loss_focal, or global_preference. Defaults to fair_po, or to
    /// the config file's mode when one is given.
    #[arg(long)]
    mode: Option<String>,
    /// Preference variant: dpo, simpo, or cpo. Defaults to cpo, or to the
    /// config file's variant when one is given.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    only_confusing_negatives: bool,
    #[arg(long)]
    no_bce_fallback: bool,
    #[arg(long)]
    preference_off: bool,
    #[arg(long)]
    np_constraint_off: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (model.json).
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Partition file (partition.json from a training run); when omitted
    /// the partition is recomputed from the train split.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Optional baseline report.json; adds mAP deltas against it.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Where to write the report; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunPlanArgs {
    /// Plan file (JSON). See `init-plan` for the default layout.
    #[arg(long)]
    plan: PathBuf,
    /// Seed-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the plan's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InitPlanArgs {
    #[arg(long)]
    out: PathBuf,
    /// Output directory the plan will write results into.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory containing aggregate.json.
    #[arg(long)]
    results: PathBuf,
}

/// Writes to stdout, treating a closed pipe as a clean stop.
fn emit(text: &str) -> Result<()> {
    use std::io::Write as _;
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(value)?)
}

fn load_corpus(args: &CorpusArgs) -> Result<(Dataset<f64>, Dataset<f64>, LabelPartition)> {
    let ds = load_dataset(&args.features, &args.labels)?;
    let (train_ds, test_ds) = ds.split(&SplitSpec {
        train_fraction: args.train_fraction,
        seed: args.split_seed,
    })?;
    let partition = partition_by_frequency(&train_ds, args.partition_fraction)?;
    Ok((train_ds, test_ds, partition))
}

fn parse_mode(s: &str) -> Result<Mode> {
    Ok(match s {
        "fair_po" => Mode::FairPo,
        "fixed_weights" => Mode::FixedWeights,
        "single_loss_bce" => Mode::SingleLossBce,
        "single_loss_focal" => Mode::SingleLossFocal,
        "global_preference" => Mode::GlobalPreference,
        other => bail!("unknown mode `{other}`"),
    })
}

fn parse_variant(s: &str) -> Result<Variant> {
    Ok(match s {
        "dpo" => Variant::Dpo,
        "simpo" => Variant::SimPo,
        "cpo" => Variant::Cpo,
        other => bail!("unknown variant `{other}`"),
    })
}

fn write_run_outputs(
    out: &Path,
    state: &TrainState<f64>,
    trace: &TrainTrace<f64>,
    report: &MetricsReport,
    cfg: &TrainConfig<f64>,
    partition: &LabelPartition,
    seed: u64,
) -> Result<()> {
    Checkpoint::from_model(&state.model, seed).save(&out.join("model.json"))?;
    trace.write_csv(&out.join("trace.csv"))?;
    write_json(&out.join("partition.json"), partition)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("report.json"), report)?;
    Ok(())
}

/// Runs the full training loop, emitting an interim report on the test
/// split every `cfg.eval_every` steps when that is nonzero.
fn train_chunked(
    initial: fairpo::model::ModelParams<f64>,
    train_ds: &Dataset<f64>,
    test_ds: &Dataset<f64>,
    partition: &LabelPartition,
    reference: Option<&ReferenceParams<f64>>,
    cfg: &TrainConfig<f64>,
) -> Result<(TrainState<f64>, TrainTrace<f64>)> {
    use fairpo::grpo::run_steps;
    let mut state = TrainState::new(initial, cfg);
    let mut trace = TrainTrace::default();
    let chunk = if cfg.eval_every > 0 { cfg.eval_every } else { cfg.max_iterations };
    let mut remaining = cfg.max_iterations;
    while remaining > 0 {
        let n = chunk.min(remaining);
        run_steps(&mut state, train_ds, partition, reference, cfg, n, &mut trace)?;
        remaining -= n;
        if cfg.eval_every > 0 && remaining > 0 {
            let interim = evaluate(&state.model, test_ds, partition, None)?;
            eprintln!(
                "step {}: mAP(P) {:.2}, mAP(rest) {:.2}",
                state.step, interim.map_p, interim.map_np
            );
        }
    }
    Ok((state, trace))
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticConfig {
            n_instances: 2000,
            n_labels: 20,
            n_features: 16,
            base_prevalence: 0.4,
            zipf_exponent: 1.0,
            sibling_overlap: 0.7,
            seed: 2024,
        },
    };
    if let Some(v) = args.n_instances { cfg.n_instances = v; }
    if let Some(v) = args.n_labels { cfg.n_labels = v; }
    if let Some(v) = args.n_features { cfg.n_features = v; }
    if let Some(v) = args.base_prevalence { cfg.base_prevalence = v; }
    if let Some(v) = args.zipf_exponent { cfg.zipf_exponent = v; }
    if let Some(v) = args.sibling_overlap { cfg.sibling_overlap = v; }
    if let Some(v) = args.seed { cfg.seed = v; }
    let ds: Dataset<f64> = generate_synthetic(&cfg)?;
    write_dataset(&ds, &args.out)?;
    write_json(&args.out.join("dataset_config.json"), &cfg)?;
    eprintln!(
        "wrote {} instances x {} labels to {}",
        ds.n_instances(),
        ds.n_labels(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_ref(args: &TrainRefArgs) -> Result<()> {
    let (train_ds, test_ds, partition) = load_corpus(&args.corpus)?;
    let mode = if args.focal || args.hyper.config.is_none() {
        Some(if args.focal { Mode::SingleLossFocal } else { Mode::SingleLossBce })
    } else {
        None
    };
    let cfg = args.hyper.to_config(mode, None, PrivilegedFlags::default(), false)?;
    let head = if args.hidden.is_empty() {
        HeadSpec::Linear
    } else {
        HeadSpec::Mlp { hidden: args.hidden.clone() }
    };
    let initial = match &head {
        HeadSpec::Linear => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed);
            fairpo::model::ModelParams::init_linear(train_ds.n_labels(), train_ds.n_features(), &mut rng)
        }
        HeadSpec::Mlp { hidden } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed);
            fairpo::model::ModelParams::init_mlp(train_ds.n_labels(), train_ds.n_features(), hidden, &mut rng)
        }
    };
    let (state, trace) = train_chunked(initial, &train_ds, &test_ds, &partition, None, &cfg)?;
    let report = evaluate(&state.model, &test_ds, &partition, None)?;
    write_run_outputs(&args.out, &state, &trace, &report, &cfg, &partition, cfg.seed)?;
    eprintln!("reference trained; report at {}", args.out.join("report.json").display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (train_ds, test_ds, partition) = load_corpus(&args.corpus)?;
    let mode = match (&args.mode, &args.hyper.config) {
        (Some(m), _) => Some(parse_mode(m)?),
        (None, None) => Some(Mode::FairPo),
        (None, Some(_)) => None,
    };
    let variant = match (&args.variant, &args.hyper.config) {
        (Some(v), _) => Some(parse_variant(v)?),
        (None, None) => Some(Variant::Cpo),
        (None, Some(_)) => None,
    };
    let flags = PrivilegedFlags {
        only_confusing_negatives: args.only_confusing_negatives,
        no_bce_fallback: args.no_bce_fallback,
        preference_off: args.preference_off,
    };
    let cfg = args.hyper.to_config(mode, variant, flags, args.np_constraint_off)?;
    let reference: ReferenceParams<f64> =
        snapshot_reference(&Checkpoint::load(&args.reference)?.to_model()?);
    let initial = reference.model().clone();
    let (state, trace) =
        train_chunked(initial, &train_ds, &test_ds, &partition, Some(&reference), &cfg)?;
    let report = evaluate(&state.model, &test_ds, &partition, None)?;
    write_run_outputs(&args.out, &state, &trace, &report, &cfg, &partition, cfg.seed)?;
    eprintln!("trained; report at {}", args.out.join("report.json").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (_train_ds, test_ds, mut partition) = load_corpus(&args.corpus)?;
    if let Some(path) = &args.partition {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        partition = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
    }
    let model = Checkpoint::load(&args.model)?.to_model()?;
    let baseline = match &args.baseline {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Some(serde_json::from_str::<MetricsReport>(&text)?)
        }
        None => None,
    };
    let report = evaluate(&model, &test_ds, &partition, baseline.as_ref())?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?,
    }
    Ok(())
}

fn cmd_run_plan(args: &RunPlanArgs) -> Result<()> {
    let mut plan = ExperimentPlan::load(&args.plan)?;
    if let Some(dir) = &args.out_dir {
        plan.out_dir = dir.clone();
    }
    let results = run_plan(&plan, args.jobs.max(1), true)?;
    let (text, _json) = aggregate(&results)?;
    emit(&text)?;
    eprintln!("results written to {}", plan.out_dir.display());
    Ok(())
}

fn cmd_init_plan(args: &InitPlanArgs) -> Result<()> {
    let plan = ExperimentPlan::default_plan(args.out_dir.clone());
    write_json(&args.out, &plan)?;
    eprintln!("default plan written to {}", args.out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let path = args.results.join("aggregate.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let results: Vec<ArmResult> = serde_json::from_str(&text)?;
    let (table, _json) = aggregate(&results)?;
    emit(&table)?;
    Ok(())
}

// Exit codes: 0 success, 1 usage error, 2 runtime failure.
fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                _ => ExitCode::from(1),
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainRef(a) => cmd_train_ref(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RunPlan(a) => cmd_run_plan(a),
        Command::InitPlan(a) => cmd_init_plan(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
