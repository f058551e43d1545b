use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use geomshot::config::{RunConfig, RunManifest};
use geomshot::dataio::{stratified_split, DatasetCatalog, FeatureTable, SplitSide};
use geomshot::eval::{self, EvalReport, TableRow};
use geomshot::nnet::Checkpoint;
use geomshot::pipeline::{self, AdaptMode, TrainOutcome};
use geomshot::synth::{self, SynthSpec, TransformRegime};
use geomshot::Error;

#[derive(Parser)]
#[command(name = "geomshot", version, about = "Few-shot hand-shape recognition on joint-angle features")]
struct Cli {
    /// Log more (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a stratified train/test split of a dataset tree.
    Split(SplitArgs),
    /// Train an encoder on a dataset's train split and evaluate on its test split.
    Train(RunArgs),
    /// Train an encoder on a source dataset for later transfer.
    Pretrain(RunArgs),
    /// Adapt a pretrained checkpoint to the configured target dataset.
    Adapt(AdaptArgs),
    /// Episodic nearest-prototype evaluation on the test split.
    Eval(EvalArgs),
    /// Input-space, episode-linear or full-data linear baselines.
    Baseline(BaselineArgs),
    /// Cumulative normalisation ablation over K = 1, 3, 5.
    Ablate(AblateArgs),
    /// Repeat an evaluation over several seeds.
    Multiseed(MultiseedArgs),
    /// Combine report files into a CSV (and optionally LaTeX) table.
    Export(ExportArgs),
    /// Generate a synthetic dataset tree.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data_root: PathBuf,
    /// Output split file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    fraction: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Parent directory for the run directory.
    #[arg(long)]
    out: PathBuf,
    /// Run directory name; defaults to `<command>-<timestamp>`.
    #[arg(long)]
    run_id: Option<String>,
    /// Overrides both the evaluation seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    mode: AdaptMode,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Encoder checkpoint; without one, evaluation runs in input space.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    InputSpace,
    EpisodeLinear,
    FullData,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    kind: BaselineKind,
    /// Required for the episode-linear baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Train an encoder per setting instead of evaluating in input space.
    #[arg(long)]
    train: bool,
}

#[derive(Args)]
struct MultiseedArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = eval::MULTI_SEEDS)]
    seeds: Vec<u64>,
    /// Evaluate this fixed encoder under each seed.
    #[arg(long, conflicts_with = "train")]
    checkpoint: Option<PathBuf>,
    /// Train a fresh encoder per seed.
    #[arg(long)]
    train: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Evaluation report files.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "")]
    dataset: String,
    #[arg(long, default_value = "within")]
    mode: String,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Also write a LaTeX tabular here.
    #[arg(long)]
    latex: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Angular noise standard deviation in radians.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, value_enum, default_value = "full")]
    transforms: TransformRegime,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Collects outputs and writes the manifest once the command finishes.
struct Run {
    command: &'static str,
    config_path: Option<PathBuf>,
    config: serde_json::Value,
    dir: PathBuf,
    manifest_path: PathBuf,
    started: String,
    seed: u64,
    outputs: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Run {
    fn start(command: &'static str, config_path: Option<PathBuf>, config: serde_json::Value, dir: PathBuf, manifest_path: PathBuf, seed: u64) -> geomshot::Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            command,
            config_path,
            config,
            dir,
            manifest_path,
            started: now(),
            seed,
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> geomshot::Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.outputs.push(rel.to_owned());
        Ok(p)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> geomshot::Result<()> {
        let path = self.path(rel)?;
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn write_text(&mut self, rel: &str, text: &str) -> geomshot::Result<()> {
        let path = self.path(rel)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Saves a checkpoint and checks that it reads back to the same bytes.
    fn write_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> geomshot::Result<()> {
        let path = self.path(rel)?;
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        if back.to_bytes()? != ck.to_bytes()? {
            return Err(Error::CorruptCheckpoint(format!("{} did not read back identically", path.display())));
        }
        Ok(())
    }

    fn finish(self) -> geomshot::Result<()> {
        let manifest = RunManifest {
            command: self.command.to_owned(),
            args: std::env::args().skip(1).collect(),
            config_path: self.config_path,
            config: self.config,
            out_dir: self.dir,
            started: self.started,
            finished: now(),
            seed: self.seed,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        manifest.save(&self.manifest_path)?;
        info!("wrote {}", self.manifest_path.display());
        Ok(())
    }
}

fn load_config(args: &RunArgs) -> geomshot::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.eval.seed = seed;
        cfg.train.base_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn start_config_run(command: &'static str, args: &RunArgs, cfg: &RunConfig) -> geomshot::Result<Run> {
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{command}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3f")));
    let dir = args.out.join(run_id);
    let manifest = dir.join("manifest.json");
    Run::start(
        command,
        Some(args.config.clone()),
        serde_json::to_value(cfg)?,
        dir,
        manifest,
        cfg.eval.seed,
    )
}

fn checkpoint_label(path: &Path) -> geomshot::Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok((ck, format!("mlp:sha256:{}", &digest[..16])))
}

fn encoder_label(ck: &Checkpoint) -> geomshot::Result<String> {
    let digest = hex::encode(Sha256::digest(ck.to_bytes()?));
    Ok(format!("mlp:sha256:{}", &digest[..16]))
}

fn load_tables(cfg: &RunConfig) -> geomshot::Result<(DatasetCatalog, FeatureTable, FeatureTable)> {
    let catalog = cfg.data.load_catalog()?;
    let split = cfg.data.load_split(&catalog)?;
    let train = FeatureTable::from_split(&catalog, &split, SplitSide::Train, cfg.data.representation)?;
    let test = FeatureTable::from_split(&catalog, &split, SplitSide::Test, cfg.data.representation)?;
    Ok((catalog, train, test))
}

fn write_eval_outputs(run: &mut Run, cfg: &RunConfig, mode: &str, report: &EvalReport) -> geomshot::Result<()> {
    run.write_json("report.json", report)?;
    // Validate by reading back.
    EvalReport::load(run.dir.join("report.json"))?;
    run.write_json("error_analysis.json", &eval::error_analysis(report))?;
    let row = TableRow::from_report(&cfg.data.dataset_name(), mode, report);
    run.write_text("tables/results.csv", &eval::table_csv(&[row])?)?;
    info!(
        "{} {}-way {}-shot: {:.2}% ± {:.2}",
        report.config.representation,
        report.config.n_way,
        report.config.k_shot,
        100.0 * report.mean,
        100.0 * report.ci95_halfwidth
    );
    println!("{:.6} {:.6}", report.mean, report.ci95_halfwidth);
    Ok(())
}

/// Fails before any training when the test split cannot supply episodes.
fn ensure_evaluable(test: &FeatureTable, cfg: &RunConfig) -> geomshot::Result<()> {
    let available = test.eligible_pool(cfg.eval.k_shot, cfg.eval.q_query).len();
    if available < cfg.eval.n_way {
        return Err(Error::InsufficientClasses {
            needed: cfg.eval.n_way,
            available,
        });
    }
    Ok(())
}

fn write_training(run: &mut Run, outcome: &TrainOutcome) -> geomshot::Result<()> {
    run.write_text("train_log.jsonl", &outcome.log_jsonl()?)
}

fn cmd_split(args: SplitArgs) -> geomshot::Result<()> {
    let manifest = args.out.with_extension("manifest.json");
    let config = serde_json::json!({
        "data_root": args.data_root, "out": args.out, "fraction": args.fraction, "seed": args.seed,
    });
    let dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut run = Run::start("split", None, config, dir, manifest, args.seed)?;
    let catalog = DatasetCatalog::load(&args.data_root)?;
    let split = stratified_split(&catalog, args.fraction, args.seed)?;
    split.save(&args.out)?;
    run.outputs.push(args.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    println!("train {} / test {}", split.train.len(), split.test.len());
    run.finish()
}

fn cmd_train(args: RunArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args)?;
    let mut run = start_config_run("train", &args, &cfg)?;
    let (_, train, test) = load_tables(&cfg)?;
    ensure_evaluable(&test, &cfg)?;
    let outcome = pipeline::train_within_domain(&train, &cfg.train)?;
    write_training(&mut run, &outcome)?;
    let ck = Checkpoint::new(
        outcome.encoder.clone(),
        Some(cfg.data.dataset_name()),
        Some(cfg.data.representation.name().to_owned()),
    );
    run.write_checkpoint("checkpoints/encoder.ckpt", &ck)?;
    let report = eval::evaluate(Some((&ck.encoder, &encoder_label(&ck)?)), &test, &cfg.eval)?;
    write_eval_outputs(&mut run, &cfg, "within", &report)?;
    run.finish()
}

fn cmd_pretrain(args: RunArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args)?;
    let mut run = start_config_run("pretrain", &args, &cfg)?;
    let (_, train, _) = load_tables(&cfg)?;
    let (ck, outcome) = pipeline::pretrain_source(&train, &cfg.train, &cfg.data.dataset_name())?;
    write_training(&mut run, &outcome)?;
    run.write_checkpoint("checkpoints/source.ckpt", &ck)?;
    run.finish()
}

fn cmd_adapt(args: AdaptArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args.run)?;
    let mut run = start_config_run("adapt", &args.run, &cfg)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (_, train, _) = load_tables(&cfg)?;
    let (adapted, outcome) = pipeline::adapt(&ck, &train, args.mode, &cfg.train)?;
    if let Some(outcome) = &outcome {
        write_training(&mut run, outcome)?;
    }
    run.write_checkpoint("checkpoints/adapted.ckpt", &adapted)?;
    run.finish()
}

fn cmd_eval(args: EvalArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args.run)?;
    let mut run = start_config_run("eval", &args.run, &cfg)?;
    let (_, _, test) = load_tables(&cfg)?;
    let report = match &args.checkpoint {
        Some(path) => {
            let (ck, label) = checkpoint_label(path)?;
            pipeline::check_compatible(&ck, &test)?;
            eval::evaluate(Some((&ck.encoder, &label)), &test, &cfg.eval)?
        }
        None => eval::input_space_baseline(&test, &cfg.eval)?,
    };
    let mode = if args.checkpoint.is_some() { "encoder" } else { "input_space" };
    write_eval_outputs(&mut run, &cfg, mode, &report)?;
    run.finish()
}

fn cmd_baseline(args: BaselineArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args.run)?;
    let mut run = start_config_run("baseline", &args.run, &cfg)?;
    let (_, train, test) = load_tables(&cfg)?;
    match args.kind {
        BaselineKind::InputSpace => {
            let report = eval::input_space_baseline(&test, &cfg.eval)?;
            write_eval_outputs(&mut run, &cfg, "input_space", &report)?;
        }
        BaselineKind::EpisodeLinear => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("the episode-linear baseline needs --checkpoint".into()))?;
            let (ck, label) = checkpoint_label(path)?;
            pipeline::check_compatible(&ck, &test)?;
            let report = eval::episode_linear_baseline(&ck.encoder, &label, &test, &cfg.eval)?;
            write_eval_outputs(&mut run, &cfg, "episode_linear", &report)?;
        }
        BaselineKind::FullData => {
            let accuracy = eval::full_data_linear(&train, &test)?;
            let report = serde_json::json!({
                "dataset": cfg.data.dataset_name(),
                "representation": cfg.data.representation.name(),
                "train_rows": train.len(),
                "test_rows": test.len(),
                "accuracy": accuracy,
            });
            run.write_json("report.json", &report)?;
            println!("{accuracy:.6}");
        }
    }
    run.finish()
}

fn cmd_ablate(args: AblateArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args.run)?;
    let mut run = start_config_run("ablate", &args.run, &cfg)?;
    let catalog = cfg.data.load_catalog()?;
    let split = cfg.data.load_split(&catalog)?;
    let mut trained = Vec::new();
    let table = eval::ablation_normalization(&catalog, &split, &cfg.eval, &eval::ABLATION_SHOTS, |repr| {
        if !args.train {
            return Ok(None);
        }
        let train = FeatureTable::from_split(&catalog, &split, SplitSide::Train, repr)?;
        let outcome = pipeline::train_within_domain(&train, &cfg.train)?;
        let ck = Checkpoint::new(outcome.encoder, Some(catalog.name.clone()), Some(repr.name().to_owned()));
        let label = encoder_label(&ck)?;
        trained.push((repr, ck.clone()));
        Ok(Some((ck.encoder, label)))
    })?;
    for (repr, ck) in &trained {
        run.write_checkpoint(&format!("checkpoints/{}.ckpt", repr.name()), ck)?;
    }
    run.write_json("report.json", &table)?;
    let mode = if args.train { "trained" } else { "input_space" };
    run.write_text("tables/ablation.csv", &eval::table_csv(&table.table_rows(mode))?)?;
    for row in &table.rows {
        let cells: Vec<String> = row.cells.iter().map(|c| format!("K={} {:.2}%", c.k_shot, 100.0 * c.mean)).collect();
        println!("{:<28} {}", row.setting, cells.join("  "));
    }
    run.finish()
}

fn cmd_multiseed(args: MultiseedArgs) -> geomshot::Result<()> {
    let cfg = load_config(&args.run)?;
    let mut run = start_config_run("multiseed", &args.run, &cfg)?;
    let (_, train, test) = load_tables(&cfg)?;
    let fixed = args.checkpoint.as_deref().map(checkpoint_label).transpose()?;
    if let Some((ck, _)) = &fixed {
        pipeline::check_compatible(ck, &test)?;
    }
    let report = eval::multi_seed(&args.seeds, |seed| {
        let spec = eval::EvalSpec { seed, ..cfg.eval };
        if args.train {
            let tcfg = pipeline::TrainConfig { base_seed: seed, ..cfg.train };
            let outcome = pipeline::train_within_domain(&train, &tcfg)?;
            let ck = Checkpoint::new(outcome.encoder, None, Some(cfg.data.representation.name().to_owned()));
            eval::evaluate(Some((&ck.encoder, &encoder_label(&ck)?)), &test, &spec)
        } else {
            eval::evaluate(fixed.as_ref().map(|(ck, l)| (&ck.encoder, l.as_str())), &test, &spec)
        }
    })?;
    run.write_json("report.json", &report)?;
    for r in &report.per_seed {
        println!("seed {:>6}: {:.4} ± {:.4}", r.seed, r.mean, r.ci95);
    }
    println!("mean {:.4}, std {:.4}", report.mean_of_means, report.std);
    run.finish()
}

fn cmd_export(args: ExportArgs) -> geomshot::Result<()> {
    let manifest = args.out.with_extension("manifest.json");
    let config = serde_json::json!({
        "reports": args.reports, "dataset": args.dataset, "mode": args.mode,
        "out": args.out, "latex": args.latex,
    });
    let dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut run = Run::start("export", None, config, dir, manifest, 0)?;
    let mut rows = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let report = EvalReport::load(path)?;
        rows.push(TableRow::from_report(&args.dataset, &args.mode, &report));
    }
    eval::write_table_csv(&rows, &args.out)?;
    run.outputs.push(args.out.display().to_string());
    if let Some(latex) = &args.latex {
        std::fs::write(latex, eval::table_latex(&rows)).map_err(|e| Error::io(latex, e))?;
        run.outputs.push(latex.display().to_string());
    }
    run.finish()
}

fn cmd_synth(args: SynthArgs) -> geomshot::Result<()> {
    let spec = SynthSpec {
        classes: args.classes,
        per_class: args.per_class,
        noise: args.noise,
        transforms: args.transforms,
        seed: args.seed,
    };
    let mut run = Run::start(
        "synth",
        None,
        serde_json::to_value(&args)?,
        args.out.clone(),
        args.out.join("manifest.json"),
        args.seed,
    )?;
    let catalog = synth::write_tree(&spec, &args.out)?;
    run.outputs.push("templates.json".into());
    run.outputs.extend(catalog.samples.iter().map(|s| s.path.clone()));
    println!("{} samples in {} classes", catalog.samples.len(), catalog.classes.len());
    run.finish()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::InvalidSplit(_) | Error::InvalidKeypoints(_) => 3,
        Error::InsufficientClasses { .. } | Error::InsufficientSamples { .. } | Error::DegenerateProblem(_) => 4,
        Error::ConfigMismatch(_) => 5,
        Error::CorruptCheckpoint(_) => 6,
        _ => 1,
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("GEOMSHOT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    warn!("could not size the worker pool: {e}");
                }
            }
            _ => warn!("ignoring GEOMSHOT_THREADS={v}: expected a positive integer"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    configure_threads();
    let result = match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Multiseed(a) => cmd_multiseed(a),
        Command::Export(a) => cmd_export(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
