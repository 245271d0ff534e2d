//! Command-line front end. Every command echoes its resolved configuration
//! as one JSON line on stderr before doing any work.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::Checkpoint;
use crate::error::Error;
use crate::scenegen::format::{read_dataset, write_dataset};
use crate::scenegen::{break_cooccurrence, generate_dataset, CooccurPolicy, Dataset, SceneSpec};
use crate::trainer::{
    ablate, bootstrap, cooccurrence_matrix, detect_perfect_cooccurrence, evaluate, evaluate_predictions, train,
    AblationConfig, FeatureConfig, PreparedDataset, TrainConfig, TrainedModel,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const THREADS_ENV: &str = "LABELDENSE_THREADS";

/// JSON run configuration; every section is optional and defaulted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub features: FeatureConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Parser)]
#[command(name = "labeldense", version, about = "Dense point-cloud segmentation from scene-level tags")]
pub struct Cli {
    /// Worker threads (falls back to LABELDENSE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run the loss-variant and K-sweep ablation.
    Ablate(AblateArgs),
    /// Retrain on a model's scene-consistent predictions.
    Bootstrap(BootstrapArgs),
    /// Report tag co-occurrence, optionally breaking a perfect pair.
    Cooccur(CooccurArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    #[arg(long, default_value = "free")]
    pub cooccur: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Score ground truth against itself instead of a checkpoint.
    #[arg(long, hide = true)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the full table, with per-seed reports, as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint of the retrained model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CooccurArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Class pair `a,b` to break.
    #[arg(long, requires = "out")]
    pub fix: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// An error tagged with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

fn internal_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_INTERNAL,
        message: e.to_string(),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg: RunConfig = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
    };
    cfg.scene.validate().map_err(config_err)?;
    Ok(cfg)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    read_dataset(path).map_err(data_err)
}

fn prepare(ds: &Dataset, cfg: &RunConfig) -> CliResult<PreparedDataset> {
    PreparedDataset::new(ds, &cfg.features).map_err(|e| match e {
        Error::InvalidArgument(_) => config_err(e),
        other => data_err(other),
    })
}

fn check_train(cfg: &TrainConfig, ds: &Dataset) -> CliResult<()> {
    cfg.validate(ds.num_classes()).map_err(config_err)
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    Checkpoint::read(path).map(TrainedModel::from_checkpoint).map_err(data_err)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| internal_err(format!("{}: {e}", path.display())))
}

fn echo(command: &str, args: serde_json::Value, cfg: &RunConfig, threads: usize) {
    let v = json!({"command": command, "threads": threads, "args": args, "config": cfg});
    eprintln!("effective config: {v}");
}

fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(config_err("thread count must be >= 1"));
    }
    Ok(n)
}

fn cmd_gen(a: &GenArgs, threads: usize) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let policy: CooccurPolicy = a.cooccur.parse().map_err(config_err)?;
    echo(
        "gen",
        json!({"out": a.out, "scenes": a.scenes, "cooccur": a.cooccur, "seed": a.seed}),
        &cfg,
        threads,
    );
    let ds = generate_dataset(a.scenes, &policy, &cfg.scene, a.seed).map_err(config_err)?;
    let manifest = write_dataset(&a.out, &ds).map_err(internal_err)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, threads: usize) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    echo(
        "train",
        json!({"data": a.data, "out": a.out, "history": a.history}),
        &cfg,
        threads,
    );
    let ds = load_data(&a.data)?;
    check_train(&cfg.train, &ds)?;
    let data = prepare(&ds, &cfg)?;
    let (model, history) = train(&data, &cfg.train).map_err(internal_err)?;
    model.to_checkpoint().write(&a.out).map_err(internal_err)?;
    write_file(&a.history, history.to_csv())?;
    let last = history.epochs.last().expect("epochs >= 1");
    println!(
        "{}",
        json!({
            "epochs": history.epochs.len(),
            "final_l_cam": last.l_cam,
            "final_l_us": last.l_us,
            "final_l_match": last.l_match,
            "unmatchable_scene_steps": history.total_unmatchable(),
        })
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, threads: usize) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    echo(
        "eval",
        json!({"data": a.data, "ckpt": a.ckpt, "report": a.report, "oracle": a.oracle}),
        &cfg,
        threads,
    );
    let ds = load_data(&a.data)?;
    let report = if a.oracle {
        let pairs = ds.scenes.iter().map(|s| {
            let pred: Vec<usize> = s.cloud.gt_labels.iter().map(|&g| g as usize).collect();
            (pred, &s.cloud.gt_labels)
        });
        evaluate_predictions(pairs, ds.num_classes()).map_err(internal_err)?
    } else {
        let model = load_model(a.ckpt.as_deref().expect("clap enforces --ckpt"))?;
        if model.model.classifier.num_classes() != ds.num_classes() {
            return Err(data_err(format!(
                "checkpoint predicts {} classes, dataset has {}",
                model.model.classifier.num_classes(),
                ds.num_classes()
            )));
        }
        let data = prepare(&ds, &cfg)?;
        evaluate(&model, &data).map_err(data_err)?
    };
    write_file(&a.report, serde_json::to_vec_pretty(&report).map_err(internal_err)?)?;
    println!("{}", json!({"miou": report.miou}));
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, threads: usize) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    echo(
        "ablate",
        json!({"data": a.data, "out": a.out, "json": a.json}),
        &cfg,
        threads,
    );
    let ds = load_data(&a.data)?;
    check_train(&cfg.train, &ds)?;
    for &k in &cfg.ablation.k_sweep {
        check_train(&TrainConfig { k, ..cfg.train.clone() }, &ds)?;
    }
    if cfg.ablation.seeds.is_empty() {
        return Err(config_err("ablation.seeds must not be empty"));
    }
    let data = prepare(&ds, &cfg)?;
    let table = ablate(&data, &cfg.train, &cfg.ablation).map_err(internal_err)?;
    write_file(&a.out, table.to_csv())?;
    if let Some(p) = &a.json {
        write_file(p, serde_json::to_vec_pretty(&table).map_err(internal_err)?)?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_bootstrap(a: &BootstrapArgs, threads: usize) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    echo(
        "bootstrap",
        json!({"data": a.data, "ckpt": a.ckpt, "out": a.out, "report": a.report}),
        &cfg,
        threads,
    );
    let ds = load_data(&a.data)?;
    check_train(&cfg.train, &ds)?;
    let model = load_model(&a.ckpt)?;
    let data = prepare(&ds, &cfg)?;
    let out = bootstrap(&model, &data, &cfg.train).map_err(internal_err)?;
    out.model.to_checkpoint().write(&a.out).map_err(internal_err)?;
    let summary = json!({
        "miou_before": out.before.miou,
        "miou_after": out.after.miou,
        "kept_fraction": out.kept_fraction,
    });
    if let Some(p) = &a.report {
        let full = json!({"before": out.before, "after": out.after, "kept_fraction": out.kept_fraction});
        write_file(p, serde_json::to_vec_pretty(&full).map_err(internal_err)?)?;
    }
    println!("{summary}");
    Ok(())
}

fn parse_pair(s: &str) -> CliResult<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(config_err(format!("--fix expects two class ids, got {s:?}"))),
        },
        _ => Err(config_err(format!("--fix expects `a,b`, got {s:?}"))),
    }
}

fn cmd_cooccur(a: &CooccurArgs, threads: usize) -> CliResult<()> {
    echo(
        "cooccur",
        json!({"data": a.data, "fix": a.fix, "out": a.out, "seed": a.seed}),
        &RunConfig::default(),
        threads,
    );
    let mut ds = load_data(&a.data)?;
    if let Some(fix) = &a.fix {
        let (x, y) = parse_pair(fix)?;
        ds = break_cooccurrence(&ds, x, y, a.seed).map_err(data_err)?;
        let out = a.out.as_ref().expect("clap enforces --out");
        let manifest = write_dataset(out, &ds).map_err(internal_err)?;
        eprintln!("wrote {}", manifest.display());
    }
    let counts = cooccurrence_matrix(&ds);
    let pairs = detect_perfect_cooccurrence(&counts);
    println!("{}", json!({"counts": counts, "perfect_pairs": pairs}));
    Ok(())
}

fn dispatch(cli: &Cli, threads: usize) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Ablate(a) => cmd_ablate(a, threads),
        Command::Bootstrap(a) => cmd_bootstrap(a, threads),
        Command::Cooccur(a) => cmd_cooccur(a, threads),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = resolve_threads(cli.threads).and_then(|threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(internal_err)?;
        pool.install(|| dispatch(&cli, threads))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_defaults_and_strictness() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epochz": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"optimizer": {}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"train": {"k": 16}, "ablation": {"seeds": [7]}}"#).unwrap();
        assert_eq!(c.train.k, 16);
        assert_eq!(c.ablation.seeds, vec![7]);
        assert_eq!(c.ablation.k_sweep, AblationConfig::default().k_sweep);
    }

    #[test]
    fn pair_parsing() {
        assert_eq!(parse_pair("0,1").unwrap(), (0, 1));
        assert_eq!(parse_pair(" 2, 5").unwrap(), (2, 5));
        assert!(parse_pair("0").is_err());
        assert!(parse_pair("a,b").is_err());
    }

    #[test]
    fn thread_flag_must_be_positive() {
        assert_eq!(resolve_threads(Some(3)).unwrap(), 3);
        assert_eq!(resolve_threads(Some(0)).unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn missing_out_is_a_usage_error() {
        assert_eq!(run(["labeldense", "gen", "--scenes", "3"]), EXIT_CONFIG);
    }
}
