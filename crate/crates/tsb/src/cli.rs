//! The `tsb` command line: simulate / features / train / eval / analyze.
//!
//! Config files are JSON with unknown keys rejected; CLI flags override file
//! values. Every run directory gets a `run_meta.json` stamping the resolved
//! config, its hash and the seed. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Task, TsModel};
use crate::params::{config_hash, hex};
use crate::sim::{build_corpus, Manifest, MixMode, SimConfig};
use crate::train::{items_for_task, write_loss_csv, RunPaths, TrainConfig, Trainer};
use crate::upstream::{export_features, import_features, ToyUpstream, UpstreamConfig};

#[derive(Parser, Debug)]
#[command(
    name = "tsb",
    version,
    about = "Target-speaker speech processing toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Master seed; overrides config-file seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed reduction order. The toolkit always reduces deterministically;
    /// the flag is accepted for interface stability.
    #[arg(long, global = true)]
    deterministic: bool,
    /// error | warn | info | debug | trace
    #[arg(long, global = true)]
    log_level: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a mixture corpus from speaker-labeled WAV directories.
    Simulate(SimulateArgs),
    /// Export or inspect TSFB1 feature files.
    Features {
        #[command(subcommand)]
        cmd: FeaturesCmd,
    },
    /// Train a task model over a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a manifest.
    Eval(EvalArgs),
    /// Layer-weight and task-correlation analyses.
    Analyze {
        #[command(subcommand)]
        cmd: AnalyzeCmd,
    },
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_mixtures: usize,
    #[arg(long, value_parser = parse_mode)]
    mode: MixMode,
    #[arg(long, default_value_t = 0.0)]
    overlap_min: f64,
    #[arg(long, default_value_t = 0.4)]
    overlap_max: f64,
    #[arg(long)]
    snr_min: Option<f64>,
    #[arg(long)]
    snr_max: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    min_enroll_secs: f64,
    /// Error out instead of looping noise shorter than the mixture.
    #[arg(long)]
    no_loop: bool,
}

fn parse_mode(s: &str) -> std::result::Result<MixMode, String> {
    match s {
        "min" => Ok(MixMode::Min),
        "max" => Ok(MixMode::Max),
        "sparse" => Ok(MixMode::Sparse),
        other => Err(format!("unknown mode {other:?} (want min, max or sparse)")),
    }
}

#[derive(Subcommand, Debug)]
enum FeaturesCmd {
    /// Run the toy upstream over a WAV and write a TSFB1 file.
    Export {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        upstream_seed: u64,
    },
    /// Validate a TSFB1 file and print its header and value statistics.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    manifest: PathBuf,
    /// JSON config file (TrainConfig schema); unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Unfreeze the upstream (the fine-tuning configuration).
    #[arg(long)]
    finetune_upstream: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_parser = Task::from_str_arg)]
    task: Task,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// External PESQ command invoked as `cmd ref.wav est.wav`.
    #[arg(long)]
    pesq_cmd: Option<String>,
}

impl Task {
    fn from_str_arg(s: &str) -> std::result::Result<Task, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Export softmax-normalized layer weights (csv or svg by extension).
    Weights {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank-correlation matrix between score columns of a scores.csv.
    Corr {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful outputs, everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.log_level.as_deref());
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(level: Option<&str>) {
    let mut builder = env_logger::Builder::from_default_env();
    if let Some(level) = level {
        builder.parse_filters(level);
    }
    let _ = builder.format_timestamp(None).try_init();
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate(args) => simulate(args, cli.seed, cli.threads),
        Cmd::Features { cmd } => features(cmd, cli.seed),
        Cmd::Train(args) => train(args, cli.seed, cli.threads),
        Cmd::Eval(args) => eval_cmd(args, cli.seed),
        Cmd::Analyze { cmd } => analyze(cmd),
    }
}

fn run_meta(path: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<()> {
    let hash = config_hash(&config);
    let meta = serde_json::json!({
        "command": command,
        "seed": seed,
        "config_hash": hash,
        "config": config,
    });
    std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn simulate(args: SimulateArgs, seed: Option<u64>, threads: Option<usize>) -> Result<()> {
    let cfg = SimConfig {
        corpus_dir: args.corpus_dir,
        noise_dir: args.noise_dir,
        out_dir: args.out.clone(),
        n_mixtures: args.n_mixtures,
        mode: args.mode,
        overlap_min: args.overlap_min,
        overlap_max: args.overlap_max,
        snr_min: args.snr_min,
        snr_max: args.snr_max,
        min_enroll_secs: args.min_enroll_secs,
        no_loop: args.no_loop,
        seed: seed.unwrap_or(0),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let manifest = match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| build_corpus(&cfg))?
        }
        None => build_corpus(&cfg)?,
    };
    run_meta(
        &cfg.out_dir.join("run_meta.json"),
        "simulate",
        cfg.seed,
        serde_json::to_value(&cfg)?,
    )?;
    log::info!("wrote {} mixtures under {}", manifest.len(), cfg.out_dir.display());
    println!("{} mixtures -> {}", manifest.len(), cfg.out_dir.join("manifest.jsonl").display());
    Ok(())
}

fn features(cmd: FeaturesCmd, seed: Option<u64>) -> Result<()> {
    match cmd {
        FeaturesCmd::Export { wav, out, layers, dim, upstream_seed } => {
            let cfg = UpstreamConfig {
                layers,
                dim,
                seed: seed.unwrap_or(upstream_seed),
            };
            let upstream = ToyUpstream::new(cfg);
            let mut params = crate::params::ParamSet::<f32>::new();
            upstream.init_params(&mut params);
            let audio = crate::audio::read_wav(&wav)?;
            let stack = upstream.forward_stack(&params, audio.samples())?;
            export_features(&out, &stack)?;
            run_meta(
                &out.with_extension("meta.json"),
                "features-export",
                cfg.seed,
                serde_json::to_value(cfg)?,
            )?;
            println!(
                "{} -> {} (layers={} frames={} dim={})",
                wav.display(),
                out.display(),
                stack.layers(),
                stack.frames(),
                stack.dim()
            );
            Ok(())
        }
        FeaturesCmd::Import { file } => {
            let stack = import_features(&file)?;
            let data = stack.data();
            let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
            for &v in data {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v as f64;
            }
            println!(
                "TSFB1 ok: layers={} frames={} dim={} values[min={lo:.4} max={hi:.4} mean={:.4}]",
                stack.layers(),
                stack.frames(),
                stack.dim(),
                sum / data.len() as f64
            );
            Ok(())
        }
    }
}

fn train(args: TrainArgs, seed: Option<u64>, threads: Option<usize>) -> Result<()> {
    // File config first, CLI overrides on top.
    let mut value: serde_json::Value = match &args.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        )
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
    if let Some(task) = &args.task {
        obj.insert("task".into(), serde_json::Value::String(task.clone()));
    }
    if let Some(steps) = args.steps {
        obj.insert("steps".into(), serde_json::json!(steps));
    }
    if let Some(lr) = args.lr {
        obj.insert("lr".into(), serde_json::json!(lr));
    }
    if let Some(batch) = args.batch {
        obj.insert("batch".into(), serde_json::json!(batch));
    }
    if let Some(alpha) = args.alpha {
        obj.insert("alpha".into(), serde_json::json!(alpha));
    }
    if let Some(hidden) = args.hidden {
        obj.insert("hidden".into(), serde_json::json!(hidden));
    }
    if let Some(seed) = seed {
        obj.insert("seed".into(), serde_json::json!(seed));
    }
    if args.finetune_upstream {
        obj.insert("freeze_upstream".into(), serde_json::json!(false));
    }
    if let Some(threads) = threads {
        obj.insert("threads".into(), serde_json::json!(threads));
    }
    let cfg: TrainConfig = serde_json::from_value(value.clone())
        .map_err(|e| Error::Config(format!("train config: {e}")))?;

    let manifest = Manifest::load(&args.manifest)?;
    let items = items_for_task(&manifest, cfg.task)?;
    std::fs::create_dir_all(&args.out)?;
    let paths = RunPaths::new(&args.out);
    run_meta(&paths.run_meta(), "train", cfg.seed, serde_json::to_value(&cfg)?)?;

    let mut trainer = Trainer::<f32>::new(cfg.clone(), items)?;
    log::info!(
        "training {} for {} steps over {} items (freeze_upstream={})",
        cfg.task,
        cfg.steps,
        manifest.len(),
        cfg.freeze_upstream
    );
    let records = trainer.run(cfg.steps, Some(&args.out))?;
    write_loss_csv(&paths.loss_csv(), &records)?;
    trainer.save_checkpoint(&paths.final_checkpoint())?;
    // Re-stamp the final checkpoint's metadata with the config hash.
    if let Some(last) = records.last() {
        println!(
            "trained {} steps; final loss {:.4}; checkpoint {}",
            records.len(),
            last.total,
            paths.final_checkpoint().display()
        );
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs, seed: Option<u64>) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let (model, payload) = TsModel::<f32>::load_checkpoint(&args.ckpt)?;
    let ckpt_bytes = std::fs::read(&args.ckpt)?;
    let checkpoint_id = format!(
        "{}@{}",
        args.ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        &hex(&Sha256::digest(&ckpt_bytes))[..12]
    );
    let opts = crate::evaluate::EvalOptions {
        checkpoint_id,
        seed: seed.unwrap_or(payload.meta.seed),
        config_hash: config_hash(&payload.meta),
        pesq_command: args.pesq_cmd,
    };
    let report = crate::evaluate::evaluate(args.task, &manifest, &model, &opts)?;
    report.save(&args.report)?;
    let mut line = format!("task {} over {} rows:", args.task, report.rows.len());
    for (k, v) in &report.overall.means {
        if !k.starts_with("wer_") {
            line.push_str(&format!(" {k}={v:.4}"));
        }
    }
    if let Some(fr) = report.overall.fr {
        line.push_str(&format!(" fr={fr:.2}%"));
    }
    for (k, v) in &report.overall.pooled {
        line.push_str(&format!(" {k}(pooled)={v:.4}"));
    }
    println!("{line}");
    println!("report -> {}", args.report.display());
    Ok(())
}

fn analyze(cmd: AnalyzeCmd) -> Result<()> {
    match cmd {
        AnalyzeCmd::Weights { ckpt, out } => {
            let (_meta, tensors) = crate::params::load_checkpoint(&ckpt)?;
            let streams = crate::analysis::layer_weight_distributions(&tensors)?;
            let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
            let body = match ext {
                "csv" => crate::analysis::weights_to_csv(&streams),
                "svg" => crate::analysis::weights_to_svg(&streams),
                other => {
                    return Err(Error::Usage(format!(
                        "unsupported weights output extension {other:?} (want .csv or .svg)"
                    )))
                }
            };
            std::fs::write(&out, body)?;
            println!("layer weights -> {}", out.display());
            Ok(())
        }
        AnalyzeCmd::Corr { table, out } => {
            let t = crate::analysis::TaskScoreTable::from_csv(&table)?;
            let matrix = crate::analysis::correlation_matrix(&t)?;
            std::fs::write(&out, matrix.to_json()?)?;
            println!("{} columns -> {}", matrix.labels.len(), out.display());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_is_exit_zero_and_unknown_flag_is_one() {
        assert_eq!(run(["tsb", "simulate", "--help"]), 0);
        assert_eq!(run(["tsb", "--version"]), 0);
        assert_eq!(run(["tsb", "simulate", "--bogus-flag"]), 1);
        assert_eq!(run(["tsb", "nonsense-command"]), 1);
    }

    #[test]
    fn config_hash_is_stable_and_value_sensitive() {
        let a = serde_json::json!({"x": 1, "y": "z"});
        assert_eq!(config_hash(&a), config_hash(&a));
        let b = serde_json::json!({"x": 2, "y": "z"});
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
