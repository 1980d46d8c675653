use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use thiserror::Error;
use umoe_core::analytics::{collect_routing, export_analytics, AnalyticsProducts};
use umoe_core::checkpoint::{file_hash, load_model, save_model, CHECKPOINT_FILE};
use umoe_core::config::{CountTable, RunConfig};
use umoe_core::data::{generate_synthetic_batch, SyntheticTask, World};
use umoe_core::model::{ExpertSource, UniMoe};
use umoe_core::moe::{count_parameters, format_billions, LocalExperts};
use umoe_core::runlog::{write_step_log, RunManifest};
use umoe_core::train::{
    build_moe, evaluate_task, expert_sources, stage0_base, stage1_align, stage2_experts, stage3_moe, stage_rng, StageReport,
};

const CONFIG_COPY: &str = "config.toml";
const REPORT_FILE: &str = "report.json";
const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] umoe_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Sparse multimodal mixture-of-experts: parameter accounting, staged
/// training, evaluation and routing analytics.
#[derive(Debug, Parser)]
#[command(name = "umoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print activated and total parameter counts for every `[[row]]`.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one training stage and write its checkpoint under `--out`.
    Train {
        /// 0 base LM, 1 connector alignment, 2 per-task experts, 3 sparse MoE.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the step count of the stage (every task for stage 2).
        #[arg(long)]
        steps: Option<u64>,
        /// Stage 2 only: train just this task.
        #[arg(long)]
        task: Option<String>,
        /// Stage 3 only: every expert copies the aligned dense FFN, so no
        /// stage-2 checkpoints are needed.
        #[arg(long)]
        pure_experts: bool,
    },
    /// Evaluate a checkpoint on a task and print the metrics as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        /// Defaults to the config stored next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the metrics and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route evaluation samples through a checkpoint and export the
    /// load, preference and pathway CSVs.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the configured analytics task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UMOE_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::CountParams { config } => count_params(&config),
        Command::Train {
            stage,
            config,
            seed,
            out,
            steps,
            task,
            pure_experts,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = steps {
                for st in [&mut cfg.stage0, &mut cfg.stage1, &mut cfg.stage3] {
                    st.steps = n;
                }
                cfg.stage2.values_mut().for_each(|st| st.steps = n);
            }
            if task.is_some() && stage != 2 {
                return Err(CliError::Usage("--task only applies to stage 2".into()));
            }
            if pure_experts && stage != 3 {
                return Err(CliError::Usage("--pure-experts only applies to stage 3".into()));
            }
            train(stage, &cfg, seed, &out, task.as_deref(), pure_experts)
        }
        Command::Eval { ckpt, task, config, out } => eval(&ckpt, &task, config.as_deref(), out.as_deref()),
        Command::Analyze {
            ckpt,
            task,
            config,
            seed,
            out,
        } => analyze(&ckpt, task.as_deref(), config.as_deref(), seed, &out),
    }
}

fn count_params(path: &Path) -> Result<()> {
    let table = CountTable::load(path)?;
    let width = table.row.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!(
        "{:<width$}  {:>7}  {:>4}  {:>10}  {:>9}  {:>6}",
        "name", "experts", "topk", "moe_layers", "activated", "total"
    );
    for row in &table.row {
        let c = count_parameters(row);
        println!(
            "{:<width$}  {:>7}  {:>4}  {:>10}  {:>9}  {:>6}",
            row.name,
            row.experts,
            row.topk,
            row.moe_layers(),
            format_billions(c.activated),
            format_billions(c.total)
        );
    }
    Ok(())
}

fn stage_dir(out: &Path, stage: u8, task: Option<&str>) -> PathBuf {
    let dir = out.join(format!("stage{stage}"));
    match task {
        Some(t) => dir.join(t),
        None => dir,
    }
}

fn require(dir: &Path, what: &str, hint: &str) -> Result<()> {
    if dir.join(CHECKPOINT_FILE).is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} checkpoint not found at {}; {hint}",
            dir.display()
        )))
    }
}

/// Checkpoint, config copy, report, step log and manifest of one stage run.
fn write_stage(dir: &Path, model: &UniMoe<f32>, report: &StageReport, cfg: &RunConfig, seed: u64, label: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut written = save_model(dir, model, label)?;
    let config = dir.join(CONFIG_COPY);
    fs::write(&config, toml::to_string(cfg).map_err(|e| CliError::Usage(e.to_string()))?)?;
    written.push(config);
    let rep = dir.join(REPORT_FILE);
    fs::write(&rep, serde_json::to_string_pretty(report)? + "\n")?;
    written.push(rep);
    written.push(write_step_log(dir, &report.log)?);
    let mut manifest = RunManifest::new(&cfg.hash(), seed, label);
    manifest.outputs = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    manifest.write(dir)?;
    info!(
        "{label}: ce {:.4} -> {:.4}, em {:.3} -> {:.3}, wrote {}",
        report.initial.ce,
        report.last.ce,
        report.initial.exact_match,
        report.last.exact_match,
        dir.display()
    );
    Ok(())
}

fn train(stage: u8, cfg: &RunConfig, seed: u64, out: &Path, task: Option<&str>, pure: bool) -> Result<()> {
    let world = World::new(&cfg.data, &cfg.connectors);
    match stage {
        0 => {
            let mut model = UniMoe::<f32>::init_dense(&cfg.model, &cfg.connectors, &mut stage_rng(seed, "init"))?;
            let report = stage0_base(&mut model, cfg, &world, seed)?;
            write_stage(&stage_dir(out, 0, None), &model, &report, cfg, seed, "stage0")
        }
        1 => {
            let prev = stage_dir(out, 0, None);
            require(&prev, "stage-0", "run `umoe train --stage 0` first")?;
            let (mut model, _) = load_model(&prev)?;
            let report = stage1_align(&mut model, cfg, &world, seed)?;
            write_stage(&stage_dir(out, 1, None), &model, &report, cfg, seed, "stage1")
        }
        2 => {
            let prev = stage_dir(out, 1, None);
            require(&prev, "stage-1", "run `umoe train --stage 1` first")?;
            let (model, _) = load_model(&prev)?;
            let tasks: Vec<String> = match task {
                Some(t) if cfg.stage2.contains_key(t) => vec![t.to_string()],
                Some(t) => return Err(CliError::Usage(format!("config has no [stage2.{t}] section"))),
                None => cfg.stage2.keys().cloned().collect(),
            };
            for t in tasks {
                let (tuned, report) = stage2_experts(&model, &t, cfg, &world, seed)?;
                write_stage(
                    &stage_dir(out, 2, Some(&t)),
                    &tuned,
                    &report,
                    cfg,
                    seed,
                    &format!("stage2/{t}"),
                )?;
            }
            Ok(())
        }
        _ => {
            let prev = stage_dir(out, 1, None);
            require(&prev, "stage-1", "run `umoe train --stage 1` first")?;
            let (dense, _) = load_model(&prev)?;
            let sources = expert_sources(cfg, pure)?;
            let mut stage2 = BTreeMap::new();
            if !pure {
                let missing: Vec<&String> = cfg
                    .stage2
                    .keys()
                    .filter(|t| !stage_dir(out, 2, Some(t)).join(CHECKPOINT_FILE).is_file())
                    .collect();
                if !missing.is_empty() {
                    let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
                    return Err(CliError::Usage(format!(
                        "stage 3 builds its experts from the stage-2 checkpoints, but {} {} missing under {}; \
                         run `umoe train --stage 2` first or pass --pure-experts to copy the dense FFN into every expert",
                        names.join(", "),
                        if names.len() == 1 { "is" } else { "are" },
                        out.join("stage2").display()
                    )));
                }
                for t in cfg.stage2.keys() {
                    stage2.insert(t.clone(), load_model(&stage_dir(out, 2, Some(t)))?.0);
                }
            }
            let mut model = build_moe(&dense, &sources, &stage2, cfg, seed)?;
            let report = stage3_moe(&mut model, cfg, &world, seed)?;
            let names: Vec<String> = sources.iter().map(ExpertSource::to_string).collect();
            info!("stage3 experts: {}", names.join(", "));
            write_stage(&stage_dir(out, 3, None), &model, &report, cfg, seed, "stage3")
        }
    }
}

fn checkpoint_config(ckpt: &Path, config: Option<&Path>) -> Result<RunConfig> {
    let path = config.map(Path::to_path_buf).unwrap_or_else(|| ckpt.join(CONFIG_COPY));
    if !path.is_file() {
        return Err(CliError::Usage(format!("no config at {}; pass --config", path.display())));
    }
    Ok(RunConfig::load(&path)?)
}

fn eval(ckpt: &Path, task: &str, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = checkpoint_config(ckpt, config)?;
    let (model, meta) = load_model(ckpt)?;
    if meta.connectors != cfg.connectors {
        return Err(CliError::Usage("checkpoint connectors do not match the config".into()));
    }
    let world = World::new(&cfg.data, &cfg.connectors);
    let metrics = evaluate_task(&model, &SyntheticTask::named(task)?, &world)?;
    let report = serde_json::json!({
        "checkpoint": file_hash(&ckpt.join(CHECKPOINT_FILE))?,
        "stage": meta.stage,
        "task": task,
        "ce": metrics.ce,
        "exact_match": metrics.exact_match,
        "samples": metrics.samples,
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(EVAL_FILE), text + "\n")?;
        let mut manifest = RunManifest::new(&cfg.hash(), 0, &format!("eval/{task}"));
        manifest.outputs = vec![EVAL_FILE.to_string()];
        manifest.write(dir)?;
    }
    Ok(())
}

fn analyze(ckpt: &Path, task: Option<&str>, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = checkpoint_config(ckpt, config)?;
    let (model, _) = load_model(ckpt)?;
    if model.is_dense() {
        log::warn!("{} holds a dense model; routing analytics will be empty", ckpt.display());
    }
    let world = World::new(&cfg.data, &cfg.connectors);
    let task = SyntheticTask::named(task.unwrap_or(&cfg.analytics.task))?;
    let samples = generate_synthetic_batch(&task, &world, cfg.analytics.samples, seed)?;
    let log = collect_routing(&model, &samples, &LocalExperts)?;
    let products = AnalyticsProducts::from_log(&log, cfg.analytics.top_pathways)?;
    fs::create_dir_all(out)?;
    let manifest = RunManifest::new(&cfg.hash(), seed, &format!("analyze/{}", task.name));
    let written = export_analytics(&products, out, &manifest)?;
    for p in &written {
        info!("wrote {}", p.display());
    }
    Ok(())
}
