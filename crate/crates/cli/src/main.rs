use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use pivot_lab::data::{build_dataset, write_dataset, DatasetManifest, Split};
use pivot_lab::eval::EvalReport;
use pivot_lab::gradcheck::check_all_ops;
use pivot_lab::model::{LmConfig, MultimodalModel};
use pivot_lab::objectives::{check_loss_gradients, DpoConfig};
use pivot_lab::pipeline::{
    load_bundle, load_checkpoint, pivot_extract, save_bundle, save_checkpoint, StageConfig,
};
use pivot_lab_cli::config::short_hash;
use pivot_lab_cli::diff::format_deltas;
use pivot_lab_cli::engine::{output_root, preferences, run_stage3, with_staging};
use pivot_lab_cli::{
    evaluate, report_diff, run, sweep, tiny_model, EvalConfig, GridConfig, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "pivot-lab",
    version,
    about = "Desk-scale SFT vs DPO multimodal lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (the PIVOT_LAB_OUT environment variable takes precedence).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a manifest.
    GenData(Common),
    /// Run the configured stages and evaluate.
    Train(Common),
    /// Detach the encoder (and reused projector layers) from a checkpoint.
    PivotExtract(Common),
    /// Train a fresh language model on a detached encoder, then evaluate.
    Stage3(Common),
    /// Evaluate a checkpoint.
    Eval(Common),
    /// Run a grid of experiments and aggregate.
    Sweep(Common),
    /// Signed metric deltas from the first report set to the second.
    Diff {
        /// Report directories (or report.json files) of the first side, comma separated.
        a: String,
        /// Report directories of the second side, comma separated.
        b: String,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck(Common),
}

fn read_config<T: for<'de> Deserialize<'de>>(common: &Common) -> anyhow::Result<T> {
    let path = common.config.as_ref().context("--config is required")?;
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn root(common: &Common) -> PathBuf {
    output_root(&common.out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PivotJob {
    checkpoint: PathBuf,
    #[serde(default = "one")]
    projector_reuse: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage3Job {
    #[serde(default)]
    seed: u64,
    bundle: PathBuf,
    data: DatasetManifest,
    lm: LmConfig,
    stage: StageConfig,
    #[serde(default)]
    eval: EvalConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalJob {
    #[serde(default)]
    seed: u64,
    checkpoint: PathBuf,
    data: DatasetManifest,
    #[serde(default)]
    eval: EvalConfig,
}

fn report_set(list: &str) -> anyhow::Result<Vec<EvalReport>> {
    list.split(',')
        .map(|p| {
            let p = Path::new(p);
            let dir = if p.is_file() {
                p.parent().unwrap_or(Path::new("."))
            } else {
                p
            };
            EvalReport::read(dir).with_context(|| format!("reading report in {}", dir.display()))
        })
        .collect()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let m: DatasetManifest = read_config(&c)?;
            let m = DatasetManifest {
                seed: c.seed.unwrap_or(m.seed),
                ..m
            };
            let name = format!("data-{}", short_hash(&serde_json::to_vec(&m)?));
            let (dir, n) = with_staging(&root(&c), &name, |dir| {
                let ds = build_dataset(&m, c.workers.unwrap_or(1))?;
                write_dataset(dir, &ds)?;
                Ok(ds.samples.len())
            })?;
            println!("{n} samples written to {}", dir.display());
        }
        Command::Train(c) => {
            let mut cfg: RunConfig = match &c.config {
                Some(_) => read_config(&c)?,
                None => RunConfig::smoke(),
            };
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            cfg.workers = c.workers.unwrap_or(cfg.workers);
            let out = run(&cfg, &root(&c))?;
            for w in &out.log.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", out.report.to_csv()?);
            println!("artifacts in {}", out.dir.display());
        }
        Command::PivotExtract(c) => {
            let job: PivotJob = read_config(&c)?;
            let ckpt = load_checkpoint(&job.checkpoint)?;
            let bundle = pivot_extract(&ckpt, job.projector_reuse)?;
            let name = format!(
                "pivot-{}-r{}",
                &ckpt
                    .model
                    .component_hash(pivot_lab::model::Component::Encoder)[..16],
                job.projector_reuse
            );
            let (dir, ()) = with_staging(&root(&c), &name, |dir| Ok(save_bundle(dir, &bundle)?))?;
            println!("bundle written to {}", dir.display());
        }
        Command::Stage3(c) => {
            let mut job: Stage3Job = read_config(&c)?;
            job.seed = c.seed.unwrap_or(job.seed);
            job.stage.seed = job.seed;
            let bundle = load_bundle(&job.bundle)?;
            let hash = short_hash(&serde_json::to_vec(&(
                &job.data,
                &job.lm,
                &job.stage.resolved(),
                &job.eval,
                &bundle.provenance,
            ))?);
            let name = format!("stage3-{hash}-s{}", job.seed);
            let workers = c.workers.unwrap_or(1);
            let (dir, report) = with_staging(&root(&c), &name, |dir| {
                let ds = build_dataset(&job.data, workers)?;
                let (ckpt, log) = run_stage3(&bundle, &job.lm, &job.stage, &ds)?;
                save_checkpoint(&dir.join("checkpoint"), &ckpt)?;
                std::fs::write(
                    dir.join("train_log.json"),
                    serde_json::to_string_pretty(&log)?,
                )?;
                let report = evaluate(
                    &ckpt.model,
                    &ds,
                    &job.eval,
                    job.seed,
                    &hash,
                    None,
                    &[],
                    workers,
                )?;
                report.write(dir)?;
                Ok(report)
            })?;
            println!("{}", report.to_csv()?);
            println!("artifacts in {}", dir.display());
        }
        Command::Eval(c) => {
            let mut job: EvalJob = read_config(&c)?;
            job.seed = c.seed.unwrap_or(job.seed);
            let ckpt = load_checkpoint(&job.checkpoint)?;
            let hash = short_hash(&serde_json::to_vec(&(
                &job.data,
                &job.eval,
                &ckpt.provenance,
            ))?);
            let workers = c.workers.unwrap_or(1);
            let (dir, report) =
                with_staging(&root(&c), &format!("eval-{hash}-s{}", job.seed), |dir| {
                    let ds = build_dataset(&job.data, workers)?;
                    let report = evaluate(
                        &ckpt.model,
                        &ds,
                        &job.eval,
                        job.seed,
                        &hash,
                        None,
                        &[],
                        workers,
                    )?;
                    report.write(dir)?;
                    Ok(report)
                })?;
            println!("{}", report.to_csv()?);
            println!("report in {}", dir.display());
        }
        Command::Sweep(c) => {
            let text = std::fs::read_to_string(c.config.as_ref().context("--config is required")?)?;
            let mut grid = GridConfig::from_json(&text)?;
            grid.workers = c.workers.unwrap_or(grid.workers);
            let out = sweep(&grid, &root(&c))?;
            println!(
                "{} cells, {} rows in {}",
                out.reports.len(),
                out.rows.len(),
                out.csv.display()
            );
            for p in &out.plots {
                println!("plot {}", p.display());
            }
        }
        Command::Diff { a, b } => {
            let deltas = report_diff(&report_set(&a)?, &report_set(&b)?)?;
            print!("{}", format_deltas(&deltas));
        }
        Command::GradCheck(c) => {
            let seeds = 5;
            let mut failed = 0;
            for (name, seed, r) in check_all_ops(seeds, 16, 1e-4)? {
                if !r.passed() {
                    failed += 1;
                    println!(
                        "FAIL {name} seed {seed}: max rel err {:.3e}",
                        r.max_rel_error
                    );
                }
            }
            let mut model_cfg = tiny_model();
            model_cfg.encoders[0].depth = 1;
            model_cfg.lm.depth = 1;
            let base = c.seed.unwrap_or(0);
            let data = DatasetManifest {
                image_size: 32,
                ..DatasetManifest::new(
                    base,
                    pivot_lab::data::SplitCounts {
                        stage2_pt: 2,
                        ..Default::default()
                    },
                )
            };
            let ds = build_dataset(&data, 1)?;
            let samples = preferences(&ds, Split::Stage2Pt)?;
            let batch: Vec<_> = samples.iter().collect();
            for seed in base..base + seeds {
                let policy = MultimodalModel::new(&model_cfg, seed)?;
                let reference = MultimodalModel::new(&model_cfg, seed + 1000)?;
                for (name, dpo) in [("sft", None), ("dpo", Some(DpoConfig::default()))] {
                    let r = check_loss_gradients(
                        &policy,
                        &reference,
                        &batch,
                        dpo.as_ref(),
                        2,
                        1e-4,
                        seed,
                    )?;
                    println!(
                        "{name} loss seed {seed}: max rel err {:.3e} over {} coords",
                        r.max_rel_error, r.checked
                    );
                    failed += usize::from(!r.passed());
                }
            }
            if failed > 0 {
                anyhow::bail!("{failed} gradient checks failed");
            }
            println!("all gradient checks passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
