use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use committee_al::acquisition::{score_image_committee, score_image_entropy, ImageScore, Strategy};
use committee_al::active_loop::{run_experiment_with, RunOptions};
use committee_al::config::ExperimentConfig;
use committee_al::data::{load_dataset, save_dataset, validate_annotations, Dataset};
use committee_al::detector::checkpoint::Checkpoint;
use committee_al::report::{discover_run_dirs, load_runs, render_markdown, summarize, RunManifest, SeedStatus};

mod plot;

#[derive(Parser)]
#[command(name = "committee-al", version, about = "Committee-based active learning for object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its train/test split.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the active-learning loop for every strategy and seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated: committee, committee-nofpil, random, entropy, coreset.
        #[arg(long, value_delimiter = ',')]
        strategy: Option<Vec<String>>,
        /// Dataset directory; overrides `data.dir` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Delete existing seed runs before starting.
        #[arg(long)]
        force: bool,
    },
    /// Summarize run directories into tables and plots.
    Report {
        /// Strategy directories, seed directories, or a parent of either.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Score every training image with a saved model, sorted descending.
    ScoreDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The config the checkpoint was trained with (a run's config.toml).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// committee or entropy.
        #[arg(long, default_value = "committee")]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, out, force } => cmd_generate(config.as_deref(), &out, force),
        Command::Run {
            config,
            seeds,
            strategy,
            data,
            out,
            resume,
            force,
        } => cmd_run(&config, seeds, strategy, data, &out, resume, force),
        Command::Report { run_dirs, out } => cmd_report(&run_dirs, &out),
        Command::ScoreDump {
            checkpoint,
            config,
            data,
            strategy,
            out,
        } => cmd_score_dump(&checkpoint, &config, data, &strategy, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn is_non_empty_dir(path: &Path) -> Result<bool> {
    Ok(path.is_dir() && fs::read_dir(path)?.next().is_some())
}

fn cmd_generate(config: Option<&Path>, out: &Path, force: bool) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    if is_non_empty_dir(out)? {
        if !force {
            bail!("{} exists and is not empty; pass --force to overwrite", out.display());
        }
        fs::remove_dir_all(out)?;
    }
    let d = &cfg.data;
    let ds = Dataset::generate(d.seed, d.num_images, &d.generator, d.test_fraction)?;
    let violations = validate_annotations(&ds.samples, &d.generator);
    if !violations.is_empty() {
        bail!("generated annotations violate the configured bounds:\n{}", violations.join("\n"));
    }
    save_dataset(&ds, out)?;
    println!(
        "wrote {} images ({} train / {} test) to {}",
        ds.samples.len(),
        ds.train_ids.len(),
        ds.test_ids.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn open_dataset(cfg: &ExperimentConfig, data: Option<PathBuf>, config_path: &Path) -> Result<Dataset> {
    let dir = data.or_else(|| cfg.data.dir.clone()).with_context(|| {
        format!(
            "no dataset directory; set data.dir or pass --data (create one with `committee-al generate --config {} --out <dir>`)",
            config_path.display()
        )
    })?;
    if !dir.join("manifest.json").exists() {
        bail!(
            "no dataset at {}; create it with `committee-al generate --config {} --out {}`",
            dir.display(),
            config_path.display(),
            dir.display()
        );
    }
    Ok(load_dataset(&dir)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config_path: &Path,
    seeds: Option<Vec<u64>>,
    strategies: Option<Vec<String>>,
    data: Option<PathBuf>,
    out: &Path,
    resume: bool,
    force: bool,
) -> Result<ExitCode> {
    let base = load_config(Some(config_path))?;
    let dataset = open_dataset(&base, data, config_path)?;
    let seeds = seeds.unwrap_or_else(|| vec![base.seed]);
    let variants = strategies.unwrap_or_else(|| vec![base.variant_name()]);
    let mut failed = 0;
    for variant in &variants {
        let cfg = base.with_variant(variant)?;
        let dir = out.join(variant);
        fs::create_dir_all(&dir)?;
        let mut manifest = RunManifest {
            run_id: format!("{variant}-{}", &cfg.hash()[..12]),
            config_hash: cfg.hash(),
            strategy: variant.clone(),
            seeds: seeds.clone(),
            status: seeds.iter().map(|s| (*s, SeedStatus::Pending)).collect(),
            paths: seeds.iter().map(|s| (*s, RunManifest::seed_dir_name(*s))).collect(),
        };
        manifest.save(&dir)?;
        for &seed in &seeds {
            let mut seed_cfg = cfg.clone();
            seed_cfg.seed = seed;
            let seed_dir = dir.join(RunManifest::seed_dir_name(seed));
            if force && seed_dir.exists() {
                fs::remove_dir_all(&seed_dir)?;
            }
            manifest.status.insert(seed, SeedStatus::Running);
            manifest.save(&dir)?;
            let opts = RunOptions {
                dir: Some(seed_dir.clone()),
                resume,
                stop_after: None,
            };
            let status = match run_experiment_with(&seed_cfg, &dataset, &opts) {
                Ok(records) => {
                    let last = records.last().map(|r| r.map_50).unwrap_or(f64::NAN);
                    println!("{variant} seed {seed}: {} cycles, final mAP@0.5 {last:.4}", records.len());
                    SeedStatus::Completed
                }
                Err(e) => {
                    eprintln!("{variant} seed {seed} failed: {e}");
                    failed += 1;
                    SeedStatus::Failed
                }
            };
            manifest.status.insert(seed, status);
            manifest.save(&dir)?;
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ExitCode> {
    let mut runs = Vec::new();
    for root in run_dirs {
        let dirs = discover_run_dirs(root).with_context(|| format!("scanning {}", root.display()))?;
        for d in dirs {
            runs.extend(load_runs(&d)?);
        }
    }
    if runs.is_empty() {
        bail!("no cycle records found under the given directories");
    }
    let summary = summarize(&runs)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let md = render_markdown(&summary);
    fs::write(out.join("summary.md"), &md)?;
    plot::write_plots(&summary, out)?;
    println!("{md}");
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_score_dump(checkpoint: &Path, config_path: &Path, data: Option<PathBuf>, strategy: &str, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(Some(config_path))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_hash != cfg.hash() {
        bail!(
            "checkpoint was trained with config {} but {} hashes to {}",
            ckpt.config_hash,
            config_path.display(),
            cfg.hash()
        );
    }
    let model = ckpt.to_detector(&cfg.detector)?;
    let dataset = open_dataset(&cfg, data, config_path)?;
    let strategy: Strategy = strategy.parse()?;
    let scoring = cfg.scoring();
    let mut scores: Vec<ImageScore> = Vec::with_capacity(dataset.train_ids.len());
    for &id in &dataset.train_ids {
        let pred = model.forward(&dataset.sample(id).image)?;
        scores.push(match strategy {
            Strategy::Committee => score_image_committee(id, &pred, &scoring)?,
            Strategy::Entropy => score_image_entropy(id, &pred),
            other => bail!("{other} has no per-image score to dump; use committee or entropy"),
        });
    }
    let result = committee_al::acquisition::SelectionResult {
        strategy_name: strategy.name().into(),
        selected_ids: Vec::new(),
        all_scores: scores,
    };
    let records = committee_al::acquisition::score_records(ckpt.cycle as usize, &result);
    committee_al::acquisition::write_score_records(out, &records)?;
    println!("wrote {} scores to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
