//! Command-line entry point for the continual pretraining pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cssl_core::config::{parse_gamma, DomainOrder, RunConfig};
use cssl_core::experiments::{
    format_summary_table, run_cell, run_plan, summarize, CellSpec, ExperimentPlan, Method,
};
use cssl_core::pipeline::{
    generate_data, run_build_buffer, run_continual, run_evaluate, run_finetune, run_pretrain,
    FinetuneSource, RunPaths,
};
use cssl_core::rehearsal::derive_buffer_params;

#[derive(Parser)]
#[command(
    name = "cssl",
    version,
    about = "Continual self-supervised pretraining over two synthetic imaging domains",
    long_about = "Three-stage pipeline: masked-autoencoder pretraining on the first domain, \
rehearsal-buffer construction by embedding-space clustering, and continual pretraining on the \
second domain with mixup and feature distillation, followed by supervised fine-tuning and \
ACC/AUC/F1 evaluation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration resolution, shared by every subcommand.
///
/// Priority: --config file if given; otherwise an existing run-directory
/// echo (`<run>/config.kv`); otherwise the named preset. `--set` overrides
/// apply last.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration preset (`tiny` or `paper`).
    #[arg(long, default_value = "tiny")]
    preset: String,

    /// Key-value configuration file (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Single-key override, repeatable: --set stage1.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, run_dir: Option<&Path>) -> anyhow::Result<RunConfig> {
        let mut cfg = if let Some(path) = &self.config {
            RunConfig::load(path).with_context(|| format!("loading config {path:?}"))?
        } else if let Some(echo) = run_dir
            .map(|dir| RunPaths::new(dir).config())
            .filter(|p| p.is_file())
        {
            RunConfig::load(&echo).with_context(|| format!("loading run config {echo:?}"))?
        } else {
            RunConfig::preset(&self.preset)?
        };
        for assignment in &self.set {
            let (key, value) = assignment
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {assignment:?}"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two pretraining domains and the labeled train/test split.
    GenData {
        /// Output dataset root (creates d1/, d2/, labeled_train/, labeled_test/).
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: masked-autoencoder pretraining on the first-ordered domain.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: build the rehearsal buffer from the stage-1 checkpoint.
    BuildBuffer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Print the derived cluster count and buffer size, then exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 3: continual pretraining on the second domain plus the buffer.
    Continual {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a pretrained encoder on the labeled training split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Encoder source: m2 (default), m1, or none (random init).
        #[arg(long, default_value = "m2")]
        from: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the fine-tuned classifier on the labeled test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the whole pipeline for one method and print its metrics row.
    Pipeline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// ours, joint_mae, mae_d1_only, mae_d2_only, no_pretrain, random_buffer
        #[arg(long, default_value = "ours")]
        method: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run an experiment grid with a resumable results store.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Work directory holding one run directory per cell.
        #[arg(long)]
        work: PathBuf,
        /// Results store (append-only CSV).
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated methods; when given, runs a method comparison
        /// instead of the γ-ratio grid.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated γ ratios for the ablation grid (default: the
        /// reference six).
        #[arg(long)]
        gammas: Option<String>,
        /// `d1_then_d2`, `d2_then_d1`, or `both`.
        #[arg(long, default_value = "both")]
        orders: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_orders(text: &str) -> anyhow::Result<Vec<DomainOrder>> {
    Ok(match text {
        "both" => vec![DomainOrder::D1ThenD2, DomainOrder::D2ThenD1],
        other => vec![other.parse()?],
    })
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed {s:?}"))
        })
        .collect()
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, force, cfg } => {
            let cfg = cfg.resolve(None)?;
            generate_data(&cfg, &out, force)?;
            println!(
                "wrote {} + {} pretraining images and {} + {} labeled images under {}",
                cfg.data.count_d1,
                cfg.data.count_d2,
                cfg.data.count_labeled_train,
                cfg.data.count_labeled_test,
                out.display()
            );
        }
        Command::Pretrain { data, run, cfg } => {
            let cfg = cfg.resolve(Some(&run))?;
            let result = run_pretrain(&cfg, &data, &run)?;
            let last = result.history.last().map_or(f64::NAN, |r| r.loss_mse.unwrap_or(f64::NAN));
            println!(
                "stage 1 done: {} steps, final loss {last:.6}, checkpoint {}",
                result.history.len(),
                RunPaths::new(&run).m1().display()
            );
        }
        Command::BuildBuffer {
            data,
            run,
            dry_run,
            cfg,
        } => {
            let cfg = cfg.resolve(Some(&run))?;
            let n1 = match cfg.domain_order {
                DomainOrder::D1ThenD2 => cfg.data.count_d1,
                DomainOrder::D2ThenD1 => cfg.data.count_d2,
            };
            let (k, t) = derive_buffer_params(n1, cfg.rehearsal.alpha, cfg.rehearsal.beta)?;
            println!("K={k} T={t}");
            if dry_run {
                return Ok(());
            }
            let buffer = run_build_buffer(&cfg, &data, &run)?;
            println!(
                "buffer manifest with {} samples at {}",
                buffer.entries.len(),
                RunPaths::new(&run).buffer().display()
            );
        }
        Command::Continual { data, run, cfg } => {
            let cfg = cfg.resolve(Some(&run))?;
            let result = run_continual(&cfg, &data, &run)?;
            println!(
                "stage 3 done: {} steps, checkpoint {}",
                result.history.len(),
                RunPaths::new(&run).m2().display()
            );
        }
        Command::Finetune {
            data,
            run,
            from,
            cfg,
        } => {
            let cfg = cfg.resolve(Some(&run))?;
            let source: FinetuneSource = from.parse()?;
            run_finetune(&cfg, &data, &run, source)?;
            println!(
                "fine-tune done, classifier at {}",
                RunPaths::new(&run).classifier().display()
            );
        }
        Command::Evaluate { data, run, cfg } => {
            let cfg = cfg.resolve(Some(&run))?;
            let report = run_evaluate(&cfg, &data, &run)?;
            println!("method           order      acc   auc   f1");
            println!("{}", report.table_row("(run)", &cfg.domain_order.to_string()));
        }
        Command::Pipeline {
            data,
            run,
            method,
            cfg,
        } => {
            let cfg = cfg.resolve(Some(&run))?;
            let method: Method = method.parse()?;
            if !data.join("d1").join("manifest.jsonl").is_file() {
                bail!(
                    "no dataset at {}: run `cssl gen-data --out {}` first",
                    data.display(),
                    data.display()
                );
            }
            let cell = CellSpec {
                method,
                order: cfg.domain_order,
                gamma: cfg.rehearsal.gamma,
                seed: cfg.seed,
            };
            let report = run_cell(&cfg, &cell, &data, &run)?;
            println!("method           order      acc   auc   f1");
            println!(
                "{}",
                report.table_row(&method.to_string(), &cfg.domain_order.to_string())
            );
        }
        Command::Ablate {
            data,
            work,
            store,
            methods,
            gammas,
            orders,
            seeds,
            cfg,
        } => {
            let cfg = cfg.resolve(None)?;
            let orders = parse_orders(&orders)?;
            let seeds = parse_seeds(&seeds)?;
            let plan = if let Some(methods) = methods {
                let methods: Vec<Method> = methods
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<_, _>>()?;
                ExperimentPlan::comparison(&methods, &orders, cfg.rehearsal.gamma, &seeds)
            } else {
                let gammas = match gammas {
                    Some(text) => text
                        .split(',')
                        .map(|g| parse_gamma(g.trim()))
                        .collect::<Result<Vec<_>, _>>()?,
                    None => ExperimentPlan::reference_gamma_grid(),
                };
                ExperimentPlan::ablation(&gammas, &orders, &seeds)
            };
            println!("plan: {} cells", plan.cells.len());
            let results = run_plan(&plan, &cfg, &data, &work, &store)?;
            print!("{}", format_summary_table(&summarize(&results)));
            let failures = results.iter().filter(|r| !r.is_ok()).count();
            if failures > 0 {
                eprintln!("warning: {failures} cells failed; see {}", store.display());
            }
        }
    }
    Ok(())
}
