//! Experiment grids: the method-vs-baseline comparison, the γ-ratio
//! ablation with domain-order swap, and fine-tune convergence curves.
//!
//! Every cell (method, order, γ, seed) runs the full pipeline in its own
//! run directory under a shared work directory, against one shared dataset
//! root (identical data for every cell, so differences are attributable to
//! method). Results append to a delimited text store, one record per cell;
//! completed cells are skipped on re-run.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::config::{format_gamma, parse_gamma, DomainOrder, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{EpochAcc, MetricsReport};
use crate::pipeline::{
    generate_data, load_data, run_build_buffer, run_build_buffer_random, run_continual,
    run_evaluate, run_finetune, run_pretrain, write_loss_csv, FinetuneSource, RunPaths,
};
use crate::rehearsal::derive_buffer_params;
use crate::train::pretrain_stage1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ours,
    JointMae,
    MaeD1Only,
    MaeD2Only,
    NoPretrain,
    RandomBuffer,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::JointMae,
        Method::MaeD1Only,
        Method::MaeD2Only,
        Method::NoPretrain,
        Method::RandomBuffer,
    ];

    /// Does the pretraining order change anything for this method?
    pub fn order_sensitive(self) -> bool {
        matches!(self, Method::Ours | Method::RandomBuffer)
    }

    /// Does the γ ratio enter this method at all?
    pub fn uses_gamma(self) -> bool {
        matches!(self, Method::Ours)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Ours => "ours",
            Method::JointMae => "joint_mae",
            Method::MaeD1Only => "mae_d1_only",
            Method::MaeD2Only => "mae_d2_only",
            Method::NoPretrain => "no_pretrain",
            Method::RandomBuffer => "random_buffer",
        };
        write!(f, "{name}")
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "joint_mae" => Ok(Method::JointMae),
            "mae_d1_only" => Ok(Method::MaeD1Only),
            "mae_d2_only" => Ok(Method::MaeD2Only),
            "no_pretrain" => Ok(Method::NoPretrain),
            "random_buffer" => Ok(Method::RandomBuffer),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// One grid cell. Order and γ are normalized away for methods they cannot
/// affect, so equivalent cells collapse to one key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub method: Method,
    pub order: DomainOrder,
    pub gamma: [f64; 3],
    pub seed: u64,
}

impl CellSpec {
    pub fn normalized(mut self) -> Self {
        if !self.method.order_sensitive() {
            self.order = DomainOrder::D1ThenD2;
        }
        if !self.method.uses_gamma() {
            self.gamma = [6.0, 3.0, 1.0];
        }
        self
    }

    /// Full cell identity; the results store is keyed by this.
    pub fn key(&self) -> String {
        let n = self.normalized();
        format!("{}|{}|{}|{}", n.method, n.order, format_gamma(&n.gamma), n.seed)
    }

    fn dir_name(&self) -> String {
        self.key().replace(['|', ':'], "_")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub cells: Vec<CellSpec>,
}

impl ExperimentPlan {
    /// Deduplicated plan from a method/order/seed grid at one γ.
    pub fn comparison(
        methods: &[Method],
        orders: &[DomainOrder],
        gamma: [f64; 3],
        seeds: &[u64],
    ) -> Self {
        let mut cells: Vec<CellSpec> = Vec::new();
        for &method in methods {
            for &order in orders {
                for &seed in seeds {
                    let cell = CellSpec {
                        method,
                        order,
                        gamma,
                        seed,
                    }
                    .normalized();
                    if !cells.iter().any(|c| c.key() == cell.key()) {
                        cells.push(cell);
                    }
                }
            }
        }
        ExperimentPlan { cells }
    }

    /// γ-grid ablation of the full method across orders.
    pub fn ablation(gammas: &[[f64; 3]], orders: &[DomainOrder], seeds: &[u64]) -> Self {
        let mut cells = Vec::new();
        for &gamma in gammas {
            for &order in orders {
                for &seed in seeds {
                    cells.push(CellSpec {
                        method: Method::Ours,
                        order,
                        gamma,
                        seed,
                    });
                }
            }
        }
        ExperimentPlan { cells }
    }

    /// The six γ ratios of the reference ablation grid.
    pub fn reference_gamma_grid() -> Vec<[f64; 3]> {
        vec![
            [1.0, 1.0, 8.0],
            [1.0, 3.0, 6.0],
            [2.0, 3.0, 5.0],
            [5.0, 3.0, 2.0],
            [6.0, 3.0, 1.0],
            [8.0, 1.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: CellSpec,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub wall_secs: f64,
    pub checkpoint: String,
    pub error: Option<String>,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Run one cell through the full pipeline in `cell_dir`.
pub fn run_cell(
    base: &RunConfig,
    cell: &CellSpec,
    data_dir: &Path,
    cell_dir: &Path,
) -> Result<MetricsReport> {
    let mut cfg = *base;
    cfg.seed = cell.seed;
    cfg.domain_order = cell.order;
    cfg.rehearsal.gamma = cell.gamma;
    match cell.method {
        Method::Ours => {
            run_pretrain(&cfg, data_dir, cell_dir)?;
            run_build_buffer(&cfg, data_dir, cell_dir)?;
            run_continual(&cfg, data_dir, cell_dir)?;
            run_finetune(&cfg, data_dir, cell_dir, FinetuneSource::Stage3)?;
        }
        Method::RandomBuffer => {
            run_pretrain(&cfg, data_dir, cell_dir)?;
            run_build_buffer_random(&cfg, data_dir, cell_dir)?;
            run_continual(&cfg, data_dir, cell_dir)?;
            run_finetune(&cfg, data_dir, cell_dir, FinetuneSource::Stage3)?;
        }
        Method::MaeD1Only => {
            cfg.domain_order = DomainOrder::D1ThenD2;
            run_pretrain(&cfg, data_dir, cell_dir)?;
            run_finetune(&cfg, data_dir, cell_dir, FinetuneSource::Stage1)?;
        }
        Method::MaeD2Only => {
            cfg.domain_order = DomainOrder::D2ThenD1;
            run_pretrain(&cfg, data_dir, cell_dir)?;
            run_finetune(&cfg, data_dir, cell_dir, FinetuneSource::Stage1)?;
        }
        Method::NoPretrain => {
            RunPaths::new(cell_dir).echo_config(&cfg)?;
            run_finetune(&cfg, data_dir, cell_dir, FinetuneSource::None)?;
        }
        Method::JointMae => {
            run_joint_pretrain(&cfg, data_dir, cell_dir)?;
            run_finetune(&cfg, data_dir, cell_dir, FinetuneSource::Stage1)?;
        }
    }
    run_evaluate(&cfg, data_dir, cell_dir)
}

/// Masked-autoencoder pretraining on the concatenation of both domains,
/// with the iteration budget matched to stage 1 + stage 3 of the full
/// method so the comparison is compute-fair.
fn run_joint_pretrain(cfg: &RunConfig, data_dir: &Path, run_dir: &Path) -> Result<()> {
    let paths = RunPaths::new(run_dir);
    paths.echo_config(cfg)?;
    let data = load_data(data_dir)?;
    let (first, second) = data.ordered(cfg.domain_order);

    let s1 = cfg.stage1.batch_size.max(1);
    let s3 = cfg.stage3.batch_size.max(1);
    let (_, t) = derive_buffer_params(first.len(), cfg.rehearsal.alpha, cfg.rehearsal.beta)?;
    let ours_iters = cfg.stage1.epochs * first.len().div_ceil(s1)
        + cfg.stage3.epochs * (second.len().div_ceil(s3) + t.div_ceil(s3));
    let joint_len = first.len() + second.len();
    let joint_batches = joint_len.div_ceil(s1);
    let epochs = (ours_iters as f64 / joint_batches as f64).round().max(1.0) as usize;

    let mut images = first.images.clone();
    images.extend(second.images.iter().cloned());
    let joint = Dataset {
        images,
        c: first.c,
        h: first.h,
        w: first.w,
        domain_id: 0,
        sample_ids: (0..joint_len as u64).collect(),
        labels: vec![None; joint_len],
        seeds: vec![0; joint_len],
    };
    let mut train_cfg = cfg.stage1_train();
    train_cfg.epochs = epochs;
    train_cfg.warmup_epochs = cfg.stage1.warmup_epochs.min(epochs);
    let result = pretrain_stage1(&joint, cfg.model, &train_cfg, Some(run_dir))?;
    crate::checkpoint::save(
        &paths.m1(),
        &crate::checkpoint::Checkpoint::new(crate::checkpoint::Stage::Stage1, result.params.clone()),
    )?;
    write_loss_csv(&paths.stage1_loss(), &result.history)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Results store: append-only CSV, one record per cell.
// ---------------------------------------------------------------------------

const STORE_HEADER: &str = "method,order,gamma,seed,status,acc,auc,f1,wall_secs,checkpoint,error";

fn sanitize(text: &str) -> String {
    text.replace([',', '\n', '\r'], ";")
}

fn append_record(store: &Path, result: &CellResult) -> Result<()> {
    let new_file = !store.is_file();
    if let Some(parent) = store.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(store)
        .map_err(|e| Error::io(store, e))?;
    if new_file {
        writeln!(file, "{STORE_HEADER}").map_err(|e| Error::io(store, e))?;
    }
    let cell = result.cell.normalized();
    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    writeln!(
        file,
        "{},{},{},{},{},{},{},{},{},{},{}",
        cell.method,
        cell.order,
        format_gamma(&cell.gamma),
        cell.seed,
        if result.is_ok() { "ok" } else { "error" },
        fmt_opt(result.acc),
        fmt_opt(result.auc),
        fmt_opt(result.f1),
        result.wall_secs,
        sanitize(&result.checkpoint),
        sanitize(result.error.as_deref().unwrap_or("")),
    )
    .map_err(|e| Error::io(store, e))?;
    file.flush().map_err(|e| Error::io(store, e))?;
    Ok(())
}

pub fn read_store(store: &Path) -> Result<Vec<CellResult>> {
    if !store.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(store).map_err(|e| Error::io(store, e))?;
    let mut results = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::parse(
                store,
                format!("line {}: expected 11 fields, got {}", i + 1, fields.len()),
            ));
        }
        let parse_opt = |s: &str| -> Option<f64> { s.parse().ok() };
        results.push(CellResult {
            cell: CellSpec {
                method: fields[0].parse()?,
                order: fields[1].parse()?,
                gamma: parse_gamma(fields[2])?,
                seed: fields[3]
                    .parse()
                    .map_err(|e| Error::parse(store, format!("line {}: {e}", i + 1)))?,
            },
            acc: parse_opt(fields[5]),
            auc: parse_opt(fields[6]),
            f1: parse_opt(fields[7]),
            wall_secs: fields[8].parse().unwrap_or(0.0),
            checkpoint: fields[9].to_string(),
            error: if fields[4] == "ok" {
                None
            } else {
                Some(fields[10].to_string())
            },
        });
    }
    Ok(results)
}

/// Execute every cell of the plan that has no successful record yet. Failed
/// cells are recorded and the plan continues; successful records are never
/// re-run.
pub fn run_plan(
    plan: &ExperimentPlan,
    base: &RunConfig,
    data_dir: &Path,
    work_dir: &Path,
    store_path: &Path,
) -> Result<Vec<CellResult>> {
    if !data_dir.join("d1").join("manifest.jsonl").is_file() {
        generate_data(base, data_dir, false)?;
    }
    let existing = read_store(store_path)?;
    let done: Vec<String> = existing
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| r.cell.key())
        .collect();
    let mut results = existing;
    for cell in &plan.cells {
        let key = cell.key();
        if done.contains(&key) {
            continue;
        }
        let cell_dir = work_dir.join("cells").join(cell.dir_name());
        let start = Instant::now();
        let outcome = run_cell(base, cell, data_dir, &cell_dir);
        let wall_secs = start.elapsed().as_secs_f64();
        let result = match outcome {
            Ok(report) => CellResult {
                cell: *cell,
                acc: Some(report.acc),
                auc: report.auc,
                f1: Some(report.f1),
                wall_secs,
                checkpoint: RunPaths::new(&cell_dir)
                    .classifier()
                    .display()
                    .to_string(),
                error: None,
            },
            Err(err) => {
                eprintln!("cell {key} failed: {err}");
                CellResult {
                    cell: *cell,
                    acc: None,
                    auc: None,
                    f1: None,
                    wall_secs,
                    checkpoint: String::new(),
                    error: Some(err.to_string()),
                }
            }
        };
        append_record(store_path, &result)?;
        results.push(result);
    }
    Ok(results)
}

/// Mean and half-range per (method, order, γ) over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub order: DomainOrder,
    pub gamma: [f64; 3],
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_half_range: f64,
    pub auc_mean: Option<f64>,
    pub f1_mean: f64,
}

pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut groups: Vec<(String, Vec<&CellResult>)> = Vec::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        let cell = r.cell.normalized();
        let group_key = format!("{}|{}|{}", cell.method, cell.order, format_gamma(&cell.gamma));
        match groups.iter_mut().find(|(k, _)| *k == group_key) {
            Some((_, list)) => list.push(r),
            None => groups.push((group_key, vec![r])),
        }
    }
    for (_, list) in groups {
        let cell = list[0].cell.normalized();
        let accs: Vec<f64> = list.iter().filter_map(|r| r.acc).collect();
        let aucs: Vec<f64> = list.iter().filter_map(|r| r.auc).collect();
        let f1s: Vec<f64> = list.iter().filter_map(|r| r.f1).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let half_range = |v: &[f64]| {
            if v.len() < 2 {
                0.0
            } else {
                let max = v.iter().copied().fold(f64::MIN, f64::max);
                let min = v.iter().copied().fold(f64::MAX, f64::min);
                (max - min) / 2.0
            }
        };
        rows.push(SummaryRow {
            method: cell.method,
            order: cell.order,
            gamma: cell.gamma,
            runs: list.len(),
            acc_mean: mean(&accs),
            acc_half_range: half_range(&accs),
            auc_mean: if aucs.is_empty() { None } else { Some(mean(&aucs)) },
            f1_mean: mean(&f1s),
        });
    }
    rows
}

pub fn format_summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(
        "method           order       gamma    n  acc          auc    f1\n",
    );
    for row in rows {
        let auc = row
            .auc_mean
            .map_or_else(|| "  n/a".to_string(), |a| format!("{a:.3}"));
        out.push_str(&format!(
            "{:<16} {:<11} {:<8} {:<2} {:.3}±{:.3}  {}  {:.3}\n",
            row.method.to_string(),
            row.order.to_string(),
            format_gamma(&row.gamma),
            row.runs,
            row.acc_mean,
            row.acc_half_range,
            auc,
            row.f1_mean
        ));
    }
    out
}

/// Best accuracy reached along a fine-tune curve (the running-max endpoint).
pub fn final_best_acc(curve: &[EpochAcc]) -> Option<f64> {
    curve.iter().map(|p| p.acc).fold(None, |best, acc| {
        Some(best.map_or(acc, |b: f64| b.max(acc)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        let plan = ExperimentPlan::comparison(
            &[Method::Ours, Method::NoPretrain],
            &[DomainOrder::D1ThenD2],
            [6.0, 3.0, 1.0],
            &[1],
        );
        assert_eq!(plan.cells.len(), 2);

        // The reference γ grid over both orders: 6 rows per order.
        let plan = ExperimentPlan::ablation(
            &ExperimentPlan::reference_gamma_grid(),
            &[DomainOrder::D1ThenD2, DomainOrder::D2ThenD1],
            &[1],
        );
        assert_eq!(plan.cells.len(), 12);
    }

    #[test]
    fn order_insensitive_methods_dedupe() {
        let plan = ExperimentPlan::comparison(
            &[Method::NoPretrain, Method::JointMae],
            &[DomainOrder::D1ThenD2, DomainOrder::D2ThenD1],
            [6.0, 3.0, 1.0],
            &[1],
        );
        // Order collapses for both methods.
        assert_eq!(plan.cells.len(), 2);
    }

    #[test]
    fn cell_key_is_stable() {
        let cell = CellSpec {
            method: Method::Ours,
            order: DomainOrder::D2ThenD1,
            gamma: [5.0, 3.0, 2.0],
            seed: 7,
        };
        assert_eq!(cell.key(), "ours|d2_then_d1|5:3:2|7");
    }

    #[test]
    fn store_roundtrip_and_failure_records() {
        let tmp = tempfile::tempdir().unwrap();
        let store = tmp.path().join("results.csv");
        let ok = CellResult {
            cell: CellSpec {
                method: Method::Ours,
                order: DomainOrder::D1ThenD2,
                gamma: [6.0, 3.0, 1.0],
                seed: 1,
            },
            acc: Some(0.9),
            auc: Some(0.95),
            f1: Some(0.89),
            wall_secs: 12.5,
            checkpoint: "/tmp/x.ckpt".into(),
            error: None,
        };
        let failed = CellResult {
            cell: CellSpec {
                method: Method::NoPretrain,
                order: DomainOrder::D1ThenD2,
                gamma: [6.0, 3.0, 1.0],
                seed: 2,
            },
            acc: None,
            auc: None,
            f1: None,
            wall_secs: 0.1,
            checkpoint: String::new(),
            error: Some("boom, with a comma".into()),
        };
        append_record(&store, &ok).unwrap();
        append_record(&store, &failed).unwrap();
        let loaded = read_store(&store).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded[0].is_ok());
        assert_eq!(loaded[0].acc, Some(0.9));
        assert!(!loaded[1].is_ok());
        assert!(loaded[1].error.as_deref().unwrap().contains("boom"));
    }

    #[test]
    fn summary_aggregates_over_seeds() {
        let mk = |seed, acc| CellResult {
            cell: CellSpec {
                method: Method::Ours,
                order: DomainOrder::D1ThenD2,
                gamma: [6.0, 3.0, 1.0],
                seed,
            },
            acc: Some(acc),
            auc: Some(0.9),
            f1: Some(acc),
            wall_secs: 1.0,
            checkpoint: String::new(),
            error: None,
        };
        let rows = summarize(&[mk(1, 0.8), mk(2, 0.9), mk(3, 0.85)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].runs, 3);
        assert!((rows[0].acc_mean - 0.85).abs() < 1e-12);
        assert!((rows[0].acc_half_range - 0.05).abs() < 1e-12);
    }

    #[test]
    fn best_acc_is_running_max() {
        let curve = vec![
            EpochAcc { epoch: 0, acc: 0.5 },
            EpochAcc { epoch: 1, acc: 0.8 },
            EpochAcc { epoch: 2, acc: 0.7 },
        ];
        assert_eq!(final_best_acc(&curve), Some(0.8));
        assert_eq!(final_best_acc(&[]), None);
    }
}
