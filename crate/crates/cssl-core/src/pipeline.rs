//! Run-directory orchestration: each pipeline step validates its upstream
//! artifacts, does its work, and writes its outputs into a fixed layout.
//!
//! ```text
//! <data_dir>/d1/ d2/ labeled_train/ labeled_test/   (gen-data)
//! <run_dir>/config.kv                               (every step echoes it)
//!           m1.ckpt stage1_loss.csv                 (pretrain)
//!           buffer.jsonl                            (build-buffer)
//!           m2.ckpt stage3_loss.csv                 (continual)
//!           classifier.ckpt finetune_loss.csv
//!           finetune_curve.csv                      (finetune)
//!           metrics.json                            (evaluate)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint, Stage};
use crate::config::{DomainOrder, RunConfig};
use crate::data::{export_dataset, import_dataset, Dataset};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, finetune, Classifier, FinetuneOptions};
use crate::model::mae::embed_image;
use crate::model::{ModelParams, Pooling};
use crate::rehearsal::{
    cluster_distances, d2_class_center, derive_buffer_params, kmeans, partition_groups,
    read_buffer_manifest, select_buffer, select_buffer_random, BufferEntry, BufferMeta,
    RehearsalBuffer,
};
use crate::train::{continual_train_stage3, pretrain_stage1, LossRecord, StageResult};

/// Well-known file names inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.kv")
    }
    pub fn m1(&self) -> PathBuf {
        self.root.join("m1.ckpt")
    }
    pub fn m2(&self) -> PathBuf {
        self.root.join("m2.ckpt")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }
    pub fn buffer(&self) -> PathBuf {
        self.root.join("buffer.jsonl")
    }
    pub fn stage1_loss(&self) -> PathBuf {
        self.root.join("stage1_loss.csv")
    }
    pub fn stage3_loss(&self) -> PathBuf {
        self.root.join("stage3_loss.csv")
    }
    pub fn finetune_loss(&self) -> PathBuf {
        self.root.join("finetune_loss.csv")
    }
    pub fn curve(&self) -> PathBuf {
        self.root.join("finetune_curve.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    /// Write the resolved config echo (the reproducibility record).
    pub fn echo_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        cfg.save(&self.config())
    }
}

/// Dataset directories under one data root.
#[derive(Debug, Clone)]
pub struct DataDirs {
    pub root: PathBuf,
}

impl DataDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDirs { root: root.into() }
    }

    pub fn d1(&self) -> PathBuf {
        self.root.join("d1")
    }
    pub fn d2(&self) -> PathBuf {
        self.root.join("d2")
    }
    pub fn labeled_train(&self) -> PathBuf {
        self.root.join("labeled_train")
    }
    pub fn labeled_test(&self) -> PathBuf {
        self.root.join("labeled_test")
    }
}

/// Generate and export the two pretraining domains plus the labeled
/// train/test split. Refuses to overwrite an existing dataset without
/// `force`.
pub fn generate_data(cfg: &RunConfig, data_dir: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let dirs = DataDirs::new(data_dir);
    let existing: Vec<PathBuf> = [
        dirs.d1(),
        dirs.d2(),
        dirs.labeled_train(),
        dirs.labeled_test(),
    ]
    .into_iter()
    .filter(|d| d.join("manifest.jsonl").is_file())
    .collect();
    if !existing.is_empty() && !force {
        return Err(Error::invalid(format!(
            "dataset already exists at {existing:?}; pass --force to overwrite"
        )));
    }
    if let Some(parent) = data_dir.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::invalid(format!(
                "parent directory {parent:?} does not exist"
            )));
        }
    }
    export_dataset(&cfg.gen_d1()?, &dirs.d1())?;
    export_dataset(&cfg.gen_d2()?, &dirs.d2())?;
    export_dataset(&cfg.gen_labeled_train()?, &dirs.labeled_train())?;
    export_dataset(&cfg.gen_labeled_test()?, &dirs.labeled_test())?;
    Ok(())
}

/// The four datasets of one data root.
pub struct PipelineData {
    pub d1: Dataset,
    pub d2: Dataset,
    pub labeled_train: Dataset,
    pub labeled_test: Dataset,
}

impl PipelineData {
    /// Pretraining datasets in the configured order: (first, second).
    pub fn ordered(&self, order: DomainOrder) -> (&Dataset, &Dataset) {
        match order {
            DomainOrder::D1ThenD2 => (&self.d1, &self.d2),
            DomainOrder::D2ThenD1 => (&self.d2, &self.d1),
        }
    }
}

pub fn load_data(data_dir: &Path) -> Result<PipelineData> {
    let dirs = DataDirs::new(data_dir);
    Ok(PipelineData {
        d1: import_dataset(&dirs.d1())?,
        d2: import_dataset(&dirs.d2())?,
        labeled_train: import_dataset(&dirs.labeled_train())?,
        labeled_test: import_dataset(&dirs.labeled_test())?,
    })
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "step,loss_mse,loss_fd,lr").map_err(|e| Error::io(path, e))?;
    for r in history {
        let mse = r.loss_mse.map_or(String::new(), |v| format!("{v}"));
        let fd = r.loss_fd.map_or(String::new(), |v| format!("{v}"));
        writeln!(out, "{},{},{},{}", r.step, mse, fd, r.lr).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, curve: &[crate::metrics::EpochAcc]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "epoch,acc").map_err(|e| Error::io(path, e))?;
    for p in curve {
        writeln!(out, "{},{}", p.epoch, p.acc).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<crate::metrics::EpochAcc>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut curve = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (epoch, acc) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, format!("line {}: expected two fields", i + 1)))?;
        curve.push(crate::metrics::EpochAcc {
            epoch: epoch
                .parse()
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?,
            acc: acc
                .parse()
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?,
        });
    }
    Ok(curve)
}

/// Stage-1 pretraining on the first-ordered domain.
pub fn run_pretrain(cfg: &RunConfig, data_dir: &Path, run_dir: &Path) -> Result<StageResult> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir);
    paths.echo_config(cfg)?;
    let data = load_data(data_dir)?;
    let (first, _) = data.ordered(cfg.domain_order);
    let result = pretrain_stage1(first, cfg.model, &cfg.stage1_train(), Some(run_dir))?;
    checkpoint::save(
        &paths.m1(),
        &Checkpoint::new(Stage::Stage1, result.params.clone()),
    )?;
    write_loss_csv(&paths.stage1_loss(), &result.history)?;
    Ok(result)
}

/// Batched per-image embeddings with a fixed batch size so accumulation
/// order never depends on caller context.
pub fn embed_dataset(params: &ModelParams, data: &Dataset, pooling: Pooling) -> Result<Vec<f64>> {
    const EMBED_BATCH: usize = 32;
    let mut out = Vec::with_capacity(data.len() * params.config().d_enc);
    let positions: Vec<usize> = (0..data.len()).collect();
    for chunk in positions.chunks(EMBED_BATCH) {
        let batch = data.batch(chunk);
        out.extend(embed_image(&batch, params, pooling)?);
    }
    Ok(out)
}

/// Stage-2 buffer construction from the stage-1 checkpoint.
pub fn run_build_buffer(cfg: &RunConfig, data_dir: &Path, run_dir: &Path) -> Result<RehearsalBuffer> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir);
    paths.echo_config(cfg)?;
    let m1 = checkpoint::load_required(&paths.m1(), "pretrain")?;
    m1.ensure_config(&cfg.model)?;
    let data = load_data(data_dir)?;
    let (first, second) = data.ordered(cfg.domain_order);
    let (k, t) = derive_buffer_params(first.len(), cfg.rehearsal.alpha, cfg.rehearsal.beta)?;

    let emb_first = embed_dataset(&m1.params, first, cfg.rehearsal.pooling)?;
    let emb_second = embed_dataset(&m1.params, second, cfg.rehearsal.pooling)?;
    let d = cfg.model.d_enc;
    let seed = cfg.kmeans_seed();
    let clustering = kmeans(&emb_first, first.len(), d, k, seed)?;
    let q = d2_class_center(&emb_first, first.len(), &emb_second, second.len(), d, seed)?;
    let distances = cluster_distances(&clustering.centers, k, d, &q);
    let partition = partition_groups(&distances)?;
    let entries = select_buffer(
        &first.sample_ids,
        &emb_first,
        &clustering,
        &partition,
        t,
        cfg.rehearsal.gamma,
    )?;
    let buffer = RehearsalBuffer {
        meta: BufferMeta {
            k,
            t,
            gamma: cfg.rehearsal.gamma,
            alpha: cfg.rehearsal.alpha,
            beta: cfg.rehearsal.beta,
            seed,
        },
        entries,
    };
    crate::rehearsal::write_buffer_manifest(&paths.buffer(), &buffer)?;
    Ok(buffer)
}

/// Uniform-random buffer (ablation control); same manifest format.
pub fn run_build_buffer_random(
    cfg: &RunConfig,
    data_dir: &Path,
    run_dir: &Path,
) -> Result<RehearsalBuffer> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir);
    paths.echo_config(cfg)?;
    let data = load_data(data_dir)?;
    let (first, _) = data.ordered(cfg.domain_order);
    let (k, t) = derive_buffer_params(first.len(), cfg.rehearsal.alpha, cfg.rehearsal.beta)?;
    let ids = select_buffer_random(&first.sample_ids, t, cfg.random_buffer_seed())?;
    let entries = ids
        .into_iter()
        .map(|sample_id| BufferEntry {
            sample_id,
            cluster: 0,
            group: 0,
            distance_to_own_center: 0.0,
            cluster_distance: 0.0,
        })
        .collect();
    let buffer = RehearsalBuffer {
        meta: BufferMeta {
            k,
            t,
            gamma: cfg.rehearsal.gamma,
            alpha: cfg.rehearsal.alpha,
            beta: cfg.rehearsal.beta,
            seed: cfg.random_buffer_seed(),
        },
        entries,
    };
    crate::rehearsal::write_buffer_manifest(&paths.buffer(), &buffer)?;
    Ok(buffer)
}

/// Stage-3 continual pretraining from the stage-1 checkpoint plus the
/// buffer manifest (the trainer reads only those and the first-domain
/// dataset directory).
pub fn run_continual(cfg: &RunConfig, data_dir: &Path, run_dir: &Path) -> Result<StageResult> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir);
    paths.echo_config(cfg)?;
    let m1 = checkpoint::load_required(&paths.m1(), "pretrain")?;
    m1.ensure_config(&cfg.model)?;
    let buffer = read_buffer_manifest(&paths.buffer())?;
    let data = load_data(data_dir)?;
    let (first, second) = data.ordered(cfg.domain_order);
    let buffer_data = first.subset_by_sample_ids(&buffer.sample_ids())?;
    let result = continual_train_stage3(
        &m1.params,
        second,
        &buffer_data,
        &cfg.stage3_train(),
        Some(run_dir),
    )?;
    checkpoint::save(
        &paths.m2(),
        &Checkpoint::new(Stage::Stage3, result.params.clone()),
    )?;
    write_loss_csv(&paths.stage3_loss(), &result.history)?;
    Ok(result)
}

/// Which checkpoint seeds the fine-tune encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FinetuneSource {
    /// Continually pretrained model (m2.ckpt).
    #[default]
    Stage3,
    /// First-stage model (m1.ckpt).
    Stage1,
    /// Fresh random initialization (the no-pretrain baseline).
    None,
}

impl std::str::FromStr for FinetuneSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m2" | "stage3" => Ok(FinetuneSource::Stage3),
            "m1" | "stage1" => Ok(FinetuneSource::Stage1),
            "none" => Ok(FinetuneSource::None),
            other => Err(Error::invalid(format!(
                "unknown fine-tune source {other:?} (expected m2, m1, or none)"
            ))),
        }
    }
}

pub fn run_finetune(
    cfg: &RunConfig,
    data_dir: &Path,
    run_dir: &Path,
    source: FinetuneSource,
) -> Result<Classifier> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir);
    paths.echo_config(cfg)?;
    let encoder_init = match source {
        FinetuneSource::Stage3 => {
            let ckpt = checkpoint::load_required(&paths.m2(), "continual")?;
            ckpt.ensure_config(&cfg.model)?;
            ckpt.params
        }
        FinetuneSource::Stage1 => {
            let ckpt = checkpoint::load_required(&paths.m1(), "pretrain")?;
            ckpt.ensure_config(&cfg.model)?;
            ckpt.params
        }
        FinetuneSource::None => ModelParams::init(
            cfg.model,
            crate::rng::mix_seed(cfg.seed, crate::rng::stream::PARAM_INIT, 0),
        )?,
    };
    let data = load_data(data_dir)?;
    let (classifier, history, curve) = finetune(
        &encoder_init,
        &data.labeled_train,
        &cfg.finetune_train(),
        FinetuneOptions {
            freeze_encoder: cfg.freeze_encoder,
        },
        Some(&data.labeled_test),
    )?;
    let ckpt = Checkpoint {
        stage: Stage::Finetuned,
        params: classifier.params.clone(),
        head: Some(classifier.head.clone()),
    };
    checkpoint::save(&paths.classifier(), &ckpt)?;
    write_loss_csv(&paths.finetune_loss(), &history)?;
    write_curve_csv(&paths.curve(), &curve)?;
    Ok(classifier)
}

pub fn run_evaluate(cfg: &RunConfig, data_dir: &Path, run_dir: &Path) -> Result<crate::metrics::MetricsReport> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir);
    let ckpt = checkpoint::load_required(&paths.classifier(), "finetune")?;
    ckpt.ensure_config(&cfg.model)?;
    let head = ckpt
        .head
        .ok_or_else(|| Error::CheckpointMismatch("classifier checkpoint has no head".into()))?;
    let classifier = Classifier {
        params: ckpt.params,
        head,
        pooling: Pooling::Mean,
    };
    let data = load_data(data_dir)?;
    let mut report = evaluate(&classifier, &data.labeled_test, cfg.finetune.batch_size)?;
    if paths.curve().is_file() {
        report.curve = read_curve_csv(&paths.curve())?;
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::parse(paths.metrics(), e.to_string()))?;
    fs::write(paths.metrics(), json).map_err(|e| Error::io(paths.metrics(), e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> RunConfig {
        let mut cfg = RunConfig::tiny();
        cfg.data.count_d1 = 24;
        cfg.data.count_d2 = 24;
        cfg.data.count_labeled_train = 16;
        cfg.data.count_labeled_test = 16;
        cfg.rehearsal.alpha = 0.2; // K = 4 with 24 first-domain images
        cfg.rehearsal.beta = 0.25;
        cfg.stage1.epochs = 2;
        cfg.stage1.warmup_epochs = 1;
        cfg.stage3.epochs = 2;
        cfg.stage3.warmup_epochs = 1;
        cfg.finetune.epochs = 2;
        cfg.finetune.warmup_epochs = 1;
        cfg
    }

    #[test]
    fn full_pipeline_writes_expected_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let run_dir = tmp.path().join("run");
        let cfg = toy_cfg();
        generate_data(&cfg, &data_dir, false).unwrap();
        run_pretrain(&cfg, &data_dir, &run_dir).unwrap();
        run_build_buffer(&cfg, &data_dir, &run_dir).unwrap();
        run_continual(&cfg, &data_dir, &run_dir).unwrap();
        run_finetune(&cfg, &data_dir, &run_dir, FinetuneSource::Stage3).unwrap();
        let report = run_evaluate(&cfg, &data_dir, &run_dir).unwrap();
        assert!((0.0..=1.0).contains(&report.acc));

        let paths = RunPaths::new(&run_dir);
        for file in [
            paths.config(),
            paths.m1(),
            paths.m2(),
            paths.classifier(),
            paths.buffer(),
            paths.stage1_loss(),
            paths.stage3_loss(),
            paths.finetune_loss(),
            paths.curve(),
            paths.metrics(),
        ] {
            assert!(file.is_file(), "missing artifact {file:?}");
        }
    }

    #[test]
    fn steps_fail_without_upstream_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let run_dir = tmp.path().join("run");
        let cfg = toy_cfg();
        generate_data(&cfg, &data_dir, false).unwrap();
        let err = run_continual(&cfg, &data_dir, &run_dir).unwrap_err();
        assert!(err.to_string().contains("pretrain"), "{err}");
        let err = run_evaluate(&cfg, &data_dir, &run_dir).unwrap_err();
        assert!(err.to_string().contains("finetune"), "{err}");
    }

    #[test]
    fn gen_data_refuses_overwrite_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let cfg = toy_cfg();
        generate_data(&cfg, &data_dir, false).unwrap();
        assert!(generate_data(&cfg, &data_dir, false).is_err());
        generate_data(&cfg, &data_dir, true).unwrap();
    }

    #[test]
    fn gen_data_missing_parent_is_explicit() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = toy_cfg();
        let err =
            generate_data(&cfg, &tmp.path().join("no/such/parent"), false).unwrap_err();
        assert!(err.to_string().contains("parent"), "{err}");
    }

    #[test]
    fn regenerated_manifests_are_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let cfg = toy_cfg();
        generate_data(&cfg, &a, false).unwrap();
        generate_data(&cfg, &b, false).unwrap();
        for sub in ["d1", "d2", "labeled_train", "labeled_test"] {
            let ma = fs::read_to_string(a.join(sub).join("manifest.jsonl")).unwrap();
            let mb = fs::read_to_string(b.join(sub).join("manifest.jsonl")).unwrap();
            assert_eq!(ma, mb, "manifest {sub} differs");
        }
    }

    #[test]
    fn loss_and_curve_csv_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("loss.csv");
        let history = vec![
            LossRecord {
                step: 0,
                loss_mse: Some(0.5),
                loss_fd: None,
                lr: 0.0,
            },
            LossRecord {
                step: 1,
                loss_mse: None,
                loss_fd: Some(0.25),
                lr: 1e-4,
            },
        ];
        write_loss_csv(&path, &history).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss_mse,loss_fd,lr"));
        assert!(text.contains("0,0.5,,0"));
        assert!(text.contains("1,,0.25,0.0001"));

        let curve_path = tmp.path().join("curve.csv");
        let curve = vec![
            crate::metrics::EpochAcc { epoch: 0, acc: 0.5 },
            crate::metrics::EpochAcc { epoch: 1, acc: 0.75 },
        ];
        write_curve_csv(&curve_path, &curve).unwrap();
        assert_eq!(read_curve_csv(&curve_path).unwrap(), curve);
    }
}
