//! Run configuration: one flat, human-editable key-value file drives the
//! whole pipeline.
//!
//! The format is `section.key = value`, one per line, `#` comments allowed.
//! Every field is always written, so a run directory's `config.kv` echo is
//! a complete, diff-able reproduction recipe. Values that vary per
//! experiment cell (training seed, γ ratios, domain order) are plain fields
//! here; dataset generation seeds are separate from the training seed so
//! method comparisons share identical data.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{generate_domain_dataset, Dataset, DomainSpec, LabelRule};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling};
use crate::optim::AdamWConfig;
use crate::rng;
use crate::train::{OptimizerKind, Schedule, TrainConfig};

/// Which domain is pretrained first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DomainOrder {
    #[default]
    D1ThenD2,
    D2ThenD1,
}

impl fmt::Display for DomainOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainOrder::D1ThenD2 => write!(f, "d1_then_d2"),
            DomainOrder::D2ThenD1 => write!(f, "d2_then_d1"),
        }
    }
}

impl FromStr for DomainOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d1_then_d2" => Ok(DomainOrder::D1ThenD2),
            "d2_then_d1" => Ok(DomainOrder::D2ThenD1),
            other => Err(Error::invalid(format!("unknown domain order {other:?}"))),
        }
    }
}

/// Synthetic dataset sizes, seeds, and the three domain windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub count_d1: usize,
    pub count_d2: usize,
    pub count_labeled_train: usize,
    pub count_labeled_test: usize,
    /// Dataset generation seed, independent of the training seed.
    pub seed: u64,
    pub first: DomainSpec,
    pub second: DomainSpec,
    pub labeled: DomainSpec,
}

/// Per-stage training hyperparameters. Seeds are derived from the run seed
/// and a stage tag when the stage runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl StageParams {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            schedule: Schedule::WarmupCosine,
            seed,
            optimizer: OptimizerKind::Adamw,
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
                weight_decay: self.weight_decay,
            },
            mask_ratio: self.mask_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RehearsalConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: [f64; 3],
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    /// Training seed: parameter init, masking, batch order, mixup, k-means.
    pub seed: u64,
    pub domain_order: DomainOrder,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: StageParams,
    pub stage3: StageParams,
    pub finetune: StageParams,
    pub freeze_encoder: bool,
    pub rehearsal: RehearsalConfig,
}

// Stage tags for seed derivation.
const TAG_STAGE1: u64 = 0xA1;
const TAG_STAGE3: u64 = 0xA3;
const TAG_FINETUNE: u64 = 0xF1;
const TAG_KMEANS: u64 = 0xB2;
const TAG_RANDOM_BUFFER: u64 = 0xB3;
const TAG_DATA_D1: u64 = 0xD1;
const TAG_DATA_D2: u64 = 0xD2;
const TAG_DATA_TRAIN: u64 = 0xD3;
const TAG_DATA_TEST: u64 = 0xD4;

impl RunConfig {
    /// Laptop-scale preset: minutes for the full pipeline.
    pub fn tiny() -> Self {
        RunConfig {
            seed: 1,
            domain_order: DomainOrder::D1ThenD2,
            data: DataConfig {
                image_h: 32,
                image_w: 32,
                count_d1: 96,
                count_d2: 96,
                count_labeled_train: 64,
                count_labeled_test: 160,
                seed: 40,
                first: DomainSpec::default_first(),
                second: DomainSpec::default_second(),
                labeled: DomainSpec::default_labeled(),
            },
            model: ModelConfig::tiny(),
            stage1: StageParams {
                epochs: 30,
                batch_size: 16,
                base_lr: 2e-3,
                warmup_epochs: 3,
                mask_ratio: 0.75,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.05,
            },
            stage3: StageParams {
                epochs: 20,
                batch_size: 16,
                base_lr: 1e-3,
                warmup_epochs: 2,
                mask_ratio: 0.75,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.05,
            },
            finetune: StageParams {
                epochs: 15,
                batch_size: 16,
                base_lr: 1e-3,
                warmup_epochs: 2,
                mask_ratio: 0.75,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 0.01,
            },
            freeze_encoder: false,
            rehearsal: RehearsalConfig {
                alpha: 0.08,
                beta: 0.25,
                gamma: [6.0, 3.0, 1.0],
                pooling: Pooling::Mean,
            },
        }
    }

    /// Full-scale preset: ViT-B on 512x512 inputs, 300-epoch stages,
    /// warmup 40 to peak 1.5e-4, mask ratio 0.75, alpha 0.01, beta 0.05,
    /// gamma 6:3:1, 80-epoch fine-tune at 5e-5. A configuration target, not
    /// something the test suite runs.
    pub fn paper() -> Self {
        RunConfig {
            seed: 1,
            domain_order: DomainOrder::D1ThenD2,
            data: DataConfig {
                image_h: 512,
                image_w: 512,
                count_d1: 31256,
                count_d2: 26403,
                count_labeled_train: 1986,
                count_labeled_test: 495,
                seed: 40,
                first: DomainSpec::default_first(),
                second: DomainSpec::default_second(),
                labeled: DomainSpec::default_labeled(),
            },
            model: ModelConfig::vit_b(),
            stage1: StageParams {
                epochs: 300,
                batch_size: 64,
                base_lr: 1.5e-4,
                warmup_epochs: 40,
                mask_ratio: 0.75,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.05,
            },
            stage3: StageParams {
                epochs: 300,
                batch_size: 64,
                base_lr: 1.5e-4,
                warmup_epochs: 40,
                mask_ratio: 0.75,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.05,
            },
            finetune: StageParams {
                epochs: 80,
                batch_size: 64,
                base_lr: 5e-5,
                warmup_epochs: 5,
                mask_ratio: 0.75,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 0.05,
            },
            freeze_encoder: false,
            rehearsal: RehearsalConfig {
                alpha: 0.01,
                beta: 0.05,
                gamma: [6.0, 3.0, 1.0],
                pooling: Pooling::Mean,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(RunConfig::tiny()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (expected tiny or paper)"
            ))),
        }
    }

    pub fn stage1_train(&self) -> TrainConfig {
        self.stage1
            .to_train_config(rng::mix_seed(self.seed, TAG_STAGE1, 0))
    }

    pub fn stage3_train(&self) -> TrainConfig {
        self.stage3
            .to_train_config(rng::mix_seed(self.seed, TAG_STAGE3, 0))
    }

    pub fn finetune_train(&self) -> TrainConfig {
        self.finetune
            .to_train_config(rng::mix_seed(self.seed, TAG_FINETUNE, 0))
    }

    pub fn kmeans_seed(&self) -> u64 {
        rng::mix_seed(self.seed, TAG_KMEANS, 0)
    }

    pub fn random_buffer_seed(&self) -> u64 {
        rng::mix_seed(self.seed, TAG_RANDOM_BUFFER, 0)
    }

    fn image_size(&self) -> (usize, usize) {
        (self.data.image_h, self.data.image_w)
    }

    pub fn gen_d1(&self) -> Result<Dataset> {
        generate_domain_dataset(
            &self.data.first,
            self.data.count_d1,
            self.image_size(),
            rng::mix_seed(self.data.seed, TAG_DATA_D1, 0),
            1,
        )
    }

    pub fn gen_d2(&self) -> Result<Dataset> {
        generate_domain_dataset(
            &self.data.second,
            self.data.count_d2,
            self.image_size(),
            rng::mix_seed(self.data.seed, TAG_DATA_D2, 0),
            2,
        )
    }

    pub fn gen_labeled_train(&self) -> Result<Dataset> {
        generate_domain_dataset(
            &self.data.labeled,
            self.data.count_labeled_train,
            self.image_size(),
            rng::mix_seed(self.data.seed, TAG_DATA_TRAIN, 0),
            3,
        )
    }

    pub fn gen_labeled_test(&self) -> Result<Dataset> {
        generate_domain_dataset(
            &self.data.labeled,
            self.data.count_labeled_test,
            self.image_size(),
            rng::mix_seed(self.data.seed, TAG_DATA_TEST, 0),
            4,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.image_h != self.data.image_h || self.model.image_w != self.data.image_w {
            return Err(Error::invalid(format!(
                "model input {}x{} does not match data {}x{}",
                self.model.image_h, self.model.image_w, self.data.image_h, self.data.image_w
            )));
        }
        self.data.first.validate()?;
        self.data.second.validate()?;
        self.data.labeled.validate()?;
        Ok(())
    }

    // -- flat key-value round trip ------------------------------------------

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("domain_order", self.domain_order.to_string());

        push("data.image_h", self.data.image_h.to_string());
        push("data.image_w", self.data.image_w.to_string());
        push("data.count_d1", self.data.count_d1.to_string());
        push("data.count_d2", self.data.count_d2.to_string());
        push(
            "data.count_labeled_train",
            self.data.count_labeled_train.to_string(),
        );
        push(
            "data.count_labeled_test",
            self.data.count_labeled_test.to_string(),
        );
        push("data.seed", self.data.seed.to_string());
        for (name, spec) in [
            ("first", &self.data.first),
            ("second", &self.data.second),
            ("labeled", &self.data.labeled),
        ] {
            push(
                &format!("data.{name}.window_center"),
                format!("{}", spec.window_center),
            );
            push(
                &format!("data.{name}.window_width"),
                format!("{}", spec.window_width),
            );
            push(
                &format!("data.{name}.texture_scale"),
                format!("{}", spec.texture_seed_scale),
            );
            push(
                &format!("data.{name}.label_rule"),
                match spec.label_rule {
                    LabelRule::None => "none".into(),
                    LabelRule::BlobCountParity => "blob_count_parity".into(),
                },
            );
        }

        push("model.patch", self.model.patch.to_string());
        push("model.channels", self.model.channels.to_string());
        push("model.d_enc", self.model.d_enc.to_string());
        push("model.enc_layers", self.model.enc_layers.to_string());
        push("model.enc_heads", self.model.enc_heads.to_string());
        push("model.d_dec", self.model.d_dec.to_string());
        push("model.dec_layers", self.model.dec_layers.to_string());
        push("model.dec_heads", self.model.dec_heads.to_string());
        push("model.mlp_ratio", self.model.mlp_ratio.to_string());

        for (name, stage) in [
            ("stage1", &self.stage1),
            ("stage3", &self.stage3),
            ("finetune", &self.finetune),
        ] {
            push(&format!("{name}.epochs"), stage.epochs.to_string());
            push(&format!("{name}.batch_size"), stage.batch_size.to_string());
            push(&format!("{name}.base_lr"), format!("{}", stage.base_lr));
            push(
                &format!("{name}.warmup_epochs"),
                stage.warmup_epochs.to_string(),
            );
            push(
                &format!("{name}.mask_ratio"),
                format!("{}", stage.mask_ratio),
            );
            push(&format!("{name}.beta1"), format!("{}", stage.beta1));
            push(&format!("{name}.beta2"), format!("{}", stage.beta2));
            push(
                &format!("{name}.weight_decay"),
                format!("{}", stage.weight_decay),
            );
        }
        push("finetune.freeze_encoder", self.freeze_encoder.to_string());

        push("rehearsal.alpha", format!("{}", self.rehearsal.alpha));
        push("rehearsal.beta", format!("{}", self.rehearsal.beta));
        push("rehearsal.gamma", format_gamma(&self.rehearsal.gamma));
        push(
            "rehearsal.pooling",
            match self.rehearsal.pooling {
                Pooling::Mean => "mean".into(),
                Pooling::First => "first".into(),
                Pooling::Max => "max".into(),
            },
        );
        out
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let invalid = |what: &str| Error::invalid(format!("bad value for {what}: {value:?}"));
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| invalid(key))?
            };
        }

        // Domain sub-keys.
        if let Some(rest) = key.strip_prefix("data.") {
            for (name, spec) in [
                ("first", &mut self.data.first),
                ("second", &mut self.data.second),
                ("labeled", &mut self.data.labeled),
            ] {
                if let Some(field) = rest.strip_prefix(&format!("{name}.")) {
                    match field {
                        "window_center" => spec.window_center = parse!(f64),
                        "window_width" => spec.window_width = parse!(f64),
                        "texture_scale" => spec.texture_seed_scale = parse!(f64),
                        "label_rule" => {
                            spec.label_rule = match value {
                                "none" => LabelRule::None,
                                "blob_count_parity" => LabelRule::BlobCountParity,
                                _ => return Err(invalid(key)),
                            }
                        }
                        _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
                    }
                    return Ok(());
                }
            }
        }
        // Stage sub-keys.
        for (name, stage) in [
            ("stage1", &mut self.stage1),
            ("stage3", &mut self.stage3),
            ("finetune", &mut self.finetune),
        ] {
            if let Some(field) = key.strip_prefix(&format!("{name}.")) {
                match field {
                    "epochs" => stage.epochs = parse!(usize),
                    "batch_size" => stage.batch_size = parse!(usize),
                    "base_lr" => stage.base_lr = parse!(f64),
                    "warmup_epochs" => stage.warmup_epochs = parse!(usize),
                    "mask_ratio" => stage.mask_ratio = parse!(f64),
                    "beta1" => stage.beta1 = parse!(f64),
                    "beta2" => stage.beta2 = parse!(f64),
                    "weight_decay" => stage.weight_decay = parse!(f64),
                    "freeze_encoder" if name == "finetune" => {
                        self.freeze_encoder = parse!(bool)
                    }
                    _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
                }
                return Ok(());
            }
        }
        match key {
            "seed" => self.seed = parse!(u64),
            "domain_order" => self.domain_order = value.parse()?,
            "data.image_h" => {
                self.data.image_h = parse!(usize);
                self.model.image_h = self.data.image_h;
            }
            "data.image_w" => {
                self.data.image_w = parse!(usize);
                self.model.image_w = self.data.image_w;
            }
            "data.count_d1" => self.data.count_d1 = parse!(usize),
            "data.count_d2" => self.data.count_d2 = parse!(usize),
            "data.count_labeled_train" => self.data.count_labeled_train = parse!(usize),
            "data.count_labeled_test" => self.data.count_labeled_test = parse!(usize),
            "data.seed" => self.data.seed = parse!(u64),
            "model.patch" => self.model.patch = parse!(usize),
            "model.channels" => self.model.channels = parse!(usize),
            "model.d_enc" => self.model.d_enc = parse!(usize),
            "model.enc_layers" => self.model.enc_layers = parse!(usize),
            "model.enc_heads" => self.model.enc_heads = parse!(usize),
            "model.d_dec" => self.model.d_dec = parse!(usize),
            "model.dec_layers" => self.model.dec_layers = parse!(usize),
            "model.dec_heads" => self.model.dec_heads = parse!(usize),
            "model.mlp_ratio" => self.model.mlp_ratio = parse!(usize),
            "rehearsal.alpha" => self.rehearsal.alpha = parse!(f64),
            "rehearsal.beta" => self.rehearsal.beta = parse!(f64),
            "rehearsal.gamma" => self.rehearsal.gamma = parse_gamma(value)?,
            "rehearsal.pooling" => {
                self.rehearsal.pooling = match value {
                    "mean" => Pooling::Mean,
                    "first" => Pooling::First,
                    "max" => Pooling::Max,
                    _ => return Err(invalid(key)),
                }
            }
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a whole key-value document on top of the tiny defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::tiny();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

pub fn format_gamma(gamma: &[f64; 3]) -> String {
    let fmt = |v: f64| {
        if v.fract() == 0.0 {
            format!("{}", v as i64)
        } else {
            format!("{v}")
        }
    };
    format!("{}:{}:{}", fmt(gamma[0]), fmt(gamma[1]), fmt(gamma[2]))
}

pub fn parse_gamma(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!(
            "gamma must be g1:g2:g3, got {text:?}"
        )));
    }
    let mut gamma = [0.0; 3];
    for (g, p) in gamma.iter_mut().zip(parts.iter()) {
        *g = p
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad gamma component {p:?}")))?;
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_is_identity() {
        let mut cfg = RunConfig::tiny();
        cfg.seed = 99;
        cfg.domain_order = DomainOrder::D2ThenD1;
        cfg.rehearsal.gamma = [5.0, 3.0, 2.0];
        cfg.stage1.base_lr = 7.5e-4;
        let text = cfg.to_kv_string();
        let parsed = RunConfig::from_kv_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        // Echo of the echo is byte-identical.
        assert_eq!(parsed.to_kv_string(), text);
    }

    #[test]
    fn paper_preset_carries_reference_values() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.stage1.mask_ratio, 0.75);
        assert_eq!(cfg.stage1.warmup_epochs, 40);
        assert_eq!(cfg.stage1.base_lr, 1.5e-4);
        assert_eq!(cfg.stage1.epochs, 300);
        assert_eq!(cfg.rehearsal.alpha, 0.01);
        assert_eq!(cfg.rehearsal.beta, 0.05);
        assert_eq!(cfg.rehearsal.gamma, [6.0, 3.0, 1.0]);
        assert_eq!(cfg.finetune.base_lr, 5e-5);
        assert_eq!(cfg.finetune.epochs, 80);
        assert_eq!(cfg.data.count_d1, 31256);
        assert_eq!(cfg.data.count_d2, 26403);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::tiny();
        assert!(cfg.set("stage1.learning_rate", "0.1").is_err());
        assert!(cfg.set("nonsense", "1").is_err());
    }

    #[test]
    fn gamma_parsing() {
        assert_eq!(parse_gamma("6:3:1").unwrap(), [6.0, 3.0, 1.0]);
        assert_eq!(parse_gamma("0.5:0.3:0.2").unwrap(), [0.5, 0.3, 0.2]);
        assert!(parse_gamma("6:3").is_err());
        assert!(parse_gamma("a:b:c").is_err());
        assert_eq!(format_gamma(&[6.0, 3.0, 1.0]), "6:3:1");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_kv_str("# comment\n\nseed = 5\n").unwrap();
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn stage_seeds_differ_between_stages() {
        let cfg = RunConfig::tiny();
        let s1 = cfg.stage1_train().seed;
        let s3 = cfg.stage3_train().seed;
        let ft = cfg.finetune_train().seed;
        assert_ne!(s1, s3);
        assert_ne!(s1, ft);
    }

    #[test]
    fn datasets_are_shared_across_training_seeds() {
        let mut a = RunConfig::tiny();
        let mut b = RunConfig::tiny();
        a.seed = 1;
        b.seed = 2;
        a.data.count_d1 = 4;
        b.data.count_d1 = 4;
        let da = a.gen_d1().unwrap();
        let db = b.gen_d1().unwrap();
        assert_eq!(da.images, db.images);
    }
}
