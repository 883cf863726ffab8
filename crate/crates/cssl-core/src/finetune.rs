//! Supervised fine-tuning of a pretrained encoder and evaluation.
//!
//! The classifier is the tokenizer + encoder with mean pooling over the
//! full token sequence and a single linear head to two logits, trained with
//! cross-entropy. Everything is trainable by default; `freeze_encoder`
//! restricts updates to the head.

use serde::{Deserialize, Serialize};

use crate::checkpoint::HeadParams;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, EpochAcc, MetricsReport};
use crate::model::mae::{self, Tokens};
use crate::model::ops;
use crate::model::{ModelParams, Pooling};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::schedule::lr_at;
use crate::train::{LossRecord, TrainConfig};

pub const NUM_CLASSES: usize = 2;

/// Encoder + linear head. The decoder rides along in `params` untouched;
/// only the tokenizer/encoder trunk participates.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ModelParams,
    pub head: HeadParams,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FinetuneOptions {
    /// Train only the head, leaving tokenizer and encoder frozen.
    pub freeze_encoder: bool,
}

impl Classifier {
    /// Class-1 probability and argmax prediction per image (ties -> 0).
    pub fn predict(&self, data: &Dataset, batch_size: usize) -> Result<(Vec<f64>, Vec<u8>)> {
        let mut scores = Vec::with_capacity(data.len());
        let mut preds = Vec::with_capacity(data.len());
        let positions: Vec<usize> = (0..data.len()).collect();
        for chunk in positions.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk);
            let (features, _, _) = mae::encode_full(&self.params, &batch)?;
            let (features, _) = normalize_tokens(&features);
            let pooled = mean_pool(&features);
            let logits = ops::linear_forward(
                &pooled,
                &self.head.w,
                &self.head.b,
                batch.s,
                features.d,
                NUM_CLASSES,
            );
            for s in 0..batch.s {
                let l0 = logits[s * NUM_CLASSES];
                let l1 = logits[s * NUM_CLASSES + 1];
                let max = l0.max(l1);
                let p1 = (l1 - max).exp() / ((l0 - max).exp() + (l1 - max).exp());
                scores.push(p1);
                preds.push(u8::from(l1 > l0));
            }
        }
        Ok((scores, preds))
    }
}

fn mean_pool(features: &Tokens) -> Vec<f64> {
    let mut pooled = vec![0.0; features.s * features.d];
    for s in 0..features.s {
        let dst = &mut pooled[s * features.d..(s + 1) * features.d];
        for t in 0..features.l {
            ops::add_into(dst, features.row(s, t));
        }
        for v in dst.iter_mut() {
            *v /= features.l as f64;
        }
    }
    pooled
}

/// Affine-free layer normalization of every token feature before pooling.
/// Encoder feature streams carry large shared offsets and scales (residual
/// paths accumulate whatever the pretraining objective found useful, e.g.
/// the background level); normalizing per token removes those nuisance
/// directions and keeps fine-tune gradient scale independent of the
/// encoder's output magnitude. This is the usual final-norm of a ViT
/// classifier, kept affine-free so a zero-layer encoder stays a pure
/// function of its input.
fn normalize_tokens(features: &Tokens) -> (Tokens, ops::LayerNormCache) {
    let rows = features.s * features.l;
    let unit = vec![1.0; features.d];
    let zero = vec![0.0; features.d];
    let (data, cache) = ops::layer_norm_forward(&features.data, &unit, &zero, rows, features.d);
    (
        Tokens {
            data,
            s: features.s,
            l: features.l,
            d: features.d,
        },
        cache,
    )
}

fn normalize_tokens_backward(
    cache: &ops::LayerNormCache,
    d_out: &Tokens,
) -> Tokens {
    let rows = d_out.s * d_out.l;
    let unit = vec![1.0; d_out.d];
    let dx = ops::layer_norm_backward(cache, &unit, &d_out.data, rows, d_out.d).dx;
    Tokens {
        data: dx,
        s: d_out.s,
        l: d_out.l,
        d: d_out.d,
    }
}

/// Softmax cross-entropy over two logits; returns (mean loss, dlogits).
fn cross_entropy(logits: &[f64], labels: &[u8], s: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    for i in 0..s {
        let l = &logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        let max = l[0].max(l[1]);
        let e0 = (l[0] - max).exp();
        let e1 = (l[1] - max).exp();
        let z = e0 + e1;
        let y = labels[i] as usize;
        let log_p = l[y] - max - z.ln();
        loss -= log_p;
        let p = [e0 / z, e1 / z];
        for c in 0..NUM_CLASSES {
            dlogits[i * NUM_CLASSES + c] = (p[c] - f64::from(c == y)) / s as f64;
        }
    }
    (loss / s as f64, dlogits)
}

/// Fine-tune the encoder with a fresh linear head. Logs per-epoch test
/// accuracy when an eval set is provided.
pub fn finetune(
    encoder_init: &ModelParams,
    train_data: &Dataset,
    cfg: &TrainConfig,
    options: FinetuneOptions,
    eval_data: Option<&Dataset>,
) -> Result<(Classifier, Vec<LossRecord>, Vec<EpochAcc>)> {
    cfg.validate()?;
    let labels = train_data.dense_labels()?;
    if labels.is_empty() {
        return Err(Error::invalid("fine-tune training set is empty"));
    }
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::invalid(
            "fine-tune training set must contain both classes",
        ));
    }

    let mut params = encoder_init.clone();
    let d_enc = params.config().d_enc;
    let mut head = HeadParams {
        w: {
            let mut rng = rng::rng_for(cfg.seed, rng::stream::HEAD_INIT, 0);
            (0..d_enc * NUM_CLASSES)
                .map(|_| 0.02 * rng::standard_normal(&mut rng))
                .collect()
        },
        b: vec![0.0; NUM_CLASSES],
        classes: NUM_CLASSES,
    };

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let head_adamw = AdamWConfig {
        beta2: 0.999,
        ..cfg.adamw
    };
    let mut opt_model = AdamW::new(params.len(), head_adamw);
    let mut opt_head = AdamW::new(head.w.len() + head.b.len(), head_adamw);
    let trunk = 0..params.layout().trunk_len();

    let mut history = Vec::with_capacity(total_steps);
    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::rng_for(cfg.seed, rng::stream::BATCH_ORDER, epoch as u64);
        let order = rng::permutation(&mut order_rng, train_data.len());
        for positions in order.chunks(cfg.batch_size) {
            let batch = train_data.batch(positions);
            let batch_labels: Vec<u8> = positions.iter().map(|&p| labels[p]).collect();
            let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr);

            let (raw_features, tok_cache, enc_cache) = mae::encode_full(&params, &batch)?;
            let (features, norm_cache) = normalize_tokens(&raw_features);
            let pooled = mean_pool(&features);
            let logits =
                ops::linear_forward(&pooled, &head.w, &head.b, batch.s, d_enc, NUM_CLASSES);
            let (loss, dlogits) = cross_entropy(&logits, &batch_labels, batch.s);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }

            let head_grads =
                ops::linear_backward(&pooled, &head.w, &dlogits, batch.s, d_enc, NUM_CLASSES);
            if !options.freeze_encoder {
                // Mean pooling spreads the pooled gradient evenly over tokens.
                let mut d_feat = vec![0.0; features.data.len()];
                for s in 0..features.s {
                    let src = &head_grads.dx[s * d_enc..(s + 1) * d_enc];
                    for t in 0..features.l {
                        let dst = &mut d_feat
                            [(s * features.l + t) * d_enc..(s * features.l + t + 1) * d_enc];
                        for (o, &g) in dst.iter_mut().zip(src.iter()) {
                            *o += g / features.l as f64;
                        }
                    }
                }
                let d_normed = Tokens {
                    data: d_feat,
                    s: features.s,
                    l: features.l,
                    d: features.d,
                };
                let d_features = normalize_tokens_backward(&norm_cache, &d_normed);
                let mut grads = vec![0.0; params.len()];
                mae::trunk_backward(&tok_cache, &enc_cache, &params, &d_features, &mut grads);
                opt_model.step_range(&mut params.data, &grads, lr, trunk.clone());
            }
            let mut head_flat: Vec<f64> = head.w.clone();
            head_flat.extend_from_slice(&head.b);
            let mut head_grad_flat = head_grads.dw.clone();
            head_grad_flat.extend_from_slice(&head_grads.db);
            opt_head.step(&mut head_flat, &head_grad_flat, lr);
            head.w.copy_from_slice(&head_flat[..d_enc * NUM_CLASSES]);
            head.b.copy_from_slice(&head_flat[d_enc * NUM_CLASSES..]);

            history.push(LossRecord {
                step,
                loss_mse: Some(loss),
                loss_fd: None,
                lr,
            });
            step += 1;
        }
        if let Some(eval) = eval_data {
            let classifier = Classifier {
                params: params.clone(),
                head: head.clone(),
                pooling: Pooling::Mean,
            };
            let report = evaluate(&classifier, eval, cfg.batch_size)?;
            curve.push(EpochAcc {
                epoch,
                acc: report.acc,
            });
        }
    }
    Ok((
        Classifier {
            params,
            head,
            pooling: Pooling::Mean,
        },
        history,
        curve,
    ))
}

/// ACC / AUC / F1 on a labeled test set.
pub fn evaluate(classifier: &Classifier, test_data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    if test_data.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let labels = test_data.dense_labels()?;
    let (scores, preds) = classifier.predict(test_data, batch_size)?;
    metrics::report_from_scores(&scores, &preds, &labels)
}
