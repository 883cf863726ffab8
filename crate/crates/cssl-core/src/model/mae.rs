//! Forward and backward passes of the masked autoencoder.
//!
//! The flow for one training step is: patchify → gather visible patches →
//! tokenize (patch projection + positions) → pre-norm encoder stack →
//! decoder (re-embed, interleave mask tokens at original positions, decode
//! stack) → output head on the masked rows → reconstruction loss. Each
//! forward returns the caches its backward needs; backward functions
//! accumulate into a flat gradient buffer matching the parameter layout.

use crate::data::{patchify, ImageBatch, MaskSpec};
use crate::error::{Error, Result};
use crate::model::ops::{self, AttnParams};
use crate::model::{ModelParams, Pooling};

/// A batch of token/feature sequences: `s` sequences of length `l`, width `d`.
#[derive(Debug, Clone)]
pub struct Tokens {
    pub data: Vec<f64>,
    pub s: usize,
    pub l: usize,
    pub d: usize,
}

impl Tokens {
    pub fn row(&self, seq: usize, pos: usize) -> &[f64] {
        let r = seq * self.l + pos;
        &self.data[r * self.d..(r + 1) * self.d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub struct TokenizeCache {
    /// Visible patches, `(s*l) × patch_dim`.
    visible_patches: Vec<f64>,
    /// Per-image visible patch indices (each of length `l`).
    visible: Vec<Vec<usize>>,
}

/// Project the visible patches of each image into token space and add the
/// positional embedding of each patch's original location.
pub fn tokenize(
    batch: &ImageBatch,
    masks: &[MaskSpec],
    params: &ModelParams,
) -> Result<(Tokens, TokenizeCache)> {
    let cfg = params.config();
    if batch.c != cfg.channels || batch.h != cfg.image_h || batch.w != cfg.image_w {
        return Err(Error::ShapeMismatch(format!(
            "batch {}x{}x{} does not match model input {}x{}x{}",
            batch.c, batch.h, batch.w, cfg.channels, cfg.image_h, cfg.image_w
        )));
    }
    if masks.len() != batch.s {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} images",
            masks.len(),
            batch.s
        )));
    }
    let n = cfg.num_patches();
    let m = masks.first().map_or(0, |mask| mask.m);
    for mask in masks {
        if mask.n != n {
            return Err(Error::ShapeMismatch(format!(
                "mask over {} patches, model has {n}",
                mask.n
            )));
        }
        if mask.m != m {
            return Err(Error::invalid("all masks in a batch must share one m"));
        }
    }
    let l = n - m;
    let pd = cfg.patch_dim();
    let mut visible_patches = vec![0.0; batch.s * l * pd];
    let mut visible = Vec::with_capacity(batch.s);
    for s in 0..batch.s {
        let grid = patchify(batch.image(s), batch.c, batch.h, batch.w, cfg.patch)?;
        let vis = masks[s].visible_indices();
        for (t, &p) in vis.iter().enumerate() {
            visible_patches[(s * l + t) * pd..(s * l + t + 1) * pd].copy_from_slice(grid.patch(p));
        }
        visible.push(vis);
    }
    let mut data = ops::linear_forward(
        &visible_patches,
        params.tensor("tok.proj.w"),
        params.tensor("tok.proj.b"),
        batch.s * l,
        pd,
        cfg.d_enc,
    );
    let pos = params.tensor("tok.pos");
    for s in 0..batch.s {
        for (t, &p) in visible[s].iter().enumerate() {
            let row = &mut data[(s * l + t) * cfg.d_enc..(s * l + t + 1) * cfg.d_enc];
            ops::add_into(row, &pos[p * cfg.d_enc..(p + 1) * cfg.d_enc]);
        }
    }
    Ok((
        Tokens {
            data,
            s: batch.s,
            l,
            d: cfg.d_enc,
        },
        TokenizeCache {
            visible_patches,
            visible,
        },
    ))
}

/// Accumulate tokenizer gradients from the gradient of the token sequence.
pub fn tokenize_backward(
    cache: &TokenizeCache,
    params: &ModelParams,
    d_tokens: &Tokens,
    grads: &mut [f64],
) {
    let cfg = params.config();
    let pd = cfg.patch_dim();
    let rows = d_tokens.s * d_tokens.l;
    let lin = ops::linear_backward(
        &cache.visible_patches,
        params.tensor("tok.proj.w"),
        &d_tokens.data,
        rows,
        pd,
        cfg.d_enc,
    );
    let layout = params.layout();
    ops::add_into(&mut grads[layout.range("tok.proj.w")], &lin.dw);
    ops::add_into(&mut grads[layout.range("tok.proj.b")], &lin.db);
    let pos_range = layout.range("tok.pos");
    let dpos = &mut grads[pos_range];
    for s in 0..d_tokens.s {
        for (t, &p) in cache.visible[s].iter().enumerate() {
            let row = d_tokens.row(s, t);
            ops::add_into(&mut dpos[p * cfg.d_enc..(p + 1) * cfg.d_enc], row);
        }
    }
}

struct BlockCache {
    ln1: ops::LayerNormCache,
    attn: ops::AttnCache,
    ln2: ops::LayerNormCache,
    ln2_out: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
}

struct BlockDims {
    batch: usize,
    seq: usize,
    d: usize,
    hidden: usize,
    heads: usize,
}

fn attn_params<'a>(params: &'a ModelParams, prefix: &str, heads: usize) -> AttnParams<'a> {
    AttnParams {
        wq: params.tensor(&format!("{prefix}.attn.wq")),
        bq: params.tensor(&format!("{prefix}.attn.bq")),
        wk: params.tensor(&format!("{prefix}.attn.wk")),
        bk: params.tensor(&format!("{prefix}.attn.bk")),
        wv: params.tensor(&format!("{prefix}.attn.wv")),
        bv: params.tensor(&format!("{prefix}.attn.bv")),
        wo: params.tensor(&format!("{prefix}.attn.wo")),
        bo: params.tensor(&format!("{prefix}.attn.bo")),
        heads,
    }
}

/// One pre-norm block: `x + Attn(LN1(x))` then `h + Mlp(LN2(h))`.
fn block_forward(
    x: &[f64],
    params: &ModelParams,
    prefix: &str,
    dims: &BlockDims,
) -> (Vec<f64>, BlockCache) {
    let rows = dims.batch * dims.seq;
    let (ln1_out, ln1) = ops::layer_norm_forward(
        x,
        params.tensor(&format!("{prefix}.ln1.g")),
        params.tensor(&format!("{prefix}.ln1.b")),
        rows,
        dims.d,
    );
    let (attn_out, attn) = ops::attention_forward(
        &ln1_out,
        &attn_params(params, prefix, dims.heads),
        dims.batch,
        dims.seq,
        dims.d,
    );
    let mut h = x.to_vec();
    ops::add_into(&mut h, &attn_out);
    let (ln2_out, ln2) = ops::layer_norm_forward(
        &h,
        params.tensor(&format!("{prefix}.ln2.g")),
        params.tensor(&format!("{prefix}.ln2.b")),
        rows,
        dims.d,
    );
    let mlp_pre = ops::linear_forward(
        &ln2_out,
        params.tensor(&format!("{prefix}.mlp.w1")),
        params.tensor(&format!("{prefix}.mlp.b1")),
        rows,
        dims.d,
        dims.hidden,
    );
    let mlp_act = ops::gelu_forward(&mlp_pre);
    let mlp_out = ops::linear_forward(
        &mlp_act,
        params.tensor(&format!("{prefix}.mlp.w2")),
        params.tensor(&format!("{prefix}.mlp.b2")),
        rows,
        dims.hidden,
        dims.d,
    );
    let mut y = h;
    ops::add_into(&mut y, &mlp_out);
    (
        y,
        BlockCache {
            ln1,
            attn,
            ln2,
            ln2_out,
            mlp_pre,
            mlp_act,
        },
    )
}

fn block_backward(
    cache: &BlockCache,
    params: &ModelParams,
    prefix: &str,
    dims: &BlockDims,
    dy: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let rows = dims.batch * dims.seq;
    let layout = params.layout();

    // MLP branch.
    let lin2 = ops::linear_backward(
        &cache.mlp_act,
        params.tensor(&format!("{prefix}.mlp.w2")),
        dy,
        rows,
        dims.hidden,
        dims.d,
    );
    let d_pre = ops::gelu_backward(&cache.mlp_pre, &lin2.dx);
    let lin1 = ops::linear_backward(
        &cache.ln2_out,
        params.tensor(&format!("{prefix}.mlp.w1")),
        &d_pre,
        rows,
        dims.d,
        dims.hidden,
    );
    let ln2 = ops::layer_norm_backward(
        &cache.ln2,
        params.tensor(&format!("{prefix}.ln2.g")),
        &lin1.dx,
        rows,
        dims.d,
    );
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.mlp.w2"))], &lin2.dw);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.mlp.b2"))], &lin2.db);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.mlp.w1"))], &lin1.dw);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.mlp.b1"))], &lin1.db);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.ln2.g"))], &ln2.dgamma);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.ln2.b"))], &ln2.dbeta);

    // Gradient w.r.t. h = x + attn_out: residual plus the MLP branch.
    let mut dh = dy.to_vec();
    ops::add_into(&mut dh, &ln2.dx);

    // Attention branch.
    let attn = ops::attention_backward(
        &cache.attn,
        &attn_params(params, prefix, dims.heads),
        &dh,
        dims.batch,
        dims.seq,
        dims.d,
    );
    let ln1 = ops::layer_norm_backward(
        &cache.ln1,
        params.tensor(&format!("{prefix}.ln1.g")),
        &attn.dx,
        rows,
        dims.d,
    );
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.wq"))], &attn.dwq);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.bq"))], &attn.dbq);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.wk"))], &attn.dwk);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.bk"))], &attn.dbk);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.wv"))], &attn.dwv);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.bv"))], &attn.dbv);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.wo"))], &attn.dwo);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.attn.bo"))], &attn.dbo);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.ln1.g"))], &ln1.dgamma);
    ops::add_into(&mut grads[layout.range(&format!("{prefix}.ln1.b"))], &ln1.dbeta);

    // Gradient w.r.t. x: residual plus the attention branch.
    let mut dx = dh;
    ops::add_into(&mut dx, &ln1.dx);
    dx
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    s: usize,
    l: usize,
}

/// Pre-norm transformer stack over the token sequences. A zero-layer
/// encoder is the identity.
pub fn encode(tokens: &Tokens, params: &ModelParams) -> Result<(Tokens, EncoderCache)> {
    if !tokens.all_finite() {
        return Err(Error::invalid("encoder input contains non-finite values"));
    }
    let cfg = params.config();
    if tokens.d != cfg.d_enc {
        return Err(Error::ShapeMismatch(format!(
            "token width {} vs encoder width {}",
            tokens.d, cfg.d_enc
        )));
    }
    let dims = BlockDims {
        batch: tokens.s,
        seq: tokens.l,
        d: cfg.d_enc,
        hidden: cfg.mlp_ratio * cfg.d_enc,
        heads: cfg.enc_heads,
    };
    let mut x = tokens.data.clone();
    let mut blocks = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        let (y, cache) = block_forward(&x, params, &format!("enc.{i}"), &dims);
        x = y;
        blocks.push(cache);
    }
    Ok((
        Tokens {
            data: x,
            s: tokens.s,
            l: tokens.l,
            d: cfg.d_enc,
        },
        EncoderCache {
            blocks,
            s: tokens.s,
            l: tokens.l,
        },
    ))
}

/// Backpropagate through the encoder stack; returns the gradient w.r.t. the
/// input tokens.
pub fn encode_backward(
    cache: &EncoderCache,
    params: &ModelParams,
    d_features: &Tokens,
    grads: &mut [f64],
) -> Tokens {
    let cfg = params.config();
    let dims = BlockDims {
        batch: cache.s,
        seq: cache.l,
        d: cfg.d_enc,
        hidden: cfg.mlp_ratio * cfg.d_enc,
        heads: cfg.enc_heads,
    };
    let mut dx = d_features.data.clone();
    for (i, block) in cache.blocks.iter().enumerate().rev() {
        dx = block_backward(block, params, &format!("enc.{i}"), &dims, &dx, grads);
    }
    Tokens {
        data: dx,
        s: cache.s,
        l: cache.l,
        d: cfg.d_enc,
    }
}

pub struct DecodeCache {
    /// Encoder features fed to the decoder embed projection.
    features: Vec<f64>,
    visible: Vec<Vec<usize>>,
    masked: Vec<Vec<usize>>,
    blocks: Vec<BlockCache>,
    /// Decoder output rows at masked positions, `(s*m) × d_dec`.
    head_in: Vec<f64>,
    s: usize,
    l: usize,
    m: usize,
}

/// Reconstruct the masked patches: embed the visible features into decoder
/// width, interleave the learned mask token at masked positions (plus
/// decoder positional embeddings everywhere), run the decoder stack, and
/// project the masked rows back to pixel space.
///
/// Returns `(s*m) × patch_dim` predictions for the masked patches only.
pub fn decode(
    features: &Tokens,
    masks: &[MaskSpec],
    params: &ModelParams,
) -> Result<(Vec<f64>, DecodeCache)> {
    let cfg = params.config();
    let n = cfg.num_patches();
    let m = masks.first().map_or(0, |mask| mask.m);
    if masks.len() != features.s {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} feature sequences",
            masks.len(),
            features.s
        )));
    }
    for mask in masks {
        if mask.n != n || mask.m != m {
            return Err(Error::invalid("masks inconsistent with model/batch"));
        }
    }
    if features.l != n - m || features.d != cfg.d_enc {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} inconsistent with n-m={} visible tokens of width {}",
            features.l,
            features.d,
            n - m,
            cfg.d_enc
        )));
    }
    let s = features.s;
    let l = features.l;
    let d_dec = cfg.d_dec;
    let embed = ops::linear_forward(
        &features.data,
        params.tensor("dec.embed.w"),
        params.tensor("dec.embed.b"),
        s * l,
        cfg.d_enc,
        d_dec,
    );
    let mask_token = params.tensor("dec.mask_token");
    let dec_pos = params.tensor("dec.pos");
    let mut z = vec![0.0; s * n * d_dec];
    let mut visible = Vec::with_capacity(s);
    let mut masked = Vec::with_capacity(s);
    for i in 0..s {
        let vis = masks[i].visible_indices();
        for (t, &p) in vis.iter().enumerate() {
            z[(i * n + p) * d_dec..(i * n + p + 1) * d_dec]
                .copy_from_slice(&embed[(i * l + t) * d_dec..(i * l + t + 1) * d_dec]);
        }
        for &p in &masks[i].masked_indices {
            z[(i * n + p) * d_dec..(i * n + p + 1) * d_dec].copy_from_slice(mask_token);
        }
        for p in 0..n {
            ops::add_into(
                &mut z[(i * n + p) * d_dec..(i * n + p + 1) * d_dec],
                &dec_pos[p * d_dec..(p + 1) * d_dec],
            );
        }
        visible.push(vis);
        masked.push(masks[i].masked_indices.clone());
    }
    let dims = BlockDims {
        batch: s,
        seq: n,
        d: d_dec,
        hidden: cfg.mlp_ratio * d_dec,
        heads: cfg.dec_heads,
    };
    let mut blocks = Vec::with_capacity(cfg.dec_layers);
    for i in 0..cfg.dec_layers {
        let (y, cache) = block_forward(&z, params, &format!("dec.{i}"), &dims);
        z = y;
        blocks.push(cache);
    }
    let mut head_in = vec![0.0; s * m * d_dec];
    for i in 0..s {
        for (t, &p) in masked[i].iter().enumerate() {
            head_in[(i * m + t) * d_dec..(i * m + t + 1) * d_dec]
                .copy_from_slice(&z[(i * n + p) * d_dec..(i * n + p + 1) * d_dec]);
        }
    }
    let y = ops::linear_forward(
        &head_in,
        params.tensor("dec.head.w"),
        params.tensor("dec.head.b"),
        s * m,
        d_dec,
        cfg.patch_dim(),
    );
    Ok((
        y,
        DecodeCache {
            features: features.data.clone(),
            visible,
            masked,
            blocks,
            head_in,
            s,
            l,
            m,
        },
    ))
}

/// Backpropagate the reconstruction gradient through the decoder; returns
/// the gradient w.r.t. the encoder features.
pub fn decode_backward(
    cache: &DecodeCache,
    params: &ModelParams,
    d_y: &[f64],
    grads: &mut [f64],
) -> Tokens {
    let cfg = params.config();
    let layout = params.layout();
    let n = cfg.num_patches();
    let (s, l, m) = (cache.s, cache.l, cache.m);
    let d_dec = cfg.d_dec;
    let pd = cfg.patch_dim();

    let head = ops::linear_backward(
        &cache.head_in,
        params.tensor("dec.head.w"),
        d_y,
        s * m,
        d_dec,
        pd,
    );
    ops::add_into(&mut grads[layout.range("dec.head.w")], &head.dw);
    ops::add_into(&mut grads[layout.range("dec.head.b")], &head.db);

    let mut dz = vec![0.0; s * n * d_dec];
    for i in 0..s {
        for (t, &p) in cache.masked[i].iter().enumerate() {
            dz[(i * n + p) * d_dec..(i * n + p + 1) * d_dec]
                .copy_from_slice(&head.dx[(i * m + t) * d_dec..(i * m + t + 1) * d_dec]);
        }
    }
    let dims = BlockDims {
        batch: s,
        seq: n,
        d: d_dec,
        hidden: cfg.mlp_ratio * d_dec,
        heads: cfg.dec_heads,
    };
    for (i, block) in cache.blocks.iter().enumerate().rev() {
        dz = block_backward(block, params, &format!("dec.{i}"), &dims, &dz, grads);
    }

    // Split dz into positional, mask-token, and visible-embedding parts.
    {
        let pos_range = layout.range("dec.pos");
        let dpos = &mut grads[pos_range];
        for i in 0..s {
            for p in 0..n {
                ops::add_into(
                    &mut dpos[p * d_dec..(p + 1) * d_dec],
                    &dz[(i * n + p) * d_dec..(i * n + p + 1) * d_dec],
                );
            }
        }
    }
    {
        let token_range = layout.range("dec.mask_token");
        let dtok = &mut grads[token_range];
        for i in 0..s {
            for &p in &cache.masked[i] {
                ops::add_into(dtok, &dz[(i * n + p) * d_dec..(i * n + p + 1) * d_dec]);
            }
        }
    }
    let mut d_embed = vec![0.0; s * l * d_dec];
    for i in 0..s {
        for (t, &p) in cache.visible[i].iter().enumerate() {
            d_embed[(i * l + t) * d_dec..(i * l + t + 1) * d_dec]
                .copy_from_slice(&dz[(i * n + p) * d_dec..(i * n + p + 1) * d_dec]);
        }
    }
    let embed = ops::linear_backward(
        &cache.features,
        params.tensor("dec.embed.w"),
        &d_embed,
        s * l,
        cfg.d_enc,
        d_dec,
    );
    ops::add_into(&mut grads[layout.range("dec.embed.w")], &embed.dw);
    ops::add_into(&mut grads[layout.range("dec.embed.b")], &embed.db);
    Tokens {
        data: embed.dx,
        s,
        l,
        d: cfg.d_enc,
    }
}

/// Reconstruction loss: squared error over the masked patches, normalized by
/// `m * patch_dim` and averaged over the batch. Defined as 0 when `m == 0`.
pub fn mse_loss(y_m: &[f64], x_m: &[f64], s: usize, m: usize, patch_dim: usize) -> f64 {
    debug_assert_eq!(y_m.len(), s * m * patch_dim);
    debug_assert_eq!(x_m.len(), y_m.len());
    if m == 0 || s == 0 {
        return 0.0;
    }
    let norm = (s * m * patch_dim) as f64;
    y_m.iter()
        .zip(x_m.iter())
        .map(|(&y, &x)| (y - x) * (y - x))
        .sum::<f64>()
        / norm
}

/// Gradient of [`mse_loss`] w.r.t. the predictions.
pub fn mse_loss_backward(y_m: &[f64], x_m: &[f64], s: usize, m: usize, patch_dim: usize) -> Vec<f64> {
    if m == 0 || s == 0 {
        return vec![0.0; y_m.len()];
    }
    let norm = (s * m * patch_dim) as f64;
    y_m.iter()
        .zip(x_m.iter())
        .map(|(&y, &x)| 2.0 * (y - x) / norm)
        .collect()
}

/// Gather the original masked patches `X_m` as the reconstruction target.
pub fn masked_patch_targets(batch: &ImageBatch, masks: &[MaskSpec], v: usize) -> Result<Vec<f64>> {
    let m = masks.first().map_or(0, |mask| mask.m);
    let pd = v * v * batch.c;
    let mut x_m = vec![0.0; batch.s * m * pd];
    for s in 0..batch.s {
        let grid = patchify(batch.image(s), batch.c, batch.h, batch.w, v)?;
        for (t, &p) in masks[s].masked_indices.iter().enumerate() {
            x_m[(s * m + t) * pd..(s * m + t + 1) * pd].copy_from_slice(grid.patch(p));
        }
    }
    Ok(x_m)
}

/// Forward-only reconstruction loss (no gradients).
pub fn mae_loss_only(
    params: &ModelParams,
    batch: &ImageBatch,
    masks: &[MaskSpec],
) -> Result<f64> {
    let m = masks.first().map_or(0, |mask| mask.m);
    if m == 0 {
        return Ok(0.0);
    }
    let cfg = params.config();
    let (tokens, _) = tokenize(batch, masks, params)?;
    let (features, _) = encode(&tokens, params)?;
    let (y_m, _) = decode(&features, masks, params)?;
    let x_m = masked_patch_targets(batch, masks, cfg.patch)?;
    Ok(mse_loss(&y_m, &x_m, batch.s, m, cfg.patch_dim()))
}

/// One full reconstruction pass: loss plus gradients for every parameter.
/// Returns `(0.0, None)` when nothing is masked (no gradient step defined).
pub fn mae_loss_and_grads(
    params: &ModelParams,
    batch: &ImageBatch,
    masks: &[MaskSpec],
) -> Result<(f64, Option<Vec<f64>>)> {
    let m = masks.first().map_or(0, |mask| mask.m);
    if m == 0 {
        return Ok((0.0, None));
    }
    let cfg = params.config();
    let (tokens, tok_cache) = tokenize(batch, masks, params)?;
    let (features, enc_cache) = encode(&tokens, params)?;
    let (y_m, dec_cache) = decode(&features, masks, params)?;
    let x_m = masked_patch_targets(batch, masks, cfg.patch)?;
    let pd = cfg.patch_dim();
    let loss = mse_loss(&y_m, &x_m, batch.s, m, pd);
    let d_y = mse_loss_backward(&y_m, &x_m, batch.s, m, pd);
    let mut grads = vec![0.0; params.len()];
    let d_features = decode_backward(&dec_cache, params, &d_y, &mut grads);
    let d_tokens = encode_backward(&enc_cache, params, &d_features, &mut grads);
    tokenize_backward(&tok_cache, params, &d_tokens, &mut grads);
    Ok((loss, Some(grads)))
}

/// Tokenize and encode a batch with nothing masked: the full `n`-token
/// feature sequence per image, with caches for backprop.
pub fn encode_full(
    params: &ModelParams,
    batch: &ImageBatch,
) -> Result<(Tokens, TokenizeCache, EncoderCache)> {
    let n = params.config().num_patches();
    let masks: Vec<MaskSpec> = (0..batch.s).map(|_| MaskSpec::none(n)).collect();
    let (tokens, tok_cache) = tokenize(batch, &masks, params)?;
    let (features, enc_cache) = encode(&tokens, params)?;
    Ok((features, tok_cache, enc_cache))
}

/// Backpropagate a feature-sequence gradient through encoder and tokenizer.
pub fn trunk_backward(
    tok_cache: &TokenizeCache,
    enc_cache: &EncoderCache,
    params: &ModelParams,
    d_features: &Tokens,
    grads: &mut [f64],
) {
    let d_tokens = encode_backward(enc_cache, params, d_features, grads);
    tokenize_backward(tok_cache, params, &d_tokens, grads);
}

/// Per-image embedding: encode the full unmasked image and pool the token
/// features into one vector per image.
pub fn embed_image(batch: &ImageBatch, params: &ModelParams, pooling: Pooling) -> Result<Vec<f64>> {
    let (features, _, _) = encode_full(params, batch)?;
    let d = features.d;
    let l = features.l;
    let mut out = vec![0.0; batch.s * d];
    for s in 0..batch.s {
        let dst = &mut out[s * d..(s + 1) * d];
        match pooling {
            Pooling::Mean => {
                for t in 0..l {
                    ops::add_into(dst, features.row(s, t));
                }
                for v in dst.iter_mut() {
                    *v /= l as f64;
                }
            }
            Pooling::First => dst.copy_from_slice(features.row(s, 0)),
            Pooling::Max => {
                dst.fill(f64::NEG_INFINITY);
                for t in 0..l {
                    for (o, &f) in dst.iter_mut().zip(features.row(s, t).iter()) {
                        *o = o.max(f);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain_dataset, sample_mask, DomainSpec};
    use crate::model::ModelConfig;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            patch: 2,
            channels: 1,
            image_h: 4,
            image_w: 4,
            d_enc: 4,
            enc_layers: 1,
            enc_heads: 2,
            d_dec: 4,
            dec_layers: 1,
            dec_heads: 2,
            mlp_ratio: 1,
        }
    }

    fn toy_batch(s: usize, seed: u64) -> ImageBatch {
        let d = generate_domain_dataset(&DomainSpec::default_first(), s, (8, 8), seed, 0).unwrap();
        // Crop to 4x4 by regenerating is overkill; instead build directly.
        let mut data = Vec::new();
        for img in &d.images {
            data.extend_from_slice(&img[0..16]);
        }
        ImageBatch {
            data,
            s,
            c: 1,
            h: 4,
            w: 4,
            domain_id: 0,
            sample_ids: (0..s as u64).collect(),
        }
    }

    #[test]
    fn tokenize_with_identity_projection_matches_patches() {
        let cfg = toy_config();
        let mut params = ModelParams::init(cfg, 0).unwrap();
        params.data.fill(0.0);
        // Identity projection: patch_dim == d_enc == 4.
        {
            let w = params.tensor_mut("tok.proj.w");
            for i in 0..4 {
                w[i * 4 + i] = 1.0;
            }
        }
        {
            let pos = params.tensor_mut("tok.pos");
            for (i, v) in pos.iter_mut().enumerate() {
                *v = 0.1 * (i / 4) as f64;
            }
        }
        let batch = toy_batch(1, 3);
        let masks = vec![MaskSpec::none(4)];
        let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
        assert_eq!(tokens.l, 4);
        let grid = patchify(batch.image(0), 1, 4, 4, 2).unwrap();
        for p in 0..4 {
            for j in 0..4 {
                let expected = grid.patch(p)[j] + 0.1 * p as f64;
                assert!((tokens.row(0, p)[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokenize_mask_all_gives_empty_sequence_encoder_accepts() {
        let cfg = toy_config();
        let params = ModelParams::init(cfg, 1).unwrap();
        let batch = toy_batch(2, 5);
        let masks = vec![sample_mask(4, 1.0, 0).unwrap(), sample_mask(4, 1.0, 1).unwrap()];
        let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
        assert_eq!(tokens.l, 0);
        let (features, _) = encode(&tokens, &params).unwrap();
        assert_eq!(features.l, 0);
        assert!(features.data.is_empty());
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let mut cfg = toy_config();
        cfg.enc_layers = 0;
        let params = ModelParams::init(cfg, 2).unwrap();
        let batch = toy_batch(2, 7);
        let masks = vec![MaskSpec::none(4), MaskSpec::none(4)];
        let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
        let (features, _) = encode(&tokens, &params).unwrap();
        assert_eq!(features.data, tokens.data);
    }

    #[test]
    fn encode_is_deterministic() {
        let params = ModelParams::init(ModelConfig::tiny(), 3).unwrap();
        let d = generate_domain_dataset(&DomainSpec::default_first(), 2, (32, 32), 1, 0).unwrap();
        let batch = d.batch(&[0, 1]);
        let masks = vec![sample_mask(16, 0.75, 0).unwrap(), sample_mask(16, 0.75, 1).unwrap()];
        let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
        let (f1, _) = encode(&tokens, &params).unwrap();
        let (f2, _) = encode(&tokens, &params).unwrap();
        let b1: Vec<u64> = f1.data.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = f2.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn encode_rejects_nan() {
        let params = ModelParams::init(toy_config(), 1).unwrap();
        let tokens = Tokens {
            data: vec![0.0, f64::NAN, 0.0, 0.0],
            s: 1,
            l: 1,
            d: 4,
        };
        assert!(encode(&tokens, &params).is_err());
    }

    #[test]
    fn encoder_outputs_finite_over_random_seeds() {
        for seed in 0..100 {
            let mut params = ModelParams::init(toy_config(), seed).unwrap();
            params.randomize(seed, 0.5);
            let batch = toy_batch(1, seed);
            let masks = vec![MaskSpec::none(4)];
            let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
            let (features, _) = encode(&tokens, &params).unwrap();
            assert!(features.all_finite(), "seed {seed}");
        }
    }

    #[test]
    fn decode_empty_mask_yields_empty_output() {
        let params = ModelParams::init(toy_config(), 4).unwrap();
        let batch = toy_batch(1, 9);
        let masks = vec![MaskSpec::none(4)];
        let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
        let (features, _) = encode(&tokens, &params).unwrap();
        let (y, _) = decode(&features, &masks, &params).unwrap();
        assert!(y.is_empty());
    }

    #[test]
    fn decode_output_shape_contract() {
        let params = ModelParams::init(ModelConfig::tiny(), 5).unwrap();
        let d = generate_domain_dataset(&DomainSpec::default_first(), 3, (32, 32), 2, 0).unwrap();
        let batch = d.batch(&[0, 1, 2]);
        for r in [0.25, 0.5, 0.75] {
            let masks: Vec<_> = (0..3).map(|i| sample_mask(16, r, i).unwrap()).collect();
            let m = masks[0].m;
            let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
            let (features, _) = encode(&tokens, &params).unwrap();
            let (y, _) = decode(&features, &masks, &params).unwrap();
            assert_eq!(y.len(), 3 * m * 64);
        }
    }

    #[test]
    fn decode_rejects_inconsistent_mask() {
        let params = ModelParams::init(toy_config(), 4).unwrap();
        let batch = toy_batch(1, 9);
        let masks = vec![sample_mask(4, 0.5, 0).unwrap()];
        let (tokens, _) = tokenize(&batch, &masks, &params).unwrap();
        let (features, _) = encode(&tokens, &params).unwrap();
        let other = vec![sample_mask(4, 0.75, 0).unwrap()];
        assert!(decode(&features, &other, &params).is_err());
    }

    #[test]
    fn mse_loss_values() {
        // Identical tensors.
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0], 1, 2, 1), 0.0);
        // Single element: (2-0)^2 / 1.
        assert_eq!(mse_loss(&[2.0], &[0.0], 1, 1, 1), 4.0);
        // Homogeneity: loss(3y, 3x) = 9 loss(y, x).
        let y = [0.5, -1.0, 2.0, 0.0];
        let x = [0.0, 1.0, 1.0, -0.5];
        let y3: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let base = mse_loss(&y, &x, 2, 2, 1);
        let scaled = mse_loss(&y3, &x3, 2, 2, 1);
        assert!((scaled - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn mse_loss_normalization_invariant_under_m() {
        // Same per-patch error at m=2 and m=4 gives the same loss.
        let y2 = vec![1.0; 2];
        let x2 = vec![0.0; 2];
        let y4 = vec![1.0; 4];
        let x4 = vec![0.0; 4];
        let a = mse_loss(&y2, &x2, 1, 2, 1);
        let b = mse_loss(&y4, &x4, 1, 4, 1);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn embed_zero_params_gives_zero_vectors() {
        let cfg = toy_config();
        let mut params = ModelParams::init(cfg, 0).unwrap();
        params.data.fill(0.0);
        let batch = toy_batch(2, 1);
        let emb = embed_image(&batch, &params, Pooling::Mean).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_mean_pool_matches_token_average() {
        let params = ModelParams::init(ModelConfig::tiny(), 8).unwrap();
        let d = generate_domain_dataset(&DomainSpec::default_first(), 2, (32, 32), 4, 0).unwrap();
        let batch = d.batch(&[0, 1]);
        let emb = embed_image(&batch, &params, Pooling::Mean).unwrap();
        let (features, _, _) = encode_full(&params, &batch).unwrap();
        for s in 0..2 {
            for j in 0..features.d {
                let mean: f64 =
                    (0..features.l).map(|t| features.row(s, t)[j]).sum::<f64>() / features.l as f64;
                assert!((emb[s * features.d + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mae_loss_zero_mask_skips_gradient() {
        let params = ModelParams::init(toy_config(), 4).unwrap();
        let batch = toy_batch(2, 2);
        let masks = vec![MaskSpec::none(4), MaskSpec::none(4)];
        let (loss, grads) = mae_loss_and_grads(&params, &batch, &masks).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_none());
    }

    #[test]
    fn mae_loss_finite_on_tiny_model() {
        let params = ModelParams::init(ModelConfig::tiny(), 6).unwrap();
        let d = generate_domain_dataset(&DomainSpec::default_first(), 4, (32, 32), 3, 0).unwrap();
        let batch = d.batch(&[0, 1, 2, 3]);
        let masks: Vec<_> = (0..4).map(|i| sample_mask(16, 0.75, i).unwrap()).collect();
        let (loss, grads) = mae_loss_and_grads(&params, &batch, &masks).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let grads = grads.unwrap();
        assert_eq!(grads.len(), params.len());
        assert!(grads.iter().all(|v| v.is_finite()));
        assert!(grads.iter().any(|&v| v != 0.0));
    }
}
