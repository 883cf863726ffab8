//! Dense f64 building blocks with hand-written backward passes.
//!
//! Everything operates on row-major slices with explicit dimensions and
//! accumulates in a fixed sequential order, so results are bit-reproducible
//! for a given input regardless of surrounding parallelism.

/// y = x · w, with x: rows×inner, w: inner×cols.
pub fn matmul(x: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * cols);
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let yr = &mut y[r * cols..(r + 1) * cols];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * cols..(k + 1) * cols];
            for (yv, &wv) in yr.iter_mut().zip(wr.iter()) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// y = x · wᵀ, with x: rows×inner, w: cols×inner.
pub fn matmul_transposed(x: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), cols * inner);
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let yr = &mut y[r * cols..(r + 1) * cols];
        for (c, yv) in yr.iter_mut().enumerate() {
            let wr = &w[c * inner..(c + 1) * inner];
            let mut acc = 0.0;
            for (xv, wv) in xr.iter().zip(wr.iter()) {
                acc += xv * wv;
            }
            *yv = acc;
        }
    }
    y
}

/// acc += xᵀ · dy, with x: rows×inner, dy: rows×cols, acc: inner×cols.
pub fn accumulate_xt_dy(x: &[f64], dy: &[f64], rows: usize, inner: usize, cols: usize, acc: &mut [f64]) {
    debug_assert_eq!(acc.len(), inner * cols);
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let dyr = &dy[r * cols..(r + 1) * cols];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let ar = &mut acc[k * cols..(k + 1) * cols];
            for (av, &dv) in ar.iter_mut().zip(dyr.iter()) {
                *av += xv * dv;
            }
        }
    }
}

/// Linear layer y = x·w + b over `rows` rows.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, rows, din, dout);
    for r in 0..rows {
        for (yv, bv) in y[r * dout..(r + 1) * dout].iter_mut().zip(b.iter()) {
            *yv += bv;
        }
    }
    y
}

pub struct LinearGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
) -> LinearGrads {
    let dx = matmul_transposed(dy, w, rows, dout, din);
    let mut dw = vec![0.0; din * dout];
    accumulate_xt_dy(x, dy, rows, din, dout, &mut dw);
    let mut db = vec![0.0; dout];
    for r in 0..rows {
        for (bv, &dv) in db.iter_mut().zip(dy[r * dout..(r + 1) * dout].iter()) {
            *bv += dv;
        }
    }
    LinearGrads { dx, dw, db }
}

pub const LN_EPS: f64 = 1e-6;

pub struct LayerNormCache {
    /// Normalized input (x - mean) * rstd, per row.
    pub xhat: Vec<f64>,
    /// 1 / sqrt(var + eps), per row.
    pub rstd: Vec<f64>,
}

/// Per-row layer normalization with gain/offset.
pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    d: usize,
) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (xr[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub struct LayerNormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    rows: usize,
    d: usize,
) -> LayerNormGrads {
    let mut dx = vec![0.0; rows * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xh = 0.0;
        for i in 0..d {
            let dyg = dyr[i] * gamma[i];
            sum_dyg += dyg;
            sum_dyg_xh += dyg * xh[i];
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
        }
        let inv_d = 1.0 / d as f64;
        for i in 0..d {
            let dyg = dyr[i] * gamma[i];
            dx[r * d + i] = cache.rstd[r] * (dyg - inv_d * sum_dyg - xh[i] * inv_d * sum_dyg_xh);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_forward(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        })
        .collect()
}

pub fn gelu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy.iter())
        .map(|(&v, &d)| {
            let inner = GELU_C * (v + GELU_A * v * v * v);
            let t = inner.tanh();
            let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        })
        .collect()
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// dscores = p ⊙ (dp − ⟨p, dp⟩) per row, given post-softmax probabilities.
pub fn softmax_backward_rows(probs: &[f64], dprobs: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut ds = vec![0.0; rows * cols];
    for r in 0..rows {
        let p = &probs[r * cols..(r + 1) * cols];
        let dp = &dprobs[r * cols..(r + 1) * cols];
        let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for i in 0..cols {
            ds[r * cols + i] = p[i] * (dp[i] - dot);
        }
    }
    ds
}

/// Parameter slices for one multi-head self-attention layer.
pub struct AttnParams<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
    pub heads: usize,
}

pub struct AttnCache {
    /// Input rows (seq×d stacked over the batch), kept for projection grads.
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Post-softmax attention, `batch × heads × seq × seq`.
    pub probs: Vec<f64>,
    /// Concatenated per-head context before the output projection.
    pub ctx: Vec<f64>,
}

/// Batched multi-head self-attention over `batch` sequences of length `seq`
/// and width `d`. Rows of `x` are sequence-major within each batch element.
pub fn attention_forward(
    x: &[f64],
    p: &AttnParams,
    batch: usize,
    seq: usize,
    d: usize,
) -> (Vec<f64>, AttnCache) {
    let rows = batch * seq;
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_forward(x, p.wq, p.bq, rows, d, d);
    let k = linear_forward(x, p.wk, p.bk, rows, d, d);
    let v = linear_forward(x, p.wv, p.bv, rows, d, d);
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut ctx = vec![0.0; rows * d];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            // scores then softmax
            for i in 0..seq {
                let qrow = &q[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                for j in 0..seq {
                    let krow = &k[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    let mut s = 0.0;
                    for (a, c) in qrow.iter().zip(krow.iter()) {
                        s += a * c;
                    }
                    probs[pbase + i * seq + j] = s * scale;
                }
            }
            softmax_rows(&mut probs[pbase..pbase + seq * seq], seq, seq);
            for i in 0..seq {
                let crow =
                    &mut ctx[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                for j in 0..seq {
                    let w = probs[pbase + i * seq + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &v[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    for (cv, &vv) in crow.iter_mut().zip(vrow.iter()) {
                        *cv += w * vv;
                    }
                }
            }
        }
    }
    let y = linear_forward(&ctx, p.wo, p.bo, rows, d, d);
    (
        y,
        AttnCache {
            x: x.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

pub struct AttnGrads {
    pub dx: Vec<f64>,
    pub dwq: Vec<f64>,
    pub dbq: Vec<f64>,
    pub dwk: Vec<f64>,
    pub dbk: Vec<f64>,
    pub dwv: Vec<f64>,
    pub dbv: Vec<f64>,
    pub dwo: Vec<f64>,
    pub dbo: Vec<f64>,
}

pub fn attention_backward(
    cache: &AttnCache,
    p: &AttnParams,
    dy: &[f64],
    batch: usize,
    seq: usize,
    d: usize,
) -> AttnGrads {
    let rows = batch * seq;
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let out_grads = linear_backward(&cache.ctx, p.wo, dy, rows, d, d);
    let dctx = out_grads.dx;

    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            let probs = &cache.probs[pbase..pbase + seq * seq];
            // dprobs and dv
            let mut dprobs = vec![0.0; seq * seq];
            for i in 0..seq {
                let dcrow = &dctx[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                for j in 0..seq {
                    let vrow =
                        &cache.v[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    let mut s = 0.0;
                    for (a, c) in dcrow.iter().zip(vrow.iter()) {
                        s += a * c;
                    }
                    dprobs[i * seq + j] = s;
                    let w = probs[i * seq + j];
                    if w != 0.0 {
                        let dvrow = &mut dv
                            [(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        for (dvv, &dcv) in dvrow.iter_mut().zip(dcrow.iter()) {
                            *dvv += w * dcv;
                        }
                    }
                }
            }
            let dscores = softmax_backward_rows(probs, &dprobs, seq, seq);
            for i in 0..seq {
                let qrow =
                    &cache.q[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                for j in 0..seq {
                    let g = dscores[i * seq + j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let krow =
                        &cache.k[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    let dqrow =
                        &mut dq[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for (a, &c) in dqrow.iter_mut().zip(krow.iter()) {
                        *a += g * c;
                    }
                    let dkrow =
                        &mut dk[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    for (a, &c) in dkrow.iter_mut().zip(qrow.iter()) {
                        *a += g * c;
                    }
                }
            }
        }
    }

    let q_grads = linear_backward(&cache.x, p.wq, &dq, rows, d, d);
    let k_grads = linear_backward(&cache.x, p.wk, &dk, rows, d, d);
    let v_grads = linear_backward(&cache.x, p.wv, &dv, rows, d, d);
    let mut dx = q_grads.dx;
    for (a, b) in dx.iter_mut().zip(k_grads.dx.iter()) {
        *a += b;
    }
    for (a, b) in dx.iter_mut().zip(v_grads.dx.iter()) {
        *a += b;
    }
    AttnGrads {
        dx,
        dwq: q_grads.dw,
        dbq: q_grads.db,
        dwk: k_grads.dw,
        dbk: k_grads.db,
        dwv: v_grads.dw,
        dbv: v_grads.db,
        dwo: out_grads.dw,
        dbo: out_grads.db,
    }
}

/// a += b.
pub fn add_into(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b.iter()) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let y = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(y, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_matches_matmul() {
        let x = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
        let w = [2.0, 0.0, 1.0, -1.0, 0.5, 3.0];
        // w as 2x3 transposed equals wt as 3x2
        let wt = [2.0, -1.0, 0.0, 0.5, 1.0, 3.0];
        let a = matmul_transposed(&x, &w, 2, 3, 2);
        let b = matmul(&x, &wt, 2, 3, 2);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_var() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 0.0, 2.0];
        let gamma = [1.0; 4];
        let beta = [0.0; 4];
        let (y, _) = layer_norm_forward(&x, &gamma, &beta, 2, 4);
        for r in 0..2 {
            let row = &y[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![0.0, 1.0, 2.0, -5.0, 1000.0, 999.0];
        softmax_rows(&mut x, 2, 3);
        for r in 0..2 {
            let sum: f64 = x[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(x[r * 3..(r + 1) * 3].iter().all(|&v| v.is_finite()));
        }
    }

    #[test]
    fn gelu_values() {
        let y = gelu_forward(&[0.0, 10.0, -10.0]);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        assert!(y[2].abs() < 1e-6);
    }

    #[test]
    fn attention_accepts_empty_sequence() {
        let d = 4;
        let p = AttnParams {
            wq: &vec![0.0; d * d],
            bq: &vec![0.0; d],
            wk: &vec![0.0; d * d],
            bk: &vec![0.0; d],
            wv: &vec![0.0; d * d],
            bv: &vec![0.0; d],
            wo: &vec![0.0; d * d],
            bo: &vec![0.0; d],
            heads: 2,
        };
        let (y, _) = attention_forward(&[], &p, 1, 0, d);
        assert!(y.is_empty());
    }
}
