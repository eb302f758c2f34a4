//! Multi-head self-attention on a batch of sequences stacked row-wise into
//! one `(B·T) × d` matrix, with a hand-written backward pass.

use super::maps::{softmax_backward_packed, softmax_backward_rows, softmax_packed, softmax_rows};
use super::{AttentionConfig, ConvBias, SkipMode, Variant};
use crate::error::{Error, Result};
use crate::linalg::{gemm_block, Block, Matrix};
use crate::mimetic::{HeadFactors, VpFactors};

/// Full-width attention weights. Head `h` owns columns `[hk, (h+1)k)` of
/// `wq`, `wk`, `wv` and rows `[hk, (h+1)k)` of `wproj`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wproj: Matrix,
    /// `1 × d`.
    pub bproj: Matrix,
    /// Convolution gate `g`; unused by [`Variant::Vanilla`].
    pub gate: f64,
}

impl AttentionWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wproj: Matrix::zeros(d, d),
            bproj: Matrix::zeros(1, d),
            gate: 0.0,
        }
    }

    /// Concatenates per-head query/key factors along columns.
    pub fn from_factors(heads: &[HeadFactors], vp: &VpFactors, gate: f64) -> Result<Self> {
        let d = vp.w_v.rows();
        let k = heads.first().map_or(0, HeadFactors::head_dim);
        if heads.is_empty() || k * heads.len() != d || vp.w_v.shape() != (d, d) || vp.w_proj.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "{} heads of width {k} do not tile a {d}-wide value/projection pair",
                heads.len()
            )));
        }
        let mut w = Self::zeros(d);
        for (h, head) in heads.iter().enumerate() {
            if head.w_q.shape() != (d, k) || head.w_k.shape() != (d, k) {
                return Err(Error::Shape(format!("head {h} factors are not {d}x{k}")));
            }
            w.wq.set_columns(h * k, &head.w_q);
            w.wk.set_columns(h * k, &head.w_k);
        }
        w.wv = vp.w_v.clone();
        w.wproj = vp.w_proj.clone();
        w.gate = gate;
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

/// Gradients with the same layout as [`AttentionWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wproj: Matrix,
    pub bproj: Matrix,
    pub gate: f64,
}

/// Activations kept by [`AttentionLayer::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Matrix,
    /// Query-token rows of `x` when only leading tokens attend.
    xq: Option<Matrix>,
    /// Projections side by side: `[Q | K | V]` when every token attends,
    /// `[K | V]` otherwise with the queries in `q`.
    qkv: Matrix,
    q: Option<Matrix>,
    /// Softmaxed maps, `(B·H·Tq) × T`; sample `b`, head `h` at row `(bH + h)Tq`.
    attn: Matrix,
    /// Mixing term added after the softmax (`g·C` or `softmax(g·C)`).
    extra: Option<Matrix>,
    o: Matrix,
    batch: usize,
    /// Query tokens per sequence, `Tq`.
    queries: usize,
}

impl AttentionCache {
    /// Attention map of sample `b`, head `h` (`Tq × T`).
    pub fn map(&self, b: usize, h: usize, heads: usize) -> Matrix {
        let tq = self.queries;
        self.attn.rows_range((b * heads + h) * tq..(b * heads + h + 1) * tq)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Stateless layer description: head count, variant and the `T × T`
/// convolution bias used by the convolutional variants.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub heads: usize,
    pub variant: Variant,
    pub conv: Option<Matrix>,
}

impl AttentionLayer {
    pub fn new(cfg: &AttentionConfig, conv: Option<Matrix>) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant.uses_conv() && conv.is_none() {
            return Err(Error::MissingConvBias);
        }
        Ok(Self {
            heads: cfg.heads,
            variant: cfg.variant,
            conv,
        })
    }

    fn conv_for(&self, tokens: usize) -> Result<Option<&Matrix>> {
        if !self.variant.uses_conv() {
            return Ok(None);
        }
        let c = self.conv.as_ref().ok_or(Error::MissingConvBias)?;
        if c.shape() != (tokens, tokens) {
            return Err(Error::Shape(format!(
                "convolution bias is {}x{}, sequence has {tokens} tokens",
                c.rows(),
                c.cols()
            )));
        }
        Ok(Some(c))
    }

    /// `x` holds `batch` sequences of equal length stacked row-wise.
    pub fn forward(&self, x: &Matrix, batch: usize, w: &AttentionWeights) -> Result<(Matrix, AttentionCache)> {
        let t = x.rows().checked_div(batch).unwrap_or(0);
        self.forward_leading(x, batch, w, t)
    }

    /// Like [`forward`](Self::forward), but only the first `queries` tokens
    /// of each sequence attend (all tokens still serve as keys and values).
    /// The output has `batch · queries` rows, equal to those rows of the
    /// full output.
    pub fn forward_leading(
        &self,
        x: &Matrix,
        batch: usize,
        w: &AttentionWeights,
        queries: usize,
    ) -> Result<(Matrix, AttentionCache)> {
        let (n, d) = x.shape();
        if batch == 0 || n % batch != 0 || d != w.dim() || d % self.heads != 0 {
            return Err(Error::Shape(format!(
                "input {n}x{d} is not {batch} sequences for a {}-wide, {}-head layer",
                w.dim(),
                self.heads
            )));
        }
        let t = n / batch;
        if queries == 0 || queries > t {
            return Err(Error::Shape(format!("{queries} query tokens out of {t}")));
        }
        let tq = queries;
        let k = d / self.heads;
        let scale = 1.0 / (k as f64).sqrt();
        let conv = self.conv_for(t)?;

        // One wide GEMM instead of three narrow ones.
        let xq = (tq < t).then(|| leading_rows(x, batch, tq));
        let (qkv, q) = match &xq {
            None => (x.matmul(&hcat(&[&w.wq, &w.wk, &w.wv])), None),
            Some(xq) => (x.matmul(&hcat(&[&w.wk, &w.wv])), Some(xq.matmul(&w.wq))),
        };
        let kv0 = if q.is_some() { 0 } else { d };
        let qm = q.as_ref().unwrap_or(&qkv);
        let inside = match (self.variant, conv) {
            (Variant::ConvInside, Some(c)) => Some(c.rows_range(0..tq).scale(w.gate)),
            _ => None,
        };
        let extra = match (self.variant, conv) {
            (Variant::ConvOutside, Some(c)) => Some(c.rows_range(0..tq).scale(w.gate)),
            (Variant::ConvOutsideSoftmaxed, Some(c)) => {
                let mut e = c.rows_range(0..tq).scale(w.gate);
                softmax_rows(&mut e);
                Some(e)
            }
            _ => None,
        };

        let mut attn = Matrix::zeros(batch * self.heads * tq, t);
        let mut o = Matrix::zeros(batch * tq, d);
        for b in 0..batch {
            for h in 0..self.heads {
                let qrows = Block::new(b * tq, h * k, tq, k);
                let krows = Block::new(b * t, kv0 + h * k, t, k);
                let vrows = Block::new(b * t, kv0 + d + h * k, t, k);
                let ab = Block::new((b * self.heads + h) * tq, 0, tq, t);
                gemm_block(scale, qm, qrows, false, &qkv, krows, true, 0.0, &mut attn, ab);
                // The block's rows are contiguous because it spans every column.
                let block = &mut attn.as_mut_slice()[ab.r0 * t..(ab.r0 + tq) * t];
                if let Some(gc) = &inside {
                    block.iter_mut().zip(gc.as_slice()).for_each(|(s, c)| *s += c);
                }
                softmax_packed(block, t);
                gemm_block(1.0, &attn, ab, false, &qkv, vrows, false, 0.0, &mut o, qrows);
                if let Some(e) = &extra {
                    gemm_block(1.0, e, Block::whole(e), false, &qkv, vrows, false, 1.0, &mut o, qrows);
                }
            }
        }
        let mut out = o.matmul(&w.wproj);
        let bias = w.bproj.as_slice();
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(bias).for_each(|(y, b)| *y += b);
        }
        let cache = AttentionCache {
            x: x.clone(),
            xq,
            qkv,
            q,
            attn,
            extra,
            o,
            batch,
            queries: tq,
        };
        Ok((out, cache))
    }

    /// Returns the input gradient (for every token) and the weight
    /// gradients. `d_out` has one row per query token of the cache.
    pub fn backward(&self, w: &AttentionWeights, cache: &AttentionCache, d_out: &Matrix) -> (Matrix, AttentionGrads) {
        let (n, d) = cache.x.shape();
        let t = n / cache.batch;
        let tq = cache.queries;
        let k = d / self.heads;
        let scale = 1.0 / (k as f64).sqrt();
        let conv = self
            .conv_for(t)
            .expect("forward validated the convolution bias")
            .map(|c| c.rows_range(0..tq));

        let bproj = d_out.column_sums();
        let wproj = cache.o.t_matmul(d_out);
        let d_o = d_out.matmul_t(&w.wproj);

        // Gradients land in the same side-by-side layout as the projections.
        let fused = cache.q.is_none();
        let kv0 = if fused { d } else { 0 };
        let qm = cache.q.as_ref().unwrap_or(&cache.qkv);
        let mut d_qkv = Matrix::zeros(n, kv0 + 2 * d);
        let mut dq_sep = (!fused).then(|| Matrix::zeros(cache.batch * tq, d));
        let mut ds = Matrix::zeros(tq, t);
        let mut d_extra = cache.extra.as_ref().map(|_| Matrix::zeros(tq, t));
        let mut gate = 0.0;
        let whole = Block::new(0, 0, tq, t);
        for b in 0..cache.batch {
            for h in 0..self.heads {
                let qrows = Block::new(b * tq, h * k, tq, k);
                let krows = Block::new(b * t, kv0 + h * k, t, k);
                let vrows = Block::new(b * t, kv0 + d + h * k, t, k);
                let ab = Block::new((b * self.heads + h) * tq, 0, tq, t);
                gemm_block(1.0, &d_o, qrows, false, &cache.qkv, vrows, true, 0.0, &mut ds, whole);
                gemm_block(1.0, &cache.attn, ab, true, &d_o, qrows, false, 0.0, &mut d_qkv, vrows);
                if let (Some(e), Some(de)) = (&cache.extra, d_extra.as_mut()) {
                    gemm_block(1.0, e, whole, true, &d_o, qrows, false, 1.0, &mut d_qkv, vrows);
                    de.axpy(1.0, &ds);
                }
                let block = &cache.attn.as_slice()[ab.r0 * t..(ab.r0 + tq) * t];
                softmax_backward_packed(block, ds.as_mut_slice(), t);
                if let (Variant::ConvInside, Some(c)) = (self.variant, &conv) {
                    gate += frobenius_dot(&ds, c);
                }
                let dq = match dq_sep.as_mut() {
                    Some(dq) => dq,
                    None => &mut d_qkv,
                };
                gemm_block(scale, &ds, whole, false, &cache.qkv, krows, false, 0.0, dq, qrows);
                gemm_block(scale, &ds, whole, true, qm, qrows, false, 0.0, &mut d_qkv, krows);
            }
        }
        if let (Some(mut de), Some(c)) = (d_extra, &conv) {
            if self.variant == Variant::ConvOutsideSoftmaxed {
                let e = cache.extra.as_ref().expect("softmaxed variant caches its mixing term");
                softmax_backward_rows(e, &mut de);
            }
            gate += frobenius_dot(&de, c);
        }

        let w_cat = cache.x.t_matmul(&d_qkv);
        let mut dx = match &dq_sep {
            None => d_qkv.matmul_t(&hcat(&[&w.wq, &w.wk, &w.wv])),
            Some(_) => d_qkv.matmul_t(&hcat(&[&w.wk, &w.wv])),
        };
        let wq = match (&dq_sep, &cache.xq) {
            (Some(dq), Some(xq)) => {
                add_leading_rows(&mut dx, &dq.matmul_t(&w.wq), cache.batch, tq);
                xq.t_matmul(dq)
            }
            _ => w_cat.columns(0..d),
        };
        let grads = AttentionGrads {
            wq,
            wk: w_cat.columns(kv0..kv0 + d),
            wv: w_cat.columns(kv0 + d..kv0 + 2 * d),
            wproj,
            bproj,
            gate,
        };
        (dx, grads)
    }
}

/// The first `queries` rows of each of `batch` equal-length sequences.
pub fn leading_rows(x: &Matrix, batch: usize, queries: usize) -> Matrix {
    let t = x.rows() / batch;
    let mut out = Matrix::zeros(batch * queries, x.cols());
    for b in 0..batch {
        for i in 0..queries {
            out.row_mut(b * queries + i).copy_from_slice(x.row(b * t + i));
        }
    }
    out
}

/// Adds `src` (as produced by [`leading_rows`]) back onto those rows of `dst`.
pub fn add_leading_rows(dst: &mut Matrix, src: &Matrix, batch: usize, queries: usize) {
    let t = dst.rows() / batch;
    for b in 0..batch {
        for i in 0..queries {
            let row = dst.row_mut(b * t + i);
            row.iter_mut().zip(src.row(b * queries + i)).for_each(|(v, s)| *v += s);
        }
    }
}

fn hcat(parts: &[&Matrix]) -> Matrix {
    let rows = parts.first().map_or(0, |m| m.rows());
    let mut out = Matrix::zeros(rows, parts.iter().map(|m| m.cols()).sum());
    let mut c0 = 0;
    for m in parts {
        out.set_columns(c0, m);
        c0 += m.cols();
    }
    out
}

fn frobenius_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Combines the residual `x` with the attention branch `attn`.
/// `ls` is the LayerScale diagonal and is required by the scaled modes.
pub fn skip_forward(mode: SkipMode, x: &Matrix, attn: &Matrix, ls: Option<&[f64]>) -> Result<Matrix> {
    if x.shape() != attn.shape() {
        return Err(Error::Shape("residual and attention branch differ in shape".into()));
    }
    let ls = check_scale(mode, ls, x.cols())?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (xr, ar) = (x.row(i), attn.row(i));
        let row = out.row_mut(i);
        match mode {
            SkipMode::Plain => {
                for j in 0..row.len() {
                    row[j] = xr[j] + ar[j];
                }
            }
            SkipMode::LayerscaleRight => {
                for j in 0..row.len() {
                    row[j] = xr[j] + ar[j] * ls[j];
                }
            }
            SkipMode::LayerscaleLeft => {
                for j in 0..row.len() {
                    row[j] = xr[j] * (1.0 - ls[j]) + ar[j];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`skip_forward`] with respect to `x`, `attn` and `ls`.
pub fn skip_backward(
    mode: SkipMode,
    x: &Matrix,
    attn: &Matrix,
    ls: Option<&[f64]>,
    d_out: &Matrix,
) -> (Matrix, Matrix, Option<Vec<f64>>) {
    match mode {
        SkipMode::Plain => (d_out.clone(), d_out.clone(), None),
        SkipMode::LayerscaleRight => {
            let ls = ls.expect("layerscale diagonal");
            let d_attn = d_out.scale_columns(ls);
            let d_ls = d_out.hadamard(attn).column_sums().into_vec();
            (d_out.clone(), d_attn, Some(d_ls))
        }
        SkipMode::LayerscaleLeft => {
            let ls = ls.expect("layerscale diagonal");
            let keep: Vec<f64> = ls.iter().map(|s| 1.0 - s).collect();
            let dx = d_out.scale_columns(&keep);
            let d_ls = d_out.hadamard(x).column_sums().scale(-1.0).into_vec();
            (dx, d_out.clone(), Some(d_ls))
        }
    }
}

fn check_scale(mode: SkipMode, ls: Option<&[f64]>, d: usize) -> Result<&[f64]> {
    match (mode.uses_scale(), ls) {
        (false, _) => Ok(&[]),
        (true, Some(s)) if s.len() == d => Ok(s),
        (true, _) => Err(Error::Shape(format!("{mode} needs a LayerScale diagonal of length {d}"))),
    }
}

/// Per-head weights of one attention layer plus the extra learnable scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaWeights {
    pub heads: Vec<HeadFactors>,
    pub vp: VpFactors,
    pub proj_bias: Vec<f64>,
    pub gate: f64,
    pub layerscale: Vec<f64>,
}

impl MhsaWeights {
    /// All-zero attention weights; gate and LayerScale take their initial values.
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let (d, k) = (cfg.d, cfg.head_dim());
        Self {
            heads: (0..cfg.heads)
                .map(|_| HeadFactors {
                    w_q: Matrix::zeros(d, k),
                    w_k: Matrix::zeros(d, k),
                })
                .collect(),
            vp: VpFactors {
                w_v: Matrix::zeros(d, d),
                w_proj: Matrix::zeros(d, d),
            },
            proj_bias: vec![0.0; d],
            gate: cfg.conv_gate,
            layerscale: vec![cfg.layerscale_init; d],
        }
    }

    pub fn to_attention_weights(&self) -> Result<AttentionWeights> {
        let mut w = AttentionWeights::from_factors(&self.heads, &self.vp, self.gate)?;
        if self.proj_bias.len() != w.dim() {
            return Err(Error::Shape("projection bias length differs from width".into()));
        }
        w.bproj = Matrix::row_vector(&self.proj_bias);
        Ok(w)
    }
}

/// One self-attention sublayer applied to a single `n × d` sequence,
/// including its skip connection. Heads are reduced in ascending order.
pub fn mhsa_forward(x: &Matrix, w: &MhsaWeights, cfg: &AttentionConfig, conv: Option<&ConvBias>) -> Result<Matrix> {
    cfg.validate()?;
    if x.cols() != cfg.d || w.heads.len() != cfg.heads {
        return Err(Error::Shape(format!(
            "input width {} or head count {} does not match the configuration",
            x.cols(),
            w.heads.len()
        )));
    }
    let c = match (cfg.variant.uses_conv(), conv) {
        (false, _) => None,
        (true, Some(cb)) => Some(cb.for_tokens(x.rows())?),
        (true, None) => return Err(Error::MissingConvBias),
    };
    let layer = AttentionLayer::new(cfg, c)?;
    let (attn, _) = layer.forward(x, 1, &w.to_attention_weights()?)?;
    skip_forward(cfg.skip, x, &attn, Some(&w.layerscale))
}
