//! Pre-norm vision transformer on a batch-stacked `(B·T) × d` activation layout.

use super::layers::{
    add_row, cross_entropy, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_forward, LayerNormCache,
};
use super::InitMode;
use crate::arch::ModelArch;
use crate::attention::{
    add_leading_rows, conv_bias_matrix, difference_kernel, leading_rows, skip_backward, skip_forward, AttentionCache,
    AttentionConfig, AttentionLayer, AttentionWeights, SkipMode,
};
use crate::error::{Error, Result};
use crate::inspect::{names, Checkpoint, Tensor};
use crate::linalg::Matrix;
use crate::mimetic::{init_transformer, InitScope, InitSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub attn: AttentionWeights,
    /// LayerScale diagonal (`1 × d`), present for the scaled skip modes.
    pub ls: Option<Matrix>,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub fc1_w: Matrix,
    pub fc1_b: Matrix,
    pub fc2_w: Matrix,
    pub fc2_b: Matrix,
}

/// Every learnable tensor. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub cls: Option<Matrix>,
    pub pos: Matrix,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Matrix,
    pub norm_b: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

/// A named parameter, its matrix shape and whether weight decay applies.
pub struct ParamSlice<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
    pub decay: bool,
}

pub struct ParamSliceMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub decay: bool,
}

impl Params {
    /// All tensors in a fixed order. The convolution gate is listed for
    /// every block; it only receives gradient in the convolutional variants.
    pub fn tensors(&self) -> Vec<ParamSlice<'_>> {
        fn entry(name: String, m: &Matrix, decay: bool) -> ParamSlice<'_> {
            ParamSlice {
                name,
                shape: m.shape(),
                data: m.as_slice(),
                decay,
            }
        }
        let mut out = vec![
            entry(names::PATCH_WEIGHT.into(), &self.patch_w, true),
            entry(names::PATCH_BIAS.into(), &self.patch_b, false),
        ];
        if let Some(cls) = &self.cls {
            out.push(entry(names::CLS_TOKEN.into(), cls, false));
        }
        out.push(entry(names::POS_EMBED.into(), &self.pos, false));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(entry(names::block(l, "norm1.weight"), &b.ln1_g, false));
            out.push(entry(names::block(l, "norm1.bias"), &b.ln1_b, false));
            out.push(entry(names::q_full(l), &b.attn.wq, true));
            out.push(entry(names::k_full(l), &b.attn.wk, true));
            out.push(entry(names::v(l), &b.attn.wv, true));
            out.push(entry(names::proj(l), &b.attn.wproj, true));
            out.push(entry(names::block(l, "attn.proj.bias"), &b.attn.bproj, false));
            out.push(ParamSlice {
                name: names::block(l, "attn.gate"),
                shape: (1, 1),
                data: std::slice::from_ref(&b.attn.gate),
                decay: false,
            });
            if let Some(ls) = &b.ls {
                out.push(entry(names::block(l, "ls.weight"), ls, false));
            }
            out.push(entry(names::block(l, "norm2.weight"), &b.ln2_g, false));
            out.push(entry(names::block(l, "norm2.bias"), &b.ln2_b, false));
            out.push(entry(names::block(l, "mlp.fc1.weight"), &b.fc1_w, true));
            out.push(entry(names::block(l, "mlp.fc1.bias"), &b.fc1_b, false));
            out.push(entry(names::block(l, "mlp.fc2.weight"), &b.fc2_w, true));
            out.push(entry(names::block(l, "mlp.fc2.bias"), &b.fc2_b, false));
        }
        out.push(entry(names::NORM_WEIGHT.into(), &self.norm_g, false));
        out.push(entry(names::NORM_BIAS.into(), &self.norm_b, false));
        out.push(entry(names::HEAD_WEIGHT.into(), &self.head_w, true));
        out.push(entry(names::HEAD_BIAS.into(), &self.head_b, false));
        out
    }

    /// Mutable counterpart of [`Params::tensors`], in the same order.
    pub fn tensors_mut(&mut self) -> Vec<ParamSliceMut<'_>> {
        fn entry(name: String, data: &mut [f64], decay: bool) -> ParamSliceMut<'_> {
            ParamSliceMut { name, data, decay }
        }
        let mut out = Vec::new();
        out.push(entry(names::PATCH_WEIGHT.into(), self.patch_w.as_mut_slice(), true));
        out.push(entry(names::PATCH_BIAS.into(), self.patch_b.as_mut_slice(), false));
        if let Some(cls) = &mut self.cls {
            out.push(entry(names::CLS_TOKEN.into(), cls.as_mut_slice(), false));
        }
        out.push(entry(names::POS_EMBED.into(), self.pos.as_mut_slice(), false));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push(entry(names::block(l, "norm1.weight"), b.ln1_g.as_mut_slice(), false));
            out.push(entry(names::block(l, "norm1.bias"), b.ln1_b.as_mut_slice(), false));
            out.push(entry(names::q_full(l), b.attn.wq.as_mut_slice(), true));
            out.push(entry(names::k_full(l), b.attn.wk.as_mut_slice(), true));
            out.push(entry(names::v(l), b.attn.wv.as_mut_slice(), true));
            out.push(entry(names::proj(l), b.attn.wproj.as_mut_slice(), true));
            out.push(entry(names::block(l, "attn.proj.bias"), b.attn.bproj.as_mut_slice(), false));
            out.push(entry(names::block(l, "attn.gate"), std::slice::from_mut(&mut b.attn.gate), false));
            if let Some(ls) = &mut b.ls {
                out.push(entry(names::block(l, "ls.weight"), ls.as_mut_slice(), false));
            }
            out.push(entry(names::block(l, "norm2.weight"), b.ln2_g.as_mut_slice(), false));
            out.push(entry(names::block(l, "norm2.bias"), b.ln2_b.as_mut_slice(), false));
            out.push(entry(names::block(l, "mlp.fc1.weight"), b.fc1_w.as_mut_slice(), true));
            out.push(entry(names::block(l, "mlp.fc1.bias"), b.fc1_b.as_mut_slice(), false));
            out.push(entry(names::block(l, "mlp.fc2.weight"), b.fc2_w.as_mut_slice(), true));
            out.push(entry(names::block(l, "mlp.fc2.bias"), b.fc2_b.as_mut_slice(), false));
        }
        out.push(entry(names::NORM_WEIGHT.into(), self.norm_g.as_mut_slice(), false));
        out.push(entry(names::NORM_BIAS.into(), self.norm_b.as_mut_slice(), false));
        out.push(entry(names::HEAD_WEIGHT.into(), self.head_w.as_mut_slice(), true));
        out.push(entry(names::HEAD_BIAS.into(), self.head_b.as_mut_slice(), false));
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

struct BlockCache {
    /// Skip-path input: the block input restricted to query tokens.
    x: Matrix,
    queries: usize,
    ln1: LayerNormCache,
    attn: AttentionCache,
    a: Matrix,
    ln2: LayerNormCache,
    h2: Matrix,
    u: Matrix,
    t: Matrix,
    g: Matrix,
}

pub struct ForwardCache {
    embed_in: Matrix,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    feats: Matrix,
    batch: usize,
}

/// Output of one forward/backward pass.
pub struct LossGrad {
    pub loss: f64,
    pub correct: usize,
    pub grads: Params,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub arch: ModelArch,
    pub skip: SkipMode,
    pub attn: AttentionLayer,
    pub params: Params,
}

impl ToyModel {
    /// Builds the model through [`init_transformer`] so every mode shares
    /// the same weight streams for a given seed.
    pub fn new(arch: &ModelArch, mode: InitMode, seed: u64) -> Result<Self> {
        let mut cfg = AttentionConfig::new(arch.d, arch.heads);
        cfg.variant = mode.variant();
        cfg.skip = mode.skip();
        Self::with_spec(arch, &mode.init_spec(), &cfg, seed)
    }

    /// Any combination of weight initialization, attention variant and skip mode.
    pub fn with_spec(arch: &ModelArch, spec: &InitSpec, cfg: &AttentionConfig, seed: u64) -> Result<Self> {
        let ckpt = init_transformer(arch, spec, seed, InitScope::Full)?;
        Self::from_checkpoint(arch, &ckpt, cfg)
    }

    /// The convolutional variants use the difference kernel on the square
    /// token grid; the class token is left out of the convolution.
    pub fn from_checkpoint(arch: &ModelArch, ckpt: &Checkpoint, cfg: &AttentionConfig) -> Result<Self> {
        arch.validate()?;
        let conv = if cfg.variant.uses_conv() {
            let side = arch
                .grid_side()
                .ok_or_else(|| Error::Shape(format!("{} tokens do not form a square grid", arch.n_tokens)))?;
            let cb = conv_bias_matrix(side, side, &difference_kernel())?;
            Some(cb.for_tokens(arch.total_tokens())?)
        } else {
            None
        };
        let layer = AttentionLayer::new(cfg, conv)?;
        let (d, k) = (arch.d, arch.head_dim());
        let row = |name: &str| -> Result<Matrix> {
            let t = ckpt.tensor(name)?;
            Ok(Matrix::row_vector(&t.data))
        };
        let mut blocks = Vec::with_capacity(arch.depth);
        for l in 0..arch.depth {
            let mut attn = AttentionWeights::zeros(d);
            for h in 0..arch.heads {
                attn.wq.set_columns(h * k, &ckpt.matrix(&names::q_head(l, h))?);
                attn.wk.set_columns(h * k, &ckpt.matrix(&names::k_head(l, h))?);
            }
            attn.wv = ckpt.matrix(&names::v(l))?;
            attn.wproj = ckpt.matrix(&names::proj(l))?;
            attn.bproj = row(&names::block(l, "attn.proj.bias"))?;
            attn.gate = cfg.conv_gate;
            blocks.push(BlockParams {
                ln1_g: row(&names::block(l, "norm1.weight"))?,
                ln1_b: row(&names::block(l, "norm1.bias"))?,
                attn,
                ls: cfg.skip.uses_scale().then(|| Matrix::filled(1, d, cfg.layerscale_init)),
                ln2_g: row(&names::block(l, "norm2.weight"))?,
                ln2_b: row(&names::block(l, "norm2.bias"))?,
                fc1_w: ckpt.matrix(&names::block(l, "mlp.fc1.weight"))?,
                fc1_b: row(&names::block(l, "mlp.fc1.bias"))?,
                fc2_w: ckpt.matrix(&names::block(l, "mlp.fc2.weight"))?,
                fc2_b: row(&names::block(l, "mlp.fc2.bias"))?,
            });
        }
        let params = Params {
            patch_w: ckpt.matrix(names::PATCH_WEIGHT)?,
            patch_b: row(names::PATCH_BIAS)?,
            cls: if arch.class_token { Some(row(names::CLS_TOKEN)?) } else { None },
            pos: ckpt.matrix(names::POS_EMBED)?,
            blocks,
            norm_g: row(names::NORM_WEIGHT)?,
            norm_b: row(names::NORM_BIAS)?,
            head_w: ckpt.matrix(names::HEAD_WEIGHT)?,
            head_b: row(names::HEAD_BIAS)?,
        };
        if params.pos.shape() != (arch.total_tokens(), d) || params.patch_w.shape() != (arch.patch_dim, d) {
            return Err(Error::Shape("checkpoint does not match the architecture".into()));
        }
        Ok(Self {
            arch: arch.clone(),
            skip: cfg.skip,
            attn: layer,
            params,
        })
    }

    /// Current weights as a checkpoint (full-width q/k with head metadata).
    /// Row vectors are stored 1-D.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for t in self.params.tensors() {
            let shape = match t.shape {
                (1, cols) => vec![cols],
                (rows, cols) => vec![rows, cols],
            };
            ckpt.insert(t.name, Tensor::new(shape, t.data.to_vec()).expect("shape covers data"));
        }
        ckpt.set_meta("d", self.arch.d);
        ckpt.set_meta("depth", self.arch.depth);
        ckpt.set_meta("heads", self.arch.heads);
        ckpt.set_meta("n_tokens", self.arch.n_tokens);
        ckpt.set_meta("class_token", self.arch.class_token);
        ckpt.set_meta("source", "toytrain");
        ckpt
    }

    fn tokens(&self) -> usize {
        self.arch.total_tokens()
    }

    /// `pixels` holds one sample per row (`n_tokens · patch_dim` values).
    pub fn forward(&self, pixels: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let arch = &self.arch;
        let p = &self.params;
        let (batch, n, d, t) = (pixels.rows(), arch.n_tokens, arch.d, self.tokens());
        if pixels.cols() != n * arch.patch_dim || batch == 0 {
            return Err(Error::Shape(format!(
                "expected rows of {} inputs, got {}x{}",
                n * arch.patch_dim,
                pixels.rows(),
                pixels.cols()
            )));
        }
        let embed_in = Matrix::from_vec(batch * n, arch.patch_dim, pixels.as_slice().to_vec())?;
        let e = linear_forward(&embed_in, &p.patch_w, &p.patch_b);
        let offset = usize::from(arch.class_token);
        let mut x = Matrix::zeros(batch * t, d);
        for b in 0..batch {
            if let Some(cls) = &p.cls {
                let row = x.row_mut(b * t);
                row.iter_mut().zip(cls.as_slice()).for_each(|(v, c)| *v = *c);
            }
            for i in 0..n {
                x.row_mut(b * t + offset + i).copy_from_slice(e.row(b * n + i));
            }
            for i in 0..t {
                let row = x.row_mut(b * t + i);
                row.iter_mut().zip(p.pos.row(i)).for_each(|(v, q)| *v += q);
            }
        }

        // Only the class token reaches the head, so the last block computes
        // its attention output, skip and MLP for that row alone.
        let mut caches = Vec::with_capacity(p.blocks.len());
        for (l, blk) in p.blocks.iter().enumerate() {
            let queries = if arch.class_token && l + 1 == p.blocks.len() { 1 } else { t };
            let (h, ln1) = layer_norm_forward(&x, &blk.ln1_g, &blk.ln1_b);
            let (a, attn) = self.attn.forward_leading(&h, batch, &blk.attn, queries)?;
            let xs = if queries < t { leading_rows(&x, batch, queries) } else { x };
            let x1 = skip_forward(self.skip, &xs, &a, blk.ls.as_ref().map(Matrix::as_slice))?;
            let (h2, ln2) = layer_norm_forward(&x1, &blk.ln2_g, &blk.ln2_b);
            let u = linear_forward(&h2, &blk.fc1_w, &blk.fc1_b);
            let (g, tanh) = gelu_forward(&u);
            let mut x2 = g.matmul(&blk.fc2_w);
            add_row(&mut x2, &blk.fc2_b);
            x2.axpy(1.0, &x1);
            caches.push(BlockCache {
                x: xs,
                queries,
                ln1,
                attn,
                a,
                ln2,
                h2,
                u,
                t: tanh,
                g,
            });
            x = x2;
        }

        let per = x.rows() / batch;
        let pooled = if arch.class_token {
            Matrix::from_fn(batch, d, |b, j| x[(b * per, j)])
        } else {
            let mut m = Matrix::zeros(batch, d);
            for b in 0..batch {
                for i in 0..t {
                    let src = x.row(b * t + i);
                    m.row_mut(b).iter_mut().zip(src).for_each(|(v, s)| *v += s / t as f64);
                }
            }
            m
        };
        let (feats, final_ln) = layer_norm_forward(&pooled, &p.norm_g, &p.norm_b);
        let logits = linear_forward(&feats, &p.head_w, &p.head_b);
        Ok((
            logits,
            ForwardCache {
                embed_in,
                blocks: caches,
                final_ln,
                feats,
                batch,
            },
        ))
    }

    /// Gradients of a loss given its gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Params {
        let arch = &self.arch;
        let p = &self.params;
        let (batch, n, d, t) = (cache.batch, arch.n_tokens, arch.d, self.tokens());
        let mut grads = p.zeros_like();

        let (d_feats, head_w, head_b) = linear_backward(&cache.feats, &p.head_w, d_logits);
        grads.head_w = head_w;
        grads.head_b = head_b;
        let (d_pooled, norm_g, norm_b) = layer_norm_backward(&cache.final_ln, &p.norm_g, &d_feats);
        grads.norm_g = norm_g;
        grads.norm_b = norm_b;

        let per = cache.blocks.last().map_or(t, |c| c.queries);
        let mut dx = Matrix::zeros(batch * per, d);
        for b in 0..batch {
            if arch.class_token {
                dx.row_mut(b * per).copy_from_slice(d_pooled.row(b));
            } else {
                for i in 0..t {
                    let row = dx.row_mut(b * t + i);
                    row.iter_mut().zip(d_pooled.row(b)).for_each(|(v, g)| *v = g / t as f64);
                }
            }
        }

        for (l, (blk, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[l];
            // MLP branch: x2 = x1 + gelu(h2·W1 + b1)·W2 + b2.
            let (d_g, fc2_w, fc2_b) = linear_backward(&c.g, &blk.fc2_w, &dx);
            let d_u = gelu_backward(&c.u, &c.t, &d_g);
            let (d_h2, fc1_w, fc1_b) = linear_backward(&c.h2, &blk.fc1_w, &d_u);
            let (d_x1_ln, ln2_g, ln2_b) = layer_norm_backward(&c.ln2, &blk.ln2_g, &d_h2);
            let mut d_x1 = dx;
            d_x1.axpy(1.0, &d_x1_ln);
            // Attention branch with its skip.
            let ls = blk.ls.as_ref().map(Matrix::as_slice);
            let (d_skip, d_a, d_ls) = skip_backward(self.skip, &c.x, &c.a, ls, &d_x1);
            let (d_h, ag) = self.attn.backward(&blk.attn, &c.attn, &d_a);
            let (d_x_ln, ln1_g, ln1_b) = layer_norm_backward(&c.ln1, &blk.ln1_g, &d_h);
            let mut d_x = d_x_ln;
            if c.queries < t {
                add_leading_rows(&mut d_x, &d_skip, batch, c.queries);
            } else {
                d_x.axpy(1.0, &d_skip);
            }

            gb.fc2_w = fc2_w;
            gb.fc2_b = fc2_b;
            gb.fc1_w = fc1_w;
            gb.fc1_b = fc1_b;
            gb.ln2_g = ln2_g;
            gb.ln2_b = ln2_b;
            gb.ln1_g = ln1_g;
            gb.ln1_b = ln1_b;
            if let (Some(slot), Some(v)) = (gb.ls.as_mut(), d_ls) {
                *slot = Matrix::row_vector(&v);
            }
            gb.attn = AttentionWeights {
                wq: ag.wq,
                wk: ag.wk,
                wv: ag.wv,
                wproj: ag.wproj,
                bproj: ag.bproj,
                gate: ag.gate,
            };
            dx = d_x;
        }

        let offset = usize::from(arch.class_token);
        let mut d_e = Matrix::zeros(batch * n, d);
        for b in 0..batch {
            for i in 0..t {
                let src = dx.row(b * t + i);
                grads.pos.row_mut(i).iter_mut().zip(src).for_each(|(v, g)| *v += g);
            }
            if let Some(cls) = grads.cls.as_mut() {
                cls.as_mut_slice().iter_mut().zip(dx.row(b * t)).for_each(|(v, g)| *v += g);
            }
            for i in 0..n {
                d_e.row_mut(b * n + i).copy_from_slice(dx.row(b * t + offset + i));
            }
        }
        grads.patch_w = cache.embed_in.t_matmul(&d_e);
        grads.patch_b = d_e.column_sums();
        grads
    }

    /// Mean cross-entropy on a batch and its gradients.
    pub fn loss_and_grad(&self, pixels: &Matrix, labels: &[usize]) -> Result<LossGrad> {
        let (logits, cache) = self.forward(pixels)?;
        let (loss, d_logits, correct) = cross_entropy(&logits, labels);
        Ok(LossGrad {
            loss,
            correct,
            grads: self.backward(&cache, &d_logits),
        })
    }

    /// Mean cross-entropy only.
    pub fn loss(&self, pixels: &Matrix, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward(pixels)?;
        Ok(cross_entropy(&logits, labels).0)
    }

    /// Mean loss and accuracy over a dataset, evaluated in chunks.
    pub fn evaluate(&self, pixels: &Matrix, labels: &[usize], chunk: usize) -> Result<(f64, f64)> {
        let total = labels.len();
        let (mut loss, mut correct) = (0.0, 0usize);
        let mut start = 0;
        while start < total {
            let end = (start + chunk.max(1)).min(total);
            let x = pixels.rows_range(start..end);
            let (logits, _) = self.forward(&x)?;
            let (l, _, c) = cross_entropy(&logits, &labels[start..end]);
            loss += l * (end - start) as f64;
            correct += c;
            start = end;
        }
        Ok((loss / total as f64, correct as f64 / total as f64))
    }
}
