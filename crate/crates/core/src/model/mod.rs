//! Instrumented bidirectional transformer denoiser.
//!
//! Pre-norm blocks with learned absolute positions and full (non-causal)
//! attention. The residual stream after every block is exposed to read taps
//! and write hooks; whatever a hook leaves in the buffer is what the next
//! block sees.

mod checkpoint;
mod hooks;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    FORMAT_VERSION, MAGIC,
};
pub use hooks::{Companion, CompanionLayer, FnHook, HookContext, InterventionHook};

use crate::diffusion::NfeCounter;
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gemm, layer_norm_rows, softmax_in_place, LayerNormOut, Layout, Matrix, Rng, Scalar,
};
use crate::steering::Steering;
use crate::tokens::TokenSeq;

/// Architecture descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Includes the mask token.
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub mask_token_id: u32,
    pub ffn_dim: usize,
    /// Reuse the token embedding as the output projection.
    pub tied_head: bool,
}

impl DenoiserConfig {
    /// Desk-scale default: d=64, 8 blocks, 4 heads, up to 128 positions.
    pub fn desk(vocab_size: usize, mask_token_id: u32) -> Self {
        DenoiserConfig {
            vocab_size,
            hidden_dim: 64,
            num_layers: 8,
            num_heads: 4,
            max_seq_len: 128,
            mask_token_id,
            ffn_dim: 256,
            tied_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("vocab_size, hidden_dim and num_layers must be positive".into());
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return bad(format!(
                "mask token {} outside vocabulary of {}",
                self.mask_token_id, self.vocab_size
            ));
        }
        if self.max_seq_len == 0 || self.ffn_dim == 0 {
            return bad("max_seq_len and ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T: Scalar = f32> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    /// d × 3d, columns ordered [q | k | v], heads contiguous within each.
    pub w_qkv: Matrix<T>,
    pub b_qkv: Vec<T>,
    pub w_out: Matrix<T>,
    pub b_out: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w_fc: Matrix<T>,
    pub b_fc: Vec<T>,
    pub w_proj: Matrix<T>,
    pub b_proj: Vec<T>,
}

/// All denoiser parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T: Scalar = f32> {
    pub config: DenoiserConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
    /// Absent when the head is tied to `tok_emb`.
    pub head_weight: Option<Matrix<T>>,
    pub head_bias: Vec<T>,
}

const INIT_STD: f32 = 0.02;

fn normal_matrix(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Matrix<f32> {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl Weights<f32> {
    /// GPT-style init: N(0, 0.02) everywhere, residual projections scaled
    /// down by sqrt(2·layers), unit gains and zero biases.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let resid_std = INIT_STD / (2.0 * config.num_layers as f32).sqrt();
        let tok_emb = normal_matrix(config.vocab_size, d, INIT_STD, rng);
        let pos_emb = normal_matrix(config.max_seq_len, d, INIT_STD, rng);
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                w_qkv: normal_matrix(d, 3 * d, INIT_STD, rng),
                b_qkv: vec![0.0; 3 * d],
                w_out: normal_matrix(d, d, resid_std, rng),
                b_out: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w_fc: normal_matrix(d, f, INIT_STD, rng),
                b_fc: vec![0.0; f],
                w_proj: normal_matrix(f, d, resid_std, rng),
                b_proj: vec![0.0; d],
            })
            .collect();
        let head_weight =
            (!config.tied_head).then(|| normal_matrix(d, config.vocab_size, INIT_STD, rng));
        Ok(Weights {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            head_weight,
            head_bias: vec![0.0; config.vocab_size],
        })
    }
}

impl<T: Scalar> Weights<T> {
    /// Same structure, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, s) in z.sections_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let v = |x: &Vec<T>| {
            x.iter()
                .map(|&a| U::from(a).expect("finite"))
                .collect::<Vec<U>>()
        };
        Weights {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1_gain: v(&b.ln1_gain),
                    ln1_bias: v(&b.ln1_bias),
                    w_qkv: b.w_qkv.cast(),
                    b_qkv: v(&b.b_qkv),
                    w_out: b.w_out.cast(),
                    b_out: v(&b.b_out),
                    ln2_gain: v(&b.ln2_gain),
                    ln2_bias: v(&b.ln2_bias),
                    w_fc: b.w_fc.cast(),
                    b_fc: v(&b.b_fc),
                    w_proj: b.w_proj.cast(),
                    b_proj: v(&b.b_proj),
                })
                .collect(),
            lnf_gain: v(&self.lnf_gain),
            lnf_bias: v(&self.lnf_bias),
            head_weight: self.head_weight.as_ref().map(Matrix::cast),
            head_bias: v(&self.head_bias),
        }
    }

    /// Named parameter sections in canonical (checkpoint) order.
    pub fn sections(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("tok_emb".into(), self.tok_emb.data()),
            ("pos_emb".into(), self.pos_emb.data()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gain"), &b.ln1_gain[..]),
                (format!("{p}.ln1.bias"), &b.ln1_bias[..]),
                (format!("{p}.attn.qkv.weight"), b.w_qkv.data()),
                (format!("{p}.attn.qkv.bias"), &b.b_qkv[..]),
                (format!("{p}.attn.out.weight"), b.w_out.data()),
                (format!("{p}.attn.out.bias"), &b.b_out[..]),
                (format!("{p}.ln2.gain"), &b.ln2_gain[..]),
                (format!("{p}.ln2.bias"), &b.ln2_bias[..]),
                (format!("{p}.mlp.fc.weight"), b.w_fc.data()),
                (format!("{p}.mlp.fc.bias"), &b.b_fc[..]),
                (format!("{p}.mlp.proj.weight"), b.w_proj.data()),
                (format!("{p}.mlp.proj.bias"), &b.b_proj[..]),
            ]);
        }
        out.push(("lnf.gain".into(), &self.lnf_gain[..]));
        out.push(("lnf.bias".into(), &self.lnf_bias[..]));
        if let Some(h) = &self.head_weight {
            out.push(("head.weight".into(), h.data()));
        }
        out.push(("head.bias".into(), &self.head_bias[..]));
        out
    }

    /// Mutable view of [`Weights::sections`], same order.
    pub fn sections_mut(&mut self) -> Vec<(String, &mut [T])> {
        let Weights {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            head_weight,
            head_bias,
            ..
        } = self;
        let mut out: Vec<(String, &mut [T])> = vec![
            ("tok_emb".into(), tok_emb.data_mut()),
            ("pos_emb".into(), pos_emb.data_mut()),
        ];
        for (i, b) in blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gain"), &mut b.ln1_gain[..]),
                (format!("{p}.ln1.bias"), &mut b.ln1_bias[..]),
                (format!("{p}.attn.qkv.weight"), b.w_qkv.data_mut()),
                (format!("{p}.attn.qkv.bias"), &mut b.b_qkv[..]),
                (format!("{p}.attn.out.weight"), b.w_out.data_mut()),
                (format!("{p}.attn.out.bias"), &mut b.b_out[..]),
                (format!("{p}.ln2.gain"), &mut b.ln2_gain[..]),
                (format!("{p}.ln2.bias"), &mut b.ln2_bias[..]),
                (format!("{p}.mlp.fc.weight"), b.w_fc.data_mut()),
                (format!("{p}.mlp.fc.bias"), &mut b.b_fc[..]),
                (format!("{p}.mlp.proj.weight"), b.w_proj.data_mut()),
                (format!("{p}.mlp.proj.bias"), &mut b.b_proj[..]),
            ]);
        }
        out.push(("lnf.gain".into(), &mut lnf_gain[..]));
        out.push(("lnf.bias".into(), &mut lnf_bias[..]));
        if let Some(h) = head_weight {
            out.push(("head.weight".into(), h.data_mut()));
        }
        out.push(("head.bias".into(), &mut head_bias[..]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.sections().iter().map(|(_, s)| s.len()).sum()
    }
}

/// Per-layer residual stream plus final logits of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTrace {
    /// `layers[k - 1]` is the N×d stream after block k (post-hook).
    pub layers: Vec<Matrix>,
    /// N×V.
    pub logits: Matrix,
}

impl ResidualTrace {
    pub fn layer(&self, k: usize) -> &Matrix {
        &self.layers[k - 1]
    }
}

// ---------------------------------------------------------------------------
// Forward kernels shared by inference and training
// ---------------------------------------------------------------------------

/// Intermediates one block keeps for the backward pass.
pub(crate) struct BlockCache<T: Scalar> {
    pub ln1: LayerNormOut<T>,
    pub qkv: Matrix<T>,
    /// Attention weights per segment, then per head.
    pub probs: Vec<Matrix<T>>,
    pub attn: Matrix<T>,
    pub ln2: LayerNormOut<T>,
    pub pre_act: Matrix<T>,
    pub act: Matrix<T>,
}

pub(crate) fn check_tokens(config: &DenoiserConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    if ids.len() > config.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Shape(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn embed<T: Scalar>(w: &Weights<T>, ids: &[u32]) -> Matrix<T> {
    let d = w.config.hidden_dim;
    let mut x = Matrix::zeros(ids.len(), d);
    for (i, &t) in ids.iter().enumerate() {
        let tok = w.tok_emb.row(t as usize);
        let pos = w.pos_emb.row(i);
        for ((o, &a), &b) in x.row_mut(i).iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    x
}

/// One pre-norm block over a stack of independent sequences: `segs` lists
/// each sequence's `(start_row, len)`; attention never crosses segments.
pub(crate) fn block_forward<T: Scalar>(
    bw: &BlockWeights<T>,
    heads: usize,
    x: &Matrix<T>,
    segs: &[(usize, usize)],
    keep_cache: bool,
) -> (Matrix<T>, Option<BlockCache<T>>) {
    let (n, d) = x.shape();
    let dh = d / heads;
    let scale = T::one() / T::from(dh).unwrap().sqrt();

    let ln1 = layer_norm_rows(x, &bw.ln1_gain, &bw.ln1_bias);
    let mut qkv = ln1.y.matmul(&bw.w_qkv).expect("qkv shape");
    qkv.add_row_vector(&bw.b_qkv);

    let mut attn = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(if keep_cache { heads * segs.len() } else { 0 });
    let qkv_layout = Layout::rows(3 * d);
    for &(start, len) in segs {
        let mut scores = Matrix::zeros(len, len);
        let base = start * 3 * d;
        for h in 0..heads {
            let q = &qkv.data()[base + h * dh..];
            let k = &qkv.data()[base + d + h * dh..];
            let v = &qkv.data()[base + 2 * d + h * dh..];
            gemm(
                len,
                dh,
                len,
                scale,
                q,
                qkv_layout,
                k,
                Layout::transposed(3 * d),
                T::zero(),
                scores.data_mut(),
                Layout::rows(len),
            );
            for r in 0..len {
                softmax_in_place(scores.row_mut(r));
            }
            let out = &mut attn.data_mut()[start * d + h * dh..];
            gemm(
                len,
                len,
                dh,
                T::one(),
                scores.data(),
                Layout::rows(len),
                v,
                qkv_layout,
                T::zero(),
                out,
                Layout::rows(d),
            );
            if keep_cache {
                probs.push(scores.clone());
            }
        }
    }

    let mut x1 = attn.matmul(&bw.w_out).expect("out shape");
    x1.add_row_vector(&bw.b_out);
    x1.add_assign(x).expect("residual shape");

    let ln2 = layer_norm_rows(&x1, &bw.ln2_gain, &bw.ln2_bias);
    let mut pre_act = ln2.y.matmul(&bw.w_fc).expect("fc shape");
    pre_act.add_row_vector(&bw.b_fc);
    let act = pre_act.map(gelu);
    let mut out = act.matmul(&bw.w_proj).expect("proj shape");
    out.add_row_vector(&bw.b_proj);
    out.add_assign(&x1).expect("residual shape");

    let cache = keep_cache.then_some(BlockCache {
        ln1,
        qkv,
        probs,
        attn,
        ln2,
        pre_act,
        act,
    });
    (out, cache)
}

/// Final norm and vocabulary projection.
pub(crate) fn head_forward<T: Scalar>(
    w: &Weights<T>,
    h: &Matrix<T>,
) -> (Matrix<T>, LayerNormOut<T>) {
    let lnf = layer_norm_rows(h, &w.lnf_gain, &w.lnf_bias);
    let mut logits = match &w.head_weight {
        Some(hw) => lnf.y.matmul(hw),
        None => lnf.y.matmul_t(&w.tok_emb),
    }
    .expect("head shape");
    logits.add_row_vector(&w.head_bias);
    (logits, lnf)
}

// ---------------------------------------------------------------------------
// Public forward entry points
// ---------------------------------------------------------------------------

/// Plain forward pass, no hooks.
pub fn forward(w: &Weights, seq: &TokenSeq) -> Result<ResidualTrace> {
    forward_with_taps(w, seq, &[], 0, None)
}

/// Forward pass that runs every hook registered for layer k right after
/// block k, in ascending layer order, and records the post-hook stream.
///
/// `step` is forwarded to the hooks; `companion` supplies the reference
/// pass's activations when the caller has them.
pub fn forward_with_taps(
    w: &Weights,
    seq: &TokenSeq,
    hooks: &[Box<dyn InterventionHook>],
    step: usize,
    companion: Option<Companion<'_>>,
) -> Result<ResidualTrace> {
    let cfg = &w.config;
    check_tokens(cfg, seq.ids())?;
    if let Some(h) = hooks
        .iter()
        .find(|h| h.layer() == 0 || h.layer() > cfg.num_layers)
    {
        return Err(Error::Config(format!(
            "hook registered for layer {} of a {}-layer model",
            h.layer(),
            cfg.num_layers
        )));
    }
    let mut x = embed(w, seq.ids());
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (k, bw) in (1..).zip(&w.blocks) {
        x = block_forward(bw, cfg.num_heads, &x, &[(0, seq.len())], false).0;
        let shape = x.shape();
        for hook in hooks.iter().filter(|h| h.layer() == k) {
            let ctx = HookContext {
                layer: k,
                step,
                prompt_len: seq.prompt_len(),
                companion: companion.map(|c| c.at_layer(k)),
            };
            hook.apply(&ctx, &mut x)?;
            if x.shape() != shape {
                return Err(Error::Contract(format!(
                    "hook at layer {k} changed activations from {shape:?} to {:?}",
                    x.shape()
                )));
            }
        }
        layers.push(x.clone());
    }
    let (logits, _) = head_forward(w, &x);
    Ok(ResidualTrace { layers, logits })
}

/// Logits for several independent sequences, evaluated as one stacked
/// pass (attention stays within each sequence). No hooks.
pub fn forward_logits_batch(w: &Weights, seqs: &[TokenSeq]) -> Result<Vec<Matrix>> {
    let cfg = &w.config;
    let mut segs = Vec::with_capacity(seqs.len());
    let mut rows = 0;
    for s in seqs {
        check_tokens(cfg, s.ids())?;
        segs.push((rows, s.len()));
        rows += s.len();
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    let mut x = Matrix::zeros(rows, cfg.hidden_dim);
    for (s, &(start, _)) in seqs.iter().zip(&segs) {
        x.write_rows(start, &embed(w, s.ids()))?;
    }
    for bw in &w.blocks {
        x = block_forward(bw, cfg.num_heads, &x, &segs, false).0;
    }
    let (logits, _) = head_forward(w, &x);
    Ok(segs
        .iter()
        .map(|&(start, len)| logits.slice_rows(start, start + len))
        .collect())
}

/// One denoising step's model evaluation.
///
/// When `steering` is active at `step`, the reference is run first with no
/// interventions and its activations are handed to the steering hooks of
/// the generation pass (two function evaluations). Otherwise only the
/// generation is evaluated, unhooked (one function evaluation).
pub fn paired_forward(
    w: &Weights,
    gen: &TokenSeq,
    reference: &TokenSeq,
    steering: &Steering,
    step: usize,
    nfe: &mut NfeCounter,
) -> Result<(ResidualTrace, Option<ResidualTrace>)> {
    if !steering.is_active(step) {
        nfe.record(1);
        return Ok((forward(w, gen)?, None));
    }
    let ref_trace = forward(w, reference)?;
    let companion = Companion {
        trace: &ref_trace,
        prompt_len: reference.prompt_len(),
    };
    let gen_trace = forward_with_taps(w, gen, steering.hooks(), step, Some(companion))?;
    nfe.record(2);
    Ok((gen_trace, Some(ref_trace)))
}
