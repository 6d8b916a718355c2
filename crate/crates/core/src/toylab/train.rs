//! Masked-denoising training with a hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    block_forward, check_tokens, embed, head_forward, BlockCache, BlockWeights, Checkpoint,
    DenoiserConfig, Weights,
};
use crate::numerics::{
    gelu_grad, log_sum_exp, softmax_in_place, LayerNormOut, Matrix, Rng, Scalar, Stream,
};
use crate::par::{try_map_range, Dispatch};
use crate::tokens::{TokenId, TokenSeq, Vocab};

use super::corpus::gen_corpus;
use super::grammar::Grammar;

/// Optimizer and corruption settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Corruption levels: `t ~ U{1..T}`, mask rate `t / T`.
    pub corruption_levels: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f32,
    /// Linear warmup length in steps.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 6000,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            corruption_levels: 1000,
            grad_clip: 1.0,
            warmup: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.corruption_levels == 0 {
            return Err(Error::Config(
                "batch_size and corruption_levels must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One corrupted training example: the masked input and the clean targets
/// at masked positions.
#[derive(Clone, Debug)]
pub struct MaskedExample {
    pub input: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

impl MaskedExample {
    /// Masks each response position with probability `rate`; at least one
    /// position is always masked.
    pub fn corrupt(seq: &TokenSeq, rate: f64, mask: TokenId, rng: &mut Rng) -> Self {
        let mut input = seq.ids().to_vec();
        let mut targets = Vec::new();
        for (i, id) in input.iter_mut().enumerate().skip(seq.prompt_len()) {
            if rng.bernoulli(rate) {
                targets.push((i, *id));
                *id = mask;
            }
        }
        if targets.is_empty() && seq.response_len() > 0 {
            let i = seq.prompt_len() + rng.below(seq.response_len());
            targets.push((i, input[i]));
            input[i] = mask;
        }
        MaskedExample { input, targets }
    }
}

fn col_sum_into<T: Scalar>(acc: &mut [T], m: &Matrix<T>) {
    for r in 0..m.rows() {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a = *a + v;
        }
    }
}

fn add_into<T: Scalar>(acc: &mut Matrix<T>, m: &Matrix<T>) {
    acc.add_assign(m).expect("gradient shape");
}

/// Backward through a row-wise layer norm; accumulates gain/bias grads.
fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    ln: &LayerNormOut<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let inv_d = T::one() / T::from(d).unwrap();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let g = dy.row(r);
        let xh = ln.xhat.row(r);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgain[c] = dgain[c] + g[c] * xh[c];
            dbias[c] = dbias[c] + g[c];
            dxhat[c] = g[c] * gain[c];
            mean_dxhat = mean_dxhat + dxhat[c];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[c] * xh[c];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rs = ln.rstd[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Copy of the `rows × width` block of `m` starting at `(r0, c0)`.
fn block<T: Scalar>(m: &Matrix<T>, r0: usize, rows: usize, c0: usize, width: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(rows, width);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r0 + r)[c0..c0 + width]);
    }
    out
}

fn write_block<T: Scalar>(m: &mut Matrix<T>, r0: usize, c0: usize, src: &Matrix<T>) {
    for r in 0..src.rows() {
        m.row_mut(r0 + r)[c0..c0 + src.cols()].copy_from_slice(src.row(r));
    }
}

fn block_backward<T: Scalar>(
    bw: &BlockWeights<T>,
    g: &mut BlockWeights<T>,
    heads: usize,
    segs: &[(usize, usize)],
    cache: &BlockCache<T>,
    dout: &Matrix<T>,
) -> Matrix<T> {
    let (n, d) = dout.shape();
    let dh = d / heads;
    let scale = T::one() / T::from(dh).unwrap().sqrt();

    // MLP branch: out = x1 + gelu(ln2(x1) W_fc + b_fc) W_proj + b_proj.
    add_into(&mut g.w_proj, &cache.act.t_matmul(dout).expect("shape"));
    col_sum_into(&mut g.b_proj, dout);
    let dact = dout.matmul_t(&bw.w_proj).expect("shape");
    let mut dpre = dact;
    for (v, &p) in dpre.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *v = *v * gelu_grad(p);
    }
    add_into(&mut g.w_fc, &cache.ln2.y.t_matmul(&dpre).expect("shape"));
    col_sum_into(&mut g.b_fc, &dpre);
    let dln2 = dpre.matmul_t(&bw.w_fc).expect("shape");
    let mut dx1 = layer_norm_backward(
        &dln2,
        &cache.ln2,
        &bw.ln2_gain,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    );
    dx1.add_assign(dout).expect("shape");

    // Attention branch: x1 = x + attn W_out + b_out.
    add_into(&mut g.w_out, &cache.attn.t_matmul(&dx1).expect("shape"));
    col_sum_into(&mut g.b_out, &dx1);
    let dattn = dx1.matmul_t(&bw.w_out).expect("shape");
    let mut dqkv = Matrix::zeros(n, 3 * d);
    for (si, &(start, len)) in segs.iter().enumerate() {
        for h in 0..heads {
            let q = block(&cache.qkv, start, len, h * dh, dh);
            let k = block(&cache.qkv, start, len, d + h * dh, dh);
            let v = block(&cache.qkv, start, len, 2 * d + h * dh, dh);
            let p = &cache.probs[si * heads + h];
            let da = block(&dattn, start, len, h * dh, dh);
            let dv = p.t_matmul(&da).expect("shape");
            let dp = da.matmul_t(&v).expect("shape");
            let mut ds = Matrix::zeros(len, len);
            for r in 0..len {
                let pr = p.row(r);
                let dpr = dp.row(r);
                let dot = pr
                    .iter()
                    .zip(dpr)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (o, (&a, &b)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                    *o = a * (b - dot) * scale;
                }
            }
            write_block(&mut dqkv, start, h * dh, &ds.matmul(&k).expect("shape"));
            write_block(
                &mut dqkv,
                start,
                d + h * dh,
                &ds.t_matmul(&q).expect("shape"),
            );
            write_block(&mut dqkv, start, 2 * d + h * dh, &dv);
        }
    }
    add_into(&mut g.w_qkv, &cache.ln1.y.t_matmul(&dqkv).expect("shape"));
    col_sum_into(&mut g.b_qkv, &dqkv);
    let dln1 = dqkv.matmul_t(&bw.w_qkv).expect("shape");
    let mut dx = layer_norm_backward(
        &dln1,
        &cache.ln1,
        &bw.ln1_gain,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    );
    dx.add_assign(&dx1).expect("shape");
    dx
}

/// Summed cross-entropy of `examples` at their masked positions and, when
/// `grad` is given, the gradient of `loss_scale · loss` accumulated into it.
///
/// The examples are stacked into one activation matrix so the dense layers
/// run once for all of them; attention stays within each example.
pub fn example_loss_and_grad<T: Scalar>(
    w: &Weights<T>,
    examples: &[MaskedExample],
    loss_scale: T,
    grad: Option<&mut Weights<T>>,
) -> Result<T> {
    let cfg = &w.config;
    let mut segs = Vec::with_capacity(examples.len());
    let mut rows = 0;
    for ex in examples {
        check_tokens(cfg, &ex.input)?;
        segs.push((rows, ex.input.len()));
        rows += ex.input.len();
    }
    if rows == 0 {
        return Ok(T::zero());
    }
    let want_grad = grad.is_some();
    let mut x = Matrix::zeros(rows, cfg.hidden_dim);
    for (ex, &(start, _)) in examples.iter().zip(&segs) {
        x.write_rows(start, &embed(w, &ex.input))?;
    }
    let mut caches = Vec::with_capacity(cfg.num_layers);
    for bw in &w.blocks {
        let (next, cache) = block_forward(bw, cfg.num_heads, &x, &segs, want_grad);
        x = next;
        if let Some(c) = cache {
            caches.push(c);
        }
    }
    let (logits, lnf) = head_forward(w, &x);

    let mut loss = T::zero();
    let mut dlogits = want_grad.then(|| Matrix::<T>::zeros(logits.rows(), logits.cols()));
    for (ex, &(start, _)) in examples.iter().zip(&segs) {
        for &(pos, target) in &ex.targets {
            let row = logits.row(start + pos);
            loss = loss + log_sum_exp(row) - row[target as usize];
            if let Some(dl) = dlogits.as_mut() {
                let drow = dl.row_mut(start + pos);
                drow.copy_from_slice(row);
                softmax_in_place(drow);
                drow[target as usize] = drow[target as usize] - T::one();
                drow.iter_mut().for_each(|v| *v = *v * loss_scale);
            }
        }
    }
    let (Some(g), Some(dlogits)) = (grad, dlogits) else {
        return Ok(loss);
    };

    let dy = match &w.head_weight {
        Some(hw) => {
            add_into(
                g.head_weight.as_mut().expect("untied grad"),
                &lnf.y.t_matmul(&dlogits)?,
            );
            dlogits.matmul_t(hw)?
        }
        None => {
            add_into(&mut g.tok_emb, &dlogits.t_matmul(&lnf.y)?);
            dlogits.matmul(&w.tok_emb)?
        }
    };
    col_sum_into(&mut g.head_bias, &dlogits);
    let mut dx = layer_norm_backward(&dy, &lnf, &w.lnf_gain, &mut g.lnf_gain, &mut g.lnf_bias);
    for ((bw, gb), cache) in w.blocks.iter().zip(g.blocks.iter_mut()).zip(&caches).rev() {
        dx = block_backward(bw, gb, cfg.num_heads, &segs, cache, &dx);
    }
    for (ex, &(start, _)) in examples.iter().zip(&segs) {
        for (i, &t) in ex.input.iter().enumerate() {
            let src = dx.row(start + i);
            for (o, &v) in g.tok_emb.row_mut(t as usize).iter_mut().zip(src) {
                *o = *o + v;
            }
            for (o, &v) in g.pos_emb.row_mut(i).iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    Ok(loss)
}

/// Mean masked cross-entropy over a batch and its gradient.
///
/// The batch is split into a fixed number of shards whose gradients are
/// summed in shard order, so the result does not depend on `dispatch`.
pub fn batch_loss_and_grad(
    w: &Weights,
    batch: &[MaskedExample],
    dispatch: Dispatch,
) -> Result<(f32, Weights)> {
    const SHARDS: usize = 4;
    let total: usize = batch.iter().map(|e| e.targets.len()).sum();
    let scale = 1.0 / total.max(1) as f32;
    let per = batch.len().div_ceil(SHARDS).max(1);
    let parts = try_map_range(batch.len().div_ceil(per), dispatch, |s| {
        let mut g = w.zeros_like();
        let shard = &batch[s * per..((s + 1) * per).min(batch.len())];
        let loss = example_loss_and_grad(w, shard, scale, Some(&mut g))?;
        Ok((loss, g))
    })?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().unwrap_or_else(|| (0.0, w.zeros_like()));
    for (l, g) in iter {
        loss += l;
        for ((_, a), (_, b)) in grad.sections_mut().into_iter().zip(g.sections()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }
    Ok((loss * scale, grad))
}

/// Adam moments.
struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    fn new(w: &Weights) -> Self {
        Adam {
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut Weights, g: &Weights, cfg: &TrainConfig, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let sections = w
            .sections_mut()
            .into_iter()
            .zip(g.sections())
            .zip(self.m.sections_mut())
            .zip(self.v.sections_mut());
        for ((((_, p), (_, gs)), (_, ms)), (_, vs)) in sections {
            for i in 0..p.len() {
                let gi = gs[i];
                ms[i] = cfg.beta1 * ms[i] + (1.0 - cfg.beta1) * gi;
                vs[i] = cfg.beta2 * vs[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

fn grad_norm(g: &Weights) -> f32 {
    g.sections()
        .iter()
        .flat_map(|(_, s)| s.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    /// Batch loss before each update, plus one after the last: `steps + 1`
    /// entries.
    pub losses: Vec<f32>,
}

/// Trains a freshly initialised denoiser on `corpus`.
///
/// Each step draws `batch_size` sequences with replacement, masks each at a
/// uniformly drawn corruption level and takes one Adam step on the mean
/// masked cross-entropy. A non-finite loss stops training with
/// [`Error::Diverged`], carrying the last weights whose loss was finite.
pub fn train_denoiser(
    config: DenoiserConfig,
    vocab: &Vocab,
    corpus: &[TokenSeq],
    train: &TrainConfig,
    dispatch: Dispatch,
    mut on_step: impl FnMut(usize, f32),
) -> Result<TrainOutput> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} words but the model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mask = config.mask_token_id;
    let mut init_rng = Rng::for_stream(train.seed, Stream::Init, 0);
    let mut rng = Rng::for_stream(train.seed, Stream::Training, 0);
    let mut weights = Weights::init(config, &mut init_rng)?;
    let mut last_good = weights.clone();
    let mut adam = Adam::new(&weights);
    let mut losses = Vec::with_capacity(train.steps + 1);
    for step in 0..=train.steps {
        let batch: Vec<MaskedExample> = (0..train.batch_size)
            .map(|_| {
                let seq = &corpus[rng.below(corpus.len())];
                let t = 1 + rng.below(train.corruption_levels);
                let rate = t as f64 / train.corruption_levels as f64;
                MaskedExample::corrupt(seq, rate, mask, &mut rng)
            })
            .collect();
        let (loss, mut grad) = batch_loss_and_grad(&weights, &batch, dispatch)?;
        let norm = grad_norm(&grad);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                last_good: Box::new(Checkpoint::new(last_good, vocab.clone())?),
            });
        }
        losses.push(loss);
        on_step(step, loss);
        if step == train.steps {
            break;
        }
        if train.grad_clip > 0.0 && norm > train.grad_clip {
            let s = train.grad_clip / norm;
            for (_, g) in grad.sections_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = if train.warmup > 0 {
            train.lr * ((step + 1) as f32 / train.warmup as f32).min(1.0)
        } else {
            train.lr
        };
        last_good.clone_from(&weights);
        adam.step(&mut weights, &grad, train, lr);
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint::new(weights, vocab.clone())?,
        losses,
    })
}

/// Documents in the corpus drawn by [`train_on_grammar`] unless told
/// otherwise.
pub const DEFAULT_CORPUS_SIZE: usize = 20_000;

/// Draws a `corpus_size` document corpus from `grammar` (seeded by
/// `train.seed`) and trains a denoiser of shape `config` on it.
pub fn train_on_grammar(
    grammar: &Grammar,
    config: DenoiserConfig,
    corpus_size: usize,
    train: &TrainConfig,
    dispatch: Dispatch,
    on_step: impl FnMut(usize, f32),
) -> Result<TrainOutput> {
    let vocab = grammar.vocab();
    let mut rng = Rng::for_stream(train.seed, Stream::Corpus, 0);
    let corpus: Vec<TokenSeq> = gen_corpus(grammar, &vocab, corpus_size, &mut rng)?
        .into_iter()
        .map(|d| d.seq)
        .collect();
    train_denoiser(config, &vocab, &corpus, train, dispatch, on_step)
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per
/// parameter section, comparing the backward pass against central finite
/// differences of the summed loss.
pub fn gradient_check(
    w: &Weights<f64>,
    examples: &[MaskedExample],
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let mut analytic = w.zeros_like();
    example_loss_and_grad(w, examples, 1.0, Some(&mut analytic))?;
    let total = |w: &Weights<f64>| example_loss_and_grad(w, examples, 1.0, None);
    let mut probe = w.clone();
    let names: Vec<String> = w.sections().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (si, name) in names.iter().enumerate() {
        let len = w.sections()[si].1.len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.sections()[si].1[i];
            probe.sections_mut()[si].1[i] = orig + h;
            let up = total(&probe)?;
            probe.sections_mut()[si].1[i] = orig - h;
            let down = total(&probe)?;
            probe.sections_mut()[si].1[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.sections()[si].1.to_vec();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push((name.clone(), if denom == 0.0 { 0.0 } else { diff / denom }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, DenoiserConfig};

    fn micro(tied: bool) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: 9,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            mask_token_id: 0,
            ffn_dim: 12,
            tied_head: tied,
        }
    }

    fn examples(rng: &mut Rng) -> Vec<MaskedExample> {
        (0..3)
            .map(|i| {
                let ids: Vec<TokenId> = (0..5 + i).map(|_| 1 + rng.below(8) as TokenId).collect();
                let seq = TokenSeq::new(ids, 1).unwrap();
                MaskedExample::corrupt(&seq, 0.5, 0, rng)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for tied in [false, true] {
            let mut rng = Rng::new(7, 0);
            let mut w = Weights::init(micro(tied), &mut rng).unwrap();
            // Move away from the symmetric init so every path carries signal.
            for (_, s) in w.sections_mut() {
                for v in s.iter_mut() {
                    *v += rng.normal() * 0.3;
                }
            }
            let w64: Weights<f64> = w.cast();
            let report = gradient_check(&w64, &examples(&mut rng), 1e-5).unwrap();
            for (name, err) in report {
                assert!(err < 1e-3, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn loss_matches_forward_logits() {
        let mut rng = Rng::new(8, 0);
        let w = Weights::init(micro(false), &mut rng).unwrap();
        let ex = &examples(&mut rng)[0];
        let loss = example_loss_and_grad(&w, std::slice::from_ref(ex), 1.0, None).unwrap();
        let trace = forward(&w, &TokenSeq::new(ex.input.clone(), 1).unwrap()).unwrap();
        let expect: f32 = ex
            .targets
            .iter()
            .map(|&(p, t)| log_sum_exp(trace.logits.row(p)) - trace.logits.row(p)[t as usize])
            .sum();
        assert!((loss - expect).abs() < 1e-5);
    }

    #[test]
    fn corrupt_always_masks_something() {
        let mut rng = Rng::new(9, 0);
        let seq = TokenSeq::new(vec![3, 4, 5, 6], 2).unwrap();
        for _ in 0..100 {
            let ex = MaskedExample::corrupt(&seq, 0.0, 0, &mut rng);
            assert_eq!(ex.targets.len(), 1);
            assert!(ex.targets[0].0 >= 2);
        }
        let all = MaskedExample::corrupt(&seq, 1.0, 0, &mut rng);
        assert_eq!(all.input, vec![3, 4, 0, 0]);
    }

    #[test]
    fn shard_sum_is_dispatch_independent() {
        let mut rng = Rng::new(10, 0);
        let w = Weights::init(micro(false), &mut rng).unwrap();
        let batch: Vec<_> = (0..3).flat_map(|_| examples(&mut rng)).collect();
        let (la, ga) = batch_loss_and_grad(&w, &batch, Dispatch::Parallel).unwrap();
        let (lb, gb) = batch_loss_and_grad(&w, &batch, Dispatch::Sequential).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
    }
}
