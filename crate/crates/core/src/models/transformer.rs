use rand::{Rng, RngCore};

use super::{glorot, ModelConfig, PosEnc, SeqBatch, Unrolled};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const SINUSOID_BASE: f64 = 10000.0;
const MASKED: f64 = -1e9;

/// Row-major `[positions × d]` table with `PE(p, 2i) = sin(p / 10000^(2i/d))`
/// and `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn sinusoid(positions: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for j in 0..d {
            let angle = p / SINUSOID_BASE.powf((j - j % 2) as f64 / d as f64);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Head slopes `2^(-8h/H)`, `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64)).collect()
}

/// `[B·T×D] -> [B·H×T×D/H]`
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, t: usize, heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, d / heads])
}

/// `[B·H×T×D/H] -> [B·T×D]`
fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, t: usize, heads: usize) -> Result<Var> {
    let dh = g.shape(x)[2];
    let x = g.reshape(x, &[b, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * t, heads * dh])
}

/// Additive score bias `[G×T×T]` for `batch` copies of `H` heads: ALiBi
/// distances and/or the causal mask.
fn score_bias<T: Scalar>(batch: usize, heads: usize, t: usize, alibi: bool, causal: bool) -> Option<Tensor<T>> {
    if !alibi && !causal {
        return None;
    }
    let slopes = alibi_slopes(heads);
    let mut data = Vec::with_capacity(batch * heads * t * t);
    for _ in 0..batch {
        for &slope in &slopes {
            for i in 0..t {
                for j in 0..t {
                    let mut v = if alibi { -slope * i.abs_diff(j) as f64 } else { 0.0 };
                    if causal && j > i {
                        v += MASKED;
                    }
                    data.push(T::from_float(v));
                }
            }
        }
    }
    Some(Tensor::new(vec![batch * heads, t, t], data).expect("sizes agree"))
}

/// Attention over per-head tensors `[G×T×d_h]`; `extra` scores are added
/// before the softmax. Returns the context `[G×T×d_h]`.
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    extra: Option<Var>,
    bias: Option<Var>,
    dropout: Option<(f64, &mut (dyn RngCore + '_))>,
) -> Result<Var> {
    let dh = g.shape(q)[2];
    let scores = g.batch_matmul(q, k, true)?;
    let mut scores = g.scale(scores, T::from_float(1.0 / (dh as f64).sqrt()));
    if let Some(e) = extra {
        let e = g.scale(e, T::from_float(1.0 / (dh as f64).sqrt()));
        scores = g.add(scores, e)?;
    }
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    let mut probs = g.softmax(scores);
    g.release(scores);
    if let Some((p, rng)) = dropout {
        probs = g.dropout(probs, p, rng);
    }
    let ctx = g.batch_matmul(probs, v, false)?;
    g.release(probs);
    Ok(ctx)
}

/// Multi-head attention of one sequence: `q`, `k`, `v` are `[T×D]`,
/// `bias` is `[H×T×T]`. Heads are concatenated back to `[T×D]`; the
/// output mixing matrix is applied by the caller.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<&Tensor<T>>,
    causal: bool,
) -> Result<Var> {
    let (t, d) = (g.shape(q)[0], g.shape(q)[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("width {d} over {heads} heads")));
    }
    let mut total = score_bias::<T>(1, heads, t, false, causal);
    if let Some(b) = bias {
        if b.shape() != [heads, t, t] {
            return Err(Error::shape("attention", format!("bias {:?} for {heads} heads, {t} positions", b.shape())));
        }
        total = Some(match total {
            None => b.clone(),
            Some(mask) => {
                let data = mask.data().iter().zip(b.data()).map(|(&m, &x)| m + x).collect();
                Tensor::new(b.shape().to_vec(), data)?
            }
        });
    }
    let bias = total.map(|t| g.constant(t));
    let qh = split_heads(g, q, 1, t, heads)?;
    let kh = split_heads(g, k, 1, t, heads)?;
    let vh = split_heads(g, v, 1, t, heads)?;
    let ctx = attend(g, qh, kh, vh, None, bias, None)?;
    merge_heads(g, ctx, 1, t, heads)
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.insert(format!("{name}.gain"), Tensor::filled(&[d], T::one()))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct Relative {
    w_r: ParamId,
    u: ParamId,
    v: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm_attn: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    relative: Option<Relative>,
    norm_ffn: Norm,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerParams {
    embed: ParamId,
    blocks: Vec<Block>,
    norm_out: Norm,
}

impl TransformerParams {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_model;
        let ff = 4 * d;
        let embed = store.insert("embed", glorot(rng, vocab, d))?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let p = |s: &str| format!("block{l}.{s}");
            let norm_attn = Norm::init(store, &p("norm_attn"), d)?;
            let wq = store.insert(p("wq"), glorot(rng, d, d))?;
            let wk = store.insert(p("wk"), glorot(rng, d, d))?;
            let wv = store.insert(p("wv"), glorot(rng, d, d))?;
            let wo = store.insert(p("wo"), glorot(rng, d, d))?;
            let bo = store.insert(p("bo"), Tensor::zeros(&[d]))?;
            let relative = if config.pos_enc == PosEnc::RelativeXl {
                Some(Relative {
                    w_r: store.insert(p("w_rel"), glorot(rng, d, d))?,
                    u: store.insert(p("u"), Tensor::zeros(&[d]))?,
                    v: store.insert(p("v"), Tensor::zeros(&[d]))?,
                })
            } else {
                None
            };
            let norm_ffn = Norm::init(store, &p("norm_ffn"), d)?;
            let w1 = store.insert(p("w1"), glorot(rng, d, ff))?;
            let b1 = store.insert(p("b1"), Tensor::zeros(&[ff]))?;
            let w2 = store.insert(p("w2"), glorot(rng, ff, d))?;
            let b2 = store.insert(p("b2"), Tensor::zeros(&[d]))?;
            blocks.push(Block { norm_attn, wq, wk, wv, wo, bo, relative, norm_ffn, w1, b1, w2, b2 });
        }
        let norm_out = Norm::init(store, "norm_out", d)?;
        Ok(TransformerParams { embed, blocks, norm_out })
    }

    pub(crate) fn final_norm<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.norm_out.apply(g, store, x)
    }

    pub(crate) fn unroll<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        config: &ModelConfig,
        batch: &SeqBatch,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Unrolled> {
        let (b, t, d, heads) = (batch.len(), batch.steps(), config.d_model, config.heads);
        let flat: Vec<usize> = batch.tokens.iter().flatten().copied().collect();
        let table = g.param(store, self.embed);
        let mut x = g.embedding(table, &flat)?;
        if config.pos_enc == PosEnc::SinCos {
            let positions: Vec<f64> = (0..t).map(|p| p as f64).collect();
            let table = sinusoid(&positions, d);
            let data = (0..b).flat_map(|_| table.iter().map(|&v| T::from_float(v))).collect();
            let pe = g.constant(Tensor::new(vec![b * t, d], data)?);
            x = g.add(x, pe)?;
        }
        let bias = score_bias::<T>(b, heads, t, config.pos_enc == PosEnc::Alibi, config.is_causal())
            .map(|tensor| g.constant(tensor));
        // Sinusoids of relative distances T-1 down to -(T-1), in the order
        // expected by rel_shift.
        let relative_table = (config.pos_enc == PosEnc::RelativeXl).then(|| {
            let distances: Vec<f64> = (0..2 * t - 1).map(|k| k as f64 - (t as f64 - 1.0)).collect();
            let data = sinusoid(&distances, d).into_iter().map(T::from_float).collect();
            g.constant(Tensor::new(vec![2 * t - 1, d], data).expect("sizes agree"))
        });
        let p_drop = if dropout_rng.is_some() { config.dropout } else { 0.0 };

        let mut out = Unrolled { hidden: vec![x], ..Unrolled::default() };
        for block in &self.blocks {
            let xn = block.norm_attn.apply(g, store, x)?;
            let (wq, wk, wv) = (g.param(store, block.wq), g.param(store, block.wk), g.param(store, block.wv));
            let q = g.matmul(xn, wq)?;
            let k = g.matmul(xn, wk)?;
            let v = g.matmul(xn, wv)?;
            let (q_content, extra) = match (&block.relative, relative_table) {
                (Some(rel), Some(table)) => {
                    let u = g.param(store, rel.u);
                    let vb = g.param(store, rel.v);
                    let w_r = g.param(store, rel.w_r);
                    let qu = g.add_bias(q, u)?;
                    let qv = g.add_bias(q, vb)?;
                    let qv = split_heads(g, qv, b, t, heads)?;
                    let r = g.matmul(table, w_r)?;
                    let r = g.reshape(r, &[2 * t - 1, heads, d / heads])?;
                    let r = g.permute(r, &[1, 0, 2])?;
                    let r = g.reshape(r, &[heads, (2 * t - 1) * (d / heads)])?;
                    let index: Vec<usize> = (0..b).flat_map(|_| 0..heads).collect();
                    let r = g.gather_rows(r, &index)?;
                    let r = g.reshape(r, &[b * heads, 2 * t - 1, d / heads])?;
                    let by_distance = g.batch_matmul(qv, r, true)?;
                    (qu, Some(g.rel_shift(by_distance)?))
                }
                _ => (q, None),
            };
            let mut qh = split_heads(g, q_content, b, t, heads)?;
            let mut kh = split_heads(g, k, b, t, heads)?;
            let vh = split_heads(g, v, b, t, heads)?;
            if config.pos_enc == PosEnc::Rope {
                qh = g.rotary(qh, SINUSOID_BASE)?;
                kh = g.rotary(kh, SINUSOID_BASE)?;
            }
            let drop = match dropout_rng.as_deref_mut() {
                Some(rng) if p_drop > 0.0 => Some((p_drop, rng as &mut dyn RngCore)),
                _ => None,
            };
            let ctx = attend(g, qh, kh, vh, extra, bias, drop)?;
            let ctx = merge_heads(g, ctx, b, t, heads)?;
            let wo = g.param(store, block.wo);
            let bo = g.param(store, block.bo);
            let mixed = g.matmul(ctx, wo)?;
            let mut mixed = g.add_bias(mixed, bo)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                mixed = g.dropout(mixed, p_drop, rng);
            }
            x = g.add(x, mixed)?;

            let xn = block.norm_ffn.apply(g, store, x)?;
            let (w1, b1, w2, b2) =
                (g.param(store, block.w1), g.param(store, block.b1), g.param(store, block.w2), g.param(store, block.b2));
            let hidden = g.matmul(xn, w1)?;
            let hidden = g.add_bias(hidden, b1)?;
            let hidden = g.relu(hidden);
            let dense = g.matmul(hidden, w2)?;
            let mut dense = g.add_bias(dense, b2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                dense = g.dropout(dense, p_drop, rng);
            }
            x = g.add(x, dense)?;
            out.hidden.push(x);
        }
        Ok(out)
    }
}
