//! Entity-level modality interaction: multi-head cross-modal attention over
//! one entity's modality vectors, residual and layer norm, a feed-forward
//! block, instance-level confidences, and simpler fusion baselines.
//!
//! Inputs are `[B, M, d]`: `B` entities, each a sequence of `M` modality
//! vectors of width `d`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{fan_in_uniform, Bound, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Column block `i * d_h .. (i + 1) * d_h` holds head `i`'s map.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl FusionWeights {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("fusion width {dim} not divisible by {heads} heads")));
        }
        let mut sq = |name: &str, rows: usize, cols: usize| {
            params.add(format!("fusion.{name}"), fan_in_uniform(&[rows, cols], rows, rng))
        };
        let wq = sq("wq", dim, dim);
        let wk = sq("wk", dim, dim);
        let wv = sq("wv", dim, dim);
        let w0 = sq("w0", dim, dim);
        let w1 = sq("w1", dim, ffn_dim);
        let w2 = sq("w2", ffn_dim, dim);
        Ok(FusionWeights {
            dim,
            heads,
            ffn_dim,
            wq,
            wk,
            wv,
            w0,
            w1,
            b1: params.add("fusion.b1", Tensor::zeros(&[ffn_dim])),
            w2,
            b2: params.add("fusion.b2", Tensor::zeros(&[dim])),
            ln1_gain: params.add("fusion.ln1.gain", Tensor::ones(&[dim])),
            ln1_bias: params.add("fusion.ln1.bias", Tensor::zeros(&[dim])),
            ln2_gain: params.add("fusion.ln2.gain", Tensor::ones(&[dim])),
            ln2_bias: params.add("fusion.ln2.bias", Tensor::zeros(&[dim])),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Fused modality vectors, `[B, M, d]`.
    pub fused: Var,
    /// Attention per head, each `[B, M, M]`.
    pub attention: Vec<Var>,
    /// Confidence per entity and modality, `[B, M]`.
    pub confidence: Var,
}

fn check_input(tape: &Tape, h: Var, dim: usize) -> Result<(usize, usize)> {
    let s = tape.value(h).shape();
    if s.len() != 3 || s[2] != dim || s[1] == 0 {
        return Err(Error::shape("fusion input", s, &[0, 0, dim]));
    }
    Ok((s[0], s[1]))
}

/// `[B, M, d] x [d, k] -> [B, M, k]`.
fn linear3(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let k = tape.value(w).cols();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = tape.matmul(flat, w)?;
    tape.reshape(y, &[s[0], s[1], k])
}

fn affine_layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_last(x, LAYER_NORM_EPS)?;
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

/// Multi-head cross-modal attention. Returns the `W_0`-mapped head
/// concatenation and the per-head attention tensors.
pub fn mhca(tape: &mut Tape, bound: &Bound, w: &FusionWeights, h: Var) -> Result<(Var, Vec<Var>)> {
    check_input(tape, h, w.dim)?;
    let dh = w.head_dim();
    let q = linear3(tape, h, bound.var(w.wq))?;
    let k = linear3(tape, h, bound.var(w.wk))?;
    let v = linear3(tape, h, bound.var(w.wv))?;
    let mut heads = Vec::with_capacity(w.heads);
    let mut betas = Vec::with_capacity(w.heads);
    for i in 0..w.heads {
        let qi = tape.narrow_last(q, i * dh, dh)?;
        let ki = tape.narrow_last(k, i * dh, dh)?;
        let vi = tape.narrow_last(v, i * dh, dh)?;
        let kt = tape.transpose(ki)?;
        let logits = tape.bmm(qi, kt)?;
        let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let beta = tape.softmax_last(logits)?;
        heads.push(tape.bmm(beta, vi)?);
        betas.push(beta);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
    let out = linear3(tape, cat, bound.var(w.w0))?;
    Ok((out, betas))
}

/// Confidence per modality: softmax over `m` of the attention mass modality
/// `m` receives, summed over queries and heads, scaled by `1 / sqrt(M * N_h)`.
/// Rows of `beta` are softmaxed over keys, so the mass a modality hands out
/// is always 1 and carries no signal.
pub fn confidence(tape: &mut Tape, betas: &[Var]) -> Result<Var> {
    let first = *betas.first().ok_or_else(|| Error::invalid("confidence: no attention heads"))?;
    let m = tape.value(first).cols();
    let mut mass: Option<Var> = None;
    for &b in betas {
        let bt = tape.transpose(b)?;
        let s = tape.sum_last(bt);
        mass = Some(match mass {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let mass = mass.expect("at least one head");
    let scaled = tape.scale(mass, 1.0 / ((m * betas.len()) as f64).sqrt());
    tape.softmax_last(scaled)
}

/// `LN(MHCA(h) + h)` followed by `LN(FFN(.) + .)`, with confidences.
pub fn fuse(tape: &mut Tape, bound: &Bound, w: &FusionWeights, h: Var) -> Result<FusionOutput> {
    let (attn, betas) = mhca(tape, bound, w, h)?;
    let res = tape.add(attn, h)?;
    let h1 = affine_layer_norm(tape, res, bound.var(w.ln1_gain), bound.var(w.ln1_bias))?;
    let f = linear3(tape, h1, bound.var(w.w1))?;
    let f = tape.add_row(f, bound.var(w.b1))?;
    let f = tape.relu(f);
    let f = linear3(tape, f, bound.var(w.w2))?;
    let f = tape.add_row(f, bound.var(w.b2))?;
    let res2 = tape.add(f, h1)?;
    let fused = affine_layer_norm(tape, res2, bound.var(w.ln2_gain), bound.var(w.ln2_bias))?;
    let confidence = confidence(tape, &betas)?;
    Ok(FusionOutput {
        fused,
        attention: betas,
        confidence,
    })
}

/// Stacks `M` matrices of shape `[B, d]` into `[B, M, d]`.
pub fn stack_modalities(tape: &mut Tape, hs: &[Var]) -> Result<Var> {
    let first = *hs.first().ok_or_else(|| Error::invalid("stack_modalities: no modalities"))?;
    let (b, d) = (tape.value(first).shape()[0], tape.value(first).cols());
    let cat = if hs.len() == 1 { first } else { tape.concat_last(hs)? };
    tape.reshape(cat, &[b, hs.len(), d])
}

/// Modality `m` of a `[B, M, d]` tensor as `[B, d]`.
pub fn modality_slice(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.narrow_last(flat, m * s[2], s[2])
}

/// Mean over modalities of a `[B, M, d]` tensor.
pub fn modality_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.transpose(x)?;
    tape.mean_last(t)
}

/// `sum_m weights[b, m] * h[b, m, :]` for weights `[B, M]`.
pub fn weighted_sum(tape: &mut Tape, weights: Var, h: Var) -> Result<Var> {
    let s = tape.value(h).shape().to_vec();
    let w = tape.reshape(weights, &[s[0], 1, s[1]])?;
    let out = tape.bmm(w, h)?;
    tape.reshape(out, &[s[0], s[2]])
}

/// Fusion strategies compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    /// Cross-modal attention transformer.
    Transformer,
    /// Concatenation followed by a fully connected layer.
    Fc,
    /// Global learnable weight per modality.
    Ws,
    /// Per-entity attention network weighting.
    At,
    /// Confidence-weighted sum of transformer outputs.
    Ts,
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "transformer" => FusionVariant::Transformer,
            "fc" => FusionVariant::Fc,
            "ws" => FusionVariant::Ws,
            "at" => FusionVariant::At,
            "ts" => FusionVariant::Ts,
            _ => return Err(Error::Config(format!("unknown fusion variant `{s}`"))),
        })
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Transformer => "transformer",
            FusionVariant::Fc => "fc",
            FusionVariant::Ws => "ws",
            FusionVariant::At => "at",
            FusionVariant::Ts => "ts",
        })
    }
}

/// Parameters of the single-vector fusion baselines.
#[derive(Clone, Debug)]
pub enum VariantParams {
    Fc { weight: ParamId, bias: ParamId },
    Ws { logits: ParamId },
    At { weight: ParamId, bias: ParamId, score: ParamId },
    Ts(FusionWeights),
}

impl VariantParams {
    pub fn new<R: Rng + ?Sized>(
        kind: FusionVariant,
        params: &mut ParamStore,
        modalities: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            FusionVariant::Fc => {
                let fan = modalities * dim;
                VariantParams::Fc {
                    weight: params.add("variant.fc.weight", fan_in_uniform(&[fan, dim], fan, rng)),
                    bias: params.add("variant.fc.bias", Tensor::zeros(&[dim])),
                }
            }
            FusionVariant::Ws => VariantParams::Ws {
                logits: params.add("variant.ws.logits", Tensor::zeros(&[modalities])),
            },
            FusionVariant::At => VariantParams::At {
                weight: params.add("variant.at.weight", fan_in_uniform(&[dim, dim], dim, rng)),
                bias: params.add("variant.at.bias", Tensor::zeros(&[dim])),
                score: params.add("variant.at.score", fan_in_uniform(&[dim, 1], dim, rng)),
            },
            FusionVariant::Ts => VariantParams::Ts(FusionWeights::new(params, dim, heads, ffn_dim, rng)?),
            FusionVariant::Transformer => {
                return Err(Error::Config("the transformer is not a single-vector variant".into()))
            }
        })
    }
}

/// Reduces `[B, M, d]` modality vectors to one `[B, d]` vector per entity.
pub fn fuse_variant(tape: &mut Tape, bound: &Bound, p: &VariantParams, h: Var) -> Result<Var> {
    let s = tape.value(h).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("fuse_variant", &s, &[0, 0, 0]));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    match p {
        VariantParams::Fc { weight, bias } => {
            let flat = tape.reshape(h, &[b, m * d])?;
            let y = tape.matmul(flat, bound.var(*weight))?;
            tape.add_row(y, bound.var(*bias))
        }
        VariantParams::Ws { logits } => {
            if tape.value(bound.var(*logits)).numel() != m {
                return Err(Error::shape("fuse_variant ws", &s, tape.value(bound.var(*logits)).shape()));
            }
            let w = tape.softmax_last(bound.var(*logits))?;
            let w = tape.reshape(w, &[m, 1])?;
            let t = tape.transpose(h)?;
            let t = tape.reshape(t, &[b * d, m])?;
            let y = tape.matmul(t, w)?;
            tape.reshape(y, &[b, d])
        }
        VariantParams::At { weight, bias, score } => {
            let flat = tape.reshape(h, &[b * m, d])?;
            let z = tape.matmul(flat, bound.var(*weight))?;
            let z = tape.add_row(z, bound.var(*bias))?;
            let z = tape.tanh(z);
            let sc = tape.matmul(z, bound.var(*score))?;
            let sc = tape.reshape(sc, &[b, m])?;
            let a = tape.softmax_last(sc)?;
            weighted_sum(tape, a, h)
        }
        VariantParams::Ts(w) => {
            let out = fuse(tape, bound, w, h)?;
            weighted_sum(tape, out.confidence, out.fused)
        }
    }
}
