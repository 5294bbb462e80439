//! Attention, feed-forward and positional-encoding building blocks.
//!
//! Parameter containers are generic over the leaf type so the same layout
//! holds trainable parameters, tape handles, or optimizer moments.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Sinusoidal encoding of a slot index as a `1×d` row. Even columns carry
/// `sin(slot / 10000^(2i/d))`, odd columns the matching cosine.
pub fn positional_encoding(slot: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; d];
    let pos = slot as f64;
    for i in (0..d).step_by(2) {
        let freq = 10000f64.powf(i as f64 / d as f64);
        out[i] = (pos / freq).sin();
        if i + 1 < d {
            out[i + 1] = (pos / freq).cos();
        }
    }
    Tensor::row(out)
}

/// Inverted dropout with its own deterministic random stream.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} must be in [0, 1)")));
        }
        Ok(Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Zeroes each entry with probability `rate` and rescales survivors by
    /// `1/(1-rate)`.
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Applies dropout only when a training context is supplied.
pub fn dropout(tape: &mut Tape<'_>, x: Var, ctx: Option<&mut Dropout>) -> Result<Var> {
    match ctx {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T> {
    /// Per-head query projections, each `(D/H)×(D/H)`.
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    /// Output projection `D×D`.
    pub w_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w_3: T,
    pub w_4: T,
    /// Affine of the norm after attention.
    pub ln1_gain: T,
    pub ln1_bias: T,
    /// Affine of the norm after the feed-forward network.
    pub ln2_gain: T,
    pub ln2_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub mha: MhaParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T> MhaParams<T> {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> MhaParams<U> {
        let heads = |name: &str, ws: &'s [T], f: &mut dyn FnMut(&str, &'s T) -> U| {
            ws.iter()
                .enumerate()
                .map(|(h, w)| f(&format!("{prefix}.{name}.{h}"), w))
                .collect()
        };
        MhaParams {
            w_q: heads("w_q", &self.w_q, f),
            w_k: heads("w_k", &self.w_k, f),
            w_v: heads("w_v", &self.w_v, f),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (name, ws) in [("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)] {
            for (h, w) in ws.iter_mut().enumerate() {
                f(&format!("{prefix}.{name}.{h}"), w);
            }
        }
        f(&format!("{prefix}.w_o"), &mut self.w_o);
    }
}

impl<T> FfnParams<T> {
    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> FfnParams<U> {
        FfnParams {
            w_3: f(&format!("{prefix}.w_3"), &self.w_3),
            w_4: f(&format!("{prefix}.w_4"), &self.w_4),
            ln1_gain: f(&format!("{prefix}.ln1_gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{prefix}.ln1_bias"), &self.ln1_bias),
            ln2_gain: f(&format!("{prefix}.ln2_gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{prefix}.ln2_bias"), &self.ln2_bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_3"), &mut self.w_3);
        f(&format!("{prefix}.w_4"), &mut self.w_4);
        f(&format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(&format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(&format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(&format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
    }
}

impl<T> BlockParams<T> {
    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> BlockParams<U> {
        BlockParams {
            mha: self.mha.map(&format!("{prefix}.mha"), f),
            ffn: self.ffn.map(&format!("{prefix}.ffn"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.mha.for_each_mut(&format!("{prefix}.mha"), f);
        self.ffn.for_each_mut(&format!("{prefix}.ffn"), f);
    }
}

impl BlockParams<Tensor> {
    /// Fresh block: projections drawn from `N(0, 1/fan_in)`, norms at
    /// identity.
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let std_h = 1.0 / (dh as f64).sqrt();
        let std_d = 1.0 / (d as f64).sqrt();
        let head_mats = |rng: &mut R| -> Vec<Tensor> {
            (0..heads).map(|_| Tensor::randn(&[dh, dh], std_h, rng)).collect()
        };
        let mha = MhaParams {
            w_q: head_mats(rng),
            w_k: head_mats(rng),
            w_v: head_mats(rng),
            w_o: Tensor::randn(&[d, d], std_d, rng),
        };
        let ffn = FfnParams {
            w_3: Tensor::randn(&[d, d], std_d, rng),
            w_4: Tensor::randn(&[d, d], std_d, rng),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        };
        Ok(BlockParams { mha, ffn })
    }
}

/// Single-query multi-head attention. `kv` serves as both keys and values;
/// heads split the feature dimension and each head projects its slice with
/// its own `(D/H)×(D/H)` matrices.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q: Var,
    kv: Var,
    p: &MhaParams<Var>,
    mut drop: Option<&mut Dropout>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if tape.value(kv).rows() == 0 {
        return Err(Error::Contract("attention over an empty context".into()));
    }
    if tape.value(kv).cols() != d {
        return Err(Error::dim("attention", tape.value(q).shape(), tape.value(kv).shape()));
    }
    let heads = p.heads();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kvh = tape.slice_cols(kv, h * dh, dh)?;
        let qp = tape.matmul(qh, p.w_q[h])?;
        let kp = tape.matmul(kvh, p.w_k[h])?;
        let vp = tape.matmul(kvh, p.w_v[h])?;
        let kt = tape.transpose(kp)?;
        let scores = tape.matmul(qp, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        let attn = dropout(tape, attn, drop.as_deref_mut())?;
        outs.push(tape.matmul(attn, vp)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, p.w_o)
}

/// `Q' = LN(MHA(Q,K,V) + Q)`, `Q̂ = LN(FFN(Q') + Q')` with
/// `FFN(x) = ReLU(x W_3) W_4`.
pub fn transformer_block(
    tape: &mut Tape<'_>,
    q: Var,
    kv: Var,
    p: &BlockParams<Var>,
    mut drop: Option<&mut Dropout>,
) -> Result<Var> {
    let attn = multi_head_attention(tape, q, kv, &p.mha, drop.as_deref_mut())?;
    let res = tape.add(attn, q)?;
    let q1 = tape.layer_norm(res, p.ffn.ln1_gain, p.ffn.ln1_bias, LAYER_NORM_EPS)?;
    let h = tape.matmul(q1, p.ffn.w_3)?;
    let h = tape.relu(h);
    let ff = tape.matmul(h, p.ffn.w_4)?;
    let ff = dropout(tape, ff, drop)?;
    let res = tape.add(ff, q1)?;
    tape.layer_norm(res, p.ffn.ln2_gain, p.ffn.ln2_bias, LAYER_NORM_EPS)
}
