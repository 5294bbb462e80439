//! Per-stream context state and key/value/query assembly.
//!
//! At step `t` the keys (and values) are
//!
//! ```text
//! t <= k : [E+PE(0), z_1 .. z_{t-1}, P_t+PE(k)]        (t+1 rows)
//! t >  k : [z_{t-k} .. z_{t-1}, P_t+PE(k)]             (k+1 rows)
//! ```
//!
//! and the query is `f_t W_f + PE(k+1)`. Visual contexts
//! `z_t = Concat(Q_t, c_t W_c) W_o` are stored without an extra encoding,
//! since `Q_t` already carries one. The context embedding follows
//! `P_{t+1} = l2(ReLU(Concat(P_t, c_t) W_1) W_2)`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{ActionProbabilities, SimOn, Weights};
use crate::nn::positional_encoding;
use crate::tensor::{Tape, Tensor, Var, L2_NORM_EPS};
use std::collections::VecDeque;

/// A stored past visual context together with the detached inputs it was
/// built from.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualContext {
    pub z: Tensor,
    pub q: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextState {
    t: usize,
    k: usize,
    p: Tensor,
    /// `(P_{t-1}, c_{t-1})`; `None` while `P_t` is still the learned `P_1`.
    p_source: Option<(Tensor, Tensor)>,
    ring: VecDeque<VisualContext>,
}

impl ContextState {
    /// Fresh state at `t = 1` with `P_t = P_1` and an empty ring.
    pub fn new(model: &SimOn) -> Self {
        let k = model.config.k;
        ContextState {
            t: 1,
            k,
            p: model.params.p_1.value.clone(),
            p_source: None,
            ring: VecDeque::with_capacity(k),
        }
    }

    /// 1-based step the next prediction belongs to.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Whether the bootstrap embedding `E` is still a key row.
    pub fn e_active(&self) -> bool {
        self.t <= self.k
    }

    pub fn context_embedding(&self) -> &Tensor {
        &self.p
    }

    pub fn ring(&self) -> impl Iterator<Item = &VisualContext> {
        self.ring.iter()
    }

    pub fn ring_len(&self) -> usize {
        self.ring.len()
    }

    /// Rows the next assembly will produce.
    pub fn key_count(&self) -> usize {
        self.ring.len() + 1 + usize::from(self.e_active())
    }

    /// Bytes held by the state's buffers.
    pub fn memory_bytes(&self) -> usize {
        let ring: usize = self.ring.iter().map(|v| v.z.len() + v.q.len() + v.c.len()).sum();
        let src = self.p_source.as_ref().map_or(0, |(p, c)| p.len() + c.len());
        (ring + src + self.p.len()) * std::mem::size_of::<f64>()
    }

    /// Pushes `z_t`, rolls the context embedding forward and moves to `t+1`.
    /// `c_t` must be the prediction made at the current step.
    pub fn advance(&mut self, q: &Tensor, c_t: &ActionProbabilities, model: &SimOn) -> Result<()> {
        if c_t.t + 1 != self.t {
            return Err(Error::Protocol(format!(
                "advance at step {} received prediction for chunk {}",
                self.t, c_t.t
            )));
        }
        let c = Tensor::row(c_t.probs.clone());
        let z = make_visual_context(q, &c_t.probs, model)?;
        let next_p = update_context_embedding(&self.p, &c_t.probs, model)?;
        if self.ring.len() == self.k {
            self.ring.pop_front();
        }
        self.ring.push_back(VisualContext { z, q: q.clone(), c: c.clone() });
        let prev = std::mem::replace(&mut self.p, next_p);
        self.p_source = Some((prev, c));
        self.t += 1;
        Ok(())
    }
}

impl ContextState {
    /// Copy whose stored `z` and `P` are rebuilt from their detached inputs
    /// with `model`'s weights.
    #[cfg(test)]
    pub(crate) fn refreshed(&self, model: &SimOn) -> Result<ContextState> {
        let mut out = self.clone();
        for ctx in out.ring.iter_mut() {
            ctx.z = make_visual_context(&ctx.q, ctx.c.data(), model)?;
        }
        out.p = match &self.p_source {
            None => model.params.p_1.value.clone(),
            Some((prev, c)) => update_context_embedding(prev, c.data(), model)?,
        };
        Ok(out)
    }
}

/// `P_{t+1} = l2(ReLU(Concat(P_t, c_t) W_1) W_2)`.
pub fn update_context_embedding(p: &Tensor, c: &[f64], model: &SimOn) -> Result<Tensor> {
    let w = &model.params;
    let mut tape = Tape::new();
    let vp = tape.constant_ref(p);
    let vc = tape.constant(Tensor::row(c.to_vec()));
    let w1 = tape.constant_ref(&w.w_1.value);
    let w2 = tape.constant_ref(&w.w_2.value);
    let out = context_embedding_on(&mut tape, w1, w2, vp, vc)?;
    Ok(tape.value(out).clone())
}

/// `z = Concat(q, c W_c) W_o`.
pub fn make_visual_context(q: &Tensor, c: &[f64], model: &SimOn) -> Result<Tensor> {
    let w = &model.params;
    let mut tape = Tape::new();
    let vq = tape.constant_ref(q);
    let vc = tape.constant(Tensor::row(c.to_vec()));
    let wc = tape.constant_ref(&w.w_c.value);
    let wo = tape.constant_ref(&w.w_o.value);
    let out = visual_context_on(&mut tape, wc, wo, vq, vc)?;
    Ok(tape.value(out).clone())
}

/// Keys/values and query for the state's current step, as plain tensors.
pub fn assemble_kv_q(state: &ContextState, f_t: &[f64], model: &SimOn) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let w = model.bind_constants(&mut tape);
    let rows = rows_from_state(&mut tape, &w, state, ContextSource::Stored)?;
    let f = feature_var(&mut tape, &model.config, f_t)?;
    let (kv, q) = assemble_on(&mut tape, &model.config, &w, &rows, f)?;
    Ok((tape.value(kv).clone(), tape.value(q).clone()))
}

pub(crate) fn context_embedding_on(tape: &mut Tape<'_>, w1: Var, w2: Var, p: Var, c: Var) -> Result<Var> {
    let cat = tape.concat_cols(&[p, c])?;
    let h = tape.matmul(cat, w1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w2)?;
    Ok(tape.l2_normalize(out, L2_NORM_EPS))
}

pub(crate) fn visual_context_on(tape: &mut Tape<'_>, wc: Var, wo: Var, q: Var, c: Var) -> Result<Var> {
    let cp = tape.matmul(c, wc)?;
    let cat = tape.concat_cols(&[q, cp])?;
    tape.matmul(cat, wo)
}

/// Key-row sources before positional encoding.
pub(crate) struct KvRows {
    pub e: Option<Var>,
    pub z: Vec<Var>,
    pub p: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ContextSource {
    /// Use stored `z` and `P` values.
    Stored,
    /// Rebuild `z` and `P` on the tape from their detached inputs so the
    /// context projections receive gradients. Values are bit-identical to
    /// [`ContextSource::Stored`].
    Recompute,
}

pub(crate) fn rows_from_state<'a>(
    tape: &mut Tape<'a>,
    w: &Weights<Var>,
    state: &'a ContextState,
    source: ContextSource,
) -> Result<KvRows> {
    let e = state.e_active().then_some(w.e);
    let mut z = Vec::with_capacity(state.ring.len());
    for ctx in &state.ring {
        let row = match source {
            ContextSource::Stored => tape.constant_ref(&ctx.z),
            ContextSource::Recompute => {
                let q = tape.constant_ref(&ctx.q);
                let c = tape.constant_ref(&ctx.c);
                visual_context_on(tape, w.w_c, w.w_o, q, c)?
            }
        };
        z.push(row);
    }
    let p = match (&state.p_source, source) {
        (None, _) => w.p_1,
        (Some(_), ContextSource::Stored) => tape.constant_ref(&state.p),
        (Some((prev, c)), ContextSource::Recompute) => {
            let vp = tape.constant_ref(prev);
            let vc = tape.constant_ref(c);
            context_embedding_on(tape, w.w_1, w.w_2, vp, vc)?
        }
    };
    Ok(KvRows { e, z, p })
}

pub(crate) fn feature_var(tape: &mut Tape<'_>, cfg: &ModelConfig, f_t: &[f64]) -> Result<Var> {
    if f_t.len() != cfg.d_in {
        return Err(Error::Input(format!(
            "feature width {} does not match d_in {}",
            f_t.len(),
            cfg.d_in
        )));
    }
    Ok(tape.constant(Tensor::row(f_t.to_vec())))
}

/// Stacks the key rows (adding encodings to `E` and `P`) and projects the
/// query.
pub(crate) fn assemble_on(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    rows: &KvRows,
    f: Var,
) -> Result<(Var, Var)> {
    let d = cfg.d_model;
    let mut kv_rows = Vec::with_capacity(rows.z.len() + 2);
    if let Some(e) = rows.e {
        let pe = tape.constant(positional_encoding(0, d));
        kv_rows.push(tape.add(e, pe)?);
    }
    kv_rows.extend_from_slice(&rows.z);
    let pe_p = tape.constant(positional_encoding(cfg.k, d));
    kv_rows.push(tape.add(rows.p, pe_p)?);
    let kv = tape.stack_rows(&kv_rows)?;

    let proj = tape.matmul(f, w.w_f)?;
    let pe_q = tape.constant(positional_encoding(cfg.k + 1, d));
    let q = tape.add(proj, pe_q)?;
    Ok((kv, q))
}
