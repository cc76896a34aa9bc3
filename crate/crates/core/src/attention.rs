//! Dot-product attention, efficient (linear) attention and the multi-head wrapper.
//!
//! All inputs are token matrices: one row per position, one column per channel.

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Linear, ParamStore};
use crate::tensor::Element;

/// Validate `Q: n_q×c`, `K: n_p×c`, `V: n_p×c`; returns `(n_q, n_p, c)`.
pub fn check_inputs<F: Element>(tape: &Tape<F>, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize)> {
    let (nq, cq) = tape.value(q).dims2("attention")?;
    let (nk, ck) = tape.value(k).dims2("attention")?;
    let (nv, cv) = tape.value(v).dims2("attention")?;
    if nk != nv || ck != cv {
        return Err(Error::shape("attention: key/value", tape.shape(k), tape.shape(v)));
    }
    if cq != ck {
        return Err(Error::shape("attention: query/key", tape.shape(q), tape.shape(k)));
    }
    Ok((nq, nk, cq))
}

/// `softmax_rows(Q·Kᵀ)·V`, unscaled.
pub fn dot_product_attention<F: Element>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    check_inputs(tape, q, k, v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let weights = tape.softmax(scores, Axis::Row)?;
    tape.matmul(weights, v)
}

/// `softmax_rows(Q)·(softmax_cols(K)ᵀ·V)`.
///
/// The largest intermediate is `max(n_q, n_p)×c`; the context matrix is `c×c`.
pub fn efficient_attention<F: Element>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    check_inputs(tape, q, k, v)?;
    let qs = tape.softmax(q, Axis::Row)?;
    let ks = tape.softmax(k, Axis::Col)?;
    let kst = tape.transpose(ks)?;
    let context = tape.matmul(kst, v)?;
    tape.matmul(qs, context)
}

/// Multi-head efficient attention with biased input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_>,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), channels, channels)?,
            k: Linear::new(store, init, &format!("{name}.k"), channels, channels)?,
            v: Linear::new(store, init, &format!("{name}.v"), channels, channels)?,
            out: Linear::new(store, init, &format!("{name}.out"), channels, channels)?,
            heads,
            channels,
        })
    }

    /// Attend from `query` over `key`/`value`; each head runs efficient
    /// attention on its own `c/heads` channel slice of the projected inputs.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, query: Var, key: Var, value: Var) -> Result<Var> {
        let (_, _, c) = check_inputs(tape, query, key, value)?;
        if c != self.channels {
            return Err(Error::shape("multi_head", tape.shape(query), &[self.channels]));
        }
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let width = c / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * width, width)?;
            let kh = tape.slice_cols(k, h * width, width)?;
            let vh = tape.slice_cols(v, h * width, width)?;
            outs.push(efficient_attention(tape, qh, kh, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.out.forward(tape, p, joined)
    }
}
