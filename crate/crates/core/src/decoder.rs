//! Sine positional encodings and the transformer decoder block
//! (self-attention, cross-attention, feed-forward; each followed by a
//! residual add and layer norm).

use std::f64::consts::PI;

use crate::attention::MultiHeadAttention;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Linear, Norm, ParamStore};
use crate::tensor::{Element, Tensor};

pub const POS_TEMPERATURE: f64 = 10000.0;
const POS_NORM_EPS: f64 = 1e-6;

/// 2-D sine encoding for an `h×w` grid as an `(h·w)×c` token matrix.
///
/// Channels `[0, c/2)` encode the row coordinate and `[c/2, c)` the column
/// coordinate. Coordinates are 1-based, normalised to `(0, 2π]`; within each
/// half, channel `k` uses frequency `T^(2⌊k/2⌋/(c/2))` with sine on even and
/// cosine on odd `k`.
pub fn sine_positional_encoding<F: Element>(h: usize, w: usize, c: usize) -> Result<Tensor<F>> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding needs channels divisible by 4, got {c}"
        )));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| POS_TEMPERATURE.powf((2 * (k / 2)) as f64 / half as f64))
        .collect();
    let ny = |y: usize| (y + 1) as f64 / (h as f64 + POS_NORM_EPS) * 2.0 * PI;
    let nx = |x: usize| (x + 1) as f64 / (w as f64 + POS_NORM_EPS) * 2.0 * PI;
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for (coord, _) in [(ny(y), 0), (nx(x), 1)] {
                for (k, f) in freqs.iter().enumerate() {
                    let a = coord / f;
                    data.push(F::of(if k % 2 == 0 { a.sin() } else { a.cos() }));
                }
            }
        }
    }
    Tensor::new(&[h * w, c], data)
}

/// Parameters of one decoder block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_sa: Norm,
    pub norm_ca: Norm,
    pub norm_ff: Norm,
}

/// Hidden width of the feed-forward layer relative to the channel count.
pub const FF_EXPANSION: usize = 2;

impl DecoderBlock {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_>,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        let hidden = FF_EXPANSION * channels;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.sa"), channels, heads)?,
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.ca"), channels, heads)?,
            ff_in: Linear::new(store, init, &format!("{name}.ff1"), channels, hidden)?,
            ff_out: Linear::new(store, init, &format!("{name}.ff2"), hidden, channels)?,
            norm_sa: Norm::new(store, &format!("{name}.ln_sa"), channels)?,
            norm_ca: Norm::new(store, &format!("{name}.ln_ca"), channels)?,
            norm_ff: Norm::new(store, &format!("{name}.ln_ff"), channels)?,
        })
    }

    /// Number of scalars one block holds for `channels`.
    pub fn param_count(channels: usize) -> usize {
        let c = channels;
        let hidden = FF_EXPANSION * c;
        8 * (c * c + c) + (c * hidden + hidden) + (hidden * c + c) + 6 * c
    }

    /// Refine `x` (`n_x×c`) with information from `y` (`n_y×c`).
    ///
    /// Positional encodings are added to queries and keys only; values use
    /// the raw tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        y: Var,
        pos_x: Var,
        pos_y: Var,
    ) -> Result<Var> {
        if tape.shape(x) != tape.shape(pos_x) {
            return Err(Error::shape("decoder: x/pos_x", tape.shape(x), tape.shape(pos_x)));
        }
        if tape.shape(y) != tape.shape(pos_y) {
            return Err(Error::shape("decoder: y/pos_y", tape.shape(y), tape.shape(pos_y)));
        }

        let xq = tape.add(x, pos_x)?;
        let sa = self.self_attn.forward(tape, p, xq, xq, x)?;
        let sa = tape.add(x, sa)?;
        let o_sa = self.norm_sa.forward(tape, p, sa)?;

        let q = tape.add(o_sa, pos_x)?;
        let k = tape.add(y, pos_y)?;
        let ca = self.cross_attn.forward(tape, p, q, k, y)?;
        let ca = tape.add(o_sa, ca)?;
        let o_ca = self.norm_ca.forward(tape, p, ca)?;

        let h = self.ff_in.forward(tape, p, o_ca)?;
        let h = tape.relu(h);
        let f = self.ff_out.forward(tape, p, h)?;
        let f = tape.add(o_ca, f)?;
        self.norm_ff.forward(tape, p, f)
    }
}
