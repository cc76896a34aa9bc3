//! Within-modality cross-scale enhancement and the simple initial fusion.
//!
//! Each modality yields three token matrices `f3, f4, f5` (strides 4, 8, 16,
//! shared channel count). Enhancement runs coarse to fine, every step being
//! one decoder block whose memory is the sequence concatenation of the other
//! two scales:
//!
//! ```text
//! f5e = TE(f5, [f3; f4])
//! f4e = TE(f4, [f3; f5e])
//! f3e = TE(f3, [f4e; f5e])
//! ```

use crate::autodiff::{Tape, Var};
use crate::decoder::DecoderBlock;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

/// Three scales of one modality as token matrices, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub modality: Modality,
    /// `f3, f4, f5`, each `n_i×c`.
    pub tokens: [Var; 3],
    /// `(h_i, w_i)` per scale.
    pub dims: [(usize, usize); 3],
}

impl FeaturePyramid {
    pub fn token_counts(&self) -> [usize; 3] {
        self.dims.map(|(h, w)| h * w)
    }

    /// Check channel agreement and the 2× stride relation between scales.
    pub fn validate<F: Element>(&self, tape: &Tape<F>) -> Result<usize> {
        let c = tape.shape(self.tokens[0])[1];
        for (i, (&t, &(h, w))) in self.tokens.iter().zip(&self.dims).enumerate() {
            if tape.shape(t) != [h * w, c] {
                return Err(Error::shape("pyramid", tape.shape(t), &[h * w, c]));
            }
            if i > 0 {
                let (ph, pw) = self.dims[i - 1];
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::shape("pyramid: scale ratio", &[ph, pw], &[h, w]));
                }
            }
        }
        Ok(c)
    }
}

/// Enhanced pyramid; shapes equal the source pyramid's.
pub type EnhancedPyramid = FeaturePyramid;

/// Per-scale positional encodings recorded as constants.
#[derive(Clone, Copy, Debug)]
pub struct ScaleEncodings {
    pub pos: [Var; 3],
}

impl ScaleEncodings {
    pub fn record<F: Element>(tape: &mut Tape<F>, tables: &[Tensor<F>; 3]) -> Self {
        Self {
            pos: [
                tape.constant(tables[0].clone()),
                tape.constant(tables[1].clone()),
                tape.constant(tables[2].clone()),
            ],
        }
    }
}

/// 1×1 convolutions bringing the three raw backbone maps to `c` channels.
#[derive(Clone, Debug)]
pub struct Projection {
    pub convs: [Conv; 3],
}

impl Projection {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_>,
        name: &str,
        in_channels: [usize; 3],
        channels: usize,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore<F>, init: &mut Init<'_>, i: usize| {
            Conv::new(store, init, &format!("{name}.s{}", i + 3), in_channels[i], channels, 1)
        };
        Ok(Self {
            convs: [mk(store, init, 0)?, mk(store, init, 1)?, mk(store, init, 2)?],
        })
    }

    /// Project `c_i×h_i×w_i` maps and flatten them to tokens.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        modality: Modality,
        raw: [Var; 3],
    ) -> Result<FeaturePyramid> {
        let mut tokens = [raw[0]; 3];
        let mut dims = [(0, 0); 3];
        for i in 0..3 {
            let m = self.convs[i].forward(tape, p, raw[i])?;
            let (_, h, w) = tape.value(m).dims3("project")?;
            dims[i] = (h, w);
            tokens[i] = tape.map_to_tokens(m)?;
        }
        let pyr = FeaturePyramid { modality, tokens, dims };
        pyr.validate(tape)?;
        Ok(pyr)
    }
}

/// The three enhancement blocks of one modality stream.
#[derive(Clone, Debug)]
pub struct Enhancer {
    pub te5: DecoderBlock,
    pub te4: DecoderBlock,
    pub te3: DecoderBlock,
}

impl Enhancer {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_>,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            te5: DecoderBlock::new(store, init, &format!("{name}.te5"), channels, heads)?,
            te4: DecoderBlock::new(store, init, &format!("{name}.te4"), channels, heads)?,
            te3: DecoderBlock::new(store, init, &format!("{name}.te3"), channels, heads)?,
        })
    }
}

/// One enhancement step: refine `target` with the concatenation of `others`.
#[allow(clippy::too_many_arguments)]
pub fn te_block<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    block: &DecoderBlock,
    target: Var,
    pos_target: Var,
    others: &[Var],
    pos_others: &[Var],
) -> Result<Var> {
    let memory = tape.concat_rows(others)?;
    let memory_pos = tape.concat_rows(pos_others)?;
    block.forward(tape, p, target, memory, pos_target, memory_pos)
}

/// Progressive coarse-to-fine enhancement.
pub fn enhance_modality<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    enhancer: &Enhancer,
    pyr: &FeaturePyramid,
    enc: &ScaleEncodings,
) -> Result<EnhancedPyramid> {
    pyr.validate(tape)?;
    let [f3, f4, f5] = pyr.tokens;
    let [p3, p4, p5] = enc.pos;
    let f5e = te_block(tape, p, &enhancer.te5, f5, p5, &[f3, f4], &[p3, p4])?;
    let f4e = te_block(tape, p, &enhancer.te4, f4, p4, &[f3, f5e], &[p3, p5])?;
    let f3e = te_block(tape, p, &enhancer.te3, f3, p3, &[f4e, f5e], &[p4, p5])?;
    Ok(FeaturePyramid {
        tokens: [f3e, f4e, f5e],
        ..pyr.clone()
    })
}

/// Ablation wiring: each finer scale sees only the raw other scales.
pub fn enhance_modality_nonprogressive<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    enhancer: &Enhancer,
    pyr: &FeaturePyramid,
    enc: &ScaleEncodings,
) -> Result<EnhancedPyramid> {
    pyr.validate(tape)?;
    let [f3, f4, f5] = pyr.tokens;
    let [p3, p4, p5] = enc.pos;
    let f5e = te_block(tape, p, &enhancer.te5, f5, p5, &[f3, f4], &[p3, p4])?;
    let f4e = te_block(tape, p, &enhancer.te4, f4, p4, &[f3, f5], &[p3, p5])?;
    let f3e = te_block(tape, p, &enhancer.te3, f3, p3, &[f4, f5], &[p4, p5])?;
    Ok(FeaturePyramid {
        tokens: [f3e, f4e, f5e],
        ..pyr.clone()
    })
}

/// `f3 + up2(f4) + up4(f5)` as an `n3×c` token matrix.
pub fn multi_scale_sum<F: Element>(tape: &mut Tape<F>, pyr: &FeaturePyramid) -> Result<Var> {
    let [(h3, w3), (h4, w4), (h5, w5)] = pyr.dims;
    let m4 = tape.tokens_to_map(pyr.tokens[1], h4, w4)?;
    let m5 = tape.tokens_to_map(pyr.tokens[2], h5, w5)?;
    let u4 = tape.upsample(m4, 2)?;
    let u5 = tape.upsample(m5, 4)?;
    let t4 = tape.map_to_tokens(u4)?;
    let t5 = tape.map_to_tokens(u5)?;
    if tape.shape(t4)[0] != h3 * w3 {
        return Err(Error::shape("multi_scale_sum", &[h3, w3], &[h4 * 2, w4 * 2]));
    }
    let s = tape.add(pyr.tokens[0], t4)?;
    tape.add(s, t5)
}

/// `f_init = f_ms(rgb) + f_ms(depth)`.
pub fn initial_fusion<F: Element>(tape: &mut Tape<F>, rgb: &EnhancedPyramid, depth: &EnhancedPyramid) -> Result<Var> {
    if rgb.dims != depth.dims {
        return Err(Error::shape(
            "initial_fusion",
            &[rgb.dims[0].0, rgb.dims[0].1],
            &[depth.dims[0].0, depth.dims[0].1],
        ));
    }
    let a = multi_scale_sum(tape, rgb)?;
    let b = multi_scale_sum(tape, depth)?;
    tape.add(a, b)
}

/// 1×1 convolution to one channel followed by a sigmoid: `n×c` tokens on an
/// `h×w` grid to a `1×h×w` probability map.
pub fn classify<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    classifier: &Conv,
    tokens: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let map = tape.tokens_to_map(tokens, h, w)?;
    let logits = classifier.forward(tape, p, map)?;
    Ok(tape.sigmoid(logits))
}

/// Clamp used by every binary cross-entropy term.
pub const BCE_EPS: f64 = 1e-7;

/// Mean BCE of a `1×h×w` probability map against a same-shape ground truth.
pub fn bce_loss<F: Element>(tape: &mut Tape<F>, prob: Var, gt: &Tensor<F>) -> Result<Var> {
    tape.bce(prob, gt, F::of(BCE_EPS))
}
