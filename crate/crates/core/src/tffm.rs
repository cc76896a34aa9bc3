//! Global fusion over both modalities and all scales.
//!
//! The memory is the plain sequence concatenation of the six enhanced token
//! matrices, kept at their own resolutions. A stack of decoder blocks refines
//! the fused finest-scale features, and one classifier shared by every block
//! turns each intermediate result into a saliency map.

use std::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::decoder::DecoderBlock;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv};
use crate::tensor::{Element, Tensor};
use crate::twfem::{bce_loss, classify, EnhancedPyramid, ScaleEncodings};

/// Concatenated two-stream memory, `[rgb f3e; f4e; f5e; depth f3e; f4e; f5e]`.
#[derive(Clone, Debug)]
pub struct FusionMemory {
    pub tokens: Var,
    pub pos: Var,
    /// Row ranges of the six segments, in layout order.
    pub segments: Vec<Range<usize>>,
}

impl FusionMemory {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Refined features `f_o^0..=f_o^T` and predictions `P_o^1..=P_o^T`.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub features: Vec<Var>,
    /// `1×h3×w3` probability maps at feature resolution.
    pub predictions: Vec<Var>,
}

pub fn build_memory<F: Element>(
    tape: &mut Tape<F>,
    rgb: &EnhancedPyramid,
    depth: &EnhancedPyramid,
    enc: &ScaleEncodings,
) -> Result<FusionMemory> {
    let c = rgb.validate(tape)?;
    let cd = depth.validate(tape)?;
    if c != cd {
        return Err(Error::shape("build_memory: channels", &[c], &[cd]));
    }
    let mut parts = Vec::with_capacity(6);
    let mut pos = Vec::with_capacity(6);
    let mut segments = Vec::with_capacity(6);
    let mut start = 0;
    for pyr in [rgb, depth] {
        for i in 0..3 {
            let n = tape.shape(pyr.tokens[i])[0];
            if tape.shape(enc.pos[i]) != [n, c] {
                return Err(Error::shape("build_memory: encoding", tape.shape(enc.pos[i]), &[n, c]));
            }
            parts.push(pyr.tokens[i]);
            pos.push(enc.pos[i]);
            segments.push(start..start + n);
            start += n;
        }
    }
    Ok(FusionMemory {
        tokens: tape.concat_rows(&parts)?,
        pos: tape.concat_rows(&pos)?,
        segments,
    })
}

/// One fusion step: self-attention over `f_prev`, cross-attention into the memory.
pub fn tf_block<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    block: &DecoderBlock,
    f_prev: Var,
    pos3: Var,
    mem: &FusionMemory,
) -> Result<Var> {
    block.forward(tape, p, f_prev, mem.tokens, pos3, mem.pos)
}

/// Run the stack; every block's output goes through the same `classifier`.
#[allow(clippy::too_many_arguments)]
pub fn fuse<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    blocks: &[DecoderBlock],
    classifier: &Conv,
    f_init: Var,
    pos3: Var,
    mem: &FusionMemory,
    (h3, w3): (usize, usize),
) -> Result<FusionState> {
    let mut features = vec![f_init];
    let mut predictions = Vec::with_capacity(blocks.len());
    for block in blocks {
        let prev = *features.last().expect("f_o^0 present");
        let f = tf_block(tape, p, block, prev, pos3, mem)?;
        predictions.push(classify(tape, p, classifier, f, h3, w3)?);
        features.push(f);
    }
    Ok(FusionState { features, predictions })
}

/// Sum over blocks of the per-map mean BCE. Empty input gives a zero constant.
pub fn final_loss<F: Element>(tape: &mut Tape<F>, predictions: &[Var], gt: &Tensor<F>) -> Result<Var> {
    if predictions.is_empty() {
        log::warn!("final_loss: no fusion blocks, loss is zero");
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let mut total = bce_loss(tape, predictions[0], gt)?;
    for &pred in &predictions[1..] {
        let l = bce_loss(tape, pred, gt)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::decoder::sine_positional_encoding;
    use crate::gradcheck::{check, GradCheckOptions};
    use crate::params::{Init, ParamStore};
    use crate::twfem::{FeaturePyramid, Modality};

    const C: usize = 8;
    const DIMS: [(usize, usize); 3] = [(4, 4), (2, 2), (1, 1)];

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    fn tables() -> [Tensor<f64>; 3] {
        DIMS.map(|(h, w)| sine_positional_encoding(h, w, C).unwrap())
    }

    fn pyramid(t: &mut Tape<f64>, modality: Modality, seed: u64) -> FeaturePyramid {
        FeaturePyramid {
            modality,
            tokens: [
                t.constant(random(&[16, C], seed)),
                t.constant(random(&[4, C], seed + 1)),
                t.constant(random(&[1, C], seed + 2)),
            ],
            dims: DIMS,
        }
    }

    struct Stack {
        store: ParamStore<f64>,
        blocks: Vec<DecoderBlock>,
        classifier: Conv,
    }

    fn stack(t_blocks: usize, seed: u64) -> Stack {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let blocks = (0..t_blocks)
            .map(|i| DecoderBlock::new(&mut store, &mut init, &format!("tf{i}"), C, 2).unwrap())
            .collect();
        let classifier = Conv::new(&mut store, &mut init, "cls", C, 1, 1).unwrap();
        Stack {
            store,
            blocks,
            classifier,
        }
    }

    #[test]
    fn memory_layout() {
        let mut t = Tape::new();
        let enc = ScaleEncodings::record(&mut t, &tables());
        let r = pyramid(&mut t, Modality::Rgb, 1);
        let d = pyramid(&mut t, Modality::Depth, 10);
        let mem = build_memory(&mut t, &r, &d, &enc).unwrap();
        assert_eq!(mem.len(), 2 * 21);
        assert_eq!(t.shape(mem.tokens), &[42, C]);
        assert_eq!(t.shape(mem.pos), &[42, C]);
        let mut expect = 0;
        for (seg, src) in mem.segments.iter().zip(r.tokens.iter().chain(&d.tokens)) {
            assert_eq!(seg.start, expect);
            expect = seg.end;
            let rows = &t.value(mem.tokens).data()[seg.start * C..seg.end * C];
            assert_eq!(rows, t.value(*src).data());
        }
        assert_eq!(expect, 42);
        // both modalities carry the same per-scale encodings
        let pos = t.value(mem.pos).data();
        assert_eq!(&pos[..21 * C], &pos[21 * C..]);
    }

    #[test]
    fn memory_channel_mismatch() {
        let mut t = Tape::new();
        let enc = ScaleEncodings::record(&mut t, &tables());
        let r = pyramid(&mut t, Modality::Rgb, 1);
        let d = FeaturePyramid {
            modality: Modality::Depth,
            tokens: [
                t.constant(random(&[16, 4], 2)),
                t.constant(random(&[4, 4], 3)),
                t.constant(random(&[1, 4], 4)),
            ],
            dims: DIMS,
        };
        assert!(matches!(build_memory(&mut t, &r, &d, &enc), Err(Error::Shape { .. })));
    }

    #[test]
    fn memory_lengths_at_both_scales() {
        for (h3, want) in [(16usize, 672usize), (64, 10752)] {
            let n345 = h3 * h3 + (h3 / 2) * (h3 / 2) + (h3 / 4) * (h3 / 4);
            assert_eq!(2 * n345, want);
        }
    }

    #[test]
    fn zero_blocks_return_init() {
        let s = stack(0, 1);
        let mut t = Tape::new();
        let p = s.store.bind(&mut t, false);
        let enc = ScaleEncodings::record(&mut t, &tables());
        let r = pyramid(&mut t, Modality::Rgb, 1);
        let mem = build_memory(&mut t, &r, &r, &enc).unwrap();
        let st = fuse(
            &mut t,
            &p,
            &s.blocks,
            &s.classifier,
            r.tokens[0],
            enc.pos[0],
            &mem,
            (4, 4),
        )
        .unwrap();
        assert!(st.predictions.is_empty());
        assert_eq!(st.features, vec![r.tokens[0]]);
        let gt = Tensor::zeros(&[1, 4, 4]);
        let l = final_loss(&mut t, &st.predictions, &gt).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
    }

    // Sequential unrolled blocks and an explicit classifier.
    #[test]
    fn stack_matches_unrolled_oracle() {
        let s = stack(4, 2);
        let mut t = Tape::new();
        let p = s.store.bind(&mut t, false);
        let enc = ScaleEncodings::record(&mut t, &tables());
        let r = pyramid(&mut t, Modality::Rgb, 3);
        let d = pyramid(&mut t, Modality::Depth, 30);
        let mem = build_memory(&mut t, &r, &d, &enc).unwrap();
        let f0 = t.constant(random(&[16, C], 99));
        let st = fuse(&mut t, &p, &s.blocks, &s.classifier, f0, enc.pos[0], &mem, (4, 4)).unwrap();
        assert_eq!(st.features.len(), 5);
        assert_eq!(st.predictions.len(), 4);

        let mut f = f0;
        for b in &s.blocks {
            f = b.forward(&mut t, &p, f, mem.tokens, enc.pos[0], mem.pos).unwrap();
        }
        assert_eq!(t.value(f), t.value(st.features[4]));

        // classifier by hand: sigmoid(w·f + b) per token
        let w = s.store.get(s.classifier.w).data().to_vec();
        let b = s.store.get(s.classifier.b).data()[0];
        let fv = t.value(f).data();
        let pred = t.value(st.predictions[3]);
        assert_eq!(pred.shape(), &[1, 4, 4]);
        for pos in 0..16 {
            let z: f64 = (0..C).map(|ch| w[ch] * fv[pos * C + ch]).sum::<f64>() + b;
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((pred.data()[pos] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_is_shared() {
        let s = stack(2, 3);
        // one classifier in the registry, used by both predictions
        assert_eq!(s.store.names().iter().filter(|n| n.starts_with("cls")).count(), 2);
        let mut t = Tape::new();
        let p = s.store.bind(&mut t, true);
        let enc = ScaleEncodings::record(&mut t, &tables());
        let r = pyramid(&mut t, Modality::Rgb, 5);
        let mem = build_memory(&mut t, &r, &r, &enc).unwrap();
        let st = fuse(
            &mut t,
            &p,
            &s.blocks,
            &s.classifier,
            r.tokens[0],
            enc.pos[0],
            &mem,
            (4, 4),
        )
        .unwrap();
        assert_eq!(st.predictions.len(), 2);
        // gradient of the second map alone still reaches the shared weights
        let l = t.sum(st.predictions[1]);
        let g = t.backward(l).unwrap();
        let gw = g.get(p.var(s.classifier.w)).unwrap();
        assert!(gw.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn final_loss_examples() {
        let mut t = Tape::<f64>::new();
        let gt = random(&[1, 4, 4], 7).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        for n in [1usize, 3] {
            let half: Vec<Var> = (0..n).map(|_| t.constant(Tensor::full(&[1, 4, 4], 0.5))).collect();
            let l = final_loss(&mut t, &half, &gt).unwrap();
            assert!((t.value(l).data()[0] - n as f64 * std::f64::consts::LN_2).abs() < 1e-12);
            let exact: Vec<Var> = (0..n).map(|_| t.constant(gt.clone())).collect();
            let l = final_loss(&mut t, &exact, &gt).unwrap();
            assert!(t.value(l).data()[0] < n as f64 * 1e-3);
        }
        let maps: Vec<Tensor<f64>> = (0..3)
            .map(|i| random(&[1, 4, 4], 20 + i).map(|v| 0.5 + 0.4 * v))
            .collect();
        let want: f64 = maps
            .iter()
            .map(|m| {
                m.data()
                    .iter()
                    .zip(gt.data())
                    .map(|(p, s)| -(s * p.ln() + (1.0 - s) * (1.0 - p).ln()))
                    .sum::<f64>()
                    / 16.0
            })
            .sum();
        let vars: Vec<Var> = maps.into_iter().map(|m| t.constant(m)).collect();
        let l = final_loss(&mut t, &vars, &gt).unwrap();
        assert!((t.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn query_permutation_equivariance() {
        let s = stack(2, 4);
        let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let permute = |x: &Tensor<f64>| {
            let data: Vec<f64> = perm
                .iter()
                .flat_map(|&r| x.data()[r * C..(r + 1) * C].to_vec())
                .collect();
            Tensor::new(&[16, C], data).unwrap()
        };
        let run = |permuted: bool| {
            let mut t = Tape::new();
            let p = s.store.bind(&mut t, false);
            let enc = ScaleEncodings::record(&mut t, &tables());
            let r = pyramid(&mut t, Modality::Rgb, 11);
            let mem = build_memory(&mut t, &r, &r, &enc).unwrap();
            let mut f0 = random(&[16, C], 12);
            let mut p3 = t.value(enc.pos[0]).clone();
            if permuted {
                f0 = permute(&f0);
                p3 = permute(&p3);
            }
            let f0 = t.constant(f0);
            let p3 = t.constant(p3);
            let st = fuse(&mut t, &p, &s.blocks, &s.classifier, f0, p3, &mem, (4, 4)).unwrap();
            (t.value(st.features[2]).clone(), t.value(st.predictions[1]).clone())
        };
        let (f, pred) = run(false);
        let (fp, predp) = run(true);
        assert!(permute(&f).max_abs_diff(&fp) < 1e-5);
        for (i, &r) in perm.iter().enumerate() {
            assert!((pred.data()[r] - predp.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn memory_is_never_resampled() {
        let s = stack(2, 5);
        let mut t = Tape::new();
        let p = s.store.bind(&mut t, false);
        let enc = ScaleEncodings::record(&mut t, &tables());
        let r = pyramid(&mut t, Modality::Rgb, 13);
        let d = pyramid(&mut t, Modality::Depth, 14);
        let mark = t.len();
        let mem = build_memory(&mut t, &r, &d, &enc).unwrap();
        let _ = fuse(
            &mut t,
            &p,
            &s.blocks,
            &s.classifier,
            r.tokens[0],
            enc.pos[0],
            &mem,
            (4, 4),
        )
        .unwrap();
        let heads = 2;
        let bound = (mem.len() * C).max(C * C) * heads;
        assert!(
            t.max_buffer_since(mark) <= bound,
            "{} > {bound}",
            t.max_buffer_since(mark)
        );
    }

    #[test]
    fn two_block_stack_gradients() {
        let s = stack(2, 9);
        let n = s.store.len();
        let mut inputs = s.store.values().to_vec();
        for i in 0..6 {
            inputs.push(random(&[[16, 4, 1][i % 3], C], 40 + i as u64));
        }
        let gt = random(&[1, 4, 4], 50).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let tabs = tables();
        let r = check("tffm", &inputs, GradCheckOptions::default(), |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let enc = ScaleEncodings::record(t, &tabs);
            let rgb = FeaturePyramid {
                modality: Modality::Rgb,
                tokens: [v[n], v[n + 1], v[n + 2]],
                dims: DIMS,
            };
            let depth = FeaturePyramid {
                modality: Modality::Depth,
                tokens: [v[n + 3], v[n + 4], v[n + 5]],
                dims: DIMS,
            };
            let mem = build_memory(t, &rgb, &depth, &enc)?;
            let f0 = t.add(v[n], v[n + 3])?;
            let st = fuse(t, &p, &s.blocks, &s.classifier, f0, enc.pos[0], &mem, (4, 4))?;
            final_loss(t, &st.predictions, &gt)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
