//! Two-stream network: backbones, enhancement, initial fusion and the fusion stack.
//!
//! Each stream is a small VGG-like backbone trained from scratch whose three
//! stages land on strides 4, 8 and 16. Depth enters as a single channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decoder::{sine_positional_encoding, DecoderBlock};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::tffm::{build_memory, fuse};
use crate::twfem::{
    bce_loss, classify, enhance_modality, enhance_modality_nonprogressive, initial_fusion, Enhancer, FeaturePyramid,
    Modality, Projection, ScaleEncodings,
};

/// Output channels of the three backbone stages.
pub const STAGE_WIDTHS: [usize; 3] = [32, 64, 128];

/// Total downsampling of the coarsest stage.
pub const MAX_STRIDE: usize = 16;

/// Uniform bound for saliency classifier weights, small so that untrained
/// maps start near 0.5 everywhere.
pub const CLASSIFIER_INIT_BOUND: f64 = 1e-2;

/// How each modality's pyramid is refined before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Enhancement {
    /// Coarse-to-fine, each step seeing the already enhanced coarser scales.
    Progressive,
    /// Every scale attends to the raw other scales.
    NonProgressive,
    /// No enhancement; the projected features are fused directly.
    None,
}

impl Enhancement {
    pub fn label(self) -> &'static str {
        match self {
            Enhancement::Progressive => "progressive",
            Enhancement::NonProgressive => "non-progressive",
            Enhancement::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Number of fusion blocks `T`.
    pub fusion_blocks: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub enhancement: Enhancement,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            fusion_blocks: 4,
            heads: 4,
            height: 64,
            width: 64,
            enhancement: Enhancement::Progressive,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Plain-fusion baseline: raw features, initial prediction only.
    pub fn baseline(self) -> Self {
        Self {
            enhancement: Enhancement::None,
            fusion_blocks: 0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || !c.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channels must be a positive multiple of 4, got {c}"
            )));
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide {c} channels",
                self.heads
            )));
        }
        for (what, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % MAX_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "input {what} {v} is not a positive multiple of {MAX_STRIDE}"
                )));
            }
        }
        Ok(())
    }

    /// `(h, w)` of the three feature scales.
    pub fn scale_dims(&self) -> [(usize, usize); 3] {
        [4, 8, 16].map(|s| (self.height / s, self.width / s))
    }

    /// Closed-form parameter count; must agree with the registry.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let backbone = |cin: usize| {
            let [w1, w2, w3] = STAGE_WIDTHS;
            conv(cin, w1, 3) + conv(w1, w1, 3) + conv(w1, w2, 3) + conv(w2, w2, 3) + conv(w2, w3, 3) + conv(w3, w3, 3)
        };
        let projection: usize = STAGE_WIDTHS.iter().map(|&w| conv(w, c, 1)).sum();
        let enhancer = match self.enhancement {
            Enhancement::None => 0,
            _ => 3 * DecoderBlock::param_count(c),
        };
        let stream = projection + enhancer;
        let fusion = self.fusion_blocks * DecoderBlock::param_count(c);
        let fusion_classifier = if self.fusion_blocks > 0 { conv(c, 1, 1) } else { 0 };
        backbone(3) + backbone(1) + 2 * stream + conv(c, 1, 1) + fusion + fusion_classifier
    }
}

/// Six 3×3 convolutions in three stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub convs: [Conv; 6],
}

impl Backbone {
    pub fn new<F: Element>(store: &mut ParamStore<F>, init: &mut Init<'_>, name: &str, cin: usize) -> Result<Self> {
        let [w1, w2, w3] = STAGE_WIDTHS;
        let io = [(cin, w1), (w1, w1), (w1, w2), (w2, w2), (w2, w3), (w3, w3)];
        let mut convs = Vec::with_capacity(6);
        for (i, &(a, b)) in io.iter().enumerate() {
            let n = format!("{name}.stage{}.conv{}", i / 2 + 1, i % 2 + 1);
            convs.push(Conv::new(store, init, &n, a, b, 3)?);
        }
        Ok(Self {
            convs: convs.try_into().expect("six convolutions"),
        })
    }

    /// Raw maps at strides 4, 8, 16. The first stage pools after each of its
    /// two convolutions; the later stages convolve twice, then pool once.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, img: Var) -> Result<[Var; 3]> {
        let (_, h, w) = tape.value(img).dims3("backbone")?;
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::Config(format!(
                "backbone input {h}×{w} not divisible by {MAX_STRIDE}"
            )));
        }
        let conv_relu = |tape: &mut Tape<F>, i: usize, x: Var| -> Result<Var> {
            let y = self.convs[i].forward(tape, p, x)?;
            Ok(tape.relu(y))
        };
        let x = conv_relu(tape, 0, img)?;
        let x = tape.max_pool2(x)?;
        let x = conv_relu(tape, 1, x)?;
        let s3 = tape.max_pool2(x)?;
        let x = conv_relu(tape, 2, s3)?;
        let x = conv_relu(tape, 3, x)?;
        let s4 = tape.max_pool2(x)?;
        let x = conv_relu(tape, 4, s4)?;
        let x = conv_relu(tape, 5, x)?;
        let s5 = tape.max_pool2(x)?;
        Ok([s3, s4, s5])
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub modality: Modality,
    pub backbone: Backbone,
    pub projection: Projection,
    pub enhancer: Option<Enhancer>,
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `P_init`, `1×H×W`.
    pub init: Var,
    /// `P_o^1..=P_o^T`, each `1×H×W`.
    pub fused: Vec<Var>,
    /// `f_o^0..=f_o^T` token matrices, `n3×c`.
    pub features: Vec<Var>,
    pub memory_len: usize,
}

impl Predictions {
    /// Output of the last fusion block, or `P_init` without any.
    pub fn final_map(&self) -> Var {
        self.fused.last().copied().unwrap_or(self.init)
    }

    /// `P_init` followed by the fused maps.
    pub fn all_maps(&self) -> Vec<Var> {
        std::iter::once(self.init).chain(self.fused.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub init: Var,
    pub fused: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F: Element> {
    config: ModelConfig,
    store: ParamStore<F>,
    streams: [Stream; 2],
    init_classifier: Conv,
    fusion_blocks: Vec<DecoderBlock>,
    fusion_classifier: Option<Conv>,
    pos_tables: [Tensor<F>; 3],
}

impl<F: Element> Model<F> {
    /// Freshly initialised model, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { rng: &mut rng };

        let stream = |store: &mut ParamStore<F>, init: &mut Init<'_>, modality: Modality, cin: usize| {
            let tag = modality.tag();
            Ok::<_, Error>(Stream {
                modality,
                backbone: Backbone::new(store, init, &format!("{tag}.backbone"), cin)?,
                projection: Projection::new(store, init, &format!("{tag}.proj"), STAGE_WIDTHS, c)?,
                enhancer: match config.enhancement {
                    Enhancement::None => None,
                    _ => Some(Enhancer::new(store, init, &format!("{tag}.twfem"), c, config.heads)?),
                },
            })
        };
        let rgb = stream(&mut store, &mut init, Modality::Rgb, 3)?;
        let depth = stream(&mut store, &mut init, Modality::Depth, 1)?;
        let init_classifier = classifier(&mut store, &mut init, "init.classifier", c)?;
        let fusion_blocks = (0..config.fusion_blocks)
            .map(|t| DecoderBlock::new(&mut store, &mut init, &format!("tffm.block{}", t + 1), c, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let fusion_classifier = match config.fusion_blocks {
            0 => None,
            _ => Some(classifier(&mut store, &mut init, "tffm.classifier", c)?),
        };
        let pos_tables = [
            sine_positional_encoding(config.height / 4, config.width / 4, c)?,
            sine_positional_encoding(config.height / 8, config.width / 8, c)?,
            sine_positional_encoding(config.height / 16, config.width / 16, c)?,
        ];
        Ok(Self {
            config,
            store,
            streams: [rgb, depth],
            init_classifier,
            fusion_blocks,
            fusion_classifier,
            pos_tables,
        })
    }

    /// Model with `config`'s layout whose values come from `store`.
    ///
    /// Names, order and shapes must match the freshly built registry exactly.
    pub fn with_params(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if store.names() != model.store.names() {
            let missing = model.store.names().iter().find(|n| store.id(n).is_none());
            let extra = store.names().iter().find(|n| model.store.id(n).is_none());
            return Err(Error::Format(format!(
                "parameter set does not match the {} layout (missing {:?}, unexpected {:?})",
                config.enhancement.label(),
                missing,
                extra
            )));
        }
        for ((name, want), got) in model.store.iter().zip(store.values()) {
            if want.shape() != got.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn fusion_classifier(&self) -> Option<&Conv> {
        self.fusion_classifier.as_ref()
    }

    pub fn streams(&self) -> &[Stream; 2] {
        &self.streams
    }

    /// Full forward pass for one sample. `rgb` is `3×H×W`, `depth` `1×H×W`.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, rgb: &Tensor<F>, depth: &Tensor<F>) -> Result<Predictions> {
        let (h, w) = (self.config.height, self.config.width);
        if rgb.shape() != [3, h, w] {
            return Err(Error::shape("model input rgb", rgb.shape(), &[3, h, w]));
        }
        if depth.shape() != [1, h, w] {
            return Err(Error::shape("model input depth", depth.shape(), &[1, h, w]));
        }
        let enc = ScaleEncodings::record(tape, &self.pos_tables);
        let inputs = [tape.constant(rgb.clone()), tape.constant(depth.clone())];
        let mut pyramids: Vec<FeaturePyramid> = Vec::with_capacity(2);
        for (stream, &img) in self.streams.iter().zip(&inputs) {
            let raw = stream.backbone.forward(tape, p, img)?;
            let pyr = stream.projection.forward(tape, p, stream.modality, raw)?;
            let pyr = match (&stream.enhancer, self.config.enhancement) {
                (Some(e), Enhancement::Progressive) => enhance_modality(tape, p, e, &pyr, &enc)?,
                (Some(e), Enhancement::NonProgressive) => enhance_modality_nonprogressive(tape, p, e, &pyr, &enc)?,
                _ => pyr,
            };
            pyramids.push(pyr);
        }
        let (h3, w3) = pyramids[0].dims[0];
        let f_init = initial_fusion(tape, &pyramids[0], &pyramids[1])?;
        let p_init = classify(tape, p, &self.init_classifier, f_init, h3, w3)?;
        let init = tape.upsample(p_init, 4)?;

        let (features, fused, memory_len) = match &self.fusion_classifier {
            None => (vec![f_init], Vec::new(), 0),
            Some(cls) => {
                let mem = build_memory(tape, &pyramids[0], &pyramids[1], &enc)?;
                let st = fuse(tape, p, &self.fusion_blocks, cls, f_init, enc.pos[0], &mem, (h3, w3))?;
                let fused = st
                    .predictions
                    .iter()
                    .map(|&m| tape.upsample(m, 4))
                    .collect::<Result<Vec<_>>>()?;
                (st.features, fused, mem.len())
            }
        };
        Ok(Predictions {
            init,
            fused,
            features,
            memory_len,
        })
    }

    /// `L_init`, `L_final` (sum over fusion blocks) and their sum.
    pub fn loss(&self, tape: &mut Tape<F>, preds: &Predictions, gt: &Tensor<F>) -> Result<Losses> {
        let init = bce_loss(tape, preds.init, gt)?;
        let fused = match preds.fused.split_first() {
            None => tape.constant(Tensor::scalar(F::zero())),
            Some((&first, rest)) => {
                let mut acc = bce_loss(tape, first, gt)?;
                for &m in rest {
                    let l = bce_loss(tape, m, gt)?;
                    acc = tape.add(acc, l)?;
                }
                acc
            }
        };
        let total = tape.add(init, fused)?;
        Ok(Losses { init, fused, total })
    }

    /// Inference on one sample: every map (`P_init` first) as `1×H×W` tensors.
    pub fn predict(&self, rgb: &Tensor<F>, depth: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let preds = self.forward(&mut tape, &p, rgb, depth)?;
        Ok(preds.all_maps().into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// The final saliency map of one sample.
    pub fn predict_final(&self, rgb: &Tensor<F>, depth: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.predict(rgb, depth)?.pop().expect("at least P_init"))
    }
}

fn classifier<F: Element>(store: &mut ParamStore<F>, init: &mut Init<'_>, name: &str, c: usize) -> Result<Conv> {
    let conv = Conv::new(store, init, name, c, 1, 1)?;
    *store.get_mut(conv.w) = init.uniform(&[1, c, 1, 1], CLASSIFIER_INIT_BOUND);
    Ok(conv)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn tiny(t: usize, enhancement: Enhancement) -> ModelConfig {
        ModelConfig {
            channels: 8,
            fusion_blocks: t,
            heads: 2,
            height: 32,
            width: 32,
            enhancement,
            seed: 3,
        }
    }

    fn sample(cfg: &ModelConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (cfg.height, cfg.width);
        let mut gen = |c: usize| {
            let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_f64(&[c, h, w], &data).unwrap()
        };
        let rgb = gen(3);
        let depth = gen(1);
        let gt = gen(1).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
        (rgb, depth, gt)
    }

    #[test]
    fn backbone_strides() {
        for (size, want) in [(64usize, [16usize, 8, 4]), (256, [64, 32, 16])] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let bb = Backbone::new(&mut store, &mut Init { rng: &mut rng }, "bb", 1).unwrap();
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let x = t.constant(Tensor::zeros(&[1, size, size]));
            let maps = bb.forward(&mut t, &p, x).unwrap();
            for (m, (&s, &ch)) in maps.iter().zip(want.iter().zip(&STAGE_WIDTHS)) {
                assert_eq!(t.shape(*m), &[ch, s, s]);
                // zero input, zero bias: zero maps
                assert!(t.value(*m).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let base = ModelConfig::default();
        for cfg in [
            ModelConfig { height: 40, ..base },
            ModelConfig { channels: 6, ..base },
            ModelConfig { heads: 3, ..base },
            ModelConfig { heads: 0, ..base },
        ] {
            assert!(matches!(Model::<f32>::new(cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn param_count_formula_matches_registry() {
        for cfg in [
            ModelConfig::default(),
            tiny(0, Enhancement::Progressive),
            tiny(2, Enhancement::NonProgressive),
            tiny(0, Enhancement::None),
            tiny(5, Enhancement::None),
        ] {
            let m = Model::<f32>::new(cfg).unwrap();
            assert_eq!(m.params().numel(), cfg.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn names_are_dotted_and_unique() {
        let m = Model::<f32>::new(tiny(2, Enhancement::Progressive)).unwrap();
        let names = m.params().names();
        assert!(names.contains(&"rgb.backbone.stage2.conv1.w".to_string()));
        assert!(names.contains(&"depth.twfem.te5.ca.q.w".to_string()));
        assert!(names.contains(&"tffm.classifier.w".to_string()));
        let mut sorted = names.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn output_contract_and_determinism() {
        for t in [0usize, 2] {
            let cfg = tiny(t, Enhancement::Progressive);
            let m = Model::<f32>::new(cfg).unwrap();
            let (rgb, depth, _) = sample(&cfg, 1);
            let before = m.params().clone();
            let a = m.predict(&rgb, &depth).unwrap();
            let b = m.predict(&rgb, &depth).unwrap();
            assert_eq!(a.len(), t + 1);
            assert_eq!(a, b);
            for map in &a {
                assert_eq!(map.shape(), &[1, 32, 32]);
                assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert_eq!(m.params().values(), before.values());
        }
    }

    #[test]
    fn depth_path_is_live() {
        let cfg = tiny(2, Enhancement::Progressive);
        let m = Model::<f32>::new(cfg).unwrap();
        let (rgb, depth, _) = sample(&cfg, 2);
        let a = m.predict_final(&rgb, &depth).unwrap();
        let b = m.predict_final(&rgb, &Tensor::zeros(&[1, 32, 32])).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        for t in [0usize, 2, 4] {
            let cfg = tiny(t, Enhancement::Progressive);
            let m = Model::<f32>::new(cfg).unwrap();
            let (rgb, depth, gt) = sample(&cfg, 3);
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape, false);
            let preds = m.forward(&mut tape, &p, &rgb, &depth).unwrap();
            let l = m.loss(&mut tape, &preds, &gt).unwrap();
            let total = tape.value(l.total).data()[0] as f64;
            let want = (t + 1) as f64 * std::f64::consts::LN_2;
            assert!((total - want).abs() < 0.3 * want, "T={t}: {total} vs {want}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for enh in [Enhancement::Progressive, Enhancement::NonProgressive, Enhancement::None] {
            let cfg = tiny(2, enh);
            let m = Model::<f32>::new(cfg).unwrap();
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape, true);
            let mut total = None;
            for s in 0..2 {
                let (rgb, depth, gt) = sample(&cfg, 10 + s);
                let preds = m.forward(&mut tape, &p, &rgb, &depth).unwrap();
                let l = m.loss(&mut tape, &preds, &gt).unwrap().total;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l).unwrap(),
                });
            }
            let g = tape.backward(total.unwrap()).unwrap();
            for (i, name) in m.params().names().iter().enumerate() {
                let grad = g.get(p.vars()[i]).expect("gradient present");
                assert!(grad.data().iter().any(|&v| v != 0.0), "{enh:?}: dead parameter {name}");
            }
        }
    }

    #[test]
    fn baseline_has_no_enhancement_or_fusion() {
        let cfg = tiny(4, Enhancement::Progressive).baseline();
        let m = Model::<f32>::new(cfg).unwrap();
        assert!(m
            .params()
            .names()
            .iter()
            .all(|n| !n.contains("twfem") && !n.starts_with("tffm")));
        let (rgb, depth, _) = sample(&cfg, 4);
        assert_eq!(m.predict(&rgb, &depth).unwrap().len(), 1);
    }

    #[test]
    fn with_params_checks_layout() {
        let prog = Model::<f32>::new(tiny(2, Enhancement::Progressive)).unwrap();
        let again = Model::with_params(tiny(2, Enhancement::NonProgressive), prog.params().clone());
        assert!(again.is_ok());
        let bad = Model::with_params(tiny(2, Enhancement::None), prog.params().clone());
        assert!(matches!(bad, Err(Error::Format(_))));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = tiny(0, Enhancement::None);
        let m = Model::<f32>::new(cfg).unwrap();
        let (rgb, _, _) = sample(&cfg, 5);
        assert!(m.predict(&rgb, &Tensor::zeros(&[1, 16, 32])).is_err());
    }
}
