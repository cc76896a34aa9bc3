//! Finite-difference checks over every differentiable op and composite block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{dot_product_attention, efficient_attention, MultiHeadAttention};
use crate::autodiff::{Axis, Fault, Tape, Var};
use crate::decoder::{sine_positional_encoding, DecoderBlock};
use crate::error::Result;
use crate::gradcheck::{check, GradCheck, GradCheckOptions};
use crate::model::{Enhancement, Model, ModelConfig};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::tensor::Tensor;
use crate::tffm::{build_memory, final_loss, fuse};
use crate::twfem::{enhance_modality, FeaturePyramid, Modality, ScaleEncodings};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).expect("valid shape")
}

fn probabilities(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| 0.5 + 0.45 * v)
}

fn mask(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Weighted sum with fixed random weights, so every output element matters.
fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = random(t.shape(x), seed);
    let w = t.constant(w);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

/// Tiny full-model configuration used by the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        fusion_blocks: 2,
        heads: 2,
        height: 32,
        width: 32,
        enhancement: Enhancement::Progressive,
        seed: 11,
    }
}

type Unit = (&'static str, Box<dyn Fn(Option<Fault>) -> Result<GradCheck>>);

fn unit<B>(name: &'static str, inputs: Vec<Tensor<f64>>, build: B) -> Unit
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    let run = move |fault: Option<Fault>| {
        check(name, &inputs, GradCheckOptions::default(), |t, v| {
            if let Some(f) = fault {
                t.inject_fault(f);
            }
            build(t, v)
        })
    };
    (name, Box::new(run))
}

fn units() -> Vec<Unit> {
    let mut u: Vec<Unit> = vec![
        unit("matmul", vec![random(&[3, 4], 1), random(&[4, 5], 2)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 3)
        }),
        unit("transpose", vec![random(&[3, 4], 4)], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, 5)
        }),
        unit("add_mul_scale", vec![random(&[2, 3], 6), random(&[2, 3], 7)], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[1])?;
            let c = t.scale(b, 0.7);
            project(t, c, 8)
        }),
        unit("add_bias", vec![random(&[4, 3], 9), random(&[3], 10)], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 11)
        }),
        unit("relu", vec![random(&[4, 5], 12)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 13)
        }),
        unit("sigmoid", vec![random(&[4, 5], 14)], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 15)
        }),
        unit("softmax_rows", vec![random(&[3, 5], 16)], |t, v| {
            let y = t.softmax(v[0], Axis::Row)?;
            project(t, y, 17)
        }),
        unit("softmax_cols", vec![random(&[5, 3], 18)], |t, v| {
            let y = t.softmax(v[0], Axis::Col)?;
            project(t, y, 19)
        }),
        unit(
            "layer_norm",
            vec![random(&[3, 6], 20), random(&[6], 21), random(&[6], 22)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 23)
            },
        ),
        unit(
            "conv2d_3x3",
            vec![random(&[2, 5, 5], 24), random(&[3, 2, 3, 3], 25), random(&[3], 26)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(t, y, 27)
            },
        ),
        unit(
            "conv2d_1x1",
            vec![random(&[4, 3, 3], 28), random(&[2, 4, 1, 1], 29), random(&[2], 30)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
                project(t, y, 31)
            },
        ),
        unit("max_pool2", vec![random(&[2, 4, 6], 32)], |t, v| {
            let y = t.max_pool2(v[0])?;
            project(t, y, 33)
        }),
        unit("upsample_x2", vec![random(&[2, 3, 2], 34)], |t, v| {
            let y = t.upsample(v[0], 2)?;
            project(t, y, 35)
        }),
        unit("upsample_x4", vec![random(&[1, 2, 3], 36)], |t, v| {
            let y = t.upsample(v[0], 4)?;
            project(t, y, 37)
        }),
        unit(
            "concat_slice_reshape",
            vec![random(&[2, 5], 38), random(&[4, 5], 39)],
            |t, v| {
                let rows = t.concat_rows(&[v[0], v[1]])?;
                let cols = t.concat_cols(&[rows, rows])?;
                let s = t.slice_cols(cols, 3, 4)?;
                let r = t.reshape(s, &[4, 6])?;
                project(t, r, 40)
            },
        ),
        unit("tokens_maps", vec![random(&[3, 2, 4], 41)], |t, v| {
            let tok = t.map_to_tokens(v[0])?;
            let sq = t.mul(tok, tok)?;
            let m = t.tokens_to_map(sq, 2, 4)?;
            project(t, m, 42)
        }),
        unit("bce_mean", vec![probabilities(&[1, 3, 4], 43)], |t, v| {
            let target = mask(&[1, 3, 4], 44);
            t.bce(v[0], &target, 1e-7)
        }),
        unit(
            "dot_product_attention",
            vec![random(&[4, 3], 45), random(&[5, 3], 46), random(&[5, 3], 47)],
            |t, v| {
                let y = dot_product_attention(t, v[0], v[1], v[2])?;
                project(t, y, 48)
            },
        ),
        unit(
            "efficient_attention",
            vec![random(&[4, 3], 49), random(&[5, 3], 50), random(&[5, 3], 51)],
            |t, v| {
                let y = efficient_attention(t, v[0], v[1], v[2])?;
                project(t, y, 52)
            },
        ),
    ];

    // Blocks: parameters followed by activations as probe inputs.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mha = MultiHeadAttention::new(&mut store, &mut Init { rng: &mut rng }, "mha", 4, 2).expect("valid");
    let mut inputs = store.values().to_vec();
    let n = inputs.len();
    inputs.extend([random(&[3, 4], 61), random(&[5, 4], 62), random(&[5, 4], 63)]);
    u.push(unit("multi_head_attention", inputs, move |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let y = mha.forward(t, &p, v[n], v[n + 1], v[n + 2])?;
        project(t, y, 64)
    }));

    // Enhancement block over a 3-scale pyramid (c = 8, 4×4 finest).
    let dims = [(4, 4), (2, 2), (1, 1)];
    let c = 8;
    let tables = dims.map(|(h, w)| sine_positional_encoding::<f64>(h, w, c).expect("valid"));
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let enhancer = crate::twfem::Enhancer::new(&mut store, &mut Init { rng: &mut rng }, "te", c, 2).expect("valid");
    let mut inputs = store.values().to_vec();
    let n = inputs.len();
    inputs.extend([random(&[16, c], 71), random(&[4, c], 72), random(&[1, c], 73)]);
    let te_tables = tables.clone();
    u.push(unit("te_block", inputs, move |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let enc = ScaleEncodings::record(t, &te_tables);
        let pyr = FeaturePyramid {
            modality: Modality::Rgb,
            tokens: [v[n], v[n + 1], v[n + 2]],
            dims,
        };
        let e = enhance_modality(t, &p, &enhancer, &pyr, &enc)?;
        let all = t.concat_rows(&e.tokens)?;
        project(t, all, 74)
    }));

    // Two fusion blocks with the shared classifier and deep supervision.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut init = Init { rng: &mut rng };
    let blocks: Vec<DecoderBlock> = (0..2)
        .map(|i| DecoderBlock::new(&mut store, &mut init, &format!("tf{i}"), c, 2).expect("valid"))
        .collect();
    let classifier = Conv::new(&mut store, &mut init, "cls", c, 1, 1).expect("valid");
    let mut inputs = store.values().to_vec();
    let n = inputs.len();
    for i in 0..6 {
        inputs.push(random(&[[16, 4, 1][i % 3], c], 80 + i as u64));
    }
    let gt = mask(&[1, 4, 4], 90);
    u.push(unit("tf_stack_t2", inputs, move |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let enc = ScaleEncodings::record(t, &tables);
        let rgb = FeaturePyramid {
            modality: Modality::Rgb,
            tokens: [v[n], v[n + 1], v[n + 2]],
            dims,
        };
        let depth = FeaturePyramid {
            modality: Modality::Depth,
            tokens: [v[n + 3], v[n + 4], v[n + 5]],
            dims,
        };
        let mem = build_memory(t, &rgb, &depth, &enc)?;
        let f0 = t.add(v[n], v[n + 3])?;
        let st = fuse(t, &p, &blocks, &classifier, f0, enc.pos[0], &mem, (4, 4))?;
        final_loss(t, &st.predictions, &gt)
    }));

    // Whole network at 32×32, c = 16, T = 2, two heads.
    let cfg = tiny_model_config();
    let model = Model::<f64>::new(cfg).expect("valid tiny config");
    let inputs = model.params().values().to_vec();
    let rgb = probabilities(&[3, 32, 32], 100);
    let depth = probabilities(&[1, 32, 32], 101);
    let gt = mask(&[1, 32, 32], 102);
    u.push(unit("full_model_tiny", inputs, move |t, v| {
        let p = Bound::from_vars(v.to_vec());
        let preds = model.forward(t, &p, &rgb, &depth)?;
        Ok(model.loss(t, &preds, &gt)?.total)
    }));
    u
}

/// Names of all checked units, in run order.
pub fn unit_names() -> Vec<&'static str> {
    units().into_iter().map(|(n, _)| n).collect()
}

/// Run every unit; `fault` corrupts a backward rule on every tape.
pub fn run_gradchecks(fault: Option<Fault>) -> Result<Vec<GradCheck>> {
    units().into_iter().map(|(_, run)| run(fault)).collect()
}

/// One line per unit plus a summary line.
pub fn render_report(results: &[GradCheck]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<24} probes {:>4}  max rel err {:.3e}  {}\n",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        out.push_str(&format!("all {} units passed\n", results.len()));
    } else {
        out.push_str(&format!(
            "{} of {} units failed: {}\n",
            failed.len(),
            results.len(),
            failed.join(", ")
        ));
    }
    out
}
