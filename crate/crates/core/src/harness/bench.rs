//! Wall-time and peak-buffer scaling of efficient versus dot-product attention.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{dot_product_attention, efficient_attention};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingPoint {
    pub n: usize,
    pub c: usize,
    /// Fastest of the repetitions, milliseconds.
    pub ea_ms: f64,
    pub dpa_ms: f64,
    /// Largest buffer (elements) the forward pass allocated.
    pub ea_max_buffer: usize,
    pub dpa_max_buffer: usize,
}

type AttentionFn = fn(&mut Tape<f32>, Var, Var, Var) -> Result<Var>;

fn time_one(f: AttentionFn, inputs: &[Tensor<f32>; 3], reps: usize) -> Result<(f64, usize)> {
    let mut best = f64::INFINITY;
    let mut peak = 0;
    for _ in 0..reps.max(1) {
        let mut tape = Tape::new();
        let [q, k, v] = [0, 1, 2].map(|i| tape.constant(inputs[i].clone()));
        let mark = tape.len();
        let start = Instant::now();
        let out = f(&mut tape, q, k, v)?;
        std::hint::black_box(tape.value(out));
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
        peak = tape.max_buffer_since(mark);
    }
    Ok((best, peak))
}

/// Self-attention on random `n×c` inputs for every `n` in `ns`.
pub fn attention_scaling(c: usize, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<ScalingPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ns.iter()
        .map(|&n| {
            let mut gen = || {
                let data: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::new(&[n, c], data)
            };
            let inputs = [gen()?, gen()?, gen()?];
            let (ea_ms, ea_max_buffer) = time_one(efficient_attention, &inputs, reps)?;
            let (dpa_ms, dpa_max_buffer) = time_one(dot_product_attention, &inputs, reps)?;
            Ok(ScalingPoint {
                n,
                c,
                ea_ms,
                dpa_ms,
                ea_max_buffer,
                dpa_max_buffer,
            })
        })
        .collect()
}

pub const SCALING_CSV_HEADER: &str = "n,c,ea_ms,dpa_ms,ea_max_buffer,dpa_max_buffer";

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut out = format!("{SCALING_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{}",
            p.n, p.c, p.ea_ms, p.dpa_ms, p.ea_max_buffer, p.dpa_max_buffer
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_follow_complexity() {
        let pts = attention_scaling(8, &[64, 128], 1, 0).unwrap();
        for p in &pts {
            assert!(p.ea_max_buffer < p.n * p.n);
            assert!(p.dpa_max_buffer >= p.n * p.n);
        }
        let csv = scaling_csv(&pts);
        assert!(csv.starts_with(SCALING_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
