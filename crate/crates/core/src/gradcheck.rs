//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// The probe with the largest relative error.
    pub worst: Option<Probe>,
}

#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on the number of coordinates probed across all inputs.
    pub max_probes: usize,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_probes: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of `build` with central differences.
///
/// `build` receives a fresh tape and one parameter leaf per input tensor and
/// must return a scalar loss. Probed coordinates are sampled without
/// replacement when the inputs hold more than `max_probes` values in total.
pub fn check<B>(name: &str, inputs: &[Tensor<f64>], opts: GradCheckOptions, build: B) -> Result<GradCheck>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes: Vec<usize> = if total <= opts.max_probes {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.max_probes).into_vec()
    };
    probes.sort_unstable();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for flat in probes {
        let (which, idx) = locate(inputs, flat);
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + opts.step;
        let up = eval(&work)?;
        work[which].data_mut()[idx] = orig - opts.step;
        let down = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite finite difference")));
        }
        let err = relative_error(analytic[which][idx], numeric, opts.abs_floor);
        if err > max_rel_err || worst.is_none() {
            max_rel_err = max_rel_err.max(err);
            worst = Some(Probe {
                input: which,
                index: idx,
                analytic: analytic[which][idx],
                numeric,
            });
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        checked: total.min(opts.max_probes),
        max_rel_err,
        tolerance: opts.tolerance,
        worst,
    })
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("probe index out of range")
}
