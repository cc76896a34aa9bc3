//! Mini-batch training with Adam.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::Sample;
use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};

/// Losses of one iteration, averaged over the batch, before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub l_init: f64,
    pub l_final: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,l_init,l_final,total";

/// Full-precision CSV so that equal logs mean equal runs.
pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in log {
        let _ = writeln!(out, "{},{},{},{}", r.iter, r.l_init, r.l_final, r.total);
    }
    out
}

/// Endless shuffled pass over sample indices.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // stream 0 initialises parameters; batch order draws from its own stream
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { rng, order, cursor: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Model plus optimiser state.
pub struct Trainer {
    pub model: Model<f32>,
    state: AdamState<f32>,
    adam: AdamConfig,
    iter: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, adam: AdamConfig) -> Self {
        let state = AdamState::new(model.params().values());
        Self {
            model,
            state,
            adam,
            iter: 0,
        }
    }

    /// Batch-mean loss without updating anything.
    pub fn evaluate_loss(&self, batch: &[&Sample]) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape, false);
        let (l_init, l_final, total) = self.batch_loss(&mut tape, &p, batch)?;
        Ok(LossRecord {
            iter: self.iter,
            l_init: tape.value(l_init).data()[0] as f64,
            l_final: tape.value(l_final).data()[0] as f64,
            total: tape.value(total).data()[0] as f64,
        })
    }

    fn batch_loss(&self, tape: &mut Tape<f32>, p: &crate::params::Bound, batch: &[&Sample]) -> Result<(Var, Var, Var)> {
        let mut sums: Option<(Var, Var, Var)> = None;
        for s in batch {
            let preds = self.model.forward(tape, p, &s.rgb, &s.depth)?;
            let l = self.model.loss(tape, &preds, &s.gt)?;
            sums = Some(match sums {
                None => (l.init, l.fused, l.total),
                Some((a, b, c)) => (tape.add(a, l.init)?, tape.add(b, l.fused)?, tape.add(c, l.total)?),
            });
        }
        let (a, b, c) = sums.ok_or_else(|| Error::Config("empty batch".into()))?;
        let k = 1.0 / batch.len() as f32;
        Ok((tape.scale(a, k), tape.scale(b, k), tape.scale(c, k)))
    }

    /// One Adam step on `batch`; aborts on any non-finite loss or gradient.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape, true);
        let (l_init, l_final, total) = self.batch_loss(&mut tape, &p, batch)?;
        let record = LossRecord {
            iter: self.iter,
            l_init: tape.value(l_init).data()[0] as f64,
            l_final: tape.value(l_final).data()[0] as f64,
            total: tape.value(total).data()[0] as f64,
        };
        if ![record.l_init, record.l_final, record.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "iteration {}: non-finite loss (l_init {}, l_final {}, total {})",
                self.iter, record.l_init, record.l_final, record.total
            )));
        }
        let mut grads = tape.backward(total)?;
        drop(tape);
        let mut gs = Vec::with_capacity(p.vars().len());
        for (i, &v) in p.vars().iter().enumerate() {
            let g = grads
                .take(v)
                .unwrap_or_else(|| crate::tensor::Tensor::zeros(self.model.params().values()[i].shape()));
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "iteration {}: non-finite gradient for {}",
                    self.iter,
                    self.model.params().names()[i]
                )));
            }
            gs.push(g);
        }
        adam_step(self.model.params_mut().values_mut(), &gs, &mut self.state, &self.adam)?;
        self.iter += 1;
        Ok(record)
    }
}

/// Callback after every update: iterations done, the model, that step's losses.
pub type StepHook<'a> = dyn FnMut(usize, &Model<f32>, &LossRecord) -> Result<()> + 'a;

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LossRecord>,
}

/// Train a fresh model described by `run` on `data`.
///
/// `after_step` runs after every update with the iteration count so far.
pub fn train_with(run: &RunConfig, data: &[Sample], after_step: &mut StepHook<'_>) -> Result<TrainOutcome> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let want = (run.input_size, run.input_size);
    if let Some(s) = data.iter().find(|s| s.size() != want) {
        return Err(Error::Config(format!(
            "sample {} is {:?}, model input is {want:?}",
            s.index,
            s.size()
        )));
    }
    let mut trainer = Trainer::new(Model::new(run.model())?, run.adam());
    let mut order = BatchOrder::new(data.len(), run.seed);
    let mut log = Vec::with_capacity(run.iterations);
    for i in 0..run.iterations {
        let batch: Vec<&Sample> = order.next_batch(run.batch_size).into_iter().map(|k| &data[k]).collect();
        let record = trainer.step(&batch)?;
        if run.log_every > 0 && (i % run.log_every == 0 || i + 1 == run.iterations) {
            log::info!(
                "iter {:>5}  l_init {:.4}  l_final {:.4}  total {:.4}",
                record.iter,
                record.l_init,
                record.l_final,
                record.total
            );
        }
        log.push(record);
        after_step(i + 1, &trainer.model, &record)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

pub fn train(run: &RunConfig, data: &[Sample]) -> Result<TrainOutcome> {
    train_with(run, data, &mut |_, _, _| Ok(()))
}

/// Train and write `loss.csv`, `model.ckpt` and periodic `model_iterN.ckpt` into `run.out_dir`.
pub fn train_to_dir(run: &RunConfig, data: &[Sample]) -> Result<TrainOutcome> {
    fs::create_dir_all(&run.out_dir)?;
    let dir = run.out_dir.clone();
    let every = run.checkpoint_every;
    let outcome = train_with(run, data, &mut |done, model, _| {
        if every > 0 && done % every == 0 && done < run.iterations {
            checkpoint::save(&dir.join(format!("model_iter{done}.ckpt")), model)?;
        }
        Ok(())
    })?;
    write_log(&dir.join("loss.csv"), &outcome.log)?;
    checkpoint::save(&dir.join("model.ckpt"), &outcome.model)?;
    Ok(outcome)
}

pub fn write_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    fs::write(path, loss_csv(log))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::generate_dataset;
    use crate::tensor::Tensor;

    fn tiny_run() -> RunConfig {
        RunConfig {
            input_size: 32,
            channels: 8,
            fusion_blocks: 2,
            heads: 2,
            batch_size: 2,
            iterations: 3,
            train_samples: 4,
            log_every: 0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn batch_order_covers_every_sample_per_epoch() {
        let mut o = BatchOrder::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| o.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let a: Vec<usize> = BatchOrder::new(10, 3).next_batch(7);
        let b: Vec<usize> = BatchOrder::new(10, 3).next_batch(7);
        assert_eq!(a, b);
    }

    #[test]
    fn short_run_is_reproducible_and_loadable() {
        let run = tiny_run();
        let data = generate_dataset(4, 32, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = RunConfig {
            out_dir: dir.path().to_path_buf(),
            checkpoint_every: 2,
            ..run
        };
        let a = train_to_dir(&run, &data).unwrap();
        let b = train(&run, &data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params(), b.model.params());
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("iter,l_init,l_final,total\n"));
        assert_eq!(csv.lines().count(), 4);
        let loaded = checkpoint::load_model(&dir.path().join("model.ckpt"), run.model()).unwrap();
        assert_eq!(loaded.params(), a.model.params());
        assert!(dir.path().join("model_iter2.ckpt").exists());
        for r in &a.log {
            assert!((r.total - r.l_init - r.l_final).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_input_aborts_with_numeric_error() {
        let run = RunConfig {
            iterations: 1,
            ..tiny_run()
        };
        let mut data = generate_dataset(2, 32, 1).unwrap();
        for s in &mut data {
            s.rgb = Tensor::full(&[3, 32, 32], f32::NAN);
        }
        let err = train(&run, &data).err().expect("must fail");
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn size_mismatch_is_a_config_error() {
        let data = generate_dataset(2, 64, 1).unwrap();
        assert!(matches!(train(&tiny_run(), &data), Err(Error::Config(_))));
    }
}
