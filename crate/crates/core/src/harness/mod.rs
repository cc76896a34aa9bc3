//! Everything around the network: synthetic data, image files, configuration,
//! training, evaluation, ablations, gradient checks and the attention benchmark.

pub mod ablate;
pub mod bench;
pub mod checks;
pub mod config;
pub mod data;
pub mod eval;
pub mod image_io;
pub mod train;

pub use ablate::{ablate, ablation_grid, AblationRow, Variant};
pub use config::{Profile, RunConfig};
pub use data::{generate_dataset, read_dataset, write_dataset, Sample};
pub use eval::evaluate;
pub use train::{train, train_to_dir, LossRecord, TrainOutcome};

use crate::error::Result;

/// Training and test sets for `run`: read from `run.data_dir/{train,test}`
/// when set, otherwise synthesised from `run.seed` (test set from `seed + 1`).
pub fn load_or_generate(run: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &run.data_dir {
        Some(dir) => Ok((read_dataset(&dir.join("train"))?, read_dataset(&dir.join("test"))?)),
        None => Ok((
            generate_dataset(run.train_samples, run.input_size, run.seed)?,
            generate_dataset(run.test_samples, run.input_size, run.seed + 1)?,
        )),
    }
}
