//! Evaluation and inference over sample sets.

use std::fs;
use std::path::Path;

use super::data::Sample;
use super::image_io;
use crate::error::Result;
use crate::metrics::{evaluate_dataset, EvalPair, MetricReport};
use crate::model::Model;
use crate::tensor::Tensor;

/// Final saliency map (`1×H×W`) of every sample.
pub fn predict_maps(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    samples.iter().map(|s| model.predict_final(&s.rgb, &s.depth)).collect()
}

/// Metrics of precomputed maps against the samples' ground truth.
pub fn score_maps(maps: &[Tensor<f32>], samples: &[Sample]) -> Result<MetricReport> {
    let pairs = maps
        .iter()
        .zip(samples)
        .map(|(m, s)| {
            let (h, w) = s.size();
            EvalPair::new(&m.to_f64_vec(), &s.gt.to_f64_vec(), h, w)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(&pairs)
}

/// Evaluate the final map of `model` on `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<(MetricReport, Vec<Tensor<f32>>)> {
    let maps = predict_maps(model, samples)?;
    Ok((score_maps(&maps, samples)?, maps))
}

/// Write maps as `NNNN_pred.pgm` into `dir`, named by sample index.
pub fn dump_maps(dir: &Path, maps: &[Tensor<f32>], samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (m, s) in maps.iter().zip(samples) {
        image_io::write(&dir.join(format!("{:04}_pred.pgm", s.index)), m)?;
    }
    Ok(())
}

/// Inference on one RGB/depth file pair; returns the final map.
pub fn infer_files(model: &Model<f32>, rgb: &Path, depth: &Path) -> Result<Tensor<f32>> {
    let rgb = image_io::read_rgb(rgb)?;
    let depth = image_io::read_gray(depth)?;
    model.predict_final(&rgb, &depth)
}
