//! Ablation grid: number of fusion blocks, enhancement wiring, plain-fusion baseline.

use std::fmt::Write as _;

use super::config::RunConfig;
use super::data::Sample;
use super::eval::evaluate;
use super::train::train;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::Enhancement;

/// Fusion-block counts in the grid.
pub const GRID_T: [usize; 4] = [0, 2, 4, 5];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub label: String,
    pub fusion_blocks: usize,
    pub enhancement: Enhancement,
}

impl Variant {
    pub fn new(fusion_blocks: usize, enhancement: Enhancement) -> Self {
        let label = match enhancement {
            Enhancement::None if fusion_blocks == 0 => "MSMMF baseline".to_string(),
            e => format!("T={fusion_blocks} {}", e.label()),
        };
        Self {
            label,
            fusion_blocks,
            enhancement,
        }
    }

    pub fn baseline() -> Self {
        Self::new(0, Enhancement::None)
    }

    pub fn apply(&self, run: &RunConfig) -> RunConfig {
        RunConfig {
            fusion_blocks: self.fusion_blocks,
            enhancement: self.enhancement,
            ..run.clone()
        }
    }
}

/// The T sweep for both enhancement wirings, then the baseline: 9 rows.
pub fn ablation_grid() -> Vec<Variant> {
    let mut v: Vec<Variant> = [Enhancement::Progressive, Enhancement::NonProgressive]
        .into_iter()
        .flat_map(|e| GRID_T.map(|t| Variant::new(t, e)))
        .collect();
    v.push(Variant::baseline());
    v
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test-set metrics per seed.
    pub per_seed: Vec<MetricReport>,
    /// Seed average.
    pub mean: MetricReport,
}

/// Mean of reports, field by field.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to average".into()));
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
        fm: reports.iter().map(|r| r.fm).sum::<f64>() / n,
        sm: reports.iter().map(|r| r.sm).sum::<f64>() / n,
        em: reports.iter().map(|r| r.em).sum::<f64>() / n,
        count: reports.iter().map(|r| r.count).sum(),
    })
}

/// Train and test every variant for `run.ablate_seeds` seeds starting at `run.seed`.
pub fn ablate(
    run: &RunConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut per_seed = Vec::with_capacity(run.ablate_seeds);
        for k in 0..run.ablate_seeds as u64 {
            let cfg = RunConfig {
                seed: run.seed + k,
                ..variant.apply(run)
            };
            log::info!("ablation: {} seed {}", variant.label, cfg.seed);
            let outcome = train(&cfg, train_set)?;
            per_seed.push(evaluate(&outcome.model, test_set)?.0);
        }
        rows.push(AblationRow {
            variant: variant.clone(),
            mean: mean_report(&per_seed)?,
            per_seed,
        });
    }
    Ok(rows)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.label.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}   MAE   F_m   S_m   E_m\n", "variant");
    for r in rows {
        let _ = writeln!(out, "{:<width$} {}", r.variant.label, r.mean.row());
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let named: Vec<(String, MetricReport)> = rows.iter().map(|r| (r.variant.label.clone(), r.mean)).collect();
    crate::metrics::render_csv(&named)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::generate_dataset;

    #[test]
    fn grid_has_nine_rows() {
        let g = ablation_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0].label, "T=0 progressive");
        assert_eq!(g[7].label, "T=5 non-progressive");
        assert_eq!(g[8], Variant::baseline());
    }

    #[test]
    fn tiny_ablation_produces_bounded_rows() {
        let run = RunConfig {
            input_size: 32,
            channels: 8,
            heads: 2,
            batch_size: 2,
            iterations: 2,
            log_every: 0,
            ablate_seeds: 2,
            ..RunConfig::default()
        };
        let train_set = generate_dataset(4, 32, 1).unwrap();
        let test_set = generate_dataset(2, 32, 2).unwrap();
        let variants = [Variant::new(2, Enhancement::NonProgressive), Variant::baseline()];
        let rows = ablate(&run, &train_set, &test_set, &variants).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.per_seed.len(), 2);
            for v in [r.mean.mae, r.mean.fm, r.mean.sm, r.mean.em] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let table = render_ablation(&rows);
        assert!(table.contains("MSMMF baseline"));
        assert_eq!(ablation_csv(&rows).lines().count(), 3);
    }
}
