//! Saliency evaluation: MAE, adaptive F-measure, S-measure and E-measure.
//!
//! All statistics are population statistics. Binarisation uses the adaptive
//! threshold `τ = min(2·mean(P), 1)` and keeps only strictly positive pixels,
//! so an all-zero prediction selects nothing.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `β²` of the F-measure.
pub const BETA2: f64 = 0.3;
/// Weight of the object term in the S-measure.
pub const S_ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

/// One prediction with its binary ground truth, row-major `height×width`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pred: Vec<f64>,
    gt: Vec<bool>,
    height: usize,
    width: usize,
}

impl EvalPair {
    /// `pred` must lie in `[0,1]`, `gt` must be exactly 0 or 1.
    pub fn new(pred: &[f64], gt: &[f64], height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if n == 0 || pred.len() != n || gt.len() != n {
            return Err(Error::shape("eval pair", &[pred.len(), gt.len()], &[height, width]));
        }
        if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("prediction value {v} outside [0,1]")));
        }
        let gt = gt
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(Error::Config(format!("ground truth value {v} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pred: pred.to_vec(),
            gt,
            height,
            width,
        })
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    pub fn gt(&self) -> &[bool] {
        &self.gt
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn len(&self) -> usize {
        self.pred.len()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn mae(pair: &EvalPair) -> f64 {
    mean(
        pair.pred
            .iter()
            .zip(&pair.gt)
            .map(|(&p, &s)| (p - f64::from(u8::from(s))).abs()),
    )
}

/// `min(2·mean(P), 1)`.
pub fn adaptive_threshold(pred: &[f64]) -> f64 {
    (2.0 * mean(pred.iter().copied())).min(1.0)
}

/// `P ≥ τ` restricted to `P > 0`.
pub fn binarize_adaptive(pred: &[f64]) -> Vec<bool> {
    let tau = adaptive_threshold(pred);
    pred.iter().map(|&p| p >= tau && p > 0.0).collect()
}

pub fn f_measure_adaptive(pair: &EvalPair) -> f64 {
    let b = binarize_adaptive(&pair.pred);
    let selected = b.iter().filter(|&&x| x).count();
    let positives = pair.gt.iter().filter(|&&x| x).count();
    let tp = b.iter().zip(&pair.gt).filter(|(&x, &s)| x && s).count();
    let precision = if selected == 0 {
        0.0
    } else {
        tp as f64 / selected as f64
    };
    let recall = if positives == 0 {
        0.0
    } else {
        tp as f64 / positives as f64
    };
    let denom = BETA2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / denom
    }
}

/// Structure measure: object-aware plus region-aware similarity.
pub fn s_measure(pair: &EvalPair) -> f64 {
    let fg_ratio = mean(pair.gt.iter().map(|&s| f64::from(u8::from(s))));
    let score = if fg_ratio == 0.0 {
        1.0 - mean(pair.pred.iter().copied())
    } else if fg_ratio == 1.0 {
        mean(pair.pred.iter().copied())
    } else {
        S_ALPHA * object_score(pair, fg_ratio) + (1.0 - S_ALPHA) * region_score(pair)
    };
    score.max(0.0)
}

fn object_score(pair: &EvalPair, fg_ratio: f64) -> f64 {
    let fg: Vec<f64> = pair
        .pred
        .iter()
        .zip(&pair.gt)
        .filter(|(_, &s)| s)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pair
        .pred
        .iter()
        .zip(&pair.gt)
        .filter(|(_, &s)| !s)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    fg_ratio * object_similarity(&fg) + (1.0 - fg_ratio) * object_similarity(&bg)
}

/// `2x̄ / (x̄² + 1 + σ_x)`.
fn object_similarity(x: &[f64]) -> f64 {
    let m = mean(x.iter().copied());
    let sd = mean(x.iter().map(|v| (v - m) * (v - m))).sqrt();
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

/// Split point at the ground-truth centroid: `round(mean index) + 1` with
/// ties to even, or the image centre for an empty mask.
fn centroid(pair: &EvalPair) -> (usize, usize) {
    let (h, w) = pair.dims();
    let mut count = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if pair.gt[r * w + c] {
                count += 1;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    if count == 0 {
        return (
            (h as f64 / 2.0).round_ties_even() as usize,
            (w as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let n = count as f64;
    (
        (sr / n).round_ties_even() as usize + 1,
        (sc / n).round_ties_even() as usize + 1,
    )
}

fn region_score(pair: &EvalPair) -> f64 {
    let (h, w) = pair.dims();
    let (cy, cx) = centroid(pair);
    let (cy, cx) = (cy.min(h), cx.min(w));
    let area = (h * w) as f64;
    let mut total = 0.0;
    for (r0, r1) in [(0, cy), (cy, h)] {
        for (c0, c1) in [(0, cx), (cx, w)] {
            let n = (r1 - r0) * (c1 - c0);
            if n == 0 {
                continue;
            }
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for r in r0..r1 {
                for c in c0..c1 {
                    x.push(pair.pred[r * w + c]);
                    y.push(f64::from(u8::from(pair.gt[r * w + c])));
                }
            }
            total += n as f64 / area * block_similarity(&x, &y);
        }
    }
    total
}

/// SSIM-style `4σ_xy·x̄·ȳ / ((x̄²+ȳ²)(σ_x²+σ_y²))`; 1 when both terms vanish,
/// 0 when only the numerator does.
fn block_similarity(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x.iter().copied());
    let my = mean(y.iter().copied());
    let vx = mean(x.iter().map(|v| (v - mx) * (v - mx)));
    let vy = mean(y.iter().map(|v| (v - my) * (v - my)));
    let cxy = mean(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Enhanced-alignment measure of the adaptively binarised prediction.
pub fn e_measure(pair: &EvalPair) -> f64 {
    let b = binarize_adaptive(&pair.pred);
    let n = pair.len() as f64;
    let positives = pair.gt.iter().filter(|&&s| s).count();
    if positives == 0 {
        return b.iter().filter(|&&x| !x).count() as f64 / n;
    }
    if positives == pair.len() {
        return b.iter().filter(|&&x| x).count() as f64 / n;
    }
    let mb = b.iter().filter(|&&x| x).count() as f64 / n;
    let ms = positives as f64 / n;
    mean(b.iter().zip(&pair.gt).map(|(&x, &s)| {
        let fb = f64::from(u8::from(x)) - mb;
        let fs = f64::from(u8::from(s)) - ms;
        let xi = 2.0 * fb * fs / (fb * fb + fs * fs + EPS);
        (1.0 + xi) * (1.0 + xi) / 4.0
    }))
}

/// Dataset averages in the column order MAE, F_m, S_m, E_m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub fm: f64,
    pub sm: f64,
    pub em: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn of_pair(pair: &EvalPair) -> Self {
        Self {
            mae: mae(pair),
            fm: f_measure_adaptive(pair),
            sm: s_measure(pair),
            em: e_measure(pair),
            count: 1,
        }
    }

    /// `"0.030 0.923 0.924 0.954"`.
    pub fn row(&self) -> String {
        format!("{:.3} {:.3} {:.3} {:.3}", self.mae, self.fm, self.sm, self.em)
    }
}

/// Per-image metrics averaged in input order.
pub fn evaluate_dataset(pairs: &[EvalPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let per: Vec<MetricReport> = pairs.iter().map(MetricReport::of_pair).collect();
    let n = per.len() as f64;
    Ok(MetricReport {
        mae: per.iter().map(|r| r.mae).sum::<f64>() / n,
        fm: per.iter().map(|r| r.fm).sum::<f64>() / n,
        sm: per.iter().map(|r| r.sm).sum::<f64>() / n,
        em: per.iter().map(|r| r.em).sum::<f64>() / n,
        count: per.len(),
    })
}

/// Aligned text table, one row per named report.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("dataset".len());
    let mut out = format!("{:<width$}   MAE   F_m   S_m   E_m\n", "dataset");
    for (name, r) in rows {
        let _ = writeln!(out, "{name:<width$} {}", r.row());
    }
    out
}

pub const CSV_HEADER: &str = "dataset,mae,fm,sm,em";

pub fn render_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (name, r) in rows {
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6}", r.mae, r.fm, r.sm, r.em);
    }
    out
}
