//! Thresholding, confusion accounting, the five reported metrics, and
//! aggregation across runs or folds.
//!
//! All metrics are computed on full images, every pixel (no field-of-view
//! mask). AUC is exact: a trapezoidal sweep over the sorted distinct
//! predicted values, which equals the Mann–Whitney pairwise statistic
//! with ties counted one half. Undefined metrics (a class with no
//! pixels) are excluded from aggregates and surfaced as warnings rather
//! than silently zeroed.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Binarization and confusion counts
// ---------------------------------------------------------------------------

/// Pixel counts of the four joint outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    /// False negatives (`fn` is reserved).
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// A pixel is vessel iff its value is strictly greater than `t`.
pub fn binarize(map: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!(
            "threshold must lie in [0,1], got {t}"
        )));
    }
    check_prob_map(map)?;
    Ok(map.mapv(|v| if v > t { 1.0 } else { 0.0 }))
}

fn check_prob_map(map: &Array2<f64>) -> Result<()> {
    if map.is_empty() {
        return Err(Error::InvalidInput("empty probability map".into()));
    }
    if map.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::InvalidInput(
            "probability map entries must lie in [0,1]".into(),
        ));
    }
    Ok(())
}

fn check_binary(name: &str, mask: &Array2<f64>) -> Result<()> {
    if mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidInput(format!("{name} mask is not binary")));
    }
    Ok(())
}

/// Tally the four outcomes between two binary masks.
pub fn confusion(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<ConfusionCounts> {
    if pred.dim() != truth.dim() {
        return Err(Error::InvalidInput(format!(
            "prediction {:?} and truth {:?} shapes differ",
            pred.dim(),
            truth.dim()
        )));
    }
    check_binary("prediction", pred)?;
    check_binary("truth", truth)?;
    let mut counts = ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (p, t) in pred.iter().zip(truth.iter()) {
        match (*p == 1.0, *t == 1.0) {
            (true, true) => counts.tp += 1,
            (false, false) => counts.tn += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Per-image metrics
// ---------------------------------------------------------------------------

/// Metrics of one image. A `None` means the metric is undefined for this
/// image (its denominator class has no pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub identifier: String,
    pub counts: ConfusionCounts,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: f64,
    pub auc: Option<f64>,
    pub gmean: Option<f64>,
}

/// Compute the five metrics from counts plus the continuous map (for
/// AUC). `counts` must tally exactly the pixels of `map`/`truth`.
pub fn metrics(
    identifier: &str,
    counts: &ConfusionCounts,
    map: &Array2<f64>,
    truth: &Array2<f64>,
) -> Result<ImageEval> {
    if map.dim() != truth.dim() {
        return Err(Error::InvalidInput(format!(
            "map {:?} and truth {:?} shapes differ",
            map.dim(),
            truth.dim()
        )));
    }
    if counts.total() != map.len() as u64 {
        return Err(Error::InvalidInput(format!(
            "confusion counts cover {} pixels but the map has {}",
            counts.total(),
            map.len()
        )));
    }
    check_prob_map(map)?;
    check_binary("truth", truth)?;

    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let se = ratio(counts.tp, counts.tp + counts.fn_);
    let sp = ratio(counts.tn, counts.tn + counts.fp);
    let acc = (counts.tp + counts.tn) as f64 / counts.total() as f64;
    let auc = auc_exact(map, truth);
    let gmean = match (se, sp) {
        (Some(se), Some(sp)) => Some((se * sp).sqrt()),
        _ => None,
    };
    Ok(ImageEval {
        identifier: identifier.to_string(),
        counts: *counts,
        se,
        sp,
        acc,
        auc,
        gmean,
    })
}

/// Binarize at `threshold`, tally, and compute all metrics in one step.
pub fn evaluate_image(
    identifier: &str,
    map: &Array2<f64>,
    truth: &Array2<f64>,
    threshold: f64,
) -> Result<ImageEval> {
    let mask = binarize(map, threshold)?;
    let counts = confusion(&mask, truth)?;
    metrics(identifier, &counts, map, truth)
}

/// Exact trapezoidal AUC over the distinct predicted values, computed in
/// integer arithmetic. Groups of equal predictions contribute diagonal
/// trapezoids, i.e. ties count one half — the Mann–Whitney convention.
/// `None` when either class is empty.
fn auc_exact(map: &Array2<f64>, truth: &Array2<f64>) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = map
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (*p, *t == 1.0))
        .collect();
    let pos = pairs.iter().filter(|(_, t)| *t).count() as u128;
    let neg = pairs.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Descending by predicted value; total order is fine since values
    // were validated finite.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut area2: u128 = 0; // twice the area under the TP-FP staircase
    let mut tp: u128 = 0;
    let mut fp: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        let mut dtp: u128 = 0;
        let mut dfp: u128 = 0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
    }
    debug_assert_eq!((tp, fp), (pos, neg));
    Some(area2 as f64 / (2.0 * pos as f64 * neg as f64))
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// What the aggregated units are: independent seeded runs or
/// cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Runs,
    Folds,
}

/// Per-run metric means over that run's test images. The run-level
/// G-mean is recomputed from the run-level Se and Sp, so that
/// `gmean² = se·sp` holds per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_images: usize,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: f64,
    pub auc: Option<f64>,
    pub gmean: Option<f64>,
    pub warnings: Vec<String>,
}

/// Average per-image metrics into one run. Undefined image metrics are
/// excluded from their mean with a warning.
pub fn summarize_run(images: &[ImageEval]) -> Result<RunSummary> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to summarize".into()));
    }
    let mut warnings = Vec::new();
    let mut mean_of = |metric: &str, get: &dyn Fn(&ImageEval) -> Option<f64>| -> Option<f64> {
        let defined: Vec<f64> = images.iter().filter_map(|i| get(i)).collect();
        for img in images {
            if get(img).is_none() {
                warnings.push(format!(
                    "image {}: {metric} undefined (empty denominator class); excluded from the run mean",
                    img.identifier
                ));
            }
        }
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };

    let se = mean_of("sensitivity", &|i| i.se);
    let sp = mean_of("specificity", &|i| i.sp);
    let auc = mean_of("auc", &|i| i.auc);
    let acc = images.iter().map(|i| i.acc).sum::<f64>() / images.len() as f64;
    let gmean = match (se, sp) {
        (Some(se), Some(sp)) => Some((se * sp).sqrt()),
        _ => None,
    };
    Ok(RunSummary { n_images: images.len(), se, sp, acc, auc, gmean, warnings })
}

/// Mean with its standard error; `stderr` absent for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub mean: f64,
    pub stderr: Option<f64>,
}

fn aggregate_metric(values: &[f64]) -> AggregateMetric {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((var / n).sqrt())
    } else {
        None
    };
    AggregateMetric { mean, stderr }
}

/// The cross-run (or cross-fold) report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: AggregationMode,
    pub runs: usize,
    pub se: Option<AggregateMetric>,
    pub sp: Option<AggregateMetric>,
    pub acc: AggregateMetric,
    pub auc: Option<AggregateMetric>,
    pub gmean: Option<AggregateMetric>,
    pub warnings: Vec<String>,
}

/// Mean and standard error of each metric across runs. Runs where a
/// metric is undefined are excluded from that metric's aggregate, with a
/// warning.
pub fn aggregate(runs: &[RunSummary], mode: AggregationMode) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("no runs to aggregate".into()));
    }
    let mut warnings: Vec<String> = runs.iter().flat_map(|r| r.warnings.clone()).collect();
    let mut pick = |metric: &str, get: &dyn Fn(&RunSummary) -> Option<f64>| -> Option<AggregateMetric> {
        let defined: Vec<f64> = runs.iter().filter_map(|r| get(r)).collect();
        if defined.len() < runs.len() {
            warnings.push(format!(
                "{metric} undefined in {} of {} runs; excluded from the aggregate",
                runs.len() - defined.len(),
                runs.len()
            ));
        }
        if defined.is_empty() {
            None
        } else {
            Some(aggregate_metric(&defined))
        }
    };

    let se = pick("sensitivity", &|r| r.se);
    let sp = pick("specificity", &|r| r.sp);
    let auc = pick("auc", &|r| r.auc);
    let gmean = pick("gmean", &|r| r.gmean);
    let acc_values: Vec<f64> = runs.iter().map(|r| r.acc).collect();
    let acc = aggregate_metric(&acc_values);
    Ok(MetricsReport { mode, runs: runs.len(), se, sp, acc, auc, gmean, warnings })
}

impl MetricsReport {
    /// Human-readable structured text, one metric per line.
    pub fn to_text(&self) -> String {
        let fmt = |m: &Option<AggregateMetric>| match m {
            None => "undefined".to_string(),
            Some(AggregateMetric { mean, stderr: None }) => format!("{mean:.4}"),
            Some(AggregateMetric { mean, stderr: Some(s) }) => format!("{mean:.4} ± {s:.4}"),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "aggregation: {} over {} unit(s)\n",
            match self.mode {
                AggregationMode::Runs => "runs",
                AggregationMode::Folds => "folds",
            },
            self.runs
        ));
        out.push_str(&format!("Se     {}\n", fmt(&self.se)));
        out.push_str(&format!("Sp     {}\n", fmt(&self.sp)));
        out.push_str(&format!("Acc    {}\n", fmt(&Some(self.acc))));
        out.push_str(&format!("AUC    {}\n", fmt(&self.auc)));
        out.push_str(&format!("G-mean {}\n", fmt(&self.gmean)));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Result writers
// ---------------------------------------------------------------------------

/// Per-image CSV: one row per image plus a trailing MEAN row. Undefined
/// metrics are left empty.
pub fn write_image_csv(path: &Path, images: &[ImageEval], run: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{e}"))))?;
    let field = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    w.write_record([
        "image", "tp", "tn", "fp", "fn", "se", "sp", "acc", "auc", "gmean",
    ])
    .and_then(|()| {
        for img in images {
            w.write_record([
                img.identifier.clone(),
                img.counts.tp.to_string(),
                img.counts.tn.to_string(),
                img.counts.fp.to_string(),
                img.counts.fn_.to_string(),
                field(img.se),
                field(img.sp),
                field(Some(img.acc)),
                field(img.auc),
                field(img.gmean),
            ])?;
        }
        w.write_record([
            "MEAN".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            field(run.se),
            field(run.sp),
            field(Some(run.acc)),
            field(run.auc),
            field(run.gmean),
        ])
    })
    .map_err(|e| Error::Io(std::io::Error::other(format!("{e}"))))?;
    w.flush()?;
    Ok(())
}

/// Save a binary mask as an 8-bit grayscale PNG (vessel = 255).
pub fn write_mask_png(path: &Path, mask: &Array2<f64>) -> Result<()> {
    check_binary("output", mask)?;
    write_gray(path, mask, |v| if v == 1.0 { 255 } else { 0 })
}

/// Save a probability map as an 8-bit grayscale PNG (linear scale).
pub fn write_prob_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    check_prob_map(map)?;
    write_gray(path, map, |v| (v * 255.0).round() as u8)
}

fn write_gray(path: &Path, a: &Array2<f64>, to_byte: impl Fn(f64) -> u8) -> Result<()> {
    let (h, w) = a.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_byte(a[(y as usize, x as usize)])])
    });
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use ndarray::array;
    use rand::Rng;

    fn random_pair(side: usize, tag: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = substream(600, Stream::Custom(tag));
        let map = Array2::from_shape_fn((side, side), |_| rng.gen_range(0.0..=1.0));
        let truth = Array2::from_shape_fn((side, side), |_| {
            if rng.gen_bool(0.3) {
                1.0
            } else {
                0.0
            }
        });
        (map, truth)
    }

    // -- binarize ----------------------------------------------------------

    #[test]
    fn threshold_is_strict() {
        let map = array![[0.6, 0.5], [0.49999999, 0.500000001]];
        let mask = binarize(&map, 0.5).unwrap();
        assert_eq!(mask, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn all_zero_map_is_all_background() {
        let mask = binarize(&Array2::zeros((4, 4)), 0.5).unwrap();
        assert_eq!(mask.sum(), 0.0);
    }

    #[test]
    fn out_of_range_threshold_is_a_config_error() {
        let map = Array2::zeros((2, 2));
        for t in [-0.1, 1.1, f64::NAN] {
            assert!(matches!(binarize(&map, t), Err(Error::Config(_))));
        }
        // Inclusive endpoints are allowed.
        assert!(binarize(&map, 0.0).is_ok());
        assert!(binarize(&map, 1.0).is_ok());
    }

    #[test]
    fn out_of_range_probabilities_rejected() {
        let map = array![[0.5, 1.5]];
        assert!(matches!(binarize(&map, 0.5), Err(Error::InvalidInput(_))));
    }

    // -- confusion ---------------------------------------------------------

    #[test]
    fn perfect_prediction_has_no_errors() {
        let (_, truth) = random_pair(16, 1);
        let c = confusion(&truth, &truth).unwrap();
        assert_eq!(c.fp, 0);
        assert_eq!(c.fn_, 0);
        assert_eq!(c.tp, truth.sum() as u64);
        assert_eq!(c.total(), 256);
    }

    #[test]
    fn complement_prediction_has_no_hits() {
        let (_, truth) = random_pair(16, 2);
        let flipped = truth.mapv(|v| 1.0 - v);
        let c = confusion(&flipped, &truth).unwrap();
        assert_eq!(c.tp, 0);
        assert_eq!(c.tn, 0);
    }

    #[test]
    fn confusion_matches_a_pixel_loop() {
        for tag in 0..10 {
            let (map, truth) = random_pair(32, 100 + tag);
            let pred = binarize(&map, 0.5).unwrap();
            let c = confusion(&pred, &truth).unwrap();
            let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
            for y in 0..32 {
                for x in 0..32 {
                    match (pred[(y, x)] == 1.0, truth[(y, x)] == 1.0) {
                        (true, true) => tp += 1,
                        (false, false) => tn += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                    }
                }
            }
            assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_));
            assert_eq!(c.total(), 32 * 32);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((4, 5));
        assert!(matches!(confusion(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let a = array![[0.5]];
        let b = array![[1.0]];
        assert!(matches!(confusion(&a, &b), Err(Error::InvalidInput(_))));
    }

    // -- metrics -----------------------------------------------------------

    #[test]
    fn perfect_prediction_scores_ones() {
        let (_, truth) = random_pair(16, 3);
        assert!(truth.sum() > 0.0 && truth.sum() < 256.0);
        let eval = evaluate_image("x", &truth, &truth, 0.5).unwrap();
        assert_eq!(eval.se, Some(1.0));
        assert_eq!(eval.sp, Some(1.0));
        assert_eq!(eval.acc, 1.0);
        assert_eq!(eval.auc, Some(1.0));
        assert_eq!(eval.gmean, Some(1.0));
    }

    #[test]
    fn constant_map_has_auc_half() {
        let (_, truth) = random_pair(8, 4);
        let map = Array2::from_elem((8, 8), 0.3);
        let eval = evaluate_image("x", &map, &truth, 0.5).unwrap();
        assert_eq!(eval.auc, Some(0.5));
    }

    #[test]
    fn separable_scores_give_auc_one_and_crossed_give_zero() {
        let truth = array![[1.0, 1.0], [0.0, 0.0]];
        let aligned = array![[0.9, 0.8], [0.2, 0.1]];
        assert_eq!(evaluate_image("a", &aligned, &truth, 0.5).unwrap().auc, Some(1.0));
        let inverted = array![[0.1, 0.2], [0.8, 0.9]];
        assert_eq!(evaluate_image("b", &inverted, &truth, 0.5).unwrap().auc, Some(0.0));
    }

    #[test]
    fn auc_hand_oracles() {
        // pos {0.9, 0.4} vs neg {0.8, 0.3}: wins 3 of 4 pairs.
        let map = array![[0.9, 0.8], [0.4, 0.3]];
        let truth = array![[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(evaluate_image("x", &map, &truth, 0.5).unwrap().auc, Some(0.75));

        // Tie between one positive and one negative counts one half:
        // pairs (0.7>0.5)=1, (0.7>0.2)=1, (0.5=0.5)=0.5, (0.5>0.2)=1.
        let map = array![[0.7, 0.5], [0.5, 0.2]];
        let truth = array![[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(evaluate_image("y", &map, &truth, 0.5).unwrap().auc, Some(0.875));
    }

    #[test]
    fn auc_equals_mann_whitney_on_small_instances() {
        for tag in 0..20 {
            let mut rng = substream(601, Stream::Custom(tag));
            let n = rng.gen_range(2..=8usize);
            // Coarse values force plenty of ties.
            let map = Array2::from_shape_fn((n, n), |_| {
                rng.gen_range(0..=4) as f64 / 4.0
            });
            let truth = Array2::from_shape_fn((n, n), |_| {
                if rng.gen_bool(0.4) {
                    1.0
                } else {
                    0.0
                }
            });
            let eval = evaluate_image("x", &map, &truth, 0.5).unwrap();

            let pos: Vec<f64> = map
                .iter()
                .zip(truth.iter())
                .filter(|(_, t)| **t == 1.0)
                .map(|(p, _)| *p)
                .collect();
            let neg: Vec<f64> = map
                .iter()
                .zip(truth.iter())
                .filter(|(_, t)| **t == 0.0)
                .map(|(p, _)| *p)
                .collect();
            if pos.is_empty() || neg.is_empty() {
                assert_eq!(eval.auc, None);
                continue;
            }
            let mut wins2: u64 = 0; // doubled to keep halves integral
            for p in &pos {
                for q in &neg {
                    if p > q {
                        wins2 += 2;
                    } else if p == q {
                        wins2 += 1;
                    }
                }
            }
            let mw = wins2 as f64 / (2.0 * pos.len() as f64 * neg.len() as f64);
            assert_eq!(eval.auc, Some(mw), "tag {tag}");
        }
    }

    #[test]
    fn formulas_match_hand_counts() {
        // pred: vessel for >0.5; truth: 3 vessels, 1 background row.
        let map = array![[0.9, 0.6], [0.4, 0.2]];
        let truth = array![[1.0, 0.0], [1.0, 0.0]];
        let eval = evaluate_image("x", &map, &truth, 0.5).unwrap();
        // tp=1 (0.9), fp=1 (0.6), fn=1 (0.4), tn=1 (0.2).
        assert_eq!(eval.counts, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
        assert_eq!(eval.se, Some(0.5));
        assert_eq!(eval.sp, Some(0.5));
        assert_eq!(eval.acc, 0.5);
        assert_eq!(eval.gmean, Some(0.5));
    }

    #[test]
    fn empty_vessel_class_flags_undefined() {
        let map = array![[0.2, 0.6], [0.1, 0.4]];
        let truth = Array2::zeros((2, 2));
        let eval = evaluate_image("x", &map, &truth, 0.5).unwrap();
        assert_eq!(eval.se, None);
        assert_eq!(eval.auc, None);
        assert_eq!(eval.gmean, None);
        assert!(eval.sp.is_some());
        // One false positive (0.6) among four background pixels.
        assert_eq!(eval.acc, 0.75);
    }

    #[test]
    fn complement_symmetry_swaps_se_and_sp() {
        let (map, truth) = random_pair(16, 5);
        let pred = binarize(&map, 0.5).unwrap();
        let a = metrics("a", &confusion(&pred, &truth).unwrap(), &map, &truth).unwrap();
        let flipped_map = map.mapv(|v| 1.0 - v);
        let flipped_truth = truth.mapv(|v| 1.0 - v);
        let flipped_pred = pred.mapv(|v| 1.0 - v);
        let b = metrics(
            "b",
            &confusion(&flipped_pred, &flipped_truth).unwrap(),
            &flipped_map,
            &flipped_truth,
        )
        .unwrap();
        assert_eq!(a.se, b.sp);
        assert_eq!(a.sp, b.se);
        assert_eq!(a.acc, b.acc);
    }

    #[test]
    fn rising_threshold_never_adds_positives() {
        let (map, truth) = random_pair(16, 6);
        let mut last_tp = u64::MAX;
        let mut last_fp = u64::MAX;
        for t in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
            let c = confusion(&binarize(&map, t).unwrap(), &truth).unwrap();
            assert!(c.tp <= last_tp && c.fp <= last_fp, "threshold {t}");
            last_tp = c.tp;
            last_fp = c.fp;
        }
    }

    #[test]
    fn gmean_squares_back_to_the_product() {
        let evals: Vec<ImageEval> = (0..5)
            .map(|tag| {
                let (map, truth) = random_pair(16, 200 + tag);
                evaluate_image(&format!("i{tag}"), &map, &truth, 0.5).unwrap()
            })
            .collect();
        let run = summarize_run(&evals).unwrap();
        let (se, sp, g) = (run.se.unwrap(), run.sp.unwrap(), run.gmean.unwrap());
        assert!((g * g - se * sp).abs() < 1e-12);
    }

    #[test]
    fn counts_inconsistent_with_map_rejected() {
        let map = array![[0.5, 0.5]];
        let truth = array![[1.0, 0.0]];
        let wrong = ConfusionCounts { tp: 5, tn: 0, fp: 0, fn_: 0 };
        assert!(matches!(
            metrics("x", &wrong, &map, &truth),
            Err(Error::InvalidInput(_))
        ));
    }

    // -- aggregation -------------------------------------------------------

    fn run_with(se: f64, sp: f64, acc: f64) -> RunSummary {
        RunSummary {
            n_images: 1,
            se: Some(se),
            sp: Some(sp),
            acc,
            auc: Some(0.9),
            gmean: Some((se * sp).sqrt()),
            warnings: vec![],
        }
    }

    #[test]
    fn single_run_reports_no_stderr() {
        let report = aggregate(&[run_with(0.8, 0.9, 0.95)], AggregationMode::Runs).unwrap();
        assert_eq!(report.runs, 1);
        let se = report.se.unwrap();
        assert_eq!(se.mean, 0.8);
        assert_eq!(se.stderr, None);
        assert_eq!(report.acc.stderr, None);
    }

    #[test]
    fn two_point_stderr_matches_hand_value() {
        let report = aggregate(
            &[run_with(0.8, 0.9, 0.9), run_with(0.9, 0.8, 0.9)],
            AggregationMode::Runs,
        )
        .unwrap();
        let se = report.se.unwrap();
        assert!((se.mean - 0.85).abs() < 1e-15);
        // sample stddev 0.0707…, divided by √2.
        assert!((se.stderr.unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_have_vanishing_stderr() {
        let runs: Vec<RunSummary> = (0..5).map(|_| run_with(0.8512, 0.9795, 0.96)).collect();
        let report = aggregate(&runs, AggregationMode::Runs).unwrap();
        assert!(report.se.unwrap().stderr.unwrap() < 1e-15);
        assert!(report.gmean.unwrap().stderr.unwrap() < 1e-15);
    }

    #[test]
    fn empty_aggregation_rejected() {
        assert!(matches!(
            aggregate(&[], AggregationMode::Folds),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(summarize_run(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn undefined_runs_are_excluded_with_warnings() {
        let mut no_se = run_with(0.0, 0.9, 0.9);
        no_se.se = None;
        no_se.gmean = None;
        let report =
            aggregate(&[run_with(0.8, 0.9, 0.9), no_se], AggregationMode::Runs).unwrap();
        let se = report.se.unwrap();
        assert_eq!(se.mean, 0.8);
        assert_eq!(se.stderr, None); // only one defined run remains
        assert!(report
            .warnings
            .iter()
            .any(|w| w.contains("sensitivity") && w.contains("1 of 2")));
    }

    #[test]
    fn summarize_run_warns_per_image() {
        let (map, truth) = random_pair(8, 7);
        let good = evaluate_image("good", &map, &truth, 0.5).unwrap();
        let bad = evaluate_image("allzero", &map.mapv(|v| v * 0.0), &Array2::zeros((8, 8)), 0.5)
            .unwrap();
        let run = summarize_run(&[good.clone(), bad]).unwrap();
        assert_eq!(run.se, good.se); // only the defined image contributes
        assert!(run.warnings.iter().any(|w| w.contains("allzero")));
    }

    #[test]
    fn report_text_lists_all_five_metrics() {
        let report = aggregate(&[run_with(0.8, 0.9, 0.95)], AggregationMode::Runs).unwrap();
        let text = report.to_text();
        for label in ["Se", "Sp", "Acc", "AUC", "G-mean"] {
            assert!(text.contains(label), "missing {label} in:\n{text}");
        }
    }

    // -- writers -----------------------------------------------------------

    #[test]
    fn csv_round_trips_through_the_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("per_image.csv");
        let evals: Vec<ImageEval> = (0..3)
            .map(|tag| {
                let (map, truth) = random_pair(8, 300 + tag);
                evaluate_image(&format!("img{tag}"), &map, &truth, 0.5).unwrap()
            })
            .collect();
        let run = summarize_run(&evals).unwrap();
        write_image_csv(&path, &evals, &run).unwrap();

        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let headers = rdr.headers().unwrap().clone();
        assert_eq!(
            headers.iter().collect::<Vec<_>>(),
            vec!["image", "tp", "tn", "fp", "fn", "se", "sp", "acc", "auc", "gmean"]
        );
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4); // 3 images + MEAN
        assert_eq!(&rows[3][0], "MEAN");
        let mean_acc: f64 = rows[3][7].parse().unwrap();
        assert!((mean_acc - run.acc).abs() < 1e-6);
    }

    #[test]
    fn mask_and_prob_pngs_encode_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mask_path = dir.path().join("mask.png");
        let prob_path = dir.path().join("prob.png");
        let mask = array![[1.0, 0.0], [0.0, 1.0]];
        let prob = array![[0.0, 0.5], [0.25, 1.0]];
        write_mask_png(&mask_path, &mask).unwrap();
        write_prob_png(&prob_path, &prob).unwrap();

        let m = image::open(&mask_path).unwrap().to_luma8();
        assert_eq!(m.get_pixel(0, 0)[0], 255);
        assert_eq!(m.get_pixel(1, 0)[0], 0);
        let p = image::open(&prob_path).unwrap().to_luma8();
        assert_eq!(p.get_pixel(0, 0)[0], 0);
        assert_eq!(p.get_pixel(1, 0)[0], 128); // 127.5 rounds up
        assert_eq!(p.get_pixel(0, 1)[0], 64);  // 63.75 rounds to 64
        assert_eq!(p.get_pixel(1, 1)[0], 255);
    }

    #[test]
    fn non_binary_output_mask_rejected_by_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let bad = array![[0.5]];
        assert!(write_mask_png(&path, &bad).is_err());
    }
}
