//! Shared plumbing between the subcommands: sample preparation, the
//! single-run training loop, checkpoint evaluation, and table layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::time::Instant;

use drvnet::data::{
    crop_to_original, make_split, zero_pad, Dataset, RetinalSample, SplitPlan, STARE_FOLDS,
};
use drvnet::evaluation::{
    binarize, evaluate_image, summarize_run, write_mask_png, write_prob_png, AggregateMetric,
    ImageEval, MetricsReport, RunSummary,
};
use drvnet::network::DrVNet;
use drvnet::rng::{substream, Stream};
use drvnet::training::{train_phase1, train_phase2, Phase, TrainOutcome};
use drvnet::{Checkpoint, Error, Result};

use crate::config::{RunConfig, RunRecord};

// ---------------------------------------------------------------------------
// Sample preparation
// ---------------------------------------------------------------------------

/// Center-crop to a square of `side` along each axis where the sample is
/// larger.
fn center_crop(sample: &RetinalSample, side: usize) -> RetinalSample {
    let (h, w) = sample.padded_size;
    let (ch, cw) = (h.min(side), w.min(side));
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    RetinalSample {
        identifier: sample.identifier.clone(),
        dataset: sample.dataset,
        image: sample
            .image
            .slice(ndarray::s![top..top + ch, left..left + cw, ..])
            .to_owned(),
        annotation: sample
            .annotation
            .slice(ndarray::s![top..top + ch, left..left + cw])
            .to_owned(),
        original_size: (ch, cw),
        padded_size: (ch, cw),
    }
}

/// Bring every sample to the network's input geometry: the dataset's
/// padded square, or — desk scale — a centred `patch`² window.
pub fn prepare_samples(
    samples: &[RetinalSample],
    dataset: Dataset,
    patch: Option<usize>,
) -> Result<BTreeMap<String, RetinalSample>> {
    let mut out = BTreeMap::new();
    for s in samples {
        let prepared = match patch {
            None => {
                let side = dataset.padded_side();
                zero_pad(s, side, side)?
            }
            Some(p) => zero_pad(&center_crop(s, p), p, p)?,
        };
        prepared.validate()?;
        out.insert(prepared.identifier.clone(), prepared);
    }
    Ok(out)
}

fn collect(
    prepared: &BTreeMap<String, RetinalSample>,
    ids: &[String],
) -> Result<Vec<RetinalSample>> {
    ids.iter()
        .map(|id| {
            prepared.get(id).cloned().ok_or_else(|| {
                Error::Config(format!(
                    "split references `{id}`, which the dataset does not provide"
                ))
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run units
// ---------------------------------------------------------------------------

/// One training run: a seed, the active STARE fold if any, and an
/// optional directory-name override (the ablation driver names runs
/// after their variant).
#[derive(Debug, Clone)]
pub struct RunUnit {
    pub seed: u64,
    pub fold: Option<usize>,
    pub name: Option<String>,
}

impl RunUnit {
    pub fn dir_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match self.fold {
            Some(k) => format!("run_seed{}_fold{k}", self.seed),
            None => format!("run_seed{}", self.seed),
        }
    }
}

/// Enumerate the runs a config describes: one per seed, times one per
/// STARE fold unless pinned with `fold`.
pub fn run_units(cfg: &RunConfig, dataset: Dataset) -> Result<Vec<RunUnit>> {
    let seeds = cfg.effective_seeds()?;
    let mut units = Vec::new();
    for &seed in &seeds {
        match (dataset, cfg.fold) {
            (Dataset::Stare, Some(k)) => units.push(RunUnit { seed, fold: Some(k), name: None }),
            (Dataset::Stare, None) => {
                for k in 0..STARE_FOLDS {
                    units.push(RunUnit { seed, fold: Some(k), name: None });
                }
            }
            _ => units.push(RunUnit { seed, fold: None, name: None }),
        }
    }
    Ok(units)
}

/// The split plan a unit trains and evaluates on.
pub fn unit_split(
    dataset: Dataset,
    ids: &[String],
    seed: u64,
    fold: Option<usize>,
) -> Result<SplitPlan> {
    let plan = make_split(dataset, ids, seed)?;
    match fold {
        Some(k) => plan.for_fold(k),
        None => Ok(plan),
    }
}

// ---------------------------------------------------------------------------
// Training one unit
// ---------------------------------------------------------------------------

fn best_val_of(out: &TrainOutcome) -> Option<f64> {
    out.best.history.last().and_then(|r| r.val_total)
}

/// Run one unit end to end: split, phase 1 (or adopt `reuse_backbone`,
/// a checkpoint path relative to `cfg.out`), phase 2 when the variant
/// has a tail, and write every artifact plus a `run.json` record into
/// `<out>/<unit dir>/`.
pub fn run_one(
    cfg: &RunConfig,
    dataset: Dataset,
    samples: &[RetinalSample],
    unit: &RunUnit,
    reuse_backbone: Option<&str>,
) -> Result<RunRecord> {
    let started = Instant::now();
    let ids: Vec<String> = samples.iter().map(|s| s.identifier.clone()).collect();
    let plan = unit_split(dataset, &ids, unit.seed, unit.fold)?;
    let dir_name = unit.dir_name();
    let dir = cfg.out.join(&dir_name);
    std::fs::create_dir_all(&dir)?;
    plan.save(&dir.join("split.json"))?;

    let prepared = prepare_samples(samples, dataset, cfg.patch)?;
    let train = collect(&prepared, &plan.train_ids)?;
    let val = collect(&prepared, &plan.val_ids)?;
    let weights = cfg.weights();
    let rel = |file: &str| format!("{dir_name}/{file}");

    // Phase 1 — or adopt a previously trained backbone unchanged.
    let (backbone_best, backbone_best_rel, backbone_last_rel, best_val_backbone) =
        match reuse_backbone {
            Some(path) => {
                let ckpt = Checkpoint::load(&cfg.out.join(path))?;
                (ckpt, path.to_string(), None, None)
            }
            None => {
                let mcfg = cfg.model_config(false)?;
                let mut rng = substream(unit.seed, Stream::Init);
                let mut model = DrVNet::new(&mcfg, &mut rng)?;
                let sched = cfg.schedule(Phase::Backbone, dataset, unit.seed)?;
                let mut log = File::create(dir.join("phase1.log.jsonl"))?;
                let out =
                    train_phase1(&mut model, &train, &val, &weights, &sched, Some(&mut log))?;
                out.best.save(&dir.join("backbone_best.ckpt"))?;
                out.last.save(&dir.join("backbone_last.ckpt"))?;
                let best_val = best_val_of(&out);
                (
                    out.best,
                    rel("backbone_best.ckpt"),
                    Some(rel("backbone_last.ckpt")),
                    best_val,
                )
            }
        };
    let backbone_digest = backbone_best.param_digest("backbone/");

    // Phase 2 — the tail learns on top of the frozen backbone.
    let (full_best, full_last, best_val_full) = if cfg.variant.tail_enabled() {
        let mcfg = cfg.model_config(true)?;
        let mut rng = substream(unit.seed, Stream::Init);
        let mut model = DrVNet::new(&mcfg, &mut rng)?;
        let sched = cfg.schedule(Phase::Tail, dataset, unit.seed)?;
        let mut log = File::create(dir.join("phase2.log.jsonl"))?;
        let out = train_phase2(
            &mut model,
            &backbone_best,
            &train,
            &val,
            &weights,
            &sched,
            Some(&mut log),
        )?;
        out.best.save(&dir.join("full_best.ckpt"))?;
        out.last.save(&dir.join("full_last.ckpt"))?;
        (
            Some(rel("full_best.ckpt")),
            Some(rel("full_last.ckpt")),
            best_val_of(&out),
        )
    } else {
        (None, None, None)
    };

    let split = rel("split.json");
    let record = RunRecord {
        seed: unit.seed,
        fold: unit.fold,
        dir: dir_name,
        variant: cfg.variant,
        split,
        backbone_best: backbone_best_rel,
        backbone_last: backbone_last_rel,
        full_best,
        full_last,
        backbone_digest,
        best_val_backbone,
        best_val_full,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Internal(format!("run record serialization failed: {e}")))?;
    std::fs::write(dir.join("run.json"), text + "\n")?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Evaluating a checkpoint
// ---------------------------------------------------------------------------

/// Forward a checkpoint over a split's test images, cropping each map
/// back to its original frame, optionally writing probability/mask PNGs.
pub fn eval_checkpoint(
    ckpt: &Checkpoint,
    plan: &SplitPlan,
    prepared: &BTreeMap<String, RetinalSample>,
    threshold: f64,
    masks_dir: Option<&Path>,
) -> Result<(RunSummary, Vec<ImageEval>)> {
    let mut rng = substream(0, Stream::Init);
    let mut model = DrVNet::new(&ckpt.config, &mut rng)?;
    ckpt.apply_to(&mut model)?;

    let mut evals = Vec::new();
    for id in &plan.test_ids {
        let s = prepared.get(id).ok_or_else(|| {
            Error::Config(format!(
                "split references `{id}`, which the dataset does not provide"
            ))
        })?;
        let (_, final_map) = model.forward_full(&s.image)?;
        let offsets = s.pad_offsets();
        let map = crop_to_original(&final_map, s.original_size, offsets)?;
        let truth = crop_to_original(&s.annotation, s.original_size, offsets)?;
        if let Some(d) = masks_dir {
            std::fs::create_dir_all(d)?;
            write_prob_png(&d.join(format!("{id}_prob.png")), &map)?;
            write_mask_png(&d.join(format!("{id}_mask.png")), &binarize(&map, threshold)?)?;
        }
        evals.push(evaluate_image(id, &map, &truth, threshold)?);
    }
    let run = summarize_run(&evals)?;
    Ok((run, evals))
}

// ---------------------------------------------------------------------------
// Table layout
// ---------------------------------------------------------------------------

/// Metric column order used by every emitted table.
pub const METRIC_COLUMNS: [&str; 5] = ["Sp", "Se", "Acc", "AUC", "G-mean"];

pub fn summary_cells(s: &RunSummary) -> [Option<f64>; 5] {
    [s.sp, s.se, Some(s.acc), s.auc, s.gmean]
}

/// Fixed-width table: one labelled row per entry, metric columns in the
/// published order, `n/a` for undefined cells.
pub fn format_table(label_header: &str, rows: &[(String, [Option<f64>; 5])]) -> String {
    let width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([label_header.len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    out.push_str(&format!("{label_header:<width$}"));
    for c in METRIC_COLUMNS {
        out.push_str(&format!("  {c:>8}"));
    }
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&format!("{label:<width$}"));
        for cell in cells {
            match cell {
                Some(v) => out.push_str(&format!("  {v:>8.4}")),
                None => out.push_str(&format!("  {:>8}", "n/a")),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean and stderr rows of an aggregated report, paper layout.
pub fn report_table(report: &MetricsReport) -> String {
    let mean = |m: &Option<AggregateMetric>| m.as_ref().map(|a| a.mean);
    let err = |m: &Option<AggregateMetric>| m.as_ref().and_then(|a| a.stderr);
    let rows = vec![
        (
            "mean".to_string(),
            [
                mean(&report.sp),
                mean(&report.se),
                Some(report.acc.mean),
                mean(&report.auc),
                mean(&report.gmean),
            ],
        ),
        (
            "stderr".to_string(),
            [
                err(&report.sp),
                err(&report.se),
                report.acc.stderr,
                err(&report.auc),
                err(&report.gmean),
            ],
        ),
    ];
    format_table("", &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn sample(id: &str, h: usize, w: usize) -> RetinalSample {
        RetinalSample {
            identifier: id.to_string(),
            dataset: Dataset::Drive,
            image: Array3::from_elem((h, w, 3), 0.5),
            annotation: Array2::from_shape_fn((h, w), |(y, x)| ((y + x) % 2) as f64),
            original_size: (h, w),
            padded_size: (h, w),
        }
    }

    #[test]
    fn preparation_pads_to_the_dataset_square_by_default() {
        let samples = vec![sample("a_training", 584, 565)];
        let prepared = prepare_samples(&samples, Dataset::Drive, None).unwrap();
        let s = &prepared["a_training"];
        assert_eq!(s.padded_size, (592, 592));
        assert_eq!(s.original_size, (584, 565));
    }

    #[test]
    fn patch_crops_large_and_pads_small_samples() {
        let samples = vec![sample("big", 20, 30), sample("small", 6, 10)];
        let prepared = prepare_samples(&samples, Dataset::Drive, Some(8)).unwrap();
        let big = &prepared["big"];
        assert_eq!(big.padded_size, (8, 8));
        assert_eq!(big.original_size, (8, 8));
        // Center crop: rows 6..14, cols 11..19 of the checkerboard.
        assert_eq!(big.annotation[(0, 0)], ((6 + 11) % 2) as f64);
        let small = &prepared["small"];
        assert_eq!(small.padded_size, (8, 8));
        assert_eq!(small.original_size, (6, 8));
        assert_eq!(small.pad_offsets(), (1, 0));
    }

    #[test]
    fn units_expand_stare_folds_and_respect_pins() {
        let mut cfg = RunConfig::default();
        cfg.dataset = "stare".into();
        let units = run_units(&cfg, Dataset::Stare).unwrap();
        assert_eq!(units.len(), STARE_FOLDS);
        assert_eq!(units[2].fold, Some(2));

        cfg.fold = Some(3);
        let units = run_units(&cfg, Dataset::Stare).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].dir_name(), "run_seed1_fold3");

        let mut cfg = RunConfig::default();
        cfg.runs = 2;
        let units = run_units(&cfg, Dataset::Drive).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[1].dir_name(), "run_seed2");
    }

    #[test]
    fn tables_use_the_published_column_order() {
        let cells = [Some(0.9795), Some(0.8512), Some(0.9682), None, Some(0.9131)];
        let table = format_table("Method", &[("Backbone with BC".into(), cells)]);
        let mut lines = table.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("Method"));
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols, ["Method", "Sp", "Se", "Acc", "AUC", "G-mean"]);
        let row = lines.next().unwrap();
        assert!(row.starts_with("Backbone with BC"));
        assert!(row.contains("0.9795"));
        assert!(row.contains("n/a"));
    }
}
