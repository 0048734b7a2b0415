//! `eval`: metric tables and per-image reports from trained checkpoints.

use std::path::PathBuf;

use drvnet::data::{load_dataset, Dataset, SplitPlan};
use drvnet::evaluation::{aggregate, write_image_csv, AggregationMode, RunSummary};
use drvnet::{Checkpoint, Error, Result};

use crate::config::{self, Manifest, Overrides};
use crate::runner::{eval_checkpoint, prepare_samples, report_table, unit_split};

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// TOML config file, or a manifest.json from a previous run
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Overrides,
    /// Checkpoint to evaluate; repeatable. Defaults to the best
    /// checkpoints listed in <out>/manifest.json
    #[arg(long = "checkpoint", value_name = "FILE")]
    pub checkpoints: Vec<PathBuf>,
}

struct EvalUnit {
    name: String,
    ckpt: PathBuf,
    plan: SplitPlan,
}

/// An explicitly requested width must match the checkpoint; the split
/// next to the checkpoint wins over a derived one.
fn check_architecture(flags: &Overrides, ckpt: &Checkpoint, path: &PathBuf) -> Result<()> {
    if let Some(b) = flags.base_channels {
        if b != ckpt.config.base_channels {
            return Err(Error::Incompatible(format!(
                "{} was trained with base_channels = {}, but {b} was requested",
                path.display(),
                ckpt.config.base_channels
            )));
        }
    }
    Ok(())
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let cfg = config::resolve(args.config.as_deref(), &args.flags)?;
    let dataset = cfg.dataset()?;
    let samples = load_dataset(&cfg.data_root, dataset)?;
    let ids: Vec<String> = samples.iter().map(|s| s.identifier.clone()).collect();
    let prepared = prepare_samples(&samples, dataset, cfg.patch)?;
    let eval_dir = cfg.out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;

    let units: Vec<EvalUnit> = if args.checkpoints.is_empty() {
        let manifest_path = cfg.out.join("manifest.json");
        let manifest = Manifest::load(&manifest_path)?;
        manifest
            .runs
            .iter()
            .map(|r| {
                Ok(EvalUnit {
                    name: r.dir.clone(),
                    ckpt: cfg.out.join(r.eval_checkpoint()),
                    plan: SplitPlan::load(&cfg.out.join(&r.split))?,
                })
            })
            .collect::<Result<_>>()?
    } else {
        args.checkpoints
            .iter()
            .enumerate()
            .map(|(i, path)| {
                let sibling = path.parent().map(|d| d.join("split.json"));
                let plan = match sibling.filter(|s| s.is_file()) {
                    Some(s) => SplitPlan::load(&s)?,
                    None => unit_split(dataset, &ids, cfg.seed, cfg.fold)?,
                };
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("checkpoint");
                Ok(EvalUnit {
                    name: format!("ckpt{i}_{stem}"),
                    ckpt: path.clone(),
                    plan,
                })
            })
            .collect::<Result<_>>()?
    };

    let mut summaries: Vec<RunSummary> = Vec::with_capacity(units.len());
    for unit in &units {
        let ckpt = Checkpoint::load(&unit.ckpt)?;
        check_architecture(&args.flags, &ckpt, &unit.ckpt)?;
        let masks = eval_dir.join("masks").join(&unit.name);
        let (summary, images) =
            eval_checkpoint(&ckpt, &unit.plan, &prepared, cfg.threshold, Some(&masks))?;
        write_image_csv(
            &eval_dir.join(format!("images_{}.csv", unit.name)),
            &images,
            &summary,
        )?;
        summaries.push(summary);
    }

    let mode = if dataset == Dataset::Stare {
        AggregationMode::Folds
    } else {
        AggregationMode::Runs
    };
    let report = aggregate(&summaries, mode)?;
    let mut text = format!(
        "{} — {} over {} unit(s), threshold {}\n\n{}",
        dataset.label(),
        match mode {
            AggregationMode::Runs => "runs",
            AggregationMode::Folds => "folds",
        },
        units.len(),
        cfg.threshold,
        report_table(&report)
    );
    for w in &report.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    std::fs::write(eval_dir.join("metrics.txt"), &text)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Internal(format!("report serialization failed: {e}")))?;
    std::fs::write(eval_dir.join("metrics.json"), json + "\n")?;
    print!("{text}");
    Ok(())
}
