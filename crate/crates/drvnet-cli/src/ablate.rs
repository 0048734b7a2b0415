//! `ablate`: train the four method variants on one shared split and
//! print them side by side.

use std::path::PathBuf;

use drvnet::data::{load_dataset, Dataset, SplitPlan};
use drvnet::evaluation::write_image_csv;
use drvnet::{Checkpoint, Error, Result};

use crate::config::{resolve, AblationArm, AblationManifest, Overrides, Variant};
use crate::runner::{
    eval_checkpoint, format_table, prepare_samples, run_one, summary_cells, RunUnit,
};

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    /// Configuration file (TOML, or a JSON manifest from a previous run)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Overrides,
}

pub fn run(args: &AblateArgs) -> Result<()> {
    let base = resolve(args.config.as_deref(), &args.flags)?;
    if base.effective_seeds()?.len() > 1 {
        return Err(Error::Config(
            "the ablation study is a single-run comparison; pass one --seed".into(),
        ));
    }
    let dataset = base.dataset()?;
    let seed = base.seed;
    let fold = match dataset {
        Dataset::Stare => Some(base.fold.unwrap_or(0)),
        _ => base.fold,
    };

    let samples = load_dataset(&base.data_root, dataset)?;
    let out = base.out.join("ablation");
    std::fs::create_dir_all(&out)?;

    let mut arms = Vec::new();
    let mut bcd_backbone: Option<String> = None;
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.variant = variant;
        cfg.out = out.clone();
        let unit = RunUnit {
            seed,
            fold,
            name: Some(variant.label().to_string()),
        };
        // The full network trains only the tail; it adopts the backbone
        // that the BC&D arm already produced on the same split.
        let reuse = match variant {
            Variant::FullBcd => Some(bcd_backbone.as_deref().ok_or_else(|| {
                Error::Internal("full-network arm ran before its backbone arm".into())
            })?),
            _ => None,
        };
        let record = run_one(&cfg, dataset, &samples, &unit, reuse)?;
        if variant == Variant::Bcd {
            bcd_backbone = Some(record.backbone_best.clone());
        }

        let ckpt = Checkpoint::load(&out.join(record.eval_checkpoint()))?;
        let plan = SplitPlan::load(&out.join(&record.split))?;
        let prepared = prepare_samples(&samples, dataset, cfg.patch)?;
        let (summary, images) =
            eval_checkpoint(&ckpt, &plan, &prepared, cfg.threshold, None)?;
        write_image_csv(
            &out.join(&record.dir).join("images.csv"),
            &images,
            &summary,
        )?;
        println!(
            "{}: Acc {:.4}{}",
            variant.row_name(),
            summary.acc,
            summary
                .auc
                .map(|a| format!(", AUC {a:.4}"))
                .unwrap_or_default()
        );

        let weights = cfg.weights();
        arms.push(AblationArm {
            variant,
            row: variant.row_name().to_string(),
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            tail_enabled: variant.tail_enabled(),
            dir: record.dir.clone(),
            checkpoint: record.eval_checkpoint().to_string(),
            backbone_digest: record.backbone_digest.clone(),
            metrics: summary,
        });
    }

    let rows: Vec<(String, [Option<f64>; 5])> = arms
        .iter()
        .map(|a| (a.row.clone(), summary_cells(&a.metrics)))
        .collect();
    let table = format!(
        "{} seed {seed}{}\n\n{}",
        dataset.label(),
        fold.map(|k| format!(" fold {k}")).unwrap_or_default(),
        format_table("Method", &rows)
    );
    std::fs::write(out.join("table.txt"), format!("{table}\n"))?;

    let manifest = AblationManifest {
        config_sha256: base.sha256(),
        config: base,
        seed,
        arms,
    };
    manifest.save(&out.join("manifest.json"))?;

    println!("\n{table}");
    Ok(())
}
