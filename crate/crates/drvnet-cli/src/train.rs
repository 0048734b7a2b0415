//! `train`: one or more seeded two-phase runs with full artifact output.

use std::path::PathBuf;
use std::process::Command;

use drvnet::data::load_dataset;
use drvnet::{Error, Result};

use crate::config::{self, Manifest, Overrides, RunConfig, RunRecord};
use crate::runner::{run_one, run_units, RunUnit};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML config file, or a manifest.json from a previous run
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Overrides,
    /// Run multiple seeds/folds as parallel child processes
    #[arg(long)]
    pub parallel: bool,
    /// Skip writing <out>/manifest.json (parallel workers do this)
    #[arg(long, hide = true)]
    pub no_manifest: bool,
}

fn fmt_val(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let cfg = config::resolve(args.config.as_deref(), &args.flags)?;
    let dataset = cfg.dataset()?;
    let samples = load_dataset(&cfg.data_root, dataset)?;
    let units = run_units(&cfg, dataset)?;
    std::fs::create_dir_all(&cfg.out)?;
    if !args.no_manifest {
        let resolved = toml::to_string_pretty(&cfg)
            .map_err(|e| Error::Internal(format!("config serialization failed: {e}")))?;
        std::fs::write(cfg.out.join("config.resolved.toml"), resolved)?;
    }

    let records = if args.parallel && units.len() > 1 {
        run_workers(&cfg, &units)?
    } else {
        let mut records = Vec::with_capacity(units.len());
        for unit in &units {
            let rec = run_one(&cfg, dataset, &samples, unit, None)?;
            println!(
                "{}: backbone val {} | full val {} | {:.1}s",
                rec.dir,
                fmt_val(rec.best_val_backbone),
                fmt_val(rec.best_val_full),
                rec.wall_secs
            );
            records.push(rec);
        }
        records
    };

    if !args.no_manifest {
        let manifest = Manifest {
            command: "train".into(),
            config_sha256: cfg.sha256(),
            seeds: cfg.effective_seeds()?,
            config: cfg.clone(),
            runs: records,
        };
        let path = cfg.out.join("manifest.json");
        manifest.save(&path)?;
        println!("manifest: {}", path.display());
    }
    Ok(())
}

/// Re-invoke this binary once per unit. Workers write the same per-run
/// artifacts the sequential path does; only the manifest is left to the
/// parent.
fn run_workers(cfg: &RunConfig, units: &[RunUnit]) -> Result<Vec<RunRecord>> {
    let exe = std::env::current_exe()?;
    let resolved = cfg.out.join("config.resolved.toml");
    let mut children = Vec::new();
    for unit in units {
        let mut cmd = Command::new(&exe);
        cmd.arg("train")
            .arg("--config")
            .arg(&resolved)
            .arg("--seed")
            .arg(unit.seed.to_string())
            .arg("--seeds")
            .arg("1")
            .arg("--no-manifest");
        if let Some(k) = unit.fold {
            cmd.arg("--fold").arg(k.to_string());
        }
        let child = cmd
            .spawn()
            .map_err(|e| Error::Load(format!("cannot spawn training worker: {e}")))?;
        children.push((unit, child));
    }

    let mut saw_internal = false;
    let mut saw_failure = false;
    for (unit, mut child) in children {
        let status = child
            .wait()
            .map_err(|e| Error::Internal(format!("lost a training worker: {e}")))?;
        if !status.success() {
            saw_failure = true;
            saw_internal |= status.code() == Some(1);
            eprintln!("worker {} failed: {status}", unit.dir_name());
        }
    }
    if saw_internal {
        return Err(Error::Internal("a training worker hit an internal error".into()));
    }
    if saw_failure {
        return Err(Error::Config("one or more training workers failed".into()));
    }

    units
        .iter()
        .map(|u| {
            let path = cfg.out.join(u.dir_name()).join("run.json");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Load(format!("worker record {} missing: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("invalid worker record {}: {e}", path.display())))
        })
        .collect()
}
