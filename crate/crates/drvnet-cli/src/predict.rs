//! `predict`: segment a single fundus photograph.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;

use drvnet::data::{crop_to_original, load_image, zero_pad, Dataset, RetinalSample};
use drvnet::evaluation::{binarize, write_mask_png, write_prob_png};
use drvnet::network::{DrVNet, SPATIAL_MULTIPLE};
use drvnet::rng::{substream, Stream};
use drvnet::{Checkpoint, Error, Result};

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Fundus image to segment
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Binarization threshold
    #[arg(long, value_name = "T", default_value_t = 0.5)]
    pub threshold: f64,
}

pub fn run(args: &PredictArgs) -> Result<()> {
    if !args.threshold.is_finite() || !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::Config(format!(
            "threshold {} outside [0, 1]",
            args.threshold
        )));
    }

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut rng = substream(0, Stream::Init);
    let mut model = DrVNet::new(&ckpt.config, &mut rng)?;
    ckpt.apply_to(&mut model)?;

    let image = load_image(&args.image)?;
    let (h, w, _) = image.dim();
    let stem = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    // The network downsamples three times, so each side is padded up to
    // the next multiple of 8; the outputs are cropped back afterwards.
    let sample = RetinalSample {
        identifier: stem.clone(),
        dataset: Dataset::Drive,
        image,
        annotation: Array2::zeros((h, w)),
        original_size: (h, w),
        padded_size: (h, w),
    };
    let ceil = |v: usize| v.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
    let padded = zero_pad(&sample, ceil(h), ceil(w))?;

    let started = Instant::now();
    let (_, final_map) = model.forward_full(&padded.image)?;
    let secs = started.elapsed().as_secs_f64();

    let map = crop_to_original(&final_map, (h, w), padded.pad_offsets())?;
    let mask = binarize(&map, args.threshold)?;
    std::fs::create_dir_all(&args.out)?;
    let prob_path = args.out.join(format!("{stem}_prob.png"));
    let mask_path = args.out.join(format!("{stem}_mask.png"));
    write_prob_png(&prob_path, &map)?;
    write_mask_png(&mask_path, &mask)?;

    println!("{w}x{h} forward in {secs:.3} s");
    println!("{}", prob_path.display());
    println!("{}", mask_path.display());
    Ok(())
}
