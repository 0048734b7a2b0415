//! Dataset ingestion and geometry.
//!
//! Three public retinal datasets are supported, each with its own
//! directory convention. Loading normalizes images to `[0,1]` RGB and
//! binarizes expert annotations; zero-padding to the network's spatial
//! multiple and the exact inverse crop are explicit operations so that
//! predictions can be scored at the original resolution. Augmentation is
//! restricted to annotation-exact transforms (right-angle rotations,
//! flips, transposition) and is driven entirely by caller-supplied RNG
//! substreams.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, SeedRng, Stream};

/// The supported benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataset {
    Drive,
    ChaseDb,
    Stare,
}

impl Dataset {
    /// Square side the dataset's images are zero-padded to.
    pub fn padded_side(self) -> usize {
        match self {
            Dataset::Drive => 592,
            Dataset::ChaseDb => 1008,
            Dataset::Stare => 704,
        }
    }

    /// Mini-batch size used during training.
    pub fn batch_size(self) -> usize {
        match self {
            Dataset::Drive | Dataset::Stare => 2,
            Dataset::ChaseDb => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Dataset::Drive => "DRIVE",
            Dataset::ChaseDb => "CHASEDB",
            Dataset::Stare => "STARE",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DRIVE" => Ok(Dataset::Drive),
            "CHASEDB" | "CHASE_DB" | "CHASE" => Ok(Dataset::ChaseDb),
            "STARE" => Ok(Dataset::Stare),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected DRIVE, CHASEDB or STARE)"
            ))),
        }
    }
}

/// One image/annotation pair.
#[derive(Debug, Clone)]
pub struct RetinalSample {
    pub identifier: String,
    pub dataset: Dataset,
    /// `(h, w, 3)` RGB in `[0, 1]`.
    pub image: Array3<f64>,
    /// `(h, w)` strictly binary mask.
    pub annotation: Array2<f64>,
    /// `(h, w)` before any padding.
    pub original_size: (usize, usize),
    /// `(H, W)` the sample currently occupies; equals `original_size`
    /// until [`zero_pad`] is applied.
    pub padded_size: (usize, usize),
}

impl RetinalSample {
    /// Top/left placement offsets of the original content inside the
    /// padded frame (bottom/right get the remainder).
    pub fn pad_offsets(&self) -> (usize, usize) {
        (
            (self.padded_size.0 - self.original_size.0) / 2,
            (self.padded_size.1 - self.original_size.1) / 2,
        )
    }

    /// Enforce the type's invariants; loaders call this on every sample.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.padded_size;
        if self.image.dim() != (h, w, 3) {
            return Err(Error::Internal(format!(
                "sample {}: image shape {:?} vs recorded size {:?}",
                self.identifier,
                self.image.dim(),
                (h, w, 3)
            )));
        }
        if self.annotation.dim() != (h, w) {
            return Err(Error::Internal(format!(
                "sample {}: annotation shape {:?} vs recorded size {:?}",
                self.identifier,
                self.annotation.dim(),
                (h, w)
            )));
        }
        if self.image.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Format(format!(
                "sample {}: image values outside [0,1]",
                self.identifier
            )));
        }
        if self.annotation.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Format(format!(
                "sample {}: annotation is not binary",
                self.identifier
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Padding and inverse cropping
// ---------------------------------------------------------------------------

/// Place the sample centrally on an `H×W` zero canvas. The pad is split
/// floor/ceil across opposite margins.
pub fn zero_pad(sample: &RetinalSample, target_h: usize, target_w: usize) -> Result<RetinalSample> {
    let (h, w) = sample.padded_size;
    if target_h < h || target_w < w {
        return Err(Error::InvalidInput(format!(
            "padding target {target_h}x{target_w} is smaller than the sample's {h}x{w}"
        )));
    }
    let top = (target_h - h) / 2;
    let left = (target_w - w) / 2;

    let mut image = Array3::zeros((target_h, target_w, 3));
    image
        .slice_mut(s![top..top + h, left..left + w, ..])
        .assign(&sample.image);
    let mut annotation = Array2::zeros((target_h, target_w));
    annotation
        .slice_mut(s![top..top + h, left..left + w])
        .assign(&sample.annotation);

    Ok(RetinalSample {
        identifier: sample.identifier.clone(),
        dataset: sample.dataset,
        image,
        annotation,
        original_size: sample.original_size,
        padded_size: (target_h, target_w),
    })
}

/// Cut the `original_size` window placed at `offsets` back out of a
/// padded map. Exact inverse of [`zero_pad`]'s placement.
pub fn crop_to_original(
    map: &Array2<f64>,
    original_size: (usize, usize),
    offsets: (usize, usize),
) -> Result<Array2<f64>> {
    let (h, w) = original_size;
    let (top, left) = offsets;
    let (mh, mw) = map.dim();
    if top + h > mh || left + w > mw {
        return Err(Error::InvalidInput(format!(
            "crop window {h}x{w} at offset ({top},{left}) exceeds map {mh}x{mw}"
        )));
    }
    Ok(map.slice(s![top..top + h, left..left + w]).to_owned())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// One concrete geometric transform: a right-angle rotation followed by
/// optional horizontal/vertical flips and a transposition. Every member
/// maps the pixel grid onto itself, so annotations stay binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    /// Number of 90° counter-clockwise rotations, 0–3.
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub transpose: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        hflip: false,
        vflip: false,
        transpose: false,
    };

    /// Draw a transform: rotation uniform over the four right angles,
    /// each flip and the transposition independently with p = 1/2.
    pub fn sample(rng: &mut SeedRng) -> Transform {
        Transform {
            quarter_turns: rng.gen_range(0u8..4),
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            transpose: rng.gen_bool(0.5),
        }
    }

    pub fn apply(&self, sample: &RetinalSample) -> RetinalSample {
        let mut image = sample.image.clone();
        let mut annotation = sample.annotation.clone();
        for _ in 0..self.quarter_turns {
            image = rot90_rgb(&image);
            annotation = rot90(&annotation);
        }
        if self.hflip {
            image.invert_axis(ndarray::Axis(1));
            annotation.invert_axis(ndarray::Axis(1));
        }
        if self.vflip {
            image.invert_axis(ndarray::Axis(0));
            annotation.invert_axis(ndarray::Axis(0));
        }
        if self.transpose {
            image = image.permuted_axes([1, 0, 2]).as_standard_layout().to_owned();
            annotation = annotation.t().as_standard_layout().to_owned();
        }
        let image = image.as_standard_layout().to_owned();
        let annotation = annotation.as_standard_layout().to_owned();
        let size = (annotation.dim().0, annotation.dim().1);
        RetinalSample {
            identifier: sample.identifier.clone(),
            dataset: sample.dataset,
            image,
            annotation,
            // Geometry may have swapped h and w; record what now holds.
            original_size: if self.swaps_axes() {
                (sample.original_size.1, sample.original_size.0)
            } else {
                sample.original_size
            },
            padded_size: size,
        }
    }

    fn swaps_axes(&self) -> bool {
        (self.quarter_turns % 2 == 1) ^ self.transpose
    }
}

fn rot90(a: &Array2<f64>) -> Array2<f64> {
    // Counter-clockwise: out[i, j] = a[j, w-1-i].
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(i, j)| a[(j, w - 1 - i)])
}

fn rot90_rgb(a: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = a.dim();
    Array3::from_shape_fn((w, h, c), |(i, j, k)| a[(j, w - 1 - i, k)])
}

/// Draw a transform from `rng` and apply it.
pub fn augment(sample: &RetinalSample, rng: &mut SeedRng) -> RetinalSample {
    Transform::sample(rng).apply(sample)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// A reproducible train/val/test partition. For STARE the four
/// cross-validation folds are carried alongside; `train/val/test` then
/// describe the currently active fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub dataset: Dataset,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<Vec<String>>>,
    /// Which fold `train/val/test` refer to, when `folds` is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_fold: Option<usize>,
}

impl SplitPlan {
    /// Train, validation and test ids must be pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (role, ids) in [
            ("train", &self.train_ids),
            ("val", &self.val_ids),
            ("test", &self.test_ids),
        ] {
            for id in ids {
                if let Some(prev) = seen.insert(id, role) {
                    return Err(Error::Config(format!(
                        "split leakage: id {id} appears in both {prev} and {role}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("split serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read split plan {}: {e}", path.display())))?;
        let plan: SplitPlan = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("split plan {}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Rebuild the plan with fold `k` as the held-out test set. Only
    /// meaningful when `folds` is present.
    pub fn for_fold(&self, k: usize) -> Result<SplitPlan> {
        let folds = self.folds.as_ref().ok_or_else(|| {
            Error::Config("this split plan has no cross-validation folds".into())
        })?;
        if k >= folds.len() {
            return Err(Error::InvalidInput(format!(
                "fold {k} out of range (have {})",
                folds.len()
            )));
        }
        let test_ids = folds[k].clone();
        let mut pool: Vec<String> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        pool.sort();
        let n_val = val_carve(pool.len());
        let mut rng = substream(self.seed, Stream::Custom(0x464f4c44 + k as u64));
        pool.shuffle(&mut rng);
        let val_ids: Vec<String> = pool[..n_val].to_vec();
        let train_ids: Vec<String> = pool[n_val..].to_vec();
        let plan = SplitPlan {
            dataset: self.dataset,
            seed: self.seed,
            train_ids,
            val_ids,
            test_ids,
            folds: Some(folds.clone()),
            active_fold: Some(k),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// 10% of the training pool, at least one image.
fn val_carve(pool: usize) -> usize {
    ((pool as f64) * 0.1).round().max(1.0) as usize
}

/// Number of STARE cross-validation folds.
pub const STARE_FOLDS: usize = 4;

/// Build the canonical split for a dataset from the loaded sample ids.
///
/// * DRIVE keeps the official 20/20 train/test halves (telling them apart
///   by the `_training`/`_test` stem suffix) and carves 2 of the 20
///   training images out for validation, chosen by seed.
/// * CHASE DB takes the first 20 ids in lexicographic order as the
///   train/val pool (18/2 by seed) and the last 8 as test.
/// * STARE shuffles all 20 ids by seed into four folds of five; the
///   returned plan has fold 0 active.
pub fn make_split(dataset: Dataset, ids: &[String], seed: u64) -> Result<SplitPlan> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Config("duplicate sample ids in split input".into()));
    }
    let mut rng = substream(seed, Stream::Split);
    let plan = match dataset {
        Dataset::Drive => {
            let mut pool: Vec<String> = sorted
                .iter()
                .filter(|id| id.ends_with("_training"))
                .cloned()
                .collect();
            let test_ids: Vec<String> = sorted
                .iter()
                .filter(|id| id.ends_with("_test"))
                .cloned()
                .collect();
            if pool.len() + test_ids.len() != sorted.len() {
                return Err(Error::Config(
                    "DRIVE ids must end in `_training` or `_test`".into(),
                ));
            }
            let n_val = val_carve(pool.len());
            pool.shuffle(&mut rng);
            let val_ids = pool[..n_val].to_vec();
            let mut train_ids = pool[n_val..].to_vec();
            train_ids.sort();
            let mut val_ids = val_ids;
            val_ids.sort();
            SplitPlan {
                dataset,
                seed,
                train_ids,
                val_ids,
                test_ids,
                folds: None,
                active_fold: None,
            }
        }
        Dataset::ChaseDb => {
            if sorted.len() <= 8 {
                return Err(Error::Config(format!(
                    "CHASE DB split needs more than 8 images, got {}",
                    sorted.len()
                )));
            }
            let split_at = sorted.len() - 8;
            let mut pool = sorted[..split_at].to_vec();
            let test_ids = sorted[split_at..].to_vec();
            let n_val = val_carve(pool.len());
            pool.shuffle(&mut rng);
            let val_ids = {
                let mut v = pool[..n_val].to_vec();
                v.sort();
                v
            };
            let train_ids = {
                let mut t = pool[n_val..].to_vec();
                t.sort();
                t
            };
            SplitPlan {
                dataset,
                seed,
                train_ids,
                val_ids,
                test_ids,
                folds: None,
                active_fold: None,
            }
        }
        Dataset::Stare => {
            if sorted.len() % STARE_FOLDS != 0 {
                return Err(Error::Config(format!(
                    "STARE needs a multiple of {STARE_FOLDS} images for cross-validation, got {}",
                    sorted.len()
                )));
            }
            let mut shuffled = sorted.clone();
            shuffled.shuffle(&mut rng);
            let per = shuffled.len() / STARE_FOLDS;
            let folds: Vec<Vec<String>> =
                shuffled.chunks(per).map(|c| c.to_vec()).collect();
            let skeleton = SplitPlan {
                dataset,
                seed,
                train_ids: Vec::new(),
                val_ids: Vec::new(),
                test_ids: Vec::new(),
                folds: Some(folds),
                active_fold: None,
            };
            skeleton.for_fold(0)?
        }
    };
    plan.validate()?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

const RASTER_EXTENSIONS: [&str; 7] = ["tif", "tiff", "png", "jpg", "jpeg", "gif", "ppm"];

fn is_raster(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?
        .decode()
        .map_err(|e| Error::Format(format!("cannot decode {}: {e}", path.display())))
}

/// RGB channels scaled to `[0,1]` by the format's maximum value.
/// Widening 8-bit samples to 16-bit multiplies by 257, so dividing by
/// 65535 reproduces `v/255` exactly for 8-bit sources.
fn to_rgb_array(img: &image::DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / f64::from(u16::MAX)
    })
}

/// Any strictly positive intensity counts as vessel.
fn to_binary_mask(img: &image::DynamicImage) -> Array2<f64> {
    let luma = img.to_luma16();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Array2::from_shape_fn((h, w), |(y, x)| {
        if luma.get_pixel(x as u32, y as u32)[0] > 0 {
            1.0
        } else {
            0.0
        }
    })
}

fn list_rasters(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Load(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_raster(p))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Pair every image under `image_dir` with the annotation whose stem is
/// `annotation_stem(image_stem)` in `annotation_dir`.
fn load_pairs(
    dataset: Dataset,
    image_dir: &Path,
    annotation_dir: &Path,
    annotation_stem: impl Fn(&str) -> String,
) -> Result<Vec<RetinalSample>> {
    let mut by_stem: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in list_rasters(annotation_dir)? {
        by_stem.insert(stem(&p), p);
    }
    let mut samples = Vec::new();
    for image_path in list_rasters(image_dir)? {
        let id = stem(&image_path);
        let want = annotation_stem(&id);
        let annotation_path = by_stem.get(&want).ok_or_else(|| {
            Error::Load(format!(
                "no annotation `{want}` in {} for image {}",
                annotation_dir.display(),
                image_path.display()
            ))
        })?;
        let image = to_rgb_array(&decode(&image_path)?);
        let annotation = to_binary_mask(&decode(annotation_path)?);
        let (h, w, _) = image.dim();
        if annotation.dim() != (h, w) {
            return Err(Error::Load(format!(
                "size mismatch for {id}: image {h}x{w}, annotation {:?}",
                annotation.dim()
            )));
        }
        let sample = RetinalSample {
            identifier: id,
            dataset,
            image,
            annotation,
            original_size: (h, w),
            padded_size: (h, w),
        };
        sample.validate()?;
        samples.push(sample);
    }
    samples.sort_by(|a, b| a.identifier.cmp(&b.identifier));
    Ok(samples)
}

/// Read every image/annotation pair under `root`.
///
/// Directory conventions:
/// * DRIVE: `training/images` + `training/1st_manual`, same under
///   `test/`; image `NN_training.tif` pairs with `NN_manual1.gif`.
/// * CHASE DB: flat `images` + `annotations`; image `Image_NNX` pairs
///   with `Image_NNX_1stHO`.
/// * STARE: `images` + `labels`; image `imNNNN` pairs with `imNNNN.ah`
///   (the first annotator's labels).
///
/// Extensions are free within the supported raster set (TIFF, PNG, JPEG,
/// GIF, PPM); pairing goes by file stem.
pub fn load_dataset(root: &Path, dataset: Dataset) -> Result<Vec<RetinalSample>> {
    match dataset {
        Dataset::Drive => {
            let prefix = |id: &str| -> String {
                id.split('_').next().unwrap_or(id).to_string()
            };
            let mut samples = Vec::new();
            for half in ["training", "test"] {
                samples.extend(load_pairs(
                    dataset,
                    &root.join(half).join("images"),
                    &root.join(half).join("1st_manual"),
                    |id| format!("{}_manual1", prefix(id)),
                )?);
            }
            samples.sort_by(|a, b| a.identifier.cmp(&b.identifier));
            Ok(samples)
        }
        Dataset::ChaseDb => load_pairs(
            dataset,
            &root.join("images"),
            &root.join("annotations"),
            |id| format!("{id}_1stHO"),
        ),
        Dataset::Stare => load_pairs(
            dataset,
            &root.join("images"),
            &root.join("labels"),
            |id| format!("{id}.ah"),
        ),
    }
}

/// Read a single fundus photograph as an `(H, W, 3)` array in `[0,1]`,
/// for standalone prediction outside any dataset layout.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    Ok(to_rgb_array(&decode(path)?))
}
