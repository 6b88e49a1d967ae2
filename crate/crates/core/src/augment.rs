//! Training-set expansion with random geometric, brightness and coarse
//! dropout transforms applied directly to spectrogram images.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::signal::{SpectrogramImage, SplitRole};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseDropout {
    /// Fraction of half-resolution cells zeroed when applied.
    pub pixel_frac: f64,
    /// Per-image application probability is drawn uniformly from this range.
    pub apply_prob: (f64, f64),
    /// Grid scale; 0.5 turns every dropped cell into a 2×2 block.
    pub downscale: f64,
}

impl Default for CoarseDropout {
    fn default() -> Self {
        Self {
            pixel_frac: 0.02,
            apply_prob: (0.2, 0.5),
            downscale: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub zoom_range: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    pub rotation_deg: f64,
    pub brightness_range: (f64, f64),
    pub coarse_dropout: CoarseDropout,
    pub expansion_factor: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_range: 0.15,
            width_shift: 0.15,
            height_shift: 0.10,
            rotation_deg: 10.0,
            brightness_range: (0.5, 1.5),
            coarse_dropout: CoarseDropout::default(),
            expansion_factor: 3,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errors.push(msg);
            }
        };
        check(
            (0.0..1.0).contains(&self.zoom_range),
            format!("aug_zoom_range {} must be in [0, 1)", self.zoom_range),
        );
        check(
            (0.0..=1.0).contains(&self.width_shift),
            format!("aug_width_shift {} must be in [0, 1]", self.width_shift),
        );
        check(
            (0.0..=1.0).contains(&self.height_shift),
            format!("aug_height_shift {} must be in [0, 1]", self.height_shift),
        );
        check(
            (0.0..=180.0).contains(&self.rotation_deg),
            format!("aug_rotation_deg {} must be in [0, 180]", self.rotation_deg),
        );
        let (lo, hi) = self.brightness_range;
        check(
            lo >= 0.0 && lo <= hi && hi.is_finite(),
            format!("aug_brightness range [{lo}, {hi}] is not an ordered non-negative range"),
        );
        let cd = &self.coarse_dropout;
        check(
            (0.0..=1.0).contains(&cd.pixel_frac),
            format!("aug_dropout_frac {} must be in [0, 1]", cd.pixel_frac),
        );
        let (plo, phi) = cd.apply_prob;
        check(
            (0.0..=1.0).contains(&plo) && (0.0..=1.0).contains(&phi) && plo <= phi,
            format!("aug_dropout_prob range [{plo}, {phi}] must be ordered within [0, 1]"),
        );
        check(
            cd.downscale > 0.0 && cd.downscale <= 1.0,
            format!("aug_dropout_downscale {} must be in (0, 1]", cd.downscale),
        );
        check(
            self.expansion_factor >= 1,
            "aug_expansion_factor must be at least 1".to_string(),
        );
        errors
    }
}

/// One concrete draw of every transform parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub zoom: f64,
    /// Shifts in pixels; positive moves content right / down.
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotation_deg: f64,
    pub brightness: f64,
    pub dropout: bool,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        zoom: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
        rotation_deg: 0.0,
        brightness: 1.0,
        dropout: false,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let zoom = 1.0 + sym(rng, cfg.zoom_range);
        let shift_x = sym(rng, cfg.width_shift) * width as f64;
        let shift_y = sym(rng, cfg.height_shift) * height as f64;
        let rotation_deg = sym(rng, cfg.rotation_deg);
        let (lo, hi) = cfg.brightness_range;
        let brightness = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (plo, phi) = cfg.coarse_dropout.apply_prob;
        let p = if phi > plo { rng.random_range(plo..=phi) } else { plo };
        let dropout = rng.random::<f64>() < p;
        Self {
            zoom,
            shift_x,
            shift_y,
            rotation_deg,
            brightness,
            dropout,
        }
    }
}

fn bilinear_clamped(src: &GrayImage, y: f64, x: f64) -> f64 {
    let (h, w) = (src.height(), src.width());
    // Nearest fill: out-of-frame coordinates take the closest edge pixel.
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |r, c| f64::from(src.get(r, c));
    let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
    let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
    top + fy * (bottom - top)
}

/// Zoom about the centre, then shift, then rotate about the centre, sampled
/// bilinearly through the inverse map; then brightness with clamping.
pub fn apply_geometry_and_brightness(src: &GrayImage, params: &AugmentParams) -> GrayImage {
    let (h, w) = (src.height(), src.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // Undo the rotation, the shift, then the zoom.
            let ry = cos * dy - sin * dx;
            let rx = sin * dy + cos * dx;
            let sy = (ry - params.shift_y) / params.zoom + cy;
            let sx = (rx - params.shift_x) / params.zoom + cx;
            let v = bilinear_clamped(src, sy, sx) * params.brightness;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(h, w, out).expect("same dimensions as the source")
}

/// Zeroes `round(pixel_frac · cells)` distinct cells of the downscaled grid,
/// each covering a `1/downscale`-sized block aligned to the block grid.
/// Returns the top-left corners of the zeroed blocks.
pub fn drop_blocks<R: Rng + ?Sized>(image: &mut GrayImage, cfg: &CoarseDropout, rng: &mut R) -> Vec<(usize, usize)> {
    let block = (1.0 / cfg.downscale).round().max(1.0) as usize;
    let (h, w) = (image.height(), image.width());
    let (gh, gw) = (h.div_ceil(block), w.div_ceil(block));
    let cells = gh * gw;
    let count = ((cfg.pixel_frac * cells as f64).round() as usize).min(cells);
    let chosen = rand::seq::index::sample(rng, cells, count);
    let mut corners: Vec<(usize, usize)> = chosen.iter().map(|i| ((i / gw) * block, (i % gw) * block)).collect();
    corners.sort_unstable();
    let pixels = image.pixels_mut();
    for &(r0, c0) in &corners {
        for r in r0..(r0 + block).min(h) {
            for c in c0..(c0 + block).min(w) {
                pixels[r * w + c] = 0;
            }
        }
    }
    corners
}

/// Applies the dropout with a per-image probability drawn from
/// `cfg.apply_prob`. Returns whether it fired.
pub fn coarse_dropout<R: Rng + ?Sized>(image: &mut GrayImage, cfg: &CoarseDropout, rng: &mut R) -> bool {
    let (lo, hi) = cfg.apply_prob;
    let p = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let fire = rng.random::<f64>() < p;
    if fire {
        drop_blocks(image, cfg, rng);
    }
    fire
}

/// Applies a concrete parameter draw; dropout blocks come from `rng`.
pub fn apply_params<R: Rng + ?Sized>(
    src: &GrayImage,
    params: &AugmentParams,
    cfg: &CoarseDropout,
    rng: &mut R,
) -> GrayImage {
    let mut out = apply_geometry_and_brightness(src, params);
    if params.dropout {
        drop_blocks(&mut out, cfg, rng);
    }
    out
}

/// Seed of the stream for copy `copy_index` of image `image_index`.
pub fn stream_seed(seed: u64, image_index: usize, copy_index: usize) -> u64 {
    derive_seed(derive_seed(seed, image_index as u64), copy_index as u64)
}

/// One augmented copy; label, provenance and split are carried over.
pub fn augment_one(image: &SpectrogramImage, cfg: &AugmentConfig, stream: u64) -> SpectrogramImage {
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let params = AugmentParams::sample(cfg, image.image.height(), image.image.width(), &mut rng);
    SpectrogramImage {
        image: apply_params(&image.image, &params, &cfg.coarse_dropout, &mut rng),
        ..image.clone()
    }
}

/// One row of `augmented.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageRow {
    pub path: String,
    pub parent_path: String,
    pub copy_index: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    /// Originals first, in input order, then the augmented copies.
    pub images: Vec<SpectrogramImage>,
    pub lineage: Vec<LineageRow>,
}

fn augmented_id(parent: &str, copy_index: usize) -> String {
    let stem = Path::new(parent).file_stem().and_then(|s| s.to_str()).unwrap_or(parent);
    format!("augmented/{stem}_aug{copy_index}.pgm")
}

/// Keeps every original and appends `expansion_factor − 1` augmented copies
/// of each. Refuses images assigned to a test split.
pub fn expand_dataset(train: &[SpectrogramImage], cfg: &AugmentConfig) -> Result<Expansion> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if let Some(bad) = train.iter().find(|img| img.split == SplitRole::Test) {
        return Err(Error::Lineage(format!(
            "`{}` belongs to a test split and cannot be augmented",
            bad.id
        )));
    }
    let mut images = train.to_vec();
    let mut lineage = Vec::with_capacity(train.len() * (cfg.expansion_factor - 1));
    for copy_index in 1..cfg.expansion_factor {
        for (i, img) in train.iter().enumerate() {
            let seed = stream_seed(cfg.seed, i, copy_index);
            let mut aug = augment_one(img, cfg, seed);
            aug.id = augmented_id(&img.id, copy_index);
            lineage.push(LineageRow {
                path: aug.id.clone(),
                parent_path: img.id.clone(),
                copy_index,
                seed,
            });
            images.push(aug);
        }
    }
    Ok(Expansion { images, lineage })
}

/// Writes the augmented PGMs under `dir` and `dir/augmented.csv`.
pub fn write_expansion(dir: &Path, expansion: &Expansion) -> Result<()> {
    let sub = dir.join("augmented");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let by_id: std::collections::HashMap<&str, &SpectrogramImage> =
        expansion.images.iter().map(|i| (i.id.as_str(), i)).collect();
    for row in &expansion.lineage {
        let img = by_id
            .get(row.path.as_str())
            .ok_or_else(|| Error::Lineage(format!("lineage row `{}` has no image", row.path)))?;
        img.image.write_pgm(&dir.join(&row.path))?;
    }
    write_lineage(&dir.join("augmented.csv"), &expansion.lineage)
}

pub fn write_lineage(path: &Path, rows: &[LineageRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("csv", e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_lineage(path: &Path) -> Result<Vec<LineageRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("augmented manifest", e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format("augmented manifest", e.to_string())))
        .collect()
}

/// Checks that no augmented image or ancestor of one is in the test set and
/// that every ancestor is in the train set.
pub fn audit_lineage(lineage: &[LineageRow], train_ids: &HashSet<&str>, test_ids: &HashSet<&str>) -> Result<()> {
    for row in lineage {
        if test_ids.contains(row.path.as_str()) {
            return Err(Error::Lineage(format!(
                "augmented image `{}` is in the test split",
                row.path
            )));
        }
        if test_ids.contains(row.parent_path.as_str()) {
            return Err(Error::Lineage(format!(
                "`{}` was derived from test image `{}`",
                row.path, row.parent_path
            )));
        }
        if !train_ids.contains(row.parent_path.as_str()) {
            return Err(Error::Lineage(format!(
                "ancestor `{}` of `{}` is not in the train split",
                row.parent_path, row.path
            )));
        }
    }
    Ok(())
}
