//! Dataset manifests, image and mask files, tiling and splits.
//!
//! A manifest is a tab-separated text file:
//!
//! ```text
//! #crackclf-manifest v1
//! #dataset	cfd
//! #tile_size	64
//! images/001.png	masks/001.png	train
//! images/002.png	masks/002.png	test
//! ```
//!
//! The first line is mandatory. `#dataset` and `#tile_size` are optional
//! headers; other lines starting with `#` are comments. Each record holds an
//! image path, a mask path and one of `train`, `val`, `test`. Relative paths
//! are resolved against the manifest's directory. Paths may not contain tabs.

#![allow(clippy::tabs_in_doc_comments)]

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crackclf_core::trainer::Sample;
use crackclf_core::{BinaryMask, Tensor};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MANIFEST_MAGIC: &str = "#crackclf-manifest v1";

/// 8-bit mask values at or above this are crack.
pub const MASK_THRESHOLD: u8 = 128;

/// Side lengths the segmentation network accepts are multiples of this.
pub const INPUT_DIVISOR: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset: String,
    pub tile_size: Option<usize>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(dataset: &str) -> Self {
        DatasetManifest {
            dataset: dataset.to_string(),
            tile_size: None,
            entries: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    /// Parses manifest text. Errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MANIFEST_MAGIC => {}
            _ => return Err(format!("line 1: expected `{MANIFEST_MAGIC}`")),
        }
        let mut m = DatasetManifest::new("");
        for (i, raw) in lines {
            let line = raw.trim_end_matches(['\r', '\n']);
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let mut parts = header.splitn(2, '\t');
                match (parts.next(), parts.next()) {
                    (Some("dataset"), Some(v)) => m.dataset = v.to_string(),
                    (Some("tile_size"), Some(v)) => {
                        let t = v.trim().parse().map_err(|_| format!("line {n}: bad tile_size `{v}`"))?;
                        m.tile_size = Some(t);
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(format!(
                    "line {n}: expected 3 tab-separated fields, got {}",
                    fields.len()
                ));
            }
            let split = fields[2].trim().parse().map_err(|e| format!("line {n}: {e}"))?;
            m.entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask: PathBuf::from(fields[1]),
                split,
            });
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\n#dataset\t{}\n", self.dataset);
        if let Some(t) = self.tile_size {
            s.push_str(&format!("#tile_size\t{t}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.image.display(), e.mask.display(), e.split));
        }
        s
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut m = Self::parse(&text).map_err(|e| AppError::format(path, e))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &m.entries {
            for p in [&e.image, &e.mask] {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(AppError::format(
                        path,
                        format!("referenced file {} does not exist", full.display()),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_text()).map_err(|e| AppError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    /// Relabels entries with `assignment`, one split per entry.
    pub fn with_splits(mut self, assignment: &[Split]) -> AppResult<Self> {
        if assignment.len() != self.entries.len() {
            return Err(AppError::Config(format!(
                "{} split labels for {} entries",
                assignment.len(),
                self.entries.len()
            )));
        }
        for (e, &s) in self.entries.iter_mut().zip(assignment) {
            e.split = s;
        }
        Ok(self)
    }
}

fn decode(path: &Path) -> AppResult<image::DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| AppError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| AppError::io(path, e))?;
    reader
        .decode()
        .map_err(|e| AppError::format(path, format!("not a readable image: {e}")))
}

/// An RGB image as `[3, H, W]` with values `v / 255`.
pub fn load_image(path: &Path) -> AppResult<Tensor> {
    Ok(rgb_to_tensor(&decode(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] as f64 / 255.0
    })
}

/// A mask read as 8-bit gray and binarised at [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> AppResult<BinaryMask> {
    let g = decode(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    BinaryMask::new(h, w, g.as_raw().iter().map(|&v| v >= MASK_THRESHOLD).collect()).map_err(Into::into)
}

/// An 8-bit gray image as values `v / 255`, shaped `[1, H, W]`.
pub fn load_gray(path: &Path) -> AppResult<Tensor> {
    let g = decode(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Tensor::from_fn(&[1, h, w], |i| g.as_raw()[i] as f64 / 255.0))
}

/// Loads one manifest entry, checking that image and mask sizes agree.
pub fn load_pair(manifest: &DatasetManifest, entry: &ManifestEntry) -> AppResult<Sample> {
    let ip = manifest.resolve(&entry.image);
    let mp = manifest.resolve(&entry.mask);
    let image = load_image(&ip)?;
    let mask = load_mask(&mp)?;
    let (_, h, w) = image.dims3()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(AppError::format(
            &mp,
            format!(
                "mask is {}x{} but image {} is {}x{}",
                mask.height(),
                mask.width(),
                ip.display(),
                h,
                w
            ),
        ));
    }
    Ok(Sample { image, mask })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds values to the nearest multiple of `1/255`, as a PNG round trip does.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn tensor_to_rgb(t: &Tensor) -> AppResult<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(AppError::Config(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    }))
}

fn save(img: impl Into<image::DynamicImage>, path: &Path) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AppError::format(path, e))
}

pub fn save_image(t: &Tensor, path: &Path) -> AppResult<()> {
    save(tensor_to_rgb(t)?, path)
}

/// Writes a mask as 8-bit gray PNG with values 0 and 255.
pub fn save_mask(m: &BinaryMask, path: &Path) -> AppResult<()> {
    let img = GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save(img, path)
}

/// Crops `image` (`[C,H,W]`) to the rectangle at `(top, left)` of size `h x w`.
pub fn crop_tensor(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> AppResult<Tensor> {
    let (c, ih, iw) = image.dims3()?;
    if top + h > ih || left + w > iw {
        return Err(AppError::Config(format!(
            "crop {h}x{w} at ({top}, {left}) exceeds {ih}x{iw}"
        )));
    }
    let d = image.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[ch * ih * iw + (top + y) * iw + left + x]
    }))
}

pub fn crop_mask(mask: &BinaryMask, top: usize, left: usize, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| mask.get(top + y, left + x))
}

/// Largest centred crop whose sides are multiples of `divisor`. Returns
/// `(top, left, height, width)`.
pub fn center_crop_box(h: usize, w: usize, divisor: usize) -> (usize, usize, usize, usize) {
    let (ch, cw) = (h - h % divisor, w - w % divisor);
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Centre-crops a sample so both sides are multiples of `divisor`.
pub fn center_crop(sample: &Sample, divisor: usize) -> AppResult<Sample> {
    let (_, h, w) = sample.image.dims3()?;
    let (top, left, ch, cw) = center_crop_box(h, w, divisor);
    if ch == 0 || cw == 0 {
        return Err(AppError::Config(format!("{h}x{w} is smaller than {divisor}x{divisor}")));
    }
    Ok(Sample {
        image: crop_tensor(&sample.image, top, left, ch, cw)?,
        mask: crop_mask(&sample.mask, top, left, ch, cw),
    })
}

/// Splits a sample into a `grid x grid` partition of equal tiles, row-major,
/// after centre-cropping to a multiple of `grid`.
pub fn tile(sample: &Sample, grid: usize) -> AppResult<Vec<Sample>> {
    let (_, h, w) = sample.image.dims3()?;
    if grid == 0 || h < grid || w < grid {
        return Err(AppError::Config(format!(
            "cannot cut a {h}x{w} image into a {grid}x{grid} grid"
        )));
    }
    let cropped = center_crop(sample, grid)?;
    let (th, tw) = (cropped.mask.height() / grid, cropped.mask.width() / grid);
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            out.push(Sample {
                image: crop_tensor(&cropped.image, r * th, c * tw, th, tw)?,
                mask: crop_mask(&cropped.mask, r * th, c * tw, th, tw),
            });
        }
    }
    Ok(out)
}

/// Loads every entry of `split`, centre-cropping images whose sides are not
/// multiples of [`INPUT_DIVISOR`]. Returns entry names alongside samples.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> AppResult<Vec<(String, Sample)>> {
    manifest
        .entries_in(split)
        .map(|e| {
            let s = load_pair(manifest, e)?;
            let (_, h, w) = s.image.dims3()?;
            let s = if h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
                let c = center_crop(&s, INPUT_DIVISOR)?;
                log::warn!(
                    "{}: {h}x{w} is not a multiple of {INPUT_DIVISOR}, centre-cropped to {}x{}",
                    e.image.display(),
                    c.mask.height(),
                    c.mask.width()
                );
                c
            } else {
                s
            };
            Ok((entry_name(e), s))
        })
        .collect()
}

/// File stem of an entry's image.
pub fn entry_name(e: &ManifestEntry) -> String {
    e.image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| e.image.display().to_string())
}

/// Per-split counts from fractions: train and val are rounded, test takes
/// the rest.
pub fn counts_from_fractions(n: usize, fractions: [f64; 3]) -> AppResult<[usize; 3]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(AppError::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let train = ((fractions[0] * n as f64).round() as usize).min(n);
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

/// A seeded shuffle of `n` entries into consecutive runs of train, val and
/// test of the given sizes.
pub fn assign_counts(n: usize, counts: [usize; 3], seed: u64) -> AppResult<Vec<Split>> {
    if n == 0 {
        return Err(AppError::Config("cannot split an empty manifest".into()));
    }
    if counts.iter().sum::<usize>() != n {
        return Err(AppError::Config(format!(
            "split counts {counts:?} do not add up to {n} entries"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    let mut k = 0;
    for (split, &c) in Split::ALL.iter().zip(&counts) {
        for &i in &order[k..k + c] {
            out[i] = *split;
        }
        k += c;
    }
    Ok(out)
}

pub fn assign_fractions(n: usize, fractions: [f64; 3], seed: u64) -> AppResult<Vec<Split>> {
    if n == 0 {
        return Err(AppError::Config("cannot split an empty manifest".into()));
    }
    assign_counts(n, counts_from_fractions(n, fractions)?, seed)
}

/// The 72 / 0 / 46 train/val/test split of the 118-image CFD set, as fractions.
pub const CFD_FRACTIONS: [f64; 3] = [72.0 / 118.0, 0.0, 46.0 / 118.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_bad_records() {
        assert!(DatasetManifest::parse("a\tb\ttrain\n").is_err());
        let e = DatasetManifest::parse(&format!("{MANIFEST_MAGIC}\na\tb\n")).unwrap_err();
        assert!(e.contains("line 2"), "{e}");
        let e = DatasetManifest::parse(&format!("{MANIFEST_MAGIC}\n# note\na\tb\tdev\n")).unwrap_err();
        assert!(e.contains("line 3") && e.contains("dev"), "{e}");
    }

    #[test]
    fn headers_and_comments() {
        let m = DatasetManifest::parse(&format!(
            "{MANIFEST_MAGIC}\n#dataset\tcrack500\n#tile_size\t64\n# hi\n\na.png\tb.png\tval\n"
        ))
        .unwrap();
        assert_eq!(m.dataset, "crack500");
        assert_eq!(m.tile_size, Some(64));
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].split, Split::Val);
    }

    #[test]
    fn fraction_rounding() {
        assert_eq!(counts_from_fractions(118, CFD_FRACTIONS).unwrap(), [72, 0, 46]);
        assert_eq!(counts_from_fractions(10, [1.0, 0.0, 0.0]).unwrap(), [10, 0, 0]);
        assert_eq!(counts_from_fractions(10, [0.35, 0.35, 0.3]).unwrap(), [4, 4, 2]);
        assert!(counts_from_fractions(10, [0.5, 0.2, 0.2]).is_err());
        assert!(assign_fractions(0, [1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn crop_box_centres() {
        assert_eq!(center_crop_box(2000, 1500, 4), (0, 0, 2000, 1500));
        assert_eq!(center_crop_box(37, 50, 16), (2, 1, 32, 48));
    }
}
