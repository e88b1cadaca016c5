//! Scan ingestion: manifests of anonymized plane images, normalized loading,
//! seeded augmentation and epoch batching.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::{normalize_u8, ImageBatch};
use crate::error::{Error, Result};
use crate::imageops::resample::{self, PlaneSize};
use crate::rng;

/// Standard fetal brain imaging planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Plane {
    TransCerebellum,
    TransThalamic,
    /// Unlabelled images; as a scan filter it accepts every plane.
    Other,
}

impl Plane {
    pub fn as_str(&self) -> &'static str {
        match self {
            Plane::TransCerebellum => "trans-cerebellum",
            Plane::TransThalamic => "trans-thalamic",
            Plane::Other => "other",
        }
    }

    /// Detects a plane label inside a path component or file stem.
    fn detect(text: &str) -> Option<Plane> {
        let t = text.to_ascii_lowercase().replace(['_', ' '], "-");
        if t.contains("trans-cerebellum") || t.contains("transcerebellum") {
            Some(Plane::TransCerebellum)
        } else if t.contains("trans-thalam") || t.contains("transthalam") {
            Some(Plane::TransThalamic)
        } else {
            None
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "trans-cerebellum" => Ok(Plane::TransCerebellum),
            "trans-thalamic" | "trans-thalamus" => Ok(Plane::TransThalamic),
            "other" => Ok(Plane::Other),
            other => Err(Error::InvalidArgument(format!("unknown plane '{other}'"))),
        }
    }
}

/// One source image on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub plane: Plane,
    pub width: u32,
    pub height: u32,
}

/// Deterministically ordered list of source images for one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    plane: Plane,
    checksum: String,
}

/// Result of a directory scan: the manifest plus files that were skipped.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn record_line(r: &ImageRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}",
        r.path.display(),
        r.plane,
        r.width,
        r.height
    )
}

impl DatasetManifest {
    /// Sorts records by path and computes the checksum.
    pub fn new(mut records: Vec<ImageRecord>, plane: Plane) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.width == 0 || r.height == 0) {
            return Err(Error::InvalidArgument(format!(
                "record {} has zero size",
                r.path.display()
            )));
        }
        if plane != Plane::Other {
            if let Some(r) = records.iter().find(|r| r.plane != plane) {
                return Err(Error::InvalidArgument(format!(
                    "record {} is {} but the manifest is filtered to {plane}",
                    r.path.display(),
                    r.plane
                )));
            }
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let mut hasher = Sha256::new();
        for r in &records {
            hasher.update(record_line(r).as_bytes());
            hasher.update(b"\n");
        }
        Ok(Self {
            records,
            plane,
            checksum: hex::encode(hasher.finalize()),
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Writes `path<TAB>plane<TAB>width<TAB>height` lines, LF terminated.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend_from_slice(record_line(r).as_bytes());
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file. The plane filter is the common plane of all
    /// records, or `other` for mixed manifests.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, detail: &str| Error::Format {
            what: "manifest",
            path: path.to_path_buf(),
            detail: format!("line {line}: {detail}"),
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(i + 1, "expected 4 tab-separated fields"));
            }
            records.push(ImageRecord {
                path: PathBuf::from(fields[0]),
                plane: fields[1].parse().map_err(|_| bad(i + 1, "unknown plane"))?,
                width: fields[2].parse().map_err(|_| bad(i + 1, "bad width"))?,
                height: fields[3].parse().map_err(|_| bad(i + 1, "bad height"))?,
            });
        }
        let plane = match records.first() {
            Some(first) if records.iter().all(|r| r.plane == first.plane) => first.plane,
            _ => Plane::Other,
        };
        Self::new(records, plane)
    }
}

/// Lists every decodable raster image under `root` whose plane matches
/// `plane`.
///
/// A file's plane comes from a plane name found in its path below `root`;
/// unlabelled files take the requested plane, so a directory holding a
/// single plane needs no naming convention. `Plane::Other` disables the
/// filter.
pub fn scan_dataset(root: &Path, plane: Plane) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warnings.push(format!("skipped unreadable entry: {e}"));
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !is_image {
            continue;
        }
        let relative = path.strip_prefix(root).unwrap_or(path);
        let detected = relative
            .components()
            .filter_map(|c| c.as_os_str().to_str())
            .filter_map(Plane::detect)
            .last();
        let record_plane = match (detected, plane) {
            (Some(p), _) => p,
            (None, Plane::Other) => Plane::Other,
            (None, requested) => requested,
        };
        if plane != Plane::Other && record_plane != plane {
            continue;
        }
        match decode(path) {
            Ok(img) => records.push(ImageRecord {
                path: path.to_path_buf(),
                plane: record_plane,
                width: img.width(),
                height: img.height(),
            }),
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset {
            root: root.to_path_buf(),
            plane: plane.to_string(),
        });
    }
    Ok(ScanOutcome {
        manifest: DatasetManifest::new(records, plane)?,
        warnings,
    })
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))
}

fn check_load_args(target_size: usize, channels: usize) -> Result<()> {
    if target_size < 8 || !target_size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "target size {target_size} is not a power of two ≥ 8"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    Ok(())
}

/// Converts a decoded raster to normalized planes (`channels` × h × w).
fn to_planes(img: &image::DynamicImage, channels: usize) -> (Vec<f32>, PlaneSize) {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let size = PlaneSize::new(h as usize, w as usize);
    let mut planes = vec![0f32; channels * size.len()];
    for (i, px) in rgb.pixels().enumerate() {
        let [r, g, b] = px.0;
        if channels == 1 {
            let y = if r == g && g == b {
                r
            } else {
                (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            planes[i] = normalize_u8(y);
        } else {
            planes[i] = normalize_u8(r);
            planes[size.len() + i] = normalize_u8(g);
            planes[2 * size.len() + i] = normalize_u8(b);
        }
    }
    (planes, size)
}

/// Loads one image: center square crop, bilinear resize to
/// `target_size`², `channels` channels, values in [−1, 1].
pub fn load_image(record: &ImageRecord, target_size: usize, channels: usize) -> Result<ImageBatch> {
    load_path(&record.path, target_size, channels)
}

pub fn load_path(path: &Path, target_size: usize, channels: usize) -> Result<ImageBatch> {
    check_load_args(target_size, channels)?;
    let img = decode(path)?;
    let (planes, size) = to_planes(&img, channels);
    let out = PlaneSize::new(target_size, target_size);
    let mut data = Vec::with_capacity(channels * out.len());
    for c in 0..channels {
        let plane = &planes[c * size.len()..(c + 1) * size.len()];
        let (square, side) = resample::center_crop_square(plane, size);
        data.extend(resample::resize_bilinear(&square, PlaneSize::new(side, side), out));
    }
    ImageBatch::new([1, channels, target_size, target_size], data)
}

/// Loads every manifest record into one batch, in manifest order.
pub fn load_all(manifest: &DatasetManifest, target_size: usize, channels: usize) -> Result<ImageBatch> {
    let images = manifest
        .records()
        .iter()
        .map(|r| load_image(r, target_size, channels))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::concat(&images)
}

/// Random flip / zoom / rotation policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugmentConfig {
    horizontal_flip_prob: f64,
    zoom_range: (f64, f64),
    rotation_range_deg: (f64, f64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAugmentConfig {
    horizontal_flip_prob: f64,
    zoom_range: (f64, f64),
    rotation_range_deg: (f64, f64),
}

impl<'de> Deserialize<'de> for AugmentConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawAugmentConfig::deserialize(d)?;
        AugmentConfig::new(raw.horizontal_flip_prob, raw.zoom_range, raw.rotation_range_deg)
            .map_err(serde::de::Error::custom)
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            zoom_range: (0.9, 1.1),
            rotation_range_deg: (-10.0, 10.0),
        }
    }
}

impl AugmentConfig {
    pub fn new(
        horizontal_flip_prob: f64,
        zoom_range: (f64, f64),
        rotation_range_deg: (f64, f64),
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&horizontal_flip_prob) {
            return Err(Error::InvalidArgument(format!(
                "flip probability {horizontal_flip_prob} outside [0, 1]"
            )));
        }
        if !(zoom_range.0 > 0.0 && zoom_range.0 <= zoom_range.1) {
            return Err(Error::InvalidArgument(format!(
                "zoom range {zoom_range:?} must satisfy 0 < min ≤ max"
            )));
        }
        if !(rotation_range_deg.0 <= rotation_range_deg.1) {
            return Err(Error::InvalidArgument(format!(
                "rotation range {rotation_range_deg:?} must satisfy min ≤ max"
            )));
        }
        Ok(Self {
            horizontal_flip_prob,
            zoom_range,
            rotation_range_deg,
        })
    }

    /// Policy that leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            zoom_range: (1.0, 1.0),
            rotation_range_deg: (0.0, 0.0),
        }
    }

    pub fn horizontal_flip_prob(&self) -> f64 {
        self.horizontal_flip_prob
    }

    pub fn zoom_range(&self) -> (f64, f64) {
        self.zoom_range
    }

    pub fn rotation_range_deg(&self) -> (f64, f64) {
        self.rotation_range_deg
    }
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Applies the flip / zoom / rotation policy to each image independently.
/// Image `i` draws from its own stream of `seed`, so results do not depend
/// on batch composition.
pub fn augment(batch: &ImageBatch, cfg: &AugmentConfig, seed: u64) -> ImageBatch {
    let [n, c, h, w] = batch.shape();
    let size = PlaneSize::new(h, w);
    let mut out = batch.clone();
    for i in 0..n {
        let mut rng = rng::stream(seed, "augment", i as u64);
        let flip = rng.random::<f64>() < cfg.horizontal_flip_prob;
        let scale = uniform_in(&mut rng, cfg.zoom_range);
        let angle = uniform_in(&mut rng, cfg.rotation_range_deg);
        for ch in 0..c {
            let plane = out.plane_mut(i, ch);
            if flip {
                resample::flip_horizontal(plane, size);
            }
            if scale != 1.0 || angle != 0.0 {
                let warped = resample::zoom_rotate(plane, size, scale, angle);
                plane.copy_from_slice(&warped);
            }
        }
    }
    out
}

/// Seeded permutation of `0..count` for one epoch.
pub fn epoch_order(count: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, "epoch-order", epoch));
    order
}

/// What one entry of a training schedule counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// A full pass over the dataset.
    #[default]
    Epoch,
    /// A single optimizer step on one batch.
    Step,
}

/// Batches processed by schedule unit `index`, each tagged with a global
/// batch number (epoch · batches-per-epoch + position) for seeding.
///
/// In step mode, consecutive units walk through the same seeded epoch
/// permutations that epoch mode uses.
pub fn unit_batches(
    count: usize,
    batch_size: usize,
    shuffle_seed: u64,
    index: u64,
    unit: Unit,
) -> Vec<(u64, Vec<usize>)> {
    let per_epoch = count.div_ceil(batch_size).max(1) as u64;
    match unit {
        Unit::Epoch => epoch_order(count, shuffle_seed, index)
            .chunks(batch_size)
            .enumerate()
            .map(|(b, c)| (index * per_epoch + b as u64, c.to_vec()))
            .collect(),
        Unit::Step => {
            let epoch = index / per_epoch;
            let b = (index % per_epoch) as usize;
            let order = epoch_order(count, shuffle_seed, epoch);
            let chunk = order.chunks(batch_size).nth(b).unwrap_or(&[]).to_vec();
            vec![(index, chunk)]
        }
    }
}

/// Streams one epoch of loaded batches in seed-determined order; the last
/// batch may be short.
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    target_size: usize,
    channels: usize,
}

impl BatchIter<'_> {
    /// Record indices in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = &self.order[self.cursor..end];
        self.cursor = end;
        let images = indices
            .iter()
            .map(|&i| load_image(&self.manifest.records()[i], self.target_size, self.channels))
            .collect::<Result<Vec<_>>>();
        Some(images.and_then(|v| ImageBatch::concat(&v)))
    }
}

pub fn make_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    target_size: usize,
    channels: usize,
    shuffle_seed: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    check_load_args(target_size, channels)?;
    Ok(BatchIter {
        manifest,
        order: epoch_order(manifest.count(), shuffle_seed, 0),
        cursor: 0,
        batch_size,
        target_size,
        channels,
    })
}

/// Writes an 8-bit grayscale (1 channel) or RGB (3 channel) PNG of image
/// `index`.
pub fn save_png(batch: &ImageBatch, index: usize, path: &Path) -> Result<()> {
    let (h, w) = (batch.height() as u32, batch.width() as u32);
    let levels = batch.to_levels(index);
    let hw = (h * w) as usize;
    let encoded = match batch.channels() {
        1 => image::DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, levels).expect("buffer matches dimensions"),
        ),
        3 => {
            let mut rgb = Vec::with_capacity(3 * hw);
            for p in 0..hw {
                rgb.extend_from_slice(&[levels[p], levels[hw + p], levels[2 * hw + p]]);
            }
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, rgb).expect("buffer matches dimensions"),
            )
        }
        c => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode {c}-channel image"
            )))
        }
    };
    let mut bytes = Vec::new();
    encoded
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
