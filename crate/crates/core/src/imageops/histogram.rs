use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::batch::{denormalize_u8, normalize_u8, ImageBatch};
use crate::dataset::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::rng;

/// Number of intensity levels used for matching.
pub const LEVELS: usize = 256;

/// Cumulative distribution of 8-bit intensity levels.
///
/// `cdf[k]` is the fraction of pixels with level ≤ k; the last entry is
/// exactly 1 for any nonempty input.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCdf {
    cdf: [f64; LEVELS],
}

/// Quantizes a value in [−1, 1] to its 8-bit level.
pub fn quantize(x: f32) -> u8 {
    denormalize_u8(x)
}

impl IntensityCdf {
    /// Builds the CDF from per-level pixel counts.
    pub fn from_counts(counts: &[u64; LEVELS]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument(
                "cannot build a CDF from zero pixels".into(),
            ));
        }
        let mut cdf = [0f64; LEVELS];
        let mut acc = 0u64;
        for (k, &c) in counts.iter().enumerate() {
            acc += c;
            cdf[k] = acc as f64 / total as f64;
        }
        Ok(Self { cdf })
    }

    pub fn values(&self) -> &[f64; LEVELS] {
        &self.cdf
    }

    pub fn at(&self, level: u8) -> f64 {
        self.cdf[level as usize]
    }

    /// Largest single-level jump of the CDF.
    pub fn max_jump(&self) -> f64 {
        let mut prev = 0.0;
        let mut best: f64 = 0.0;
        for &v in &self.cdf {
            best = best.max(v - prev);
            prev = v;
        }
        best
    }

    /// Lookup table sending each source level to the smallest reference
    /// level whose CDF reaches the source CDF.
    pub fn matching_table(source: &IntensityCdf, reference: &IntensityCdf) -> [u8; LEVELS] {
        let mut table = [0u8; LEVELS];
        let mut r = 0usize;
        for (s, slot) in table.iter_mut().enumerate() {
            // both CDFs are nondecreasing, so the search pointer only moves forward
            while r < LEVELS - 1 && reference.cdf[r] < source.cdf[s] {
                r += 1;
            }
            *slot = r as u8;
        }
        table
    }

    /// Writes the 256-line `level<TAB>cdf_value` form.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (k, v) in self.cdf.iter().enumerate() {
            writeln!(out, "{k}\t{v}").expect("writing to a Vec cannot fail");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            what: "reference CDF",
            path: path.to_path_buf(),
            detail,
        };
        let mut cdf = [0f64; LEVELS];
        let mut seen = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (level, value) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {} lacks a tab", lineno + 1)))?;
            let level: usize = level
                .parse()
                .map_err(|_| bad(format!("bad level on line {}", lineno + 1)))?;
            if level != seen {
                return Err(bad(format!("expected level {seen}, found {level}")));
            }
            cdf[level] = value
                .parse()
                .map_err(|_| bad(format!("bad value on line {}", lineno + 1)))?;
            seen += 1;
        }
        if seen != LEVELS {
            return Err(bad(format!("expected {LEVELS} levels, found {seen}")));
        }
        if cdf.windows(2).any(|w| w[1] < w[0]) || cdf[LEVELS - 1] != 1.0 {
            return Err(bad("values are not a CDF ending at 1".into()));
        }
        Ok(Self { cdf })
    }
}

fn count_levels(values: &[f32], counts: &mut [u64; LEVELS]) {
    for &v in values {
        counts[quantize(v) as usize] += 1;
    }
}

/// CDF of one intensity channel with values in [−1, 1].
pub fn compute_cdf(channel: &[f32]) -> Result<IntensityCdf> {
    let mut counts = [0u64; LEVELS];
    count_levels(channel, &mut counts);
    IntensityCdf::from_counts(&counts)
}

/// Remaps every channel of every image so its intensity CDF follows
/// `reference`. Output values sit on the 8-bit grid in [−1, 1].
pub fn histogram_match(source: &ImageBatch, reference: &IntensityCdf) -> Result<ImageBatch> {
    if source.is_empty() {
        return Err(Error::InvalidArgument(
            "histogram matching needs a nonempty batch".into(),
        ));
    }
    let mut out = source.clone();
    for i in 0..source.count() {
        for c in 0..source.channels() {
            let plane = source.plane(i, c);
            let table = IntensityCdf::matching_table(&compute_cdf(plane)?, reference);
            for (dst, &v) in out.plane_mut(i, c).iter_mut().zip(plane) {
                *dst = normalize_u8(table[quantize(v) as usize]);
            }
        }
    }
    Ok(out)
}

/// Kolmogorov–Smirnov distance between two level CDFs.
pub fn ks_distance(a: &IntensityCdf, b: &IntensityCdf) -> f64 {
    a.cdf
        .iter()
        .zip(&b.cdf)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Pooled CDF over the pixels of `sample_count` seed-selected real images
/// loaded at `size`×`size`.
pub fn build_reference_pool(
    manifest: &DatasetManifest,
    sample_count: usize,
    seed: u64,
    size: usize,
    channels: usize,
) -> Result<IntensityCdf> {
    if manifest.records().is_empty() {
        return Err(Error::InvalidArgument(
            "reference pool needs a nonempty manifest".into(),
        ));
    }
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..manifest.count()).collect();
    order.shuffle(&mut rng::stream(seed, "reference-pool", 0));
    order.truncate(sample_count.min(manifest.count()));
    order.sort_unstable();
    let mut counts = [0u64; LEVELS];
    for i in order {
        let img = dataset::load_image(&manifest.records()[i], size, channels)?;
        count_levels(img.data(), &mut counts);
    }
    IntensityCdf::from_counts(&counts)
}
