//! Figures: loss curves and FID curves as SVG, sample grids as PNG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::batch::ImageBatch;
use crate::dataset::save_png;
use crate::error::{Error, Result};
use crate::metrics::FidReport;
use crate::rng;

/// A parsed trace CSV: column names and numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TraceTable {
    pub fn parse(name: &str, text: &str, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "trace csv".into(),
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if row.len() != columns.len() {
                return Err(bad(format!("row {} has {} fields, header has {}", i + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Self {
            name: name.to_string(),
            columns,
            rows,
        })
    }

    pub fn read(name: &str, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(name, &text, path)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// One polyline of a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart with axes, tick labels and a legend. Non-finite points are
/// dropped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument(format!("chart {title:?} has no finite points")));
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16" font-family="sans-serif">{}</text>"#, left + pw / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" font-family="sans-serif">{}</text>"#, sx(xv), top + ph + 16.0, fmt_tick(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11" font-family="sans-serif">{}</text>"#, left - 6.0, sy(yv) + 4.0, fmt_tick(yv));
        let _ = writeln!(s, r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##, left + pw, sy(yv), sy(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13" font-family="sans-serif">{}</text>"#, left + pw / 2.0, h - 10.0, xml_escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" font-size="13" font-family="sans-serif" transform="rotate(-90 16 {})">{}</text>"#, top + ph / 2.0, top + ph / 2.0, xml_escape(y_label));
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if path.len() == 1 {
            let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#, path[0].split(',').next().unwrap_or("0"), path[0].split(',').nth(1).unwrap_or("0"));
        } else if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, left + pw + 12.0, left + pw + 32.0);
        let _ = writeln!(s, r#"<text class="legend" x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#, left + pw + 38.0, ly + 4.0, xml_escape(&ser.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Generator and discriminator loss curves (plus a diffusion `mean_loss`
/// column when present) from one or more traces.
pub fn loss_series(traces: &[TraceTable]) -> Vec<Series> {
    let mut out = Vec::new();
    for t in traces {
        let Some(x) = t.column("epoch") else { continue };
        for (col, label) in [("g_loss", "generator"), ("d_loss", "discriminator"), ("mean_loss", "denoising")] {
            if let Some(y) = t.column(col) {
                out.push(Series {
                    label: format!("{} {label}", t.name),
                    points: x.iter().copied().zip(y).collect(),
                });
            }
        }
    }
    out
}

/// One FID curve per model tag.
pub fn fid_series(reports: &[FidReport]) -> Vec<Series> {
    let mut by_tag: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in reports {
        by_tag.entry(&r.model_tag).or_default().push((r.epoch as f64, r.fid));
    }
    by_tag
        .into_iter()
        .map(|(tag, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: tag.to_string(),
                points,
            }
        })
        .collect()
}

/// Tiles a batch into one image with `cols` columns and a 2-pixel black
/// border between tiles.
pub fn tile(batch: &ImageBatch, cols: usize) -> Result<ImageBatch> {
    if batch.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument("cannot tile an empty batch".into()));
    }
    let [n, c, h, w] = batch.shape();
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let gap = 2;
    let (gh, gw) = (rows * h + (rows + 1) * gap, cols * w + (cols + 1) * gap);
    let mut out = ImageBatch::filled([1, c, gh, gw], -1.0);
    for i in 0..n {
        let (r, q) = (i / cols, i % cols);
        let (oy, ox) = (gap + r * (h + gap), gap + q * (w + gap));
        for ch in 0..c {
            let src = batch.plane(i, ch).to_vec();
            let dst = out.plane_mut(0, ch);
            for y in 0..h {
                dst[(oy + y) * gw + ox..(oy + y) * gw + ox + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}

/// Rows of `per_row` images: two random real batches, then two batches of
/// each synthetic set in order.
pub fn comparison_grid(real: &ImageBatch, synthetic: &[(String, ImageBatch)], per_row: usize, seed: u64) -> Result<ImageBatch> {
    if real.is_empty() || synthetic.iter().any(|(_, b)| b.is_empty()) {
        return Err(Error::InvalidArgument("comparison grid needs nonempty batches".into()));
    }
    let per_row = per_row.max(1);
    let mut rows = Vec::new();
    let mut pick = |b: &ImageBatch, label: &str| {
        let mut idx: Vec<usize> = (0..b.count()).collect();
        idx.shuffle(&mut rng::stream(seed, label, 0));
        // repeat when the batch holds fewer than two rows' worth
        let take: Vec<usize> = (0..2 * per_row).map(|k| idx[k % idx.len()]).collect();
        rows.push(b.select(&take));
    };
    pick(real, "grid-real");
    for (tag, b) in synthetic {
        pick(b, &format!("grid-{tag}"));
    }
    let shapes: Vec<_> = rows.iter().map(|r| [r.channels(), r.height(), r.width()]).collect();
    if shapes.windows(2).any(|p| p[0] != p[1]) {
        return Err(Error::Shape(format!("comparison grid batches differ in shape: {shapes:?}")));
    }
    tile(&ImageBatch::concat(&rows)?, per_row)
}

/// Writes `losses.svg`, `fid.svg` (when `fid` is nonempty) and
/// `samples.png` (when `synthetic` is nonempty) into `out_dir`.
pub fn make_report(
    traces: &[TraceTable],
    fid: &[FidReport],
    real: &ImageBatch,
    synthetic: &[(String, ImageBatch)],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if traces.iter().all(|t| t.rows.is_empty()) && fid.is_empty() {
        return Err(Error::InvalidArgument("nothing to report: traces and FID records are empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    let losses = loss_series(traces);
    if losses.iter().any(|s| !s.points.is_empty()) {
        write("losses.svg", line_chart_svg("Training losses", "epoch", "loss", &losses)?)?;
    }
    if !fid.is_empty() {
        write("fid.svg", line_chart_svg("FID", "epoch", "FID", &fid_series(fid))?)?;
    }
    if !synthetic.is_empty() && !real.is_empty() {
        let grid = comparison_grid(real, synthetic, 8, seed)?;
        let p = out_dir.join("samples.png");
        save_png(&grid, 0, &p)?;
        written.push(p);
    }
    Ok(written)
}
