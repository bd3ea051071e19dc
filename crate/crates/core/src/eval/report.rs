use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::ResultRow;
use crate::error::{DpoeError, Result};

/// Mean and spread of one (spec, variant, sweep point) group over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub spec_id: String,
    pub variant: String,
    pub param: Option<String>,
    pub param_value: Option<f64>,
    pub seeds: usize,
    pub auc_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub auc_std: f64,
    pub auc_type_i_mean: Option<f64>,
    pub auc_type_ii_mean: Option<f64>,
    pub auc_type_iii_mean: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Group rows by everything except the seed, in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, Option<String>, Option<u64>)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.spec_id.clone(),
            r.variant.clone(),
            r.param.clone(),
            r.param_value.map(f64::to_bits),
        );
        let idx = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key);
            order.len() - 1
        });
        groups.entry(idx).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let aucs: Vec<f64> = g.iter().map(|r| r.auc).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            SummaryRow {
                spec_id: g[0].spec_id.clone(),
                variant: g[0].variant.clone(),
                param: g[0].param.clone(),
                param_value: g[0].param_value,
                seeds: g.len(),
                auc_mean,
                auc_std,
                auc_type_i_mean: mean_of(g.iter().map(|r| r.auc_type_i)),
                auc_type_ii_mean: mean_of(g.iter().map(|r| r.auc_type_ii)),
                auc_type_iii_mean: mean_of(g.iter().map(|r| r.auc_type_iii)),
            }
        })
        .collect()
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn markdown(summary: &[SummaryRow]) -> String {
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut s = String::from("| spec | variant | setting | seeds | AUC (mean ± std) | I | II | III |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in summary {
        let setting = match (&r.param, r.param_value) {
            (Some(p), Some(v)) => format!("{p}={v}"),
            _ => "-".into(),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} ± {:.4} | {} | {} | {} |",
            r.spec_id,
            r.variant,
            setting,
            r.seeds,
            r.auc_mean,
            r.auc_std,
            fmt(r.auc_type_i_mean),
            fmt(r.auc_type_ii_mean),
            fmt(r.auc_type_iii_mean)
        );
    }
    s
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// AUC against sweep position (evenly spaced, in sweep order) with ±std
/// whiskers, one colored line per variant. The y axis spans [0, 1] with a
/// grid line every 0.1.
fn plot_curve(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let (w, h, margin) = (640i64, 400i64, 40i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let to_y = |auc: f64| h - margin - ((auc.clamp(0.0, 1.0)) * (h - 2 * margin) as f64).round() as i64;
    for tick in 0..=10 {
        let y = to_y(tick as f64 / 10.0);
        line(&mut img, (margin, y), (w - margin, y), Rgb([225, 225, 225]));
    }
    line(&mut img, (margin, margin), (margin, h - margin), Rgb([0, 0, 0]));
    line(&mut img, (margin, h - margin), (w - margin, h - margin), Rgb([0, 0, 0]));
    for (i, points) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let n = points.len().max(2) - 1;
        let to_x = |j: usize| margin + (j as i64 * (w - 2 * margin)) / n as i64;
        for (j, &(mean, std)) in points.iter().enumerate() {
            let x = to_x(j);
            line(&mut img, (x, to_y(mean - std)), (x, to_y(mean + std)), color);
            line(&mut img, (x - 3, to_y(mean)), (x + 3, to_y(mean)), color);
            if j > 0 {
                line(&mut img, (to_x(j - 1), to_y(points[j - 1].0)), (x, to_y(mean)), color);
            }
        }
    }
    img.save(path).map_err(|e| DpoeError::Report(format!("{}: {e}", path.display())))
}

/// Write `results.csv`, `summary.csv`, `summary.md` and, for every swept
/// parameter of every spec, `curve_<spec>_<param>.png` with its numbers in
/// `curve_<spec>_<param>.csv`. Returns the files written.
pub fn emit_report(rows: &[ResultRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(DpoeError::Report("no results to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let results = out_dir.join("results.csv");
    write_csv(&results, rows)?;
    written.push(results);

    let summary = summarize(rows);
    let summary_csv = out_dir.join("summary.csv");
    write_csv(&summary_csv, &summary)?;
    written.push(summary_csv);
    let summary_md = out_dir.join("summary.md");
    fs::write(&summary_md, markdown(&summary))?;
    written.push(summary_md);

    let mut curves: Vec<((String, String), Vec<&SummaryRow>)> = Vec::new();
    for s in summary.iter().filter(|s| s.param.is_some()) {
        let key = (s.spec_id.clone(), s.param.clone().unwrap_or_default());
        match curves.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(s),
            None => curves.push((key, vec![s])),
        }
    }
    for ((spec, param), points) in curves {
        let mut variants: Vec<&str> = Vec::new();
        for p in &points {
            if !variants.contains(&p.variant.as_str()) {
                variants.push(&p.variant);
            }
        }
        let series: Vec<Vec<(f64, f64)>> = variants
            .iter()
            .map(|v| points.iter().filter(|p| p.variant == *v).map(|p| (p.auc_mean, p.auc_std)).collect())
            .collect();
        let stem: String = format!("curve_{spec}_{param}")
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        let png = out_dir.join(format!("{stem}.png"));
        plot_curve(&series, &png)?;
        written.push(png);
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_csv(&csv_path, &points)?;
        written.push(csv_path);
    }
    Ok(written)
}
