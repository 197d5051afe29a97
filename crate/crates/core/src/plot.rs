//! SVG charts of training histories and metric-vs-rate sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::ReportSummary;
use crate::trainer::HistoryRow;

const SIZE: (u32, u32) = (720, 480);
const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
];

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plotting {}: {e}", path.display()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad, hi + pad)
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let finite: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(finite.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        if finite.len() < 30 {
            chart
                .draw_series(finite.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| plot_err(path, e))?;
        }
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// One SVG per history column (epoch means), returned in column order.
pub fn plot_history(rows: &[HistoryRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty training history".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let columns: [(&str, fn(&HistoryRow) -> f64); 6] = [
        ("adv_g", |r| r.adv_g),
        ("adv_d", |r| r.adv_d),
        ("freq", |r| r.freq),
        ("imag", |r| r.imag),
        ("total", |r| r.total),
        ("lr", |r| r.lr),
    ];
    let mut by_epoch: BTreeMap<usize, Vec<&HistoryRow>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    let mut written = Vec::new();
    for (name, get) in columns {
        let points: Vec<(f64, f64)> = by_epoch
            .iter()
            .map(|(&e, rs)| (e as f64, rs.iter().map(|r| get(r)).sum::<f64>() / rs.len() as f64))
            .collect();
        let path = out_dir.join(format!("history_{name}.svg"));
        line_chart(&path, &format!("{name} per epoch"), "epoch", name, &[(name.to_string(), points)])?;
        written.push(path);
    }
    Ok(written)
}

/// PSNR, SSIM and NRMSE against sampling rate, one line per mask pattern.
pub fn plot_rate_sweep(summaries: &[ReportSummary], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if summaries.is_empty() {
        return Err(Error::InvalidInput("no evaluation summaries to plot".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics: [(&str, fn(&ReportSummary) -> f64); 3] = [
        ("psnr", |s| s.psnr.mean),
        ("ssim", |s| s.ssim.mean),
        ("nrmse", |s| s.nrmse.mean),
    ];
    let mut groups: BTreeMap<String, Vec<&ReportSummary>> = BTreeMap::new();
    for s in summaries {
        groups
            .entry(format!("{} {}", s.checkpoint, s.mask.pattern))
            .or_default()
            .push(s);
    }
    let mut written = Vec::new();
    for (name, get) in metrics {
        let series: Vec<(String, Vec<(f64, f64)>)> = groups
            .iter()
            .map(|(label, ss)| {
                let mut pts: Vec<(f64, f64)> = ss.iter().map(|s| (s.achieved_rate, get(s))).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (label.clone(), pts)
            })
            .collect();
        let path = out_dir.join(format!("rate_{name}.svg"));
        line_chart(&path, &format!("mean {name} vs sampling rate"), "sampling rate", name, &series)?;
        written.push(path);
    }
    Ok(written)
}
