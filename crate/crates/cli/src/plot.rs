//! NMSE (dB) against observed port count, one curve per SNR.

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use fas_canet::eval::EvalTable;
use plotters::prelude::*;

pub fn nmse_figure(table: &EvalTable, out: &Path) -> Result<()> {
    if table.rows.is_empty() {
        bail!("nothing to plot: table has no rows");
    }
    let mut snrs: Vec<f64> = table.rows.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();

    let x_max = table.rows.iter().map(|r| r.observed_count).max().unwrap_or(1) as f64;
    let x_min = table.rows.iter().map(|r| r.observed_count).min().unwrap_or(0) as f64;
    let ys = table.rows.iter().map(|r| r.nmse_db);
    let y_lo = ys.clone().fold(f64::INFINITY, f64::min).floor() - 1.0;
    let y_hi = ys.fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let x_pad = ((x_max - x_min) * 0.05).max(1.0);

    let root = SVGBackend::new(out, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("plot: {e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("NMSE vs observed ports ({})", table.model), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .build_cartesian_2d((x_min - x_pad)..(x_max + x_pad), y_lo..y_hi)
        .map_err(|e| anyhow!("plot: {e}"))?;
    chart
        .configure_mesh()
        .x_desc("number of observed ports")
        .y_desc("NMSE (dB)")
        .draw()
        .map_err(|e| anyhow!("plot: {e}"))?;

    for (i, &snr) in snrs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| r.snr_db == snr)
            .map(|r| (r.observed_count as f64, r.nmse_db))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| anyhow!("plot: {e}"))?
            .label(format!("SNR {snr} dB"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(|e| anyhow!("plot: {e}"))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("plot: {e}"))?;
    root.present().map_err(|e| anyhow!("plot: {e}"))?;
    Ok(())
}
