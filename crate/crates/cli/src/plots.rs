//! Static SVG figures.

use std::path::Path;

use anyhow::{anyhow, Result};
use odflow::geodata::{CityGraph, Edge};
use odflow::metrics::DistanceBin;
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 540);
const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    padded(lo, hi)
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plot rendering failed: {e:?}")
}

/// Log-log scatter of predicted against true flows with the identity line.
pub fn scatter(path: &Path, truth: &[f64], pred: &[f64], title: &str) -> Result<()> {
    let pts: Vec<(f64, f64)> = truth
        .iter()
        .zip(pred)
        .filter(|(t, p)| **t > 0.0 && **p > 0.0)
        .map(|(t, p)| (t.log10(), p.log10()))
        .collect();
    let (lo, hi) = bounds(pts.iter().flat_map(|&(a, b)| [a, b]));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("log10 true flow")
        .y_desc("log10 estimated flow")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 2, PALETTE[0].mix(0.4).filled())))
        .map_err(plot_err)?;
    chart.draw_series(LineSeries::new([(lo, lo), (hi, hi)], BLACK)).map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Median absolute log error per distance bin with interquartile whiskers.
pub fn distance_errors(path: &Path, bins: &[DistanceBin]) -> Result<()> {
    let mids: Vec<f64> = bins.iter().map(|b| 0.5 * (b.lo_km + b.hi_km)).collect();
    let (x0, x1) = bounds(bins.iter().flat_map(|b| [b.lo_km, b.hi_km]));
    let (_, y1) = bounds(bins.iter().map(|b| b.q3).chain([0.0]));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("error by distance", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("distance (km)")
        .y_desc("|log error|")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bins.iter().zip(&mids).map(|(b, &m)| {
            ErrorBar::new_vertical(m, b.q1, b.median_abs_log_error, b.q3, PALETTE[1].filled(), 8)
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Straight OD segments between centroids for the top `top_fraction` of flows.
pub fn flow_map<'a>(
    path: &Path,
    city: &CityGraph,
    flows: impl IntoIterator<Item = (&'a Edge, &'a f64)>,
    top_fraction: f64,
) -> Result<()> {
    let mut ranked: Vec<(Edge, f64)> = flows.into_iter().map(|(e, f)| (*e, *f)).filter(|(_, f)| *f > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = ((top_fraction * ranked.len() as f64).ceil() as usize).min(ranked.len());
    ranked.truncate(keep);
    let (x0, x1) = bounds(city.regions().iter().map(|r| r.lon));
    let (y0, y1) = bounds(city.regions().iter().map(|r| r.lat));
    let root = SVGBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("top {:.0}% of flows", 100.0 * top_fraction), ("sans-serif", 20))
        .margin(12)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    let n = ranked.len().max(1) as f64;
    // Weakest first, so the strongest links are drawn on top.
    for (rank, &((o, d), _)) in ranked.iter().enumerate().rev() {
        let pct = 1.0 - rank as f64 / n;
        let (a, b) = (city.region(o), city.region(d));
        let color = RGBColor((40.0 + 200.0 * pct) as u8, 60, (220.0 - 180.0 * pct) as u8).mix(0.25 + 0.6 * pct);
        let width = 1 + (3.0 * pct) as u32;
        chart
            .draw_series(LineSeries::new([(a.lon, a.lat), (b.lon, b.lat)], color.stroke_width(width)))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(city.regions().iter().map(|r| Circle::new((r.lon, r.lat), 2, BLACK.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Several named line series on shared axes.
pub fn lines(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
