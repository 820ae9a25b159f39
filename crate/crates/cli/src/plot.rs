//! SVG figures.

use crate::error::{CliResult, Context};
use plotters::prelude::*;
use std::ops::Range;
use std::path::Path;

const SIZE: (u32, u32) = (800, 560);

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Half-width of a shaded band around each point.
    pub band: Option<Vec<f64>>,
}

fn color(i: usize) -> PaletteColor<Palette99> {
    Palette99::pick(i)
}

fn padded(lo: f64, hi: f64) -> Range<f64> {
    if !lo.is_finite() || !hi.is_finite() {
        return 0.0..1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        return lo - 0.5..hi + 0.5;
    }
    let pad = 0.05 * (hi - lo);
    lo - pad..hi + pad
}

fn bounds<'a>(values: impl Iterator<Item = &'a (f64, f64)>, bands: impl Iterator<Item = (f64, f64)>) -> (Range<f64>, Range<f64>) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in values {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    for (lo, hi) in bands {
        if lo.is_finite() && hi.is_finite() {
            y0 = y0.min(lo);
            y1 = y1.max(hi);
        }
    }
    (padded(x0, x1), padded(y0, y1))
}

/// Lines with optional error bands.
pub fn line_plot(path: &Path, title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> CliResult<()> {
    let band_iter = series.iter().flat_map(|s| {
        s.band.iter().flat_map(move |b| s.points.iter().zip(b).map(|(&(_, y), &w)| (y - w, y + w)))
    });
    let (xr, yr) = bounds(series.iter().flat_map(|s| s.points.iter()), band_iter);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).ctx("plot")?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xr, yr)
        .ctx("plot")?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw().ctx("plot")?;
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        if let Some(band) = &s.band {
            let upper = s.points.iter().zip(band).map(|(&(x, y), &w)| (x, y + w));
            let lower = s.points.iter().zip(band).rev().map(|(&(x, y), &w)| (x, y - w));
            let poly: Vec<(f64, f64)> = upper.chain(lower).collect();
            chart.draw_series(std::iter::once(Polygon::new(poly, c.mix(0.2).filled()))).ctx("plot")?;
        }
        chart
            .draw_series(LineSeries::new(s.points.clone(), c.stroke_width(2)))
            .ctx("plot")?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
    }
    if series.iter().any(|s| !s.label.is_empty()) {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().ctx("plot")?;
    }
    root.present().ctx("plot")
}

/// Points per series, with an optional fitted line `(slope, intercept)` per series.
pub fn scatter_plot(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series],
    fit: Option<(f64, f64, String)>,
) -> CliResult<()> {
    let (xr, yr) = bounds(series.iter().flat_map(|s| s.points.iter()), std::iter::empty());
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).ctx("plot")?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xr.clone(), yr)
        .ctx("plot")?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw().ctx("plot")?;
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, c.filled())))
            .ctx("plot")?
            .label(s.label.clone())
            .legend(move |(x, y)| Circle::new((x + 10, y), 4, c.filled()));
    }
    if let Some((slope, intercept, label)) = fit {
        let line = vec![(xr.start, slope * xr.start + intercept), (xr.end, slope * xr.end + intercept)];
        chart
            .draw_series(LineSeries::new(line, BLACK.stroke_width(1)))
            .ctx("plot")?
            .label(label)
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().ctx("plot")?;
    root.present().ctx("plot")
}

/// Vertical bars with error whiskers.
pub fn bar_plot(path: &Path, title: &str, ylabel: &str, bars: &[(String, f64, f64)]) -> CliResult<()> {
    let hi = bars.iter().map(|b| b.1 + b.2).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.1 - b.2).fold(0.0f64, f64::min);
    let n = bars.len().max(1);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).ctx("plot")?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, padded(lo, hi))
        .ctx("plot")?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 { labels.get(i as usize).cloned().unwrap_or_default() } else { String::new() }
        })
        .y_desc(ylabel)
        .draw()
        .ctx("plot")?;
    for (i, (_, v, e)) in bars.iter().enumerate() {
        let x = i as f64;
        let c = color(i);
        chart.draw_series(std::iter::once(Rectangle::new([(x - 0.35, 0.0), (x + 0.35, *v)], c.filled()))).ctx("plot")?;
        chart
            .draw_series(std::iter::once(PathElement::new(vec![(x, v - e), (x, v + e)], BLACK.stroke_width(2))))
            .ctx("plot")?;
    }
    root.present().ctx("plot")
}
