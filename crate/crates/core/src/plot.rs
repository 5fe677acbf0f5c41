//! PNG and SVG figure output: grouped bar charts, line plots and grayscale
//! slice images.
//!
//! Text rendering needs a TrueType font. `AUXSCATTER_FONT` names one
//! explicitly; otherwise a few common system locations are tried.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::coord::Shift;
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::error::{Error, Result};
use crate::image::Image;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();

fn ensure_font() -> Result<()> {
    FONT.get_or_init(|| {
        let mut paths: Vec<PathBuf> = Vec::new();
        if let Ok(p) = std::env::var("AUXSCATTER_FONT") {
            paths.push(p.into());
        }
        paths.extend(FONT_CANDIDATES.iter().map(PathBuf::from));
        for p in &paths {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return Ok(());
                }
            }
        }
        Err("no usable TrueType font found; set AUXSCATTER_FONT to a .ttf file".to_string())
    })
    .clone()
    .map_err(Error::Config)
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plotting failed: {e}"))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One named series of a grouped bar chart; `values[i]` belongs to
/// category `i`.
#[derive(Debug, Clone)]
pub struct BarSeries {
    pub name: String,
    pub values: Vec<f64>,
}

/// Line series as `(x, y)` points.
#[derive(Debug, Clone)]
pub struct Curve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn draw_bars<DB: DrawingBackend>(
    root: DrawingArea<DB, Shift>,
    title: &str,
    x_label: &str,
    y_label: &str,
    categories: &[String],
    series: &[BarSeries],
) -> std::result::Result<(), String> {
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let ymax = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.15 } else { 1.0 };
    let n = categories.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..n, 0.0..ymax)
        .map_err(|e| e.to_string())?;
    let cats = categories.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .x_labels(categories.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = (x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < cats.len() {
                cats[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(|e| e.to_string())?;
    let k = series.len().max(1) as f64;
    let group = 0.8;
    let bw = group / k;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let bars = s.values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(ci, &v)| {
            let x0 = ci as f64 + 0.5 - group / 2.0 + si as f64 * bw;
            Rectangle::new([(x0, 0.0), (x0 + bw * 0.95, v)], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(|e| e.to_string())?
            .label(s.name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

fn draw_lines<DB: DrawingBackend>(
    root: DrawingArea<DB, Shift>,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Curve],
) -> std::result::Result<(), String> {
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-9);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| e.to_string())?;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

/// Write `<stem>.png` and `<stem>.svg` with a grouped bar chart.
pub fn grouped_bars(
    stem: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    categories: &[String],
    series: &[BarSeries],
) -> Result<()> {
    ensure_font()?;
    let png = stem.with_extension("png");
    let svg = stem.with_extension("svg");
    let size = (900, 540);
    draw_bars(BitMapBackend::new(&png, size).into_drawing_area(), title, x_label, y_label, categories, series)
        .map_err(|e| plot_err(&png, e))?;
    draw_bars(SVGBackend::new(&svg, size).into_drawing_area(), title, x_label, y_label, categories, series)
        .map_err(|e| plot_err(&svg, e))
}

/// Write `<stem>.png` and `<stem>.svg` with one line per series.
pub fn line_plot(stem: &Path, title: &str, x_label: &str, y_label: &str, series: &[Curve]) -> Result<()> {
    ensure_font()?;
    let png = stem.with_extension("png");
    let svg = stem.with_extension("svg");
    let size = (900, 540);
    draw_lines(BitMapBackend::new(&png, size).into_drawing_area(), title, x_label, y_label, series)
        .map_err(|e| plot_err(&png, e))?;
    draw_lines(SVGBackend::new(&svg, size).into_drawing_area(), title, x_label, y_label, series)
        .map_err(|e| plot_err(&svg, e))
}

/// Grayscale PNG of `img`, linearly windowed to `[lo, hi]`.
pub fn gray_png(path: &Path, img: &Image, lo: f32, hi: f32) -> Result<()> {
    if !(hi > lo) {
        return Err(Error::Config(format!("display window [{lo}, {hi}] is empty")));
    }
    let root = BitMapBackend::new(path, (img.cols as u32, img.rows as u32)).into_drawing_area();
    for r in 0..img.rows {
        for c in 0..img.cols {
            let t = ((img.get(r, c) - lo) / (hi - lo)).clamp(0.0, 1.0);
            let g = (t * 255.0).round() as u8;
            root.draw_pixel((c as i32, r as i32), &RGBColor(g, g, g))
                .map_err(|e| plot_err(path, e))?;
        }
    }
    root.present().map_err(|e| plot_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_png_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bars");
        let cats: Vec<String> = ["40", "80"].iter().map(|s| s.to_string()).collect();
        let series = vec![
            BarSeries { name: "a".into(), values: vec![1.0, 2.0] },
            BarSeries { name: "b".into(), values: vec![1.5, f64::NAN] },
        ];
        grouped_bars(&stem, "t", "height", "MAPE", &cats, &series).unwrap();
        assert!(stem.with_extension("png").exists());
        let svg = std::fs::read_to_string(stem.with_extension("svg")).unwrap();
        assert!(svg.contains("<svg"));

        let lines = dir.path().join("lines");
        let s = vec![Curve { name: "p".into(), points: vec![(0.0, 1.0), (1.0, 3.0)] }];
        line_plot(&lines, "t", "x", "y", &s).unwrap();
        assert!(lines.with_extension("png").exists());

        let img = Image::from_fn(8, 6, |r, c| (r * 6 + c) as f32);
        let p = dir.path().join("g.png");
        gray_png(&p, &img, 0.0, 47.0).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
}
