//! SVG learning curves. Plots need a TrueType font for their labels; when
//! none is found the CSV is still written and the plots are skipped.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use committee_al::report::Summary;

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

fn font_available() -> bool {
    static FOUND: OnceLock<bool> = OnceLock::new();
    *FOUND.get_or_init(|| {
        FONT_PATHS.iter().any(|p| match fs::read(p) {
            Ok(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            Err(_) => false,
        })
    })
}

pub fn write_csv(summary: &Summary, path: &Path) -> Result<()> {
    let mut out = String::from("strategy,cycle,num_seeds,labeled_count_mean,map_mean,map_std,tp_mean,tp_cumulative_mean\n");
    for s in &summary.strategies {
        for p in &s.points {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.strategy, p.cycle, p.num_seeds, p.labeled_count_mean, p.map_mean, p.map_std, p.tp_mean, p.tp_cumulative_mean
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_plots(summary: &Summary, out: &Path) -> Result<()> {
    write_csv(summary, &out.join("curves.csv"))?;
    if !font_available() {
        eprintln!("warning: no TrueType font found, skipping SVG plots (curves.csv has the data)");
        return Ok(());
    }
    map_curve(summary, &out.join("map_curve.svg"))?;
    tp_curve(summary, &out.join("tp_cumulative.svg"))?;
    Ok(())
}

fn color(i: usize) -> RGBColor {
    let (r, g, b) = Palette99::pick(i).to_rgba().rgb();
    RGBColor(r, g, b)
}

fn map_curve(summary: &Summary, path: &Path) -> Result<()> {
    let x_max = summary
        .strategies
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.labeled_count_mean))
        .fold(1.0, f64::max);
    let y_max = summary
        .strategies
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.map_mean + p.map_std))
        .fold(0.05, f64::max)
        .min(1.0);
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mAP@0.5 vs labeled images (mean ± std)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max * 1.05, 0.0..y_max * 1.1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("labeled images")
        .y_desc("mAP@0.5")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, s) in summary.strategies.iter().enumerate() {
        let c = color(i);
        let mut band: Vec<(f64, f64)> = s.points.iter().map(|p| (p.labeled_count_mean, p.map_mean + p.map_std)).collect();
        band.extend(s.points.iter().rev().map(|p| (p.labeled_count_mean, (p.map_mean - p.map_std).max(0.0))));
        chart
            .draw_series(std::iter::once(Polygon::new(band, c.mix(0.18))))
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .draw_series(LineSeries::new(
                s.points.iter().map(|p| (p.labeled_count_mean, p.map_mean)),
                c.stroke_width(2),
            ))
            .map_err(|e| anyhow!("{e}"))?
            .label(s.strategy.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn tp_curve(summary: &Summary, path: &Path) -> Result<()> {
    let x_max = summary.strategies.iter().map(|s| s.points.len()).max().unwrap_or(1).max(2) - 1;
    let y_max = summary
        .strategies
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.tp_cumulative_mean))
        .fold(1.0, f64::max);
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Cumulative true-positive instances selected", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max as f64, 0.0..y_max * 1.1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("cycle")
        .y_desc("positive anchors")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, s) in summary.strategies.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(LineSeries::new(
                s.points.iter().map(|p| (p.cycle as f64, p.tp_cumulative_mean)),
                c.stroke_width(2),
            ))
            .map_err(|e| anyhow!("{e}"))?
            .label(s.strategy.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
