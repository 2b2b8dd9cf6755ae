//! Figures: bar charts rendered to SVG from the result tables.
//!
//! Each known table in the input directory becomes one figure plus a copy
//! of the table it was drawn from, so a figure is never separated from its
//! numbers. Rendering is deterministic: the same tables produce the same
//! SVG bytes.

use std::fs;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{IoContext, LabError, Result};
use crate::experiments::{read_result_rows, ResultRow};

struct Bar {
    label: String,
    value: f64,
    whisker: f64,
}

fn render_bar_chart(title: &str, y_desc: &str, bars: &[Bar]) -> Result<String> {
    let fail = |e: &dyn core::fmt::Display| LabError::run(format!("figure rendering failed: {e}"));
    let width = 240 + 60 * bars.len() as u32;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (width.clamp(480, 1600), 460))
            .into_drawing_area();
        root.fill(&WHITE).map_err(|e| fail(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(150)
            .y_label_area_size(60)
            .build_cartesian_2d((0..bars.len()).into_segmented(), 0.0f64..1.05)
            .map_err(|e| fail(&e))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .y_desc(y_desc)
            .x_labels(bars.len().max(1))
            .x_label_formatter(&|seg| match seg {
                SegmentValue::CenterOf(i) => {
                    bars.get(*i).map(|b| b.label.clone()).unwrap_or_default()
                }
                _ => String::new(),
            })
            .x_label_style(
                ("sans-serif", 12)
                    .into_font()
                    .transform(FontTransform::Rotate90),
            )
            .label_style(("sans-serif", 13))
            .draw()
            .map_err(|e| fail(&e))?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, bar)| {
                Rectangle::new(
                    [
                        (SegmentValue::Exact(i), 0.0),
                        (SegmentValue::Exact(i + 1), bar.value),
                    ],
                    BLUE.mix(0.45).filled(),
                )
            }))
            .map_err(|e| fail(&e))?;
        chart
            .draw_series(bars.iter().enumerate().filter(|(_, b)| b.whisker > 0.0).map(
                |(i, bar)| {
                    let x = SegmentValue::CenterOf(i);
                    PathElement::new(
                        vec![
                            (x.clone(), (bar.value - bar.whisker).max(0.0)),
                            (x, (bar.value + bar.whisker).min(1.05)),
                        ],
                        BLACK.stroke_width(2),
                    )
                },
            ))
            .map_err(|e| fail(&e))?;
        root.present().map_err(|e| fail(&e))?;
    }
    Ok(svg)
}

struct FigureSpec {
    table: &'static str,
    figure: &'static str,
    title: &'static str,
    y_desc: &'static str,
    label: fn(&ResultRow) -> String,
}

const FIGURES: [FigureSpec; 3] = [
    FigureSpec {
        table: "baseline.csv",
        figure: "accuracy_by_model",
        title: "Episodic accuracy",
        y_desc: "accuracy",
        label: |r| r.model.clone(),
    },
    FigureSpec {
        table: "transferability.csv",
        figure: "asr_by_attack",
        title: "Attack success rate",
        y_desc: "attack success rate",
        label: |r| format!("{}/{}", r.attack, r.scenario),
    },
    FigureSpec {
        table: "detection_auroc.csv",
        figure: "detection_auroc",
        title: "Detection AUROC",
        y_desc: "AUROC",
        label: |r| format!("{}/{}/{}", r.filter, r.statistic, r.attack),
    },
];

/// Renders one figure per known table found under `tables_dir` into
/// `figures_dir`, copying each table next to its figure. Returns the file
/// names written; a directory with no usable tables is an error.
pub fn render_report(tables_dir: &Path, figures_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(figures_dir).at(figures_dir)?;
    let mut written = Vec::new();
    for spec in &FIGURES {
        let table_path = tables_dir.join(spec.table);
        if !table_path.is_file() {
            continue;
        }
        let (_, rows) = read_result_rows(&table_path)?;
        if rows.is_empty() {
            return Err(LabError::format(&table_path, "table has no rows to plot"));
        }
        let bars: Vec<Bar> = rows
            .iter()
            .map(|r| Bar {
                label: (spec.label)(r),
                value: r.mean,
                whisker: r.dispersion,
            })
            .collect();
        let svg = render_bar_chart(spec.title, spec.y_desc, &bars)?;
        let svg_name = format!("{}.svg", spec.figure);
        fs::write(figures_dir.join(&svg_name), svg).at(&figures_dir.join(&svg_name))?;
        let csv_name = format!("{}.csv", spec.figure);
        fs::copy(&table_path, figures_dir.join(&csv_name)).at(&table_path)?;
        written.push(svg_name);
        written.push(csv_name);
    }
    if written.is_empty() {
        return Err(LabError::run(format!(
            "no result tables found in {} (expected baseline.csv, transferability.csv, or detection_auroc.csv)",
            tables_dir.display()
        )));
    }
    Ok(written)
}
