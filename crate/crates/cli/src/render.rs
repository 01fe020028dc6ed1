//! Plain-text tables and SVG curves for eval reports and noise sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use img_core::{Branch, EvalReport, ImgError, NoiseSweep};
use plotters::prelude::*;
use serde::Deserialize;

/// Either JSON document the CLI writes.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Document {
    Sweep(NoiseSweep),
    Eval(EvalReport),
}

pub fn eval_table(r: &EvalReport, branch: Option<Branch>) -> String {
    let mut s = String::new();
    if let Some(b) = branch {
        let _ = writeln!(s, "{:<10}{b}", "branch");
    }
    let _ = writeln!(s, "{:<10}{}", "queries", r.count);
    for (mu, v) in &r.r1_at {
        let _ = writeln!(s, "{:<10}{v:>7.2}", format!("R1@{mu}"));
    }
    let _ = writeln!(s, "{:<10}{:>7.2}", "mIoU", r.miou);
    let _ = writeln!(s, "{:<10}{}", "rule", r.threshold_rule);
    s
}

pub fn sweep_table(sw: &NoiseSweep) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "noise sweep over {} samples (seed {})", sw.samples, sw.seed);
    let _ = writeln!(
        s,
        "{:>8}  {:>6}  {:>7}  {:>10}  {:>12}",
        "fraction", "noisy", "mean p", "mIoU (AIP)", "mIoU (p=0.5)"
    );
    for r in &sw.rows {
        let _ = writeln!(
            s,
            "{:>8.2}  {:>6}  {:>7.4}  {:>10.2}  {:>12.2}",
            r.fraction, r.noisy_samples, r.mean_p, r.miou_with_aip, r.miou_fixed_half
        );
    }
    s
}

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, y_range: (f64, f64), series: &[Series]) -> img_core::Result<()> {
    let plot_err = |e: String| ImgError::InvalidInput(format!("rendering {}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..1f64, y_range.0..y_range.1)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (name, color, points) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    }
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Share of queries with IoU strictly above each threshold on a 0.05 grid.
fn recall_curve(r: &EvalReport) -> Vec<(f64, f64)> {
    let n = r.per_query.len().max(1) as f64;
    (0..=20)
        .map(|i| {
            let mu = i as f64 / 20.0;
            let hits = r.per_query.iter().filter(|q| q.iou > mu).count();
            (mu, 100.0 * hits as f64 / n)
        })
        .collect()
}

/// Write the curves for `doc` into `dir` and return the file paths.
pub fn write_svgs(doc: &Document, dir: &Path) -> img_core::Result<Vec<PathBuf>> {
    match doc {
        Document::Sweep(sw) => {
            let p_path = dir.join("noise_sweep_importance.svg");
            let p: Vec<(f64, f64)> = sw.rows.iter().map(|r| (r.fraction, r.mean_p)).collect();
            line_chart(&p_path, "Mean audio importance vs. noisy-audio share", "noisy fraction", "mean p", (0.0, 1.0), &[("mean p", BLUE, p)])?;
            let miou_path = dir.join("noise_sweep_miou.svg");
            let aip: Vec<(f64, f64)> = sw.rows.iter().map(|r| (r.fraction, r.miou_with_aip)).collect();
            let half: Vec<(f64, f64)> = sw.rows.iter().map(|r| (r.fraction, r.miou_fixed_half)).collect();
            line_chart(
                &miou_path,
                "Fusion mIoU vs. noisy-audio share",
                "noisy fraction",
                "mIoU (%)",
                (0.0, 100.0),
                &[("predicted p", BLUE, aip), ("fixed p = 0.5", RED, half)],
            )?;
            Ok(vec![p_path, miou_path])
        }
        Document::Eval(r) => {
            let path = dir.join("recall_curve.svg");
            line_chart(&path, "R1 vs. IoU threshold", "IoU threshold", "R1 (%)", (0.0, 100.0), &[("R1", BLUE, recall_curve(r))])?;
            Ok(vec![path])
        }
    }
}
