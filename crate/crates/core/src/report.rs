//! Report emission: aggregate CSV tables and dependency-free SVG line charts
//! of anytime curves and origin fractions.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::persist::{read_summary, RunSummary};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

/// One named line of a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn nice_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.001..10000.0).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Render a minimal multi-series line chart. Returns the SVG document.
pub fn render_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite_points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &finite_points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if finite_points.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        xml_escape(title)
    );

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>",
        MARGIN_T + plot_h
    );

    // ticks: 5 per axis
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\
             <text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            MARGIN_T + plot_h,
            MARGIN_T + plot_h + 5.0,
            MARGIN_T + plot_h + 20.0,
            nice_num(fx),
            x = sx(fx),
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_L}\" y2=\"{y}\" stroke=\"black\"/>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            sy(fy) + 4.0,
            nice_num(fy),
            y = sy(fy),
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 8.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        xml_escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        let lx = MARGIN_L + plot_w + 10.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            xml_escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Locate run directories: either `dir` itself (contains summary.json) or its
/// `seed_*` children, sorted by name.
pub fn find_run_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if dir.join("summary.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() && path.join("summary.json").is_file() {
                dirs.push(path);
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Report(format!(
            "no run results (summary.json) under {}",
            dir.display()
        )));
    }
    Ok(dirs)
}

/// Render the report artifacts for one run directory tree: per-run anytime
/// curves, origin-fraction series, and an aggregate CSV table.
pub fn write_report(dir: &Path) -> Result<()> {
    let run_dirs = find_run_dirs(dir)?;
    let mut summaries: Vec<(std::path::PathBuf, RunSummary)> = Vec::new();
    for rd in &run_dirs {
        summaries.push((rd.clone(), read_summary(rd)?));
    }

    // per-run charts
    for (rd, summary) in &summaries {
        let curves = vec![
            Series {
                name: "best".into(),
                points: summary
                    .per_iteration
                    .iter()
                    .map(|p| (p.cumulative_epochs as f64, p.best))
                    .collect(),
            },
            Series {
                name: "mean".into(),
                points: summary
                    .per_iteration
                    .iter()
                    .map(|p| (p.cumulative_epochs as f64, p.mean))
                    .collect(),
            },
            Series {
                name: "incumbent".into(),
                points: summary
                    .incumbent
                    .iter()
                    .map(|(e, f)| (*e as f64, *f))
                    .collect(),
            },
        ];
        let title = format!(
            "{} on {} (seed {})",
            summary.algorithm, summary.task_kind, summary.seed
        );
        std::fs::write(
            rd.join("curves.svg"),
            render_line_chart(&title, "epochs", "fitness", &curves),
        )?;

        // origin fractions: one series per origin id seen anywhere
        let mut origins: Vec<usize> = summary
            .origin_fractions
            .iter()
            .flat_map(|row| row.fractions.keys().copied())
            .collect();
        origins.sort_unstable();
        origins.dedup();
        let series: Vec<Series> = origins
            .iter()
            .map(|o| Series {
                name: format!("origin {o}"),
                points: summary
                    .origin_fractions
                    .iter()
                    .map(|row| {
                        (
                            row.iteration as f64,
                            row.fractions.get(o).copied().unwrap_or(0.0),
                        )
                    })
                    .collect(),
            })
            .collect();
        let title = format!(
            "layer origins over time ({}, seed {})",
            summary.algorithm, summary.seed
        );
        std::fs::write(
            rd.join("origins.svg"),
            render_line_chart(&title, "iteration", "fraction of slots", &series),
        )?;
    }

    // aggregate table across seeds
    let finals: Vec<f64> = summaries.iter().map(|(_, s)| s.final_best.fitness).collect();
    let agg = crate::analysis::aggregate(&finals)?;
    let mut csv = String::from("algorithm,task,seeds,mean_final,std_final,best_final\n");
    let best = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{}",
        summaries[0].1.algorithm,
        summaries[0].1.task_kind,
        summaries.len(),
        agg.mean,
        agg.std,
        best
    );
    let mut per_seed = String::from("seed,final_best,final_best_member\n");
    for (_, s) in &summaries {
        let _ = writeln!(
            per_seed,
            "{},{},{}",
            s.seed, s.final_best.fitness, s.final_best.member_id
        );
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    std::fs::write(dir.join("per_seed.csv"), per_seed)?;
    Ok(())
}
