//! Deterministic SVG line charts of mAP-over-epoch curves. Identical
//! inputs produce byte-identical output, so plots can be golden-tested.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 45.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// One named curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads (epoch, map) pairs from a CSV that carries `epoch` and `map`
/// columns; errors name the offending line.
pub fn read_curve(path: &Path) -> Result<Curve> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, "line 1: empty file, expected a CSV header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let epoch_at = cols
        .iter()
        .position(|c| *c == "epoch")
        .ok_or_else(|| Error::parse(path, "line 1: no `epoch` column"))?;
    let map_at = cols
        .iter()
        .position(|c| *c == "map" || *c == "mAP")
        .ok_or_else(|| Error::parse(path, "line 1: no `map` column"))?;
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(
                path,
                format!("line {}: {} fields, header has {}", i + 1, fields.len(), cols.len()),
            ));
        }
        let parse = |at: usize| -> Result<f64> {
            fields[at].trim().parse().map_err(|_| {
                Error::parse(path, format!("line {}: bad number {:?}", i + 1, fields[at]))
            })
        };
        points.push((parse(epoch_at)?, parse(map_at)?));
    }
    if points.is_empty() {
        return Err(Error::parse(path, "line 2: no data rows"));
    }
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Curve { label, points })
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders curves into a fixed 800x500 SVG with axes, ticks and a legend.
pub fn render_svg(curves: &[Curve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Contract("plot needs at least one curve".into()));
    }
    let x_max = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let y_raw = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.1))
        .fold(0.0f64, f64::max);
    // Headroom: next 0.1 step above the data, capped sensibly for AP-like values.
    let y_max = ((y_raw * 10.0).floor() / 10.0 + 0.1).max(0.1);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + x / x_max * plot_w;
    let sy = |y: f64| MARGIN_T + (1.0 - y / y_max) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");

    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    );

    // Ticks and grid: five divisions each way.
    for i in 0..=5 {
        let xv = x_max * i as f64 / 5.0;
        let x = sx(xv);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            fmt(x),
            fmt(HEIGHT - MARGIN_B),
            fmt(x),
            fmt(HEIGHT - MARGIN_B + 5.0)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            fmt(x),
            fmt(HEIGHT - MARGIN_B + 18.0),
            fmt(xv)
        );
        let yv = y_max * i as f64 / 5.0;
        let y = sy(yv);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            fmt(MARGIN_L),
            fmt(y),
            fmt(WIDTH - MARGIN_R),
            fmt(y)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN_L - 6.0),
            fmt(y + 4.0),
            fmt(yv)
        );
    }

    // Axis labels.
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\">epoch</text>",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(HEIGHT - 6.0)
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">mAP</text>",
        fmt(MARGIN_T + plot_h / 2.0),
        fmt(MARGIN_T + plot_h / 2.0)
    );

    // Curves and legend.
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            curve.points.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_R + 10.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            fmt(lx),
            fmt(ly - 4.0),
            fmt(lx + 20.0),
            fmt(ly - 4.0)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{}</text>",
            fmt(lx + 26.0),
            fmt(ly),
            xml_escape(&curve.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_render_identical_bytes() {
        let curves = vec![
            Curve { label: "a".into(), points: vec![(0.0, 0.1), (1.0, 0.3), (2.0, 0.35)] },
            Curve { label: "b".into(), points: vec![(0.0, 0.05), (1.0, 0.2), (2.0, 0.4)] },
        ];
        let one = render_svg(&curves).unwrap();
        let two = render_svg(&curves).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.matches("<polyline").count(), 2);
        assert!(one.starts_with("<svg"));
        assert!(one.contains("viewBox=\"0 0 800 500\""));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        let err = read_curve(&empty).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "epoch,map\n0,0.5\n1,not_a_number\n").unwrap();
        let err = read_curve(&bad).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");

        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "step,value\n0,1\n").unwrap();
        let err = read_curve(&missing).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn reads_full_metrics_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        std::fs::write(&p, "epoch,lr,loss_task,kd_p3,kd_p4,kd_p5,ap50,ap75,map\n0,0.001,2.0,0,0,0,0.1,0.05,0.07\n1,0.0009,1.5,0,0,0,0.2,0.1,0.12\n").unwrap();
        let c = read_curve(&p).unwrap();
        assert_eq!(c.label, "metrics");
        assert_eq!(c.points, vec![(0.0, 0.07), (1.0, 0.12)]);
    }
}
