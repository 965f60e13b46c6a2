//! SVG trajectory plots built from an evaluation report.

use std::fmt::Write as _;

use serde::Deserialize;

/// The report columns a plot needs. `q05` and `q95` keep their CSV text so
/// the band edges can be written out unchanged.
#[derive(Debug, Clone, Deserialize)]
pub struct PlotRow {
    pub experiment: String,
    pub timestamp: f64,
    pub q05: String,
    pub q50: f64,
    pub q95: String,
    pub true_rul: f64,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;

struct Axes {
    x0: f64,
    x1: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - y / self.y1 * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn points(axes: &Axes, xy: impl Iterator<Item = (f64, f64)>) -> String {
    xy.map(|(x, y)| format!("{:.2},{:.2}", axes.px(x), axes.py(y))).collect::<Vec<_>>().join(" ")
}

/// Renders one experiment. Rows must belong to the same experiment and
/// `q05`/`q95` must parse as numbers.
pub fn render(rows: &[PlotRow]) -> Result<String, String> {
    let id = rows.first().map(|r| r.experiment.clone()).ok_or("no rows to plot")?;
    let lo: Vec<f64> = rows.iter().map(|r| r.q05.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{id}: q05: {e}"))?;
    let hi: Vec<f64> = rows.iter().map(|r| r.q95.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{id}: q95: {e}"))?;

    let x0 = rows.iter().map(|r| r.timestamp).fold(f64::INFINITY, f64::min);
    let mut x1 = rows.iter().map(|r| r.timestamp).fold(f64::NEG_INFINITY, f64::max);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let y_max = rows
        .iter()
        .zip(&hi)
        .map(|(r, h)| r.true_rul.max(r.q50).max(*h))
        .fold(0.0, f64::max);
    let axes = Axes {
        x0,
        x1,
        y1: if y_max > 0.0 { 1.05 * y_max } else { 1.0 },
    };

    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(w, r#"<title>{}</title>"#, escape(&id));
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let band = points(&axes, rows.iter().zip(&lo).map(|(r, &q)| (r.timestamp, q)))
        + " "
        + &points(&axes, rows.iter().zip(&hi).rev().map(|(r, &q)| (r.timestamp, q)));
    let _ = writeln!(w, r##"<polygon class="band" fill="#9ecae1" fill-opacity="0.5" stroke="none" points="{band}"/>"##);
    let ts: Vec<String> = rows.iter().map(|r| r.timestamp.to_string()).collect();
    let q05: Vec<&str> = rows.iter().map(|r| r.q05.as_str()).collect();
    let q95: Vec<&str> = rows.iter().map(|r| r.q95.as_str()).collect();
    let _ = writeln!(
        w,
        r#"<g class="band-edges" data-timestamps="{}" data-q05="{}" data-q95="{}"/>"#,
        ts.join(" "),
        escape(&q05.join(" ")),
        escape(&q95.join(" ")),
    );
    let median = points(&axes, rows.iter().map(|r| (r.timestamp, r.q50)));
    let _ = writeln!(w, r##"<polyline class="median" fill="none" stroke="#08519c" stroke-width="1.5" points="{median}"/>"##);
    let truth = points(&axes, rows.iter().map(|r| (r.timestamp, r.true_rul)));
    let _ = writeln!(w, r#"<polyline class="true-rul" fill="none" stroke="black" stroke-dasharray="6 3" stroke-width="1.5" points="{truth}"/>"#);

    // Axes, ticks and labels.
    let (bx, by) = (LEFT, HEIGHT - BOTTOM);
    let _ = writeln!(w, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(w, r#"<line x1="{bx}" y1="{by}" x2="{}" y2="{by}"/>"#, WIDTH - RIGHT);
    let _ = writeln!(w, r#"<line x1="{bx}" y1="{by}" x2="{bx}" y2="{TOP}"/>"#);
    let _ = writeln!(w, "</g>");
    let _ = writeln!(w, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#);
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = axes.x0 + f * (axes.x1 - axes.x0);
        let yv = f * axes.y1;
        let (x, y) = (axes.px(xv), axes.py(yv));
        let _ = writeln!(w, r#"<line x1="{x:.2}" y1="{by}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, by + 5.0);
        let _ = writeln!(w, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{xv:.0}</text>"#, by + 18.0);
        let _ = writeln!(w, r#"<line x1="{:.2}" y1="{y:.2}" x2="{bx}" y2="{y:.2}" stroke="black"/>"#, bx - 5.0);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.0}</text>"#, bx - 8.0, y + 4.0);
    }
    let _ = writeln!(w, "</g>");
    let _ = writeln!(
        w,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13">time [s]</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        w,
        r#"<text class="y-label" transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle" font-family="sans-serif" font-size="13">RUL [s]</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0
    );
    let _ = writeln!(
        w,
        r#"<text x="{LEFT}" y="24" font-family="sans-serif" font-size="14">{}: true RUL (dashed) and median with 5–95% band</text>"#,
        escape(&id)
    );
    let _ = writeln!(w, "</svg>");
    Ok(svg)
}

/// Groups rows by experiment, keeping first-appearance order.
pub fn group(rows: Vec<PlotRow>) -> Vec<(String, Vec<PlotRow>)> {
    let mut out: Vec<(String, Vec<PlotRow>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(id, _)| *id == r.experiment) {
            Some((_, v)) => v.push(r),
            None => out.push((r.experiment.clone(), vec![r])),
        }
    }
    for (_, v) in &mut out {
        v.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, rul: f64) -> PlotRow {
        PlotRow {
            experiment: "e<1>".into(),
            timestamp: t,
            q05: format!("{}", 0.5 * rul),
            q50: rul,
            q95: format!("{}", 1.5 * rul),
            true_rul: rul,
        }
    }

    #[test]
    fn svg_has_band_lines_and_labels() {
        let svg = render(&[row(0.0, 300.0), row(10.0, 290.0), row(20.0, 280.0)]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"class="band""#));
        assert!(svg.contains(r#"class="median""#));
        assert!(svg.contains(r#"class="true-rul""#));
        assert!(svg.contains("time [s]") && svg.contains("RUL [s]"));
        assert!(svg.contains(r#"data-q05="150 145 140""#));
        assert!(svg.contains("e&lt;1&gt;"));
    }

    #[test]
    fn single_row_and_bad_quantile() {
        assert!(render(&[row(5.0, 10.0)]).is_ok());
        let mut bad = row(0.0, 1.0);
        bad.q95 = "x".into();
        assert!(render(&[bad]).is_err());
        assert!(render(&[]).is_err());
    }

    #[test]
    fn grouping_keeps_order() {
        let mut b = row(3.0, 1.0);
        b.experiment = "b".into();
        let groups = group(vec![row(2.0, 1.0), b, row(1.0, 2.0)]);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].1.iter().map(|r| r.timestamp).collect::<Vec<_>>(), [1.0, 2.0]);
    }
}
