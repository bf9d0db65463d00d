//! Minimal static SVG rendering: grouped bar charts and a heatmap.
//! Enough to turn the analysis tables into figures without pulling in a
//! plotting stack.

use std::fmt::Write;

const FONT: &str = "font-family=\"sans-serif\"";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart. `series` holds (name, color, values); every value
/// list is as long as `bins`. `None` bins render as gaps.
pub fn bar_chart(
    title: &str,
    bins: &[String],
    series: &[(&str, &str, Vec<Option<f64>>)],
    y_label: &str,
    y_max: f64,
) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 60.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" {FONT}>{}</text>\n",
        w / 2.0,
        esc(title)
    );
    // Axes.
    let _ = write!(
        out,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h
    );
    let _ = write!(
        out,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = write!(
        out,
        "<text x=\"14\" y=\"{}\" font-size=\"11\" {FONT} transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        esc(y_label)
    );
    // Horizontal gridlines at quarters.
    for q in 0..=4 {
        let y = top + plot_h - plot_h * q as f64 / 4.0;
        let value = y_max * q as f64 / 4.0;
        let _ = write!(
            out,
            "<line x1=\"{left}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            left + plot_w
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" {FONT}>{:.0}</text>\n",
            left - 6.0,
            y + 3.0,
            value
        );
    }

    let group_w = plot_w / bins.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (bi, bin) in bins.iter().enumerate() {
        let gx = left + bi as f64 * group_w;
        for (si, (_, color, values)) in series.iter().enumerate() {
            if let Some(v) = values[bi] {
                let bh = (v / y_max).clamp(0.0, 1.0) * plot_h;
                let x = gx + group_w * 0.1 + si as f64 * bar_w;
                let y = top + plot_h - bh;
                let _ = write!(
                    out,
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"{color}\"/>\n"
                );
            }
        }
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\" {FONT}>{}</text>\n",
            gx + group_w / 2.0,
            top + plot_h + 16.0,
            esc(bin)
        );
    }
    // Legend.
    let mut lx = left;
    let ly = h - 18.0;
    for (name, color, _) in series {
        let _ = write!(
            out,
            "<rect x=\"{lx}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            ly - 9.0
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"11\" {FONT}>{}</text>\n",
            lx + 14.0,
            esc(name)
        );
        lx += 14.0 + 8.0 * name.len() as f64 + 20.0;
    }
    out.push_str("</svg>\n");
    out
}

/// Row-normalized heatmap; `cells[r][c]` in percent (0..=100).
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], cells: &[Vec<f64>]) -> String {
    let cell = 34.0;
    let (left, top) = (90.0, 70.0);
    let w = left + col_labels.len() as f64 * cell + 20.0;
    let h = top + row_labels.len() as f64 * cell + 20.0;
    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\" {FONT}>{}</text>\n",
        w / 2.0,
        esc(title)
    );
    for (ci, cl) in col_labels.iter().enumerate() {
        let x = left + ci as f64 * cell + cell / 2.0;
        let _ = write!(
            out,
            "<text x=\"{x:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"start\" {FONT} transform=\"rotate(-45 {x:.1} {})\">{}</text>\n",
            top - 8.0,
            top - 8.0,
            esc(cl)
        );
    }
    for (ri, rl) in row_labels.iter().enumerate() {
        let y = top + ri as f64 * cell + cell / 2.0 + 4.0;
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{y:.1}\" font-size=\"10\" text-anchor=\"end\" {FONT}>{}</text>\n",
            left - 6.0,
            esc(rl)
        );
        for (ci, &v) in cells[ri].iter().enumerate() {
            let x = left + ci as f64 * cell;
            let yy = top + ri as f64 * cell;
            let t = (v / 100.0).clamp(0.0, 1.0);
            // White → blue ramp.
            let rb = (255.0 - 200.0 * t) as u8;
            let g = (255.0 - 160.0 * t) as u8;
            let _ = write!(
                out,
                "<rect x=\"{x:.1}\" y=\"{yy:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({rb},{g},255)\" stroke=\"#999\"/>\n"
            );
            if v > 0.0 {
                let _ = write!(
                    out,
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\" {FONT}>{:.0}</text>\n",
                    x + cell / 2.0,
                    yy + cell / 2.0 + 3.0,
                    v
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_is_wellformed() {
        let bins = vec!["0".to_string(), "1".to_string(), "2+".to_string()];
        let svg = bar_chart(
            "missing vs excess",
            &bins,
            &[
                ("missing", "#4878cf", vec![Some(70.0), Some(24.0), Some(5.0)]),
                ("excess", "#ee854a", vec![Some(70.0), Some(20.0), None]),
            ],
            "% of instances",
            100.0,
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 5 + 2); // 5 bars + 2 legend keys
    }

    #[test]
    fn heatmap_escapes_labels() {
        let svg = heatmap(
            "m",
            &["<A0>".to_string()],
            &["B&C".to_string()],
            &[vec![55.5]],
        );
        assert!(svg.contains("&lt;A0&gt;"));
        assert!(svg.contains("B&amp;C"));
    }
}
