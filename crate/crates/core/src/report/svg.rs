//! Hand-emitted grouped bar charts. No charting dependency: output bytes are
//! a pure function of the input, so golden-file tests stay stable.
//!
//! Layout constants (pixels): 900x420 canvas, 60 left / 30 right margins,
//! 40 top / 90 bottom margins, 4px gap between bars inside a group, 24px
//! between groups.

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 90.0;
const BAR_GAP: f64 = 4.0;
const GROUP_GAP: f64 = 24.0;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// One group of labeled bars.
#[derive(Debug, Clone)]
pub struct BarGroup {
    pub label: String,
    pub bars: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    pub groups: Vec<BarGroup>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Render a grouped bar chart; an empty chart still yields valid SVG.
pub fn grouped_bar_svg(chart: &BarChart) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        esc(&chart.title)
    ));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;

    // Axes.
    out.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{:.1}\" x2=\"{x0:.1}\" y2=\"{y0:.1}\" stroke=\"#333\"/>\n",
        MARGIN_TOP
    ));
    out.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{:.1}\" y2=\"{y0:.1}\" stroke=\"#333\"/>\n",
        x0 + plot_w
    ));

    let max_value = chart
        .groups
        .iter()
        .flat_map(|g| g.bars.iter().map(|(_, v)| *v))
        .fold(0.0_f64, f64::max);
    if chart.groups.is_empty() || max_value <= 0.0 {
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
             fill=\"#777\">no data</text>\n",
            WIDTH / 2.0,
            MARGIN_TOP + plot_h / 2.0
        ));
        out.push_str("</svg>\n");
        return out;
    }

    let total_bars: usize = chart.groups.iter().map(|g| g.bars.len()).sum();
    let gaps_within: f64 = chart
        .groups
        .iter()
        .map(|g| BAR_GAP * (g.bars.len().saturating_sub(1)) as f64)
        .sum();
    let gaps_between = GROUP_GAP * chart.groups.len() as f64;
    let bar_w = ((plot_w - gaps_within - gaps_between) / total_bars as f64).max(2.0);

    // Distinct series labels get stable palette slots in first-seen order.
    let mut series: Vec<&str> = Vec::new();
    for g in &chart.groups {
        for (label, _) in &g.bars {
            if !series.contains(&label.as_str()) {
                series.push(label);
            }
        }
    }

    // Y-axis ticks at quarters of the maximum.
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = y0 - plot_h * frac;
        let v = max_value * frac;
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"10\" text-anchor=\"end\">{v:.1}</text>\n",
            x0 - 6.0
        ));
        if i > 0 {
            out.push_str(&format!(
                "  <line x1=\"{x0:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
                 stroke=\"#ddd\" stroke-dasharray=\"3,3\"/>\n",
                x0 + plot_w
            ));
        }
    }

    let mut x = x0 + GROUP_GAP / 2.0;
    for group in &chart.groups {
        let group_width =
            bar_w * group.bars.len() as f64 + BAR_GAP * group.bars.len().saturating_sub(1) as f64;
        for (i, (label, value)) in group.bars.iter().enumerate() {
            let h = plot_h * value / max_value;
            let bx = x + (bar_w + BAR_GAP) * i as f64;
            let color =
                PALETTE[series.iter().position(|s| s == label).unwrap_or(0) % PALETTE.len()];
            out.push_str(&format!(
                "  <rect x=\"{bx:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" \
                 fill=\"{color}\"><title>{}: {value:.1}</title></rect>\n",
                y0 - h,
                esc(label)
            ));
        }
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\" \
             transform=\"rotate(-35 {:.1} {:.1})\">{}</text>\n",
            x + group_width / 2.0,
            y0 + 14.0,
            x + group_width / 2.0,
            y0 + 14.0,
            esc(&group.label)
        ));
        x += group_width + GROUP_GAP;
    }

    // Legend along the bottom edge.
    let mut lx = MARGIN_LEFT;
    let ly = HEIGHT - 12.0;
    for label in &series {
        let color = PALETTE[series.iter().position(|s| s == label).unwrap_or(0) % PALETTE.len()];
        out.push_str(&format!(
            "  <rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            ly - 9.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"10\">{}</text>\n",
            lx + 14.0,
            esc(label)
        ));
        lx += 14.0 + 7.0 * label.len() as f64 + 16.0;
    }

    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_chart_is_valid_svg() {
        let svg = grouped_bar_svg(&BarChart {
            title: "nothing".into(),
            groups: vec![],
        });
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("no data"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let chart = BarChart {
            title: "t".into(),
            groups: vec![BarGroup {
                label: "g".into(),
                bars: vec![("a".into(), 3.0), ("b".into(), 1.0)],
            }],
        };
        assert_eq!(grouped_bar_svg(&chart), grouped_bar_svg(&chart));
    }

    #[test]
    fn escapes_markup_in_labels() {
        let chart = BarChart {
            title: "a<b & \"c\"".into(),
            groups: vec![],
        };
        let svg = grouped_bar_svg(&chart);
        assert!(svg.contains("a&lt;b &amp; &quot;c&quot;"));
    }
}
