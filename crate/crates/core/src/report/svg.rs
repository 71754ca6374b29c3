//! Minimal SVG 1.1 document builder and the three plot kinds.

use std::fmt::Write;

use super::{DeltaRow, FoldRow, SweepRow};
use crate::experiments::LABELS;

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    pub fn raw(&mut self, s: &str) {
        self.body.push_str(s);
        self.body.push('\n');
    }

    pub fn text(&mut self, x: f64, y: f64, class: &str, anchor: &str, content: &str) {
        self.raw(&format!(
            r#"<text class="{class}" x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#,
            escape(content)
        ));
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, class: &str) {
        self.raw(&format!(r#"<line class="{class}" x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}"/>"#));
    }

    pub fn finish(self) -> String {
        let mut out = String::new();
        writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        )
        .unwrap();
        out.push_str(
            "<style>text{font-family:sans-serif;font-size:10px} .title{font-size:12px;font-weight:bold} \
             .axis,.whisker,.median{stroke:#333;stroke-width:1} .grid{stroke:#ddd;stroke-width:0.5} \
             .box{stroke:#333;fill-opacity:0.35}</style>\n",
        );
        out.push_str(&self.body);
        out.push_str("</svg>\n");
        out
    }
}

/// Vertical value axis of one panel; returns the value-to-y map.
struct Panel {
    x0: f64,
    y0: f64,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn y(&self, v: f64) -> f64 {
        let t = if self.hi > self.lo { (v - self.lo) / (self.hi - self.lo) } else { 0.5 };
        self.y0 + PANEL_H - t * PANEL_H
    }

    fn draw_axes(&self, svg: &mut Svg, title: &str) {
        svg.text(self.x0 + PANEL_W / 2.0, self.y0 - 10.0, "title", "middle", title);
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.y(v);
            svg.line(self.x0, y, self.x0 + PANEL_W, y, "grid");
            svg.text(self.x0 - 4.0, y + 3.0, "tick", "end", &format!("{v:.2}"));
        }
        svg.line(self.x0, self.y0, self.x0, self.y0 + PANEL_H, "axis");
        svg.line(self.x0, self.y0 + PANEL_H, self.x0 + PANEL_W, self.y0 + PANEL_H, "axis");
    }
}

/// Range covering `values` padded a little, clipped to `[floor, 1]` when the data allow.
fn value_range(values: impl Iterator<Item = f64>, floor: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.01);
    ((lo - pad).max(floor.min(lo)), hi + pad)
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (i, f) = (h.floor() as usize, h.fract());
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

fn ordered_unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = vec![];
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// One panel per label, one box per evaluation set with every fold drawn as a point.
pub fn boxplot(rows: &[FoldRow]) -> String {
    let names: Vec<String> = rows.iter().map(FoldRow::set_name).collect();
    let sets = ordered_unique(names.iter().map(String::as_str));
    let width = MARGIN + LABELS.len() as f64 * (PANEL_W + MARGIN);
    let mut svg = Svg::new(width, PANEL_H + 2.5 * MARGIN + 14.0 * sets.len() as f64);
    let (lo, hi) = value_range(rows.iter().map(|r| r.dice), 0.0);
    for (li, label) in LABELS.iter().enumerate() {
        let panel = Panel { x0: MARGIN + li as f64 * (PANEL_W + MARGIN), y0: MARGIN, lo, hi };
        panel.draw_axes(&mut svg, label);
        let slot = PANEL_W / sets.len().max(1) as f64;
        for (si, set) in sets.iter().enumerate() {
            let mut values: Vec<f64> =
                rows.iter().filter(|r| r.label == *label && r.set_name() == *set).map(|r| r.dice).collect();
            if values.is_empty() {
                continue;
            }
            values.sort_by(f64::total_cmp);
            let cx = panel.x0 + slot * (si as f64 + 0.5);
            let half = slot * 0.3;
            let (q1, med, q3) = (quantile(&values, 0.25), quantile(&values, 0.5), quantile(&values, 0.75));
            let color = COLORS[si % COLORS.len()];
            svg.raw(&format!(
                r#"<g class="boxgroup" data-set="{}" data-label="{label}">"#,
                escape(set)
            ));
            svg.line(cx, panel.y(values[0]), cx, panel.y(*values.last().unwrap()), "whisker");
            svg.raw(&format!(
                r#"<rect class="box" x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                cx - half,
                panel.y(q3),
                2.0 * half,
                (panel.y(q1) - panel.y(q3)).max(0.5)
            ));
            svg.line(cx - half, panel.y(med), cx + half, panel.y(med), "median");
            for v in &values {
                svg.raw(&format!(
                    r#"<circle class="point" cx="{cx:.1}" cy="{:.1}" r="2.5" fill="{color}"><title>{v:.3}</title></circle>"#,
                    panel.y(*v)
                ));
            }
            svg.text(cx, panel.y0 + PANEL_H + 14.0, "value", "middle", &format!("{med:.3}"));
            svg.raw("</g>");
        }
    }
    for (si, set) in sets.iter().enumerate() {
        let y = PANEL_H + 2.0 * MARGIN + 14.0 * si as f64;
        svg.raw(&format!(r#"<rect x="{MARGIN}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[si % COLORS.len()]));
        svg.text(MARGIN + 14.0, y, "legend", "start", set);
    }
    svg.finish()
}

/// One panel per label with one line per evaluation set, for a single method.
pub fn sweep_curves(rows: &[SweepRow], method: u8) -> String {
    let rows: Vec<&SweepRow> = rows.iter().filter(|r| r.method == method).collect();
    let sets = ordered_unique(rows.iter().map(|r| r.evaluation_set.as_str()));
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let (nmin, nmax) = (ns.first().copied().unwrap_or(0) as f64, ns.last().copied().unwrap_or(1) as f64);
    let width = MARGIN + LABELS.len() as f64 * (PANEL_W + MARGIN);
    let mut svg = Svg::new(width, PANEL_H + 2.5 * MARGIN + 14.0 * sets.len() as f64);
    let (lo, hi) = value_range(rows.iter().map(|r| r.dice), 0.0);
    svg.text(width / 2.0, 14.0, "title", "middle", &format!("method {method}"));
    for (li, label) in LABELS.iter().enumerate() {
        let panel = Panel { x0: MARGIN + li as f64 * (PANEL_W + MARGIN), y0: MARGIN, lo, hi };
        panel.draw_axes(&mut svg, label);
        let x = |n: usize| {
            let t = if nmax > nmin { (n as f64 - nmin) / (nmax - nmin) } else { 0.5 };
            panel.x0 + 8.0 + t * (PANEL_W - 16.0)
        };
        for &n in &ns {
            svg.text(x(n), panel.y0 + PANEL_H + 12.0, "tick", "middle", &n.to_string());
        }
        for (si, set) in sets.iter().enumerate() {
            let mut pts: Vec<&&SweepRow> = rows.iter().filter(|r| r.label == *label && r.evaluation_set == *set).collect();
            pts.sort_by_key(|r| r.n);
            let color = COLORS[si % COLORS.len()];
            let path: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", x(r.n), panel.y(r.dice))).collect();
            svg.raw(&format!(
                r#"<g class="curve" data-set="{}" data-label="{label}"><polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(set),
                path.join(" ")
            ));
            for r in &pts {
                svg.raw(&format!(
                    r#"<circle class="marker" cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"><title>n={} {:.3}</title></circle>"#,
                    x(r.n),
                    panel.y(r.dice),
                    r.n,
                    r.dice
                ));
            }
            svg.raw("</g>");
        }
    }
    for (si, set) in sets.iter().enumerate() {
        let y = PANEL_H + 2.0 * MARGIN + 14.0 * si as f64;
        svg.raw(&format!(r#"<rect x="{MARGIN}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[si % COLORS.len()]));
        svg.text(MARGIN + 14.0, y, "legend", "start", set);
    }
    svg.finish()
}

/// Grouped bars of dice deltas: one group per label, one bar per evaluation set.
pub fn delta_bars(rows: &[DeltaRow], method: u8) -> String {
    let rows: Vec<&DeltaRow> = rows.iter().filter(|r| r.method == method).collect();
    let sets = ordered_unique(rows.iter().map(|r| r.evaluation_set.as_str()));
    let width = 2.0 * MARGIN + 2.0 * PANEL_W;
    let mut svg = Svg::new(width, PANEL_H + 2.5 * MARGIN + 14.0 * sets.len() as f64);
    let extent = rows.iter().map(|r| r.delta.abs()).fold(0.01, f64::max) * 1.2;
    let panel = Panel { x0: MARGIN, y0: MARGIN, lo: -extent, hi: extent };
    panel.draw_axes(&mut svg, &format!("dice change, method {method}"));
    let inner = 2.0 * PANEL_W;
    svg.line(panel.x0, panel.y(0.0), panel.x0 + inner, panel.y(0.0), "axis");
    let group = inner / LABELS.len() as f64;
    let bar = group * 0.8 / sets.len().max(1) as f64;
    for (li, label) in LABELS.iter().enumerate() {
        let gx = panel.x0 + li as f64 * group + group * 0.1;
        svg.text(gx + group * 0.4, panel.y0 + PANEL_H + 14.0, "tick", "middle", label);
        for (si, set) in sets.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.label == *label && r.evaluation_set == *set) else { continue };
            let (ya, yb) = (panel.y(r.delta), panel.y(0.0));
            let x = gx + si as f64 * bar;
            svg.raw(&format!(
                r#"<rect class="bar" data-set="{}" data-label="{label}" x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                escape(set),
                ya.min(yb),
                bar * 0.9,
                (ya - yb).abs().max(0.5),
                COLORS[si % COLORS.len()]
            ));
            let ty = if r.delta >= 0.0 { ya - 3.0 } else { ya + 10.0 };
            svg.text(x + bar * 0.45, ty, "value", "middle", &format!("{:+.3}", r.delta));
        }
    }
    for (si, set) in sets.iter().enumerate() {
        let y = PANEL_H + 2.0 * MARGIN + 14.0 * si as f64;
        svg.raw(&format!(r#"<rect x="{MARGIN}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[si % COLORS.len()]));
        svg.text(MARGIN + 14.0, y, "legend", "start", set);
    }
    svg.finish()
}
