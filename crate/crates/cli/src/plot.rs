//! Minimal SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v
                .filter(|x| x.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        Axes {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    );
}

fn frame(out: &mut String, a: &Axes, xlabel: &str, ylabel: &str, xticks: &[f64]) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    for &t in xticks {
        let x = a.px(t);
        let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{y1:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y1 + 18.0, t);
    }
    for k in 0..=4 {
        let v = a.y.0 + (a.y.1 - a.y.0) * k as f64 / 4.0;
        let y = a.py(v);
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 8.0, y + 4.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 18.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn distinct(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Points per series plus a line through each series' per-x means.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let a = Axes::fit(all().map(|p| p.0), all().map(|p| p.1));
    let mut out = String::new();
    header(&mut out, title);
    frame(&mut out, &a, xlabel, ylabel, &distinct(all().map(|p| p.0)));
    for (k, s) in series.iter().enumerate() {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{}" fill-opacity="0.7"/>"#,
                    a.px(x),
                    a.py(y),
                    s.color
                );
            }
        }
        let means: Vec<String> = distinct(s.points.iter().map(|p| p.0))
            .into_iter()
            .map(|x| {
                let ys: Vec<f64> = s.points.iter().filter(|p| p.0 == x).map(|p| p.1).collect();
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                format!("{:.1},{:.1}", a.px(x), a.py(m))
            })
            .collect();
        if means.len() > 1 {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                means.join(" "),
                s.color
            );
        }
        let ly = TOP + 20.0 + 20.0 * k as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(out, r#"<circle cx="{lx:.1}" cy="{ly:.1}" r="4" fill="{}"/>"#, s.color);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 10.0, ly + 4.0, escape(s.label));
    }
    out.push_str("</svg>\n");
    out
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One box per group: quartiles, median and whiskers at the extremes.
pub fn boxplot(title: &str, xlabel: &str, ylabel: &str, groups: &[(f64, Vec<f64>)]) -> String {
    let xs = groups.iter().map(|g| g.0);
    let ys = groups.iter().flat_map(|g| g.1.iter().copied());
    let mut a = Axes::fit(xs.clone(), ys);
    if groups.len() > 1 {
        let step = groups.windows(2).map(|w| w[1].0 - w[0].0).fold(f64::INFINITY, f64::min);
        a.x = (groups[0].0 - step / 2.0, groups[groups.len() - 1].0 + step / 2.0);
    }
    let half = if groups.len() > 1 {
        0.3 * (a.px(groups[1].0) - a.px(groups[0].0)).abs()
    } else {
        30.0
    };
    let mut out = String::new();
    header(&mut out, title);
    frame(&mut out, &a, xlabel, ylabel, &distinct(xs));
    for (x, values) in groups {
        let mut v: Vec<f64> = values.iter().copied().filter(|y| y.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let [lo, q1, med, q3, hi] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| a.py(quantile(&v, q)));
        let cx = a.px(*x);
        let _ = writeln!(out, r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>"#);
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{q3:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            2.0 * half,
            (q1 - q3).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{med:.1}" x2="{:.1}" y2="{med:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half
        );
    }
    out.push_str("</svg>\n");
    out
}
