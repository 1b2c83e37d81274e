//! Static SVG line plots: ensemble mean with a shaded 5-95% band.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;

pub struct Series<'a> {
    pub times: &'a [f64],
    pub mean: &'a [f64],
    /// Lower and upper band edges.
    pub band: Option<(&'a [f64], &'a [f64])>,
    /// Optional reference curve drawn dashed.
    pub reference: Option<&'a [f64]>,
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_band_svg(title: &str, x_label: &str, y_label: &str, s: &Series<'_>) -> String {
    let finite = |v: &&f64| v.is_finite();
    let mut ys: Vec<f64> = s.mean.iter().filter(finite).copied().collect();
    if let Some((lo, hi)) = s.band {
        ys.extend(lo.iter().chain(hi).filter(finite));
    }
    if let Some(r) = s.reference {
        ys.extend(r.iter().filter(finite));
    }
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 * y0.abs().max(1.0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (x0, x1) = match (s.times.first(), s.times.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a, a + 1.0),
        _ => (0.0, 1.0),
    };
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0) * ph;
    let path = |vals: &[f64]| {
        let mut d = String::new();
        let mut pen_up = true;
        for (t, v) in s.times.iter().zip(vals) {
            if !v.is_finite() {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_up { "M" } else { "L" }, px(*t), py(*v));
            pen_up = false;
        }
        d
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    for t in ticks(x0, x1, 5) {
        let x = px(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{MARGIN_T}" x2="{x:.2}" y2="{:.2}" stroke="#eee"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            MARGIN_T + ph,
            MARGIN_T + ph + 16.0,
            fmt_tick(t)
        );
    }
    for v in ticks(y0, y1, 5) {
        let y = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#eee"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_L + pw,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_T + ph / 2.0,
        escape(y_label)
    );
    if let Some((lo, hi)) = s.band {
        let mut d = String::new();
        let pts: Vec<(f64, f64, f64)> = s
            .times
            .iter()
            .zip(lo.iter().zip(hi))
            .filter(|(_, (a, b))| a.is_finite() && b.is_finite())
            .map(|(t, (a, b))| (*t, *a, *b))
            .collect();
        for (i, (t, _, b)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(*t), py(*b));
        }
        for (t, a, _) in pts.iter().rev() {
            let _ = write!(d, "L{:.2},{:.2} ", px(*t), py(*a));
        }
        if !pts.is_empty() {
            let _ = writeln!(svg, r##"<path d="{d}Z" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##);
        }
    }
    if let Some(r) = s.reference {
        let _ = writeln!(
            svg,
            r##"<path d="{}" fill="none" stroke="#d62728" stroke-width="1.2" stroke-dasharray="5,3"/>"##,
            path(r)
        );
    }
    let _ = writeln!(svg, r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##, path(s.mean));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_and_contains_band() {
        let t = [0.0, 1.0, 2.0];
        let m = [1.0, 2.0, 1.5];
        let lo = [0.5, 1.5, 1.0];
        let hi = [1.5, 2.5, 2.0];
        let svg = line_band_svg("P_a <x>", "t [s]", "mmHg", &Series { times: &t, mean: &m, band: Some((&lo, &hi)), reference: None });
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("fill-opacity"));
        assert!(svg.contains("P_a &lt;x&gt;"));
    }

    #[test]
    fn constant_and_empty_series_do_not_panic() {
        let svg = line_band_svg("c", "t", "y", &Series { times: &[0.0, 1.0], mean: &[3.0, 3.0], band: None, reference: None });
        assert!(svg.contains("<path"));
        line_band_svg("e", "t", "y", &Series { times: &[], mean: &[], band: None, reference: None });
    }
}
