//! SVG figures: a covariate balance dot plot and an ERF curve with an
//! optional confidence band.

use std::fmt::Write as _;
use std::path::Path;

use crate::balance::BalanceReport;
use crate::erf::ErfEstimate;
use crate::error::{Error, Result};

pub const BALANCE_WIDTH: f64 = 640.0;
pub const BALANCE_LEFT: f64 = 140.0;
pub const BALANCE_RIGHT: f64 = 30.0;
const BALANCE_TOP: f64 = 50.0;
const ROW_HEIGHT: f64 = 24.0;
const BOTTOM: f64 = 60.0;

/// Pixel x-coordinate of an AC value on the balance axis: `[0, x_max]` maps
/// linearly onto `[BALANCE_LEFT, BALANCE_WIDTH - BALANCE_RIGHT]`.
pub fn balance_x(value: f64, x_max: f64) -> f64 {
    BALANCE_LEFT + value / x_max * (BALANCE_WIDTH - BALANCE_LEFT - BALANCE_RIGHT)
}

/// Upper end of the balance axis: the largest AC or the threshold.
pub fn balance_axis_max(report: &BalanceReport, threshold: f64) -> f64 {
    let m = report
        .covariates
        .iter()
        .flat_map(|c| [c.original_ac, c.adjusted_ac])
        .fold(threshold, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub fn balance_svg(report: &BalanceReport, threshold: f64) -> Result<String> {
    if report.covariates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows: Vec<_> = report.covariates.iter().collect();
    rows.sort_by(|a, b| b.original_ac.total_cmp(&a.original_ac));
    let x_max = balance_axis_max(report, threshold);
    let plot_bottom = BALANCE_TOP + ROW_HEIGHT * rows.len() as f64;
    let height = plot_bottom + BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{BALANCE_WIDTH}" height="{height}" viewBox="0 0 {BALANCE_WIDTH} {height}" font-family="sans-serif" font-size="12">"##
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (k, c) in rows.iter().enumerate() {
        let y = BALANCE_TOP + ROW_HEIGHT * (k as f64 + 0.5);
        let _ = writeln!(
            s,
            r##"<text class="covariate-label" x="{:.2}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{}</text>"##,
            BALANCE_LEFT - 8.0,
            y,
            escape(&c.name)
        );
        let _ = writeln!(
            s,
            r##"<circle class="marker original" cx="{:.2}" cy="{y:.2}" r="4" fill="none" stroke="#d95f02"/>"##,
            balance_x(c.original_ac, x_max)
        );
        let _ = writeln!(
            s,
            r##"<circle class="marker adjusted" cx="{:.2}" cy="{y:.2}" r="4" fill="#1b9e77"/>"##,
            balance_x(c.adjusted_ac, x_max)
        );
    }
    let x0 = balance_x(0.0, x_max);
    let x1 = balance_x(x_max, x_max);
    let _ = writeln!(
        s,
        r##"<path class="axis" d="M {x0:.2} {plot_bottom:.2} H {x1:.2}" stroke="black"/>"##
    );
    for k in 0..=4 {
        let v = x_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<text class="tick" x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"##,
            balance_x(v, x_max),
            plot_bottom + 16.0
        );
    }
    let xt = balance_x(threshold, x_max);
    let _ = writeln!(
        s,
        r##"<line class="threshold" x1="{xt:.2}" y1="{BALANCE_TOP:.2}" x2="{xt:.2}" y2="{plot_bottom:.2}" stroke="black"/>"##
    );
    let xm = balance_x(report.adjusted.mean_ac, x_max);
    let _ = writeln!(
        s,
        r##"<line class="mean-adjusted" x1="{xm:.2}" y1="{BALANCE_TOP:.2}" x2="{xm:.2}" y2="{plot_bottom:.2}" stroke="#1b9e77" stroke-dasharray="5 4"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle">Absolute correlation</text>"##,
        0.5 * (x0 + x1),
        plot_bottom + 40.0
    );
    let _ = writeln!(
        s,
        r##"<circle class="legend-marker" cx="{:.2}" cy="20" r="4" fill="none" stroke="#d95f02"/>
<text class="legend" x="{:.2}" y="24">original</text>
<circle class="legend-marker" cx="{:.2}" cy="20" r="4" fill="#1b9e77"/>
<text class="legend" x="{:.2}" y="24">adjusted</text>"##,
        x0,
        x0 + 10.0,
        x0 + 90.0,
        x0 + 100.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_balance_plot(report: &BalanceReport, threshold: f64, out_path: &Path) -> Result<()> {
    write_svg(out_path, &balance_svg(report, threshold)?)
}

const ERF_WIDTH: f64 = 640.0;
const ERF_HEIGHT: f64 = 420.0;
const ERF_MARGIN: f64 = 60.0;

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

pub fn erf_svg(erf: &ErfEstimate) -> Result<String> {
    if erf.is_empty() {
        return Err(Error::EmptyInput);
    }
    let fold = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)))
    };
    let (wl, wh) = span(fold(&erf.w_vals).0, fold(&erf.w_vals).1);
    let (mut yl, mut yh) = fold(&erf.estimates);
    if let (Some(lo), Some(hi)) = (&erf.ci_lower, &erf.ci_upper) {
        yl = yl.min(fold(lo).0);
        yh = yh.max(fold(hi).1);
    }
    let (yl, yh) = span(yl, yh);
    let px = |w: f64| ERF_MARGIN + (w - wl) / (wh - wl) * (ERF_WIDTH - 2.0 * ERF_MARGIN);
    let py = |y: f64| ERF_HEIGHT - ERF_MARGIN - (y - yl) / (yh - yl) * (ERF_HEIGHT - 2.0 * ERF_MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{ERF_WIDTH}" height="{ERF_HEIGHT}" viewBox="0 0 {ERF_WIDTH} {ERF_HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>"##
    );
    if let (Some(lo), Some(hi)) = (&erf.ci_lower, &erf.ci_upper) {
        let mut pts: Vec<String> = erf
            .w_vals
            .iter()
            .zip(hi)
            .map(|(w, y)| format!("{:.2},{:.2}", px(*w), py(*y)))
            .collect();
        pts.extend(
            erf.w_vals
                .iter()
                .zip(lo)
                .rev()
                .map(|(w, y)| format!("{:.2},{:.2}", px(*w), py(*y))),
        );
        let _ = writeln!(
            s,
            r##"<polygon class="band" points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
            pts.join(" ")
        );
    }
    let pts: Vec<String> = erf
        .w_vals
        .iter()
        .zip(&erf.estimates)
        .map(|(w, y)| format!("{:.2},{:.2}", px(*w), py(*y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="erf" points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
        pts.join(" ")
    );
    let (left, right) = (ERF_MARGIN, ERF_WIDTH - ERF_MARGIN);
    let (top, bottom) = (ERF_MARGIN, ERF_HEIGHT - ERF_MARGIN);
    let _ = writeln!(
        s,
        r##"<path class="axis" d="M {left} {top} V {bottom} H {right}" fill="none" stroke="black"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (w, y) = (wl + f * (wh - wl), yl + f * (yh - yl));
        let _ = writeln!(
            s,
            r##"<text class="tick" x="{:.2}" y="{:.2}" text-anchor="middle">{w:.2}</text>
<text class="tick" x="{:.2}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{y:.2}</text>"##,
            px(w),
            bottom + 16.0,
            left - 6.0,
            py(y)
        );
    }
    let _ = writeln!(
        s,
        r##"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle">Exposure</text>
<text class="axis-label" x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Estimated response</text>
</svg>"##,
        0.5 * (left + right),
        ERF_HEIGHT - 16.0,
        0.5 * (top + bottom),
        0.5 * (top + bottom)
    );
    Ok(s)
}

pub fn emit_erf_plot(erf: &ErfEstimate, out_path: &Path) -> Result<()> {
    write_svg(out_path, &erf_svg(erf)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{CovariateBalance, ThresholdType};
    use quick_xml::events::Event;
    use quick_xml::Reader;
    use std::collections::HashMap;

    /// `(tag, attributes)` for every element; panics on malformed XML.
    fn elements(svg: &str) -> Vec<(String, HashMap<String, String>)> {
        let mut reader = Reader::from_str(svg);
        let mut out = Vec::new();
        loop {
            match reader.read_event().expect("well-formed XML") {
                Event::Start(e) | Event::Empty(e) => {
                    let attrs = e
                        .attributes()
                        .map(|a| {
                            let a = a.unwrap();
                            (
                                String::from_utf8(a.key.as_ref().to_vec()).unwrap(),
                                a.unescape_value().unwrap().into_owned(),
                            )
                        })
                        .collect();
                    out.push((String::from_utf8(e.name().as_ref().to_vec()).unwrap(), attrs));
                }
                Event::Eof => break,
                _ => {}
            }
        }
        out
    }

    fn with_class<'a>(els: &'a [(String, HashMap<String, String>)], class: &str) -> Vec<&'a HashMap<String, String>> {
        els.iter()
            .filter(|(_, a)| a.get("class").is_some_and(|c| c == class))
            .map(|(_, a)| a)
            .collect()
    }

    fn report(rows: &[(&str, f64, f64)]) -> BalanceReport {
        BalanceReport::from_values(
            rows.iter()
                .map(|(n, o, a)| CovariateBalance {
                    name: n.to_string(),
                    original_ac: *o,
                    adjusted_ac: *a,
                })
                .collect(),
            0.1,
            ThresholdType::Maximal,
        )
    }

    fn num(a: &HashMap<String, String>, k: &str) -> f64 {
        a[k].parse().unwrap()
    }

    #[test]
    fn single_covariate_counts() {
        let svg = balance_svg(&report(&[("c1", 0.4, 0.05)]), 0.1).unwrap();
        let els = elements(&svg);
        let markers = els
            .iter()
            .filter(|(_, a)| a.get("class").is_some_and(|c| c.starts_with("marker")))
            .count();
        assert_eq!(markers, 2);
        let vertical = els
            .iter()
            .filter(|(t, a)| t == "line" && a["x1"] == a["x2"])
            .count();
        assert_eq!(vertical, 2);
        assert!(els.iter().any(|(t, _)| t == "text"));
    }

    #[test]
    fn threshold_line_follows_axis_map() {
        let r = report(&[("c1", 0.4, 0.05)]);
        let els = elements(&balance_svg(&r, 0.1).unwrap());
        let line = with_class(&els, "threshold")[0];
        // Axis spans [0, 0.4] over 470 pixels starting at 140.
        let expected = 140.0 + 0.1 / 0.4 * 470.0;
        assert!((num(line, "x1") - expected).abs() < 0.006);
        assert!(line.get("stroke-dasharray").is_none());
        let mean = with_class(&els, "mean-adjusted")[0];
        assert!((num(mean, "x1") - (140.0 + 0.05 / 0.4 * 470.0)).abs() < 0.006);
        assert!(mean.contains_key("stroke-dasharray"));
    }

    #[test]
    fn markers_follow_ac_order() {
        let r = report(&[("b", 0.2, 0.08), ("a", 0.5, 0.02), ("c", 0.3, 0.12)]);
        let els = elements(&balance_svg(&r, 0.1).unwrap());
        let originals = with_class(&els, "marker original");
        let adjusted = with_class(&els, "marker adjusted");
        // Rows run a, c, b top to bottom; x = 140 + ac / 0.5 * 470.
        let ox: Vec<f64> = originals.iter().map(|a| num(a, "cx")).collect();
        assert_eq!(ox, vec![610.0, 422.0, 328.0]);
        let ax: Vec<f64> = adjusted.iter().map(|a| num(a, "cx")).collect();
        assert_eq!(ax, vec![158.8, 252.8, 215.2]);
        let ys: Vec<f64> = originals.iter().map(|a| num(a, "cy")).collect();
        assert!(ys.windows(2).all(|p| p[0] < p[1]));
    }

    fn erf(k: usize, flat: bool, bands: bool) -> ErfEstimate {
        let w: Vec<f64> = (0..k).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = w.iter().map(|v| if flat { 2.0 } else { 1.0 + v * v }).collect();
        ErfEstimate {
            ci_lower: bands.then(|| y.iter().map(|v| v - 0.3).collect()),
            ci_upper: bands.then(|| y.iter().map(|v| v + 0.3).collect()),
            w_vals: w,
            estimates: y,
            optimal_bw: None,
            risks: vec![],
        }
    }

    fn points(a: &HashMap<String, String>) -> Vec<(f64, f64)> {
        a["points"]
            .split_whitespace()
            .map(|p| {
                let (x, y) = p.split_once(',').unwrap();
                (x.parse().unwrap(), y.parse().unwrap())
            })
            .collect()
    }

    #[test]
    fn erf_polyline_and_band_cardinality() {
        let els = elements(&erf_svg(&erf(7, false, true)).unwrap());
        assert_eq!(points(with_class(&els, "erf")[0]).len(), 7);
        assert_eq!(points(with_class(&els, "band")[0]).len(), 14);
        let els = elements(&erf_svg(&erf(5, false, false)).unwrap());
        assert!(with_class(&els, "band").is_empty());
        assert!(els.iter().filter(|(t, _)| t == "text").count() >= 2);
    }

    #[test]
    fn constant_erf_is_horizontal() {
        let els = elements(&erf_svg(&erf(6, true, false)).unwrap());
        let pts = points(with_class(&els, "erf")[0]);
        assert!(pts.iter().all(|p| p.1 == pts[0].1));
        assert!(pts.windows(2).all(|p| p[0].0 < p[1].0));
    }

    #[test]
    fn names_are_escaped_and_empty_rejected() {
        let svg = balance_svg(&report(&[("a<b&c", 0.3, 0.1)]), 0.1).unwrap();
        elements(&svg);
        assert!(svg.contains("a&lt;b&amp;c"));
        assert!(balance_svg(&report(&[]), 0.1).is_err());
        assert!(erf_svg(&erf(0, true, false)).is_err());
    }
}
