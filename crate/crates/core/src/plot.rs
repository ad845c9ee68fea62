//! SVG pictures of the posterior geometry of a two-state problem.

use crate::error::{Error, Result};
use crate::geometry::{support_function, Belief, ConcaveEvaluator, Direction};
use crate::ri::{objective_upper_envelope, Instance};
use std::fmt::Write;

const SAMPLES: usize = 401;
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 36.0;
const COLORS: [&str; 6] = ["#1f5fbf", "#c0392b", "#2e8b57", "#8e44ad", "#d35400", "#555555"];

/// A support line `y = delta* + slope * gamma` and its tangency points.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportLine {
    pub slope: f64,
    pub intercept: f64,
    pub tangency: Vec<f64>,
}

/// Net utilities, the upper envelope `N`, and the support lines at `slopes`,
/// sampled on a grid of `gamma = P(omega_1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeData {
    pub gamma: Vec<f64>,
    /// `N^a(gamma)`, `-inf` where unavailable.
    pub net: Vec<Vec<f64>>,
    pub envelope: Vec<f64>,
    /// Least concave majorant of `envelope` on the grid.
    pub concave_hull: Vec<f64>,
    pub lines: Vec<SupportLine>,
}

pub fn envelope_data(instance: &Instance, slopes: &[f64]) -> Result<EnvelopeData> {
    if instance.num_states() != 2 {
        return Err(Error::InvalidInput("plots need exactly two states".into()));
    }
    let gamma: Vec<f64> = (0..SAMPLES).map(|i| i as f64 / (SAMPLES - 1) as f64).collect();
    let k = instance.num_alternatives();
    let evs: Vec<_> = (0..k).map(|a| instance.evaluator(a)).collect();
    let net: Vec<Vec<f64>> = evs
        .iter()
        .map(|ev| gamma.iter().map(|g| ev.value(&[*g, 1.0 - g])).collect())
        .collect();
    let envelope: Vec<f64> = gamma
        .iter()
        .map(|g| objective_upper_envelope(instance, &Belief::new(vec![*g, 1.0 - g]).expect("grid belief")).0)
        .collect();
    let concave_hull = upper_hull(&gamma, &envelope);
    let dyn_evs: Vec<&dyn ConcaveEvaluator> = evs.iter().map(|e| e as &dyn ConcaveEvaluator).collect();
    let mut lines = Vec::with_capacity(slopes.len());
    for s in slopes {
        let res = support_function(&dyn_evs, &Direction::new(vec![*s])?)?;
        lines.push(SupportLine {
            slope: *s,
            intercept: res.value,
            tangency: res.supported_posteriors.iter().map(|p| p.posterior.probs()[0]).collect(),
        });
    }
    Ok(EnvelopeData {
        gamma,
        net,
        envelope,
        concave_hull,
        lines,
    })
}

fn upper_hull(x: &[f64], y: &[f64]) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, v)| v.is_finite()).map(|(a, b)| (*a, *b)).collect();
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    x.iter()
        .map(|t| {
            let i = hull.partition_point(|h| h.0 < *t);
            match i {
                0 => hull.first().map_or(f64::NEG_INFINITY, |h| if (h.0 - t).abs() < 1e-15 { h.1 } else { f64::NEG_INFINITY }),
                i if i == hull.len() => f64::NEG_INFINITY,
                i => {
                    let (a, b) = (hull[i - 1], hull[i]);
                    a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
                }
            }
        })
        .collect()
}

struct Panel {
    ox: f64,
    oy: f64,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn px(&self, g: f64) -> f64 {
        self.ox + MARGIN + g * (PANEL_W - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        self.oy + PANEL_H - MARGIN - t * (PANEL_H - 2.0 * MARGIN)
    }

    fn path(&self, g: &[f64], v: &[f64]) -> String {
        let mut d = String::new();
        let mut pen = false;
        for (x, y) in g.iter().zip(v) {
            if y.is_finite() && *y >= self.lo && *y <= self.hi {
                let _ = write!(d, "{}{:.2},{:.2} ", if pen { "L" } else { "M" }, self.px(*x), self.py(*y));
                pen = true;
            } else {
                pen = false;
            }
        }
        d
    }

    fn frame(&self, out: &mut String, title: &str) {
        let _ = writeln!(
            out,
            r#"<g font-family="sans-serif" font-size="12"><line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black"/><line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{yt:.1}" stroke="black"/><text x="{x0:.1}" y="{yl:.1}" text-anchor="middle">0</text><text x="{x1:.1}" y="{yl:.1}" text-anchor="middle">1</text><text x="{xm:.1}" y="{yl:.1}" text-anchor="middle">γ = P(ω1)</text><text x="{x0:.1}" y="{yh:.1}">{title}</text></g>"#,
            x0 = self.px(0.0),
            x1 = self.px(1.0),
            xm = self.px(0.5),
            y0 = self.oy + PANEL_H - MARGIN,
            yt = self.oy + MARGIN,
            yl = self.oy + PANEL_H - MARGIN + 16.0,
            yh = self.oy + MARGIN - 12.0,
        );
    }
}

/// Four panels: the net utilities, their upper envelope `N`, the hypograph
/// with its concave majorant, and the support lines at `slopes`.
pub fn envelope_svg(instance: &Instance, names: &[String], slopes: &[f64]) -> Result<String> {
    let data = envelope_data(instance, slopes)?;
    let finite = data.net.iter().flatten().chain(&data.envelope).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return Err(Error::NonFinite);
    }
    let pad = 0.1 * (hi - lo).max(1.0);
    lo -= pad;
    hi += pad;
    let mut out = String::new();
    let (w, h) = (2.0 * PANEL_W, 2.0 * PANEL_H);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}"><rect width="{w}" height="{h}" fill="white"/>"#
    );
    let panels = [
        Panel { ox: 0.0, oy: 0.0, lo, hi },
        Panel { ox: PANEL_W, oy: 0.0, lo, hi },
        Panel { ox: 0.0, oy: PANEL_H, lo, hi },
        Panel { ox: PANEL_W, oy: PANEL_H, lo, hi },
    ];

    let p = &panels[0];
    p.frame(&mut out, "(a) net utilities");
    for (a, v) in data.net.iter().enumerate() {
        let c = COLORS[a % COLORS.len()];
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, p.path(&data.gamma, v));
        if let Some(end) = v.last().filter(|e| e.is_finite()) {
            let label = names.get(a).map_or_else(|| a.to_string(), Clone::clone);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{c}">N^{label}</text>"#, p.px(1.0) + 4.0, p.py(*end));
        }
    }

    let p = &panels[1];
    p.frame(&mut out, "(b) objective N");
    let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="black" stroke-width="2"/>"#, p.path(&data.gamma, &data.envelope));

    let p = &panels[2];
    p.frame(&mut out, "(c) hypograph and concave majorant");
    let mut fill = p.path(&data.gamma, &data.envelope);
    let _ = write!(fill, "L{:.2},{:.2} L{:.2},{:.2} Z", p.px(1.0), p.py(lo), p.px(0.0), p.py(lo));
    let _ = writeln!(out, r##"<path d="{fill}" fill="#cfd8e6" stroke="black"/>"##);
    let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="black" stroke-dasharray="5,3"/>"#, p.path(&data.gamma, &data.concave_hull));

    let p = &panels[3];
    p.frame(&mut out, "(d) supporting lines");
    let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="black" stroke-width="2"/>"#, p.path(&data.gamma, &data.envelope));
    for (i, line) in data.lines.iter().enumerate() {
        let c = COLORS[(i + 2) % COLORS.len()];
        let ys: Vec<f64> = data.gamma.iter().map(|g| line.intercept + line.slope * g).collect();
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{c}"/>"#, p.path(&data.gamma, &ys));
        for t in &line.tangency {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/><text x="{:.2}" y="{:.2}" font-size="11" fill="{c}">slope {}: δ*={:.4}, γ={:.4}</text>"#,
                p.px(*t),
                p.py(line.intercept + line.slope * t),
                p.px(0.02),
                p.oy + MARGIN + 4.0 + 14.0 * i as f64,
                line.slope,
                line.intercept,
                t
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ri::CostFamily;

    #[test]
    fn support_lines_of_the_worked_example() {
        let inst = Instance::from_parts(
            Belief::uniform(2),
            vec![vec![10.0, 5.0], vec![12.0, 3.0]],
            vec![1.0, 2.0],
            CostFamily::Quadratic,
            2.0,
        )
        .unwrap();
        let d = envelope_data(&inst, &[7.0, 8.0]).unwrap();
        assert!((d.lines[0].intercept - 6.25).abs() < 1e-9);
        assert!((d.lines[0].tangency[0] - 0.75).abs() < 1e-9);
        assert!((d.lines[1].intercept - 89.0 / 16.0).abs() < 1e-9);
        for (e, h) in d.envelope.iter().zip(&d.concave_hull) {
            assert!(h >= &(e - 1e-12));
        }
        let svg = envelope_svg(&inst, &["a".into(), "b".into()], &[7.0, 8.0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
