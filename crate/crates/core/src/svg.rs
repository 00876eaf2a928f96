//! SVG frames: potential heatmap, event particles, shape samples and forces.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::fitter::HeatmapGrid;

const SIZE: f64 = 480.0;

/// Blue-white-red ramp over `t` in `[-1, 1]`.
pub fn diverging(t: f64) -> (u8, u8, u8) {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.0 {
        let s = -t;
        (lerp(247.0, 33.0, s), lerp(247.0, 102.0, s), lerp(247.0, 172.0, s))
    } else {
        (lerp(247.0, 178.0, t), lerp(247.0, 24.0, t), lerp(247.0, 43.0, t))
    }
}

/// Everything drawn in one frame. Only the first two coordinates are used.
#[derive(Debug, Clone, Default)]
pub struct Frame<'a> {
    pub title: Option<String>,
    pub heatmap: Option<(&'a HeatmapGrid, &'a [f64])>,
    pub event: Option<(ArrayView2<'a, f64>, &'a [f64])>,
    pub sample: Option<ArrayView2<'a, f64>>,
    pub forces: Option<&'a Array2<f64>>,
}

struct View {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl View {
    fn x(&self, x: f64) -> f64 {
        (x - self.lo[0]) / (self.hi[0] - self.lo[0]) * SIZE
    }

    fn y(&self, y: f64) -> f64 {
        SIZE - (y - self.lo[1]) / (self.hi[1] - self.lo[1]) * SIZE
    }
}

impl Frame<'_> {
    pub fn render(&self) -> String {
        let view = match self.heatmap {
            Some((grid, _)) => View { lo: grid.lo, hi: grid.hi },
            None => View { lo: [0.0, 0.0], hi: [1.0, 1.0] },
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(out, r##"<rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);
        if let Some((grid, values)) = self.heatmap {
            let scale = values.iter().fold(0.0f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { a });
            let [nx, ny] = grid.resolution;
            let w = SIZE / nx as f64;
            let h = SIZE / ny as f64;
            for j in 0..ny {
                for i in 0..nx {
                    let v = values.get(j * nx + i).copied().unwrap_or(0.0);
                    let (r, g, b) = diverging(if scale > 0.0 { v / scale } else { 0.0 });
                    let _ = writeln!(
                        out,
                        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                        i as f64 * w,
                        SIZE - (j + 1) as f64 * h,
                        w + 0.05,
                        h + 0.05
                    );
                }
            }
        }
        if let Some((points, weights)) = self.event {
            let wmax = weights.iter().cloned().fold(0.0, f64::max);
            for (p, &w) in points.outer_iter().zip(weights) {
                let r = 1.5 + 3.0 * if wmax > 0.0 { (w / wmax).sqrt() } else { 1.0 };
                let _ = writeln!(
                    out,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="#1b9e77"/>"##,
                    view.x(p[0]),
                    view.y(p[1])
                );
            }
        }
        if let Some(points) = self.sample {
            // Longest arrow is 25 px.
            let fmax = self.forces.map_or(0.0, |f| {
                f.rows().into_iter().fold(0.0f64, |a, r| a.max(r.dot(&r).sqrt()))
            });
            let len = if fmax > 0.0 { 25.0 / fmax } else { 0.0 };
            for (k, p) in points.outer_iter().enumerate() {
                let (cx, cy) = (view.x(p[0]), view.y(p[1]));
                let _ = writeln!(out, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="#7570b3"/>"##);
                if let Some(forces) = self.forces {
                    if k < forces.nrows() {
                        let f = forces.row(k);
                        let _ = writeln!(
                            out,
                            r##"<line x1="{cx:.2}" y1="{cy:.2}" x2="{:.2}" y2="{:.2}" stroke="#333333" stroke-width="1"/>"##,
                            cx + len * f[0],
                            cy - len * f[1]
                        );
                    }
                }
            }
        }
        if let Some(title) = &self.title {
            let _ = writeln!(
                out,
                r##"<text x="8" y="18" font-family="monospace" font-size="13" fill="#000000">{}</text>"##,
                escape(title)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(diverging(0.0), (247, 247, 247));
        assert_eq!(diverging(-1.0), (33, 102, 172));
        assert_eq!(diverging(1.0), (178, 24, 43));
        assert_eq!(diverging(f64::NAN), (247, 247, 247));
        assert_eq!(diverging(7.0), diverging(1.0));
    }

    #[test]
    fn frame_counts_elements() {
        let grid = HeatmapGrid {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
            resolution: [3, 2],
        };
        let values = vec![-1.0, 0.0, 1.0, 0.5, -0.5, 0.2];
        let event = array![[0.1, 0.2], [0.5, 0.5]];
        let weights = [0.5, 0.5];
        let sample = array![[0.3, 0.3]];
        let forces = array![[1.0, 0.0]];
        let svg = Frame {
            title: Some("a<b".into()),
            heatmap: Some((&grid, &values)),
            event: Some((event.view(), &weights)),
            sample: Some(sample.view()),
            forces: Some(&forces),
        }
        .render();
        assert_eq!(svg.matches("<rect").count(), 7);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("<line").count(), 1);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
