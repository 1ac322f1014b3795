//! Self-contained SVG heatmap of a probability grid with a point overlay.

use std::fmt::Write;

/// Blue for 0, white for 0.5, red for 1.
fn colour(p: f64) -> String {
    let p = p.clamp(0.0, 1.0);
    let (r, g, b) = if p < 0.5 {
        let t = p / 0.5;
        (t, t, 1.0)
    } else {
        let t = (1.0 - p) / 0.5;
        (1.0, t, t)
    };
    let c = |v: f64| (v * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(r), c(g), c(b))
}

/// `values` is row-major with `y` as the outer index, matching the grid CSV.
/// `points` are `(x, y, class)` drawn as small circles.
pub fn heatmap(
    nx: usize,
    ny: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    values: &[f64],
    points: &[(f64, f64, usize)],
) -> String {
    const CELL: f64 = 4.0;
    let (w, h) = (nx as f64 * CELL, ny as f64 * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for iy in 0..ny {
        for ix in 0..nx {
            let v = values[iy * nx + ix];
            // SVG y grows downwards.
            let y = (ny - 1 - iy) as f64 * CELL;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                ix as f64 * CELL,
                colour(v)
            );
        }
    }
    let sx = |x: f64| (x - x_range.0) / (x_range.1 - x_range.0) * w;
    let sy = |y: f64| h - (y - y_range.0) / (y_range.1 - y_range.0) * h;
    for &(x, y, c) in points {
        let fill = if c == 0 { "#1f3b99" } else { "#a31515" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}" stroke="black" stroke-width="0.5"/>"#,
            sx(x),
            sy(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_cell_and_one_circle_per_point() {
        let svg = heatmap(3, 2, (0.0, 1.0), (0.0, 1.0), &[0.0, 0.5, 1.0, 0.2, 0.4, 0.9], &[(0.5, 0.5, 1)]);
        assert_eq!(svg.matches("<rect").count(), 6);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn colour_endpoints() {
        assert_eq!(colour(0.0), "#0000ff");
        assert_eq!(colour(0.5), "#ffffff");
        assert_eq!(colour(1.0), "#ff0000");
    }
}
