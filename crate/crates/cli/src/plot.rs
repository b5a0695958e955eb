//! Minimal SVG scatter plots for 1-3 dimensional point clouds.

use anyhow::bail;
use latmap_core::Tensor;

const SIZE: f64 = 480.0;
const PAD: f64 = 16.0;

/// Coordinates shown for a point: (x0, x1) in 2-D, (x0, x2) in 3-D, (x0, 0) in 1-D.
fn project(row: &[f32]) -> (f64, f64) {
    match row.len() {
        1 => (row[0] as f64, 0.0),
        2 => (row[0] as f64, row[1] as f64),
        _ => (row[0] as f64, row[2] as f64),
    }
}

/// `reference` in gray underneath `points` in color.
pub fn scatter(reference: &Tensor<f32>, points: &Tensor<f32>) -> anyhow::Result<String> {
    let d = points.cols().max(reference.cols());
    if d == 0 || d > 3 {
        bail!("scatter plots need 1 to 3 columns, got {d}");
    }
    let all: Vec<(f64, f64)> = (0..reference.rows())
        .map(|r| project(reference.row(r)))
        .chain((0..points.rows()).map(|r| project(points.row(r))))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for &(x, y) in &all {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    if all.is_empty() {
        lo = (-1.0, -1.0);
        hi = (1.0, 1.0);
    }
    // one scale for both axes so shapes are not distorted
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-12);
    let k = (SIZE - 2.0 * PAD) / span;
    let to_px = |(x, y): (f64, f64)| (PAD + (x - lo.0) * k, SIZE - PAD - (y - lo.1) * k);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (cloud, fill) in [(reference, "#b0b0b0"), (points, "#d9480f")] {
        s.push_str(&format!("<g fill=\"{fill}\" fill-opacity=\"0.7\">\n"));
        for r in 0..cloud.rows() {
            let p = project(cloud.row(r));
            if !(p.0.is_finite() && p.1.is_finite()) {
                continue;
            }
            let (x, y) = to_px(p);
            s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\"/>\n"));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
