use crate::error::{Error, Result};

/// Rectangle found by [`min_area_rect`]: `angle` is the direction of the `u`
/// axis; `extent_u`/`extent_v` are the side lengths along `u` and its normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedRect {
    pub center: [f64; 2],
    pub angle: f64,
    pub extent_u: f64,
    pub extent_v: f64,
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle by rotating calipers over hull edges.
pub fn min_area_rect(points: &[[f64; 2]]) -> Result<RotatedRect> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::Geometry("points do not span an area".into()));
    }
    let mut best: Option<(f64, RotatedRect)> = None;
    for i in 0..hull.len() {
        let (p, q) = (hull[i], hull[(i + 1) % hull.len()]);
        let angle = (q[1] - p[1]).atan2(q[0] - p[0]);
        let (s, c) = angle.sin_cos();
        let (mut umin, mut umax, mut vmin, mut vmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for h in &hull {
            let u = h[0] * c + h[1] * s;
            let v = -h[0] * s + h[1] * c;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let (uc, vc) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
            best = Some((
                area,
                RotatedRect {
                    center: [uc * c - vc * s, uc * s + vc * c],
                    angle,
                    extent_u: umax - umin,
                    extent_v: vmax - vmin,
                },
            ));
        }
    }
    Ok(best.expect("hull has edges").1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_drops_interior_points() {
        let h = convex_hull(&[[0.0, 0.0], [2.0, 0.0], [1.0, 0.5], [2.0, 2.0], [0.0, 2.0]]);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn rotated_rectangle_is_recovered() {
        let (s, c) = (0.4f64).sin_cos();
        let pts: Vec<[f64; 2]> = [(-3.0, -1.0), (3.0, -1.0), (3.0, 1.0), (-3.0, 1.0)]
            .iter()
            .map(|&(u, v)| [5.0 + c * u - s * v, 7.0 + s * u + c * v])
            .collect();
        let r = min_area_rect(&pts).unwrap();
        assert!((r.extent_u * r.extent_v - 12.0).abs() < 1e-9);
        assert!((r.center[0] - 5.0).abs() < 1e-9 && (r.center[1] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_fail() {
        assert!(min_area_rect(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    }
}
