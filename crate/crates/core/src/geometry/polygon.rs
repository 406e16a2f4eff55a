//! Convex polygons, Sutherland–Hodgman clipping and rotated-box IoU.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::boxes::OrientedBox;
use crate::numerics::Real;

/// Boxes with area at or below this are degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    /// Counter-clockwise, convex, at least three vertices and positive area.
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "polygon needs 3 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if cross([b[0] - a[0], b[1] - a[1]], [c[0] - b[0], c[1] - b[1]]) < -1e-12 {
                return Err(Error::Geometry("polygon is not convex and counter-clockwise".into()));
            }
        }
        if signed_area(&vertices) <= 0.0 {
            return Err(Error::Geometry("polygon has no positive area".into()));
        }
        Ok(ConvexPolygon { vertices })
    }

    pub fn from_box(b: &OrientedBox) -> Result<Self> {
        ConvexPolygon::new(b.corners().to_vec())
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Intersection with another convex polygon, `None` when it has no area.
    pub fn intersect(&self, other: &ConvexPolygon) -> Option<ConvexPolygon> {
        let out = clip(&self.vertices, &other.vertices);
        (out.len() >= 3 && signed_area(&out) > 0.0).then_some(ConvexPolygon { vertices: out })
    }
}

fn cross<S: Real>(a: [S; 2], b: [S; 2]) -> S {
    a[0] * b[1] - a[1] * b[0]
}

/// Shoelace area; positive for counter-clockwise order.
pub fn signed_area<S: Real>(pts: &[[S; 2]]) -> S {
    let n = pts.len();
    let mut acc = S::cst(0.0);
    for i in 0..n {
        let (p, q) = (pts[i], pts[(i + 1) % n]);
        acc = acc + (p[0] * q[1] - q[0] * p[1]);
    }
    acc * S::cst(0.5)
}

/// Clips `subject` against every edge of the convex counter-clockwise
/// `window`. Points on an edge count as inside.
pub fn clip<S: Real>(subject: &[[S; 2]], window: &[[S; 2]]) -> Vec<[S; 2]> {
    let mut out: Vec<[S; 2]> = subject.to_vec();
    let m = window.len();
    for k in 0..m {
        if out.is_empty() {
            break;
        }
        let p = window[k];
        let q = window[(k + 1) % m];
        let d = [q[0] - p[0], q[1] - p[1]];
        let side = |x: [S; 2]| cross(d, [x[0] - p[0], x[1] - p[1]]);
        let input = std::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let s = input[(i + n - 1) % n];
            let e = input[i];
            let (cs, ce) = (side(s), side(e));
            let s_in = cs.value() >= 0.0;
            let e_in = ce.value() >= 0.0;
            if e_in {
                if !s_in {
                    out.push(lerp(s, e, cs / (cs - ce)));
                }
                out.push(e);
            } else if s_in {
                out.push(lerp(s, e, cs / (cs - ce)));
            }
        }
    }
    out
}

fn lerp<S: Real>(a: [S; 2], b: [S; 2], t: S) -> [S; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Corners of `(cx, cy, w, h, theta)` in the order of [`OrientedBox::corners`].
pub fn box_corners<S: Real>(b: [S; 5]) -> [[S; 2]; 4] {
    let (s, c) = (b[4].sin(), b[4].cos());
    let hw = b[2] * S::cst(0.5);
    let hh = b[3] * S::cst(0.5);
    [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| [b[0] + (c * u - s * v), b[1] + (s * u + c * v)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouOutcome {
    pub iou: f64,
    /// One of the boxes had (near-)zero area; `iou` is then 0.
    pub degenerate: bool,
}

/// IoU of two boxes given as `(cx, cy, w, h, theta)`, generic for autodiff.
/// Returns `None` for a degenerate box.
pub fn iou_generic<S: Real>(a: [S; 5], b: [S; 5]) -> Option<S> {
    let area_a = a[2] * a[3];
    let area_b = b[2] * b[3];
    if area_a.value() <= DEGENERATE_AREA || area_b.value() <= DEGENERATE_AREA {
        return None;
    }
    let inter_poly = clip(&box_corners(a), &box_corners(b));
    let zero = S::cst(0.0);
    if inter_poly.len() < 3 {
        return Some(zero);
    }
    let inter = signed_area(&inter_poly);
    // touching edges leave a sliver of rounding noise
    if inter.value() <= DEGENERATE_AREA * area_a.value().min(area_b.value()).max(1.0) {
        return Some(zero);
    }
    let union = area_a + area_b - inter;
    let iou = inter / union;
    Some(if iou.value() > 1.0 { S::cst(1.0) } else { iou })
}

pub fn rotated_iou_checked(a: &OrientedBox, b: &OrientedBox) -> IouOutcome {
    // evaluate in a fixed argument order so the result is exactly symmetric
    let (first, second) = match cmp_boxes(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    match iou_generic(first.to_array(), second.to_array()) {
        Some(iou) => IouOutcome { iou, degenerate: false },
        None => IouOutcome {
            iou: 0.0,
            degenerate: true,
        },
    }
}

pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    rotated_iou_checked(a, b).iou
}

fn cmp_boxes(a: &OrientedBox, b: &OrientedBox) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn identical_and_disjoint() {
        let a = OrientedBox::new(3.0, 4.0, 5.0, 2.0, 0.3).unwrap();
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
        let u = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let v = OrientedBox::new(10.0, 10.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(rotated_iou(&u, &v), 0.0);
    }

    #[test]
    fn octagon_case() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        let b = OrientedBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4).unwrap();
        let inter = 8.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (8.0 - inter);
        assert!((rotated_iou(&a, &b) - expected).abs() < 1e-12);
        assert!((expected - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_give_exact_zero() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        let b = OrientedBox::new(2.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    #[test]
    fn degenerate_box_is_flagged() {
        let a = OrientedBox::new(0.0, 0.0, 1e-9, 1e-9, 0.0).unwrap();
        let b = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        let r = rotated_iou_checked(&a, &b);
        assert!(r.degenerate);
        assert_eq!(r.iou, 0.0);
    }

    #[test]
    fn exact_symmetry() {
        let a = OrientedBox::new(1.3, 2.1, 5.0, 2.0, 0.3).unwrap();
        let b = OrientedBox::new(2.0, 1.7, 4.0, 3.0, -0.9).unwrap();
        assert_eq!(rotated_iou(&a, &b), rotated_iou(&b, &a));
    }

    #[test]
    fn polygon_validation() {
        assert!(ConvexPolygon::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
        // clockwise
        assert!(ConvexPolygon::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
        let tri = ConvexPolygon::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((tri.area() - 0.5).abs() < 1e-15);
        let sq = ConvexPolygon::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let inter = tri.intersect(&sq).unwrap();
        assert!((inter.area() - 0.5).abs() < 1e-15);
    }
}
