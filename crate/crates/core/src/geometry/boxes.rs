use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotated rectangle: center `(cx, cy)`, size `(w, h)` in pixels and the
/// rotation `theta` (radians) of the width axis from the image x-axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Query-space box: center, `z = log2 sqrt(wh)`, `r = log2(h / w)`, angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryBox5 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub theta: f64,
}

/// Folds `theta` into `[-π/2, π/2)` in quarter turns; returns the folded
/// angle and whether an odd number of quarter turns (a w/h swap) was used.
pub fn fold_angle(theta: f64) -> (f64, bool) {
    let mut k = 0i64;
    if theta >= FRAC_PI_2 {
        k = ((theta - FRAC_PI_2) / FRAC_PI_2).floor() as i64 + 1;
    } else if theta < -FRAC_PI_2 {
        k = -(((-FRAC_PI_2 - theta) / FRAC_PI_2).ceil() as i64);
    }
    let mut t = theta - k as f64 * FRAC_PI_2;
    // rounding at the boundaries
    while t >= FRAC_PI_2 {
        t -= FRAC_PI_2;
        k += 1;
    }
    while t < -FRAC_PI_2 {
        t += FRAC_PI_2;
        k -= 1;
    }
    (t, k.rem_euclid(2) == 1)
}

/// Reduces a line direction (defined modulo π) into `[-π/2, π/2)`.
pub fn wrap_half_turn(theta: f64) -> f64 {
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = OrientedBox { cx, cy, w, h, theta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Geometry(format!("non-finite box {:?}", self)));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Geometry(format!(
                "box size must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        OrientedBox {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
            theta: v[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }

    pub fn is_canonical(&self) -> bool {
        (-FRAC_PI_2..FRAC_PI_2).contains(&self.theta) && self.w > 0.0 && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Equivalent box with `theta` in `[-π/2, π/2)`.
    pub fn normalized(self) -> Result<Self> {
        self.validate()?;
        let (theta, swap) = fold_angle(self.theta);
        let (w, h) = if swap { (self.h, self.w) } else { (self.w, self.h) };
        Ok(OrientedBox { theta, w, h, ..self })
    }

    /// Corners in order `(-w/2,-h/2), (w/2,-h/2), (w/2,h/2), (-w/2,h/2)` in the
    /// box frame; counter-clockwise in a y-up frame.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    pub fn to_zr(&self) -> Result<QueryBox5> {
        box_to_zr(self)
    }
}

pub fn normalize_angle(b: OrientedBox) -> Result<OrientedBox> {
    b.normalized()
}

pub fn box_to_zr(b: &OrientedBox) -> Result<QueryBox5> {
    b.validate()?;
    Ok(QueryBox5 {
        x: b.cx,
        y: b.cy,
        z: (b.w * b.h).sqrt().log2(),
        r: (b.h / b.w).log2(),
        theta: b.theta,
    })
}

pub fn zr_to_box(q: &QueryBox5) -> OrientedBox {
    OrientedBox {
        cx: q.x,
        cy: q.y,
        w: (q.z - q.r / 2.0).exp2(),
        h: (q.z + q.r / 2.0).exp2(),
        theta: q.theta,
    }
}

impl QueryBox5 {
    pub fn to_box(&self) -> OrientedBox {
        zr_to_box(self)
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        QueryBox5 {
            x: v[0],
            y: v[1],
            z: v[2],
            r: v[3],
            theta: v[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.x, self.y, self.z, self.r, self.theta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sorted_corners(b: &OrientedBox) -> Vec<[f64; 2]> {
        let mut c = b.corners().to_vec();
        c.sort_by(|p, q| p[0].partial_cmp(&q[0]).unwrap().then(p[1].partial_cmp(&q[1]).unwrap()));
        c
    }

    #[test]
    fn canonical_box_is_unchanged() {
        let b = OrientedBox::new(0.0, 0.0, 4.0, 2.0, 0.0).unwrap();
        assert_eq!(b.normalized().unwrap(), b);
    }

    #[test]
    fn quarter_turn_swaps_sides() {
        let b = OrientedBox::new(0.0, 0.0, 4.0, 2.0, FRAC_PI_2)
            .unwrap()
            .normalized()
            .unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (0.0, 0.0, 2.0, 4.0));
        assert!(b.theta.abs() < 1e-15);
    }

    #[test]
    fn non_positive_size_is_rejected() {
        assert!(OrientedBox::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(box_to_zr(&OrientedBox {
            cx: 0.0,
            cy: 0.0,
            w: 1.0,
            h: -1.0,
            theta: 0.0
        })
        .is_err());
    }

    #[test]
    fn zr_of_square_and_tall_box() {
        let q = box_to_zr(&OrientedBox::new(0.0, 0.0, 4.0, 4.0, 0.0).unwrap()).unwrap();
        assert_eq!((q.z, q.r), (2.0, 0.0));
        let q = box_to_zr(&OrientedBox::new(0.0, 0.0, 2.0, 8.0, 0.0).unwrap()).unwrap();
        assert_eq!((q.z, q.r), (2.0, 2.0));
    }

    #[test]
    fn fold_angle_edges() {
        assert_eq!(fold_angle(-FRAC_PI_2), (-FRAC_PI_2, false));
        let (t, s) = fold_angle(PI);
        assert!(t.abs() < 1e-15 && !s);
        let (t, s) = fold_angle(-FRAC_PI_2 - 0.1);
        assert!((t + 0.1).abs() < 1e-12 && s);
        // 10 - 6·π/2 ≈ 0.575, six quarter turns
        let (t, s) = fold_angle(10.0);
        assert!((t - (10.0 - 3.0 * PI)).abs() < 1e-12 && !s);
    }

    proptest! {
        #[test]
        fn normalization_preserves_vertices(
            cx in -100.0..100.0f64, cy in -100.0..100.0f64,
            w in 0.5..50.0f64, h in 0.5..50.0f64, theta in -10.0..10.0f64,
        ) {
            let b = OrientedBox::new(cx, cy, w, h, theta).unwrap();
            let n = b.normalized().unwrap();
            prop_assert!(n.is_canonical());
            for (p, q) in sorted_corners(&b).iter().zip(sorted_corners(&n)) {
                prop_assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn zr_round_trip(w in 0.01..500.0f64, h in 0.01..500.0f64) {
            let b = OrientedBox::new(3.0, 4.0, w, h, 0.3).unwrap();
            let back = zr_to_box(&box_to_zr(&b).unwrap());
            prop_assert!((back.w - w).abs() <= 1e-12 * w.max(1.0));
            prop_assert!((back.h - h).abs() <= 1e-12 * h.max(1.0));
        }
    }
}
