//! Box-to-Gaussian conversion and the 2-Wasserstein distance between 2D
//! Gaussians.

use crate::error::{Error, Result};
use crate::geometry::boxes::OrientedBox;
use crate::numerics::Real;

pub const SCORE_TAU: f64 = 1.0;
pub const SCORE_EPS: f64 = 1e-7;
/// Negative radicands down to this magnitude are rounding noise.
pub const RADICAND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
}

impl Gaussian2D {
    pub fn new(mu: [f64; 2], sigma: [[f64; 2]; 2]) -> Result<Self> {
        let g = Gaussian2D { mu, sigma };
        g.validate()?;
        Ok(g)
    }

    /// Symmetric with positive eigenvalues.
    pub fn validate(&self) -> Result<()> {
        let [[a, b], [b2, c]] = self.sigma;
        if !(self.mu.iter().all(|v| v.is_finite()) && [a, b, b2, c].iter().all(|v| v.is_finite())) {
            return Err(Error::Geometry("non-finite Gaussian".into()));
        }
        if b != b2 {
            return Err(Error::Geometry(format!("covariance not symmetric: {} vs {}", b, b2)));
        }
        if !(a > 0.0 && a * c - b * b > 0.0) {
            return Err(Error::Geometry(format!(
                "covariance not positive definite: {:?}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        self.sigma[0][0] + self.sigma[1][1]
    }

    pub fn det(&self) -> f64 {
        self.sigma[0][0] * self.sigma[1][1] - self.sigma[0][1] * self.sigma[1][0]
    }
}

/// Entries `(σxx, σxy, σyy)` of `R diag(w²/4, h²/4) Rᵀ`.
pub fn box_covariance<S: Real>(w: S, h: S, theta: S) -> (S, S, S) {
    let (c, s) = (theta.cos(), theta.sin());
    let a = w * w * S::cst(0.25);
    let b = h * h * S::cst(0.25);
    (a * c * c + b * s * s, (a - b) * c * s, a * s * s + b * c * c)
}

pub fn box_to_gaussian(b: &OrientedBox) -> Gaussian2D {
    let (xx, xy, yy) = box_covariance(b.w, b.h, b.theta);
    Gaussian2D {
        mu: [b.cx, b.cy],
        sigma: [[xx, xy], [xy, yy]],
    }
}

/// Squared distance from the 2x2 closed form
/// `‖Δμ‖² + Tr Σ₁ + Tr Σ₂ − 2 sqrt(Tr(Σ₁Σ₂) + 2 sqrt(det Σ₁ det Σ₂))`.
///
/// Every sum is arranged so that swapping the two arguments gives the same
/// bits.
pub fn wasserstein_sq<S: Real>(m1: [S; 2], s1: (S, S, S), m2: [S; 2], s2: (S, S, S)) -> S {
    let same = |a: S, b: S| a.value() == b.value();
    if same(m1[0], m2[0]) && same(m1[1], m2[1]) && same(s1.0, s2.0) && same(s1.1, s2.1) && same(s1.2, s2.2) {
        // identical inputs; the closed form would leave cancellation noise
        return S::cst(0.0);
    }
    let dx = m1[0] - m2[0];
    let dy = m1[1] - m2[1];
    let center = dx * dx + dy * dy;
    let traces = (s1.0 + s1.2) + (s2.0 + s2.2);
    let det1 = s1.0 * s1.2 - s1.1 * s1.1;
    let det2 = s2.0 * s2.2 - s2.1 * s2.1;
    let cross = s1.0 * s2.0 + s1.1 * s2.1 * S::cst(2.0) + s1.2 * s2.2;
    let inner = cross + (det1 * det2).sqrt() * S::cst(2.0);
    center + (traces - inner.sqrt() * S::cst(2.0))
}

/// Clamps rounding noise and takes the square root.
pub fn distance_from_sq<S: Real>(d2: S) -> Result<S> {
    let v = d2.value();
    if v < -RADICAND_TOL {
        return Err(Error::Geometry(format!("negative squared distance {}", v)));
    }
    if v <= 0.0 {
        return Ok(S::cst(0.0));
    }
    Ok(d2.sqrt())
}

pub fn wasserstein_distance(a: &Gaussian2D, b: &Gaussian2D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let pack = |g: &Gaussian2D| (g.sigma[0][0], g.sigma[0][1], g.sigma[1][1]);
    distance_from_sq(wasserstein_sq(a.mu, pack(a), b.mu, pack(b)))
}

/// `log(1 / (τ + d) + ε)` with τ = 1, ε = 1e-7.
pub fn score_from_distance<S: Real>(d: S) -> S {
    (S::cst(1.0) / (S::cst(SCORE_TAU) + d) + S::cst(SCORE_EPS)).ln()
}

pub fn wasserstein_score(a: &Gaussian2D, b: &Gaussian2D) -> Result<f64> {
    Ok(score_from_distance(wasserstein_distance(a, b)?))
}

/// Score between two boxes given as `(cx, cy, w, h, theta)` scalars.
pub fn box_score<S: Real>(a: [S; 5], b: [S; 5]) -> Result<S> {
    let sa = box_covariance(a[2], a[3], a[4]);
    let sb = box_covariance(b[2], b[3], b[4]);
    let d = distance_from_sq(wasserstein_sq([a[0], a[1]], sa, [b[0], b[1]], sb))?;
    Ok(score_from_distance(d))
}
