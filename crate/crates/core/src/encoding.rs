//! Sinusoidal positional encoding and its Gaussian generalization.
//!
//! Both encodings share one layout: all sine entries, then all cosine
//! entries; inside each block coordinate-major, then frequency-major:
//!
//! ```text
//! [sin(s_0 x) .. sin(s_{K-1} x), sin(s_0 y) .. | cos(s_0 x) .. cos(s_{K-1} y)]
//! ```
//!
//! with `s_k = T^(-2k/D')` and `D' = 2K`. The Gaussian encoding replaces each
//! `sin(s x)` by its expectation under the box Gaussian,
//! `sin(s μ) exp(-s² σ² / 2)`, and likewise for cosine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::gaussian::{box_covariance, Gaussian2D};
use crate::geometry::ops::zr_params;
use crate::geometry::OrientedBox;
use crate::numerics::{Dual, Real, SparseJacobian, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PEConfig {
    /// Temperature `T`.
    pub temperature: f64,
    /// Frequency count `K`; the per-coordinate width is `D' = 2K`.
    pub freqs: usize,
}

impl Default for PEConfig {
    fn default() -> Self {
        PEConfig {
            temperature: 10000.0,
            freqs: 64,
        }
    }
}

impl PEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 1.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "PE temperature must exceed 1, got {}",
                self.temperature
            )));
        }
        if self.freqs == 0 {
            return Err(Error::InvalidArgument("PE needs at least one frequency".into()));
        }
        Ok(())
    }

    /// `D' = 2K`.
    pub fn coord_width(&self) -> usize {
        2 * self.freqs
    }

    /// Embedding length for `coords` encoded coordinates.
    pub fn embedding_len(&self, coords: usize) -> usize {
        2 * self.freqs * coords
    }

    /// `T^(-2k/D')`.
    pub fn scale(&self, k: usize) -> f64 {
        self.temperature.powf(-(2.0 * k as f64) / self.coord_width() as f64)
    }
}

pub fn sinusoidal_pe(x: &[f64], cfg: &PEConfig) -> Vec<f64> {
    let k = cfg.freqs;
    let mut out = vec![0.0; cfg.embedding_len(x.len())];
    let half = k * x.len();
    for (c, &xc) in x.iter().enumerate() {
        for f in 0..k {
            let arg = xc * cfg.scale(f);
            out[c * k + f] = arg.sin();
            out[half + c * k + f] = arg.cos();
        }
    }
    out
}

/// Means and marginal variances of the Gaussian after scaling by each
/// frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedGaussian {
    pub means: Vec<[f64; 2]>,
    pub variances: Vec<[f64; 2]>,
}

pub fn lift_gaussian(g: &Gaussian2D, cfg: &PEConfig) -> LiftedGaussian {
    let (means, variances) = (0..cfg.freqs)
        .map(|k| {
            let s = cfg.scale(k);
            (
                [s * g.mu[0], s * g.mu[1]],
                [s * s * g.sigma[0][0], s * s * g.sigma[1][1]],
            )
        })
        .unzip();
    LiftedGaussian { means, variances }
}

/// `(E[sin x], E[cos x])` for `x ~ N(mu, var)`.
pub fn expected_sincos(mu: f64, var: f64) -> Result<(f64, f64)> {
    if var.is_nan() || var < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variance must be non-negative, got {}",
            var
        )));
    }
    let att = (-0.5 * var).exp();
    Ok((mu.sin() * att, mu.cos() * att))
}

/// Gaussian encoding of a box given as `(cx, cy, w, h, θ)` scalars.
pub fn gaussian_pe_generic<S: Real>(b: [S; 5], cfg: &PEConfig) -> Vec<S> {
    let k = cfg.freqs;
    let (vx, _, vy) = box_covariance(b[2], b[3], b[4]);
    let mu = [b[0], b[1]];
    let var = [vx, vy];
    let half = 2 * k;
    let mut out = vec![S::cst(0.0); 4 * k];
    for c in 0..2 {
        for f in 0..k {
            let s = cfg.scale(f);
            let arg = mu[c].scale(s);
            let att = (var[c].scale(-0.5 * s * s)).exp();
            out[c * k + f] = arg.sin() * att;
            out[half + c * k + f] = arg.cos() * att;
        }
    }
    out
}

pub fn gaussian_pe(b: &OrientedBox, cfg: &PEConfig) -> Vec<f64> {
    gaussian_pe_generic(b.to_array(), cfg)
}

/// Gaussian encoding of `[N, 5]` query rows `(x, y, z, r, θ)` as an `[N, 4K]`
/// tape node.
pub fn gaussian_pe_rows(tape: &mut Tape, queries: Var, cfg: &PEConfig) -> Result<Var> {
    let n = match tape.shape(queries) {
        [n, 5] => *n,
        s => {
            return Err(Error::shape(
                "gaussian_pe_rows",
                format!("expected [N, 5], got {:?}", s),
            ))
        }
    };
    let width = cfg.embedding_len(2);
    let rows = tape.value(queries).data().to_vec();
    let want_grad = tape.requires_grad(queries);
    let mut out = Vec::with_capacity(n * width);
    let mut jac: SparseJacobian = Vec::new();
    for i in 0..n {
        let row: [f64; 5] = rows[i * 5..i * 5 + 5].try_into().expect("5");
        if want_grad {
            let q: [Dual<5>; 5] = std::array::from_fn(|k| Dual::var(row[k], k));
            for (j, e) in gaussian_pe_generic(zr_params(q), cfg).into_iter().enumerate() {
                out.push(e.v);
                for (k, &d) in e.d.iter().enumerate() {
                    if d != 0.0 {
                        jac.push(((i * width + j) as u32, (i * 5 + k) as u32, d));
                    }
                }
            }
        } else {
            out.extend(gaussian_pe_generic(zr_params(row), cfg));
        }
    }
    tape.custom("gaussian_pe_rows", queries, Tensor::new(&[n, width], out)?, jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_to_gaussian;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cfg() -> PEConfig {
        PEConfig {
            temperature: 10000.0,
            freqs: 8,
        }
    }

    #[test]
    fn zero_input_gives_zero_sines_unit_cosines() {
        let e = sinusoidal_pe(&[0.0, 0.0], &cfg());
        assert_eq!(e.len(), 32);
        assert!(e[..16].iter().all(|&v| v == 0.0));
        assert!(e[16..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_period_per_frequency() {
        let c = cfg();
        for k in 0..c.freqs {
            let x = PI / c.scale(k);
            let e = sinusoidal_pe(&[x], &c);
            assert!(e[k].abs() < 1e-12);
            assert!((e[c.freqs + k] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_scales() {
        let g = Gaussian2D::new([3.0, -2.0], [[4.0, 1.0], [1.0, 2.0]]).unwrap();
        let c = cfg();
        let l = lift_gaussian(&g, &c);
        assert_eq!(l.means[0], [3.0, -2.0]);
        assert_eq!(l.variances[0], [4.0, 2.0]);
        for k in 0..c.freqs {
            let s = l.means[k][0] / 3.0;
            assert!((l.variances[k][0] - s * s * 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn expected_sincos_cases() {
        assert_eq!(expected_sincos(0.0, 3.0).unwrap().0, 0.0);
        assert_eq!(expected_sincos(0.7, 0.0).unwrap(), (0.7f64.sin(), 0.7f64.cos()));
        assert!((expected_sincos(FRAC_PI_2, 2.0).unwrap().0 - (-1f64).exp()).abs() < 1e-15);
        assert!(expected_sincos(0.0, -1e-3).is_err());
    }

    #[test]
    fn tiny_box_reduces_to_sinusoid() {
        let c = cfg();
        let b = OrientedBox::new(13.0, 47.0, 1e-9, 1e-9, 0.3).unwrap();
        let g = gaussian_pe(&b, &c);
        let s = sinusoidal_pe(&[13.0, 47.0], &c);
        let err = g.iter().zip(&s).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-9);
    }

    #[test]
    fn huge_box_vanishes() {
        let b = OrientedBox::new(13.0, 47.0, 1e9, 1e9, 0.3).unwrap();
        assert!(gaussian_pe(&b, &cfg()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn agrees_with_lifted_expectation() {
        let c = cfg();
        let b = OrientedBox::new(20.0, 30.0, 6.0, 2.0, 0.5).unwrap();
        let l = lift_gaussian(&box_to_gaussian(&b), &c);
        let e = gaussian_pe(&b, &c);
        for k in 0..c.freqs {
            let (sx, cx) = expected_sincos(l.means[k][0], l.variances[k][0]).unwrap();
            assert!((e[k] - sx).abs() < 1e-12 && (e[2 * c.freqs + k] - cx).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn half_turn_and_quarter_swap_invariance(
            cx in 0.0..200.0f64, cy in 0.0..200.0f64, w in 1.0..40.0f64, h in 1.0..40.0f64, t in -1.5..1.5f64,
        ) {
            let c = cfg();
            let b = OrientedBox::new(cx, cy, w, h, t).unwrap();
            let base = gaussian_pe(&b, &c);
            let turned = gaussian_pe(&OrientedBox { theta: t + PI, ..b }, &c);
            let swapped = gaussian_pe(&OrientedBox { w: h, h: w, theta: t + FRAC_PI_2, ..b }, &c);
            for i in 0..base.len() {
                prop_assert!((base[i] - turned[i]).abs() <= 1e-9);
                prop_assert!((base[i] - swapped[i]).abs() <= 1e-9);
                prop_assert!(base[i].abs() <= 1.0);
            }
        }

        #[test]
        fn wider_box_attenuates_x_entries(w in 1.0..30.0f64, dw in 0.1..10.0f64) {
            let c = cfg();
            let small = gaussian_pe(&OrientedBox::new(17.0, 9.0, w, 4.0, 0.0).unwrap(), &c);
            let large = gaussian_pe(&OrientedBox::new(17.0, 9.0, w + dw, 4.0, 0.0).unwrap(), &c);
            for k in 0..c.freqs {
                for idx in [k, 2 * c.freqs + k] {
                    if small[idx].abs() > 1e-300 {
                        prop_assert!(large[idx].abs() < small[idx].abs());
                    }
                }
            }
        }
    }
}
