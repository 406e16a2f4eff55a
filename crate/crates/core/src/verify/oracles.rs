//! Slow, independent reference computations.

use nalgebra::{Matrix2, SymmetricEigen};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attention::OrientedCrossAttention;
use crate::encoding::PEConfig;
use crate::error::{Error, Result};
use crate::geometry::{Gaussian2D, OrientedBox};
use crate::nn::Linear;
use crate::numerics::{ParamStore, Tensor};

/// Standard normal pairs from a jittered `side × side` grid of equiprobable
/// cells, one draw per cell.
pub fn stratified_normal_pairs(side: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |i: usize, rng: &mut dyn rand::RngCore| {
        let u = (i as f64 + rng.random::<f64>()) / side as f64;
        normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16))
    };
    let mut z1 = Vec::with_capacity(side * side);
    let mut z2 = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            z1.push(draw(i, rng));
            z2.push(draw(j, rng));
        }
    }
    (z1, z2)
}

/// Sample mean of the sinusoidal encoding over points
/// `c + R(θ) (w/2 z1, h/2 z2)`, in the layout of `gaussian_pe`.
pub fn monte_carlo_pe(b: &OrientedBox, cfg: &PEConfig, z1: &[f64], z2: &[f64]) -> Vec<f64> {
    let k = cfg.freqs;
    let scales: Vec<f64> = (0..k).map(|f| cfg.scale(f)).collect();
    let (s, c) = b.theta.sin_cos();
    let (hw, hh) = (0.5 * b.w, 0.5 * b.h);
    let mut acc = vec![0.0; 4 * k];
    for (&u, &v) in z1.iter().zip(z2) {
        let (a, bb) = (hw * u, hh * v);
        let p = [b.cx + c * a - s * bb, b.cy + s * a + c * bb];
        for (ci, &x) in p.iter().enumerate() {
            for (f, &sc) in scales.iter().enumerate() {
                let (sn, cs) = (sc * x).sin_cos();
                acc[ci * k + f] += sn;
                acc[2 * k + ci * k + f] += cs;
            }
        }
    }
    let n = z1.len().max(1) as f64;
    acc.iter().map(|v| v / n).collect()
}

fn to_matrix(g: &Gaussian2D) -> Matrix2<f64> {
    Matrix2::new(g.sigma[0][0], g.sigma[0][1], g.sigma[1][0], g.sigma[1][1])
}

fn sqrt_psd(m: Matrix2<f64>) -> Matrix2<f64> {
    let e = SymmetricEigen::new(m);
    let d = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    e.eigenvectors * Matrix2::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// 2-Wasserstein distance via symmetric eigendecompositions:
/// `W² = ‖Δμ‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn wasserstein_eigen(a: &Gaussian2D, b: &Gaussian2D) -> f64 {
    let (s1, s2) = (to_matrix(a), to_matrix(b));
    let r = sqrt_psd(s1);
    let cross = sqrt_psd(r * s2 * r);
    let dx = a.mu[0] - b.mu[0];
    let dy = a.mu[1] - b.mu[1];
    let w2 = dx * dx + dy * dy + (s1 + s2 - cross * 2.0).trace();
    w2.max(0.0).sqrt()
}

/// Horizontal extent of a box on the line `y`, if it crosses it.
fn row_extent(b: &OrientedBox, y: f64) -> Option<(f64, f64)> {
    let corners = b.corners();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..4 {
        let (p, q) = (corners[i], corners[(i + 1) % 4]);
        let (ymin, ymax) = (p[1].min(q[1]), p[1].max(q[1]));
        if y < ymin || y > ymax || p[1] == q[1] {
            continue;
        }
        let x = p[0] + (y - p[1]) / (q[1] - p[1]) * (q[0] - p[0]);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo <= hi).then_some((lo, hi))
}

/// IoU from counting the centers of a `grid × grid` lattice laid over the
/// joint bounding rectangle.
pub fn raster_iou(a: &OrientedBox, b: &OrientedBox, grid: usize) -> f64 {
    let pts: Vec<[f64; 2]> = a.corners().into_iter().chain(b.corners()).collect();
    let x0 = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let x1 = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let y0 = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let (dx, dy) = ((x1 - x0) / grid as f64, (y1 - y0) / grid as f64);
    // columns j with x0 + (j + 0.5) dx inside [lo, hi]
    let columns = |lo: f64, hi: f64| -> (i64, i64) {
        let first = ((lo - x0) / dx - 0.5).ceil().max(0.0) as i64;
        let last = (((hi - x0) / dx - 0.5).floor() as i64).min(grid as i64 - 1);
        (first, last)
    };
    let count = |r: (i64, i64)| (r.1 - r.0 + 1).max(0) as u64;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for i in 0..grid {
        let y = y0 + (i as f64 + 0.5) * dy;
        let ra = row_extent(a, y).map(|(l, h)| columns(l, h));
        let rb = row_extent(b, y).map(|(l, h)| columns(l, h));
        if let Some(r) = ra {
            na += count(r);
        }
        if let Some(r) = rb {
            nb += count(r);
        }
        if let (Some(p), Some(q)) = (ra, rb) {
            both += count((p.0.max(q.0), p.1.min(q.1)));
        }
    }
    let union = na + nb - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Minimum total cost over every injective assignment of the smaller side,
/// summed in row order.
pub fn brute_force_assignment(cost: &Tensor) -> Result<f64> {
    let (n, m) = match cost.shape() {
        [n, m] => (*n, *m),
        s => return Err(Error::shape("brute_force_assignment", format!("{:?}", s))),
    };
    let at = |i: usize, j: usize| cost.data()[i * m + j];
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let mut used = vec![false; cols];
    let mut pick = vec![0usize; rows];
    let mut best = f64::INFINITY;
    fn walk(
        r: usize,
        rows: usize,
        cols: usize,
        used: &mut [bool],
        pick: &mut [usize],
        eval: &dyn Fn(&[usize]) -> f64,
        best: &mut f64,
    ) {
        if r == rows {
            *best = best.min(eval(pick));
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                pick[r] = c;
                walk(r + 1, rows, cols, used, pick, eval, best);
                used[c] = false;
            }
        }
    }
    let eval = |pick: &[usize]| -> f64 {
        if transposed {
            // pairs (pick[c], c) sorted by the original row index
            let mut pairs: Vec<(usize, usize)> = pick.iter().enumerate().map(|(c, &r)| (r, c)).collect();
            pairs.sort_unstable();
            pairs.iter().map(|&(r, c)| at(r, c)).sum()
        } else {
            pick.iter().enumerate().map(|(r, &c)| at(r, c)).sum()
        }
    };
    if rows == 0 {
        return Ok(0.0);
    }
    walk(0, rows, cols, &mut used, &mut pick, &eval, &mut best);
    Ok(best)
}

fn linear_row(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.weight).data();
    let b = store.get(lin.bias).data();
    (0..lin.outputs)
        .map(|j| {
            let mut acc = 0.0;
            for (q, &xq) in x.iter().enumerate() {
                acc += xq * w[q * lin.outputs + j];
            }
            acc + b[j]
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gate_row(store: &ParamStore, hidden: &Linear, output: &Linear, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear_row(store, hidden, x).into_iter().map(|v| v.max(0.0)).collect();
    linear_row(store, output, &h).into_iter().map(sigmoid).collect()
}

/// `[C]` bilinear sample of channel-last `[H, W, C]` at `(x, y)` with zero
/// padding, for channels `lo..hi`.
fn bilinear(fmap: &Tensor, x: f64, y: f64, lo: usize, hi: usize) -> Vec<f64> {
    let (h, w, c) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (j0, i0) = (x0 as isize, y0 as isize);
    let mut out = vec![0.0; hi - lo];
    let taps = [
        (i0, j0, (1.0 - fx) * (1.0 - fy)),
        (i0, j0 + 1, fx * (1.0 - fy)),
        (i0 + 1, j0, (1.0 - fx) * fy),
        (i0 + 1, j0 + 1, fx * fy),
    ];
    for (i, j, wt) in taps {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            continue;
        }
        let base = (i as usize * w + j as usize) * c;
        for (o, ch) in out.iter_mut().zip(lo..hi) {
            *o += wt * fmap.data()[base + ch];
        }
    }
    out
}

/// Loop-by-loop oriented cross-attention for `[N, D]` content queries, `[N, 5]`
/// positional queries and `[H_l, W_l, D]` levels, following the same
/// floating-point evaluation order as the tape version.
pub fn naive_cross_attention(
    ca: &OrientedCrossAttention,
    store: &ParamStore,
    qc: &Tensor,
    qp: &Tensor,
    levels: &[Tensor],
) -> Result<Tensor> {
    let (n, d) = (qc.shape()[0], ca.width);
    let (g, o) = (ca.cfg.heads, ca.cfg.points);
    let cg = d / g;
    let strides = &ca.cfg.strides;
    if levels.len() != strides.len() || qp.shape() != [n, 5] {
        return Err(Error::shape("naive_cross_attention", "inputs do not match the module"));
    }
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let c = &qc.data()[i * d..(i + 1) * d];
        let [x, y, z, r, t] = <[f64; 5]>::try_from(&qp.data()[i * 5..i * 5 + 5]).expect("5 columns");
        let off = linear_row(store, &ca.offsets, c);
        let sx = ((z - r) * ln2).exp();
        let sy = ((z + r) * ln2).exp();
        let (cos, sin) = (t.cos(), t.sin());
        let chan = gate_row(store, &ca.channel.hidden, &ca.channel.output, c);
        let spat = gate_row(store, &ca.spatial.hidden, &ca.spatial.output, c);
        let mut flat = vec![0.0; g * o * cg];
        for h in 0..g {
            for j in 0..o {
                let k = h * o + j;
                let px = x + off[k * 3] * sx;
                let py = y + off[k * 3 + 1] * sy;
                let pz = z + off[k * 3 + 2];
                let (ox, oy) = (px - x, py - y);
                let ax = x + (cos * ox - sin * oy);
                let ay = y + (sin * ox + cos * oy);
                let mut fused: Option<Vec<f64>> = None;
                for (lv, &s) in levels.iter().zip(strides) {
                    let inv = 1.0 / s as f64;
                    let v = bilinear(lv, ax * inv + -0.5, ay * inv + -0.5, h * cg, (h + 1) * cg);
                    let dz = pz + -(s as f64).log2();
                    let wt = sigmoid((dz * dz) * (-1.0 / ca.cfg.eta));
                    let term: Vec<f64> = v.iter().map(|&e| wt * e).collect();
                    fused = Some(match fused {
                        Some(acc) => acc.iter().zip(&term).map(|(a, b)| a + b).collect(),
                        None => term,
                    });
                }
                let fused = fused.expect("at least one level");
                for ch in 0..cg {
                    let gated = chan[h * cg + ch] * fused[ch];
                    flat[k * cg + ch] = spat[k] * gated;
                }
            }
        }
        out.extend(linear_row(store, &ca.out, &flat));
    }
    Tensor::new(&[n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::gaussian_pe;
    use crate::geometry::{box_to_gaussian, rotated_iou, wasserstein_distance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stratified_normals_have_unit_moments() {
        let (z1, z2) = stratified_normal_pairs(100, &mut ChaCha8Rng::seed_from_u64(1));
        for z in [z1, z2] {
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-3);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn monte_carlo_tracks_closed_form_loosely() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (z1, z2) = stratified_normal_pairs(150, &mut rng);
        let cfg = PEConfig {
            temperature: 100.0,
            freqs: 4,
        };
        let b = OrientedBox::new(3.0, -1.0, 2.0, 1.0, 0.4).unwrap();
        let mc = monte_carlo_pe(&b, &cfg, &z1, &z2);
        let cf = gaussian_pe(&b, &cfg);
        for (a, e) in mc.iter().zip(&cf) {
            assert!((a - e).abs() < 2e-2);
        }
    }

    #[test]
    fn eigen_wasserstein_known_cases() {
        let a = Gaussian2D::new([0.0, 0.0], [[4.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Gaussian2D::new([3.0, 4.0], [[4.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((wasserstein_eigen(&a, &b) - 5.0).abs() < 1e-12);
        let c = Gaussian2D::new([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]).unwrap();
        // diagonal: sqrt((2-1)^2 + (1-1)^2)
        assert!((wasserstein_eigen(&a, &c) - 1.0).abs() < 1e-12);
        let r = box_to_gaussian(&OrientedBox::new(1.0, 2.0, 5.0, 2.0, 0.7).unwrap());
        assert!((wasserstein_eigen(&a, &r) - wasserstein_distance(&a, &r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn raster_iou_of_axis_aligned_boxes() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        let b = OrientedBox::new(1.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        assert!((raster_iou(&a, &b, 512) - 1.0 / 3.0).abs() < 5e-3);
        assert!((raster_iou(&a, &a, 64) - 1.0).abs() < 1e-12);
        let far = OrientedBox::new(10.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        assert_eq!(raster_iou(&a, &far, 256), 0.0);
        let tilted = OrientedBox::new(0.3, 0.1, 3.0, 1.0, 0.6).unwrap();
        assert!((raster_iou(&a, &tilted, 2048) - rotated_iou(&a, &tilted)).abs() < 5e-3);
    }

    #[test]
    fn brute_force_small_cases() {
        let c = Tensor::new(&[2, 3], vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0]).unwrap();
        assert_eq!(brute_force_assignment(&c).unwrap(), 3.0);
        let t = Tensor::new(&[3, 2], vec![4.0, 2.0, 1.0, 0.0, 3.0, 5.0]).unwrap();
        assert_eq!(brute_force_assignment(&t).unwrap(), 3.0);
        assert_eq!(brute_force_assignment(&Tensor::zeros(&[0, 3])).unwrap(), 0.0);
    }
}
