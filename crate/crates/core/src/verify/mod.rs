//! Verification suites comparing the fast kernels with independent
//! reference computations and structural invariants.

pub mod gradients;
pub mod oracles;

use std::f64::consts::{FRAC_PI_4, PI, SQRT_2};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian_match;
use crate::attention::{
    align_point, align_points, make_sampling_points, scale_aware, scale_weight, CrossAttentionConfig, FeaturePyramid,
    OrientedCrossAttention, SelfAttentionConfig, WassersteinSelfAttention,
};
use crate::encoding::{gaussian_pe, gaussian_pe_generic, sinusoidal_pe, PEConfig};
use crate::error::{Error, Result};
use crate::geometry::{box_to_gaussian, rotated_iou, wasserstein_distance, wasserstein_score, Gaussian2D, OrientedBox};
use crate::numerics::{ParamStore, Tape, Tensor};

pub use gradients::{registry, GradCase};
pub use oracles::{
    brute_force_assignment, monte_carlo_pe, naive_cross_attention, raster_iou, stratified_normal_pairs,
    wasserstein_eigen,
};

/// One measured quantity and its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= limit`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let parts: Vec<String> = self
            .checks
            .iter()
            .map(|c| format!("{} {:.3e} (limit {:.1e})", c.name, c.value, c.limit))
            .collect();
        format!("{} {} [{:.1}s]: {}", status, self.suite, self.seconds, parts.join("; "))
    }
}

pub const SUITES: [&str; 7] = [
    "pe-montecarlo",
    "wasserstein-eigen",
    "iou-raster",
    "hungarian-bruteforce",
    "gradients",
    "cross-attention-naive",
    "invariants",
];

/// Runs a suite at its full size.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "pe-montecarlo" => pe_monte_carlo(seed, &PeSuite::default()),
        "wasserstein-eigen" => wasserstein_eigen_suite(seed, 1000),
        "iou-raster" => iou_raster(seed, 200, 2048),
        "hungarian-bruteforce" => hungarian_brute_force(seed, 1000, 7),
        "gradients" => gradient_suite(seed, &registry()),
        "cross-attention-naive" => cross_attention_naive(seed, 20),
        "invariants" => invariants(seed),
        other => Err(Error::InvalidArgument(format!(
            "unknown suite '{}'; expected one of {}",
            other,
            SUITES.join(", ")
        ))),
    }
}

fn timed(suite: &str, start: Instant, mut checks: Vec<Check>, budget: Option<f64>) -> SuiteReport {
    let seconds = start.elapsed().as_secs_f64();
    if let Some(b) = budget {
        checks.push(Check::at_most("seconds", seconds, b));
    }
    SuiteReport {
        suite: suite.to_string(),
        checks,
        seconds,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeSuite {
    pub boxes: usize,
    /// The sample count is `grid²`.
    pub grid: usize,
    pub pe: PEConfig,
    pub tolerance: f64,
    pub budget_seconds: Option<f64>,
}

impl Default for PeSuite {
    fn default() -> Self {
        PeSuite {
            boxes: 100,
            grid: 1000,
            pe: PEConfig {
                temperature: 10000.0,
                freqs: 8,
            },
            tolerance: 3e-3,
            budget_seconds: Some(60.0),
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64, size: (f64, f64)) -> OrientedBox {
    OrientedBox {
        cx: rng.random_range(0.0..extent),
        cy: rng.random_range(0.0..extent),
        w: rng.random_range(size.0..size.1),
        h: rng.random_range(size.0..size.1),
        theta: rng.random_range(-PI / 2.0..PI / 2.0),
    }
}

/// Closed-form Gaussian encoding against sample means, plus the reduction
/// to the plain sinusoid at zero size.
pub fn pe_monte_carlo(seed: u64, s: &PeSuite) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z1, z2) = stratified_normal_pairs(s.grid, &mut rng);
    let mut worst = 0.0f64;
    let mut zero_var = 0.0f64;
    for _ in 0..s.boxes {
        let b = random_box(&mut rng, 256.0, (1.0, 48.0));
        let closed = gaussian_pe(&b, &s.pe);
        let sampled = monte_carlo_pe(&b, &s.pe, &z1, &z2);
        for (a, e) in closed.iter().zip(&sampled) {
            worst = worst.max((a - e).abs());
        }
        let point = gaussian_pe_generic([b.cx, b.cy, 0.0, 0.0, b.theta], &s.pe);
        for (a, e) in point.iter().zip(sinusoidal_pe(&[b.cx, b.cy], &s.pe)) {
            zero_var = zero_var.max((a - e).abs());
        }
    }
    Ok(timed(
        "pe-montecarlo",
        start,
        vec![
            Check::at_most("max |closed - sampled|", worst, s.tolerance),
            Check::at_most("max zero-variance deviation", zero_var, 1e-9),
        ],
        s.budget_seconds,
    ))
}

fn random_spd(rng: &mut ChaCha8Rng) -> Gaussian2D {
    let (l1, l2) = (rng.random_range(0.1..50.0), rng.random_range(0.1..50.0));
    let t: f64 = rng.random_range(-PI..PI);
    let (s, c) = t.sin_cos();
    let xy = (l1 - l2) * c * s;
    Gaussian2D {
        mu: [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
        sigma: [[l1 * c * c + l2 * s * s, xy], [xy, l1 * s * s + l2 * c * c]],
    }
}

/// Closed-form distance against the eigendecomposition formula, and the
/// bounds of the derived score.
pub fn wasserstein_eigen_suite(seed: u64, pairs: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (1e-7f64.ln(), (1.0 + 1e-7f64).ln());
    let mut worst = 0.0f64;
    let mut outside = 0usize;
    for _ in 0..pairs {
        let (a, b) = (random_spd(&mut rng), random_spd(&mut rng));
        worst = worst.max((wasserstein_distance(&a, &b)? - wasserstein_eigen(&a, &b)).abs());
        for (x, y) in [(&a, &b), (&a, &a)] {
            let s = wasserstein_score(x, y)?;
            if !(s > lo && s <= hi) {
                outside += 1;
            }
        }
    }
    Ok(timed(
        "wasserstein-eigen",
        start,
        vec![
            Check::at_most("max |closed - eigen|", worst, 1e-8),
            Check::at_most("scores out of range", outside as f64, 0.0),
        ],
        None,
    ))
}

/// The intersection of a unit square with its π/4 rotation is a regular
/// octagon of area `2(√2 − 1)`.
pub fn octagon_iou() -> f64 {
    let inter = 2.0 * (SQRT_2 - 1.0);
    inter / (2.0 - inter)
}

/// Polygon-clipping IoU against lattice counting.
pub fn iou_raster(seed: u64, pairs: usize, grid: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let a = random_box(&mut rng, 100.0, (4.0, 40.0));
        let reach = 0.5 * (a.w.max(a.h));
        let b = OrientedBox {
            cx: a.cx + rng.random_range(-reach..reach),
            cy: a.cy + rng.random_range(-reach..reach),
            w: a.w * rng.random_range(0.5..1.5),
            h: a.h * rng.random_range(0.5..1.5),
            theta: rng.random_range(-PI / 2.0..PI / 2.0),
        };
        worst = worst.max((rotated_iou(&a, &b) - raster_iou(&a, &b, grid)).abs());
    }
    let square = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0)?;
    let turned = OrientedBox {
        theta: FRAC_PI_4,
        ..square
    };
    let want = octagon_iou();
    let octagon = (rotated_iou(&square, &turned) - want)
        .abs()
        .max((raster_iou(&square, &turned, grid) - want).abs());
    Ok(timed(
        "iou-raster",
        start,
        vec![
            Check::at_most("max |clip - raster|", worst, 5e-3),
            Check::at_most("octagon deviation", octagon, 5e-3),
        ],
        None,
    ))
}

/// Assignment totals against exhaustive search; half the matrices hold small
/// integers so that ties are common.
pub fn hungarian_brute_force(seed: u64, matrices: usize, max_size: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for k in 0..matrices {
        let n = rng.random_range(1..=max_size);
        let m = rng.random_range(1..=max_size);
        let cost = if k % 2 == 0 {
            Tensor::from_fn(&[n, m], |_| rng.random_range(0..10) as f64)
        } else {
            Tensor::from_fn(&[n, m], |_| rng.random_range(-5.0..5.0))
        };
        let got = hungarian_match(&cost)?;
        if got.pairs.len() != n.min(m) || got.total_cost != brute_force_assignment(&cost)? {
            mismatches += 1;
        }
    }
    Ok(timed(
        "hungarian-bruteforce",
        start,
        vec![Check::at_most("mismatched totals", mismatches as f64, 0.0)],
        None,
    ))
}

/// Every registered case over its instances; one check per case plus the
/// overall time budget.
pub fn gradient_suite(seed: u64, cases: &[GradCase]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::with_capacity(cases.len() + 1);
    for case in cases {
        let mut worst = 0.0f64;
        for i in 0..case.instances {
            worst = worst.max(case.relative_error(seed.wrapping_add(i as u64))?);
        }
        checks.push(Check::at_most(case.name, worst, 1e-4));
    }
    Ok(timed("gradients", start, checks, Some(300.0)))
}

fn small_cross_attention(
    rng: &mut ChaCha8Rng,
) -> Result<(OrientedCrossAttention, ParamStore, Tensor, Tensor, Vec<Tensor>)> {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let width = heads * rng.random_range(1..=3);
    let levels = rng.random_range(1..=3);
    let first = [4, 8][rng.random_range(0..2)];
    let strides: Vec<usize> = (0..levels).map(|l| first << l).collect();
    let cfg = CrossAttentionConfig {
        heads,
        points: rng.random_range(1..=4),
        eta: rng.random_range(0.5..4.0),
        strides: strides.clone(),
    };
    let mut store = ParamStore::new();
    let ca = OrientedCrossAttention::new(&mut store, "ca", width, cfg, rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::from_fn(&shape, |_| rng.random_range(-0.5..0.5));
    }
    let extent = (*strides.last().expect("levels") * 2) as f64;
    let n = rng.random_range(1..=5);
    let qc = Tensor::from_fn(&[n, width], |_| rng.random_range(-1.0..1.0));
    let mut rows = Vec::with_capacity(n * 5);
    for _ in 0..n {
        rows.extend([
            rng.random_range(0.0..extent),
            rng.random_range(0.0..extent),
            rng.random_range(1.0..5.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-PI / 2.0..PI / 2.0),
        ]);
    }
    let qp = Tensor::new(&[n, 5], rows)?;
    let maps = strides
        .iter()
        .map(|&s| {
            let side = (extent as usize) / s;
            Tensor::from_fn(&[side, side, width], |_| rng.random_range(-1.0..1.0))
        })
        .collect();
    Ok((ca, store, qc, qp, maps))
}

/// The tape forward pass against the loop reference, compared bit for bit.
pub fn cross_attention_naive(seed: u64, instances: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut differing = 0usize;
    for _ in 0..instances {
        let (ca, store, qc, qp, maps) = small_cross_attention(&mut rng)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let qcv = tape.constant(qc.clone());
        let qpv = tape.constant(qp.clone());
        let fp = FeaturePyramid {
            levels: maps.iter().map(|m| tape.constant(m.clone())).collect(),
            strides: ca.cfg.strides.clone(),
        };
        let out = ca.forward(&mut tape, &p, qcv, qpv, &fp)?.output;
        let naive = naive_cross_attention(&ca, &store, &qc, &qp, &maps)?;
        let same = tape
            .value(out)
            .data()
            .iter()
            .zip(naive.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || tape.shape(out) != naive.shape() {
            differing += 1;
        }
    }
    Ok(timed(
        "cross-attention-naive",
        start,
        vec![Check::at_most("instances with differing bits", differing as f64, 0.0)],
        None,
    ))
}

/// Softmax normalization, the scale weight at a matching stride, rotation
/// properties of point alignment and half-turn invariance of box Gaussians.
pub fn invariants(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // softmax, directly and inside self-attention
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_fn(&[50, 40], |_| rng.random_range(-60.0..60.0)));
    let sm = tape.softmax(logits)?;
    let mut rows = vec![tape.value(sm).clone()];
    let mut store = ParamStore::new();
    let sa = WassersteinSelfAttention::new(
        &mut store,
        "sa",
        16,
        SelfAttentionConfig { heads: 4 },
        PEConfig {
            temperature: 10000.0,
            freqs: 4,
        },
        &mut rng,
    )?;
    let p = store.bind_frozen(&mut tape);
    let qc = tape.constant(Tensor::from_fn(&[12, 16], |_| rng.random_range(-3.0..3.0)));
    let qp_rows: Vec<f64> = (0..12)
        .flat_map(|_| {
            [
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                rng.random_range(1.0..6.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.5..1.5),
            ]
        })
        .collect();
    let qp = tape.constant(Tensor::new(&[12, 5], qp_rows)?);
    for a in sa.forward(&mut tape, &p, qc, qp)?.attention {
        rows.push(tape.value(a).clone());
    }
    let softmax_dev = rows
        .iter()
        .flat_map(|t| {
            let w = *t.shape().last().expect("matrix");
            t.data()
                .chunks(w)
                .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0f64, f64::max);
    checks.push(Check::at_most("softmax row-sum deviation", softmax_dev, 1e-6));

    // scale weight at z = log2 s, as a scalar and on the tape
    let mut scale_dev = 0.0f64;
    for s in [1usize, 2, 4, 8, 16, 32, 64, 128] {
        for eta in [0.5, 1.0, 2.0, 3.7] {
            let z = (s as f64).log2();
            scale_dev = scale_dev.max((scale_weight(z, s, eta) - 0.5).abs());
            let mut t = Tape::new();
            let zv = t.constant(Tensor::full(&[1, 1, 1, 1], z));
            let ones = t.constant(Tensor::full(&[1, 1, 1, 2], 1.0));
            let w = scale_aware(&mut t, zv, &[ones], &[s], eta)?;
            scale_dev = scale_dev.max(t.value(w).data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max));
        }
    }
    checks.push(Check::at_most("scale weight deviation from 0.5", scale_dev, 0.0));

    // alignment: distances kept, center fixed, rotations compose
    let mut iso = 0.0f64;
    let mut compose = 0.0f64;
    for _ in 0..200 {
        let c = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        let (t1, t2) = (rng.random_range(-PI..PI), rng.random_range(-PI..PI));
        let p = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        let q = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        let (pa, qa) = (align_point(c, t1, p), align_point(c, t1, q));
        let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
        iso = iso.max((dist(pa, qa) - dist(p, q)).abs());
        iso = iso.max((dist(pa, c) - dist(p, c)).abs());
        iso = iso.max(dist(align_point(c, t1, c), c));
        let twice = align_point(c, t2, align_point(c, t1, p));
        compose = compose.max(dist(twice, align_point(c, t1 + t2, p)));
    }
    // the tape version agrees with the scalar one
    let mut t = Tape::new();
    let q_rows = [[30.0, 40.0, 3.0, 0.5, 0.7], [5.0, -3.0, 2.0, -0.2, -1.1]];
    let qp = t.constant(Tensor::new(&[2, 5], q_rows.concat())?);
    let offs = t.constant(Tensor::from_fn(&[2, 2, 3, 3], |_| rng.random_range(-1.0..1.0)));
    let pts = make_sampling_points(&mut t, qp, offs)?;
    let aligned = align_points(&mut t, qp, &pts)?;
    for (i, q) in q_rows.iter().enumerate() {
        for k in 0..6 {
            let idx = i * 6 + k;
            let raw = [t.value(pts.x).data()[idx], t.value(pts.y).data()[idx]];
            let want = align_point([q[0], q[1]], q[4], raw);
            let got = [t.value(aligned.x).data()[idx], t.value(aligned.y).data()[idx]];
            iso = iso.max((got[0] - want[0]).abs().max((got[1] - want[1]).abs()));
        }
    }
    checks.push(Check::at_most("alignment isometry deviation", iso, 1e-9));
    checks.push(Check::at_most("rotation composition deviation", compose, 1e-9));

    // half-turn invariance
    let mut half = 0.0f64;
    let pe = PEConfig {
        temperature: 10000.0,
        freqs: 8,
    };
    for _ in 0..500 {
        let b = random_box(&mut rng, 500.0, (1.0, 100.0));
        let turned = OrientedBox {
            theta: b.theta + PI,
            ..b
        };
        let (g1, g2) = (box_to_gaussian(&b), box_to_gaussian(&turned));
        for i in 0..2 {
            half = half.max((g1.mu[i] - g2.mu[i]).abs());
            for j in 0..2 {
                half = half.max((g1.sigma[i][j] - g2.sigma[i][j]).abs());
            }
        }
        for (x, y) in gaussian_pe(&b, &pe).iter().zip(gaussian_pe(&turned, &pe)) {
            half = half.max((x - y).abs());
        }
    }
    checks.push(Check::at_most("half-turn Gaussian deviation", half, 1e-9));
    Ok(timed("invariants", start, checks, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn octagon_value() {
        assert!((octagon_iou() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn reduced_suites_pass() {
        let small_pe = PeSuite {
            boxes: 5,
            grid: 200,
            tolerance: 2e-2,
            budget_seconds: None,
            ..PeSuite::default()
        };
        for r in [
            pe_monte_carlo(1, &small_pe).unwrap(),
            wasserstein_eigen_suite(1, 100).unwrap(),
            iou_raster(1, 10, 1024).unwrap(),
            hungarian_brute_force(1, 100, 5).unwrap(),
            cross_attention_naive(1, 5).unwrap(),
            invariants(1).unwrap(),
        ] {
            assert!(r.passed(), "{}", r.summary());
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope", 0).is_err());
    }
}
