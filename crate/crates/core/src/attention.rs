//! Wasserstein self-attention and oriented cross-attention.
//!
//! Positional queries are `[N, 5]` rows of `(x, y, z, r, θ)` with
//! `z = log2 sqrt(wh)` and `r = log2(h / w)`. Feature maps are channel-last
//! `[H, W, D]`.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{gaussian_pe_rows, PEConfig};
use crate::error::{Error, Result};
use crate::geometry::ops::wasserstein_score_matrix;
use crate::geometry::QueryBox5;
use crate::nn::{spread, Init, Linear};
use crate::numerics::{Bound, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionConfig {
    pub heads: usize,
}

impl SelfAttentionConfig {
    /// Per-head width `d_q`.
    pub fn head_dim(&self, width: usize) -> Result<usize> {
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} self-attention heads do not divide width {}",
                self.heads, width
            )));
        }
        Ok(width / self.heads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionConfig {
    /// Head count `g`.
    pub heads: usize,
    /// Sampling points per head `O`.
    pub points: usize,
    /// Softening coefficient `η` of the scale weights.
    pub eta: f64,
    /// Pyramid strides in pixels, finest first.
    pub strides: Vec<usize>,
}

impl CrossAttentionConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} cross-attention heads do not divide width {}",
                self.heads, width
            )));
        }
        if self.points == 0 {
            return Err(Error::Config(
                "cross-attention needs at least one point per head".into(),
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::Config(format!("invalid strides {:?}", self.strides)));
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        self.heads * self.points
    }
}

/// Channel-last feature maps `[H_l, W_l, D]` with their strides.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

/// `sigmoid(out(relu(hidden(x))))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub hidden: Linear,
    pub output: Linear,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Gate {
            hidden: Linear::new(store, &format!("{}.hidden", name), width, width, Init::Xavier, rng),
            output: Linear::new(store, &format!("{}.output", name), width, outputs, Init::Xavier, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let o = self.output.forward(tape, p, h)?;
        tape.sigmoid(o)
    }
}

fn query_rows(tape: &Tape, qp: Var) -> Result<usize> {
    match tape.shape(qp) {
        [n, 5] => Ok(*n),
        s => Err(Error::shape(
            "positional queries",
            format!("expected [N, 5], got {:?}", s),
        )),
    }
}

fn column(tape: &mut Tape, qp: Var, j: usize) -> Result<Var> {
    tape.slice(qp, 1, j, j + 1)
}

pub struct SelfAttentionOutput {
    pub output: Var,
    /// Post-softmax `[N, N]` weights, one per head.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WassersteinSelfAttention {
    pub cfg: SelfAttentionConfig,
    pub pe: PEConfig,
    pub width: usize,
    pub pe_proj: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl WassersteinSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cfg: SelfAttentionConfig,
        pe: PEConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.head_dim(width)?;
        pe.validate()?;
        let pe_width = pe.embedding_len(2);
        Ok(WassersteinSelfAttention {
            cfg,
            pe,
            width,
            pe_proj: Linear::new(
                store,
                &format!("{}.pe_proj", name),
                pe_width,
                width,
                Init::Identity,
                rng,
            ),
            query: Linear::new(store, &format!("{}.query", name), width, width, Init::Xavier, rng),
            key: Linear::new(store, &format!("{}.key", name), width, width, Init::Xavier, rng),
            value: Linear::new(store, &format!("{}.value", name), width, width, Init::Xavier, rng),
            out: Linear::new(store, &format!("{}.out", name), width, width, Init::Xavier, rng),
        })
    }

    /// `qc: [N, D]`, `qp: [N, 5]`. The residual is left to the caller.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, qc: Var, qp: Var) -> Result<SelfAttentionOutput> {
        query_rows(tape, qp)?;
        let dq = self.cfg.head_dim(self.width)?;
        let pe = gaussian_pe_rows(tape, qp, &self.pe)?;
        let phi = self.pe_proj.forward(tape, p, pe)?;
        let with_pos = tape.add(qc, phi)?;
        let q = self.query.forward(tape, p, with_pos)?;
        let k = self.key.forward(tape, p, with_pos)?;
        let v = self.value.forward(tape, p, qc)?;
        let g = wasserstein_score_matrix(tape, qp)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut attention = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice(q, 1, h * dq, (h + 1) * dq)?;
            let kh = tape.slice(k, 1, h * dq, (h + 1) * dq)?;
            let vh = tape.slice(v, 1, h * dq, (h + 1) * dq)?;
            let a = head_attention(tape, qh, kh, g)?;
            heads.push(tape.matmul(a, vh)?);
            attention.push(a);
        }
        let cat = tape.concat(&heads, 1)?;
        let output = self.out.forward(tape, p, cat)?;
        Ok(SelfAttentionOutput { output, attention })
    }
}

/// `softmax(q kᵀ / sqrt(d_q) + G)` for one head.
pub fn head_attention(tape: &mut Tape, q: Var, k: Var, g: Var) -> Result<Var> {
    let dq = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(logits, 1.0 / (dq as f64).sqrt())?;
    let biased = tape.add(scaled, g)?;
    tape.softmax(biased)
}

/// `[N, g, O, 3]` offsets `(Δx, Δy, Δz)` from content queries.
pub fn compute_offsets(tape: &mut Tape, p: &Bound, lin: &Linear, qc: Var, cfg: &CrossAttentionConfig) -> Result<Var> {
    let n = tape.shape(qc)[0];
    let flat = lin.forward(tape, p, qc)?;
    tape.reshape(flat, &[n, cfg.heads, cfg.points, 3])
}

/// Sampling points before alignment, each `[N, g, O, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPoints {
    pub x: Var,
    pub y: Var,
    pub z: Var,
}

/// Query columns spread over `[N, g, O, 1]`.
struct QueryColumns {
    x: Var,
    y: Var,
    cos: Var,
    sin: Var,
}

fn spread_to(tape: &mut Tape, col: Var, shape: &[usize]) -> Result<Var> {
    spread(tape, col, &[shape[0], 1, 1, 1], shape)
}

/// `x̃ = x + Δx 2^(z−r)`, `ỹ = y + Δy 2^(z+r)`, `z̃ = z + Δz`.
pub fn make_sampling_points(tape: &mut Tape, qp: Var, offsets: Var) -> Result<SamplingPoints> {
    let n = query_rows(tape, qp)?;
    let shape = match tape.shape(offsets) {
        [n2, g, o, 3] if *n2 == n => vec![n, *g, *o, 1],
        s => {
            return Err(Error::shape(
                "make_sampling_points",
                format!("offsets {:?} for {} queries", s, n),
            ))
        }
    };
    let x = column(tape, qp, 0)?;
    let y = column(tape, qp, 1)?;
    let z = column(tape, qp, 2)?;
    let r = column(tape, qp, 3)?;
    let zmr = tape.sub(z, r)?;
    let zmr = tape.mul_scalar(zmr, LN_2)?;
    let sx = tape.exp(zmr)?;
    let zpr = tape.add(z, r)?;
    let zpr = tape.mul_scalar(zpr, LN_2)?;
    let sy = tape.exp(zpr)?;
    let dx = tape.slice(offsets, 3, 0, 1)?;
    let dy = tape.slice(offsets, 3, 1, 2)?;
    let dz = tape.slice(offsets, 3, 2, 3)?;
    let mut out = [x, y, z];
    for (slot, (base, delta, scale)) in out
        .iter_mut()
        .zip([(x, dx, Some(sx)), (y, dy, Some(sy)), (z, dz, None)])
    {
        let base = spread_to(tape, base, &shape)?;
        let step = match scale {
            Some(s) => {
                let s = spread_to(tape, s, &shape)?;
                tape.mul(delta, s)?
            }
            None => delta,
        };
        *slot = tape.add(base, step)?;
    }
    Ok(SamplingPoints {
        x: out[0],
        y: out[1],
        z: out[2],
    })
}

fn query_columns(tape: &mut Tape, qp: Var, shape: &[usize]) -> Result<QueryColumns> {
    let x = column(tape, qp, 0)?;
    let y = column(tape, qp, 1)?;
    let t = column(tape, qp, 4)?;
    let c = tape.cos(t)?;
    let s = tape.sin(t)?;
    Ok(QueryColumns {
        x: spread_to(tape, x, shape)?,
        y: spread_to(tape, y, shape)?,
        cos: spread_to(tape, c, shape)?,
        sin: spread_to(tape, s, shape)?,
    })
}

/// Rotates `(x̃, ỹ)` by θ about the query center; `z̃` is untouched.
pub fn align_points(tape: &mut Tape, qp: Var, pts: &SamplingPoints) -> Result<SamplingPoints> {
    let shape = tape.shape(pts.x).to_vec();
    let q = query_columns(tape, qp, &shape)?;
    let ox = tape.sub(pts.x, q.x)?;
    let oy = tape.sub(pts.y, q.y)?;
    let cx = tape.mul(q.cos, ox)?;
    let sy = tape.mul(q.sin, oy)?;
    let rx = tape.sub(cx, sy)?;
    let sx = tape.mul(q.sin, ox)?;
    let cy = tape.mul(q.cos, oy)?;
    let ry = tape.add(sx, cy)?;
    Ok(SamplingPoints {
        x: tape.add(q.x, rx)?,
        y: tape.add(q.y, ry)?,
        z: pts.z,
    })
}

/// Bilinear samples `[N, g, O, D/g]` of every level at `P / s − 0.5`.
pub fn sample_values(tape: &mut Tape, fp: &FeaturePyramid, pts: &SamplingPoints) -> Result<Vec<Var>> {
    if fp.levels.len() != fp.strides.len() {
        return Err(Error::shape(
            "sample_values",
            format!("{} levels vs {} strides", fp.levels.len(), fp.strides.len()),
        ));
    }
    let mut out = Vec::with_capacity(fp.levels.len());
    for (&level, &stride) in fp.levels.iter().zip(&fp.strides) {
        let inv = 1.0 / stride as f64;
        let fx = tape.mul_scalar(pts.x, inv)?;
        let fx = tape.add_scalar(fx, -0.5)?;
        let fy = tape.mul_scalar(pts.y, inv)?;
        let fy = tape.add_scalar(fy, -0.5)?;
        let coords = tape.concat(&[fx, fy], 3)?;
        out.push(tape.bilinear_gather(level, coords)?);
    }
    Ok(out)
}

/// `sigmoid(−(z̃ − log2 s)² / η)` for one point.
pub fn scale_weight(z: f64, stride: usize, eta: f64) -> f64 {
    let d = z + -(stride as f64).log2();
    crate::numerics::sigmoid((d * d) * (-1.0 / eta))
}

/// `Σ_l sigmoid(−(z̃ − log2 s_l)² / η) V_l`.
pub fn scale_aware(tape: &mut Tape, z: Var, values: &[Var], strides: &[usize], eta: f64) -> Result<Var> {
    if values.len() != strides.len() || values.is_empty() {
        return Err(Error::shape(
            "scale_aware",
            format!("{} values vs {} strides", values.len(), strides.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&v, &s) in values.iter().zip(strides) {
        let shape = tape.shape(v).to_vec();
        let d = tape.add_scalar(z, -(s as f64).log2())?;
        let sq = tape.mul(d, d)?;
        let arg = tape.mul_scalar(sq, -1.0 / eta)?;
        let w = tape.sigmoid(arg)?;
        let w = tape.broadcast_to(w, &shape)?;
        let term = tape.mul(w, v)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Gates `v: [N, g, O, D/g]` per channel with weights `[N, g, 1, D/g]`.
pub fn channel_aware(tape: &mut Tape, p: &Bound, gate: &Gate, qc: Var, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = gate.forward(tape, p, qc)?;
    let w = spread(tape, w, &[shape[0], shape[1], 1, shape[3]], &shape)?;
    tape.mul(w, v)
}

/// Gates `v` per point with weights `[N, g, O, 1]`, flattens and maps to `[N, D]`.
pub fn spatial_aware(tape: &mut Tape, p: &Bound, gate: &Gate, out: &Linear, qc: Var, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = gate.forward(tape, p, qc)?;
    let w = spread(tape, w, &[shape[0], shape[1], shape[2], 1], &shape)?;
    let gated = tape.mul(w, v)?;
    let flat = tape.reshape(gated, &[shape[0], shape[1] * shape[2] * shape[3]])?;
    out.forward(tape, p, flat)
}

pub struct CrossAttentionOutput {
    pub output: Var,
    pub points: SamplingPoints,
    pub aligned: SamplingPoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientedCrossAttention {
    pub cfg: CrossAttentionConfig,
    pub width: usize,
    pub offsets: Linear,
    pub channel: Gate,
    pub spatial: Gate,
    pub out: Linear,
}

impl OrientedCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cfg: CrossAttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let (g, o) = (cfg.heads, cfg.points);
        let offsets = Linear::new(store, &format!("{}.offsets", name), width, g * o * 3, Init::Zeros, rng);
        // heads fan out in different directions, points step outwards
        let bias = store.get_mut(offsets.bias).data_mut();
        for h in 0..g {
            let a = 2.0 * PI * h as f64 / g as f64;
            for j in 0..o {
                let radius = 0.5 * (j + 1) as f64 / o as f64;
                bias[(h * o + j) * 3] = radius * a.cos();
                bias[(h * o + j) * 3 + 1] = radius * a.sin();
            }
        }
        Ok(OrientedCrossAttention {
            channel: Gate::new(store, &format!("{}.channel", name), width, width, rng),
            spatial: Gate::new(store, &format!("{}.spatial", name), width, g * o, rng),
            out: Linear::new(store, &format!("{}.out", name), o * width, width, Init::Xavier, rng),
            cfg,
            width,
            offsets,
        })
    }

    /// `[N, D]` update for content queries `qc` at positional queries `qp`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        qc: Var,
        qp: Var,
        fp: &FeaturePyramid,
    ) -> Result<CrossAttentionOutput> {
        if fp.strides != self.cfg.strides {
            return Err(Error::shape(
                "oriented_cross_attention",
                format!("pyramid strides {:?} vs configured {:?}", fp.strides, self.cfg.strides),
            ));
        }
        let offsets = compute_offsets(tape, p, &self.offsets, qc, &self.cfg)?;
        let points = make_sampling_points(tape, qp, offsets)?;
        let aligned = align_points(tape, qp, &points)?;
        let values = sample_values(tape, fp, &aligned)?;
        let fused = scale_aware(tape, aligned.z, &values, &fp.strides, self.cfg.eta)?;
        let gated = channel_aware(tape, p, &self.channel, qc, fused)?;
        let output = spatial_aware(tape, p, &self.spatial, &self.out, qc, gated)?;
        Ok(CrossAttentionOutput {
            output,
            points,
            aligned,
        })
    }
}

/// One sampling point `(x̃, ỹ, z̃)` for offsets `(Δx, Δy, Δz)`.
pub fn sampling_point(q: &QueryBox5, d: [f64; 3]) -> [f64; 3] {
    let sx = ((q.z - q.r) * LN_2).exp();
    let sy = ((q.z + q.r) * LN_2).exp();
    [q.x + d[0] * sx, q.y + d[1] * sy, q.z + d[2]]
}

/// `center + R(θ) (p − center)`.
pub fn align_point(center: [f64; 2], theta: f64, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = (theta.sin(), theta.cos());
    let (ox, oy) = (p[0] - center[0], p[1] - center[1]);
    [center[0] + (c * ox - s * oy), center[1] + (s * ox + c * oy)]
}

/// Sampling points of one query, for inspection and dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPointCloud {
    /// `(x̃, ỹ, z̃)` per head and point, head-major.
    pub points: Vec<[f64; 3]>,
    /// Rotated `(x, y)` positions in the same order.
    pub aligned: Vec<[f64; 2]>,
}

impl SamplingPointCloud {
    pub fn from_tape(tape: &Tape, points: &SamplingPoints, aligned: &SamplingPoints) -> Vec<SamplingPointCloud> {
        let shape = tape.shape(points.x);
        let (n, per) = (shape[0], shape[1] * shape[2]);
        let [x, y, z, ax, ay] = [points.x, points.y, points.z, aligned.x, aligned.y].map(|v| tape.value(v).data());
        (0..n)
            .map(|i| {
                let r = i * per..(i + 1) * per;
                SamplingPointCloud {
                    points: r.clone().map(|k| [x[k], y[k], z[k]]).collect(),
                    aligned: r.map(|k| [ax[k], ay[k]]).collect(),
                }
            })
            .collect()
    }
}
