//! Tape ops for the box kernels. Values come from the generic `f64` code
//! paths, Jacobians from the same code evaluated on dual numbers.

use crate::error::{Error, Result};
use crate::geometry::boxes::OrientedBox;
use crate::geometry::gaussian::{box_score, score_from_distance};
use crate::geometry::polygon::iou_generic;
use crate::numerics::{Dual, Real, SparseJacobian, Tape, Tensor, Var};

/// `(x, y, z, r, θ)` → `(cx, cy, w, h, θ)`.
pub fn zr_params<S: Real>(q: [S; 5]) -> [S; 5] {
    let half = S::cst(0.5);
    [
        q[0],
        q[1],
        (q[2] - q[3] * half).exp2(),
        (q[2] + q[3] * half).exp2(),
        q[4],
    ]
}

fn rows5(tape: &Tape, v: Var, op: &'static str) -> Result<Vec<[f64; 5]>> {
    match tape.shape(v) {
        [_, 5] => Ok(tape
            .value(v)
            .data()
            .chunks_exact(5)
            .map(|c| c.try_into().expect("5"))
            .collect()),
        s => Err(Error::shape(op, format!("expected [N, 5], got {:?}", s))),
    }
}

/// Pairwise Wasserstein scores `G[i, j]` of query boxes given as `[N, 5]`
/// rows of `(x, y, z, r, θ)`. The diagonal is the coincident score and
/// carries no gradient.
pub fn wasserstein_score_matrix(tape: &mut Tape, queries: Var) -> Result<Var> {
    let rows = rows5(tape, queries, "wasserstein_score_matrix")?;
    let n = rows.len();
    let mut out = vec![0.0; n * n];
    let mut jac: SparseJacobian = Vec::new();
    let want_grad = tape.requires_grad(queries);
    for i in 0..n {
        out[i * n + i] = score_from_distance(0.0);
        for j in i + 1..n {
            let (s, partials) = if want_grad {
                let a: [Dual<10>; 5] = std::array::from_fn(|k| Dual::var(rows[i][k], k));
                let b: [Dual<10>; 5] = std::array::from_fn(|k| Dual::var(rows[j][k], 5 + k));
                let s = box_score(zr_params(a), zr_params(b))?;
                (s.v, Some(s.d))
            } else {
                (box_score(zr_params(rows[i]), zr_params(rows[j]))?, None)
            };
            out[i * n + j] = s;
            out[j * n + i] = s;
            if let Some(d) = partials {
                for k in 0..5 {
                    for (src, dk) in [(i, d[k]), (j, d[5 + k])] {
                        let in_idx = (src * 5 + k) as u32;
                        jac.push(((i * n + j) as u32, in_idx, dk));
                        jac.push(((j * n + i) as u32, in_idx, dk));
                    }
                }
            }
        }
    }
    tape.custom("wasserstein_score_matrix", queries, Tensor::new(&[n, n], out)?, jac)
}

/// Row-wise rotated IoU between predicted `[K, 5]` boxes `(cx, cy, w, h, θ)`
/// and fixed targets. Degenerate pairs yield 0 with no gradient.
pub fn rotated_iou_rows(tape: &mut Tape, pred: Var, targets: &[OrientedBox]) -> Result<Var> {
    let rows = rows5(tape, pred, "rotated_iou_rows")?;
    if rows.len() != targets.len() {
        return Err(Error::shape(
            "rotated_iou_rows",
            format!("{} predictions vs {} targets", rows.len(), targets.len()),
        ));
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut jac: SparseJacobian = Vec::new();
    for (i, (p, t)) in rows.iter().zip(targets).enumerate() {
        let a: [Dual<5>; 5] = std::array::from_fn(|k| Dual::var(p[k], k));
        let b = t.to_array().map(Dual::<5>::cst);
        match iou_generic(a, b) {
            Some(iou) => {
                out.push(iou.v);
                for k in 0..5 {
                    if iou.d[k] != 0.0 {
                        jac.push((i as u32, (i * 5 + k) as u32, iou.d[k]));
                    }
                }
            }
            None => out.push(0.0),
        }
    }
    let n = out.len();
    tape.custom("rotated_iou_rows", pred, Tensor::new(&[n], out)?, jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gaussian::{box_to_gaussian, wasserstein_score};

    #[test]
    fn matrix_matches_scalar_scores() {
        let boxes = [
            OrientedBox::new(10.0, 12.0, 8.0, 4.0, 0.2).unwrap(),
            OrientedBox::new(30.0, 5.0, 3.0, 6.0, -0.7).unwrap(),
            OrientedBox::new(11.0, 13.0, 7.0, 5.0, 1.2).unwrap(),
        ];
        let q: Vec<f64> = boxes.iter().flat_map(|b| b.to_zr().unwrap().to_array()).collect();
        let mut tape = Tape::new();
        let qv = tape.param(Tensor::new(&[3, 5], q).unwrap());
        let g = wasserstein_score_matrix(&mut tape, qv).unwrap();
        let gv = tape.value(g).data().to_vec();
        for i in 0..3 {
            for j in 0..3 {
                let want = wasserstein_score(&box_to_gaussian(&boxes[i]), &box_to_gaussian(&boxes[j])).unwrap();
                assert!((gv[i * 3 + j] - want).abs() < 1e-12, "{} {}", i, j);
            }
        }
    }
}
