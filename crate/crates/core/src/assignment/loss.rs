use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian::{hungarian_match, MatchResult};
use crate::error::{Error, Result};
use crate::geometry::ops::rotated_iou_rows;
use crate::geometry::polygon::DEGENERATE_AREA;
use crate::geometry::{rotated_iou_checked, OrientedBox};
use crate::model::LayerPrediction;
use crate::numerics::{Dual, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 2.0,
            iou: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.l1, self.iou].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {:?}", self)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha < 1.0 && self.gamma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("focal parameters out of range: {:?}", self)))
        }
    }
}

/// A labelled ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bbox: OrientedBox,
}

/// `ln(1 + e^u)` without overflow.
fn softplus<S: Real>(u: S) -> S {
    if u.value() > 0.0 {
        u + (S::cst(1.0) + (-u).exp()).ln()
    } else {
        (S::cst(1.0) + u.exp()).ln()
    }
}

/// `−α_t (1 − p_t)^γ ln p_t` for one logit.
pub fn focal_term<S: Real>(logit: S, positive: bool, f: &FocalParams) -> S {
    let (xt, alpha) = if positive {
        (logit, f.alpha)
    } else {
        (-logit, 1.0 - f.alpha)
    };
    let modulator = if f.gamma == 0.0 {
        S::cst(1.0)
    } else {
        (softplus(xt).scale(-f.gamma)).exp()
    };
    (modulator * softplus(-xt)).scale(alpha)
}

/// Sigmoid focal loss of `[N, C]` logits, summed over classes and queries
/// and divided by the number of labelled queries (at least 1). `labels[i]`
/// is the class of query `i`, `None` for background.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[Option<usize>], f: &FocalParams) -> Result<Var> {
    let (n, c) = match tape.shape(logits) {
        [n, c] if *n == labels.len() => (*n, *c),
        s => {
            return Err(Error::shape(
                "focal_loss",
                format!("logits {:?} for {} labels", s, labels.len()),
            ))
        }
    };
    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {} out of {} classes", bad, c)));
    }
    let x = tape.value(logits).data().to_vec();
    let mut out = Vec::with_capacity(n * c);
    let mut jac = Vec::with_capacity(n * c);
    for (i, label) in labels.iter().enumerate() {
        for k in 0..c {
            let idx = i * c + k;
            let t = focal_term(Dual::<1>::var(x[idx], 0), *label == Some(k), f);
            out.push(t.v);
            jac.push((idx as u32, idx as u32, t.d[0]));
        }
    }
    let terms = tape.custom("focal_loss", logits, Tensor::new(&[n, c], out)?, jac)?;
    let s = tape.sum(terms)?;
    let positives = labels.iter().flatten().count().max(1);
    tape.mul_scalar(s, 1.0 / positives as f64)
}

/// `(cx/W, cy/H, w/W, h/H, θ/π)`.
pub fn normalizer(width: f64, height: f64) -> [f64; 5] {
    [1.0 / width, 1.0 / height, 1.0 / width, 1.0 / height, 1.0 / PI]
}

fn l1_distance(a: &[f64], b: &[f64], norm: &[f64; 5]) -> f64 {
    (0..5).map(|k| (a[k] * norm[k] - b[k] * norm[k]).abs()).sum()
}

/// Matching cost `[N, M]` between predictions and targets, built from the
/// same terms as the loss: focal cost, normalized L1 and `1 − IoU`.
pub fn match_cost(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[Target],
    image: (f64, f64),
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<Tensor> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::shape("match_cost", format!("logits {:?}", s))),
    };
    if boxes.shape() != [n, 5] {
        return Err(Error::shape(
            "match_cost",
            format!("boxes {:?} for {} queries", boxes.shape(), n),
        ));
    }
    let m = targets.len();
    let norm = normalizer(image.0, image.1);
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        let pred = OrientedBox::from_array(boxes.row(i).try_into().expect("5 columns"));
        for (j, t) in targets.iter().enumerate() {
            if t.class >= c {
                return Err(Error::InvalidArgument(format!("target class {} out of {}", t.class, c)));
            }
            let x = logits.data()[i * c + t.class];
            let cls = focal_term(x, true, focal) - focal_term(x, false, focal);
            let l1 = l1_distance(boxes.row(i), &t.bbox.to_array(), &norm);
            let iou = rotated_iou_checked(&pred, &t.bbox).iou;
            cost[i * m + j] = weights.cls * cls + weights.l1 * l1 + weights.iou * (1.0 - iou);
        }
    }
    Tensor::new(&[n, m], cost)
}

/// Normalized L1 and `1 − IoU`, each averaged over the matched pairs.
/// Pairs whose target is degenerate are skipped with a warning; `None` when
/// no pair remains.
pub fn regression_losses(
    tape: &mut Tape,
    boxes: Var,
    matches: &MatchResult,
    targets: &[Target],
    image: (f64, f64),
) -> Result<Option<(Var, Var)>> {
    let mut rows = Vec::new();
    let mut gts = Vec::new();
    for &(q, t) in &matches.pairs {
        let gt = targets
            .get(t)
            .ok_or_else(|| Error::InvalidArgument(format!("match refers to missing target {}", t)))?
            .bbox;
        if gt.area() <= DEGENERATE_AREA {
            warn!("skipping degenerate target {} ({:?})", t, gt);
            continue;
        }
        rows.push(q);
        gts.push(gt);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let k = rows.len();
    let inv_k = 1.0 / k as f64;
    let sel = tape.select_rows(boxes, &rows)?;
    let norm = normalizer(image.0, image.1);
    let scale = tape.constant(Tensor::from_fn(&[k, 5], |i| norm[i % 5]));
    let target = tape.constant(Tensor::from_fn(&[k, 5], |i| gts[i / 5].to_array()[i % 5] * norm[i % 5]));
    let scaled = tape.mul(sel, scale)?;
    let diff = tape.sub(scaled, target)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.sum(abs)?;
    let l1 = tape.mul_scalar(l1, inv_k)?;
    let iou = rotated_iou_rows(tape, sel, &gts)?;
    let s = tape.sum(iou)?;
    let s = tape.mul_scalar(s, -inv_k)?;
    let iou_loss = tape.add_scalar(s, 1.0)?;
    Ok(Some((l1, iou_loss)))
}

/// Loss of one layer's prediction with its own matching.
#[derive(Debug, Clone, Copy)]
pub struct LayerLoss {
    pub total: Var,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

/// Per-term values summed over layers, plus the weighted total on the tape.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub matches: Vec<MatchResult>,
}

pub fn layer_loss(
    tape: &mut Tape,
    pred: &LayerPrediction,
    targets: &[Target],
    image: (f64, f64),
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<(LayerLoss, MatchResult)> {
    let n = tape.shape(pred.logits)[0];
    let matches = if targets.is_empty() {
        MatchResult {
            pairs: vec![],
            total_cost: 0.0,
        }
    } else {
        let cost = match_cost(
            tape.value(pred.logits),
            tape.value(pred.boxes),
            targets,
            image,
            weights,
            focal,
        )?;
        hungarian_match(&cost)?
    };
    let mut labels = vec![None; n];
    for &(q, t) in &matches.pairs {
        labels[q] = Some(targets[t].class);
    }
    let cls = focal_loss(tape, pred.logits, &labels, focal)?;
    let cls_v = tape.value(cls).item().expect("scalar");
    let mut total = tape.mul_scalar(cls, weights.cls)?;
    let (mut l1_v, mut iou_v) = (0.0, 0.0);
    if let Some((l1, iou)) = regression_losses(tape, pred.boxes, &matches, targets, image)? {
        l1_v = tape.value(l1).item().expect("scalar");
        iou_v = tape.value(iou).item().expect("scalar");
        let a = tape.mul_scalar(l1, weights.l1)?;
        let b = tape.mul_scalar(iou, weights.iou)?;
        total = tape.add(total, a)?;
        total = tape.add(total, b)?;
    }
    Ok((
        LayerLoss {
            total,
            cls: cls_v,
            l1: l1_v,
            iou: iou_v,
        },
        matches,
    ))
}

/// Sum over layers, each matched independently.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[LayerPrediction],
    targets: &[Target],
    image: (f64, f64),
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<LossBreakdown> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("total_loss needs at least one layer".into()));
    }
    let mut out: Option<LossBreakdown> = None;
    for pred in preds {
        let (l, m) = layer_loss(tape, pred, targets, image, weights, focal)?;
        out = Some(match out {
            None => LossBreakdown {
                total: l.total,
                cls: l.cls,
                l1: l.l1,
                iou: l.iou,
                matches: vec![m],
            },
            Some(mut acc) => {
                acc.total = tape.add(acc.total, l.total)?;
                acc.cls += l.cls;
                acc.l1 += l.l1;
                acc.iou += l.iou;
                acc.matches.push(m);
                acc
            }
        });
    }
    Ok(out.expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};

    fn prediction(tape: &mut Tape, logits: Tensor, boxes: Tensor) -> LayerPrediction {
        let logits = tape.param(logits);
        let boxes = tape.param(boxes);
        LayerPrediction {
            layer: 0,
            logits,
            boxes,
            queries: boxes,
        }
    }

    #[test]
    fn focal_examples() {
        let f = FocalParams::default();
        assert!((focal_term(0.0, true, &f) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((focal_term(0.0, true, &f) - 0.043322).abs() < 1e-6);
        assert_eq!(focal_term(1000.0, true, &f), 0.0);
        assert_eq!(focal_term(-1000.0, false, &f), 0.0);
        assert!(focal_term(-800.0, true, &f).is_finite());
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let f = FocalParams::default();
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, -0.4, 0.9, -3.0]).unwrap();
        let labels = [Some(2), None];
        let run = |x: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), grad);
            let l = focal_loss(&mut tape, v, &labels, &f).unwrap();
            let val = tape.value(l).item().unwrap();
            if grad {
                tape.backward(l).unwrap();
                (val, Some(tape.grad(v).unwrap().clone()))
            } else {
                (val, None)
            }
        };
        let g = run(&x, true).1.unwrap();
        let fd = finite_difference_gradient(|t| Ok(run(t, false).0), &x, 1e-5).unwrap();
        assert!(relative_error(g.data(), fd.data()) < 1e-6);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = OrientedBox::new(20.0, 30.0, 10.0, 6.0, 0.3).unwrap();
        let targets = [Target { class: 1, bbox: gt }];
        let mut tape = Tape::new();
        let pred = prediction(
            &mut tape,
            Tensor::new(&[1, 2], vec![-1000.0, 1000.0]).unwrap(),
            Tensor::new(&[1, 5], gt.to_array().to_vec()).unwrap(),
        );
        let l = total_loss(
            &mut tape,
            &[pred],
            &targets,
            (64.0, 64.0),
            &LossWeights::default(),
            &FocalParams::default(),
        )
        .unwrap();
        assert_eq!(l.cls, 0.0);
        assert_eq!(l.l1, 0.0);
        assert!(l.iou.abs() < 1e-12);
        let twice = total_loss(
            &mut tape,
            &[pred, pred],
            &targets,
            (64.0, 64.0),
            &LossWeights::default(),
            &FocalParams::default(),
        )
        .unwrap();
        let (a, b) = (
            tape.value(l.total).item().unwrap(),
            tape.value(twice.total).item().unwrap(),
        );
        assert!((b - 2.0 * a).abs() <= 1e-15);
    }

    #[test]
    fn disjoint_pair_has_unit_iou_loss() {
        let targets = [Target {
            class: 0,
            bbox: OrientedBox::new(10.0, 10.0, 4.0, 4.0, 0.0).unwrap(),
        }];
        let mut tape = Tape::new();
        let boxes = tape.param(Tensor::new(&[1, 5], vec![50.0, 50.0, 4.0, 4.0, 0.0]).unwrap());
        let m = MatchResult {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        let (_, iou) = regression_losses(&mut tape, boxes, &m, &targets, (64.0, 64.0))
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(iou).item(), Some(1.0));
    }

    #[test]
    fn degenerate_targets_are_skipped() {
        let targets = [Target {
            class: 0,
            bbox: OrientedBox::new(10.0, 10.0, 1e-7, 1e-7, 0.0).unwrap(),
        }];
        let mut tape = Tape::new();
        let boxes = tape.param(Tensor::new(&[1, 5], vec![10.0, 10.0, 4.0, 4.0, 0.0]).unwrap());
        let m = MatchResult {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        assert!(regression_losses(&mut tape, boxes, &m, &targets, (64.0, 64.0))
            .unwrap()
            .is_none());
    }

    #[test]
    fn focal_loss_divides_by_labelled_queries() {
        let f = FocalParams::default();
        let value = |labels: &[Option<usize>]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::zeros(&[4, 2]), false);
            let l = focal_loss(&mut tape, v, labels, &f).unwrap();
            tape.value(l).item().unwrap()
        };
        let pos = focal_term(0.0, true, &f);
        let neg = focal_term(0.0, false, &f);
        let none = value(&[None; 4]);
        assert!((none - 8.0 * neg).abs() < 1e-15);
        let two = value(&[Some(0), None, Some(1), None]);
        assert!((two - (2.0 * pos + 6.0 * neg) / 2.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn matched_cost_never_exceeds_identity(seed in 0u64..200, n in 1usize..7, m in 1usize..5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = m.min(n);
            let logits = Tensor::from_fn(&[n, 3], |_| rng.random_range(-4.0..4.0));
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                OrientedBox::new(
                    rng.random_range(5.0..60.0),
                    rng.random_range(5.0..60.0),
                    rng.random_range(2.0..20.0),
                    rng.random_range(2.0..20.0),
                    rng.random_range(-1.5..1.5),
                )
                .unwrap()
            };
            let boxes: Vec<f64> = (0..n).flat_map(|_| rand_box(&mut rng).to_array()).collect();
            let boxes = Tensor::new(&[n, 5], boxes).unwrap();
            let gts: Vec<Target> = (0..m)
                .map(|_| Target { class: rng.random_range(0..3), bbox: rand_box(&mut rng) })
                .collect();
            let c = match_cost(&logits, &boxes, &gts, (64.0, 64.0), &LossWeights::default(), &FocalParams::default()).unwrap();
            let matched = hungarian_match(&c).unwrap().total_cost;
            let identity: f64 = (0..m).map(|j| c.data()[j * m + j]).sum();
            proptest::prop_assert!(matched <= identity + 1e-9);
        }
    }

    #[test]
    fn cost_prefers_the_exact_match_and_zero_weights_vanish() {
        let gts = [
            Target {
                class: 0,
                bbox: OrientedBox::new(10.0, 10.0, 8.0, 4.0, 0.2).unwrap(),
            },
            Target {
                class: 1,
                bbox: OrientedBox::new(40.0, 30.0, 6.0, 12.0, -0.5).unwrap(),
            },
        ];
        let logits = Tensor::new(&[3, 2], vec![-3.0, -3.0, -5.0, 6.0, 6.0, -5.0]).unwrap();
        let boxes = Tensor::new(
            &[3, 5],
            [
                [30.0, 30.0, 5.0, 5.0, 0.0],
                gts[1].bbox.to_array(),
                gts[0].bbox.to_array(),
            ]
            .concat(),
        )
        .unwrap();
        let w = LossWeights::default();
        let f = FocalParams::default();
        let c = match_cost(&logits, &boxes, &gts, (64.0, 64.0), &w, &f).unwrap();
        let col_min = |j: usize| {
            (0..3)
                .min_by(|&a, &b| c.data()[a * 2 + j].total_cmp(&c.data()[b * 2 + j]))
                .unwrap()
        };
        assert_eq!(col_min(0), 2);
        assert_eq!(col_min(1), 1);
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.pairs, vec![(1, 1), (2, 0)]);
        let zero = LossWeights {
            cls: 0.0,
            l1: 0.0,
            iou: 0.0,
        };
        let z = match_cost(&logits, &boxes, &gts, (64.0, 64.0), &zero, &f).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
