//! AdamW, the stepped learning-rate schedule and the training loop.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{total_loss, Target};
use crate::config::{OptimConfig, RunConfig};
use crate::data::synth::scene_rng;
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::geometry::{wrap_half_turn, OrientedBox};
use crate::model::Model;
use crate::numerics::{ParamStore, Tape, Tensor};

/// Rate for a 1-based epoch: multiplied by `decay_factor` once for every
/// decay epoch already completed.
pub fn epoch_lr(o: &OptimConfig, epoch: usize) -> f64 {
    let steps = o.decay_epochs.iter().filter(|&&d| d < epoch).count();
    o.lr * o.decay_factor.powi(steps as i32)
}

/// [`epoch_lr`] with the linear warm-up applied to 1-based `iteration`.
pub fn lr_at(o: &OptimConfig, epoch: usize, iteration: usize) -> f64 {
    let base = epoch_lr(o, epoch);
    if o.warmup_iters > 0 && iteration < o.warmup_iters {
        base * iteration as f64 / o.warmup_iters as f64
    } else {
        base
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, o: &OptimConfig) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - o.beta1.powi(self.t);
        let c2 = 1.0 - o.beta2.powi(self.t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for k in 0..p.len() {
                m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
                v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + o.eps);
                p[k] -= lr * (update + o.weight_decay * p[k]);
            }
        }
        Ok(())
    }
}

/// One training image in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W, 3]`.
    pub image: Tensor,
    pub targets: Vec<Target>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Mirrors the image and its boxes.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Sample {
        if !horizontal && !vertical {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let src = self.image.data();
        let image = Tensor::from_fn(&[h, w, 3], |i| {
            let (r, c, ch) = (i / (3 * w), (i / 3) % w, i % 3);
            let r = if vertical { h - 1 - r } else { r };
            let c = if horizontal { w - 1 - c } else { c };
            src[(r * w + c) * 3 + ch]
        });
        let targets = self
            .targets
            .iter()
            .map(|t| {
                let b = t.bbox;
                // one mirror negates the angle; two cancel out
                let theta = if horizontal != vertical {
                    wrap_half_turn(-b.theta)
                } else {
                    b.theta
                };
                Target {
                    class: t.class,
                    bbox: OrientedBox {
                        cx: if horizontal { w as f64 - b.cx } else { b.cx },
                        cy: if vertical { h as f64 - b.cy } else { b.cy },
                        theta,
                        ..b
                    },
                }
            })
            .collect();
        Sample {
            id: self.id.clone(),
            image,
            targets,
        }
    }
}

pub fn load_samples(ds: &Dataset) -> Result<Vec<Sample>> {
    ds.items
        .iter()
        .map(|item| {
            let img: Image = item.load_image()?;
            Ok(Sample {
                id: item.id.clone(),
                image: img.to_tensor(),
                targets: item
                    .instances
                    .iter()
                    .map(|i| Target {
                        class: i.class,
                        bbox: i.bbox,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write a JSON diagnostic when the loss stops being finite.
    pub dump: Option<PathBuf>,
    /// Stop after this many iterations.
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f64,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    iteration: usize,
    epoch: usize,
    images: Vec<&'a str>,
    error: String,
    param_norms: Vec<(&'a str, f64)>,
}

fn diverged(
    model: &Model,
    opts: &TrainOptions,
    iteration: usize,
    epoch: usize,
    images: Vec<&str>,
    err: String,
) -> Error {
    if let Some(path) = &opts.dump {
        let d = Diagnostic {
            iteration,
            epoch,
            images,
            error: err.clone(),
            param_norms: model
                .params
                .ids()
                .map(|id| (model.params.name(id), model.params.get(id).norm()))
                .collect(),
        };
        match serde_json::to_vec_pretty(&d) {
            Ok(bytes) => {
                if let Err(e) = std::fs::write(path, bytes) {
                    log::error!("cannot write diagnostic dump {}: {}", path.display(), e);
                }
            }
            Err(e) => log::error!("cannot encode diagnostic dump: {}", e),
        }
    }
    Error::Diverged { iteration, detail: err }
}

/// Mini-batch training with per-layer supervision. Gradients are averaged
/// over the batch; `on_log` sees every iteration and the updated model.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &RunConfig,
    opts: &TrainOptions,
    on_log: &mut dyn FnMut(&LogEntry, &Model) -> Result<()>,
) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let o = &cfg.optim;
    let mut adam = AdamW::new(&model.params);
    let start = Instant::now();
    let mut iteration = 0;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=o.epochs {
        let mut rng = scene_rng(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(o.batch_size) {
            if opts.max_iterations.is_some_and(|m| iteration >= m) {
                return Ok(TrainSummary {
                    iterations: iteration,
                    final_loss,
                });
            }
            iteration += 1;
            let lr = lr_at(o, epoch, iteration);
            let mut grads: Vec<Tensor> = model
                .params
                .ids()
                .map(|id| Tensor::zeros(model.params.get(id).shape()))
                .collect();
            let (mut loss, mut cls, mut l1, mut iou) = (0.0, 0.0, 0.0, 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &samples[i];
                let (fh, fv) = if cfg.data.flips {
                    (rng.random_bool(0.5), rng.random_bool(0.5))
                } else {
                    (false, false)
                };
                let s = s.flipped(fh, fv);
                let step = (|| -> Result<f64> {
                    let mut tape = Tape::new();
                    let p = model.params.bind(&mut tape);
                    let img = tape.constant(s.image.clone());
                    let preds = model.forward(&mut tape, &p, img)?;
                    let size = (s.width() as f64, s.height() as f64);
                    let l = total_loss(&mut tape, &preds, &s.targets, size, &cfg.loss.weights, &cfg.loss.focal)?;
                    let value = tape.value(l.total).item().expect("scalar loss");
                    tape.backward(l.total)?;
                    for (g, &v) in grads.iter_mut().zip(p.vars()) {
                        if let Some(dv) = tape.grad(v) {
                            for (a, b) in g.data_mut().iter_mut().zip(dv.data()) {
                                *a += inv * b;
                            }
                        }
                    }
                    cls += inv * l.cls;
                    l1 += inv * l.l1;
                    iou += inv * l.iou;
                    Ok(value)
                })();
                match step {
                    Ok(v) if v.is_finite() => loss += inv * v,
                    Ok(v) => {
                        return Err(diverged(
                            model,
                            opts,
                            iteration,
                            epoch,
                            vec![&s.id],
                            format!("loss {}", v),
                        ))
                    }
                    Err(e @ Error::NumericOverflow { .. }) | Err(e @ Error::Backward(_)) => {
                        return Err(diverged(model, opts, iteration, epoch, vec![&s.id], e.to_string()))
                    }
                    Err(e) => return Err(e),
                }
            }
            let grad_norm = grads
                .iter()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if !grad_norm.is_finite() {
                let ids = batch.iter().map(|&i| samples[i].id.as_str()).collect();
                return Err(diverged(
                    model,
                    opts,
                    iteration,
                    epoch,
                    ids,
                    format!("gradient norm {}", grad_norm),
                ));
            }
            if o.clip_norm > 0.0 && grad_norm > o.clip_norm {
                let k = o.clip_norm / grad_norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
            adam.step(&mut model.params, &grads, lr, o)?;
            final_loss = loss;
            let entry = LogEntry {
                iteration,
                epoch,
                lr,
                loss,
                cls,
                l1,
                iou,
                grad_norm,
                seconds: start.elapsed().as_secs_f64(),
            };
            if iteration % 100 == 0 {
                info!("iter {} epoch {} lr {:.3e} loss {:.4}", iteration, epoch, lr, loss);
            }
            on_log(&entry, model)?;
        }
    }
    Ok(TrainSummary {
        iterations: iteration,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotated_iou;

    #[test]
    fn schedule_steps_by_ten() {
        let o = RunConfig::full().optim;
        assert_eq!(epoch_lr(&o, 1), 5e-5);
        assert_eq!(epoch_lr(&o, 8), 5e-5);
        assert!((epoch_lr(&o, 9) - 5e-6).abs() < 1e-20);
        assert!((epoch_lr(&o, 12) - 5e-7).abs() < 1e-20);
        let t = RunConfig::toy().optim;
        assert_eq!(lr_at(&t, 1, 50), t.lr * 0.5);
        assert_eq!(lr_at(&t, 1, 100), t.lr);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let o = OptimConfig {
            weight_decay: 0.0,
            ..RunConfig::toy().optim
        };
        let mut a = AdamW::new(&store);
        a.step(&mut store, &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()], 0.1, &o)
            .unwrap();
        let v = store.get(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn flips_move_pixels_and_boxes_together() {
        let b = OrientedBox::new(10.0, 20.0, 12.0, 4.0, 0.4).unwrap();
        let mut img = crate::data::Image::filled(32, 48, 3, 0.0).unwrap();
        crate::data::synth::paint_box(&mut img, &b, [1.0; 3]).unwrap();
        let s = Sample {
            id: "x".into(),
            image: img.to_tensor(),
            targets: vec![Target { class: 0, bbox: b }],
        };
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let f = s.flipped(h, v);
            let fb = f.targets[0].bbox;
            assert!(fb.is_canonical());
            let mut expect = crate::data::Image::filled(32, 48, 3, 0.0).unwrap();
            crate::data::synth::paint_box(&mut expect, &fb, [1.0; 3]).unwrap();
            let err = f
                .image
                .data()
                .iter()
                .zip(expect.to_tensor().data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-9, "{} {} {}", h, v, err);
            let back = f.flipped(h, v).targets[0].bbox;
            assert!(rotated_iou(&back, &b) > 1.0 - 1e-9);
        }
    }
}
