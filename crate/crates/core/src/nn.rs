//! Parameterized building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var, GATHER_PAD};

/// How a weight matrix starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot uniform.
    Xavier,
    Zeros,
    /// Ones on the main diagonal.
    Identity,
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Xavier => {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-a..a))
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Identity => Tensor::from_fn(shape, |i| if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 }),
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{}.weight", name), init_tensor(&[inputs, outputs], init, rng));
        let bias = store.add(format!("{}.bias", name), Tensor::zeros(&[1, outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x: [N, in]` → `[N, out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = match tape.shape(x) {
            [n, k] if *k == self.inputs => *n,
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("input {:?} for {} -> {}", s, self.inputs, self.outputs),
                ))
            }
        };
        let y = tape.matmul(x, p[self.weight])?;
        let b = tape.broadcast_to(p[self.bias], &[n, self.outputs])?;
        tape.add(y, b)
    }
}

/// Normalization over the last axis of `[N, D]` with learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub width: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{}.gain", name), Tensor::full(&[1, width], 1.0)),
            shift: store.add(format!("{}.shift", name), Tensor::zeros(&[1, width])),
            width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} for width {}", shape, self.width),
            ));
        }
        let inv_d = 1.0 / self.width as f64;
        let s = tape.sum_axis(x, 1)?;
        let mean = tape.mul_scalar(s, inv_d)?;
        let mean = tape.broadcast_to(mean, &shape)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.sum_axis(sq, 1)?;
        let var = tape.mul_scalar(var, inv_d)?;
        let var = tape.add_scalar(var, LAYER_NORM_EPS)?;
        let inv_std = tape.powf(var, -0.5)?;
        let inv_std = tape.broadcast_to(inv_std, &shape)?;
        let normed = tape.mul(centered, inv_std)?;
        let gain = tape.broadcast_to(p[self.gain], &shape)?;
        let shift = tape.broadcast_to(p[self.shift], &shape)?;
        let scaled = tape.mul(normed, gain)?;
        tape.add(scaled, shift)
    }
}

/// 3x3 convolution with zero padding 1 over a channel-last `[H, W, C]` map,
/// lowered to an index gather plus one matrix product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3x3 {
    pub linear: Linear,
    pub inputs: usize,
    pub outputs: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv3x3 {
            linear: Linear::new(store, name, 9 * inputs, outputs, Init::Xavier, rng),
            inputs,
            outputs,
            stride,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = match tape.shape(x) {
            [h, w, c] if *c == self.inputs && *h > 0 && *w > 0 => (*h, *w),
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("{:?} for {} input channels", s, self.inputs),
                ))
            }
        };
        let (ho, wo) = self.output_size(h, w);
        let c = self.inputs;
        let mut idx = Vec::with_capacity(ho * wo * 9 * c);
        for oi in 0..ho {
            for oj in 0..wo {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let i = (oi * self.stride + ki) as isize - 1;
                        let j = (oj * self.stride + kj) as isize - 1;
                        let inside = i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((i as usize * w + j as usize) * c + ch) as u32
                            } else {
                                GATHER_PAD
                            });
                        }
                    }
                }
            }
        }
        let cols = tape.gather(x, &[ho * wo, 9 * c], idx)?;
        let y = self.linear.forward(tape, p, cols)?;
        tape.reshape(y, &[ho, wo, self.outputs])
    }
}

/// Applies a [`Linear`] to every cell of a channel-last `[H, W, C]` map.
pub fn pointwise(tape: &mut Tape, p: &Bound, lin: &Linear, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("pointwise", format!("{:?}", s)));
    }
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = lin.forward(tape, p, flat)?;
    tape.reshape(y, &[s[0], s[1], lin.outputs])
}

/// Broadcasts a `[N, 1]`-like column to `shape` through a reshape.
pub fn spread(tape: &mut Tape, x: Var, via: &[usize], shape: &[usize]) -> Result<Var> {
    let r = tape.reshape(x, via)?;
    tape.broadcast_to(r, shape)
}
