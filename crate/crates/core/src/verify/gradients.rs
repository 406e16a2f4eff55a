//! Registry of differentiable operations checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{focal_loss, total_loss, FocalParams, LossWeights, Target};
use crate::attention::{
    CrossAttentionConfig, FeaturePyramid, OrientedCrossAttention, SelfAttentionConfig, WassersteinSelfAttention,
};
use crate::encoding::{gaussian_pe_rows, PEConfig};
use crate::error::Result;
use crate::geometry::ops::{rotated_iou_rows, wasserstein_score_matrix};
use crate::geometry::OrientedBox;
use crate::model::{query_boxes, refine, Model, ModelConfig};
use crate::nn::{Conv3x3, Init, LayerNorm, Linear};
use crate::numerics::{finite_difference_at, relative_error, Bound, ParamStore, Tape, Tensor, Var, GATHER_PAD};

pub const FD_STEP: f64 = 1e-5;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync>;
type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One registered function of tensors to be differentiated.
pub struct GradCase {
    pub name: &'static str,
    /// Random instances to draw.
    pub instances: usize,
    inputs: Inputs,
    build: Build,
}

impl GradCase {
    fn new(
        name: &'static str,
        instances: usize,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync + 'static,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            name,
            instances,
            inputs: Box::new(inputs),
            build: Box::new(build),
        }
    }

    /// Norm-wise relative error between the tape gradient and central
    /// differences of `Σ y ⊙ R` for a random fixed `R`, over all inputs.
    pub fn relative_error(&self, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (self.inputs)(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = (self.build)(&mut tape, &vars)?;
        let probe = Tensor::from_fn(tape.shape(y), |_| rng.random_range(-1.0..1.0));
        let pv = tape.constant(probe.clone());
        let prod = tape.mul(y, pv)?;
        let loss = tape.sum(prod)?;
        tape.backward(loss)?;
        let mut analytic = Vec::new();
        for (v, t) in vars.iter().zip(&inputs) {
            match tape.grad(*v) {
                Some(g) => analytic.extend_from_slice(g.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs.len() {
            let mut f = |x: &Tensor| -> Result<f64> {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| tape.constant(if i == k { x.clone() } else { t.clone() }))
                    .collect();
                let y = (self.build)(&mut tape, &vars)?;
                Ok(tape.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
            };
            let g = finite_difference_at(&mut f, &inputs[k], FD_STEP, 0..inputs[k].len())?;
            numeric.extend_from_slice(g.data());
        }
        Ok(relative_error(&analytic, &numeric))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Query rows `(x, y, z, r, θ)` away from angle folds.
fn query_rows(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Tensor {
    let mut v = Vec::with_capacity(n * 5);
    for _ in 0..n {
        v.push(rng.random_range(0.2 * extent..0.8 * extent));
        v.push(rng.random_range(0.2 * extent..0.8 * extent));
        v.push(rng.random_range(1.5..3.5));
        v.push(rng.random_range(-0.8..0.8));
        v.push(rng.random_range(-1.3..1.3));
    }
    Tensor::new(&[n, 5], v).expect("shape")
}

/// Coordinates with fractional parts away from the bilinear cell borders.
fn off_grid(rng: &mut ChaCha8Rng, shape: &[usize], lo: i32, hi: i32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f64 + rng.random_range(0.1..0.9))
}

fn with_params(inputs: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    inputs
        .into_iter()
        .chain(store.ids().map(|id| store.get(id).clone()))
        .collect()
}

fn bound(vars: &[Var]) -> Bound {
    Bound::from_vars(vars.to_vec())
}

const MODULE_SEED: u64 = 17;

fn layer_norm_module() -> (ParamStore, LayerNorm) {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    (store, ln)
}

fn linear_module() -> (ParamStore, Linear) {
    let mut store = ParamStore::new();
    let lin = Linear::new(
        &mut store,
        "lin",
        4,
        3,
        Init::Xavier,
        &mut ChaCha8Rng::seed_from_u64(MODULE_SEED),
    );
    (store, lin)
}

fn conv_module() -> (ParamStore, Conv3x3) {
    let mut store = ParamStore::new();
    let conv = Conv3x3::new(&mut store, "conv", 2, 3, 2, &mut ChaCha8Rng::seed_from_u64(MODULE_SEED));
    (store, conv)
}

fn self_attention_module() -> (ParamStore, WassersteinSelfAttention) {
    let mut store = ParamStore::new();
    let m = WassersteinSelfAttention::new(
        &mut store,
        "sa",
        8,
        SelfAttentionConfig { heads: 2 },
        PEConfig {
            temperature: 100.0,
            freqs: 2,
        },
        &mut ChaCha8Rng::seed_from_u64(MODULE_SEED),
    )
    .expect("valid module");
    (store, m)
}

fn cross_attention_module() -> (ParamStore, OrientedCrossAttention) {
    let mut store = ParamStore::new();
    let cfg = CrossAttentionConfig {
        heads: 2,
        points: 4,
        eta: 2.0,
        strides: vec![8, 16],
    };
    let m = OrientedCrossAttention::new(&mut store, "ca", 8, cfg, &mut ChaCha8Rng::seed_from_u64(MODULE_SEED))
        .expect("valid module");
    (store, m)
}

/// Two-layer settings with `N = 3`, `D = 8`, `g = 2`, `O = 4` and two
/// pyramid levels. Positional queries stay attached across layers so the
/// whole graph is differentiable.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        width: 8,
        queries: 3,
        depth: 2,
        classes: 2,
        self_heads: 2,
        cross_heads: 2,
        points: 4,
        eta: 2.0,
        strides: vec![8, 16],
        pe_freqs: 2,
        pe_temperature: 100.0,
        ffn_width: 16,
        backbone_channels: vec![4, 4, 8, 8],
        detach_boxes: false,
    }
}

pub const TINY_IMAGE: usize = 32;

fn tiny_targets() -> Vec<Target> {
    vec![
        Target {
            class: 0,
            bbox: OrientedBox::new(10.0, 12.0, 12.0, 6.0, 0.3).expect("valid"),
        },
        Target {
            class: 1,
            bbox: OrientedBox::new(22.0, 20.0, 9.0, 7.0, -0.5).expect("valid"),
        },
    ]
}

fn tiny_image() -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(MODULE_SEED);
    uniform(&mut rng, &[TINY_IMAGE, TINY_IMAGE, 3], 0.0, 1.0)
}

/// Every registered case.
pub fn registry() -> Vec<GradCase> {
    let mut cases = vec![
        GradCase::new(
            "add",
            5,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| t.add(v[0], v[1]),
        ),
        GradCase::new(
            "sub",
            5,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| t.sub(v[0], v[1]),
        ),
        GradCase::new(
            "mul",
            5,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| t.mul(v[0], v[1]),
        ),
        GradCase::new(
            "add_scalar",
            5,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| t.add_scalar(v[0], 0.7),
        ),
        GradCase::new(
            "mul_scalar",
            5,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| t.mul_scalar(v[0], -1.3),
        ),
        GradCase::new("sin", 5, |r| vec![uniform(r, &[3, 4], -3.0, 3.0)], |t, v| t.sin(v[0])),
        GradCase::new("cos", 5, |r| vec![uniform(r, &[3, 4], -3.0, 3.0)], |t, v| t.cos(v[0])),
        GradCase::new("exp", 5, |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], |t, v| t.exp(v[0])),
        GradCase::new("log", 5, |r| vec![uniform(r, &[3, 4], 0.3, 3.0)], |t, v| t.log(v[0])),
        GradCase::new("sqrt", 5, |r| vec![uniform(r, &[3, 4], 0.3, 3.0)], |t, v| t.sqrt(v[0])),
        GradCase::new(
            "powf",
            5,
            |r| vec![uniform(r, &[3, 4], 0.3, 3.0)],
            |t, v| t.powf(v[0], -0.5),
        ),
        GradCase::new(
            "sigmoid",
            5,
            |r| vec![uniform(r, &[3, 4], -4.0, 4.0)],
            |t, v| t.sigmoid(v[0]),
        ),
        GradCase::new("relu", 5, |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.relu(v[0])),
        GradCase::new("abs", 5, |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.abs(v[0])),
        GradCase::new(
            "matmul",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        GradCase::new(
            "matmul_batched",
            5,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 4, 2], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        GradCase::new(
            "softmax",
            5,
            |r| vec![uniform(r, &[3, 5], -3.0, 3.0)],
            |t, v| t.softmax(v[0]),
        ),
        GradCase::new(
            "reshape",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| t.reshape(v[0], &[2, 6]),
        ),
        GradCase::new(
            "permute",
            5,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |t, v| t.permute(v[0], &[2, 0, 1]),
        ),
        GradCase::new(
            "transpose",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| t.transpose(v[0]),
        ),
        GradCase::new(
            "concat",
            5,
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        GradCase::new(
            "slice",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| t.slice(v[0], 1, 1, 3),
        ),
        GradCase::new(
            "broadcast_to",
            5,
            |r| vec![uniform(r, &[1, 4], -1.0, 1.0)],
            |t, v| t.broadcast_to(v[0], &[3, 4]),
        ),
        GradCase::new(
            "sum_axis",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| t.sum_axis(v[0], 0),
        ),
        GradCase::new("sum", 5, |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.sum(v[0])),
        GradCase::new("mean", 5, |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.mean(v[0])),
        GradCase::new(
            "bilinear_gather",
            5,
            |r| vec![uniform(r, &[4, 5, 4], -1.0, 1.0), off_grid(r, &[2, 2, 3, 2], -1, 5)],
            |t, v| t.bilinear_gather(v[0], v[1]),
        ),
        GradCase::new(
            "gather",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| t.gather(v[0], &[2, 3], vec![0, 5, GATHER_PAD, 11, 5, 7]),
        ),
        GradCase::new(
            "select_rows",
            5,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| t.select_rows(v[0], &[2, 0, 2]),
        ),
        GradCase::new(
            "gaussian_pe_rows",
            5,
            |r| vec![query_rows(r, 3, 64.0)],
            |t, v| {
                gaussian_pe_rows(
                    t,
                    v[0],
                    &PEConfig {
                        temperature: 100.0,
                        freqs: 4,
                    },
                )
            },
        ),
        GradCase::new(
            "wasserstein_score_matrix",
            5,
            |r| vec![query_rows(r, 4, 64.0)],
            |t, v| wasserstein_score_matrix(t, v[0]),
        ),
        GradCase::new(
            "rotated_iou_rows",
            5,
            |r| {
                let rows: Vec<f64> = (0..3)
                    .flat_map(|i| {
                        [
                            10.0 * i as f64 + r.random_range(-1.0..1.0),
                            r.random_range(-1.0..1.0),
                            r.random_range(4.0..6.0),
                            r.random_range(2.0..3.0),
                            r.random_range(-0.4..0.4),
                        ]
                    })
                    .collect();
                vec![Tensor::new(&[3, 5], rows).expect("shape")]
            },
            |t, v| {
                let targets: Vec<OrientedBox> = (0..3)
                    .map(|i| OrientedBox::new(10.0 * i as f64, 0.5, 5.0, 2.5, 0.2).expect("valid"))
                    .collect();
                rotated_iou_rows(t, v[0], &targets)
            },
        ),
        GradCase::new(
            "focal_loss",
            5,
            |r| vec![uniform(r, &[3, 4], -4.0, 4.0)],
            |t, v| focal_loss(t, v[0], &[Some(1), None, Some(3)], &FocalParams::default()),
        ),
        GradCase::new(
            "refine",
            5,
            |r| vec![query_rows(r, 3, 64.0), uniform(r, &[3, 5], -0.2, 0.2)],
            |t, v| refine(t, v[0], v[1]),
        ),
        GradCase::new(
            "query_boxes",
            5,
            |r| vec![query_rows(r, 3, 64.0)],
            |t, v| query_boxes(t, v[0]),
        ),
    ];
    cases.push(GradCase::new(
        "linear",
        3,
        |r| with_params(vec![uniform(r, &[3, 4], -1.0, 1.0)], &linear_module().0),
        |t, v| {
            let (_, lin) = linear_module();
            lin.forward(t, &bound(&v[1..]), v[0])
        },
    ));
    cases.push(GradCase::new(
        "layer_norm",
        3,
        |r| {
            let (mut store, ln) = layer_norm_module();
            *store.get_mut(ln.gain) = uniform(r, &[1, 6], 0.5, 1.5);
            *store.get_mut(ln.shift) = uniform(r, &[1, 6], -0.5, 0.5);
            with_params(vec![uniform(r, &[3, 6], -2.0, 2.0)], &store)
        },
        |t, v| {
            let (_, ln) = layer_norm_module();
            ln.forward(t, &bound(&v[1..]), v[0])
        },
    ));
    cases.push(GradCase::new(
        "conv3x3",
        3,
        |r| with_params(vec![uniform(r, &[5, 4, 2], -1.0, 1.0)], &conv_module().0),
        |t, v| {
            let (_, conv) = conv_module();
            conv.forward(t, &bound(&v[1..]), v[0])
        },
    ));
    cases.push(GradCase::new(
        "wasserstein_self_attention",
        3,
        |r| {
            with_params(
                vec![uniform(r, &[3, 8], -1.0, 1.0), query_rows(r, 3, 64.0)],
                &self_attention_module().0,
            )
        },
        |t, v| {
            let (_, m) = self_attention_module();
            Ok(m.forward(t, &bound(&v[2..]), v[0], v[1])?.output)
        },
    ));
    cases.push(GradCase::new(
        "oriented_cross_attention",
        3,
        |r| {
            let (mut store, m) = cross_attention_module();
            // non-zero offset weights so content queries move the points
            *store.get_mut(m.offsets.weight) = uniform(r, &[8, 24], -0.3, 0.3);
            with_params(
                vec![
                    uniform(r, &[3, 8], -1.0, 1.0),
                    query_rows(r, 3, 64.0),
                    uniform(r, &[8, 8, 8], -1.0, 1.0),
                    uniform(r, &[4, 4, 8], -1.0, 1.0),
                ],
                &store,
            )
        },
        |t, v| {
            let (_, m) = cross_attention_module();
            let fp = FeaturePyramid {
                levels: vec![v[2], v[3]],
                strides: vec![8, 16],
            };
            Ok(m.forward(t, &bound(&v[4..]), v[0], v[1], &fp)?.output)
        },
    ));
    cases.push(tiny_model_case());
    cases
}

/// The two-layer decoder with its detection loss, differentiated with
/// respect to every parameter.
pub fn tiny_model_case() -> GradCase {
    GradCase::new(
        "decoder_with_loss",
        1,
        |r| {
            let mut model = Model::new(tiny_model_config(), MODULE_SEED).expect("valid config");
            // zero-initialized heads would hide the box path; perturb them
            let ids: Vec<_> = model.params.ids().collect();
            for id in ids {
                if model.params.get(id).data().iter().all(|&x| x == 0.0) {
                    let shape = model.params.get(id).shape().to_vec();
                    *model.params.get_mut(id) = uniform(r, &shape, -0.05, 0.05);
                }
            }
            model.params.ids().map(|id| model.params.get(id).clone()).collect()
        },
        |t, v| {
            let model = Model::new(tiny_model_config(), MODULE_SEED)?;
            let p = bound(v);
            let image = t.constant(tiny_image());
            let preds = model.forward(t, &p, image)?;
            let loss = total_loss(
                t,
                &preds,
                &tiny_targets(),
                (TINY_IMAGE as f64, TINY_IMAGE as f64),
                &LossWeights::default(),
                &FocalParams::default(),
            )?;
            Ok(loss.total)
        },
    )
}
