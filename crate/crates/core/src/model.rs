//! Toy detector: strided convolution backbone, channel mapper, stacked
//! decoder layers with query refinement, and prediction heads.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    CrossAttentionConfig, FeaturePyramid, OrientedCrossAttention, SelfAttentionConfig, WassersteinSelfAttention,
};
use crate::encoding::PEConfig;
use crate::error::{Error, Result};
use crate::geometry::{fold_angle, OrientedBox};
use crate::nn::{pointwise, Conv3x3, Init, LayerNorm, Linear};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Initial class probability; sets the classification bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `D`.
    pub width: usize,
    /// Query count `N`.
    pub queries: usize,
    /// Decoder layers.
    pub depth: usize,
    pub classes: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    pub points: usize,
    pub eta: f64,
    /// Pyramid strides, finest first; adjacent levels differ by 2.
    pub strides: Vec<usize>,
    pub pe_freqs: usize,
    pub pe_temperature: f64,
    pub ffn_width: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    /// Stop gradients through positional queries between layers.
    pub detach_boxes: bool,
}

impl ModelConfig {
    /// Small settings used for quick runs and tests.
    pub fn toy() -> Self {
        ModelConfig {
            width: 64,
            queries: 30,
            depth: 2,
            classes: 3,
            self_heads: 4,
            cross_heads: 4,
            points: 8,
            eta: 2.0,
            strides: vec![8, 16, 32, 64],
            pe_freqs: 16,
            pe_temperature: 10000.0,
            ffn_width: 128,
            backbone_channels: vec![16, 32, 64, 64, 64, 64],
            detach_boxes: true,
        }
    }

    /// Full-width settings.
    pub fn full() -> Self {
        ModelConfig {
            width: 256,
            queries: 300,
            depth: 6,
            classes: 15,
            self_heads: 8,
            cross_heads: 64,
            points: 32,
            eta: 2.0,
            strides: vec![8, 16, 32, 64],
            pe_freqs: 64,
            pe_temperature: 10000.0,
            ffn_width: 1024,
            backbone_channels: vec![32, 64, 128, 256, 256, 256],
            detach_boxes: true,
        }
    }

    pub fn self_attention(&self) -> SelfAttentionConfig {
        SelfAttentionConfig { heads: self.self_heads }
    }

    pub fn cross_attention(&self) -> CrossAttentionConfig {
        CrossAttentionConfig {
            heads: self.cross_heads,
            points: self.points,
            eta: self.eta,
            strides: self.strides.clone(),
        }
    }

    pub fn pe(&self) -> PEConfig {
        PEConfig {
            temperature: self.pe_temperature,
            freqs: self.pe_freqs,
        }
    }

    pub fn max_stride(&self) -> usize {
        self.strides.last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.queries == 0 || self.depth == 0 || self.classes == 0 || self.ffn_width == 0 {
            return fail("width, queries, depth, classes and ffn_width must be positive".into());
        }
        self.self_attention().head_dim(self.width)?;
        self.cross_attention().validate(self.width)?;
        self.pe().validate()?;
        let first = self.strides[0];
        if !first.is_power_of_two() || first < 2 {
            return fail(format!("first stride {} is not a power of two above 1", first));
        }
        if self.strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return fail(format!("adjacent strides must differ by 2: {:?}", self.strides));
        }
        let stages = self.max_stride().trailing_zeros() as usize;
        if self.backbone_channels.len() != stages || self.backbone_channels.contains(&0) {
            return fail(format!(
                "{} backbone stages needed for stride {}, got {:?}",
                stages,
                self.max_stride(),
                self.backbone_channels
            ));
        }
        Ok(())
    }
}

/// Content and positional queries: `qc: [N, D]`, `qp: [N, 5]` of
/// `(x, y, z, r, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySet {
    pub qc: Var,
    pub qp: Var,
}

/// One decoder layer's output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerPrediction {
    pub layer: usize,
    /// `[N, C]` logits.
    pub logits: Var,
    /// `[N, 5]` boxes `(cx, cy, w, h, θ)`.
    pub boxes: Var,
    /// `[N, 5]` refined queries `(x, y, z, r, θ)`.
    pub queries: Var,
}

/// Grid of initial positional queries: `ceil(sqrt N)` columns, row-major,
/// each covering its cell.
pub fn grid_queries(n: usize, width: f64, height: f64) -> Vec<[f64; 5]> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (cw, ch) = (width / cols as f64, height / rows as f64);
    let z = (cw * ch).sqrt().log2();
    (0..n)
        .map(|i| {
            [
                ((i % cols) as f64 + 0.5) * cw,
                ((i / cols) as f64 + 0.5) * ch,
                z,
                0.0,
                0.0,
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Backbone {
    stages: Vec<Conv3x3>,
    mappers: Vec<Linear>,
    /// Index of the first stage that feeds the pyramid.
    first_level: usize,
}

impl Backbone {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.backbone_channels.iter().enumerate() {
            stages.push(Conv3x3::new(store, &format!("backbone.stage{}", i), cin, c, 2, rng));
            cin = c;
        }
        let first_level = cfg.strides[0].trailing_zeros() as usize - 1;
        let mappers = (first_level..stages.len())
            .map(|i| {
                let c = cfg.backbone_channels[i];
                Linear::new(
                    store,
                    &format!("mapper.level{}", i - first_level),
                    c,
                    cfg.width,
                    Init::Xavier,
                    rng,
                )
            })
            .collect();
        Backbone {
            stages,
            mappers,
            first_level,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let centered = tape.add_scalar(image, -0.5)?;
        let mut x = centered;
        let mut levels = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let y = stage.forward(tape, p, x)?;
            x = tape.relu(y)?;
            if i >= self.first_level {
                levels.push(pointwise(tape, p, &self.mappers[i - self.first_level], x)?);
            }
        }
        Ok(levels)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    self_attn: WassersteinSelfAttention,
    norm1: LayerNorm,
    cross_attn: OrientedCrossAttention,
    norm2: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm3: LayerNorm,
    cls: Linear,
    box_hidden: [Linear; 2],
    box_out: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, index: usize, rng: &mut impl Rng) -> Result<Self> {
        let name = |s: &str| format!("decoder{}.{}", index, s);
        let d = cfg.width;
        let cls = Linear::new(store, &name("cls"), d, cfg.classes, Init::Xavier, rng);
        let prior = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        store.get_mut(cls.bias).data_mut().fill(prior);
        Ok(DecoderLayer {
            self_attn: WassersteinSelfAttention::new(
                store,
                &name("self_attn"),
                d,
                cfg.self_attention(),
                cfg.pe(),
                rng,
            )?,
            norm1: LayerNorm::new(store, &name("norm1"), d),
            cross_attn: OrientedCrossAttention::new(store, &name("cross_attn"), d, cfg.cross_attention(), rng)?,
            norm2: LayerNorm::new(store, &name("norm2"), d),
            ffn_in: Linear::new(store, &name("ffn_in"), d, cfg.ffn_width, Init::Xavier, rng),
            ffn_out: Linear::new(store, &name("ffn_out"), cfg.ffn_width, d, Init::Xavier, rng),
            norm3: LayerNorm::new(store, &name("norm3"), d),
            cls,
            box_hidden: [
                Linear::new(store, &name("box0"), d, d, Init::Xavier, rng),
                Linear::new(store, &name("box1"), d, d, Init::Xavier, rng),
            ],
            box_out: Linear::new(store, &name("box2"), d, 5, Init::Zeros, rng),
        })
    }

    /// Returns the updated content queries and this layer's prediction.
    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        qs: QuerySet,
        fp: &FeaturePyramid,
        layer: usize,
    ) -> Result<(Var, LayerPrediction)> {
        let sa = self.self_attn.forward(tape, p, qs.qc, qs.qp)?.output;
        let x = tape.add(qs.qc, sa)?;
        let x = self.norm1.forward(tape, p, x)?;
        let ca = self.cross_attn.forward(tape, p, x, qs.qp, fp)?.output;
        let x = tape.add(x, ca)?;
        let x = self.norm2.forward(tape, p, x)?;
        let h = self.ffn_in.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let f = self.ffn_out.forward(tape, p, h)?;
        let x = tape.add(x, f)?;
        let qc = self.norm3.forward(tape, p, x)?;

        let logits = self.cls.forward(tape, p, qc)?;
        let mut h = qc;
        for lin in &self.box_hidden {
            let y = lin.forward(tape, p, h)?;
            h = tape.relu(y)?;
        }
        let delta = self.box_out.forward(tape, p, h)?;
        let queries = refine(tape, qs.qp, delta)?;
        let boxes = query_boxes(tape, queries)?;
        Ok((
            qc,
            LayerPrediction {
                layer,
                logits,
                boxes,
                queries,
            },
        ))
    }
}

/// Applies `[N, 5]` deltas to `(x, y, z, r, θ)` queries: centers move by
/// `Δ 2^z`, the rest is additive; the angle is then folded back into
/// `[-π/2, π/2)`, negating `r` whenever width and height swap.
pub fn refine(tape: &mut Tape, qp: Var, delta: Var) -> Result<Var> {
    let n = tape.shape(qp)[0];
    if tape.shape(delta) != [n, 5] {
        return Err(Error::shape(
            "refine",
            format!("delta {:?} for {} queries", tape.shape(delta), n),
        ));
    }
    let z = tape.slice(qp, 1, 2, 3)?;
    let zl = tape.mul_scalar(z, LN_2)?;
    let scale = tape.exp(zl)?;
    let scale = tape.broadcast_to(scale, &[n, 2])?;
    let dxy = tape.slice(delta, 1, 0, 2)?;
    let step = tape.mul(dxy, scale)?;
    let xy = tape.slice(qp, 1, 0, 2)?;
    let xy = tape.add(xy, step)?;
    let rest = tape.slice(qp, 1, 2, 5)?;
    let drest = tape.slice(delta, 1, 2, 5)?;
    let rest = tape.add(rest, drest)?;

    let raw = tape.value(rest).data().to_vec();
    let mut shift = vec![0.0; n * 3];
    let mut sign = vec![1.0; n * 3];
    for i in 0..n {
        let theta = raw[i * 3 + 2];
        let (k, swap) = quarter_turns(theta);
        shift[i * 3 + 2] = -(k as f64) * FRAC_PI_2;
        if swap {
            sign[i * 3 + 1] = -1.0;
        }
    }
    let sign = tape.constant(Tensor::new(&[n, 3], sign)?);
    let shift = tape.constant(Tensor::new(&[n, 3], shift)?);
    let rest = tape.mul(rest, sign)?;
    let rest = tape.add(rest, shift)?;
    tape.concat(&[xy, rest], 1)
}

/// Quarter turns `k` such that `θ − kπ/2` (as evaluated in `f64`) lies in
/// `[-π/2, π/2)`, and whether `k` is odd.
fn quarter_turns(theta: f64) -> (i64, bool) {
    let (folded, _) = fold_angle(theta);
    let mut k = ((theta - folded) / FRAC_PI_2).round() as i64;
    loop {
        let t = theta + -(k as f64) * FRAC_PI_2;
        if t >= FRAC_PI_2 {
            k += 1;
        } else if t < -FRAC_PI_2 {
            k -= 1;
        } else {
            return (k, k.rem_euclid(2) == 1);
        }
    }
}

/// `(x, y, z, r, θ)` rows to `(cx, cy, w, h, θ)` with `w = 2^(z − r/2)`,
/// `h = 2^(z + r/2)`.
pub fn query_boxes(tape: &mut Tape, qp: Var) -> Result<Var> {
    let xy = tape.slice(qp, 1, 0, 2)?;
    let z = tape.slice(qp, 1, 2, 3)?;
    let r = tape.slice(qp, 1, 3, 4)?;
    let theta = tape.slice(qp, 1, 4, 5)?;
    let half_r = tape.mul_scalar(r, 0.5)?;
    let lw = tape.sub(z, half_r)?;
    let lh = tape.add(z, half_r)?;
    let lw = tape.mul_scalar(lw, LN_2)?;
    let lh = tape.mul_scalar(lh, LN_2)?;
    let w = tape.exp(lw)?;
    let h = tape.exp(lh)?;
    tape.concat(&[xy, w, h, theta], 1)
}

/// A scored box from the final decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: OrientedBox,
}

/// The detector with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    content: ParamId,
    layers: Vec<DecoderLayer>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &cfg, &mut rng);
        let content = params.add(
            "queries.content",
            Tensor::from_fn(&[cfg.queries, cfg.width], |_| rng.random_range(-1.0..1.0)),
        );
        let layers = (0..cfg.depth)
            .map(|i| DecoderLayer::new(&mut params, &cfg, i, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Model {
            cfg,
            params,
            backbone,
            content,
            layers,
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let s = self.cfg.max_stride();
        match shape {
            [h, w, 3] if *h > 0 && *w > 0 && h % s == 0 && w % s == 0 => Ok((*h, *w)),
            _ => Err(Error::shape(
                "model input",
                format!("image {:?} must be [H, W, 3] with H and W divisible by {}", shape, s),
            )),
        }
    }

    /// Feature pyramid of an `[H, W, 3]` image with values in `[0, 1]`.
    pub fn pyramid(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        self.check_image(tape.shape(image))?;
        Ok(FeaturePyramid {
            levels: self.backbone.forward(tape, p, image)?,
            strides: self.cfg.strides.clone(),
        })
    }

    /// Learned content queries and the grid of positional queries.
    pub fn init_queries(&self, tape: &mut Tape, p: &Bound, height: usize, width: usize) -> Result<QuerySet> {
        let grid = grid_queries(self.cfg.queries, width as f64, height as f64);
        let qp = tape.constant(Tensor::new(&[grid.len(), 5], grid.concat())?);
        Ok(QuerySet {
            qc: p[self.content],
            qp,
        })
    }

    /// One prediction per decoder layer.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Vec<LayerPrediction>> {
        let (h, w) = self.check_image(tape.shape(image))?;
        let fp = self.pyramid(tape, p, image)?;
        let mut qs = self.init_queries(tape, p, h, w)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (qc, pred) = layer.forward(tape, p, qs, &fp, i)?;
            let qp = if self.cfg.detach_boxes {
                tape.detach(pred.queries)
            } else {
                pred.queries
            };
            qs = QuerySet { qc, qp };
            out.push(pred);
        }
        Ok(out)
    }

    /// Final-layer detections: the `max_detections` (at most `N`) best
    /// query/class pairs by sigmoid score. No suppression step.
    pub fn infer(&self, image: &Tensor, max_detections: usize) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let img = tape.constant(image.clone());
        let preds = self.forward(&mut tape, &p, img)?;
        let last = preds.last().expect("depth >= 1");
        Ok(top_detections(
            tape.value(last.logits),
            tape.value(last.boxes),
            max_detections.min(self.cfg.queries),
        ))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Writes the parameters to `path` and the hyperparameters to
    /// [`config_sidecar`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let text = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let side = config_sidecar(path);
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let cfg: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {}", side.display(), e)))?;
        let mut model = Model::new(cfg, 0).map_err(|e| Error::Checkpoint(format!("{}: {}", side.display(), e)))?;
        model.params.load(path)?;
        Ok(model)
    }
}

/// `<checkpoint>.toml`.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Best `k` query/class pairs; ties keep the lower flat index.
pub fn top_detections(logits: &Tensor, boxes: &Tensor, k: usize) -> Vec<Detection> {
    let c = logits.shape()[1];
    let mut order: Vec<usize> = (0..logits.len()).collect();
    let scores: Vec<f64> = logits.data().iter().map(|&l| crate::numerics::sigmoid(l)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|flat| {
            let row = boxes.row(flat / c);
            Detection {
                class: flat % c,
                score: scores[flat],
                bbox: OrientedBox::from_array(row.try_into().expect("5 columns")),
            }
        })
        .collect()
}
