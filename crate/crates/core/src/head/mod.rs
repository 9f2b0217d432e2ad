//! The trainable OOD head.
//!
//! Inputs are fused as `[f_feat ∥ W_box·box + b ∥ W_cls·[logits ∥ onehot] + b]`
//! and passed through a three-layer MLP (ReLU, ReLU, dropout, sigmoid). The
//! output `g(x)` is an OOD-ness in `[0, 1]`.

mod checkpoint;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RawInput;
use crate::rng::{self, Rng};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use train::{
    calibrate_threshold, classify, fit, poly_lr, sgd_step, train, training_inputs, Decision,
    TrainConfig, TrainLog, CALIBRATION_TPR, MIN_CALIBRATION_SCORES,
};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Width of each encoder output.
    pub embed_dim: usize,
    pub dropout: f64,
    /// Include the box encoding in the fused vector.
    pub use_box: bool,
    /// Include the logits+class encoding in the fused vector.
    pub use_cls: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            dropout: 0.3,
            use_box: true,
            use_cls: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn box_width(&self) -> usize {
        if self.use_box {
            self.embed_dim
        } else {
            0
        }
    }

    fn cls_width(&self) -> usize {
        if self.use_cls {
            self.embed_dim
        } else {
            0
        }
    }
}

/// Affine layer with a row-major `out_dim × in_dim` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn uniform(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        for w in &mut l.weight {
            *w = rng.random_range(-bound..=bound);
        }
        l
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim.max(1)).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        if self.in_dim == 0 {
            out.copy_from_slice(&self.bias);
        } else {
            self.forward_into(x, &mut out);
        }
        out
    }

    /// Accumulates `dy ⊗ x` into the weight gradient and `dy` into the bias
    /// gradient, and returns `Wᵀ·dy` when `want_dx`.
    fn backward(&self, grad: &mut Linear, x: &[f64], dy: &[f64], want_dx: bool) -> Vec<f64> {
        let mut dx = if want_dx { vec![0.0; self.in_dim] } else { Vec::new() };
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.weight[row + i] += g * x[i];
            }
            if want_dx {
                for i in 0..self.in_dim {
                    dx[i] += g * self.weight[row + i];
                }
            }
        }
        dx
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// All trainable layers; doubles as the gradient and velocity container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layers {
    pub w_box: Linear,
    pub w_cls: Linear,
    pub mlp: [Linear; 3],
}

impl Layers {
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.in_dim, l.out_dim);
        Self {
            w_box: z(&self.w_box),
            w_cls: z(&self.w_cls),
            mlp: [z(&self.mlp[0]), z(&self.mlp[1]), z(&self.mlp[2])],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Linear> {
        [&self.w_box, &self.w_cls].into_iter().chain(self.mlp.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        [&mut self.w_box, &mut self.w_cls]
            .into_iter()
            .chain(self.mlp.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(Linear::num_params).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.iter_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodHeadParams {
    /// Feature-map channels `C`.
    pub feat_dim: usize,
    /// ID classes `K`.
    pub num_classes: usize,
    pub config: HeadConfig,
    /// Fixed input standardization; not trained.
    pub norm: InputNorm,
    pub layers: Layers,
}

impl OodHeadParams {
    /// Width `D` of the fused vector.
    pub fn fused_dim(&self) -> usize {
        self.feat_dim + self.config.box_width() + self.config.cls_width()
    }

    pub fn check_input(&self, x: &RawInput) -> Result<()> {
        let k = self.num_classes;
        if x.f_feat.len() != self.feat_dim || x.logits.len() != k || x.onehot.len() != k {
            return Err(Error::InvalidArgument(format!(
                "input has f_feat {}, logits {}, onehot {}; head expects C = {}, K = {k}",
                x.f_feat.len(),
                x.logits.len(),
                x.onehot.len(),
                self.feat_dim
            )));
        }
        Ok(())
    }
}

pub fn layer_shapes(feat_dim: usize, num_classes: usize, config: &HeadConfig) -> [(usize, usize); 5] {
    let d = feat_dim + config.box_width() + config.cls_width();
    [
        (7, config.box_width()),
        (2 * num_classes, config.cls_width()),
        (d, d / 2),
        (d / 2, d / 4),
        (d / 4, 1),
    ]
}

/// Per-component `(v - offset) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and inverse std of each column of `rows`; constant columns get scale 1.
    pub fn fit<'a>(n: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let (mut count, mut sum, mut sq) = (0usize, vec![0.0; n], vec![0.0; n]);
        for r in rows {
            count += 1;
            for i in 0..n {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if count == 0 {
            return Self::identity(n);
        }
        let c = count as f64;
        let offset: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let scale = (0..n)
            .map(|i| {
                let var = (sq[i] / c - offset[i] * offset[i]).max(0.0);
                if var.sqrt() > 1e-9 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { offset, scale }
    }

    #[inline]
    fn apply(&self, i: usize, v: f64) -> f64 {
        (v - self.offset[i]) * self.scale[i]
    }
}

/// Standardization of the raw head inputs. Being a fixed affine map that
/// feeds linear layers, it only re-conditions the optimization; the head
/// stays linear in the raw inputs up to the first nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub f_feat: Standardizer,
    pub box_vec: Standardizer,
    pub logits: Standardizer,
}

impl InputNorm {
    pub fn identity(feat_dim: usize, num_classes: usize) -> Self {
        Self {
            f_feat: Standardizer::identity(feat_dim),
            box_vec: Standardizer::identity(7),
            logits: Standardizer::identity(num_classes),
        }
    }

    pub fn fit(inputs: &[RawInput], feat_dim: usize, num_classes: usize) -> Self {
        Self {
            f_feat: Standardizer::fit(feat_dim, inputs.iter().map(|x| x.f_feat.as_slice())),
            box_vec: Standardizer::fit(7, inputs.iter().map(|x| x.box_vec.as_slice())),
            logits: Standardizer::fit(num_classes, inputs.iter().map(|x| x.logits.as_slice())),
        }
    }

    fn dims_ok(&self, feat_dim: usize, num_classes: usize) -> bool {
        let ok = |s: &Standardizer, n: usize| s.offset.len() == n && s.scale.len() == n;
        ok(&self.f_feat, feat_dim) && ok(&self.box_vec, 7) && ok(&self.logits, num_classes)
    }
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_params(
    feat_dim: usize,
    num_classes: usize,
    config: &HeadConfig,
    seed: u64,
) -> Result<OodHeadParams> {
    if feat_dim == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument("C and K must be at least 1".into()));
    }
    config.validate()?;
    let shapes = layer_shapes(feat_dim, num_classes, config);
    if shapes[4].0 == 0 {
        return Err(Error::InvalidArgument(format!(
            "fused width {} is too small for the MLP",
            shapes[2].0
        )));
    }
    let mut r = rng::stream(seed, &[rng::tag("head-init")]);
    let mut make = |(i, o): (usize, usize)| Linear::uniform(i, o, &mut r);
    let w_box = make(shapes[0]);
    let w_cls = make(shapes[1]);
    let mlp = [make(shapes[2]), make(shapes[3]), make(shapes[4])];
    Ok(OodHeadParams {
        feat_dim,
        num_classes,
        config: config.clone(),
        norm: InputNorm::identity(feat_dim, num_classes),
        layers: Layers {
            w_box,
            w_cls,
            mlp,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cls_in: Vec<f64>,
    box_in: [f64; 7],
    fused: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    /// Per-unit multiplier: 0 for dropped units, `1/(1-p)` for kept ones.
    mask: Vec<f64>,
    dropped: Vec<f64>,
    pub logit: f64,
    pub score: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Draws an inverted-dropout mask of `len` units.
pub fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if p > 0.0 && rng.random_bool(p) { 0.0 } else { keep })
        .collect()
}

/// Forward pass with an explicit dropout mask (`None` means eval mode).
pub fn forward_masked(
    params: &OodHeadParams,
    input: &RawInput,
    mask: Option<&[f64]>,
) -> Result<ForwardCache> {
    params.check_input(input)?;
    let l = &params.layers;
    let n = &params.norm;
    let box_in: [f64; 7] = std::array::from_fn(|i| n.box_vec.apply(i, input.box_vec[i]));
    let mut cls_in = Vec::with_capacity(2 * params.num_classes);
    cls_in.extend(input.logits.iter().enumerate().map(|(i, v)| n.logits.apply(i, *v)));
    cls_in.extend_from_slice(&input.onehot);
    let mut fused = Vec::with_capacity(params.fused_dim());
    fused.extend(input.f_feat.iter().enumerate().map(|(i, v)| n.f_feat.apply(i, *v)));
    fused.extend(l.w_box.forward(&box_in));
    fused.extend(l.w_cls.forward(&cls_in));

    let a1 = l.mlp[0].forward(&fused);
    let h1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
    let a2 = l.mlp[1].forward(&h1);
    let mask = match mask {
        Some(m) => {
            if m.len() != a2.len() {
                return Err(Error::InvalidArgument(format!(
                    "dropout mask has {} units, layer has {}",
                    m.len(),
                    a2.len()
                )));
            }
            m.to_vec()
        }
        None => vec![1.0; a2.len()],
    };
    let dropped: Vec<f64> = a2.iter().zip(&mask).map(|(a, m)| a.max(0.0) * m).collect();
    let logit = l.mlp[2].forward(&dropped)[0];
    Ok(ForwardCache {
        cls_in,
        box_in,
        fused,
        a1,
        h1,
        a2,
        mask,
        dropped,
        logit,
        score: sigmoid(logit),
    })
}

/// `rng` is only consumed in train mode.
pub fn forward(
    params: &OodHeadParams,
    input: &RawInput,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardCache> {
    match mode {
        Mode::Eval => forward_masked(params, input, None),
        Mode::Train => {
            let units = params.layers.mlp[1].out_dim;
            let mask = dropout_mask(units, params.config.dropout, rng);
            forward_masked(params, input, Some(&mask))
        }
    }
}

/// Eval-mode OOD score `g(x)`.
pub fn score(params: &OodHeadParams, input: &RawInput) -> Result<f64> {
    Ok(forward_masked(params, input, None)?.score)
}

pub fn bce_loss(score: f64, label: bool) -> f64 {
    let s = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Adds the gradient of `bce_loss(sigmoid(z), label)` into `grads`, using
/// `dL/dz = s - y`.
pub fn backward_into(params: &OodHeadParams, cache: &ForwardCache, label: bool, grads: &mut Layers) {
    let l = &params.layers;
    let dz = cache.score - if label { 1.0 } else { 0.0 };
    let d_dropped = l.mlp[2].backward(&mut grads.mlp[2], &cache.dropped, &[dz], true);
    let da2: Vec<f64> = d_dropped
        .iter()
        .zip(&cache.mask)
        .zip(&cache.a2)
        .map(|((g, m), a)| if *a > 0.0 { g * m } else { 0.0 })
        .collect();
    let dh1 = l.mlp[1].backward(&mut grads.mlp[1], &cache.h1, &da2, true);
    let da1: Vec<f64> = dh1
        .iter()
        .zip(&cache.a1)
        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
        .collect();
    let dfused = l.mlp[0].backward(&mut grads.mlp[0], &cache.fused, &da1, true);
    let c = params.feat_dim;
    let eb = l.w_box.out_dim;
    l.w_box
        .backward(&mut grads.w_box, &cache.box_in, &dfused[c..c + eb], false);
    l.w_cls
        .backward(&mut grads.w_cls, &cache.cls_in, &dfused[c + eb..], false);
}

pub fn backward(params: &OodHeadParams, cache: &ForwardCache, label: bool) -> Layers {
    let mut g = params.layers.zeros_like();
    backward_into(params, cache, label, &mut g);
    g
}
