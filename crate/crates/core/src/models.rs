//! Classifier and forecaster heads, input fusion, and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{Encoder, EncoderConfig};
use crate::autodiff::{Tape, Var};
use crate::baseline::{VanillaConfig, VanillaModel};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, mean_sq_dist, Dense, Mlp2};
use crate::params::{Bound, ParamSet};
use crate::rng::SplitMix64;
use crate::rotation::Rotation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vn::{vn_dims, vn_mean_pool, VnInvariant, VnLinear};

/// How non-spatial attributes enter a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Attributes appended to each point, widening vectors to `3 + d_A`.
    #[serde(rename = "early")]
    EarlyFusion,
    /// Attributes merged after the invariant readout.
    #[serde(rename = "late")]
    LateFusion,
    /// Attributes ignored.
    #[serde(rename = "spatial")]
    SpatialOnly,
}

impl FusionMode {
    pub fn width(self, d_a: usize) -> usize {
        match self {
            FusionMode::EarlyFusion => 3 + d_a,
            _ => 3,
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionMode::EarlyFusion),
            "late" => Ok(FusionMode::LateFusion),
            "spatial" => Ok(FusionMode::SpatialOnly),
            _ => Err(Error::config(format!("unknown fusion mode {s:?} (early, late, spatial)"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::EarlyFusion => "early",
            FusionMode::LateFusion => "late",
            FusionMode::SpatialOnly => "spatial",
        })
    }
}

/// Supervision attached to a cloud.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    None,
    /// 0-based class index.
    Class(usize),
    /// Future positions, `[T_out, 3]`.
    Trajectory(Tensor<f64>),
}

/// Points with per-point attributes and a target.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedPointCloud {
    /// `[N, 3]`.
    pub points: Tensor<f64>,
    /// `[N, d_A]`.
    pub attrs: Tensor<f64>,
    pub target: Target,
    /// Free-form numeric annotations (for example the polka-dot radius).
    pub meta: Vec<(String, f64)>,
}

impl AttributedPointCloud {
    pub fn new(points: Tensor<f64>, attrs: Tensor<f64>, target: Target) -> Result<Self> {
        let n = match points.shape() {
            [n, 3] if *n >= 1 => *n,
            [0, 3] => return Err(Error::EmptyInput("point cloud")),
            s => return Err(Error::Shape(format!("points must be [N, 3], got {s:?}"))),
        };
        if attrs.rank() != 2 || attrs.shape()[0] != n {
            return Err(Error::dim("attributes", attrs.shape(), points.shape()));
        }
        if let Target::Trajectory(t) = &target {
            if t.rank() != 2 || t.shape()[1] != 3 {
                return Err(Error::Shape(format!("trajectory target must be [T, 3], got {:?}", t.shape())));
            }
        }
        Ok(AttributedPointCloud { points, attrs, target, meta: Vec::new() })
    }

    /// Cloud without attributes.
    pub fn spatial(points: Tensor<f64>, target: Target) -> Result<Self> {
        let n = points.shape().first().copied().unwrap_or(0);
        Self::new(points, Tensor::zeros(&[n, 0]), target)
    }

    pub fn n(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn d_a(&self) -> usize {
        self.attrs.shape()[1]
    }

    pub fn label(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Points (and a trajectory target) rotated by `r`; attributes unchanged.
    pub fn rotated(&self, r: &Rotation<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.points = r.apply(&self.points)?;
        if let Target::Trajectory(t) = &self.target {
            out.target = Target::Trajectory(r.apply(t)?);
        }
        Ok(out)
    }

    /// Points (and a trajectory target) shifted by `t`.
    pub fn translated(&self, t: [f64; 3]) -> Self {
        let shift = |x: &Tensor<f64>| {
            let mut y = x.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += t[i % 3];
            }
            y
        };
        let mut out = self.clone();
        out.points = shift(&self.points);
        if let Target::Trajectory(tr) = &self.target {
            out.target = Target::Trajectory(shift(tr));
        }
        out
    }
}

/// Mean of the rows of an `[N, 3]` tensor.
pub fn centroid(points: &Tensor<f64>) -> [f64; 3] {
    let n = points.shape()[0].max(1) as f64;
    let mut c = [0.0; 3];
    for row in points.data().chunks(3) {
        for k in 0..3 {
            c[k] += row[k];
        }
    }
    c.map(|x| x / n)
}

/// Subtracts the centroid from the points; returns the centered cloud and the centroid.
pub fn mean_center(pc: &AttributedPointCloud) -> (AttributedPointCloud, [f64; 3]) {
    let c = centroid(&pc.points);
    let mut out = pc.clone();
    for row in out.points.data_mut().chunks_mut(3) {
        for k in 0..3 {
            row[k] -= c[k];
        }
    }
    (out, c)
}

/// A spatial rotation and its block-diagonal extension to fused vectors.
#[derive(Debug, Clone)]
pub struct BlockRotation {
    pub r: Rotation<f64>,
    pub embedded: Rotation<f64>,
}

impl BlockRotation {
    pub fn new(r: Rotation<f64>, d_a: usize) -> Result<Self> {
        if r.dim() != 3 {
            return Err(Error::config("block rotation needs a 3x3 spatial rotation"));
        }
        let embedded = r.embed(d_a);
        Ok(BlockRotation { r, embedded })
    }
}

/// `[N, 1, 3 + d_A]` tokens `[x, y, z, a_1 .. a_dA]`.
pub fn fuse_early<T: Scalar>(pc: &AttributedPointCloud) -> Result<Tensor<T>> {
    let (n, d) = (pc.n(), pc.d_a());
    if d == 0 {
        return Err(Error::config("early fusion needs attributes; use spatial mode"));
    }
    let w = 3 + d;
    Ok(Tensor::from_fn(&[n, 1, w], |i| {
        let (row, col) = (i / w, i % w);
        let x = if col < 3 {
            pc.points.data()[row * 3 + col]
        } else {
            pc.attrs.data()[row * d + col - 3]
        };
        T::of(x)
    }))
}

/// `[N, 1, 3]` tokens holding the points.
pub fn spatial_tokens<T: Scalar>(points: &Tensor<f64>) -> Result<Tensor<T>> {
    let n = points.shape()[0];
    points.cast::<T>().reshape(&[n, 1, 3])
}

/// Average distance error: mean over steps of the Euclidean step error.
pub fn ade<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<T> {
    if y.shape() != yhat.shape() || y.rank() != 2 || y.shape()[0] == 0 {
        return Err(Error::dim("ade", y.shape(), yhat.shape()));
    }
    let d = y.shape()[1];
    let steps = y.shape()[0];
    let total: T = y
        .data()
        .chunks(d)
        .zip(yhat.data().chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt())
        .sum();
    Ok(total / T::of(steps as f64))
}

/// Output of a model on one cloud.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Logits(Vec<f64>),
    Trajectory(Tensor<f64>),
}

impl Prediction {
    pub fn argmax(&self) -> Option<usize> {
        match self {
            Prediction::Logits(l) => l
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i),
            Prediction::Trajectory(_) => None,
        }
    }
}

/// Common interface used by training, evaluation and checkpoints.
pub trait Model<T: Scalar>: Send + Sync {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    fn config(&self) -> ModelConfig;
    /// Training loss on one sample.
    fn loss<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, pc: &AttributedPointCloud) -> Result<Var<'t, T>>;
    fn predict(&self, pc: &AttributedPointCloud) -> Result<Prediction>;
    /// VN-Linear layers, in forward order, for bound reporting.
    fn vn_linears(&self) -> Vec<(String, &VnLinear)> {
        Vec::new()
    }
}

fn default_head_hidden() -> usize {
    64
}

fn default_attr_hidden() -> usize {
    32
}

/// Classifier hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub fusion: FusionMode,
    #[serde(default)]
    pub d_a: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_attr_hidden")]
    pub attr_hidden: usize,
    pub encoder: EncoderConfig,
}

impl ClassifierConfig {
    /// Encoder settings with the representation width implied by the fusion mode.
    pub fn resolved_encoder(&self) -> EncoderConfig {
        EncoderConfig { s: self.fusion.width(self.d_a), ..self.encoder.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        if self.fusion != FusionMode::SpatialOnly && self.d_a == 0 {
            return Err(Error::config(format!("{} fusion needs d_a >= 1", self.fusion)));
        }
        if self.fusion == FusionMode::LateFusion && self.encoder.latent.is_some() {
            return Err(Error::config("late fusion merges per point and cannot follow latent reduction"));
        }
        if self.head_hidden == 0 || self.attr_hidden == 0 {
            return Err(Error::config("head widths must be positive"));
        }
        self.resolved_encoder().validate()
    }
}

/// Rotation-invariant classifier.
///
/// Points (fused with attributes in early mode) are lifted to one channel,
/// embedded by a VN-Linear, encoded, read out invariantly, flattened per token,
/// averaged over tokens and mapped to logits by a two-layer MLP.
///
/// In late mode the attributes only meet the spatial stream after encoding.
/// The raw point joins the encoded channels as one more channel, and an MLP of
/// each token's attributes produces one gate per channel. The gated and
/// ungated token means are read out invariantly as a pair. The gated and
/// ungated means of the per-token invariants are added to that readout, and
/// the result feeds the head.
pub struct Classifier<T> {
    pub cfg: ClassifierConfig,
    pub params: ParamSet<T>,
    pub embed: VnLinear,
    pub encoder: Encoder,
    pub invariant: VnInvariant,
    pub attr: Option<Mlp2>,
    /// Readout of the pooled (gated, ungated) pair, late fusion only.
    pub pool_invariant: Option<VnInvariant>,
    pub head1: Dense,
    pub head2: Dense,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.resolved_encoder();
        let (c, s) = (enc.channels, enc.s);
        let mut rng = SplitMix64::stream(seed, 0x636c6173);
        let mut ps = ParamSet::new();
        let embed = VnLinear::new(&mut ps, "embed", 1, c, s, enc.eps, &mut rng)?;
        let encoder = Encoder::new(&mut ps, "encoder", &enc, &mut rng)?;
        let late = cfg.fusion == FusionMode::LateFusion;
        // Late fusion reads the raw point next to the encoded channels.
        let c_read = if late { c + 1 } else { c };
        let invariant = VnInvariant::new(&mut ps, "invariant", c_read, s, enc.eps, &mut rng)?;
        let (attr, pool_invariant, head_in) = if late {
            let a = Mlp2::new(&mut ps, "attr", cfg.d_a, cfg.attr_hidden, c_read, &mut rng)?;
            let pi = VnInvariant::new(&mut ps, "pool_invariant", 2 * c_read, s, enc.eps, &mut rng)?;
            (Some(a), Some(pi), 4 * c_read * s)
        } else {
            (None, None, c * s)
        };
        let head1 = Dense::new(&mut ps, "head1", head_in, cfg.head_hidden, &mut rng)?;
        let head2 = Dense::new(&mut ps, "head2", cfg.head_hidden, cfg.classes, &mut rng)?;
        Ok(Classifier { cfg, params: ps, embed, encoder, invariant, attr, pool_invariant, head1, head2 })
    }

    pub fn tokens(&self, pc: &AttributedPointCloud) -> Result<Tensor<T>> {
        match self.cfg.fusion {
            FusionMode::EarlyFusion => {
                self.check_attrs(pc)?;
                fuse_early(pc)
            }
            FusionMode::LateFusion => {
                self.check_attrs(pc)?;
                spatial_tokens(&pc.points)
            }
            FusionMode::SpatialOnly => spatial_tokens(&pc.points),
        }
    }

    fn check_attrs(&self, pc: &AttributedPointCloud) -> Result<()> {
        if pc.d_a() != self.cfg.d_a {
            return Err(Error::config(format!(
                "model expects {} attributes per point, cloud has {}",
                self.cfg.d_a,
                pc.d_a()
            )));
        }
        Ok(())
    }

    /// VN features after the encoder, `[N', C, S]`.
    pub fn encode<'t>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.embed.forward(p, v)?;
        self.encoder.forward(p, h)
    }

    /// Logits from already-built tokens (`[N, 1, S]`) and raw attributes.
    pub fn logits_from<'t>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>, attrs: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let h = self.encode(p, tokens)?;
        self.readout(p, tokens, h, attrs)
    }

    /// Logits from encoded VN features `[N', C, S]`; late fusion also reads
    /// the `[N, 1, S]` input tokens.
    pub fn readout<'t>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>, h: Var<'t, T>, attrs: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let h = match self.attr {
            Some(_) => h.tape().concat(&[h, tokens], 1)?,
            None => h,
        };
        self.readout_joined(p, h, attrs)
    }

    /// [`readout`](Self::readout) with the input tokens already appended as
    /// the last channel in late fusion.
    pub fn readout_joined<'t>(&self, p: &Bound<'t, T>, h: Var<'t, T>, attrs: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let flatten = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let shape = v.shape();
            v.reshape(&[shape[0], shape[1] * shape[2]])
        };
        let own = self.invariant.forward(p, h)?;
        let features = match (&self.attr, &self.pool_invariant, attrs) {
            (Some(attr), Some(pool_inv), Some(a)) => {
                let (n, c, s) = vn_dims(&h.shape())?;
                let gate = attr.forward(p, a)?.reshape(&[n, c, 1])?;
                let pair = h.tape().concat(&[vn_mean_pool(h.mul(gate)?)?, vn_mean_pool(h)?], 0)?;
                let pooled = flatten(pool_inv.forward(p, pair.reshape(&[1, 2 * c, s])?)?)?.reshape(&[1, 2 * c * s])?;
                let own_gated = vn_mean_pool(own.mul(gate)?)?.reshape(&[1, c * s])?;
                let own_mean = vn_mean_pool(own)?.reshape(&[1, c * s])?;
                h.tape().concat(&[pooled, own_gated, own_mean], 1)?
            }
            (Some(_), _, None) => return Err(Error::config("late fusion needs attributes")),
            _ => flatten(own)?.mean_axis(0)?,
        };
        let pooled = self.head1.forward(p, features)?.relu();
        let k = self.cfg.classes;
        self.head2.forward(p, pooled)?.reshape(&[k])
    }

    pub fn logits<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, pc: &AttributedPointCloud) -> Result<Var<'t, T>> {
        let tokens = tape.constant(self.tokens(pc)?);
        let attrs = self.attr.as_ref().map(|_| tape.constant(pc.attrs.cast::<T>()));
        self.logits_from(p, tokens, attrs)
    }
}

impl<T: Scalar> Model<T> for Classifier<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Classifier(self.cfg.clone())
    }

    fn loss<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, pc: &AttributedPointCloud) -> Result<Var<'t, T>> {
        let label = pc
            .label()
            .filter(|&l| l < self.cfg.classes)
            .ok_or_else(|| Error::config("classification needs a class label within range"))?;
        cross_entropy(self.logits(p, tape, pc)?, label)
    }

    fn predict(&self, pc: &AttributedPointCloud) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let l = self.logits(&p, &tape, pc)?;
        let v = l.value().to_f64_vec();
        Ok(Prediction::Logits(v))
    }

    fn vn_linears(&self) -> Vec<(String, &VnLinear)> {
        let mut invs = vec![&self.invariant];
        invs.extend(&self.pool_invariant);
        collect_linears(&self.params, &self.embed, &self.encoder, &invs, None)
    }
}

fn collect_linears<'a, T: Scalar>(
    ps: &ParamSet<T>,
    embed: &'a VnLinear,
    encoder: &'a Encoder,
    invariants: &[&'a VnInvariant],
    head: Option<&'a VnLinear>,
) -> Vec<(String, &'a VnLinear)> {
    let mut out: Vec<&VnLinear> = vec![embed];
    if let Some(l) = &encoder.latent {
        out.extend(l.attn.linears());
    }
    for b in &encoder.blocks {
        out.extend(b.linears());
    }
    for inv in invariants {
        out.extend([&inv.lin1, &inv.lin2]);
    }
    out.extend(head);
    out.into_iter()
        .map(|l| {
            let name = ps.name(l.w);
            (name.strip_suffix(".w").unwrap_or(name).to_string(), l)
        })
        .collect()
}

/// Centroid and radius used to put a trajectory in unit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl Normalizer {
    /// Centroid and root-mean-square distance to it (1 for a degenerate input).
    pub fn fit(points: &Tensor<f64>) -> Self {
        let c = centroid(points);
        let n = points.shape()[0].max(1) as f64;
        let ss: f64 = points
            .data()
            .chunks(3)
            .map(|r| (0..3).map(|k| (r[k] - c[k]).powi(2)).sum::<f64>())
            .sum();
        let rms = (ss / n).sqrt();
        let scale = if rms > 1e-12 { rms } else { 1.0 };
        Normalizer { centroid: c, scale }
    }

    pub fn normalize(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = (*v - self.centroid[i % 3]) / self.scale;
        }
        y
    }

    pub fn denormalize(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale + self.centroid[i % 3];
        }
        y
    }
}

/// Rotation-invariant per-step attributes of a normalized trajectory:
/// distance to the previous point (the first step copies the second) and the
/// timestamp scaled to `[0, 1]`.
pub fn trajectory_attrs(points: &Tensor<f64>) -> Tensor<f64> {
    let n = points.shape()[0];
    let p = points.data();
    let step = |i: usize| -> f64 { (0..3).map(|k| (p[i * 3 + k] - p[(i - 1) * 3 + k]).powi(2)).sum::<f64>().sqrt() };
    Tensor::from_fn(&[n, 2], |idx| {
        let (i, col) = (idx / 2, idx % 2);
        match col {
            0 if n < 2 => 0.0,
            0 => step(i.max(1)),
            _ if n < 2 => 0.0,
            _ => i as f64 / (n - 1) as f64,
        }
    })
}

/// Number of attributes the forecaster derives per input step.
pub const TRAJ_ATTRS: usize = 2;

/// Forecaster hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    pub t_out: usize,
    pub fusion: FusionMode,
    #[serde(default = "default_attr_hidden")]
    pub attr_hidden: usize,
    pub encoder: EncoderConfig,
}

impl ForecasterConfig {
    pub fn d_a(&self) -> usize {
        match self.fusion {
            FusionMode::SpatialOnly => 0,
            _ => TRAJ_ATTRS,
        }
    }

    pub fn resolved_encoder(&self) -> EncoderConfig {
        EncoderConfig { s: self.fusion.width(self.d_a()), ..self.encoder.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_out == 0 {
            return Err(Error::config("forecast horizon must be positive"));
        }
        if self.fusion == FusionMode::LateFusion && self.encoder.latent.is_some() {
            return Err(Error::config("late fusion gates per step and cannot follow latent reduction"));
        }
        self.resolved_encoder().validate()
    }
}

/// Rotation-equivariant trajectory forecaster.
///
/// The input is centered and scaled to unit RMS radius, embedded and encoded,
/// mean-pooled over tokens, and a VN-Linear maps the `C` pooled channels to
/// `T_out` future points; the first three columns are mapped back to input
/// coordinates. In late mode each step's VN features are gated channel-wise by
/// an MLP of that step's attributes before pooling.
pub struct Forecaster<T> {
    pub cfg: ForecasterConfig,
    pub params: ParamSet<T>,
    pub embed: VnLinear,
    pub encoder: Encoder,
    pub gate: Option<Mlp2>,
    pub head: VnLinear,
}

impl<T: Scalar> Forecaster<T> {
    pub fn new(cfg: ForecasterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.resolved_encoder();
        let (c, s) = (enc.channels, enc.s);
        let mut rng = SplitMix64::stream(seed, 0x666f7265);
        let mut ps = ParamSet::new();
        let embed = VnLinear::new(&mut ps, "embed", 1, c, s, enc.eps, &mut rng)?;
        let encoder = Encoder::new(&mut ps, "encoder", &enc, &mut rng)?;
        let gate = if cfg.fusion == FusionMode::LateFusion {
            Some(Mlp2::new(&mut ps, "gate", TRAJ_ATTRS, cfg.attr_hidden, c, &mut rng)?)
        } else {
            None
        };
        let head = VnLinear::new(&mut ps, "head", c, cfg.t_out, s, enc.eps, &mut rng)?;
        Ok(Forecaster { cfg, params: ps, embed, encoder, gate, head })
    }

    /// Prediction in normalized coordinates, `[T_out, 3]`.
    pub fn forward_normalized<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, norm_input: &Tensor<f64>) -> Result<Var<'t, T>> {
        let n = norm_input.shape()[0];
        let attrs = trajectory_attrs(norm_input);
        let tokens = match self.cfg.fusion {
            FusionMode::EarlyFusion => {
                let pc = AttributedPointCloud::new(norm_input.clone(), attrs.clone(), Target::None)?;
                fuse_early::<T>(&pc)?
            }
            _ => spatial_tokens(norm_input)?,
        };
        let h = self.embed.forward(p, tape.constant(tokens))?;
        let mut h = self.encoder.forward(p, h)?;
        if let Some(gate) = &self.gate {
            let g = gate.forward(p, tape.constant(attrs.cast::<T>()))?;
            let c = self.encoder_channels();
            h = h.mul(g.reshape(&[n, c, 1])?)?;
        }
        let pooled = vn_mean_pool(h)?;
        let out = self.head.forward(p, pooled)?;
        out.narrow(2, 0, 3)?.reshape(&[self.cfg.t_out, 3])
    }

    fn encoder_channels(&self) -> usize {
        self.cfg.encoder.channels
    }

    fn check_input(&self, pc: &AttributedPointCloud) -> Result<()> {
        if pc.n() == 0 {
            return Err(Error::EmptyInput("trajectory"));
        }
        Ok(())
    }

    /// Forecast in input coordinates.
    pub fn forecast(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        if input.rank() != 2 || input.shape()[1] != 3 {
            return Err(Error::Shape(format!("trajectory must be [T, 3], got {:?}", input.shape())));
        }
        if input.shape()[0] == 0 {
            return Err(Error::EmptyInput("trajectory"));
        }
        let norm = Normalizer::fit(input);
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward_normalized(&p, &tape, &norm.normalize(input))?;
        let v = out.value().cast::<f64>();
        Ok(norm.denormalize(&v))
    }
}

impl<T: Scalar> Model<T> for Forecaster<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Forecaster(self.cfg.clone())
    }

    fn loss<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, pc: &AttributedPointCloud) -> Result<Var<'t, T>> {
        self.check_input(pc)?;
        let Target::Trajectory(future) = &pc.target else {
            return Err(Error::config("forecasting needs a trajectory target"));
        };
        if future.shape()[0] != self.cfg.t_out {
            return Err(Error::config(format!(
                "model predicts {} steps, target has {}",
                self.cfg.t_out,
                future.shape()[0]
            )));
        }
        let norm = Normalizer::fit(&pc.points);
        let pred = self.forward_normalized(p, tape, &norm.normalize(&pc.points))?;
        let target = tape.constant(norm.normalize(future).cast::<T>());
        mean_sq_dist(pred, target)
    }

    fn predict(&self, pc: &AttributedPointCloud) -> Result<Prediction> {
        self.check_input(pc)?;
        Ok(Prediction::Trajectory(self.forecast(&pc.points)?))
    }

    fn vn_linears(&self) -> Vec<(String, &VnLinear)> {
        collect_linears(&self.params, &self.embed, &self.encoder, &[], Some(&self.head))
    }
}

/// Architecture description stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Classifier(ClassifierConfig),
    Forecaster(ForecasterConfig),
    Vanilla(VanillaConfig),
}

impl ModelConfig {
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<AnyModel<T>> {
        Ok(match self {
            ModelConfig::Classifier(c) => AnyModel::Classifier(Classifier::new(c.clone(), seed)?),
            ModelConfig::Forecaster(c) => AnyModel::Forecaster(Forecaster::new(c.clone(), seed)?),
            ModelConfig::Vanilla(c) => AnyModel::Vanilla(VanillaModel::new(c.clone(), seed)?),
        })
    }

    pub fn is_classifier(&self) -> bool {
        match self {
            ModelConfig::Classifier(_) => true,
            ModelConfig::Forecaster(_) => false,
            ModelConfig::Vanilla(v) => v.classes.is_some(),
        }
    }

    pub fn to_header(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_header(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad checkpoint header: {e}")))
    }
}

/// Any of the model kinds, as rebuilt from a configuration or checkpoint.
pub enum AnyModel<T> {
    Classifier(Classifier<T>),
    Forecaster(Forecaster<T>),
    Vanilla(VanillaModel<T>),
}

impl<T: Scalar> AnyModel<T> {
    pub fn as_dyn(&self) -> &dyn Model<T> {
        match self {
            AnyModel::Classifier(m) => m,
            AnyModel::Forecaster(m) => m,
            AnyModel::Vanilla(m) => m,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Model<T> {
        match self {
            AnyModel::Classifier(m) => m,
            AnyModel::Forecaster(m) => m,
            AnyModel::Vanilla(m) => m,
        }
    }
}

impl<T: Scalar> Model<T> for AnyModel<T> {
    fn params(&self) -> &ParamSet<T> {
        self.as_dyn().params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.as_dyn_mut().params_mut()
    }

    fn config(&self) -> ModelConfig {
        self.as_dyn().config()
    }

    fn loss<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, pc: &AttributedPointCloud) -> Result<Var<'t, T>> {
        self.as_dyn().loss(p, tape, pc)
    }

    fn predict(&self, pc: &AttributedPointCloud) -> Result<Prediction> {
        self.as_dyn().predict(pc)
    }

    fn vn_linears(&self) -> Vec<(String, &VnLinear)> {
        self.as_dyn().vn_linears()
    }
}

/// Rescales every VN bias row to unit length. The function computed is
/// unchanged because only the row directions are used.
pub fn canonicalize_biases<T: Scalar>(model: &mut dyn Model<T>) {
    let ids: Vec<_> = model.vn_linears().iter().filter_map(|(_, l)| l.b).collect();
    let ps = model.params_mut();
    for id in ids {
        let b = ps.get_mut(id);
        let s = b.shape()[1];
        for row in b.data_mut().chunks_mut(s) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
}

/// Writes parameters with the model configuration as header. Bias rows are
/// stored as unit directions.
pub fn save_checkpoint<T: Scalar>(model: &dyn Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let cfg = model.config();
    let mut copy = cfg.build::<f64>(0)?;
    copy.params_mut().assign_from(&model.params().cast::<f64>())?;
    canonicalize_biases(&mut copy);
    copy.params().save(path, &cfg.to_header())
}

/// Rebuilds a model from a checkpoint file.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, AnyModel<T>)> {
    let (header, stored) = ParamSet::<f64>::load(path)?;
    let cfg = ModelConfig::from_header(&header)?;
    let mut model = cfg.build::<T>(0)?;
    model.params_mut().assign_from(&stored.cast::<T>())?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_names_round_trip() {
        for m in [FusionMode::EarlyFusion, FusionMode::LateFusion, FusionMode::SpatialOnly] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("both".parse::<FusionMode>().is_err());
    }

    #[test]
    fn early_fusion_layout() {
        let pc = AttributedPointCloud::new(
            Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap(),
            Tensor::from_f64(&[1, 1], &[7.0]).unwrap(),
            Target::None,
        )
        .unwrap();
        let t = fuse_early::<f64>(&pc).unwrap();
        assert_eq!(t.shape(), &[1, 1, 4]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 7.0]);
        let bare = AttributedPointCloud::spatial(pc.points.clone(), Target::None).unwrap();
        assert!(matches!(fuse_early::<f64>(&bare), Err(Error::Config(_))));
    }

    #[test]
    fn ade_examples() {
        let y = Tensor::<f64>::zeros(&[4, 3]);
        assert_eq!(ade(&y, &y).unwrap(), 0.0);
        let shifted = Tensor::from_fn(&[4, 3], |i| [3.0, 4.0, 0.0][i % 3]);
        assert!((ade(&y, &shifted).unwrap() - 5.0).abs() < 1e-15);
        assert!(ade(&y, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn header_round_trip() {
        let cfg = ModelConfig::Classifier(ClassifierConfig {
            classes: 3,
            fusion: FusionMode::LateFusion,
            d_a: 1,
            head_hidden: 8,
            attr_hidden: 4,
            encoder: EncoderConfig::default(),
        });
        assert_eq!(ModelConfig::from_header(&cfg.to_header()).unwrap(), cfg);
    }

    #[test]
    fn trajectory_attributes() {
        let pts = Tensor::from_f64(&[3, 3], &[0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 3.0, 4.0, 1.0]).unwrap();
        let a = trajectory_attrs(&pts);
        assert_eq!(a.data(), &[5.0, 0.0, 5.0, 0.5, 1.0, 1.0]);
    }
}
