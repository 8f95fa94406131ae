//! A standard (non-equivariant) transformer used as a comparison baseline.
//!
//! Each point becomes a token `[x, y, z, attrs..]`; the coordinates are
//! treated as plain features, so nothing constrains the model to respect
//! rotations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{trajectory_attrs, Model, ModelConfig, Normalizer, Prediction, Target, AttributedPointCloud, TRAJ_ATTRS};
use crate::nn::{cross_entropy, mean_sq_dist, Dense, LayerNorm, Mlp2};
use crate::params::{Bound, ParamSet};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Baseline hyperparameters. Exactly one of `classes` and `t_out` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanillaConfig {
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub t_out: Option<usize>,
    /// Attributes per point (classification) or 0/`TRAJ_ATTRS` (forecasting).
    #[serde(default)]
    pub d_a: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

impl VanillaConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.classes, self.t_out) {
            (Some(k), None) if k >= 2 => {}
            (None, Some(t)) if t >= 1 => {
                if self.d_a != 0 && self.d_a != TRAJ_ATTRS {
                    return Err(Error::config(format!("forecasting baseline uses 0 or {TRAJ_ATTRS} attributes")));
                }
            }
            _ => return Err(Error::config("baseline needs exactly one of classes (>= 2) or t_out (>= 1)")),
        }
        if self.d_model == 0 || self.heads == 0 || self.mlp_hidden == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config("baseline widths must be positive with d_model divisible by heads"));
        }
        Ok(())
    }
}

struct Block {
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    norm1: LayerNorm,
    mlp: Mlp2,
    norm2: LayerNorm,
}

/// Standard post-norm transformer encoder with a pooled head.
pub struct VanillaModel<T> {
    pub cfg: VanillaConfig,
    pub params: ParamSet<T>,
    input: Dense,
    blocks: Vec<Block>,
    head: Mlp2,
}

impl<T: Scalar> VanillaModel<T> {
    pub fn new(cfg: VanillaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::stream(seed, 0x76616e69);
        let mut ps = ParamSet::new();
        let d = cfg.d_model;
        let input = Dense::new(&mut ps, "input", 3 + cfg.d_a, d, &mut rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let n = format!("block{i}");
            blocks.push(Block {
                wq: Dense::new(&mut ps, &format!("{n}.wq"), d, d, &mut rng)?,
                wk: Dense::new(&mut ps, &format!("{n}.wk"), d, d, &mut rng)?,
                wv: Dense::new(&mut ps, &format!("{n}.wv"), d, d, &mut rng)?,
                wo: Dense::new(&mut ps, &format!("{n}.wo"), d, d, &mut rng)?,
                norm1: LayerNorm::new(&mut ps, &format!("{n}.norm1"), d),
                mlp: Mlp2::new(&mut ps, &format!("{n}.mlp"), d, cfg.mlp_hidden, d, &mut rng)?,
                norm2: LayerNorm::new(&mut ps, &format!("{n}.norm2"), d),
            });
        }
        let out = match (cfg.classes, cfg.t_out) {
            (Some(k), _) => k,
            (_, Some(t)) => 3 * t,
            _ => unreachable!("validated"),
        };
        let head = Mlp2::new(&mut ps, "head", d, cfg.mlp_hidden, out, &mut rng)?;
        Ok(VanillaModel { cfg, params: ps, input, blocks, head })
    }

    fn attend<'t>(&self, p: &Bound<'t, T>, b: &Block, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = x.shape()[0];
        let (h, d) = (self.cfg.heads, self.cfg.d_model);
        let dh = d / h;
        let split = |y: Var<'t, T>| -> Result<Var<'t, T>> { y.reshape(&[n, h, dh])?.permute(&[1, 0, 2]) };
        let q = split(b.wq.forward(p, x)?)?;
        let k = split(b.wk.forward(p, x)?)?;
        let v = split(b.wv.forward(p, x)?)?;
        let a = q.matmul(k.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt()).softmax_last()?;
        let o = a.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[n, d])?;
        b.wo.forward(p, o)
    }

    /// Pooled head output for `[N, 3 + d_a]` token features.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = self.input.forward(p, tokens)?;
        for b in &self.blocks {
            let a = self.attend(p, b, x)?;
            x = b.norm1.forward(p, x.add(a)?)?;
            let m = b.mlp.forward(p, x)?;
            x = b.norm2.forward(p, x.add(m)?)?;
        }
        let pooled = x.mean_axis(0)?;
        self.head.forward(p, pooled)
    }

    fn features(&self, points: &Tensor<f64>, attrs: &Tensor<f64>) -> Result<Tensor<T>> {
        let n = points.shape()[0];
        let d = attrs.shape()[1];
        if d != self.cfg.d_a {
            return Err(Error::config(format!("baseline expects {} attributes, got {d}", self.cfg.d_a)));
        }
        let w = 3 + d;
        Ok(Tensor::from_fn(&[n, w], |i| {
            let (r, c) = (i / w, i % w);
            T::of(if c < 3 { points.data()[r * 3 + c] } else { attrs.data()[r * d + c - 3] })
        }))
    }

    fn forecast_normalized<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, norm_input: &Tensor<f64>) -> Result<Var<'t, T>> {
        let n = norm_input.shape()[0];
        let attrs = if self.cfg.d_a == 0 { Tensor::zeros(&[n, 0]) } else { trajectory_attrs(norm_input) };
        let x = tape.constant(self.features(norm_input, &attrs)?);
        let t = self.cfg.t_out.unwrap_or(0);
        self.forward(p, x)?.reshape(&[t, 3])
    }
}

impl<T: Scalar> Model<T> for VanillaModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn config(&self) -> ModelConfig {
        ModelConfig::Vanilla(self.cfg.clone())
    }

    fn loss<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, pc: &AttributedPointCloud) -> Result<Var<'t, T>> {
        match (&pc.target, self.cfg.classes) {
            (Target::Class(label), Some(k)) if *label < k => {
                let x = tape.constant(self.features(&pc.points, &pc.attrs)?);
                cross_entropy(self.forward(p, x)?.reshape(&[k])?, *label)
            }
            (Target::Trajectory(future), None) => {
                let norm = Normalizer::fit(&pc.points);
                let pred = self.forecast_normalized(p, tape, &norm.normalize(&pc.points))?;
                let target = tape.constant(norm.normalize(future).cast::<T>());
                mean_sq_dist(pred, target)
            }
            _ => Err(Error::config("sample target does not match the baseline task")),
        }
    }

    fn predict(&self, pc: &AttributedPointCloud) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        match self.cfg.classes {
            Some(k) => {
                let x = tape.constant(self.features(&pc.points, &pc.attrs)?);
                let l = self.forward(&p, x)?.reshape(&[k])?;
                let v = l.value().to_f64_vec();
                Ok(Prediction::Logits(v))
            }
            None => {
                let norm = Normalizer::fit(&pc.points);
                let out = self.forecast_normalized(&p, &tape, &norm.normalize(&pc.points))?;
                let v = out.value().cast::<f64>();
                Ok(Prediction::Trajectory(norm.denormalize(&v)))
            }
        }
    }
}
