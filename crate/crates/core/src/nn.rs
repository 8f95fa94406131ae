//! Ordinary (non-equivariant) layers and losses.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map on the last axis: `x W + b`, `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::config(format!("{name}: widths must be positive")));
        }
        let w = ps.add_normal(format!("{name}.w"), &[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Ok(Dense { w, b, d_in, d_out })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p.var(self.w))?.add(p.var(self.b))
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Dense,
    pub l2: Dense,
}

impl Mlp2 {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Mlp2 {
            l1: Dense::new(ps, &format!("{name}.l1"), d_in, hidden, rng)?,
            l2: Dense::new(ps, &format!("{name}.l2"), hidden, d_out, rng)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.l2.forward(p, self.l1.forward(p, x)?.relu())
    }
}

/// Standard layer normalization over the last axis with gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let last = x.shape().len() - 1;
        let centered = x.sub(x.mean_axis(last)?)?;
        let var = centered.square().mean_axis(last)?;
        centered
            .div(var.add_scalar(1e-5).sqrt())?
            .mul(p.var(self.gain))?
            .add(p.var(self.bias))
    }
}

/// `-log softmax(logits)[label]` for a `[K]` logit vector.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, label: usize) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 1 || label >= shape[0] {
        return Err(Error::Shape(format!("label {label} out of range for logits {shape:?}")));
    }
    Ok(logits.log_softmax_last()?.narrow(0, label, 1)?.sum_all().neg())
}

/// Mean over rows of the squared row distance.
pub fn mean_sq_dist<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if shape != target.shape() || shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dim("mean_sq_dist", &shape, &target.shape()));
    }
    Ok(pred.sub(target)?.square().sum_all().scale(1.0 / shape[0] as f64))
}
