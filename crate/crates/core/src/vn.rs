//! Vector-Neuron layers.
//!
//! A VN tensor is a rank-3 [`Tensor`] of shape `[N, C, S]`: `N` tokens, each a
//! `C x S` matrix whose rows are vectors in `R^S`. Rotations act on the last
//! axis, `V -> V R`, one token at a time. Every layer here commutes with that
//! action except [`vn_linear_with_bias`] for `eps > 0`, whose deviation is
//! bounded by `2 eps sqrt(C')`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added under every square root that normalizes by a vector norm.
pub const NORM_DELTA: f64 = 1e-12;

/// Splits a VN shape into `(N, C, S)`.
pub fn vn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, s] => Ok((n, c, s)),
        _ => Err(Error::Shape(format!("expected a [N, C, S] tensor, got {shape:?}"))),
    }
}

fn check_weight(op: &'static str, w: &[usize], v: &[usize]) -> Result<()> {
    let (_, c, _) = vn_dims(v)?;
    if w.len() != 2 || w[1] != c {
        return Err(Error::dim(op, w, v));
    }
    Ok(())
}

/// `W V` per token. `w` is `[C', C]`.
pub fn vn_linear<'t, T: Scalar>(v: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    check_weight("vn_linear", &w.shape(), &v.shape())?;
    w.matmul(v)
}

/// Rows of `b` scaled to unit length with the guarded norm.
pub fn unit_rows<'t, T: Scalar>(b: Var<'t, T>) -> Result<Var<'t, T>> {
    b.div(b.norm_last(NORM_DELTA)?)
}

/// `W V + eps U` per token, where `U` holds the rows of `b` normalized to unit length.
pub fn vn_linear_with_bias<'t, T: Scalar>(
    v: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::config(format!("bias norm must be >= 0, got {eps}")));
    }
    let out = vn_linear(v, w)?;
    if eps == 0.0 {
        return Ok(out);
    }
    let (_, _, s) = vn_dims(&v.shape())?;
    let bs = b.shape();
    if bs != [w.shape()[0], s] {
        return Err(Error::dim("vn_linear_with_bias", &bs, &[w.shape()[0], s]));
    }
    out.add(unit_rows(b)?.scale(eps))
}

/// Per-channel projection onto the half-space `<q, k> >= 0`.
///
/// `q = W V`, `k = U V`; channels with a negative inner product lose their
/// component along `k`.
pub fn vn_relu<'t, T: Scalar>(v: Var<'t, T>, w: Var<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
    let q = vn_linear(v, w)?;
    let k = vn_linear(v, u)?;
    if q.shape() != k.shape() {
        return Err(Error::dim("vn_relu", &w.shape(), &u.shape()));
    }
    let dot = q.mul(k)?.sum_axis(2)?;
    let kk = k.square().sum_axis(2)?.add_scalar(NORM_DELTA);
    // min(<q,k>, 0) / |k|^2
    let coef = dot.neg().relu().neg().div(kk)?;
    q.sub(coef.mul(k)?)
}

/// Layer normalization of the channel norms, directions kept.
///
/// `gain` and `offset` are `[C]` and act on the normalized norms.
pub fn vn_layer_norm<'t, T: Scalar>(
    v: Var<'t, T>,
    gain: Var<'t, T>,
    offset: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (n, c, _) = vn_dims(&v.shape())?;
    if c < 2 {
        return Err(Error::config("layer norm needs at least 2 channels"));
    }
    let norms = v.norm_last(NORM_DELTA)?;
    let dir = v.div(norms)?;
    let flat = norms.reshape(&[n, c])?;
    let centered = flat.sub(flat.mean_axis(1)?)?;
    let var = centered.square().mean_axis(1)?;
    let normed = centered.div(var.add_scalar(NORM_DELTA).sqrt())?;
    let scaled = normed.mul(gain)?.add(offset)?;
    dir.mul(scaled.reshape(&[n, c, 1])?)
}

/// Mean over tokens, `[N, C, S] -> [1, C, S]`.
pub fn vn_mean_pool<T: Scalar>(v: Var<'_, T>) -> Result<Var<'_, T>> {
    let (n, _, _) = vn_dims(&v.shape())?;
    if n == 0 {
        return Err(Error::EmptyInput("vn_mean_pool"));
    }
    v.mean_axis(0)
}

/// `V F^T` per token, where `frame` is a per-token `[N, S, S]` tensor built
/// equivariantly from `V`. The result does not change under rotation.
pub fn vn_invariant_with<'t, T: Scalar>(v: Var<'t, T>, frame: Var<'t, T>) -> Result<Var<'t, T>> {
    let (n, _, s) = vn_dims(&v.shape())?;
    if frame.shape() != [n, s, s] {
        return Err(Error::dim("vn_invariant", &frame.shape(), &[n, s, s]));
    }
    v.matmul(frame.transpose_last()?)
}

/// VN-Linear layer, optionally with an `eps`-norm bias.
#[derive(Debug, Clone)]
pub struct VnLinear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub eps: f64,
    pub c_in: usize,
    pub c_out: usize,
}

impl VnLinear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        s: usize,
        eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::config(format!("{name}: channel counts must be positive")));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::config(format!("{name}: bias norm must be >= 0, got {eps}")));
        }
        let w = ps.add_normal(format!("{name}.w"), &[c_out, c_in], (1.0 / c_in as f64).sqrt(), rng);
        let b = (eps > 0.0).then(|| ps.add_normal(format!("{name}.b"), &[c_out, s], 1.0, rng));
        Ok(VnLinear { w, b, eps, c_in, c_out })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.b {
            Some(b) if self.eps > 0.0 => vn_linear_with_bias(v, p.var(self.w), p.var(b), self.eps),
            _ => vn_linear(v, p.var(self.w)),
        }
    }
}

/// VN-ReLU layer with learned `W` and `U`, both `[C, C]`.
#[derive(Debug, Clone)]
pub struct VnRelu {
    pub w: ParamId,
    pub u: ParamId,
    pub c: usize,
}

impl VnRelu {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, c: usize, rng: &mut SplitMix64) -> Result<Self> {
        if c == 0 {
            return Err(Error::config(format!("{name}: channel count must be positive")));
        }
        let std = (1.0 / c as f64).sqrt();
        let w = ps.add_normal(format!("{name}.w"), &[c, c], std, rng);
        let u = ps.add_normal(format!("{name}.u"), &[c, c], std, rng);
        Ok(VnRelu { w, u, c })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        vn_relu(v, p.var(self.w), p.var(self.u))
    }
}

/// VN-LayerNorm with per-channel gain (init 1) and offset (init 0).
#[derive(Debug, Clone)]
pub struct VnLayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub c: usize,
}

impl VnLayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::config(format!("{name}: layer norm needs at least 2 channels")));
        }
        let gain = ps.add(format!("{name}.gain"), Tensor::ones(&[c]));
        let offset = ps.add(format!("{name}.offset"), Tensor::zeros(&[c]));
        Ok(VnLayerNorm { gain, offset, c })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        vn_layer_norm(v, p.var(self.gain), p.var(self.offset))
    }
}

/// Rotation-invariant readout: a small VN network (Linear, ReLU, Linear to
/// `S` channels) builds a frame per token, and each token is expressed in it.
#[derive(Debug, Clone)]
pub struct VnInvariant {
    pub lin1: VnLinear,
    pub relu: VnRelu,
    pub lin2: VnLinear,
}

impl VnInvariant {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c: usize,
        s: usize,
        eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(VnInvariant {
            lin1: VnLinear::new(ps, &format!("{name}.lin1"), c, c, s, eps, rng)?,
            relu: VnRelu::new(ps, &format!("{name}.relu"), c, rng)?,
            lin2: VnLinear::new(ps, &format!("{name}.lin2"), c, s, s, eps, rng)?,
        })
    }

    /// The per-token `[N, S, S]` frame.
    pub fn frame<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.lin1.forward(p, v)?;
        let h = self.relu.forward(p, h)?;
        self.lin2.forward(p, h)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        vn_invariant_with(v, self.frame(p, v)?)
    }
}

/// Two VN-Linear layers around a VN-ReLU, optionally with a VN-LayerNorm
/// before the nonlinearity.
#[derive(Debug, Clone)]
pub struct VnMlp {
    pub lin1: VnLinear,
    pub norm: Option<VnLayerNorm>,
    pub relu: VnRelu,
    pub lin2: VnLinear,
}

impl VnMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        s: usize,
        eps: f64,
        with_norm: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let lin1 = VnLinear::new(ps, &format!("{name}.lin1"), c_in, hidden, s, eps, rng)?;
        let norm = if with_norm {
            Some(VnLayerNorm::new(ps, &format!("{name}.norm"), hidden)?)
        } else {
            None
        };
        let relu = VnRelu::new(ps, &format!("{name}.relu"), hidden, rng)?;
        let lin2 = VnLinear::new(ps, &format!("{name}.lin2"), hidden, c_out, s, eps, rng)?;
        Ok(VnMlp { lin1, norm, relu, lin2 })
    }

    pub fn linears(&self) -> [&VnLinear; 2] {
        [&self.lin1, &self.lin2]
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = self.lin1.forward(p, v)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(p, h)?;
        }
        let h = self.relu.forward(p, h)?;
        self.lin2.forward(p, h)
    }
}
