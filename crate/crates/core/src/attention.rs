//! Frobenius attention, multi-head attention, encoder blocks and latent reduction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vn::{vn_dims, VnLayerNorm, VnLinear, VnMlp};

/// `sum_{c,s} a[c,s] b[c,s]`.
pub fn frobenius_ip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::dim("frobenius_ip", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum())
}

/// Row-wise softmax of `<Q_m, K_n> / sqrt(S C)`, shape `[M, N]`.
pub fn attention_matrix<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>) -> Result<Var<'t, T>> {
    let (m, c, s) = vn_dims(&q.shape())?;
    let (n, ck, sk) = vn_dims(&k.shape())?;
    if (c, s) != (ck, sk) {
        return Err(Error::dim("attention_matrix", &q.shape(), &k.shape()));
    }
    let qf = q.reshape(&[m, c * s])?;
    let kf = k.reshape(&[n, c * s])?;
    qf.matmul(kf.transpose_last()?)?
        .scale(1.0 / ((c * s) as f64).sqrt())
        .softmax_last()
}

/// `sum_n A[m, n] Z_n`, shape `[M, C', S]`.
pub fn vn_attn<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
    let (m, _, _) = vn_dims(&q.shape())?;
    let (n, _, _) = vn_dims(&k.shape())?;
    let (nz, cz, sz) = vn_dims(&z.shape())?;
    if n != nz {
        return Err(Error::dim("vn_attn", &k.shape(), &z.shape()));
    }
    let a = attention_matrix(q, k)?;
    a.matmul(z.reshape(&[n, cz * sz])?)?.reshape(&[m, cz, sz])
}

/// Multi-head VN attention. Each head projects to `head_dim` channels and
/// scales its logits by `1 / sqrt(S * head_dim)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: VnLinear,
    pub wk: VnLinear,
    pub wz: VnLinear,
    pub wo: VnLinear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    /// Queries carry `c_q` channels, keys and values `c_kv`; the output has
    /// `c_out = heads * head_dim` channels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_q: usize,
        c_kv: usize,
        c_out: usize,
        heads: usize,
        head_dim: usize,
        s: usize,
        eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 || heads * head_dim != c_out {
            return Err(Error::config(format!(
                "{name}: heads ({heads}) x head width ({head_dim}) must equal output channels ({c_out})"
            )));
        }
        let hp = heads * head_dim;
        Ok(MultiHeadAttention {
            wq: VnLinear::new(ps, &format!("{name}.wq"), c_q, hp, s, eps, rng)?,
            wk: VnLinear::new(ps, &format!("{name}.wk"), c_kv, hp, s, eps, rng)?,
            wz: VnLinear::new(ps, &format!("{name}.wz"), c_kv, hp, s, eps, rng)?,
            wo: VnLinear::new(ps, &format!("{name}.wo"), hp, c_out, s, eps, rng)?,
            heads,
            head_dim,
        })
    }

    pub fn linears(&self) -> [&VnLinear; 4] {
        [&self.wq, &self.wk, &self.wz, &self.wo]
    }

    fn split<'t, T: Scalar>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (n, _, s) = vn_dims(&x.shape())?;
        x.reshape(&[n, self.heads, self.head_dim * s])?.permute(&[1, 0, 2])
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (m, _, s) = vn_dims(&q.shape())?;
        let (n, _, _) = vn_dims(&k.shape())?;
        let (nz, _, _) = vn_dims(&z.shape())?;
        if n != nz {
            return Err(Error::dim("multi_head_attention", &k.shape(), &z.shape()));
        }
        let qh = self.split(self.wq.forward(p, q)?)?;
        let kh = self.split(self.wk.forward(p, k)?)?;
        let zh = self.split(self.wz.forward(p, z)?)?;
        let scale = 1.0 / ((self.head_dim * s) as f64).sqrt();
        let a = qh.matmul(kh.transpose_last()?)?.scale(scale).softmax_last()?;
        let out = a
            .matmul(zh)?
            .permute(&[1, 0, 2])?
            .reshape(&[m, self.heads * self.head_dim, s])?;
        self.wo.forward(p, out)
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub latent: Option<usize>,
    #[serde(default = "three")]
    pub s: usize,
}

fn three() -> usize {
    3
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 2,
            channels: 16,
            heads: 4,
            head_dim: 4,
            mlp_hidden: 16,
            eps: 0.0,
            latent: None,
            s: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder {name} must be positive")));
            }
        }
        if self.heads * self.head_dim != self.channels {
            return Err(Error::config(format!(
                "heads ({}) x head_dim ({}) must equal channels ({})",
                self.heads, self.head_dim, self.channels
            )));
        }
        if self.channels < 2 || self.mlp_hidden < 2 {
            return Err(Error::config("layer norm needs channels and mlp_hidden >= 2"));
        }
        if self.s < 2 {
            return Err(Error::config("representation width must be >= 2"));
        }
        if self.latent == Some(0) {
            return Err(Error::config("latent token count must be positive"));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::config(format!("eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Multiply-adds spent on attention logits and weighted sums per forward
    /// pass of the stack, for `n` input tokens.
    pub fn attention_flops(&self, n: usize) -> u64 {
        let width = (self.channels * self.s) as u64;
        let per_block = |t: u64| 2 * t * t * width;
        match self.latent {
            Some(m) => {
                let m = m as u64;
                2 * m * n as u64 * width + self.depth as u64 * per_block(m)
            }
            None => self.depth as u64 * per_block(n as u64),
        }
    }
}

/// Self-attention and a VN-MLP, each followed by a residual and a VN-LayerNorm.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: VnLayerNorm,
    pub mlp: VnMlp,
    pub norm2: VnLayerNorm,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cfg: &EncoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let attn = MultiHeadAttention::new(
            ps,
            &format!("{name}.attn"),
            c,
            c,
            c,
            cfg.heads,
            cfg.head_dim,
            cfg.s,
            cfg.eps,
            rng,
        )?;
        let norm1 = VnLayerNorm::new(ps, &format!("{name}.norm1"), c)?;
        let mlp = VnMlp::new(ps, &format!("{name}.mlp"), c, cfg.mlp_hidden, c, cfg.s, cfg.eps, true, rng)?;
        let norm2 = VnLayerNorm::new(ps, &format!("{name}.norm2"), c)?;
        Ok(EncoderBlock { attn, norm1, mlp, norm2 })
    }

    pub fn linears(&self) -> Vec<&VnLinear> {
        let mut out: Vec<&VnLinear> = self.attn.linears().to_vec();
        out.extend(self.mlp.linears());
        out
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.attn.forward(p, v, v, v)?;
        let x = self.norm1.forward(p, v.add(a)?)?;
        let m = self.mlp.forward(p, x)?;
        self.norm2.forward(p, x.add(m)?)
    }
}

/// `W_m [ (1/N) sum_n V_n ]` for each latent token `m`; `w` is `[M, C', C]`.
pub fn vn_mean_project<'t, T: Scalar>(v: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let (n, c, _) = vn_dims(&v.shape())?;
    let ws = w.shape();
    if ws.len() != 3 || ws[2] != c {
        return Err(Error::dim("vn_mean_project", &ws, &v.shape()));
    }
    if n == 0 {
        return Err(Error::EmptyInput("vn_mean_project"));
    }
    w.matmul(v.mean_axis(0)?)
}

/// Maps `N` tokens to `M` latent tokens: a mean projection supplies the
/// queries for attention over the original tokens.
#[derive(Debug, Clone)]
pub struct LatentReduce {
    pub w: ParamId,
    pub m: usize,
    pub attn: MultiHeadAttention,
}

impl LatentReduce {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cfg: &EncoderConfig, m: usize, rng: &mut SplitMix64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("latent token count must be positive"));
        }
        let c = cfg.channels;
        let w = ps.add_normal(format!("{name}.project"), &[m, c, c], (1.0 / c as f64).sqrt(), rng);
        let attn = MultiHeadAttention::new(
            ps,
            &format!("{name}.attn"),
            c,
            c,
            c,
            cfg.heads,
            cfg.head_dim,
            cfg.s,
            cfg.eps,
            rng,
        )?;
        Ok(LatentReduce { w, m, attn })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let latent = vn_mean_project(v, p.var(self.w))?;
        self.attn.forward(p, latent, v, v)
    }
}

/// Optional latent reduction followed by `depth` encoder blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub latent: Option<LatentReduce>,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cfg: &EncoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let latent = match cfg.latent {
            Some(m) => Some(LatentReduce::new(ps, &format!("{name}.latent"), cfg, m, rng)?),
            None => None,
        };
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(ps, &format!("{name}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { latent, blocks })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = match &self.latent {
            Some(l) => l.forward(p, v)?,
            None => v,
        };
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        Ok(x)
    }
}
