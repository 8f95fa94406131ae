//! Measurement of equivariance violations, Lipschitz constants and bounds.
//!
//! The violation of `f` at input `X` and rotation `R` is
//! `||f(X R) - f(X) R||_F` for equivariant maps and `||f(X R) - f(X)||_F` for
//! invariant ones. Linear layers have certified bounds: a bias of norm `eps`
//! on `C'` output channels adds at most `2 eps sqrt(C')`, and the layer is
//! `sigma(W)`-Lipschitz. Composing layers folds these left to right. All
//! other layers are measured, and their Lipschitz constants are sampled lower
//! bounds, never certificates.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Deserialize;

use crate::attention::{EncoderBlock, EncoderConfig, LatentReduce, MultiHeadAttention};
use crate::autodiff::{eval, Var};
use crate::error::{Error, Result};
use crate::models::{canonicalize_biases, AnyModel, Classifier, Forecaster, FusionMode, Model, Normalizer};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SplitMix64;
use crate::rotation::{sample_rotation_with, Rotation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vn::{vn_mean_pool, VnInvariant, VnLayerNorm, VnLinear, VnRelu};

/// What a map promises under rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contract {
    /// `f(X R) = f(X) R`.
    Equivariant,
    /// `f(X R) = f(X)`.
    Invariant,
}

/// Which rotations a sweep draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationGroup {
    /// Uniform over `SO(S)` for the input width `S`.
    Full,
    /// Uniform over `SO(3)`, acting on the first three columns only.
    Spatial,
}

/// One measured violation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationSample {
    pub input: usize,
    pub rotation: usize,
    pub delta: f64,
}

/// Distribution of measured violations.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStats {
    pub max: f64,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub samples: Vec<ViolationSample>,
}

impl DeltaStats {
    pub fn from_samples(samples: Vec<ViolationSample>) -> Self {
        let mut d: Vec<f64> = samples.iter().map(|s| s.delta).collect();
        d.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            if d.is_empty() {
                0.0
            } else {
                d[((d.len() - 1) as f64 * p).round() as usize]
            }
        };
        let mean = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
        DeltaStats {
            max: d.last().copied().unwrap_or(0.0),
            mean,
            p50: q(0.5),
            p99: q(0.99),
            samples,
        }
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

/// Applies `r`, padded with an identity block if the last axis is wider.
pub fn rotate_width<T: Scalar>(x: &Tensor<T>, r: &Rotation<T>) -> Result<Tensor<T>> {
    let w = *x.shape().last().ok_or_else(|| Error::Shape("cannot rotate a scalar".into()))?;
    match w.cmp(&r.dim()) {
        std::cmp::Ordering::Equal => r.apply(x),
        std::cmp::Ordering::Greater => r.embed(w - r.dim()).apply(x),
        std::cmp::Ordering::Less => Err(Error::Contract(format!(
            "output width {w} is narrower than the rotation ({})",
            r.dim()
        ))),
    }
}

/// `count` rotations drawn from `seed`, in f64.
pub fn draw_rotations(width: usize, count: usize, seed: u64) -> Result<Vec<Rotation<f64>>> {
    let mut rng = SplitMix64::stream(seed, 0x726f74);
    (0..count).map(|_| sample_rotation_with(width, &mut rng)).collect()
}

/// Half-turns about uniformly random axes: the rotations that move a
/// perpendicular vector the furthest.
pub fn half_turns(count: usize, seed: u64) -> Vec<Rotation<f64>> {
    let mut rng = SplitMix64::stream(seed, 0x68616c66);
    (0..count)
        .map(|_| {
            let (x, y, z) = (rng.normal(), rng.normal(), rng.normal());
            // A unit quaternion with zero scalar part is a half-turn.
            Rotation::from_quaternion(0.0, x, y, z)
        })
        .collect()
}

/// Violations of `f` over every input and rotation.
///
/// `f` receives the input index so maps with side inputs (such as fixed
/// attributes) can look them up.
pub fn measure_delta_with<T, F>(f: F, inputs: &[Tensor<T>], contract: Contract, rotations: &[Rotation<f64>]) -> Result<DeltaStats>
where
    T: Scalar,
    F: Fn(usize, &Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let rots: Vec<Rotation<T>> = rotations.iter().map(|r| r.cast()).collect();
    let base: Vec<Tensor<T>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| f(i, x))
        .collect::<Result<_>>()?;
    if contract == Contract::Equivariant {
        if let (Some(r), Some(b)) = (rots.first(), base.first()) {
            rotate_width(b, r)?;
        }
    }
    let pairs: Vec<(usize, usize)> = (0..inputs.len())
        .flat_map(|i| (0..rots.len()).map(move |j| (i, j)))
        .collect();
    let samples = pairs
        .par_iter()
        .map(|&(i, j)| {
            let r = &rots[j];
            let moved = f(i, &rotate_width(&inputs[i], r)?)?;
            let expect = match contract {
                Contract::Equivariant => rotate_width(&base[i], r)?,
                Contract::Invariant => base[i].clone(),
            };
            let delta = moved.dist(&expect)?.to_f64_lossy();
            Ok(ViolationSample { input: i, rotation: j, delta })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaStats::from_samples(samples))
}

/// [`measure_delta_with`] over `n_rotations` uniform draws from `seed`.
pub fn measure_delta<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    contract: Contract,
    group: RotationGroup,
    n_rotations: usize,
    seed: u64,
) -> Result<DeltaStats>
where
    T: Scalar,
    F: Fn(usize, &Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let width = match group {
        RotationGroup::Spatial => 3,
        RotationGroup::Full => *inputs
            .first()
            .and_then(|x| x.shape().last())
            .ok_or(Error::EmptyInput("measure_delta"))?,
    };
    let rots = draw_rotations(width, n_rotations, seed)?;
    measure_delta_with(f, inputs, contract, &rots)
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &Tensor<f64>) -> Result<f64> {
    let (m, n) = match *w.shape() {
        [m, n] => (m, n),
        _ => return Err(Error::Shape(format!("spectral norm needs a matrix, got {:?}", w.shape()))),
    };
    let a = w.data();
    if a.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut rng = SplitMix64::new(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut sigma = 0.0f64;
    let mut wv = vec![0.0; m];
    for _ in 0..10_000 {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        for i in 0..m {
            wv[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
        }
        let next = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..m).map(|i| a[i * n + j] * wv[i]).sum();
        }
        if (next - sigma).abs() <= 1e-14 * next {
            return Ok(next);
        }
        sigma = next;
    }
    Err(Error::Numeric("power iteration did not converge in 10000 steps".into()))
}

/// Bound data for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBound {
    pub name: String,
    /// Violation bound (claimed for non-linear layers: 0).
    pub eps: f64,
    /// Lipschitz constant.
    pub lipschitz: f64,
    /// `true` when `lipschitz` is exact, `false` for sampled lower bounds.
    pub certified: bool,
}

/// Bound of a VN-Linear layer with bias norm `eps`: `(2 eps sqrt(C'), sigma(W))`.
pub fn linear_bound(name: &str, w: &Tensor<f64>, eps: f64) -> Result<LayerBound> {
    let c_out = w.shape().first().copied().unwrap_or(0);
    Ok(LayerBound {
        name: name.to_string(),
        eps: 2.0 * eps * (c_out as f64).sqrt(),
        lipschitz: spectral_norm(w)?,
        certified: true,
    })
}

/// `L_K(...(L_3(L_2 e_1 + e_2) + e_3)...) + e_K`.
pub fn composition_bound(bounds: &[LayerBound]) -> Result<f64> {
    let (first, rest) = bounds.split_first().ok_or(Error::EmptyInput("composition_bound"))?;
    Ok(rest.iter().fold(first.eps, |acc, b| b.lipschitz * acc + b.eps))
}

/// Largest observed `||f(x) - f(y)|| / ||x - y||` over sampled pairs.
///
/// Half the pairs are two different inputs, half an input and a small random
/// perturbation of it. The result is a lower bound on the Lipschitz constant.
pub fn lipschitz_estimate<T, F>(f: F, inputs: &[Tensor<T>], n_pairs: usize, seed: u64) -> Result<f64>
where
    T: Scalar,
    F: Fn(usize, &Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    if inputs.is_empty() {
        return Err(Error::EmptyInput("lipschitz_estimate"));
    }
    let mut rng = SplitMix64::stream(seed, 0x6c6970);
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let i = rng.below(inputs.len());
        let x = &inputs[i];
        let y = if k % 2 == 0 && inputs.len() > 1 {
            let j = rng.below(inputs.len());
            if inputs[j].shape() != x.shape() {
                continue;
            }
            inputs[j].clone()
        } else {
            let scale = 1e-3 * x.frobenius_norm().to_f64_lossy().max(1e-3) / (x.len().max(1) as f64).sqrt();
            let mut y = x.clone();
            for v in y.data_mut() {
                *v += T::of(scale * rng.normal());
            }
            y
        };
        pairs.push((i, y));
    }
    let ratios = pairs
        .par_iter()
        .map(|(i, y)| {
            let x = &inputs[*i];
            let dx = x.dist(y)?.to_f64_lossy();
            if dx == 0.0 {
                return Ok(None);
            }
            let dy = f(*i, x)?.dist(&f(*i, y)?)?.to_f64_lossy();
            Ok(Some(dy / dx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ratios.into_iter().flatten().fold(0.0, f64::max))
}

/// Audit settings.
#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub n_inputs: usize,
    pub n_rotations: usize,
    /// Points per synthetic input cloud.
    pub tokens: usize,
    /// Absolute slack on top of every bound (float noise).
    pub tol: f64,
    pub lipschitz_pairs: usize,
    pub seed: u64,
}

impl AuditConfig {
    /// Default tolerance for the scalar type: 1e-9 in f64, 1e-4 in f32.
    pub fn for_scalar<T: Scalar>() -> Self {
        AuditConfig {
            n_inputs: 8,
            n_rotations: 16,
            tokens: 24,
            tol: if T::NAME == "f32" { 1e-4 } else { 1e-9 },
            lipschitz_pairs: 32,
            seed: 0,
        }
    }
}

/// One measured piece of a model or stack.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub name: String,
    pub contract: Contract,
    pub delta: DeltaStats,
    /// Bound the measurement is checked against.
    pub bound: f64,
    /// Whether `bound` is a certificate or the exact-equivariance claim (0).
    pub certified: bool,
    pub lipschitz: Option<f64>,
    pub pass: bool,
}

/// A named yes/no check with a detail string.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Full audit result.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub subject: String,
    pub scalar: &'static str,
    pub tol: f64,
    pub layers: Vec<LayerBound>,
    pub stages: Vec<StageReport>,
    /// Fold of the certified linear bounds, or of the measured stage
    /// violations with sampled Lipschitz constants (`composition_certified`
    /// says which).
    pub composition: f64,
    pub composition_certified: bool,
    pub end_to_end: Option<StageReport>,
    pub checks: Vec<Check>,
    pub verdict: bool,
}

fn verdict_str(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

impl AuditReport {
    fn finish(mut self) -> Self {
        self.verdict = self.checks.iter().all(|c| c.pass)
            && self.stages.iter().all(|s| s.pass)
            && self.end_to_end.as_ref().is_none_or(|s| s.pass);
        self
    }

    /// Machine-parseable `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "verdict={}", verdict_str(self.verdict));
        let _ = writeln!(s, "subject={}", self.subject);
        let _ = writeln!(s, "scalar={}", self.scalar);
        let _ = writeln!(s, "tolerance={:e}", self.tol);
        let _ = writeln!(s, "composition_bound={:e}", self.composition);
        let _ = writeln!(s, "composition_certified={}", self.composition_certified);
        if let Some(e) = &self.end_to_end {
            let _ = writeln!(s, "end_to_end.contract={:?}", e.contract);
            let _ = writeln!(s, "end_to_end.samples={}", e.delta.count());
            let _ = writeln!(s, "end_to_end.max_delta={:e}", e.delta.max);
            let _ = writeln!(s, "end_to_end.mean_delta={:e}", e.delta.mean);
            let _ = writeln!(s, "end_to_end.p99_delta={:e}", e.delta.p99);
            let _ = writeln!(s, "end_to_end.bound={:e}", e.bound);
            let _ = writeln!(s, "end_to_end.verdict={}", verdict_str(e.pass));
        }
        for l in &self.layers {
            let kind = if l.certified { "exact" } else { "empirical" };
            let _ = writeln!(s, "layer.{}.eps_bound={:e}", l.name, l.eps);
            let _ = writeln!(s, "layer.{}.lipschitz={:e}", l.name, l.lipschitz);
            let _ = writeln!(s, "layer.{}.lipschitz_kind={kind}", l.name);
        }
        for st in &self.stages {
            let _ = writeln!(s, "stage.{}.contract={:?}", st.name, st.contract);
            let _ = writeln!(s, "stage.{}.max_delta={:e}", st.name, st.delta.max);
            let _ = writeln!(s, "stage.{}.mean_delta={:e}", st.name, st.delta.mean);
            let _ = writeln!(s, "stage.{}.bound={:e}", st.name, st.bound);
            let _ = writeln!(s, "stage.{}.bound_kind={}", st.name, if st.certified { "certified" } else { "claimed" });
            if let Some(l) = st.lipschitz {
                let _ = writeln!(s, "stage.{}.lipschitz_empirical={:e}", st.name, l);
            }
            let _ = writeln!(s, "stage.{}.verdict={}", st.name, verdict_str(st.pass));
        }
        for c in &self.checks {
            let _ = writeln!(s, "check.{}={} {}", c.name, verdict_str(c.pass), c.detail);
        }
        s
    }

    /// Per-sample violations as CSV: `stage,input,rotation,delta`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,input,rotation,delta\n");
        let all = self.stages.iter().chain(self.end_to_end.as_ref());
        for st in all {
            for v in &st.delta.samples {
                let _ = writeln!(s, "{},{},{},{:e}", st.name, v.input, v.rotation, v.delta);
            }
        }
        s
    }
}

fn gaussian_inputs<T: Scalar>(count: usize, shape: &[usize], rng: &mut SplitMix64) -> Vec<Tensor<T>> {
    (0..count).map(|_| Tensor::from_fn(shape, |_| T::of(rng.normal()))).collect()
}

/// Runs `f` on a frozen binding of `ps`.
fn run<T, F>(ps: &ParamSet<T>, x: &Tensor<T>, f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: for<'t> FnOnce(&Bound<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    eval(|tp| {
        let p = ps.bind_frozen(tp);
        f(&p, tp.constant(x.clone()))
    })
}

/// `W V + eps B` with the stored rows of `B` used as given.
fn linear_stored<'t, T: Scalar>(p: &Bound<'t, T>, l: &VnLinear, v: Var<'t, T>) -> Result<Var<'t, T>> {
    let out = p.var(l.w).matmul(v)?;
    match l.b {
        Some(b) if l.eps > 0.0 => out.add(p.var(b).scale(l.eps)),
        _ => Ok(out),
    }
}

fn bias_norm_check<T: Scalar>(ps: &ParamSet<T>, linears: &[(String, &VnLinear)]) -> Check {
    let mut worst = 0.0f64;
    let mut count = 0;
    for (_, l) in linears {
        if let Some(b) = l.b {
            let t = ps.get(b);
            let s = t.shape()[1];
            for row in t.data().chunks(s) {
                let n = row.iter().map(|&x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                worst = worst.max((n - 1.0).abs());
                count += 1;
            }
        }
    }
    let tol = if T::NAME == "f32" { 1e-6 } else { 1e-10 };
    Check {
        name: "bias_unit_norm".into(),
        pass: worst <= tol,
        detail: format!("rows={count} max_norm_error={worst:e}"),
    }
}

/// Per-layer certified bounds and measured violations for each VN-Linear,
/// with stored bias rows used as given.
fn audit_linears<T: Scalar>(
    ps: &ParamSet<T>,
    linears: &[(String, &VnLinear)],
    s: usize,
    cfg: &AuditConfig,
) -> Result<(Vec<LayerBound>, Vec<StageReport>)> {
    let mut bounds = Vec::new();
    let mut stages = Vec::new();
    let rots = draw_rotations(s, cfg.n_rotations, cfg.seed ^ 0x11)?;
    let mut rng = SplitMix64::stream(cfg.seed, 0x6c696e);
    for (name, l) in linears {
        let lb = linear_bound(name, &ps.get(l.w).cast::<f64>(), l.eps)?;
        // The bound is per token, so each input is a single token.
        let inputs = gaussian_inputs::<T>(cfg.n_inputs, &[1, l.c_in, s], &mut rng);
        let delta = measure_delta_with(
            |_, x| run(ps, x, |p, v| linear_stored(p, l, v)),
            &inputs,
            Contract::Equivariant,
            &rots,
        )?;
        stages.push(StageReport {
            name: format!("linear.{name}"),
            contract: Contract::Equivariant,
            pass: delta.max <= lb.eps + cfg.tol,
            bound: lb.eps,
            certified: true,
            lipschitz: None,
            delta,
        });
        bounds.push(lb);
    }
    Ok((bounds, stages))
}

type StageFn<'a, T> = Box<dyn Fn(usize, &Tensor<T>) -> Result<Tensor<T>> + Sync + 'a>;

/// Applies `f` to all channels but the last, which is passed through.
fn carry_last_channel<'a, T: Scalar>(on: bool, f: StageFn<'a, T>) -> StageFn<'a, T> {
    if !on {
        return f;
    }
    Box::new(move |i, x: &Tensor<T>| {
        let c = x.shape()[1];
        let y = f(i, &x.narrow(1, 0, c - 1)?)?;
        Tensor::concat(&[&y, &x.narrow(1, c - 1, 1)?], 1)
    })
}

/// Measures a chain of stages, feeding each one the previous outputs.
fn audit_stages<T: Scalar>(
    stages: Vec<(String, Contract, StageFn<'_, T>)>,
    mut inputs: Vec<Tensor<T>>,
    group: RotationGroup,
    cfg: &AuditConfig,
    exact: bool,
) -> Result<(Vec<StageReport>, f64)> {
    let mut out = Vec::new();
    let mut fold: Option<f64> = None;
    for (k, (name, contract, f)) in stages.into_iter().enumerate() {
        let delta = measure_delta(&f, &inputs, contract, group, cfg.n_rotations, cfg.seed ^ (k as u64 + 1))?;
        let lip = lipschitz_estimate(&f, &inputs, cfg.lipschitz_pairs, cfg.seed ^ (k as u64 + 100))?;
        fold = Some(match fold {
            None => delta.max,
            Some(acc) => lip * acc + delta.max,
        });
        let pass = !exact || delta.max <= cfg.tol;
        let next: Vec<Tensor<T>> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .collect::<Result<_>>()?;
        out.push(StageReport {
            name,
            contract,
            delta,
            bound: 0.0,
            certified: false,
            lipschitz: Some(lip),
            pass,
        });
        inputs = next;
        if contract == Contract::Invariant {
            break;
        }
    }
    Ok((out, fold.unwrap_or(0.0)))
}

fn random_clouds(cfg: &AuditConfig, d_a: usize, rng: &mut SplitMix64) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let pts = (0..cfg.n_inputs)
        .map(|_| Tensor::from_fn(&[cfg.tokens, 3], |_| rng.normal()))
        .collect();
    let attrs = (0..cfg.n_inputs)
        .map(|_| Tensor::from_fn(&[cfg.tokens, d_a], |_| rng.uniform()))
        .collect();
    (pts, attrs)
}

fn classifier_audit<T: Scalar>(m: &Classifier<T>, cfg: &AuditConfig, exact: bool) -> Result<(Vec<StageReport>, f64, StageReport)> {
    let mut rng = SplitMix64::stream(cfg.seed, 0x636c61);
    let (pts, attrs) = random_clouds(cfg, m.cfg.d_a, &mut rng);
    let tokens: Vec<Tensor<T>> = pts
        .iter()
        .zip(&attrs)
        .map(|(p, a)| {
            let pc = crate::models::AttributedPointCloud::new(p.clone(), a.clone(), crate::models::Target::None)?;
            m.tokens(&pc)
        })
        .collect::<Result<_>>()?;
    let ps = &m.params;
    let attrs_t: Vec<Tensor<T>> = attrs.iter().map(|a| a.cast()).collect();
    let late = m.cfg.fusion == FusionMode::LateFusion;
    let attr_of = |i: usize| late.then(|| attrs_t[i].clone());

    // Late fusion reads the input tokens again at the readout; they travel
    // through the equivariant stages as an untouched trailing channel.
    let carry = |f| carry_last_channel(late, f);
    let mut stages: Vec<(String, Contract, StageFn<'_, T>)> = Vec::new();
    stages.push(("embed".into(), Contract::Equivariant, carry(Box::new(move |_, x| run(ps, x, |p, v| m.embed.forward(p, v))))));
    if let Some(l) = &m.encoder.latent {
        stages.push(("latent".into(), Contract::Equivariant, carry(Box::new(move |_, x| run(ps, x, |p, v| l.forward(p, v))))));
    }
    for (i, b) in m.encoder.blocks.iter().enumerate() {
        stages.push((format!("block{i}"), Contract::Equivariant, carry(Box::new(move |_, x| run(ps, x, |p, v| b.forward(p, v))))));
    }
    let attr_of_ref = &attr_of;
    stages.push((
        "readout".into(),
        Contract::Invariant,
        Box::new(move |i, x| {
            let a = attr_of_ref(i);
            eval(|tp| m.readout_joined(&ps.bind_frozen(tp), tp.constant(x.clone()), a.map(|a| tp.constant(a))))
        }),
    ));
    let group = if m.cfg.fusion == FusionMode::EarlyFusion { RotationGroup::Full } else { RotationGroup::Spatial };
    let stage_inputs = if late {
        tokens.iter().map(|t| Tensor::concat(&[t, t], 1)).collect::<Result<_>>()?
    } else {
        tokens.clone()
    };
    let (reports, fold) = audit_stages(stages, stage_inputs, group, cfg, exact)?;

    let e2e = measure_delta(
        |i, x: &Tensor<T>| {
            let a = attr_of(i);
            eval(|tp| m.logits_from(&ps.bind_frozen(tp), tp.constant(x.clone()), a.map(|a| tp.constant(a))))
        },
        &tokens,
        Contract::Invariant,
        RotationGroup::Spatial,
        cfg.n_rotations,
        cfg.seed ^ 0xe2e,
    )?;
    let report = StageReport {
        name: "end_to_end".into(),
        contract: Contract::Invariant,
        pass: !exact || e2e.max <= cfg.tol,
        bound: 0.0,
        certified: false,
        lipschitz: None,
        delta: e2e,
    };
    Ok((reports, fold, report))
}

fn forecaster_audit<T: Scalar>(m: &Forecaster<T>, cfg: &AuditConfig, exact: bool) -> Result<(Vec<StageReport>, f64, StageReport)> {
    let mut rng = SplitMix64::stream(cfg.seed, 0x666f72);
    let (pts, _) = random_clouds(cfg, 0, &mut rng);
    let inputs: Vec<Tensor<T>> = pts.iter().map(|p| p.cast()).collect();
    let e2e = measure_delta(
        |_, x: &Tensor<T>| Ok(m.forecast(&x.cast::<f64>())?.cast::<T>()),
        &inputs,
        Contract::Equivariant,
        RotationGroup::Spatial,
        cfg.n_rotations,
        cfg.seed ^ 0xe2e,
    )?;
    let ps = &m.params;
    // Stage-wise view on normalized inputs.
    let tokens: Vec<Tensor<T>> = pts
        .iter()
        .map(|p| {
            let norm = Normalizer::fit(p);
            let x = norm.normalize(p);
            match m.cfg.fusion {
                FusionMode::EarlyFusion => {
                    let pc = crate::models::AttributedPointCloud::new(
                        x.clone(),
                        crate::models::trajectory_attrs(&x),
                        crate::models::Target::None,
                    )?;
                    crate::models::fuse_early(&pc)
                }
                _ => crate::models::spatial_tokens(&x),
            }
        })
        .collect::<Result<_>>()?;
    let mut stages: Vec<(String, Contract, StageFn<'_, T>)> = Vec::new();
    stages.push(("embed".into(), Contract::Equivariant, Box::new(move |_, x| run(ps, x, |p, v| m.embed.forward(p, v)))));
    if let Some(l) = &m.encoder.latent {
        stages.push(("latent".into(), Contract::Equivariant, Box::new(move |_, x| run(ps, x, |p, v| l.forward(p, v)))));
    }
    for (i, b) in m.encoder.blocks.iter().enumerate() {
        stages.push((format!("block{i}"), Contract::Equivariant, Box::new(move |_, x| run(ps, x, |p, v| b.forward(p, v)))));
    }
    if m.gate.is_none() {
        stages.push((
            "head".into(),
            Contract::Equivariant,
            Box::new(move |_, x| run(ps, x, |p, v| m.head.forward(p, vn_mean_pool(v)?))),
        ));
    }
    let group = if m.cfg.fusion == FusionMode::EarlyFusion { RotationGroup::Full } else { RotationGroup::Spatial };
    let (reports, fold) = audit_stages(stages, tokens, group, cfg, exact)?;
    let report = StageReport {
        name: "end_to_end".into(),
        contract: Contract::Equivariant,
        pass: !exact || e2e.max <= cfg.tol,
        bound: 0.0,
        certified: false,
        lipschitz: None,
        delta: e2e,
    };
    Ok((reports, fold, report))
}

/// Audits a model whose bias rows are stored as unit directions (as in a
/// checkpoint). Violated bias normalization, layer bounds, or (for `eps = 0`
/// models) any measurable violation make the verdict FAIL.
pub fn audit_stored<T: Scalar>(model: &AnyModel<T>, cfg: &AuditConfig) -> Result<AuditReport> {
    let linears = model.vn_linears();
    let ps = model.params();
    let mut checks = vec![];
    let (subject, s, eps) = match model {
        AnyModel::Classifier(m) => {
            let e = m.cfg.resolved_encoder();
            (format!("classifier/{}", m.cfg.fusion), e.s, e.eps)
        }
        AnyModel::Forecaster(m) => {
            let e = m.cfg.resolved_encoder();
            (format!("forecaster/{}", m.cfg.fusion), e.s, e.eps)
        }
        AnyModel::Vanilla(_) => ("vanilla".to_string(), 3, 0.0),
    };
    let exact = eps == 0.0;
    if !linears.is_empty() {
        checks.push(bias_norm_check(ps, &linears));
    }
    let (layers, mut stages) = audit_linears(ps, &linears, s, cfg)?;
    let (stage_reports, fold, e2e) = match model {
        AnyModel::Classifier(m) => classifier_audit(m, cfg, exact)?,
        AnyModel::Forecaster(m) => forecaster_audit(m, cfg, exact)?,
        AnyModel::Vanilla(v) => vanilla_audit(v, cfg)?,
    };
    stages.extend(stage_reports);
    // With eps = 0 every layer is exact and the certified bound is 0.
    let (composition, composition_certified) = if exact { (0.0, true) } else { (fold, false) };
    Ok(AuditReport {
        subject,
        scalar: T::NAME,
        tol: cfg.tol,
        layers,
        stages,
        composition,
        composition_certified,
        end_to_end: Some(e2e),
        checks,
        verdict: false,
    }
    .finish())
}

fn vanilla_audit<T: Scalar>(
    m: &crate::baseline::VanillaModel<T>,
    cfg: &AuditConfig,
) -> Result<(Vec<StageReport>, f64, StageReport)> {
    let mut rng = SplitMix64::stream(cfg.seed, 0x76616e);
    let (pts, attrs) = random_clouds(cfg, m.cfg.d_a, &mut rng);
    let contract = if m.cfg.classes.is_some() { Contract::Invariant } else { Contract::Equivariant };
    let clouds: Vec<Tensor<T>> = pts.iter().map(|p| p.cast()).collect();
    let e2e = measure_delta(
        |i, x: &Tensor<T>| {
            let pc = crate::models::AttributedPointCloud::new(x.cast(), attrs[i].clone(), crate::models::Target::None)?;
            match m.predict(&pc)? {
                crate::models::Prediction::Logits(l) => Tensor::<f64>::from_f64(&[l.len()], &l).map(|t| t.cast::<T>()),
                crate::models::Prediction::Trajectory(t) => Ok(t.cast()),
            }
        },
        &clouds,
        contract,
        RotationGroup::Spatial,
        cfg.n_rotations,
        cfg.seed ^ 0xe2e,
    )?;
    Ok((
        Vec::new(),
        e2e.max,
        StageReport {
            name: "end_to_end".into(),
            contract,
            pass: e2e.max <= cfg.tol,
            bound: 0.0,
            certified: false,
            lipschitz: None,
            delta: e2e,
        },
    ))
}

/// Audits an in-memory model: bias rows are first brought to unit length (as
/// a checkpoint would store them), then [`audit_stored`] runs.
pub fn audit_model<T: Scalar>(model: &AnyModel<T>, cfg: &AuditConfig) -> Result<AuditReport> {
    let mut copy = model.config().build::<T>(0)?;
    copy.params_mut().assign_from(model.params())?;
    canonicalize_biases(&mut copy);
    audit_stored(&copy, cfg)
}

/// Kind of a declared layer in a [`StackSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    LinearBias,
    Relu,
    LayerNorm,
    MeanPool,
    Attention,
    EncoderBlock,
    Latent,
    Invariant,
    /// Negative control: bias added without normalizing its rows.
    BrokenBias,
    /// Negative control: coordinate-wise ReLU after a linear map.
    BrokenLinear,
}

/// One declared layer.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output channels for linear kinds, latent tokens for `latent`.
    #[serde(default)]
    pub out: Option<usize>,
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub heads: Option<usize>,
    #[serde(default)]
    pub hidden: Option<usize>,
}

/// A declarative chain of layers to audit.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    #[serde(default = "default_s")]
    pub s: usize,
    /// Input channels.
    pub channels: usize,
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

fn default_s() -> usize {
    3
}

fn default_tokens() -> usize {
    8
}

impl StackSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad layer spec: {e}")))
    }
}

#[derive(Debug, Clone)]
enum StackLayer {
    Linear(VnLinear),
    Relu(VnRelu),
    LayerNorm(VnLayerNorm),
    MeanPool,
    Attention(MultiHeadAttention),
    Block(Box<EncoderBlock>),
    Latent(LatentReduce),
    Invariant(VnInvariant),
    BrokenBias { w: ParamId, b: ParamId, eps: f64 },
    BrokenLinear { w: ParamId },
}

/// A built chain of layers from a [`StackSpec`].
pub struct LayerStack<T> {
    pub spec: StackSpec,
    pub params: ParamSet<T>,
    layers: Vec<(String, StackLayer)>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn build(spec: StackSpec) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::config("layer spec declares no layers"));
        }
        let s = spec.s;
        let mut rng = SplitMix64::stream(spec.seed, 0x737461);
        let mut ps = ParamSet::new();
        let mut c = spec.channels;
        let mut layers = Vec::new();
        for (i, l) in spec.layers.iter().enumerate() {
            let name = format!("l{i}");
            if matches!(layers.last(), Some((_, StackLayer::Invariant(_)))) {
                return Err(Error::config("invariant must be the last layer"));
            }
            let out = l.out.unwrap_or(c);
            let heads = l.heads.unwrap_or(1);
            let enc = |c: usize| EncoderConfig {
                depth: 1,
                channels: c,
                heads,
                head_dim: c / heads.max(1),
                mlp_hidden: l.hidden.unwrap_or(c),
                eps: l.eps,
                latent: None,
                s,
            };
            let layer = match l.kind {
                LayerKind::Linear => StackLayer::Linear(VnLinear::new(&mut ps, &name, c, out, s, 0.0, &mut rng)?),
                LayerKind::LinearBias => StackLayer::Linear(VnLinear::new(&mut ps, &name, c, out, s, l.eps, &mut rng)?),
                LayerKind::Relu => StackLayer::Relu(VnRelu::new(&mut ps, &name, c, &mut rng)?),
                LayerKind::LayerNorm => StackLayer::LayerNorm(VnLayerNorm::new(&mut ps, &name, c)?),
                LayerKind::MeanPool => StackLayer::MeanPool,
                LayerKind::Attention => {
                    let hd = c / heads.max(1);
                    StackLayer::Attention(MultiHeadAttention::new(&mut ps, &name, c, c, c, heads, hd, s, l.eps, &mut rng)?)
                }
                LayerKind::EncoderBlock => StackLayer::Block(Box::new(EncoderBlock::new(&mut ps, &name, &enc(c), &mut rng)?)),
                LayerKind::Latent => {
                    let m = l.out.ok_or_else(|| Error::config("latent layer needs `out` (token count)"))?;
                    StackLayer::Latent(LatentReduce::new(&mut ps, &name, &enc(c), m, &mut rng)?)
                }
                LayerKind::Invariant => StackLayer::Invariant(VnInvariant::new(&mut ps, &name, c, s, l.eps, &mut rng)?),
                LayerKind::BrokenBias => {
                    if l.eps.is_nan() || l.eps < 0.0 {
                        return Err(Error::config("broken_bias needs eps >= 0"));
                    }
                    let w = ps.add_normal(format!("{name}.w"), &[out, c], (1.0 / c as f64).sqrt(), &mut rng);
                    let b = ps.add_normal(format!("{name}.b"), &[out, s], 10.0, &mut rng);
                    StackLayer::BrokenBias { w, b, eps: l.eps }
                }
                LayerKind::BrokenLinear => {
                    let w = ps.add_normal(format!("{name}.w"), &[out, c], (1.0 / c as f64).sqrt(), &mut rng);
                    StackLayer::BrokenLinear { w }
                }
            };
            c = match (&layer, l.kind) {
                (StackLayer::Linear(_), _) | (_, LayerKind::BrokenBias) | (_, LayerKind::BrokenLinear) => out,
                _ => c,
            };
            layers.push((format!("{name}.{}", kind_name(l.kind)), layer));
        }
        Ok(LayerStack { spec, params: ps, layers })
    }

    fn forward_one<'t>(&self, p: &Bound<'t, T>, layer: &StackLayer, v: Var<'t, T>) -> Result<Var<'t, T>> {
        match layer {
            StackLayer::Linear(l) => l.forward(p, v),
            StackLayer::Relu(r) => r.forward(p, v),
            StackLayer::LayerNorm(n) => n.forward(p, v),
            StackLayer::MeanPool => vn_mean_pool(v),
            StackLayer::Attention(a) => a.forward(p, v, v, v),
            StackLayer::Block(b) => b.forward(p, v),
            StackLayer::Latent(l) => l.forward(p, v),
            StackLayer::Invariant(i) => i.forward(p, v),
            StackLayer::BrokenBias { w, b, eps } => p.var(*w).matmul(v)?.add(p.var(*b).scale(*eps)),
            StackLayer::BrokenLinear { w } => Ok(p.var(*w).matmul(v)?.relu()),
        }
    }

    /// Output of layers `range` applied to `x`.
    pub fn forward_range(&self, x: &Tensor<T>, range: std::ops::Range<usize>) -> Result<Tensor<T>> {
        run(&self.params, x, |p, mut v| {
            for (_, l) in &self.layers[range] {
                v = self.forward_one(p, l, v)?;
            }
            Ok(v)
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Claimed or certified bound for layer `i` (`None` when only sampled).
    fn bound(&self, i: usize, inputs: &[Tensor<T>], cfg: &AuditConfig) -> Result<LayerBound> {
        let (name, layer) = &self.layers[i];
        let f = |_: usize, x: &Tensor<T>| self.forward_range(x, i..i + 1);
        // Token-wise bounds hold per token; over N tokens the Frobenius
        // violation grows by sqrt(N).
        let tokens = inputs.first().map_or(1, |x| x.shape()[0]) as f64;
        let per_token = |w: ParamId, eps: f64| -> Result<LayerBound> {
            let mut b = linear_bound(name, &self.params.get(w).cast(), eps)?;
            b.eps *= tokens.sqrt();
            Ok(b)
        };
        Ok(match layer {
            StackLayer::Linear(l) => per_token(l.w, l.eps)?,
            // Claimed as a properly normalized bias; the measurement decides.
            StackLayer::BrokenBias { w, eps, .. } => per_token(*w, *eps)?,
            StackLayer::BrokenLinear { w } => per_token(*w, 0.0)?,
            _ => LayerBound {
                name: name.clone(),
                eps: 0.0,
                lipschitz: lipschitz_estimate(f, inputs, cfg.lipschitz_pairs, cfg.seed ^ (i as u64 + 7))?,
                certified: false,
            },
        })
    }
}

fn kind_name(k: LayerKind) -> &'static str {
    match k {
        LayerKind::Linear => "linear",
        LayerKind::LinearBias => "linear_bias",
        LayerKind::Relu => "relu",
        LayerKind::LayerNorm => "layer_norm",
        LayerKind::MeanPool => "mean_pool",
        LayerKind::Attention => "attention",
        LayerKind::EncoderBlock => "encoder_block",
        LayerKind::Latent => "latent",
        LayerKind::Invariant => "invariant",
        LayerKind::BrokenBias => "broken_bias",
        LayerKind::BrokenLinear => "broken_linear",
    }
}

/// Audits a declared stack: each layer against its own bound, and the whole
/// chain against the folded bound.
pub fn audit_stack<T: Scalar>(stack: &LayerStack<T>, cfg: &AuditConfig) -> Result<AuditReport> {
    let s = stack.spec.s;
    let mut rng = SplitMix64::stream(cfg.seed, 0x737475);
    let mut inputs = gaussian_inputs::<T>(cfg.n_inputs, &[stack.spec.tokens, stack.spec.channels, s], &mut rng);
    let rots = draw_rotations(s, cfg.n_rotations, cfg.seed ^ 0x5)?;
    let mut layers = Vec::new();
    let mut stages = Vec::new();
    let mut invariant_tail = false;
    for i in 0..stack.len() {
        let contract = if matches!(stack.layers[i].1, StackLayer::Invariant(_)) {
            invariant_tail = true;
            Contract::Invariant
        } else {
            Contract::Equivariant
        };
        let f = |_: usize, x: &Tensor<T>| stack.forward_range(x, i..i + 1);
        let lb = stack.bound(i, &inputs, cfg)?;
        let delta = measure_delta_with(f, &inputs, contract, &rots)?;
        stages.push(StageReport {
            name: stack.layers[i].0.clone(),
            contract,
            pass: delta.max <= lb.eps + cfg.tol,
            bound: lb.eps,
            certified: lb.certified,
            lipschitz: (!lb.certified).then_some(lb.lipschitz),
            delta,
        });
        layers.push(lb);
        inputs = inputs.iter().map(|x| f(0, x)).collect::<Result<_>>()?;
    }
    let composition = composition_bound(&layers)?;
    let certified = layers.iter().skip(1).all(|l| l.certified);
    let contract = if invariant_tail { Contract::Invariant } else { Contract::Equivariant };
    let mut rng = SplitMix64::stream(cfg.seed, 0x737475);
    let first = gaussian_inputs::<T>(cfg.n_inputs, &[stack.spec.tokens, stack.spec.channels, s], &mut rng);
    let n = stack.len();
    let delta = measure_delta_with(|_, x| stack.forward_range(x, 0..n), &first, contract, &rots)?;
    let e2e = StageReport {
        name: "end_to_end".into(),
        contract,
        pass: delta.max <= composition + cfg.tol,
        bound: composition,
        certified,
        lipschitz: None,
        delta,
    };
    Ok(AuditReport {
        subject: format!("stack/{n}"),
        scalar: T::NAME,
        tol: cfg.tol,
        layers,
        stages,
        composition,
        composition_certified: certified,
        end_to_end: Some(e2e),
        checks: Vec::new(),
        verdict: false,
    }
    .finish())
}
