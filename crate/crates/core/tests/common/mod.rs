#![allow(dead_code)]

use vn_core::audit::{measure_delta, Contract, RotationGroup};
use vn_core::{eval, ParamSet, Result, SplitMix64, Tape, Tensor64, Var};

pub fn gaussian(shape: &[usize], rng: &mut SplitMix64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.normal())
}

pub fn clouds(count: usize, shape: &[usize], seed: u64) -> Vec<Tensor64> {
    let mut rng = SplitMix64::new(seed);
    (0..count).map(|_| gaussian(shape, &mut rng)).collect()
}

/// Max violation over every input and `n` uniform SO(3) rotations.
pub fn sweep<F>(f: F, inputs: &[Tensor64], contract: Contract, n: usize) -> f64
where
    F: Fn(usize, &Tensor64) -> Result<Tensor64> + Sync,
{
    measure_delta(f, inputs, contract, RotationGroup::Spatial, n, 7).unwrap().max
}

/// Runs `f` with the parameters bound frozen and `x` as a constant.
pub fn run<F>(ps: &ParamSet<f64>, x: &Tensor64, f: F) -> Result<Tensor64>
where
    F: for<'t> FnOnce(&vn_core::Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    eval(|tp| f(&ps.bind_frozen(tp), tp.constant(x.clone())))
}

/// Token permutation applied along axis 0.
pub fn permute_tokens(x: &Tensor64, perm: &[usize]) -> Tensor64 {
    let row = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(x.len());
    for &p in perm {
        data.extend_from_slice(&x.data()[p * row..(p + 1) * row]);
    }
    Tensor64::new(x.shape(), data).unwrap()
}

/// Finite-difference check of `loss` against reverse mode, over every entry
/// of every input. Returns the worst relative error over entries where the
/// central differences at `h` and `h / 2` agree (i.e. away from kinks) and
/// the number of entries that were skipped because they did not.
pub fn grad_check<F>(inputs: &[Tensor64], loss: F) -> (f64, usize)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor64> = {
        let tape = Tape::new();
        let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let l = loss(&tape, &leaves).unwrap();
        let g = tape.backward(l).unwrap();
        leaves.iter().map(|&v| g.wrt(v)).collect()
    };
    let value = |xs: &[Tensor64]| -> f64 {
        eval(|tp| {
            let vs: Vec<_> = xs.iter().map(|x| tp.constant(x.clone())).collect();
            loss(tp, &vs)
        })
        .unwrap()
        .item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            let mut at = |d: f64| {
                xs[i].data_mut()[j] = orig + d;
                value(&xs)
            };
            let (m1, m2, p2, p1) = (at(-h), at(-h / 2.0), at(h / 2.0), at(h));
            xs[i].data_mut()[j] = orig;
            let fd = (p1 - m1) / (2.0 * h);
            let fd_half = (p2 - m2) / h;
            let g = analytic[i].data()[j];
            let scale = g.abs().max(fd.abs()).max(1e-4);
            if (fd - fd_half).abs() > 2e-5 * scale {
                skipped += 1;
                continue;
            }
            worst = worst.max((g - fd).abs() / scale);
        }
    }
    (worst, skipped)
}
