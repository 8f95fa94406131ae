//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p vn-core --test acceptance -- 3 7` runs a subset.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use vn_core::attention::{
    attention_matrix, frobenius_ip, vn_attn, vn_mean_project, EncoderBlock, EncoderConfig, LatentReduce,
    MultiHeadAttention,
};
use vn_core::audit::{
    audit_stack, audit_stored, draw_rotations, half_turns, linear_bound, measure_delta, measure_delta_with,
    spectral_norm, AuditConfig, Contract, LayerStack, RotationGroup, StackSpec,
};
use vn_core::baseline::VanillaConfig;
use vn_core::data::{gen_polka, gen_shapes, gen_trajectories, PolkaSpec, ShapeKind, ShapesSpec, TrajFrame, TrajSpec};
use vn_core::models::{AnyModel, ClassifierConfig, ForecasterConfig, ModelConfig};
use vn_core::nn::cross_entropy;
use vn_core::train::{bench_encoder, evaluate, stability_run, EvalMetrics};
use vn_core::vn::{vn_layer_norm, vn_linear, vn_linear_with_bias, vn_mean_pool, vn_relu, VnInvariant, VnLinear};
use vn_core::{
    eval, AttributedPointCloud, Classifier, Dataset, FusionMode, Model, ParamSet, Result, RunConfig, SplitMix64, Tape,
    Tensor64, TrainOptions, Trainer, Var,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // The stability criterion is a qualitative claim: its outcome is reported
    // either way and does not set the exit status.
    let criteria: [(usize, &str, f64, Criterion); 11] = [
        (1, "exact equivariance of eps=0 ops", 120.0, c1_exact_equivariance),
        (2, "invariance of readouts and logits", 120.0, c2_invariance),
        (3, "bias bound 2 eps sqrt(C')", 60.0, c3_bias_bound),
        (4, "composition bound and spectral norm", 60.0, c4_composition),
        (5, "finite-difference gradients", 300.0, c5_gradients),
        (6, "shapes classification", 600.0, c6_classification),
        (7, "fusion efficacy on polka dots", 900.0, c7_fusion),
        (8, "forecasting equivariance", 900.0, c8_forecasting),
        (9, "latent-token speed and accuracy", 1200.0, c9_latent),
        (10, "single-precision stability", 900.0, c10_stability),
        (11, "auditor negative controls", 60.0, c11_auditor),
    ];
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs <= budget;
        let pass = out.pass && in_time;
        let gating = n != 10;
        if !pass && gating {
            failed += 1;
        }
        let timing = if in_time { format!("{secs:.1}s") } else { format!("{secs:.1}s over {budget:.0}s budget") };
        let status = match (pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported, not gating)",
        };
        println!("criterion {n:>2} {status}: {name}: {} [{timing}]", out.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn gaussian(shape: &[usize], rng: &mut SplitMix64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.normal())
}

fn clouds(count: usize, shape: &[usize], seed: u64) -> Vec<Tensor64> {
    let mut rng = SplitMix64::new(seed);
    (0..count).map(|_| gaussian(shape, &mut rng)).collect()
}

/// Max violation of `f` over 100 inputs and 100 uniform rotations.
fn sweep<F>(f: F, inputs: &[Tensor64], contract: Contract, seed: u64) -> Result<f64>
where
    F: Fn(usize, &Tensor64) -> Result<Tensor64> + Sync,
{
    Ok(measure_delta(f, inputs, contract, RotationGroup::Spatial, 100, seed)?.max)
}

fn on_tape<F>(ps: &ParamSet<f64>, x: &Tensor64, f: F) -> Result<Tensor64>
where
    F: for<'t> FnOnce(&ParamSet<f64>, &'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    eval(|tp| f(ps, tp, tp.constant(x.clone())))
}

fn split3<'t>(v: Var<'t, f64>, n: usize) -> Result<(Var<'t, f64>, Var<'t, f64>, Var<'t, f64>)> {
    Ok((v.narrow(0, 0, n)?, v.narrow(0, n, n)?, v.narrow(0, 2 * n, n)?))
}

fn small_encoder(eps: f64) -> EncoderConfig {
    EncoderConfig { depth: 1, channels: 4, heads: 2, head_dim: 2, mlp_hidden: 4, eps, latent: None, s: 3 }
}

fn c1_exact_equivariance() -> Result<Outcome> {
    let (n, c) = (6, 4);
    let mut rng = SplitMix64::new(11);
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add_normal("w", &[5, c], 0.5, &mut rng);
    let u = ps.add_normal("u", &[c, c], 0.5, &mut rng);
    let wr = ps.add_normal("wr", &[c, c], 0.5, &mut rng);
    let gain = ps.add_normal("gain", &[c], 1.0, &mut rng);
    let offset = ps.add_normal("offset", &[c], 1.0, &mut rng);
    let wm = ps.add_normal("wm", &[3, c, c], 0.5, &mut rng);
    let enc = small_encoder(0.0);
    let mha = MultiHeadAttention::new(&mut ps, "mha", c, c, c, 2, 2, 3, 0.0, &mut rng)?;
    let block = EncoderBlock::new(&mut ps, "block", &enc, &mut rng)?;
    let latent = LatentReduce::new(&mut ps, "latent", &enc, 3, &mut rng)?;

    let single = clouds(100, &[n, c, 3], 1);
    let triple = clouds(100, &[3 * n, c, 3], 2);
    let ps = &ps;
    let mut worst = Vec::new();
    let mut run = |name: &str, contract, f: &(dyn Fn(usize, &Tensor64) -> Result<Tensor64> + Sync), inputs: &[Tensor64]| -> Result<()> {
        worst.push((name.to_string(), sweep(f, inputs, contract, 0xc1)?));
        Ok(())
    };
    use Contract::{Equivariant as E, Invariant as I};
    run("vn_linear", E, &|_, x| on_tape(ps, x, |ps, tp, v| vn_linear(v, tp.constant(ps.get(w).clone()))), &single)?;
    run(
        "vn_relu",
        E,
        &|_, x| on_tape(ps, x, |ps, tp, v| vn_relu(v, tp.constant(ps.get(wr).clone()), tp.constant(ps.get(u).clone()))),
        &single,
    )?;
    run(
        "vn_layer_norm",
        E,
        &|_, x| {
            on_tape(ps, x, |ps, tp, v| {
                vn_layer_norm(v, tp.constant(ps.get(gain).clone()), tp.constant(ps.get(offset).clone()))
            })
        },
        &single,
    )?;
    run("vn_mean_pool", E, &|_, x| on_tape(ps, x, |_, _, v| vn_mean_pool(v)), &single)?;
    run(
        "attention_matrix",
        I,
        &|_, x| on_tape(ps, x, |_, _, v| attention_matrix(v.narrow(0, 0, 2)?, v.narrow(0, 2, n - 2)?)),
        &single,
    )?;
    run(
        "vn_attn",
        E,
        &|_, x| {
            on_tape(ps, x, |_, _, v| {
                let (q, k, z) = split3(v, n)?;
                vn_attn(q, k, z)
            })
        },
        &triple,
    )?;
    run(
        "vn_multi_head_attn",
        E,
        &|_, x| {
            on_tape(ps, x, |ps, tp, v| {
                let (q, k, z) = split3(v, n)?;
                mha.forward(&ps.bind_frozen(tp), q, k, z)
            })
        },
        &triple,
    )?;
    run("encoder_block", E, &|_, x| on_tape(ps, x, |ps, tp, v| block.forward(&ps.bind_frozen(tp), v)), &single)?;
    run(
        "vn_mean_project",
        E,
        &|_, x| on_tape(ps, x, |ps, tp, v| vn_mean_project(v, tp.constant(ps.get(wm).clone()))),
        &single,
    )?;
    run("latent_reduce", E, &|_, x| on_tape(ps, x, |ps, tp, v| latent.forward(&ps.bind_frozen(tp), v)), &single)?;

    let max = worst.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    let (name, _) = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("ops");
    Ok(Outcome::new(
        max <= 1e-9,
        format!("{} ops x 100 inputs x 100 rotations, max delta {max:.2e} ({name}) <= 1e-9", worst.len()),
    ))
}

fn classifier(fusion: FusionMode, d_a: usize, eps: f64, seed: u64) -> Result<Classifier<f64>> {
    let encoder = EncoderConfig { depth: 2, channels: 8, heads: 2, head_dim: 4, mlp_hidden: 8, eps, latent: None, s: 3 };
    Classifier::new(
        ClassifierConfig { classes: 3, fusion, d_a: if fusion == FusionMode::SpatialOnly { 0 } else { d_a }, head_hidden: 16, attr_hidden: 8, encoder },
        seed,
    )
}

fn c2_invariance() -> Result<Outcome> {
    let mut rng = SplitMix64::new(21);
    let mut ps = ParamSet::<f64>::new();
    let inv = VnInvariant::new(&mut ps, "inv", 4, 3, 0.0, &mut rng)?;
    let pairs = clouds(100, &[2, 4, 3], 3);
    let tokens = clouds(100, &[6, 4, 3], 4);
    let mut parts = Vec::new();
    parts.push((
        "frobenius_ip",
        sweep(
            |_, x| {
                let a = x.narrow(0, 0, 1)?;
                let b = x.narrow(0, 1, 1)?;
                Ok(Tensor64::scalar(frobenius_ip(&a, &b)?))
            },
            &pairs,
            Contract::Invariant,
            0xc2,
        )?,
    ));
    parts.push((
        "vn_invariant",
        sweep(|_, x| on_tape(&ps, x, |ps, tp, v| inv.forward(&ps.bind_frozen(tp), v)), &tokens, Contract::Invariant, 0xc2)?,
    ));
    parts.push((
        "attention_matrix",
        sweep(
            |_, x| on_tape(&ps, x, |_, _, v| attention_matrix(v.narrow(0, 0, 3)?, v.narrow(0, 3, 3)?)),
            &tokens,
            Contract::Invariant,
            0xc2,
        )?,
    ));
    // Logits under rotation of the spatial coordinates, attributes held fixed.
    let d_a = 2;
    let points = clouds(100, &[12, 3], 5);
    let mut arng = SplitMix64::new(6);
    let attrs: Vec<Tensor64> = (0..100).map(|_| gaussian(&[12, d_a], &mut arng)).collect();
    for (name, fusion) in [
        ("logits/spatial", FusionMode::SpatialOnly),
        ("logits/early", FusionMode::EarlyFusion),
        ("logits/late", FusionMode::LateFusion),
    ] {
        let m = classifier(fusion, d_a, 0.0, 7)?;
        let delta = sweep(
            |i, x| {
                let pc = AttributedPointCloud::new(x.clone(), attrs[i].clone(), vn_core::Target::None)?;
                eval(|tp| m.logits(&m.params.bind_frozen(tp), tp, &pc))
            },
            &points,
            Contract::Invariant,
            0xc2,
        )?;
        parts.push((name, delta));
    }
    let max = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    let list: Vec<String> = parts.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect();
    Ok(Outcome::new(max <= 1e-6, format!("max deviation {max:.2e} <= 1e-6; {}", list.join(", "))))
}

fn c3_bias_bound() -> Result<Outcome> {
    let mut worst_ratio = 0.0f64;
    let mut violations = 0;
    let mut total = 0;
    let mut rng = SplitMix64::new(31);
    for eps in [1e-6, 1e-3, 1e-1] {
        for c_out in [1usize, 4, 16] {
            let c_in = 4;
            let w = gaussian(&[c_out, c_in], &mut rng);
            let b = gaussian(&[c_out, 3], &mut rng);
            let inputs = clouds(10, &[1, c_in, 3], rng.next_u64());
            // Half uniform draws, half half-turns (the worst case for a single row).
            let mut rots = draw_rotations(3, 50, rng.next_u64())?;
            rots.extend(half_turns(50, rng.next_u64()));
            let f = |_: usize, x: &Tensor64| {
                eval(|tp| vn_linear_with_bias(tp.constant(x.clone()), tp.constant(w.clone()), tp.constant(b.clone()), eps))
            };
            let stats = measure_delta_with(f, &inputs, Contract::Equivariant, &rots)?;
            let bound = 2.0 * eps * (c_out as f64).sqrt();
            for s in &stats.samples {
                total += 1;
                // Slack covers rounding in the bias-free part only.
                if s.delta > bound + 1e-13 {
                    violations += 1;
                }
                worst_ratio = worst_ratio.max(s.delta / bound);
            }
        }
    }
    Ok(Outcome::new(
        violations == 0 && worst_ratio > 0.5,
        format!("{total} samples, {violations} above 2 eps sqrt(C'), max ratio {worst_ratio:.4} (expected > 0.5)"),
    ))
}

fn svd_sigma(w: &Tensor64) -> f64 {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mat = DMatrix::from_row_slice(m, n, w.data());
    mat.singular_values().max()
}

fn c4_composition() -> Result<Outcome> {
    let mut rng = SplitMix64::new(41);
    let mut violations = 0;
    let mut total = 0;
    let mut tightest = 0.0f64;
    let mut sigma_err = 0.0f64;
    for k in [2usize, 3, 5] {
        let mut ps = ParamSet::<f64>::new();
        let widths: Vec<usize> = (0..=k).map(|_| 2 + rng.below(6)).collect();
        let eps: Vec<f64> = (0..k).map(|_| [1e-3, 1e-2, 1e-1][rng.below(3)]).collect();
        let layers: Vec<VnLinear> = (0..k)
            .map(|i| VnLinear::new(&mut ps, &format!("l{i}"), widths[i], widths[i + 1], 3, eps[i], &mut rng))
            .collect::<Result<_>>()?;
        let mut bounds = Vec::new();
        for l in &layers {
            let w = ps.get(l.w);
            let lb = linear_bound("l", w, l.eps)?;
            sigma_err = sigma_err.max((lb.lipschitz - svd_sigma(w)).abs());
            bounds.push(lb);
        }
        let bound = vn_core::audit::composition_bound(&bounds)?;
        let inputs = clouds(10, &[1, widths[0], 3], rng.next_u64());
        let mut rots = draw_rotations(3, 50, rng.next_u64())?;
        rots.extend(half_turns(50, rng.next_u64()));
        let f = |_: usize, x: &Tensor64| {
            on_tape(&ps, x, |ps, tp, mut v| {
                let p = ps.bind_frozen(tp);
                for l in &layers {
                    v = l.forward(&p, v)?;
                }
                Ok(v)
            })
        };
        let stats = measure_delta_with(f, &inputs, Contract::Equivariant, &rots)?;
        for s in &stats.samples {
            total += 1;
            if s.delta > bound + 1e-12 {
                violations += 1;
            }
            tightest = tightest.max(s.delta / bound);
        }
    }
    // A matrix with a known spectrum as an extra check of the power iteration.
    let mut r = SplitMix64::new(42);
    let w = gaussian(&[7, 5], &mut r);
    sigma_err = sigma_err.max((spectral_norm(&w)? - svd_sigma(&w)).abs());
    Ok(Outcome::new(
        violations == 0 && sigma_err <= 1e-8,
        format!("{total} samples, {violations} above the folded bound (max ratio {tightest:.3}); |sigma - svd| max {sigma_err:.1e} <= 1e-8"),
    ))
}

/// Losses at `x - h`, `x - h/2`, `x + h/2`, `x + h`.
fn probe(mut loss: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<[f64; 4]> {
    Ok([loss(-h)?, loss(-h / 2.0)?, loss(h / 2.0)?, loss(h)?])
}

/// Outcome of one entry: relative error of the central difference at `h`
/// against `g`, and whether the difference at `h / 2` agrees closely enough
/// with it for that error to mean anything (it does not near a kink).
fn fd_entry(g: f64, p: [f64; 4], h: f64) -> (f64, bool) {
    let fd = (p[3] - p[0]) / (2.0 * h);
    let fd_half = (p[2] - p[1]) / h;
    // The floor sits well above the rounding noise of the difference quotient.
    let scale = g.abs().max(fd.abs()).max(1e-4);
    ((g - fd).abs() / scale, (fd - fd_half).abs() <= 2e-5 * scale)
}

/// Every parameter and input entry of a freshly initialized classifier at
/// one random input: (worst relative error over resolved entries, entries
/// where finite differences are unresolved, entries).
fn fd_point(seed: u64) -> Result<(f64, usize, usize)> {
    let encoder = EncoderConfig { depth: 2, channels: 8, heads: 2, head_dim: 4, mlp_hidden: 8, eps: 1e-2, latent: None, s: 3 };
    let cfg = ClassifierConfig { classes: 3, fusion: FusionMode::SpatialOnly, d_a: 0, head_hidden: 8, attr_hidden: 8, encoder };
    let mut model = Classifier::<f64>::new(cfg, seed)?;
    let mut rng = SplitMix64::stream(seed, 5);
    let label = rng.below(3);
    let pc = AttributedPointCloud::spatial(gaussian(&[8, 3], &mut rng), vn_core::Target::Class(label))?;
    let tokens = model.tokens(&pc)?;

    let loss_at = |m: &Classifier<f64>, x: &Tensor64| -> Result<f64> {
        let v = eval(|tp| {
            let logits = m.logits_from(&m.params.bind_frozen(tp), tp.constant(x.clone()), None)?;
            cross_entropy(logits, label)
        })?;
        Ok(v.item())
    };
    let (param_grads, input_grad) = {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let x = tape.leaf(tokens.clone());
        let loss = cross_entropy(model.logits_from(&p, x, None)?, label)?;
        let mut g = tape.backward(loss)?;
        let gx = g.wrt(x);
        (p.collect(&mut g), gx)
    };
    let h = 1e-5;
    let mut results = Vec::new();
    let ids: Vec<_> = model.params.ids().collect();
    for (id, g) in ids.iter().zip(&param_grads) {
        for j in 0..g.len() {
            let orig = model.params.get(*id).data()[j];
            let p = probe(
                |d| {
                    model.params.get_mut(*id).data_mut()[j] = orig + d;
                    loss_at(&model, &tokens)
                },
                h,
            )?;
            model.params.get_mut(*id).data_mut()[j] = orig;
            results.push(fd_entry(g.data()[j], p, h));
        }
    }
    for j in 0..tokens.len() {
        let p = probe(
            |d| {
                let mut x = tokens.clone();
                x.data_mut()[j] += d;
                loss_at(&model, &x)
            },
            h,
        )?;
        results.push(fd_entry(input_grad.data()[j], p, h));
    }
    let worst = results.iter().filter(|r| r.1).map(|r| r.0).fold(0.0, f64::max);
    let unresolved = results.iter().filter(|r| !r.1).count();
    Ok((worst, unresolved, results.len()))
}

/// VN-LayerNorm makes the loss only piecewise smooth: a normalized channel
/// norm can cross zero, and the next norm has a kink there. Near such a kink
/// the central difference at `h` is not an estimate of the derivative, which
/// shows as disagreement with the difference at `h / 2`; those entries are
/// counted but not scored. At least one point must be resolved everywhere.
fn c5_gradients() -> Result<Outcome> {
    let points = 20;
    let mut worst = 0.0f64;
    let mut unresolved = 0;
    let mut clean = 0;
    let mut total = 0;
    for seed in 0..points {
        let (w, u, n) = fd_point(seed)?;
        worst = worst.max(w);
        unresolved += u;
        clean += usize::from(u == 0);
        total += n;
    }
    Ok(Outcome::new(
        worst <= 1e-4 && clean > 0,
        format!(
            "{points} random points, {total} entries at h=1e-5: max relative error {worst:.2e} <= 1e-4; \
             {unresolved} entries near a kink not scored; {clean} points fully resolved"
        ),
    ))
}

fn train_eval(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<(AnyModel<f64>, EvalMetrics)> {
    let mut trainer = Trainer::<f64>::new(cfg)?;
    trainer.fit(train, None, |_, _| Ok(()))?;
    let m = evaluate(trainer.model.as_dyn(), test)?;
    Ok((trainer.model, m))
}

fn correct(m: &EvalMetrics) -> usize {
    (m.accuracy.unwrap_or(0.0) * m.n as f64).round() as usize
}

fn shapes_split() -> Result<(Dataset, Dataset)> {
    gen_shapes(&ShapesSpec { classes: 3, per_class: 200, points: 128, seed: 61, shared: None })?.split(0.8, 61)
}

fn shapes_config(latent: Option<usize>, epochs: usize) -> RunConfig {
    let encoder = EncoderConfig { depth: 2, channels: 16, heads: 4, head_dim: 4, mlp_hidden: 16, eps: 1e-6, latent, s: 3 };
    RunConfig {
        model: ModelConfig::Classifier(ClassifierConfig {
            classes: 3,
            fusion: FusionMode::SpatialOnly,
            d_a: 0,
            head_hidden: 64,
            attr_hidden: 32,
            encoder,
        }),
        train: TrainOptions { epochs, ..TrainOptions::default() },
    }
}

/// Test accuracy of the criterion-6 model, shared with criterion 9.
static SHAPES_ACCURACY: OnceLock<f64> = OnceLock::new();

fn shapes_accuracy() -> Result<(f64, f64, usize, usize)> {
    let (train, test) = shapes_split()?;
    let (model, plain) = train_eval(&shapes_config(None, 8), &train, &test)?;
    let rotated = evaluate(model.as_dyn(), &test.rotated(62)?)?;
    let acc = plain.headline();
    let _ = SHAPES_ACCURACY.set(acc);
    Ok((acc, rotated.headline(), correct(&plain), correct(&rotated)))
}

fn c6_classification() -> Result<Outcome> {
    let (acc, rot, a, b) = shapes_accuracy()?;
    Ok(Outcome::new(
        acc >= 0.95 && rot >= 0.95 && a.abs_diff(b) <= 1,
        format!("test {acc:.4}, rotated test {rot:.4} (>= 0.95), correct {a} vs {b}"),
    ))
}

fn c7_fusion() -> Result<Outcome> {
    let base = gen_shapes(&ShapesSpec { classes: 3, per_class: 200, points: 128, seed: 71, shared: Some(ShapeKind::Scalene) })?;
    let (train, test) = gen_polka(&base, &PolkaSpec::default(), 72)?.split(0.8, 73)?;
    let mut acc = Vec::new();
    for fusion in [FusionMode::SpatialOnly, FusionMode::EarlyFusion, FusionMode::LateFusion] {
        let encoder = EncoderConfig { eps: 1e-6, ..EncoderConfig::default() };
        let cfg = RunConfig {
            model: ModelConfig::Classifier(ClassifierConfig {
                classes: 3,
                fusion,
                d_a: if fusion == FusionMode::SpatialOnly { 0 } else { 1 },
                head_hidden: 64,
                attr_hidden: 32,
                encoder,
            }),
            train: TrainOptions { epochs: 10, ..TrainOptions::default() },
        };
        acc.push(train_eval(&cfg, &train, &test)?.1.headline());
    }
    let (spatial, early, late) = (acc[0], acc[1], acc[2]);
    Ok(Outcome::new(
        early - spatial >= 0.10 && late > spatial,
        format!("spatial {spatial:.4}, early {early:.4} (margin {:+.4} >= 0.10), late {late:.4}", early - spatial),
    ))
}

fn rotation_gap(model: &AnyModel<f64>, test: &Dataset) -> Result<(f64, f64)> {
    let plain = evaluate(model.as_dyn(), test)?.ade.unwrap_or(f64::NAN);
    let rotated = evaluate(model.as_dyn(), &test.rotated(83)?)?.ade.unwrap_or(f64::NAN);
    Ok((plain, rotated - plain))
}

fn c8_forecasting() -> Result<Outcome> {
    let spec = |count, seed| TrajSpec { count, seed, frame: TrajFrame::Canonical, ..TrajSpec::default() };
    let train = gen_trajectories(&spec(300, 81))?;
    let test = gen_trajectories(&spec(100, 82))?;
    let opts = |augment_z| TrainOptions { epochs: 100, lr: 3e-3, augment_z, ..TrainOptions::default() };
    let vn = RunConfig {
        model: ModelConfig::Forecaster(ForecasterConfig {
            t_out: train.k,
            fusion: FusionMode::EarlyFusion,
            attr_hidden: 32,
            encoder: EncoderConfig::default(),
        }),
        train: opts(false),
    };
    let vanilla = |augment_z| RunConfig {
        model: ModelConfig::Vanilla(VanillaConfig {
            classes: None,
            t_out: Some(train.k),
            d_a: vn_core::models::TRAJ_ATTRS,
            d_model: 32,
            heads: 4,
            depth: 2,
            mlp_hidden: 64,
        }),
        train: opts(augment_z),
    };
    let (m, _) = train_eval(&vn, &train, &test)?;
    let (vn_ade, vn_gap) = rotation_gap(&m, &test)?;
    let (m, _) = train_eval(&vanilla(false), &train, &test)?;
    let (va_ade, va_gap) = rotation_gap(&m, &test)?;
    let (m, _) = train_eval(&vanilla(true), &train, &test)?;
    let (vz_ade, vz_gap) = rotation_gap(&m, &test)?;
    Ok(Outcome::new(
        vn_gap.abs() <= 1e-6 && va_gap > 0.0 && vz_gap < va_gap,
        format!(
            "VN ADE {vn_ade:.3} gap {vn_gap:.1e}; vanilla ADE {va_ade:.3} gap {va_gap:+.3}; z-augmented ADE {vz_ade:.3} gap {vz_gap:+.3}"
        ),
    ))
}

fn c9_latent() -> Result<Outcome> {
    let enc = EncoderConfig { depth: 4, channels: 32, heads: 4, head_dim: 8, mlp_hidden: 32, eps: 1e-6, latent: None, s: 3 };
    let full = bench_encoder("full", &enc, 1024, 2, 91)?;
    let latent = bench_encoder("latent", &EncoderConfig { latent: Some(32), ..enc }, 1024, 2, 91)?;
    let speedup = latent.steps_per_sec / full.steps_per_sec;
    let base = match SHAPES_ACCURACY.get() {
        Some(&a) => a,
        None => shapes_accuracy()?.0,
    };
    let (train, test) = shapes_split()?;
    let acc = train_eval(&shapes_config(Some(32), 12), &train, &test)?.1.headline();
    let drop = base - acc;
    Ok(Outcome::new(
        speedup >= 1.5 && drop <= 0.05,
        format!(
            "N=1024 {:.3} steps/s, M=32 {:.3} steps/s, speedup {speedup:.2}x >= 1.5; shapes accuracy {base:.4} -> {acc:.4} (drop {drop:+.4} <= 0.05)",
            full.steps_per_sec, latent.steps_per_sec
        ),
    ))
}

fn c10_stability() -> Result<Outcome> {
    let (train, test) = shapes_split()?;
    let cfg = shapes_config(None, 4);
    let seeds = [0u64, 1];
    let exact = stability_run(&cfg, &train, &test, 0.0, &seeds, 1e-4)?;
    let biased = stability_run(&cfg, &train, &test, 1e-6, &seeds, 1e-4)?;
    let describe = |runs: &[vn_core::train::StabilityRun]| -> String {
        runs.iter()
            .map(|r| match (r.accuracy, &r.failure) {
                (Some(a), _) => format!("{a:.3}"),
                (None, Some(f)) => format!("diverged ({f})"),
                (None, None) => "diverged".into(),
            })
            .collect::<Vec<_>>()
            .join("/")
    };
    let mean = |runs: &[vn_core::train::StabilityRun]| -> Option<f64> {
        let a: Option<Vec<f64>> = runs.iter().map(|r| r.accuracy).collect();
        a.map(|a| a.iter().sum::<f64>() / a.len() as f64)
    };
    let diverged = exact.iter().any(|r| r.accuracy.is_none());
    let deficit = match (mean(&exact), mean(&biased)) {
        (Some(e), Some(b)) => b - e,
        (None, Some(_)) => f64::INFINITY,
        _ => f64::NAN,
    };
    Ok(Outcome::new(
        diverged || deficit >= 0.10,
        format!("f32, inputs x 1e-4: eps=0 {}, eps=1e-6 {} (deficit {deficit:+.3}, needs divergence or >= 0.10)", describe(&exact), describe(&biased)),
    ))
}

fn c11_auditor() -> Result<Outcome> {
    let cfg = AuditConfig { n_inputs: 8, n_rotations: 16, ..AuditConfig::for_scalar::<f64>() };
    let stack = |layers: &str| -> Result<bool> {
        let spec = StackSpec::from_toml(&format!("channels = 4\ntokens = 6\n{layers}"))?;
        Ok(audit_stack(&LayerStack::<f64>::build(spec)?, &cfg)?.verdict)
    };
    let sound = stack("[[layer]]\nkind = \"linear_bias\"\neps = 0.01\n[[layer]]\nkind = \"relu\"\n[[layer]]\nkind = \"encoder_block\"\nheads = 2\n")?;
    let broken_bias = stack("[[layer]]\nkind = \"linear\"\n[[layer]]\nkind = \"broken_bias\"\neps = 0.01\n[[layer]]\nkind = \"relu\"\n")?;
    let broken_linear = stack("[[layer]]\nkind = \"linear\"\n[[layer]]\nkind = \"broken_linear\"\n[[layer]]\nkind = \"layer_norm\"\n")?;

    // A model whose stored bias rows lost their normalization.
    let mut model = AnyModel::Classifier(classifier(FusionMode::SpatialOnly, 0, 1e-3, 111)?);
    vn_core::models::canonicalize_biases(model.as_dyn_mut());
    let rep = audit_stored(&model, &cfg)?;
    for l in rep.to_text().lines().filter(|l| l.contains("FAIL")) { eprintln!("DBG {l}"); }
    let clean = rep.verdict;
    let bias_ids: Vec<_> = model.params().ids().filter(|&id| model.params().name(id).ends_with(".b")).collect();
    for id in &bias_ids {
        let t = model.params_mut().get_mut(*id);
        *t = t.scale(1000.0);
    }
    let corrupted = audit_stored(&model, &cfg)?.verdict;

    let negatives = [("broken_bias", broken_bias), ("broken_linear", broken_linear), ("unnormalized checkpoint bias", corrupted)];
    let all_fail = negatives.iter().all(|(_, v)| !v);
    let list: Vec<String> = negatives.iter().map(|(n, v)| format!("{n} {}", if *v { "PASS" } else { "FAIL" })).collect();
    Ok(Outcome::new(
        all_fail && sound && clean && !bias_ids.is_empty(),
        format!("negative controls: {}; positive controls: stack {}, model {}", list.join(", "), verdict(sound), verdict(clean)),
    ))
}

fn verdict(v: bool) -> &'static str {
    if v {
        "PASS"
    } else {
        "FAIL"
    }
}
