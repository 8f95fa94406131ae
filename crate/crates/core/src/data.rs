//! Synthetic datasets, the `VNPC` file format, and train/test splitting.
//!
//! # `VNPC` version 1
//!
//! Little-endian throughout. Header:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `VNPC` |
//! | 4 | `u32` version (1) |
//! | 1 | `u8` task: 0 classification, 1 forecasting |
//! | 3 | reserved, zero |
//! | 4 | `u32` points per record `N` (input steps for forecasting) |
//! | 4 | `u32` attributes per point `d_A` |
//! | 4 | `u32` class count, or output steps `T_out` |
//! | 8 | `u64` record count |
//!
//! Each record: `u32` label (1-based class, 0 for forecasting), `u32` number of
//! metadata entries, each a `u32`-length-prefixed UTF-8 key and an `f64`
//! value, then `N*3` point coordinates, `N*d_A` attributes and, for
//! forecasting, `T_out*3` target coordinates, all `f64` in row-major order.
//!
//! All generators draw from [`SplitMix64`], so files are bit-identical across
//! platforms for a given seed.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::models::{mean_center, AttributedPointCloud, Target};
use crate::rng::SplitMix64;
use crate::rotation::{sample_rotation_with, Rotation};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VNPC";
const VERSION: u32 = 1;

/// Supervision kind of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Forecasting,
}

/// A homogeneous collection of clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    /// Points per record.
    pub n_points: usize,
    pub d_a: usize,
    /// Classes (classification) or output steps (forecasting).
    pub k: usize,
    pub records: Vec<AttributedPointCloud>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> Option<usize> {
        (self.task == TaskKind::Classification).then_some(self.k)
    }

    pub fn t_out(&self) -> Option<usize> {
        (self.task == TaskKind::Forecasting).then_some(self.k)
    }

    /// Checks every record against the header dimensions.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.n() != self.n_points || r.d_a() != self.d_a {
                return Err(Error::Shape(format!(
                    "record {i} is {}x{} but the dataset declares {}x{}",
                    r.n(),
                    r.d_a(),
                    self.n_points,
                    self.d_a
                )));
            }
            match (&r.target, self.task) {
                (Target::Class(c), TaskKind::Classification) if *c < self.k => {}
                (Target::Trajectory(t), TaskKind::Forecasting) if t.shape()[0] == self.k => {}
                _ => return Err(Error::Shape(format!("record {i} target does not match the dataset task"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(match self.task {
            TaskKind::Classification => 0,
            TaskKind::Forecasting => 1,
        });
        w.bytes(&[0, 0, 0]);
        w.u32(self.n_points as u32);
        w.u32(self.d_a as u32);
        w.u32(self.k as u32);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u32(match r.target {
                Target::Class(c) => c as u32 + 1,
                _ => 0,
            });
            w.u32(r.meta.len() as u32);
            for (k, v) in &r.meta {
                w.string(k);
                w.f64s([*v]);
            }
            w.f64s(r.points.data().iter().copied());
            w.f64s(r.attrs.data().iter().copied());
            if let Target::Trajectory(t) = &r.target {
                w.f64s(t.data().iter().copied());
            }
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4, "magic")? != MAGIC {
            return Err(r.fail_at(0, "bad magic, expected VNPC"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail_at(4, &format!("unsupported version {version}")));
        }
        let task = match r.u8("task")? {
            0 => TaskKind::Classification,
            1 => TaskKind::Forecasting,
            t => return Err(r.fail_at(8, &format!("unknown task byte {t}"))),
        };
        r.bytes(3, "reserved")?;
        let n = r.u32("points per record")? as usize;
        let d_a = r.u32("attribute count")? as usize;
        let k = r.u32("classes or horizon")? as usize;
        let count = r.u64("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let start = r.pos();
            let label = r.u32("label")?;
            let n_meta = r.u32("metadata count")?;
            let mut meta = Vec::new();
            for _ in 0..n_meta {
                let key = r.string("metadata key")?;
                let v = r.f64s(1, "metadata value")?[0];
                meta.push((key, v));
            }
            let points = Tensor::new(&[n, 3], r.f64s(n * 3, "points")?)?;
            let attrs = Tensor::new(&[n, d_a], r.f64s(n * d_a, "attributes")?)?;
            let target = match task {
                TaskKind::Classification => {
                    if label == 0 || label as usize > k {
                        return Err(r.fail_at(start, &format!("label {label} outside 1..={k}")));
                    }
                    Target::Class(label as usize - 1)
                }
                TaskKind::Forecasting => Target::Trajectory(Tensor::new(&[k, 3], r.f64s(k * 3, "target")?)?),
            };
            let mut rec = AttributedPointCloud::new(points, attrs, target).map_err(|e| r.fail_at(start, &e.to_string()))?;
            rec.meta = meta;
            records.push(rec);
        }
        if !r.at_end() {
            return r.fail("trailing bytes after the declared records");
        }
        Ok(Dataset { task, n_points: n, d_a, k, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One row per point: `record,label,point,x,y,z,a1..`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("record,label,point,x,y,z");
        for j in 0..self.d_a {
            s.push_str(&format!(",a{}", j + 1));
        }
        s.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            let label = r.label().map(|l| (l + 1).to_string()).unwrap_or_default();
            for p in 0..r.n() {
                let xyz = &r.points.data()[p * 3..p * 3 + 3];
                s.push_str(&format!("{i},{label},{p},{},{},{}", xyz[0], xyz[1], xyz[2]));
                for a in &r.attrs.data()[p * self.d_a..(p + 1) * self.d_a] {
                    s.push_str(&format!(",{a}"));
                }
                s.push('\n');
            }
        }
        s
    }

    /// Copy with every cloud rotated by an independent uniform rotation.
    pub fn rotated(&self, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::stream(seed, 0x726f7461);
        let records = self
            .records
            .iter()
            .map(|r| r.rotated(&sample_rotation_with(3, &mut rng)?))
            .collect::<Result<_>>()?;
        Ok(Dataset { records, ..self.clone() })
    }

    /// Disjoint, exhaustive split; stratified by class for classification.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::config(format!("train fraction must be in (0, 1), got {train_frac}")));
        }
        let mut rng = SplitMix64::stream(seed, 0x73706c);
        let groups: Vec<Vec<usize>> = match self.task {
            TaskKind::Classification => (0..self.k)
                .map(|c| (0..self.len()).filter(|&i| self.records[i].label() == Some(c)).collect())
                .collect(),
            TaskKind::Forecasting => vec![(0..self.len()).collect()],
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mut g in groups {
            rng.shuffle(&mut g);
            let cut = (g.len() as f64 * train_frac).round() as usize;
            train.extend_from_slice(&g[..cut]);
            test.extend_from_slice(&g[cut..]);
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::config(format!(
                "split of {} records at {train_frac} leaves an empty side",
                self.len()
            )));
        }
        train.sort_unstable();
        test.sort_unstable();
        let pick = |idx: &[usize]| Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.clone_header()
        };
        Ok((pick(&train), pick(&test)))
    }

    fn clone_header(&self) -> Dataset {
        Dataset { task: self.task, n_points: self.n_points, d_a: self.d_a, k: self.k, records: Vec::new() }
    }
}

/// Surface families for the shapes task, in class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Helix,
    Torus,
    Plane,
    Cone,
    TwoSpheres,
    Line,
    Cross,
    /// Flat scalene triangle. Not one of the class templates; it has no
    /// rotational symmetry, which makes it a useful shared base surface.
    Scalene,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Helix,
        ShapeKind::Torus,
        ShapeKind::Plane,
        ShapeKind::Cone,
        ShapeKind::TwoSpheres,
        ShapeKind::Line,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Helix => "helix",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
            ShapeKind::Cone => "cone",
            ShapeKind::TwoSpheres => "two-spheres",
            ShapeKind::Line => "line",
            ShapeKind::Cross => "cross",
            ShapeKind::Scalene => "scalene",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .chain([ShapeKind::Scalene])
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape {s:?}")))
    }

    fn unit_vector(rng: &mut SplitMix64) -> [f64; 3] {
        loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                return v.map(|x| x / n);
            }
        }
    }

    /// `n` noiseless surface points, all within the unit ball.
    pub fn template(self, n: usize, rng: &mut SplitMix64) -> Vec<[f64; 3]> {
        use std::f64::consts::PI;
        let mut pts = Vec::with_capacity(n);
        match self {
            ShapeKind::Sphere => {
                // Antipodal pairs keep the centroid at the origin.
                while pts.len() < n {
                    let u = Self::unit_vector(rng);
                    pts.push(u);
                    if pts.len() < n {
                        pts.push(u.map(|x| -x));
                    }
                }
            }
            _ => {
                for _ in 0..n {
                    pts.push(self.surface_point(rng, PI));
                }
            }
        }
        pts
    }

    fn surface_point(self, rng: &mut SplitMix64, pi: f64) -> [f64; 3] {
        match self {
            ShapeKind::Sphere => Self::unit_vector(rng),
            ShapeKind::Cube => {
                let a = 1.0 / 3f64.sqrt();
                let face = rng.below(6);
                let (u, v) = (rng.uniform_in(-a, a), rng.uniform_in(-a, a));
                let s = if face % 2 == 0 { a } else { -a };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            ShapeKind::Cylinder => {
                let t = rng.uniform_in(0.0, 2.0 * pi);
                [0.6 * t.cos(), 0.6 * t.sin(), rng.uniform_in(-0.6, 0.6)]
            }
            ShapeKind::Helix => {
                let t = rng.uniform_in(0.0, 4.0 * pi);
                [0.5 * t.cos(), 0.5 * t.sin(), t / (4.0 * pi) * 1.4 - 0.7]
            }
            ShapeKind::Torus => {
                let (big, small) = (0.6, 0.25);
                // Rejection sampling for uniform area density.
                loop {
                    let u = rng.uniform_in(0.0, 2.0 * pi);
                    let v = rng.uniform_in(0.0, 2.0 * pi);
                    if rng.uniform() * (big + small) <= big + small * v.cos() {
                        let r = big + small * v.cos();
                        return [r * u.cos(), r * u.sin(), small * v.sin()];
                    }
                }
            }
            ShapeKind::Plane => [rng.uniform_in(-0.7, 0.7), rng.uniform_in(-0.7, 0.7), 0.0],
            ShapeKind::Cone => {
                // Lateral surface: radius grows linearly from the apex.
                let s = rng.uniform().sqrt();
                let t = rng.uniform_in(0.0, 2.0 * pi);
                [0.6 * s * t.cos(), 0.6 * s * t.sin(), 0.7 - 1.2 * s]
            }
            ShapeKind::TwoSpheres => {
                let u = Self::unit_vector(rng);
                let cx = if rng.below(2) == 0 { 0.55 } else { -0.55 };
                [cx + 0.35 * u[0], 0.35 * u[1], 0.35 * u[2]]
            }
            ShapeKind::Line => [rng.uniform_in(-0.9, 0.9), 0.0, 0.0],
            ShapeKind::Scalene => {
                let (a, b, c) = ([-0.9, -0.5], [0.8, -0.4], [-0.2, 0.8]);
                let (mut u, mut v) = (rng.uniform(), rng.uniform());
                if u + v > 1.0 {
                    (u, v) = (1.0 - u, 1.0 - v);
                }
                [
                    a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                    a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                    0.0,
                ]
            }
            ShapeKind::Cross => {
                let t = rng.uniform_in(-0.8, 0.8);
                if rng.below(2) == 0 {
                    [t, 0.0, 0.0]
                } else {
                    [0.0, t, 0.0]
                }
            }
        }
    }
}

/// Noise standard deviation of the shape generator.
pub const SHAPE_NOISE: f64 = 0.02;

/// Gaussian noise vector with its length clipped to `2.5 sigma`.
fn clipped_noise(rng: &mut SplitMix64, sigma: f64) -> [f64; 3] {
    let v = [rng.normal() * sigma, rng.normal() * sigma, rng.normal() * sigma];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let cap = 2.5 * sigma;
    if n > cap {
        v.map(|x| x * cap / n)
    } else {
        v
    }
}

/// Settings of [`gen_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSpec {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
    /// When set, every class uses this surface (labels then carry no
    /// geometric signal; used as the base of the polka-dot task).
    pub shared: Option<ShapeKind>,
}

/// Noisy, mean-centered surface samples, `per_class` clouds per class.
///
/// Noise is Gaussian with standard deviation [`SHAPE_NOISE`] per coordinate,
/// its length clipped to 2.5 standard deviations.
pub fn gen_shapes(spec: &ShapesSpec) -> Result<Dataset> {
    if !(2..=10).contains(&spec.classes) {
        return Err(Error::config(format!("classes must be in 2..=10, got {}", spec.classes)));
    }
    if spec.points == 0 || spec.per_class == 0 {
        return Err(Error::config("points and per-class counts must be positive"));
    }
    let mut rng = SplitMix64::stream(spec.seed, 0x736861);
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for i in 0..spec.per_class * spec.classes {
        let class = i % spec.classes;
        let kind = spec.shared.unwrap_or(ShapeKind::ALL[class]);
        let pts = kind.template(spec.points, &mut rng);
        let mut data = Vec::with_capacity(spec.points * 3);
        for p in pts {
            let e = clipped_noise(&mut rng, SHAPE_NOISE);
            data.extend([p[0] + e[0], p[1] + e[1], p[2] + e[2]]);
        }
        let pc = AttributedPointCloud::spatial(Tensor::new(&[spec.points, 3], data)?, Target::Class(class))?;
        records.push(mean_center(&pc).0);
    }
    Ok(Dataset {
        task: TaskKind::Classification,
        n_points: spec.points,
        d_a: 0,
        k: spec.classes,
        records,
    })
}

/// Polka-dot radius law and dot count.
#[derive(Debug, Clone, PartialEq)]
pub struct PolkaSpec {
    pub r_lo: f64,
    pub r_hi: f64,
    pub dots: usize,
}

impl Default for PolkaSpec {
    fn default() -> Self {
        PolkaSpec { r_lo: 0.3, r_hi: 1.0, dots: 30 }
    }
}

impl PolkaSpec {
    /// `r(y) = r_lo + (y - 1) / (K - 1) * (r_hi - r_lo)` for 1-based label `y`.
    pub fn radius(&self, y: usize, classes: usize) -> f64 {
        if classes <= 1 {
            return self.r_lo;
        }
        self.r_lo + (y as f64 - 1.0) / (classes as f64 - 1.0) * (self.r_hi - self.r_lo)
    }
}

/// Marks `spec.dots` points near a random center with attribute 1.
///
/// The center is a random point of the cloud and the radius depends on the
/// class. When fewer than `dots` points fall inside, the center is redrawn up
/// to 100 times, then the radius grows by 10% per further attempt. The radius
/// used is stored under the `radius` metadata key.
pub fn gen_polka(base: &Dataset, spec: &PolkaSpec, seed: u64) -> Result<Dataset> {
    if base.task != TaskKind::Classification {
        return Err(Error::config("polka dots need a classification dataset"));
    }
    if !(spec.r_lo < spec.r_hi) || spec.r_lo <= 0.0 {
        return Err(Error::config("polka radii must satisfy 0 < r_lo < r_hi"));
    }
    if spec.dots == 0 || spec.dots > base.n_points {
        return Err(Error::config(format!(
            "cannot mark {} dots on clouds of {} points",
            spec.dots, base.n_points
        )));
    }
    let mut rng = SplitMix64::stream(seed, 0x706f6c);
    let mut records = Vec::with_capacity(base.len());
    for rec in &base.records {
        let label = rec.label().ok_or_else(|| Error::config("record without a class label"))?;
        let mut r = spec.radius(label + 1, base.k);
        let n = rec.n();
        let p = rec.points.data();
        let within = |c: usize, r: f64| -> Vec<usize> {
            (0..n)
                .filter(|&i| (0..3).map(|k| (p[i * 3 + k] - p[c * 3 + k]).powi(2)).sum::<f64>() <= r * r)
                .collect()
        };
        let mut attempt = 0usize;
        let mut inside = loop {
            let c = rng.below(n);
            let inside = within(c, r);
            if inside.len() >= spec.dots {
                break inside;
            }
            attempt += 1;
            if attempt >= 100 {
                r *= 1.1;
            }
        };
        rng.shuffle(&mut inside);
        let mut attrs = Tensor::zeros(&[n, 1]);
        for &i in &inside[..spec.dots] {
            attrs.data_mut()[i] = 1.0;
        }
        let mut out = AttributedPointCloud::new(rec.points.clone(), attrs, rec.target.clone())?;
        out.meta = rec.meta.clone();
        out.meta.push(("radius".into(), r));
        records.push(out);
    }
    Ok(Dataset { d_a: 1, records, ..base.clone_header() })
}

/// How trajectories are oriented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajFrame {
    /// Each sample rotated by an independent uniform rotation.
    Uniform,
    /// Paths stay in the xy plane, starting roughly along +x.
    Canonical,
}

/// Motion model of generated trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajMotion {
    /// One to three segments of constant turn rate and acceleration.
    Mixed,
    /// Constant velocity.
    Straight,
}

/// Settings of [`gen_trajectories`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajSpec {
    pub count: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Seconds between samples.
    pub dt: f64,
    pub seed: u64,
    pub frame: TrajFrame,
    pub motion: TrajMotion,
}

impl Default for TrajSpec {
    fn default() -> Self {
        TrajSpec {
            count: 1000,
            t_in: 11,
            t_out: 80,
            dt: 0.2,
            seed: 0,
            frame: TrajFrame::Uniform,
            motion: TrajMotion::Mixed,
        }
    }
}

/// Vehicle-like paths split into `t_in` observed and `t_out` future points.
///
/// The observed part of every record is mean-centered; the target is shifted
/// by the same amount.
pub fn gen_trajectories(spec: &TrajSpec) -> Result<Dataset> {
    if spec.t_in == 0 || spec.t_out == 0 || spec.count == 0 {
        return Err(Error::config("trajectory counts and lengths must be positive"));
    }
    if !(spec.dt > 0.0) {
        return Err(Error::config("time step must be positive"));
    }
    let total = spec.t_in + spec.t_out;
    let mut rng = SplitMix64::stream(spec.seed, 0x747261);
    let mut records = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mut speed = rng.uniform_in(2.0, 15.0);
        let mut heading = rng.uniform_in(-0.2, 0.2);
        let segments = match spec.motion {
            TrajMotion::Straight => vec![(total, 0.0, 0.0)],
            TrajMotion::Mixed => {
                let k = 1 + rng.below(3);
                let mut cuts: Vec<usize> = (0..k - 1).map(|_| 1 + rng.below(total - 1)).collect();
                cuts.sort_unstable();
                cuts.push(total);
                let mut prev = 0;
                cuts.into_iter()
                    .map(|c| {
                        let len = c - prev;
                        prev = c;
                        (len, rng.uniform_in(-0.3, 0.3), rng.uniform_in(-1.0, 1.0))
                    })
                    .collect()
            }
        };
        let mut pos = [0.0f64; 3];
        let mut path = Vec::with_capacity(total * 3);
        for (len, turn, accel) in segments {
            for _ in 0..len {
                path.extend(pos);
                pos[0] += speed * heading.cos() * spec.dt;
                pos[1] += speed * heading.sin() * spec.dt;
                heading += turn * spec.dt;
                speed = (speed + accel * spec.dt).max(0.0);
            }
        }
        let mut full = Tensor::new(&[total, 3], path)?;
        if spec.frame == TrajFrame::Uniform {
            let r: Rotation<f64> = sample_rotation_with(3, &mut rng)?;
            full = r.apply(&full)?;
        }
        let input = full.narrow(0, 0, spec.t_in)?;
        let future = full.narrow(0, spec.t_in, spec.t_out)?;
        let pc = AttributedPointCloud::spatial(input, Target::Trajectory(future))?;
        let (centered, c) = mean_center(&pc);
        let mut out = centered;
        if let Target::Trajectory(t) = &mut out.target {
            for row in t.data_mut().chunks_mut(3) {
                for k in 0..3 {
                    row[k] -= c[k];
                }
            }
        }
        records.push(out);
    }
    Ok(Dataset {
        task: TaskKind::Forecasting,
        n_points: spec.t_in,
        d_a: 0,
        k: spec.t_out,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_law_endpoints() {
        let s = PolkaSpec::default();
        assert!((s.radius(1, 40) - 0.3).abs() < 1e-15);
        assert!((s.radius(40, 40) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_names_parse() {
        for k in ShapeKind::ALL {
            assert_eq!(ShapeKind::parse(k.name()).unwrap(), k);
        }
        assert!(ShapeKind::parse("blob").is_err());
    }

    #[test]
    fn class_range_is_checked() {
        let spec = ShapesSpec { classes: 11, per_class: 1, points: 8, seed: 0, shared: None };
        assert!(matches!(gen_shapes(&spec), Err(Error::Config(_))));
    }
}
