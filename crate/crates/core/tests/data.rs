use proptest::prelude::*;
use vn_core::data::{gen_polka, gen_shapes, gen_trajectories, PolkaSpec, ShapeKind, ShapesSpec, TrajFrame, TrajMotion, TrajSpec};
use vn_core::models::{ade, centroid};
use vn_core::{Dataset, Error, TaskKind, Target};

fn shapes(classes: usize, per_class: usize, points: usize, seed: u64) -> Dataset {
    gen_shapes(&ShapesSpec { classes, per_class, points, seed, shared: None }).unwrap()
}

fn trajectories(count: usize, seed: u64, motion: TrajMotion) -> Dataset {
    gen_trajectories(&TrajSpec { count, t_in: 11, t_out: 20, seed, motion, ..TrajSpec::default() }).unwrap()
}

#[test]
fn shapes_are_deterministic_balanced_and_centered() {
    let a = shapes(4, 5, 64, 1);
    assert_eq!(a.to_bytes().unwrap(), shapes(4, 5, 64, 1).to_bytes().unwrap());
    for c in 0..4 {
        assert_eq!(a.records.iter().filter(|r| r.label() == Some(c)).count(), 5);
    }
    for r in &a.records {
        assert!(centroid(&r.points).iter().all(|v| v.abs() <= 1e-12));
    }
    assert!(matches!(
        gen_shapes(&ShapesSpec { classes: 11, per_class: 1, points: 8, seed: 0, shared: None }),
        Err(Error::Config(_))
    ));
}

#[test]
fn sphere_points_lie_on_the_unit_sphere() {
    let ds = shapes(2, 10, 256, 2);
    let sigma = 0.02;
    for r in ds.records.iter().filter(|r| r.label() == Some(0)) {
        for p in r.points.data().chunks(3) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() <= 3.0 * sigma, "norm {n}");
        }
    }
}

#[test]
fn polka_dots_follow_the_radius_law() {
    let spec = PolkaSpec::default();
    assert_eq!(spec.radius(1, 40), 0.3);
    assert_eq!(spec.radius(40, 40), 1.0);
    let base = gen_shapes(&ShapesSpec { classes: 3, per_class: 20, points: 128, seed: 3, shared: Some(ShapeKind::Scalene) })
        .unwrap();
    let ds = gen_polka(&base, &spec, 4).unwrap();
    assert_eq!(ds.d_a, 1);
    for r in &ds.records {
        assert_eq!(r.attrs.sum_all(), 30.0);
        assert!(r.attrs.data().iter().all(|&a| a == 0.0 || a == 1.0));
        let law = spec.radius(r.label().unwrap() + 1, 3);
        let used = r.meta("radius").unwrap();
        assert!(used >= law - 1e-15, "radius {used} below law {law}");
    }
    assert!(gen_polka(&trajectories(2, 0, TrajMotion::Straight), &spec, 0).is_err());
}

#[test]
fn straight_paths_extrapolate_linearly() {
    let ds = trajectories(20, 5, TrajMotion::Straight);
    assert_eq!(ds.task, TaskKind::Forecasting);
    for r in &ds.records {
        let x = r.points.data();
        let v: Vec<f64> = (0..3).map(|k| x[3 + k] - x[k]).collect();
        let last = &x[10 * 3..11 * 3];
        let Target::Trajectory(t) = &r.target else { panic!("no target") };
        for (step, row) in t.data().chunks(3).enumerate() {
            for k in 0..3 {
                let expect = last[k] + (step + 1) as f64 * v[k];
                assert!((row[k] - expect).abs() <= 1e-9, "step {step}");
            }
        }
        assert!(centroid(&r.points).iter().all(|c| c.abs() <= 1e-12));
    }
}

#[test]
fn rotating_input_and_target_together_keeps_ade_zero() {
    let ds = trajectories(3, 6, TrajMotion::Mixed);
    let rot = ds.rotated(7).unwrap();
    for (a, b) in ds.records.iter().zip(&rot.records) {
        let (Target::Trajectory(ta), Target::Trajectory(tb)) = (&a.target, &b.target) else { panic!() };
        assert_eq!(ade(tb, tb).unwrap(), 0.0);
        // Rigid motion keeps the distances between input and target points.
        let d = |p: &[f64], q: &[f64]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        let (pa, pb) = (&a.points.data()[..3], &b.points.data()[..3]);
        assert!((d(pa, &ta.data()[..3]) - d(pb, &tb.data()[..3])).abs() <= 1e-9);
    }
    assert_eq!(
        trajectories(4, 8, TrajMotion::Mixed).to_bytes().unwrap(),
        trajectories(4, 8, TrajMotion::Mixed).to_bytes().unwrap()
    );
    let canonical = gen_trajectories(&TrajSpec { count: 4, frame: TrajFrame::Canonical, ..TrajSpec::default() }).unwrap();
    for r in &canonical.records {
        assert!(r.points.data().chunks(3).all(|p| p[2] == 0.0));
    }
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let base = shapes(3, 4, 40, 9);
    for ds in [gen_polka(&base, &PolkaSpec::default(), 10).unwrap(), trajectories(5, 11, TrajMotion::Mixed)] {
        let path = dir.path().join("d.vnpc");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(std::fs::read(&path).unwrap()[..4], *b"VNPC");
    }
}

#[test]
fn malformed_files_report_offsets() {
    let bytes = shapes(2, 2, 8, 12).to_bytes().unwrap();
    for cut in [2, 10, 30, bytes.len() - 1] {
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64, "cut {cut}: offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    match Dataset::from_bytes(&extra) {
        Err(Error::Format { offset, msg }) => {
            assert_eq!(offset, bytes.len() as u64);
            assert!(msg.contains("trailing"));
        }
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(Dataset::from_bytes(&version), Err(Error::Format { offset: 4, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified(seed in any::<u64>(), frac in 0.2f64..0.8) {
        let ds = shapes(3, 10, 8, seed);
        let (train, test) = ds.split(frac, seed ^ 1).unwrap();
        prop_assert_eq!(train.len() + test.len(), ds.len());
        let key = |r: &vn_core::AttributedPointCloud| r.points.data()[0].to_bits();
        let mut all: Vec<u64> = train.records.iter().chain(&test.records).map(key).collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), ds.len());
        let want = (10.0 * frac).round() as usize;
        for c in 0..3 {
            prop_assert_eq!(train.records.iter().filter(|r| r.label() == Some(c)).count(), want);
        }
    }

    #[test]
    fn every_cloud_has_thirty_dots(seed in any::<u64>()) {
        let base = shapes(4, 2, 64, seed);
        let ds = gen_polka(&base, &PolkaSpec::default(), seed).unwrap();
        for r in &ds.records {
            prop_assert_eq!(r.attrs.sum_all(), 30.0);
        }
    }
}
