//! Geometry oracles: pinned distance values, FPS behavior, sampler membership
//! checks, manifest round-trips, and central-difference checks of the
//! hand-derived distance gradients.

use pointprompt::geometry::{
    chamfer_distance, chamfer_grad, default_classes, directed_chamfer,
    directed_chamfer_grad, directed_hausdorff, directed_hausdorff_grad,
    farthest_point_sample, fps_indices, generate_dataset, generate_shape,
    hausdorff_distance, knn_mean_distance, knn_mean_grad, load_manifest,
    manifest_for_split, normalize_to_unit_sphere, read_off, sample_surface,
    write_manifest, DatasetSpec, GeomError, PointCloud, ShapeClassSpec, ShapeFamily,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(points: Vec<[f32; 3]>) -> PointCloud {
    PointCloud::new(points, 0, "test").unwrap()
}

// ── pinned distance values ──────────────────────────────────────────────────

#[test]
fn chamfer_of_unit_offset_singletons_is_two() {
    let a = [[0.0, 0.0, 0.0]];
    let b = [[1.0, 0.0, 0.0]];
    assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
    assert_eq!(directed_chamfer(&a, &b).unwrap(), 1.0);
}

#[test]
fn hausdorff_of_unit_offset_singletons_is_one() {
    let a = [[0.0, 0.0, 0.0]];
    let b = [[1.0, 0.0, 0.0]];
    assert_eq!(hausdorff_distance(&a, &b).unwrap(), 1.0);
}

#[test]
fn chamfer_of_identical_clouds_is_zero() {
    let a = [[0.5, -0.2, 0.3], [0.1, 0.9, -0.4]];
    assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(hausdorff_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn directed_hausdorff_is_asymmetric() {
    // b contains a's point plus a distant outlier: a→b is 0, b→a is 2.
    let a = [[0.0, 0.0, 0.0]];
    let b = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
    assert_eq!(directed_hausdorff(&a, &b).unwrap(), 0.0);
    assert_eq!(directed_hausdorff(&b, &a).unwrap(), 2.0);
    assert_eq!(hausdorff_distance(&a, &b).unwrap(), 2.0);
}

#[test]
fn distances_reject_empty_inputs() {
    let a = [[0.0f32, 0.0, 0.0]];
    assert!(matches!(
        chamfer_distance(&a, &[]),
        Err(GeomError::EmptyCloud)
    ));
    assert!(matches!(
        directed_hausdorff(&[], &a),
        Err(GeomError::EmptyCloud)
    ));
}

#[test]
fn knn_mean_distance_collinear_pinned() {
    // Points at x = 0, 1, 3 with k = 1: nearest distances are 1, 1, 2.
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
    let d = knn_mean_distance(&pts, 1).unwrap();
    assert_eq!(d, vec![1.0, 1.0, 2.0]);
}

#[test]
fn knn_rejects_bad_k() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    assert!(matches!(
        knn_mean_distance(&pts, 2),
        Err(GeomError::KTooLarge { k: 2, n: 2 })
    ));
    assert!(matches!(
        knn_mean_distance(&pts, 0),
        Err(GeomError::KTooLarge { .. })
    ));
}

// ── normalization ───────────────────────────────────────────────────────────

#[test]
fn normalize_centers_and_scales_to_unit_sphere() {
    let pc = cloud(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0], [3.0, 1.0, 0.0]]);
    let n = normalize_to_unit_sphere(&pc).unwrap();
    let centroid: [f32; 3] = n.points.iter().fold([0.0; 3], |mut acc, p| {
        for c in 0..3 {
            acc[c] += p[c] / n.points.len() as f32;
        }
        acc
    });
    for c in centroid {
        assert!(c.abs() < 1e-6);
    }
    let max_norm = n
        .points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f32, f32::max);
    assert!((max_norm - 1.0).abs() < 1e-6);
}

#[test]
fn normalize_rejects_coincident_points() {
    let pc = cloud(vec![[5.0, 5.0, 5.0], [5.0, 5.0, 5.0]]);
    assert!(matches!(
        normalize_to_unit_sphere(&pc),
        Err(GeomError::DegenerateCloud { .. })
    ));
}

// ── farthest point sampling ─────────────────────────────────────────────────

#[test]
fn fps_collinear_picks_extremes() {
    let pts = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]];
    assert_eq!(fps_indices(&pts, 2, 0).unwrap(), vec![0, 2]);
}

#[test]
fn fps_validates_count_and_start() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    assert!(fps_indices(&pts, 0, 0).is_err());
    assert!(fps_indices(&pts, 3, 0).is_err());
    assert!(fps_indices(&pts, 1, 2).is_err());
}

#[test]
fn fps_preserves_label_and_id() {
    let mut pc = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    pc.label = 3;
    let s = farthest_point_sample(&pc, 2, 0).unwrap();
    assert_eq!(s.label, 3);
    assert_eq!(s.id, "test");
    assert_eq!(s.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_selects_distinct_points_deterministically(seed in 0u64..1000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let take = 1 + (seed as usize) % n;
        let a = fps_indices(&pts, take, 0).unwrap();
        let b = fps_indices(&pts, take, 0).unwrap();
        prop_assert_eq!(&a, &b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), a.len(), "indices must be distinct");
    }

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = rng.random_range(1..20usize);
        let nb = rng.random_range(1..20usize);
        let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<[f32; 3]> {
            (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
        };
        let a = gen(&mut rng, na);
        let b = gen(&mut rng, nb);
        let ab = chamfer_distance(&a, &b).unwrap();
        let ba = chamfer_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.abs().max(1.0));
        prop_assert!(ab >= 0.0);
        let hab = hausdorff_distance(&a, &b).unwrap();
        let hba = hausdorff_distance(&b, &a).unwrap();
        prop_assert!((hab - hba).abs() <= 1e-6 * hab.abs().max(1.0));
    }

    #[test]
    fn knn_is_rotation_invariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f32; 3]> = (0..12)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let th: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let rot: Vec<[f32; 3]> = pts
            .iter()
            .map(|p| [p[0] * th.cos() - p[1] * th.sin(), p[0] * th.sin() + p[1] * th.cos(), p[2]])
            .collect();
        let d1 = knn_mean_distance(&pts, 3).unwrap();
        let d2 = knn_mean_distance(&rot, 3).unwrap();
        for (x, y) in d1.iter().zip(&d2) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }
}

// ── gradients of set distances ──────────────────────────────────────────────

/// Central-difference check of a scalar function of a point set.
fn check_points_grad(
    f: impl Fn(&[[f32; 3]]) -> f32,
    grad: &[[f32; 3]],
    pts: &[[f32; 3]],
    tol: f32,
) {
    let h = 1e-3f32;
    let mut probe = pts.to_vec();
    for i in 0..pts.len() {
        for c in 0..3 {
            probe[i][c] = pts[i][c] + h;
            let plus = f(&probe);
            probe[i][c] = pts[i][c] - h;
            let minus = f(&probe);
            probe[i][c] = pts[i][c];
            let num = (plus - minus) / (2.0 * h);
            let a = grad[i][c];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1.0);
            assert!(
                rel < tol,
                "point {i} coord {c}: analytic {a}, numeric {num}"
            );
        }
    }
}

fn spread_points(seed: u64, n: usize) -> Vec<[f32; 3]> {
    // Well-separated points so nearest-neighbor assignments are stable
    // within the finite-difference step.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<[f32; 3]> = Vec::new();
    while pts.len() < n {
        let p = [
            rng.random_range(-1.0f32..1.0),
            rng.random_range(-1.0f32..1.0),
            rng.random_range(-1.0f32..1.0),
        ];
        if pts
            .iter()
            .all(|q| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f32>() > 0.05)
        {
            pts.push(p);
        }
    }
    pts
}

fn sq(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// True when every point of `from` has a clear gap between its nearest and
/// second-nearest point of `to`, so ±h probes cannot flip the assignment.
fn assignments_stable(from: &[[f32; 3]], to: &[[f32; 3]], margin: f32) -> bool {
    from.iter().all(|&p| {
        let mut d: Vec<f32> = to.iter().map(|&q| sq(p, q)).collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        d.len() < 2 || d[1] - d[0] > margin
    })
}

/// Deterministically searches seeds until both nearest-neighbor directions
/// are stable; the gradient formulas assume locally constant assignments.
fn stable_pair(mut seed: u64, na: usize, nb: usize) -> (Vec<[f32; 3]>, Vec<[f32; 3]>) {
    loop {
        let a = spread_points(seed, na);
        let b = spread_points(seed + 7_000, nb);
        if assignments_stable(&a, &b, 0.02) && assignments_stable(&b, &a, 0.02) {
            return (a, b);
        }
        seed += 13;
    }
}

#[test]
fn chamfer_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (a, b) = stable_pair(seed, 8, 9);
        let (v, g) = directed_chamfer_grad(&a, &b).unwrap();
        assert!((v - directed_chamfer(&a, &b).unwrap()).abs() < 1e-7);
        check_points_grad(|p| directed_chamfer(p, &b).unwrap(), &g, &a, 5e-3);

        let (v2, g2) = chamfer_grad(&a, &b).unwrap();
        assert!((v2 - chamfer_distance(&a, &b).unwrap()).abs() < 1e-6);
        check_points_grad(|p| chamfer_distance(p, &b).unwrap(), &g2, &a, 5e-3);
    }
}

#[test]
fn hausdorff_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let (a, b) = {
            // Besides stable assignments, the worst point needs a clear lead
            // so the argmax cannot flip under ±h probes.
            let mut s = seed + 300;
            loop {
                let (a, b) = stable_pair(s, 8, 9);
                let mut d: Vec<f32> = a.iter().map(|&p| b.iter().map(|&q| sq(p, q)).fold(f32::INFINITY, f32::min)).collect();
                d.sort_by(|x, y| y.partial_cmp(x).unwrap());
                if d[0] - d[1] > 0.02 {
                    break (a, b);
                }
                s += 17;
            }
        };
        let (v, g) = directed_hausdorff_grad(&a, &b).unwrap();
        assert!((v - directed_hausdorff(&a, &b).unwrap()).abs() < 1e-7);
        check_points_grad(|p| directed_hausdorff(p, &b).unwrap(), &g, &a, 5e-3);
    }
}

#[test]
fn knn_gradient_matches_finite_differences() {
    let k = 3;
    for seed in 0..5 {
        // Stable neighbor sets: the k-th/(k+1)-th distance gap must exceed
        // what a ±h probe can change.
        let pts = {
            let mut s = seed + 500;
            loop {
                let pts = spread_points(s, 10);
                let stable = pts.iter().enumerate().all(|(i, &p)| {
                    let mut d: Vec<f32> = pts
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &q)| sq(p, q))
                        .collect();
                    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    d[k] - d[k - 1] > 0.02
                });
                if stable {
                    break pts;
                }
                s += 23;
            }
        };
        let (v, g) = knn_mean_grad(&pts, k).unwrap();
        let mean_of = |p: &[[f32; 3]]| {
            let d = knn_mean_distance(p, k).unwrap();
            d.iter().sum::<f32>() / d.len() as f32
        };
        assert!((v - mean_of(&pts)).abs() < 1e-6);
        check_points_grad(mean_of, &g, &pts, 5e-3);
    }
}

// ── shape samplers ──────────────────────────────────────────────────────────

#[test]
fn cube_surface_samples_sit_on_faces() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for p in sample_surface(ShapeFamily::Cube, 200, &mut rng) {
        let m = p.iter().map(|c| c.abs()).fold(0.0f32, f32::max);
        assert!((m - 1.0).abs() < 1e-5, "point {p:?} off the cube surface");
    }
}

#[test]
fn sphere_surface_samples_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for p in sample_surface(ShapeFamily::Sphere, 200, &mut rng) {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn generate_shape_is_bitwise_deterministic() {
    let spec = ShapeClassSpec {
        name: "torus".into(),
        family: ShapeFamily::Torus,
        noise: 0.01,
        label: 4,
    };
    let a = generate_shape(&spec, 64, 777).unwrap();
    let b = generate_shape(&spec, 64, 777).unwrap();
    assert_eq!(a.points, b.points);
    let c = generate_shape(&spec, 64, 778).unwrap();
    assert_ne!(a.points, c.points);
    assert_eq!(a.label, 4);
}

#[test]
fn all_families_generate_normalized_clouds() {
    for (label, family) in ShapeFamily::ALL.into_iter().enumerate() {
        let spec = ShapeClassSpec {
            name: family.name().into(),
            family,
            noise: 0.01,
            label,
        };
        let pc = generate_shape(&spec, 128, 9).unwrap();
        assert_eq!(pc.len(), 128);
        let max_norm = pc
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0f32, f32::max);
        assert!((max_norm - 1.0).abs() < 1e-5, "{family} not normalized");
    }
}

#[test]
fn generate_shape_rejects_tiny_counts() {
    let spec = &default_classes(0.0)[0];
    assert!(matches!(
        generate_shape(spec, 1, 0),
        Err(GeomError::CountOutOfRange { .. })
    ));
}

// ── dataset and manifest ────────────────────────────────────────────────────

#[test]
fn standard_dataset_has_pinned_counts() {
    let spec = DatasetSpec::standard(5);
    let ds = generate_dataset(&spec).unwrap();
    assert_eq!(ds.class_names.len(), 8);
    assert_eq!(ds.train.len(), 8 * 120);
    assert_eq!(ds.test.len(), 8 * 40);
    assert!(ds.train.iter().all(|pc| pc.len() == 256));
    // Labels cover every class in both splits.
    for split in [&ds.train, &ds.test] {
        let mut seen = vec![0usize; 8];
        for pc in split.iter() {
            seen[pc.label] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0));
    }
}

#[test]
fn manifest_roundtrip_regenerates_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::standard(11);
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    spec.points = 32;
    let ds = generate_dataset(&spec).unwrap();

    let path = dir.path().join("train.manifest");
    write_manifest(&path, &manifest_for_split(&spec, 0)).unwrap();
    let (loaded, names) = load_manifest(&path).unwrap();
    assert_eq!(names, ds.class_names);
    assert_eq!(loaded.len(), ds.train.len());
    for (a, b) in loaded.iter().zip(&ds.train) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.points, b.points, "regeneration must be bitwise equal");
    }
}

#[test]
fn manifest_rejects_unknown_keys_and_classes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.manifest");
    std::fs::write(
        &path,
        "pointprompt-dataset v1\nclasses sphere\npoints 16\nnoise 0.0\nwhatever 3\n",
    )
    .unwrap();
    assert!(matches!(
        pointprompt::geometry::read_manifest(&path),
        Err(GeomError::ManifestFormat { .. })
    ));

    let path2 = dir.path().join("bad2.manifest");
    std::fs::write(
        &path2,
        "pointprompt-dataset v1\nclasses blob\npoints 16\nnoise 0.0\nentry a 0 synthetic:1\n",
    )
    .unwrap();
    assert!(matches!(
        load_manifest(&path2),
        Err(GeomError::UnknownClass(_))
    ));
}

#[test]
fn off_ingestion_downsamples_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    // 9-vertex mesh: a cube's corners plus its center, scaled by 5.
    let mut off = String::from("OFF\n9 0 0\n");
    for x in [-5.0f32, 5.0] {
        for y in [-5.0f32, 5.0] {
            for z in [-5.0f32, 5.0] {
                off.push_str(&format!("{x} {y} {z}\n"));
            }
        }
    }
    off.push_str("0 0 0\n");
    std::fs::write(dir.path().join("mesh.off"), &off).unwrap();
    std::fs::write(
        dir.path().join("data.manifest"),
        "pointprompt-dataset v1\nclasses cube\npoints 8\nnoise 0.0\nentry m0 0 off:mesh.off\n",
    )
    .unwrap();

    let (clouds, _) = load_manifest(&dir.path().join("data.manifest")).unwrap();
    assert_eq!(clouds.len(), 1);
    assert_eq!(clouds[0].len(), 8);
    let max_norm = clouds[0]
        .points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f32, f32::max);
    assert!((max_norm - 1.0).abs() < 1e-5);
}

#[test]
fn off_reader_accepts_merged_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.off");
    std::fs::write(&p, "OFF 2 0 0\n0 0 0\n1 2 3\n").unwrap();
    let v = read_off(&p).unwrap();
    assert_eq!(v, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
}

#[test]
fn off_reader_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.off");
    std::fs::write(&p, "PLY\n").unwrap();
    assert!(matches!(read_off(&p), Err(GeomError::OffFormat { .. })));
    std::fs::write(&p, "OFF\n3 0 0\n0 0 0\n").unwrap();
    assert!(matches!(read_off(&p), Err(GeomError::OffFormat { .. })));
}
