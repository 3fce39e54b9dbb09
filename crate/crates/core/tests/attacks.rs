//! Attack suite oracles: analytic victims with closed-form gradients pin
//! budgets, best-iterate selection, saliency ordering, defense behavior,
//! and the archive round-trip.

use pointprompt::attacks::{
    add_attack, drop_attack, generate_archive, knn_attack, perturb_attack, pgd_attack,
    sor_defense, srs_defense, AddConfig, AddMetric, AttackArchive, AttackError, AttackKind,
    AttackSuiteConfig, DropConfig, KnnConfig, PerturbConfig, PgdConfig, VictimModel,
};
use pointprompt::geometry::{knn_mean_grad, PointCloud};

/// Two classes split by the sign of the mean x-coordinate. The attack loss
/// is `±mean_x`, so its gradient is uniform over points: `[±1/n, 0, 0]`.
struct MeanXVictim;

impl VictimModel for MeanXVictim {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, points: &[[f32; 3]]) -> usize {
        let mean_x: f32 = points.iter().map(|p| p[0]).sum::<f32>() / points.len() as f32;
        usize::from(mean_x > 0.0)
    }

    fn loss_grad(&self, points: &[[f32; 3]], label: usize) -> (f32, Vec<[f32; 3]>) {
        let n = points.len() as f32;
        let s = if label == 0 { 1.0 } else { -1.0 };
        let mean_x: f32 = points.iter().map(|p| p[0]).sum::<f32>() / n;
        (s * mean_x, vec![[s / n, 0.0, 0.0]; points.len()])
    }
}

/// Label-independent radial victim: `loss = Σ‖pᵢ‖²`, gradient `2pᵢ`. Its
/// ascent inflates the cloud, which stretches neighbor distances — useful
/// for testing the kNN regularizer.
struct RadialVictim;

impl VictimModel for RadialVictim {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, _points: &[[f32; 3]]) -> usize {
        0
    }

    fn loss_grad(&self, points: &[[f32; 3]], _label: usize) -> (f32, Vec<[f32; 3]>) {
        let loss = points.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum();
        (loss, points.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect())
    }
}

/// Label-0 cloud under `MeanXVictim`: all x at −0.03 (classified 0), y/z on
/// a small grid.
fn meanx_cloud(n: usize) -> PointCloud {
    let points: Vec<[f32; 3]> = (0..n)
        .map(|i| [-0.03, 0.1 * (i % 4) as f32, 0.1 * (i / 4) as f32])
        .collect();
    PointCloud::new(points, 0, "meanx".to_string()).expect("cloud")
}

fn blob_cloud(n: usize, scale: f32) -> PointCloud {
    // Deterministic quasi-random ball of points.
    let points: Vec<[f32; 3]> = (0..n)
        .map(|i| {
            let t = i as f32;
            [
                scale * ((t * 0.7).sin() * 0.9),
                scale * ((t * 1.3).cos() * 0.8),
                scale * ((t * 2.1).sin() * 0.7),
            ]
        })
        .collect();
    PointCloud::new(points, 1, "blob".to_string()).expect("cloud")
}

// ── PGD ──────────────────────────────────────────────────────────────────────

#[test]
fn pgd_saturates_the_linf_ball_and_flips_the_class() {
    let clean = meanx_cloud(16);
    let cfg = PgdConfig {
        epsilon: 0.05,
        steps: 20,
        alpha: 0.01,
    };
    let r = pgd_attack(&MeanXVictim, &clean, &cfg, 7).expect("attack");
    assert!(r.success, "mean_x -0.03 + 0.05 crosses the boundary");
    for (adv, orig) in r.cloud.points.iter().zip(&clean.points) {
        // Constant +x gradient: every x pins to the upper clamp exactly.
        assert_eq!(adv[0], orig[0] + cfg.epsilon, "x pinned at clean + eps");
        // Zero gradient on y/z: the random start is kept but never stepped.
        assert!((adv[1] - orig[1]).abs() <= cfg.epsilon + 1e-6);
        assert!((adv[2] - orig[2]).abs() <= cfg.epsilon + 1e-6);
    }
    let linf = r.linf.expect("same-order attack");
    assert!(linf <= cfg.epsilon + 1e-6);
    assert!((linf - cfg.epsilon).abs() < 1e-6, "x coords use the whole budget");
    assert_eq!(r.queries, cfg.steps + 1);
}

#[test]
fn pgd_with_zero_budget_returns_the_clean_cloud() {
    let clean = meanx_cloud(16);
    let cfg = PgdConfig {
        epsilon: 0.0,
        steps: 20,
        alpha: 0.01,
    };
    let r = pgd_attack(&MeanXVictim, &clean, &cfg, 7).expect("attack");
    assert_eq!(r.cloud.points, clean.points, "no budget, no movement");
    assert!(!r.success);
    assert_eq!(r.linf, Some(0.0));
    assert_eq!(r.chamfer, 0.0);
}

#[test]
fn pgd_under_budgeted_never_succeeds_here() {
    let clean = meanx_cloud(16);
    let cfg = PgdConfig {
        epsilon: 0.001,
        steps: 20,
        alpha: 0.01,
    };
    let r = pgd_attack(&MeanXVictim, &clean, &cfg, 7).expect("attack");
    assert!(!r.success, "0.001 cannot move mean_x past zero");
    assert!(r.linf.expect("linf") <= cfg.epsilon + 1e-6);
}

#[test]
fn pgd_is_seed_deterministic() {
    let clean = meanx_cloud(16);
    let cfg = PgdConfig::default();
    let a = pgd_attack(&MeanXVictim, &clean, &cfg, 11).expect("attack");
    let b = pgd_attack(&MeanXVictim, &clean, &cfg, 11).expect("attack");
    let c = pgd_attack(&MeanXVictim, &clean, &cfg, 12).expect("attack");
    assert_eq!(a.cloud.points, b.cloud.points);
    assert_ne!(a.cloud.points, c.cloud.points, "random start differs by seed");
}

#[test]
fn pgd_rejects_negative_budget() {
    let clean = meanx_cloud(8);
    let cfg = PgdConfig {
        epsilon: -0.1,
        ..PgdConfig::default()
    };
    assert!(matches!(
        pgd_attack(&MeanXVictim, &clean, &cfg, 1),
        Err(AttackError::BadConfig { .. })
    ));
}

// ── distance-regularized perturbation ────────────────────────────────────────

#[test]
fn perturb_regularizer_trades_success_margin_for_distance() {
    let clean = meanx_cloud(16);
    let loose = perturb_attack(
        &MeanXVictim,
        &clean,
        &PerturbConfig {
            steps: 60,
            lr: 0.05,
            beta_cd: 0.0,
        },
    )
    .expect("attack");
    let tight = perturb_attack(
        &MeanXVictim,
        &clean,
        &PerturbConfig {
            steps: 60,
            lr: 0.05,
            beta_cd: 2.0,
        },
    )
    .expect("attack");
    assert!(loose.success && tight.success);
    assert!(
        tight.chamfer < loose.chamfer,
        "beta_cd {} should shrink displacement vs {}",
        tight.chamfer,
        loose.chamfer
    );
}

#[test]
fn perturb_with_overwhelming_penalty_returns_the_clean_iterate() {
    // At the clean cloud the Chamfer gradient is zero, so iterate 1 moves by
    // the class gradient alone and immediately pays a huge penalty; the best
    // iterate stays the clean start.
    let clean = meanx_cloud(16);
    let r = perturb_attack(
        &MeanXVictim,
        &clean,
        &PerturbConfig {
            steps: 10,
            lr: 0.01,
            beta_cd: 1e6,
        },
    )
    .expect("attack");
    assert_eq!(r.cloud.points, clean.points);
    assert!(!r.success);
}

#[test]
fn perturb_zero_steps_is_identity() {
    let clean = meanx_cloud(16);
    let r = perturb_attack(
        &MeanXVictim,
        &clean,
        &PerturbConfig {
            steps: 0,
            lr: 0.01,
            beta_cd: 1.0,
        },
    )
    .expect("attack");
    assert_eq!(r.cloud.points, clean.points);
}

// ── kNN-regularized perturbation ─────────────────────────────────────────────

#[test]
fn knn_regularizer_limits_cloud_inflation() {
    let clean = blob_cloud(32, 0.5);
    let k = 4;
    let base = knn_mean_grad(&clean.points, k).expect("knn").0;
    let free = knn_attack(
        &RadialVictim,
        &clean,
        &KnnConfig {
            steps: 40,
            lr: 0.01,
            beta: 0.0,
            k,
        },
    )
    .expect("attack");
    let reined = knn_attack(
        &RadialVictim,
        &clean,
        &KnnConfig {
            steps: 40,
            lr: 0.01,
            beta: 20.0,
            k,
        },
    )
    .expect("attack");
    let free_knn = knn_mean_grad(&free.cloud.points, k).expect("knn").0;
    let reined_knn = knn_mean_grad(&reined.cloud.points, k).expect("knn").0;
    assert!(
        free_knn > base,
        "radial ascent must stretch neighbor distances ({free_knn} vs {base})"
    );
    assert!(
        reined_knn < free_knn,
        "penalty must rein in neighbor stretch ({reined_knn} vs {free_knn})"
    );
}

#[test]
fn knn_attack_rejects_bad_k() {
    let clean = blob_cloud(8, 0.5);
    let cfg = KnnConfig {
        k: 8,
        ..KnnConfig::default()
    };
    assert!(knn_attack(&MeanXVictim, &clean, &cfg).is_err());
}

// ── point addition ───────────────────────────────────────────────────────────

#[test]
fn add_attack_appends_exactly_and_leaves_originals_bitwise_intact() {
    let clean = meanx_cloud(16);
    let cfg = AddConfig {
        n_add: 5,
        steps: 30,
        lr: 0.05,
        beta: 1.0,
        metric: AddMetric::Chamfer,
    };
    let r = add_attack(&MeanXVictim, &clean, &cfg, 3).expect("attack");
    assert_eq!(r.cloud.len(), clean.len() + cfg.n_add);
    assert_eq!(&r.cloud.points[..clean.len()], &clean.points[..]);
    assert!(r.linf.is_none(), "point count changed; linf undefined");
    assert!(r.chamfer > 0.0);
}

#[test]
fn add_attack_hausdorff_keeps_additions_closer_to_the_surface() {
    // Directed Hausdorff penalizes the single worst added point, Chamfer the
    // mean: with the same weight, the HD run's worst offender stays nearer
    // the clean surface on this victim.
    let clean = meanx_cloud(16);
    let mk = |metric| AddConfig {
        n_add: 4,
        steps: 40,
        lr: 0.05,
        beta: 4.0,
        metric,
    };
    let cd = add_attack(&MeanXVictim, &clean, &mk(AddMetric::Chamfer), 5).expect("attack");
    let hd = add_attack(&MeanXVictim, &clean, &mk(AddMetric::Hausdorff), 5).expect("attack");
    let worst = |r: &pointprompt::attacks::AttackResult| {
        pointprompt::geometry::directed_hausdorff(&r.cloud.points[clean.len()..], &clean.points)
            .expect("hausdorff")
    };
    assert!(
        worst(&hd) <= worst(&cd) + 1e-6,
        "hd-regularized worst point {} vs cd-regularized {}",
        worst(&hd),
        worst(&cd)
    );
}

#[test]
fn add_attack_validates_count() {
    let clean = meanx_cloud(8);
    for n_add in [0usize, 9] {
        let cfg = AddConfig {
            n_add,
            ..AddConfig::default()
        };
        assert!(matches!(
            add_attack(&MeanXVictim, &clean, &cfg, 1),
            Err(AttackError::BadConfig { .. })
        ));
    }
}

// ── saliency dropping ────────────────────────────────────────────────────────

#[test]
fn drop_removes_highest_saliency_points() {
    // RadialVictim saliency is 4‖p‖²; build points with strictly increasing
    // norms so the top-k are the last k indices.
    let points: Vec<[f32; 3]> = (0..10).map(|i| [0.1 * (i + 1) as f32, 0.0, 0.0]).collect();
    let clean = PointCloud::new(points.clone(), 0, "ladder".to_string()).expect("cloud");
    let r = drop_attack(&RadialVictim, &clean, &DropConfig { n_drop: 3 }).expect("attack");
    assert_eq!(r.cloud.points, points[..7].to_vec());
}

#[test]
fn drop_breaks_saliency_ties_toward_lower_indices() {
    // Uniform gradient ⇒ equal saliency everywhere ⇒ the lower indices drop
    // first and the tail survives in order.
    let clean = meanx_cloud(10);
    let r = drop_attack(&MeanXVictim, &clean, &DropConfig { n_drop: 4 }).expect("attack");
    assert_eq!(r.cloud.points, clean.points[4..].to_vec());
    assert_eq!(r.queries, 2, "one gradient + one prediction");
}

#[test]
fn drop_validates_count() {
    let clean = meanx_cloud(8);
    for n_drop in [0usize, 8, 9] {
        assert!(matches!(
            drop_attack(&MeanXVictim, &clean, &DropConfig { n_drop }),
            Err(AttackError::BadConfig { .. })
        ));
    }
}

// ── defenses ─────────────────────────────────────────────────────────────────

#[test]
fn srs_keeps_an_ordered_subsample_of_exact_size() {
    let pc = blob_cloud(20, 1.0);
    let kept = srs_defense(&pc, 0.5, 42).expect("defense");
    assert_eq!(kept.len(), 10);
    // Survivors must be a subsequence of the original points.
    let mut cursor = 0usize;
    for p in &kept.points {
        while cursor < pc.len() && pc.points[cursor] != *p {
            cursor += 1;
        }
        assert!(cursor < pc.len(), "kept point not found in original order");
        cursor += 1;
    }
    let again = srs_defense(&pc, 0.5, 42).expect("defense");
    assert_eq!(kept.points, again.points, "seeded defense is deterministic");
    assert_eq!(kept.label, pc.label);
    assert_eq!(kept.id, pc.id);
}

#[test]
fn srs_minimum_one_point_and_ratio_validation() {
    let pc = blob_cloud(5, 1.0);
    let kept = srs_defense(&pc, 0.01, 1).expect("defense");
    assert_eq!(kept.len(), 1);
    assert!(srs_defense(&pc, 0.0, 1).is_err());
    assert!(srs_defense(&pc, 1.5, 1).is_err());
}

#[test]
fn sor_removes_a_planted_outlier_and_keeps_the_cluster() {
    let mut points: Vec<[f32; 3]> = (0..20)
        .map(|i| {
            let t = i as f32 * 0.4;
            [0.05 * t.sin(), 0.05 * t.cos(), 0.01 * i as f32]
        })
        .collect();
    points.push([5.0, 5.0, 5.0]);
    let pc = PointCloud::new(points, 2, "spiked".to_string()).expect("cloud");
    let kept = sor_defense(&pc, 3, 1.0).expect("defense");
    assert_eq!(kept.len(), 20, "exactly the outlier goes");
    assert!(kept.points.iter().all(|p| p[0] < 1.0));
}

#[test]
fn sor_keeps_the_most_central_point_when_threshold_empties_the_cloud() {
    let pc = blob_cloud(12, 1.0);
    let kept = sor_defense(&pc, 3, -100.0).expect("defense");
    assert_eq!(kept.len(), 1);
    // The survivor is the point with the smallest kNN mean distance.
    let d = pointprompt::geometry::knn_mean_distance(&pc.points, 3).expect("knn");
    let best = d
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
        .expect("non-empty")
        .0;
    assert_eq!(kept.points[0], pc.points[best]);
}

// ── archive ──────────────────────────────────────────────────────────────────

fn tiny_suite() -> AttackSuiteConfig {
    AttackSuiteConfig {
        pgd: PgdConfig {
            epsilon: 0.05,
            steps: 3,
            alpha: 0.02,
        },
        perturb: PerturbConfig {
            steps: 3,
            lr: 0.02,
            beta_cd: 1.0,
        },
        knn: KnnConfig {
            steps: 3,
            lr: 0.02,
            beta: 1.0,
            k: 3,
        },
        add: AddConfig {
            n_add: 3,
            steps: 3,
            lr: 0.02,
            beta: 1.0,
            metric: AddMetric::Chamfer,
        },
        drop: DropConfig { n_drop: 2 },
    }
}

#[test]
fn archive_roundtrips_bitwise() {
    let clouds = vec![meanx_cloud(12), blob_cloud(12, 0.6)];
    let archive = generate_archive(&MeanXVictim, &clouds, &tiny_suite(), 9).expect("archive");
    assert_eq!(archive.entries.len(), clouds.len() * 6, "clean + five families");
    assert_eq!(archive.of_kind(AttackKind::Clean).count(), 2);
    assert_eq!(archive.of_kind(AttackKind::Pgd).count(), 2);

    let dir = tempfile::tempdir().expect("tempdir");
    archive.write(dir.path()).expect("write");
    let back = AttackArchive::read(dir.path()).expect("read");
    assert_eq!(back.entries.len(), archive.entries.len());
    for (a, b) in archive.entries.iter().zip(&back.entries) {
        assert_eq!(a.kind, b.kind);
        assert_eq!(a.cloud.label, b.cloud.label);
        assert_eq!(a.cloud.id, b.cloud.id);
        assert_eq!(a.cloud.points, b.cloud.points, "float payload is bitwise stable");
    }
}

#[test]
fn archive_generation_is_deterministic() {
    let clouds = vec![meanx_cloud(12)];
    let a = generate_archive(&MeanXVictim, &clouds, &tiny_suite(), 4).expect("archive");
    let b = generate_archive(&MeanXVictim, &clouds, &tiny_suite(), 4).expect("archive");
    for (x, y) in a.entries.iter().zip(&b.entries) {
        assert_eq!(x.cloud.points, y.cloud.points);
    }
}

#[test]
fn archive_rejects_corruption() {
    let clouds = vec![meanx_cloud(8)];
    let archive = generate_archive(&MeanXVictim, &clouds, &tiny_suite(), 2).expect("archive");
    let dir = tempfile::tempdir().expect("tempdir");
    archive.write(dir.path()).expect("write");

    // Header tampering.
    let mpath = dir.path().join("attacks.manifest");
    let manifest = std::fs::read_to_string(&mpath).expect("read");
    std::fs::write(&mpath, manifest.replace("pointprompt-attacks 1", "pointprompt-attacks 9"))
        .expect("write");
    assert!(matches!(
        AttackArchive::read(dir.path()),
        Err(AttackError::ArchiveFormat { .. })
    ));
    std::fs::write(&mpath, &manifest).expect("restore");

    // Blob truncation.
    let bpath = dir.path().join("attacks.f32");
    let blob = std::fs::read(&bpath).expect("read");
    std::fs::write(&bpath, &blob[..blob.len() - 12]).expect("write");
    assert!(matches!(
        AttackArchive::read(dir.path()),
        Err(AttackError::ArchiveFormat { .. })
    ));
}
