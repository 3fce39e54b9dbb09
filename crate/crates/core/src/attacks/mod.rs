//! Gradient-based point-cloud attacks, preprocessing defenses, and the
//! on-disk archive used for black-box transfer evaluation.
//!
//! Attacks are written against the [`VictimModel`] trait and the geometry
//! gradients, not against any particular encoder, so the same code runs
//! white-box (victim = evaluated model) and transfer (victim = surrogate).
//! Every attack is deterministic in `(victim, cloud, config, seed)`.

mod archive;

pub use archive::{
    generate_archive, ArchiveEntry, AttackArchive, AttackSuiteConfig, ARCHIVE_BLOB,
    ARCHIVE_MANIFEST,
};

use crate::geometry::{
    chamfer_distance, chamfer_grad, directed_chamfer_grad, directed_hausdorff_grad,
    fps_indices, knn_mean_distance, knn_mean_grad, GeomError, PointCloud,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("bad attack config: {what}")]
    BadConfig { what: String },
    #[error("unknown attack kind '{0}'")]
    UnknownKind(String),
    #[error("attack archive: {msg}")]
    ArchiveFormat { msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The classifier under attack. `loss_grad` returns the scalar objective an
/// untargeted attacker ascends (typically cross-entropy of the true label)
/// and its gradient with respect to every input point.
pub trait VictimModel {
    fn num_classes(&self) -> usize;
    fn predict(&self, points: &[[f32; 3]]) -> usize;
    fn loss_grad(&self, points: &[[f32; 3]], label: usize) -> (f32, Vec<[f32; 3]>);
}

/// Attack families, including the clean pass-through used as an archive
/// baseline row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Clean,
    Pgd,
    Perturb,
    Knn,
    AddCd,
    AddHd,
    Drop,
}

impl AttackKind {
    /// The five kinds archived for transfer evaluation (plus clean rows).
    pub const ARCHIVED: [AttackKind; 5] = [
        AttackKind::Pgd,
        AttackKind::Perturb,
        AttackKind::Knn,
        AttackKind::AddCd,
        AttackKind::Drop,
    ];

    /// Every gradient-based kind, as evaluated white-box.
    pub const ALL_ATTACKS: [AttackKind; 6] = [
        AttackKind::Pgd,
        AttackKind::Perturb,
        AttackKind::Knn,
        AttackKind::AddCd,
        AttackKind::AddHd,
        AttackKind::Drop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Clean => "clean",
            AttackKind::Pgd => "pgd",
            AttackKind::Perturb => "perturb",
            AttackKind::Knn => "knn",
            AttackKind::AddCd => "add-cd",
            AttackKind::AddHd => "add-hd",
            AttackKind::Drop => "drop",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(AttackKind::Clean),
            "pgd" => Ok(AttackKind::Pgd),
            "perturb" => Ok(AttackKind::Perturb),
            "knn" => Ok(AttackKind::Knn),
            "add-cd" => Ok(AttackKind::AddCd),
            "add-hd" => Ok(AttackKind::AddHd),
            "drop" => Ok(AttackKind::Drop),
            other => Err(AttackError::UnknownKind(other.to_string())),
        }
    }
}

/// Outcome of one attack run.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Adversarial cloud; keeps the source label and id.
    pub cloud: PointCloud,
    /// Whether the victim now misclassifies it.
    pub success: bool,
    /// Victim calls spent (`loss_grad` and `predict` both count).
    pub queries: usize,
    /// Max per-coordinate displacement; `None` for attacks that change the
    /// point count.
    pub linf: Option<f32>,
    /// Symmetric Chamfer distance to the clean cloud.
    pub chamfer: f32,
}

fn linf_between(a: &[[f32; 3]], b: &[[f32; 3]]) -> f32 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f32::max)
}

fn finish(
    victim: &dyn VictimModel,
    clean: &PointCloud,
    adv_points: Vec<[f32; 3]>,
    queries: usize,
    same_order: bool,
) -> Result<AttackResult, AttackError> {
    let success = victim.predict(&adv_points) != clean.label;
    let chamfer = chamfer_distance(&adv_points, &clean.points)?;
    let linf = same_order.then(|| linf_between(&adv_points, &clean.points));
    let cloud = PointCloud::new(adv_points, clean.label, clean.id.clone())?;
    Ok(AttackResult {
        cloud,
        success,
        queries: queries + 1,
        linf,
        chamfer,
    })
}

// ── PGD (L∞) ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PgdConfig {
    /// L∞ ball radius around each clean coordinate.
    pub epsilon: f32,
    pub steps: usize,
    /// Step size multiplying the gradient sign.
    pub alpha: f32,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            steps: 20,
            alpha: 0.01,
        }
    }
}

/// Sign-gradient ascent with random start, projected back onto the L∞ ball
/// after every step. Returns the final iterate.
pub fn pgd_attack(
    victim: &dyn VictimModel,
    clean: &PointCloud,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    if cfg.epsilon < 0.0 || cfg.alpha < 0.0 {
        return Err(AttackError::BadConfig {
            what: format!("epsilon {} and alpha {} must be >= 0", cfg.epsilon, cfg.alpha),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = clean.points.clone();
    if cfg.epsilon > 0.0 {
        for p in &mut x {
            for c in p.iter_mut() {
                *c += rng.random_range(-cfg.epsilon..cfg.epsilon);
            }
        }
    }
    let mut queries = 0usize;
    for _ in 0..cfg.steps {
        let (_, g) = victim.loss_grad(&x, clean.label);
        queries += 1;
        for (i, p) in x.iter_mut().enumerate() {
            for c in 0..3 {
                // True sign: zero gradient means no step (f32::signum would
                // map 0.0 to 1.0 and drift unattacked coordinates).
                let sign = if g[i][c] > 0.0 {
                    1.0
                } else if g[i][c] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let stepped = p[c] + cfg.alpha * sign;
                let lo = clean.points[i][c] - cfg.epsilon;
                let hi = clean.points[i][c] + cfg.epsilon;
                p[c] = stepped.clamp(lo, hi);
            }
        }
    }
    finish(victim, clean, x, queries, true)
}

// ── distance-regularized perturbation ────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PerturbConfig {
    pub steps: usize,
    pub lr: f32,
    /// Weight of the Chamfer penalty tying the iterate to the clean cloud.
    pub beta_cd: f32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 0.01,
            beta_cd: 5.0,
        }
    }
}

/// Gradient ascent on `loss − β·CD(x, clean)`, returning the best iterate
/// by that objective (the clean starting point is iterate zero, so a failed
/// ascent degrades gracefully to the clean cloud).
pub fn perturb_attack(
    victim: &dyn VictimModel,
    clean: &PointCloud,
    cfg: &PerturbConfig,
) -> Result<AttackResult, AttackError> {
    if cfg.lr <= 0.0 || cfg.beta_cd < 0.0 {
        return Err(AttackError::BadConfig {
            what: format!("lr {} must be > 0, beta_cd {} >= 0", cfg.lr, cfg.beta_cd),
        });
    }
    let mut x = clean.points.clone();
    let mut best = x.clone();
    let mut best_obj = f32::NEG_INFINITY;
    let mut queries = 0usize;
    for _ in 0..=cfg.steps {
        let (loss, g_loss) = victim.loss_grad(&x, clean.label);
        queries += 1;
        let (cd, g_cd) = chamfer_grad(&x, &clean.points)?;
        let obj = loss - cfg.beta_cd * cd;
        if obj > best_obj {
            best_obj = obj;
            best.copy_from_slice(&x);
        }
        for (i, p) in x.iter_mut().enumerate() {
            for c in 0..3 {
                p[c] += cfg.lr * (g_loss[i][c] - cfg.beta_cd * g_cd[i][c]);
            }
        }
    }
    finish(victim, clean, best, queries, true)
}

// ── kNN-smoothness-regularized perturbation ──────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct KnnConfig {
    pub steps: usize,
    pub lr: f32,
    /// Weight of the mean k-nearest-neighbor distance penalty.
    pub beta: f32,
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 0.01,
            beta: 5.0,
            k: 5,
        }
    }
}

/// Gradient ascent on `loss − β·knn(x)` where `knn` is the cloud's mean
/// k-nearest-neighbor distance — the penalty discourages stray points rather
/// than displacement, complementing [`perturb_attack`]. Best iterate wins.
pub fn knn_attack(
    victim: &dyn VictimModel,
    clean: &PointCloud,
    cfg: &KnnConfig,
) -> Result<AttackResult, AttackError> {
    if cfg.lr <= 0.0 || cfg.beta < 0.0 {
        return Err(AttackError::BadConfig {
            what: format!("lr {} must be > 0, beta {} >= 0", cfg.lr, cfg.beta),
        });
    }
    let mut x = clean.points.clone();
    let mut best = x.clone();
    let mut best_obj = f32::NEG_INFINITY;
    let mut queries = 0usize;
    for _ in 0..=cfg.steps {
        let (loss, g_loss) = victim.loss_grad(&x, clean.label);
        queries += 1;
        let (knn, g_knn) = knn_mean_grad(&x, cfg.k)?;
        let obj = loss - cfg.beta * knn;
        if obj > best_obj {
            best_obj = obj;
            best.copy_from_slice(&x);
        }
        for (i, p) in x.iter_mut().enumerate() {
            for c in 0..3 {
                p[c] += cfg.lr * (g_loss[i][c] - cfg.beta * g_knn[i][c]);
            }
        }
    }
    finish(victim, clean, best, queries, true)
}

// ── point addition ───────────────────────────────────────────────────────────

/// Which directed distance (added → clean) regularizes the added points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AddMetric {
    Chamfer,
    Hausdorff,
}

#[derive(Clone, Copy, Debug)]
pub struct AddConfig {
    /// Number of adversarial points appended to the cloud.
    pub n_add: usize,
    pub steps: usize,
    pub lr: f32,
    /// Weight of the directed distance pulling added points to the surface.
    pub beta: f32,
    pub metric: AddMetric,
}

impl Default for AddConfig {
    fn default() -> Self {
        Self {
            n_add: 64,
            steps: 50,
            lr: 0.01,
            beta: 5.0,
            metric: AddMetric::Chamfer,
        }
    }
}

/// Appends `n_add` optimized points; the original points are returned
/// bit-for-bit untouched. Added points start at a farthest-point sample of
/// the clean cloud plus small jitter, then ascend
/// `loss(clean ⧺ a) − β·D(a → clean)` with `D` directed Chamfer or
/// Hausdorff. Best iterate by that objective wins.
pub fn add_attack(
    victim: &dyn VictimModel,
    clean: &PointCloud,
    cfg: &AddConfig,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    if cfg.n_add == 0 || cfg.n_add > clean.len() {
        return Err(AttackError::BadConfig {
            what: format!("n_add {} must be in 1..={}", cfg.n_add, clean.len()),
        });
    }
    if cfg.lr <= 0.0 || cfg.beta < 0.0 {
        return Err(AttackError::BadConfig {
            what: format!("lr {} must be > 0, beta {} >= 0", cfg.lr, cfg.beta),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0f32, 0.01).expect("positive sigma");
    let mut added: Vec<[f32; 3]> = fps_indices(&clean.points, cfg.n_add, 0)?
        .into_iter()
        .map(|i| {
            let p = clean.points[i];
            [
                p[0] + jitter.sample(&mut rng),
                p[1] + jitter.sample(&mut rng),
                p[2] + jitter.sample(&mut rng),
            ]
        })
        .collect();

    let n = clean.len();
    let mut best = added.clone();
    let mut best_obj = f32::NEG_INFINITY;
    let mut queries = 0usize;
    for _ in 0..=cfg.steps {
        let mut full = clean.points.clone();
        full.extend_from_slice(&added);
        let (loss, g_full) = victim.loss_grad(&full, clean.label);
        queries += 1;
        let (dist, g_reg) = match cfg.metric {
            AddMetric::Chamfer => directed_chamfer_grad(&added, &clean.points)?,
            AddMetric::Hausdorff => directed_hausdorff_grad(&added, &clean.points)?,
        };
        let obj = loss - cfg.beta * dist;
        if obj > best_obj {
            best_obj = obj;
            best.copy_from_slice(&added);
        }
        for (i, p) in added.iter_mut().enumerate() {
            for c in 0..3 {
                p[c] += cfg.lr * (g_full[n + i][c] - cfg.beta * g_reg[i][c]);
            }
        }
    }
    let mut full = clean.points.clone();
    full.extend_from_slice(&best);
    finish(victim, clean, full, queries, false)
}

// ── saliency-based point dropping ────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct DropConfig {
    /// Number of points removed.
    pub n_drop: usize,
}

impl Default for DropConfig {
    fn default() -> Self {
        Self { n_drop: 50 }
    }
}

/// Removes the `n_drop` points with the largest saliency `‖∂loss/∂pᵢ‖²`
/// (gradient taken at the clean cloud); saliency ties drop the lower index
/// first. Remaining points keep their original order.
pub fn drop_attack(
    victim: &dyn VictimModel,
    clean: &PointCloud,
    cfg: &DropConfig,
) -> Result<AttackResult, AttackError> {
    if cfg.n_drop == 0 || cfg.n_drop >= clean.len() {
        return Err(AttackError::BadConfig {
            what: format!("n_drop {} must be in 1..{}", cfg.n_drop, clean.len()),
        });
    }
    let (_, g) = victim.loss_grad(&clean.points, clean.label);
    let saliency: Vec<f32> = g
        .iter()
        .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
        .collect();
    let mut order: Vec<usize> = (0..clean.len()).collect();
    // Descending saliency; equal saliencies resolve to the lower index, so
    // that index is dropped first.
    order.sort_by(|&a, &b| {
        saliency[b]
            .partial_cmp(&saliency[a])
            .expect("finite saliency")
            .then(a.cmp(&b))
    });
    let mut dropped = vec![false; clean.len()];
    for &i in order.iter().take(cfg.n_drop) {
        dropped[i] = true;
    }
    let kept: Vec<[f32; 3]> = clean
        .points
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped[*i])
        .map(|(_, p)| *p)
        .collect();
    finish(victim, clean, kept, 1, false)
}

// ── preprocessing defenses ───────────────────────────────────────────────────

/// Simple random sampling: keeps `round(keep_ratio · n)` points (at least
/// one), chosen uniformly without replacement; survivors keep their original
/// relative order. Deterministic in `seed`.
pub fn srs_defense(
    pc: &PointCloud,
    keep_ratio: f32,
    seed: u64,
) -> Result<PointCloud, AttackError> {
    if !(0.0..=1.0).contains(&keep_ratio) || keep_ratio <= 0.0 {
        return Err(AttackError::BadConfig {
            what: format!("keep_ratio {keep_ratio} must be in (0, 1]"),
        });
    }
    let n = pc.len();
    let count = ((keep_ratio * n as f32).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    let points: Vec<[f32; 3]> = idx.into_iter().map(|i| pc.points[i]).collect();
    Ok(PointCloud::new(points, pc.label, pc.id.clone())?)
}

/// Statistical outlier removal: drops points whose mean distance to their
/// `k` nearest neighbors exceeds `mean + alpha·std` of that statistic. If
/// the threshold would remove everything, the single most central point
/// survives.
pub fn sor_defense(pc: &PointCloud, k: usize, alpha: f32) -> Result<PointCloud, AttackError> {
    let d = knn_mean_distance(&pc.points, k)?;
    let n = d.len() as f64;
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = d
        .iter()
        .map(|&v| {
            let e = v as f64 - mean;
            e * e
        })
        .sum::<f64>()
        / n;
    let thr = (mean + alpha as f64 * var.sqrt()) as f32;
    let kept: Vec<[f32; 3]> = pc
        .points
        .iter()
        .zip(&d)
        .filter(|(_, &di)| di <= thr)
        .map(|(p, _)| *p)
        .collect();
    let points = if kept.is_empty() {
        let (best, _) = d
            .iter()
            .enumerate()
            .fold((0usize, f32::INFINITY), |(bi, bv), (i, &v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        vec![pc.points[best]]
    } else {
        kept
    };
    Ok(PointCloud::new(points, pc.label, pc.id.clone())?)
}
