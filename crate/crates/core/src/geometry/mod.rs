//! Point-cloud primitives: normalization, sampling, and set distances.
//!
//! Distance functions operate on raw `[f32; 3]` slices so attacks can reuse
//! them on partial clouds (e.g. only the added points). Every attack budget
//! is recomputable through these exact functions.

mod dataset;
mod shapes;

pub use dataset::{
    generate_dataset, load_manifest, manifest_for_split, mix_seed, read_manifest,
    read_off, write_manifest, Dataset, DatasetSpec, Manifest, ManifestEntry,
    SampleSource,
};
pub use shapes::{
    default_classes, generate_shape, sample_surface, ShapeClassSpec, ShapeFamily,
};

use thiserror::Error;

/// Errors raised by geometry ops and dataset plumbing.
#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("degenerate cloud: max spread {spread:.3e} below 1e-9 (all points coincide)")]
    DegenerateCloud { spread: f32 },
    #[error("{op}: count {got} out of range [{min}, {max}]")]
    CountOutOfRange {
        op: &'static str,
        got: usize,
        min: usize,
        max: usize,
    },
    #[error("knn: k = {k} invalid for a cloud of {n} points (need 1 <= k <= n-1)")]
    KTooLarge { k: usize, n: usize },
    #[error("unknown shape class '{0}'")]
    UnknownClass(String),
    #[error("manifest line {line}: {msg}")]
    ManifestFormat { line: usize, msg: String },
    #[error("OFF file: {msg}")]
    OffFormat { msg: String },
    #[error("OFF mesh has {have} vertices, need at least {want}")]
    TooFewVertices { have: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labeled point cloud with a stable sample identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
    pub id: String,
}

impl PointCloud {
    /// Builds a cloud; rejects empty point sets.
    pub fn new(points: Vec<[f32; 3]>, label: usize, id: impl Into<String>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        Ok(Self {
            points,
            label,
            id: id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flat `[N, 3]` view for tape consumption.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }
}

#[inline]
fn sq_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index and squared distance of the point in `set` nearest to `p`.
/// Ties resolve to the lowest index.
fn nearest(p: [f32; 3], set: &[[f32; 3]]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (j, &q) in set.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

// ── normalization ───────────────────────────────────────────────────────────

/// Centers the cloud on its centroid and scales it so the farthest point sits
/// on the unit sphere. Errors when all points coincide.
pub fn normalize_to_unit_sphere(pc: &PointCloud) -> Result<PointCloud, GeomError> {
    let n = pc.points.len() as f32;
    let mut c = [0.0f32; 3];
    for p in &pc.points {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    c = [c[0] / n, c[1] / n, c[2] / n];
    let mut r2 = 0.0f32;
    for p in &pc.points {
        r2 = r2.max(sq_dist(*p, c));
    }
    let r = r2.sqrt();
    if r < 1e-9 {
        return Err(GeomError::DegenerateCloud { spread: r });
    }
    let inv = 1.0 / r;
    let points = pc
        .points
        .iter()
        .map(|p| [(p[0] - c[0]) * inv, (p[1] - c[1]) * inv, (p[2] - c[2]) * inv])
        .collect();
    Ok(PointCloud {
        points,
        label: pc.label,
        id: pc.id.clone(),
    })
}

// ── farthest point sampling ─────────────────────────────────────────────────

/// Greedy farthest-point subset of size `n`, starting from `start`.
/// Deterministic: distance ties resolve to the lowest candidate index.
/// Returns indices into `points` in selection order.
pub fn fps_indices(points: &[[f32; 3]], n: usize, start: usize) -> Result<Vec<usize>, GeomError> {
    if points.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    if n == 0 || n > points.len() {
        return Err(GeomError::CountOutOfRange {
            op: "farthest_point_sample",
            got: n,
            min: 1,
            max: points.len(),
        });
    }
    if start >= points.len() {
        return Err(GeomError::CountOutOfRange {
            op: "farthest_point_sample start",
            got: start,
            min: 0,
            max: points.len() - 1,
        });
    }
    let mut selected = Vec::with_capacity(n);
    selected.push(start);
    let mut dist: Vec<f32> = points.iter().map(|&p| sq_dist(p, points[start])).collect();
    while selected.len() < n {
        let mut best = (0usize, f32::NEG_INFINITY);
        for (i, &d) in dist.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        selected.push(best.0);
        for (i, &p) in points.iter().enumerate() {
            let d = sq_dist(p, points[best.0]);
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    Ok(selected)
}

/// [`fps_indices`] applied to a cloud, preserving label and id.
pub fn farthest_point_sample(
    pc: &PointCloud,
    n: usize,
    start: usize,
) -> Result<PointCloud, GeomError> {
    let idx = fps_indices(&pc.points, n, start)?;
    Ok(PointCloud {
        points: idx.into_iter().map(|i| pc.points[i]).collect(),
        label: pc.label,
        id: pc.id.clone(),
    })
}

// ── set distances ───────────────────────────────────────────────────────────

/// Directed Chamfer term: mean over `a` of the squared distance to the
/// nearest point of `b`.
pub fn directed_chamfer(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f32, GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let mut acc = 0.0f32;
    for &p in a {
        acc += nearest(p, b).1;
    }
    Ok(acc / a.len() as f32)
}

/// Symmetric Chamfer distance: sum of both directed mean-squared terms.
pub fn chamfer_distance(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f32, GeomError> {
    Ok(directed_chamfer(a, b)? + directed_chamfer(b, a)?)
}

/// Directed Hausdorff term: max over `a` of the (unsquared) distance to the
/// nearest point of `b`.
pub fn directed_hausdorff(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f32, GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let mut worst = 0.0f32;
    for &p in a {
        let d = nearest(p, b).1;
        if d > worst {
            worst = d;
        }
    }
    Ok(worst.sqrt())
}

/// Symmetric Hausdorff distance: max of the two directed terms.
pub fn hausdorff_distance(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f32, GeomError> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Per-point mean Euclidean distance to the `k` nearest neighbors
/// (self excluded). Requires `1 <= k <= n-1`.
pub fn knn_mean_distance(points: &[[f32; 3]], k: usize) -> Result<Vec<f32>, GeomError> {
    let n = points.len();
    if n == 0 {
        return Err(GeomError::EmptyCloud);
    }
    if k == 0 || k >= n {
        return Err(GeomError::KTooLarge { k, n });
    }
    let mut out = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, &p) in points.iter().enumerate() {
        dists.clear();
        for (j, &q) in points.iter().enumerate() {
            if i != j {
                dists.push(sq_dist(p, q));
            }
        }
        // Partial sort: only the k smallest matter.
        dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        let mean = dists[..k].iter().map(|d| d.sqrt()).sum::<f32>() / k as f32;
        out.push(mean);
    }
    Ok(out)
}

// ── gradients of set distances (attack support) ─────────────────────────────
//
// Hand-derived gradients; all are checked against central differences in the
// test suite. Nearest-neighbor assignments are treated as locally constant.

/// Value and gradient of [`directed_chamfer`]`(a, b)` with respect to `a`.
pub fn directed_chamfer_grad(
    a: &[[f32; 3]],
    b: &[[f32; 3]],
) -> Result<(f32, Vec<[f32; 3]>), GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let inv = 1.0 / a.len() as f32;
    let mut value = 0.0f32;
    let mut grad = vec![[0.0f32; 3]; a.len()];
    for (i, &p) in a.iter().enumerate() {
        let (j, d) = nearest(p, b);
        value += d;
        let q = b[j];
        for c in 0..3 {
            grad[i][c] = 2.0 * (p[c] - q[c]) * inv;
        }
    }
    Ok((value * inv, grad))
}

/// Value and gradient of the symmetric [`chamfer_distance`]`(a, b)` with
/// respect to `a` (`b` held fixed).
pub fn chamfer_grad(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<(f32, Vec<[f32; 3]>), GeomError> {
    let (v_ab, mut grad) = directed_chamfer_grad(a, b)?;
    let inv_b = 1.0 / b.len() as f32;
    let mut v_ba = 0.0f32;
    for &q in b {
        let (i, d) = nearest(q, a);
        v_ba += d;
        for c in 0..3 {
            grad[i][c] += 2.0 * (a[i][c] - q[c]) * inv_b;
        }
    }
    Ok((v_ab + v_ba * inv_b, grad))
}

/// Value and gradient of [`directed_hausdorff`]`(a, b)` with respect to `a`.
/// The gradient is supported on the single worst point (first argmax).
pub fn directed_hausdorff_grad(
    a: &[[f32; 3]],
    b: &[[f32; 3]],
) -> Result<(f32, Vec<[f32; 3]>), GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let mut worst = (0usize, 0usize, 0.0f32);
    for (i, &p) in a.iter().enumerate() {
        let (j, d) = nearest(p, b);
        if d > worst.2 {
            worst = (i, j, d);
        }
    }
    let value = worst.2.sqrt();
    let mut grad = vec![[0.0f32; 3]; a.len()];
    if value > 0.0 {
        let (i, j, _) = worst;
        let inv = 1.0 / value;
        for c in 0..3 {
            grad[i][c] = (a[i][c] - b[j][c]) * inv;
        }
    }
    Ok((value, grad))
}

/// Value and gradient of `mean_i(knn_mean_distance)` with respect to the
/// points themselves (neighbor assignments held fixed).
pub fn knn_mean_grad(points: &[[f32; 3]], k: usize) -> Result<(f32, Vec<[f32; 3]>), GeomError> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(GeomError::KTooLarge { k, n });
    }
    let scale = 1.0 / (n as f32 * k as f32);
    let mut value = 0.0f32;
    let mut grad = vec![[0.0f32; 3]; n];
    let mut pairs: Vec<(f32, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        pairs.clear();
        for (j, &q) in points.iter().enumerate() {
            if j != i {
                pairs.push((sq_dist(points[i], q), j));
            }
        }
        pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite distances"));
        for &(d2, j) in &pairs[..k] {
            let d = d2.sqrt();
            value += d * scale;
            if d > 0.0 {
                let inv = scale / d;
                for c in 0..3 {
                    let u = (points[i][c] - points[j][c]) * inv;
                    grad[i][c] += u;
                    grad[j][c] -= u;
                }
            }
        }
    }
    Ok((value, grad))
}
