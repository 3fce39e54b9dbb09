//! Synthetic shape classes: seeded surface samplers for eight families.
//!
//! Sampling is deterministic per `(family, n, seed)` — identical draws in
//! identical order — so datasets regenerate bitwise-equal from a manifest.

use super::{normalize_to_unit_sphere, GeomError, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::fmt;
use std::str::FromStr;

/// The eight synthetic shape families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Ellipsoid,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Pyramid,
        ShapeFamily::Ellipsoid,
        ShapeFamily::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Pyramid => "pyramid",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Cross => "cross",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| GeomError::UnknownClass(s.to_string()))
    }
}

/// One synthetic class: a named surface family with a jitter level and the
/// label index it occupies in the dataset's class list.
#[derive(Clone, Debug)]
pub struct ShapeClassSpec {
    pub name: String,
    pub family: ShapeFamily,
    pub noise: f32,
    pub label: usize,
}

/// The standard eight-class roster, labeled in declaration order.
pub fn default_classes(noise: f32) -> Vec<ShapeClassSpec> {
    ShapeFamily::ALL
        .into_iter()
        .enumerate()
        .map(|(label, family)| ShapeClassSpec {
            name: family.name().to_string(),
            family,
            noise,
            label,
        })
        .collect()
}

/// Raw surface samples for a family (pre-jitter, pre-normalization).
/// Per-instance shape parameters (e.g. cylinder height) are drawn from the
/// rng first, then `n` surface points.
pub fn sample_surface(family: ShapeFamily, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    match family {
        ShapeFamily::Sphere => (0..n).map(|_| unit_dir(rng)).collect(),
        ShapeFamily::Cube => (0..n)
            .map(|_| {
                let face = rng.random_range(0..6usize);
                let u = rng.random_range(-1.0f32..=1.0);
                let v = rng.random_range(-1.0f32..=1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            })
            .collect(),
        ShapeFamily::Cylinder => {
            let r = 0.6f32;
            let h = rng.random_range(0.7f32..1.1); // half-height
            let side_area = 2.0 * std::f32::consts::PI * r * (2.0 * h);
            let cap_area = std::f32::consts::PI * r * r;
            let total = side_area + 2.0 * cap_area;
            (0..n)
                .map(|_| {
                    let pick = rng.random_range(0.0f32..total);
                    if pick < side_area {
                        let th = rng.random_range(0.0f32..std::f32::consts::TAU);
                        let z = rng.random_range(-h..h);
                        [r * th.cos(), r * th.sin(), z]
                    } else {
                        let z = if pick < side_area + cap_area { h } else { -h };
                        let rr = r * rng.random_range(0.0f32..1.0).sqrt();
                        let th = rng.random_range(0.0f32..std::f32::consts::TAU);
                        [rr * th.cos(), rr * th.sin(), z]
                    }
                })
                .collect()
        }
        ShapeFamily::Cone => {
            let rb = rng.random_range(0.6f32..0.9); // base radius
            let h = 2.0f32; // apex z = 1, base z = -1
            let slant = (rb * rb + h * h).sqrt();
            let side_area = std::f32::consts::PI * rb * slant;
            let base_area = std::f32::consts::PI * rb * rb;
            let total = side_area + base_area;
            (0..n)
                .map(|_| {
                    let th = rng.random_range(0.0f32..std::f32::consts::TAU);
                    if rng.random_range(0.0f32..total) < side_area {
                        // Lateral surface: area density ∝ distance from apex.
                        let t = rng.random_range(0.0f32..1.0).sqrt();
                        [rb * t * th.cos(), rb * t * th.sin(), 1.0 - h * t]
                    } else {
                        let rr = rb * rng.random_range(0.0f32..1.0).sqrt();
                        [rr * th.cos(), rr * th.sin(), -1.0]
                    }
                })
                .collect()
        }
        ShapeFamily::Torus => {
            let big = 0.75f32;
            let tube = rng.random_range(0.2f32..0.35);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let th = rng.random_range(0.0f32..std::f32::consts::TAU);
                let ph = rng.random_range(0.0f32..std::f32::consts::TAU);
                // Rejection step keeps sampling area-uniform over the surface.
                let accept = (big + tube * ph.cos()) / (big + tube);
                if rng.random_range(0.0f32..1.0) < accept {
                    let ring = big + tube * ph.cos();
                    out.push([ring * th.cos(), ring * th.sin(), tube * ph.sin()]);
                }
            }
            out
        }
        ShapeFamily::Pyramid => {
            let half = 0.8f32; // base half-width, base at z0, apex on +z
            let z0 = -0.6f32;
            let apex = [0.0f32, 0.0, 1.0];
            let corners = [
                [half, half, z0],
                [-half, half, z0],
                [-half, -half, z0],
                [half, -half, z0],
            ];
            let side = tri_area(corners[0], corners[1], apex);
            let base_area = (2.0 * half) * (2.0 * half);
            let total = 4.0 * side + base_area;
            (0..n)
                .map(|_| {
                    let pick = rng.random_range(0.0f32..total);
                    if pick < 4.0 * side {
                        let face = (pick / side) as usize % 4;
                        sample_triangle(corners[face], corners[(face + 1) % 4], apex, rng)
                    } else {
                        let x = rng.random_range(-half..=half);
                        let y = rng.random_range(-half..=half);
                        [x, y, z0]
                    }
                })
                .collect()
        }
        ShapeFamily::Ellipsoid => {
            let b = rng.random_range(0.5f32..0.65);
            let c = rng.random_range(0.3f32..0.45);
            (0..n)
                .map(|_| {
                    let d = unit_dir(rng);
                    [d[0], d[1] * b, d[2] * c]
                })
                .collect()
        }
        ShapeFamily::Cross => (0..n)
            .map(|_| {
                let u = rng.random_range(-1.0f32..=1.0);
                let v = rng.random_range(-1.0f32..=1.0);
                if rng.random_range(0.0f32..1.0) < 0.5 {
                    [u, 0.0, v] // xz-plane sheet
                } else {
                    [0.0, u, v] // yz-plane sheet
                }
            })
            .collect(),
    }
}

/// Generates one sample of a class: seeded surface draw, iid Gaussian jitter
/// per coordinate, then unit-sphere normalization. Needs `n >= 2`.
pub fn generate_shape(
    spec: &ShapeClassSpec,
    n: usize,
    seed: u64,
) -> Result<PointCloud, GeomError> {
    if n < 2 {
        return Err(GeomError::CountOutOfRange {
            op: "generate_shape",
            got: n,
            min: 2,
            max: usize::MAX,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = sample_surface(spec.family, n, &mut rng);
    if spec.noise > 0.0 {
        let jitter = Normal::new(0.0f32, spec.noise).expect("positive sigma");
        for p in &mut points {
            for c in p.iter_mut() {
                *c += jitter.sample(&mut rng);
            }
        }
    }
    let cloud = PointCloud::new(points, spec.label, format!("{}-s{seed}", spec.name))?;
    normalize_to_unit_sphere(&cloud)
}

fn unit_dir(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let x: f32 = StandardNormal.sample(rng);
        let y: f32 = StandardNormal.sample(rng);
        let z: f32 = StandardNormal.sample(rng);
        let n = (x * x + y * y + z * z).sqrt();
        if n > 1e-6 {
            return [x / n, y / n, z / n];
        }
    }
}

fn tri_area(a: [f32; 3], b: [f32; 3], c: [f32; 3]) -> f32 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = u[1] * v[2] - u[2] * v[1];
    let y = u[2] * v[0] - u[0] * v[2];
    let z = u[0] * v[1] - u[1] * v[0];
    0.5 * (x * x + y * y + z * z).sqrt()
}

fn sample_triangle(
    a: [f32; 3],
    b: [f32; 3],
    c: [f32; 3],
    rng: &mut ChaCha8Rng,
) -> [f32; 3] {
    // Uniform barycentric sampling via the square-root trick.
    let su = rng.random_range(0.0f32..1.0).sqrt();
    let v = rng.random_range(0.0f32..1.0);
    let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
    [
        wa * a[0] + wb * b[0] + wc * c[0],
        wa * a[1] + wb * b[1] + wc * c[1],
        wa * a[2] + wb * b[2] + wc * c[2],
    ]
}
