//! Dataset generation and the text manifest that makes it reproducible.
//!
//! A manifest records, per sample, either the synthetic seed to regenerate it
//! bitwise or the path of an OFF mesh to ingest (FPS downsample + normalize).

use super::shapes::{default_classes, generate_shape, ShapeClassSpec, ShapeFamily};
use super::{farthest_point_sample, normalize_to_unit_sphere, GeomError, PointCloud};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const MANIFEST_MAGIC: &str = "pointprompt-dataset";
const MANIFEST_VERSION: u32 = 1;

/// Parameters for a synthetic dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub classes: Vec<ShapeClassSpec>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// The standard bench: 8 classes × (120 train + 40 test) × 256 points,
    /// jitter σ = 0.01.
    pub fn standard(seed: u64) -> Self {
        Self {
            classes: default_classes(0.01),
            train_per_class: 120,
            test_per_class: 40,
            points: 256,
            seed,
        }
    }
}

/// Generated splits plus the ordered class-name list (index = label).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
}

/// Where a manifest entry's points come from.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    /// Regenerate from the class's surface sampler with this seed.
    Synthetic { seed: u64 },
    /// Ingest an OFF mesh (path relative to the manifest file).
    Off { path: PathBuf },
}

/// One sample: id, label, and provenance.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub source: SampleSource,
}

/// Parsed manifest: header metadata plus entries in file order.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub points: usize,
    pub noise: f32,
    pub entries: Vec<ManifestEntry>,
}

/// Mixes a (base, stream, index) coordinate into an independent RNG seed
/// (splitmix64 finalizer). Used wherever a deterministic substream is
/// derived: per-sample generation, per-epoch shuffles, per-attack noise.
pub fn mix_seed(base: u64, stream: u64, idx: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(idx.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates both splits of a synthetic dataset. Sample seeds are derived
/// from `(spec.seed, split, class, index)`, so any single sample regenerates
/// independently of the rest.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, GeomError> {
    let mut train = Vec::with_capacity(spec.classes.len() * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.classes.len() * spec.test_per_class);
    for class in &spec.classes {
        for (split, count, out) in [
            (0u64, spec.train_per_class, &mut train),
            (1u64, spec.test_per_class, &mut test),
        ] {
            for idx in 0..count {
                let seed = mix_seed(
                    spec.seed,
                    split * 1_000 + class.label as u64,
                    idx as u64,
                );
                let mut pc = generate_shape(class, spec.points, seed)?;
                let split_name = if split == 0 { "train" } else { "test" };
                pc.id = format!("{split_name}-{}-{idx:04}", class.name);
                out.push(pc);
            }
        }
    }
    Ok(Dataset {
        train,
        test,
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
    })
}

// ── manifest io ─────────────────────────────────────────────────────────────

/// Serializes a manifest for one split.
pub fn write_manifest(path: &Path, m: &Manifest) -> Result<(), GeomError> {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_MAGIC} v{MANIFEST_VERSION}");
    let _ = writeln!(out, "classes {}", m.class_names.join(","));
    let _ = writeln!(out, "points {}", m.points);
    let _ = writeln!(out, "noise {}", m.noise);
    for e in &m.entries {
        let src = match &e.source {
            SampleSource::Synthetic { seed } => format!("synthetic:{seed}"),
            SampleSource::Off { path } => format!("off:{}", path.display()),
        };
        let _ = writeln!(out, "entry {} {} {}", e.id, e.label, src);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Builds the manifest describing an already generated synthetic split.
pub fn manifest_for_split(
    spec: &DatasetSpec,
    split: u64, // 0 = train, 1 = test
) -> Manifest {
    let count = if split == 0 {
        spec.train_per_class
    } else {
        spec.test_per_class
    };
    let split_name = if split == 0 { "train" } else { "test" };
    let mut entries = Vec::new();
    for class in &spec.classes {
        for idx in 0..count {
            let seed = mix_seed(spec.seed, split * 1_000 + class.label as u64, idx as u64);
            entries.push(ManifestEntry {
                id: format!("{split_name}-{}-{idx:04}", class.name),
                label: class.label,
                source: SampleSource::Synthetic { seed },
            });
        }
    }
    Manifest {
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        points: spec.points,
        noise: spec.noise_or_default(),
        entries,
    }
}

impl DatasetSpec {
    fn noise_or_default(&self) -> f32 {
        self.classes.first().map(|c| c.noise).unwrap_or(0.0)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> GeomError {
    GeomError::ManifestFormat {
        line,
        msg: msg.into(),
    }
}

/// Parses a manifest file.
pub fn read_manifest(path: &Path) -> Result<Manifest, GeomError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let expected = format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION}");
    if header.trim() != expected {
        return Err(parse_err(1, format!("bad header '{header}', want '{expected}'")));
    }
    let mut class_names: Option<Vec<String>> = None;
    let mut points: Option<usize> = None;
    let mut noise: Option<f32> = None;
    let mut entries = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(line_no, "expected 'key value'"))?;
        match key {
            "classes" => {
                class_names = Some(rest.split(',').map(|s| s.trim().to_string()).collect())
            }
            "points" => {
                points = Some(rest.trim().parse().map_err(|e| {
                    parse_err(line_no, format!("bad points count: {e}"))
                })?)
            }
            "noise" => {
                noise = Some(rest.trim().parse().map_err(|e| {
                    parse_err(line_no, format!("bad noise level: {e}"))
                })?)
            }
            "entry" => {
                let mut parts = rest.split_whitespace();
                let id = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "entry missing id"))?;
                let label: usize = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "entry missing label"))?
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("bad label: {e}")))?;
                let src = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "entry missing source"))?;
                let source = match src.split_once(':') {
                    Some(("synthetic", seed)) => SampleSource::Synthetic {
                        seed: seed.parse().map_err(|e| {
                            parse_err(line_no, format!("bad seed: {e}"))
                        })?,
                    },
                    Some(("off", p)) => SampleSource::Off {
                        path: PathBuf::from(p),
                    },
                    _ => return Err(parse_err(line_no, format!("bad source '{src}'"))),
                };
                entries.push(ManifestEntry {
                    id: id.to_string(),
                    label,
                    source,
                });
            }
            other => return Err(parse_err(line_no, format!("unknown key '{other}'"))),
        }
    }
    Ok(Manifest {
        class_names: class_names.ok_or_else(|| parse_err(0, "missing 'classes' line"))?,
        points: points.ok_or_else(|| parse_err(0, "missing 'points' line"))?,
        noise: noise.ok_or_else(|| parse_err(0, "missing 'noise' line"))?,
        entries,
    })
}

/// Loads every sample a manifest describes. Synthetic entries regenerate
/// bitwise; OFF entries are read, FPS-downsampled to `points` (start 0), and
/// unit-sphere normalized. OFF paths resolve relative to the manifest.
pub fn load_manifest(path: &Path) -> Result<(Vec<PointCloud>, Vec<String>), GeomError> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut clouds = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let name = m
            .class_names
            .get(e.label)
            .ok_or_else(|| GeomError::UnknownClass(format!("label {}", e.label)))?;
        let pc = match &e.source {
            SampleSource::Synthetic { seed } => {
                let family: ShapeFamily = name.parse()?;
                let spec = ShapeClassSpec {
                    name: name.clone(),
                    family,
                    noise: m.noise,
                    label: e.label,
                };
                let mut pc = generate_shape(&spec, m.points, *seed)?;
                pc.id = e.id.clone();
                pc
            }
            SampleSource::Off { path: rel } => {
                let full = base.join(rel);
                let verts = read_off(&full)?;
                if verts.len() < m.points {
                    return Err(GeomError::TooFewVertices {
                        have: verts.len(),
                        want: m.points,
                    });
                }
                let raw = PointCloud::new(verts, e.label, e.id.clone())?;
                let sampled = farthest_point_sample(&raw, m.points, 0)?;
                normalize_to_unit_sphere(&sampled)?
            }
        };
        clouds.push(pc);
    }
    Ok((clouds, m.class_names))
}

/// Reads vertex positions from an ASCII OFF mesh. Faces are ignored. The
/// merged-header variant ("OFF 8 6 12" on one line) is accepted.
pub fn read_off(path: &Path) -> Result<Vec<[f32; 3]>, GeomError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| GeomError::OffFormat {
        msg: "empty file".into(),
    })?;
    let rest = header.strip_prefix("OFF").ok_or_else(|| GeomError::OffFormat {
        msg: format!("missing OFF magic, got '{header}'"),
    })?;
    let counts_line = if rest.trim().is_empty() {
        lines.next().ok_or_else(|| GeomError::OffFormat {
            msg: "missing counts line".into(),
        })?
    } else {
        rest.trim()
    };
    let mut counts = counts_line.split_whitespace();
    let n_verts: usize = counts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| GeomError::OffFormat {
            msg: format!("bad counts line '{counts_line}'"),
        })?;
    let mut verts = Vec::with_capacity(n_verts);
    for _ in 0..n_verts {
        let line = lines.next().ok_or_else(|| GeomError::OffFormat {
            msg: format!("expected {n_verts} vertex lines"),
        })?;
        let mut it = line.split_whitespace().map(|t| t.parse::<f32>());
        let mut v = [0.0f32; 3];
        for slot in &mut v {
            *slot = it
                .next()
                .and_then(Result::ok)
                .ok_or_else(|| GeomError::OffFormat {
                    msg: format!("bad vertex line '{line}'"),
                })?;
        }
        verts.push(v);
    }
    Ok(verts)
}
