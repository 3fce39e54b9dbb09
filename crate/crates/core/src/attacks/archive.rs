//! Attack archive: adversarial clouds written once against a surrogate and
//! replayed later against other models (black-box transfer evaluation).
//!
//! On disk the archive is a text manifest (`attacks.manifest`) plus a raw
//! little-endian `f32` blob (`attacks.f32`); manifest offsets are in floats.

use super::{
    add_attack, drop_attack, knn_attack, perturb_attack, pgd_attack, AddConfig, AttackError,
    AttackKind, DropConfig, KnnConfig, PerturbConfig, PgdConfig, VictimModel,
};
use crate::geometry::{mix_seed, PointCloud};
use std::io::{Read, Write};
use std::path::Path;

pub const ARCHIVE_MANIFEST: &str = "attacks.manifest";
pub const ARCHIVE_BLOB: &str = "attacks.f32";
const ARCHIVE_MAGIC: &str = "pointprompt-attacks";
const ARCHIVE_VERSION: u32 = 1;

/// Per-family configuration for one archive generation run.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttackSuiteConfig {
    pub pgd: PgdConfig,
    pub perturb: PerturbConfig,
    pub knn: KnnConfig,
    pub add: AddConfig,
    pub drop: DropConfig,
}

/// One archived cloud: the attack family that produced it plus the cloud
/// itself (label and source id ride along on the cloud).
#[derive(Clone, Debug)]
pub struct ArchiveEntry {
    pub kind: AttackKind,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, Default)]
pub struct AttackArchive {
    pub entries: Vec<ArchiveEntry>,
}

impl AttackArchive {
    /// Entries of one attack family.
    pub fn of_kind(&self, kind: AttackKind) -> impl Iterator<Item = &ArchiveEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    /// Writes `attacks.manifest` and `attacks.f32` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), AttackError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("{ARCHIVE_MAGIC} {ARCHIVE_VERSION}\n"));
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for e in &self.entries {
            if e.cloud.id.contains(char::is_whitespace) || e.cloud.id.is_empty() {
                return Err(AttackError::ArchiveFormat {
                    msg: format!("cloud id '{}' must be non-empty without spaces", e.cloud.id),
                });
            }
            manifest.push_str(&format!(
                "entry {} {} {} {} {}\n",
                e.kind,
                e.cloud.label,
                e.cloud.len(),
                offset,
                e.cloud.id,
            ));
            for p in &e.cloud.points {
                for c in p {
                    blob.extend_from_slice(&c.to_le_bytes());
                }
            }
            offset += e.cloud.len() * 3;
        }
        std::fs::write(dir.join(ARCHIVE_MANIFEST), manifest)?;
        let mut f = std::fs::File::create(dir.join(ARCHIVE_BLOB))?;
        f.write_all(&blob)?;
        Ok(())
    }

    /// Reads an archive written by [`AttackArchive::write`]. Offsets, counts,
    /// and total blob size are all validated.
    pub fn read(dir: &Path) -> Result<Self, AttackError> {
        let manifest = std::fs::read_to_string(dir.join(ARCHIVE_MANIFEST))?;
        let mut blob = Vec::new();
        std::fs::File::open(dir.join(ARCHIVE_BLOB))?.read_to_end(&mut blob)?;
        if blob.len() % 4 != 0 {
            return Err(AttackError::ArchiveFormat {
                msg: format!("blob length {} is not a multiple of 4", blob.len()),
            });
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let mut lines = manifest.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| AttackError::ArchiveFormat {
            msg: "empty manifest".to_string(),
        })?;
        let want_header = format!("{ARCHIVE_MAGIC} {ARCHIVE_VERSION}");
        if header != want_header {
            return Err(AttackError::ArchiveFormat {
                msg: format!("bad header '{header}', expected '{want_header}'"),
            });
        }

        let mut entries = Vec::new();
        let mut consumed = 0usize;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let fail = |msg: String| AttackError::ArchiveFormat {
                msg: format!("line {}: {msg}", lineno + 1),
            };
            if toks.len() != 6 || toks[0] != "entry" {
                return Err(fail(format!("expected 'entry <kind> <label> <n> <offset> <id>', got '{line}'")));
            }
            let kind: AttackKind = toks[1].parse()?;
            let label: usize = toks[2].parse().map_err(|_| fail(format!("bad label '{}'", toks[2])))?;
            let n: usize = toks[3].parse().map_err(|_| fail(format!("bad count '{}'", toks[3])))?;
            let offset: usize = toks[4].parse().map_err(|_| fail(format!("bad offset '{}'", toks[4])))?;
            if offset != consumed {
                return Err(fail(format!("offset {offset} does not follow previous entries ({consumed})")));
            }
            let end = offset + n * 3;
            if end > floats.len() {
                return Err(fail(format!("entry overruns blob ({end} > {})", floats.len())));
            }
            let points: Vec<[f32; 3]> = floats[offset..end]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            entries.push(ArchiveEntry {
                kind,
                cloud: PointCloud::new(points, label, toks[5].to_string())?,
            });
            consumed = end;
        }
        if consumed != floats.len() {
            return Err(AttackError::ArchiveFormat {
                msg: format!("blob has {} floats but manifest accounts for {consumed}", floats.len()),
            });
        }
        Ok(Self { entries })
    }
}

/// Runs the five archived attack families against `victim` on every cloud
/// and packs results (plus clean pass-through rows) into an archive.
/// Per-sample seeds derive from `(seed, family, sample)`.
pub fn generate_archive(
    victim: &dyn VictimModel,
    clouds: &[PointCloud],
    cfg: &AttackSuiteConfig,
    seed: u64,
) -> Result<AttackArchive, AttackError> {
    let mut entries = Vec::with_capacity(clouds.len() * (AttackKind::ARCHIVED.len() + 1));
    for (si, cloud) in clouds.iter().enumerate() {
        entries.push(ArchiveEntry {
            kind: AttackKind::Clean,
            cloud: cloud.clone(),
        });
        for (ki, kind) in AttackKind::ARCHIVED.into_iter().enumerate() {
            let s = mix_seed(seed, 1 + ki as u64, si as u64);
            let result = match kind {
                AttackKind::Pgd => pgd_attack(victim, cloud, &cfg.pgd, s)?,
                AttackKind::Perturb => perturb_attack(victim, cloud, &cfg.perturb)?,
                AttackKind::Knn => knn_attack(victim, cloud, &cfg.knn)?,
                AttackKind::AddCd => {
                    // The archived row is Chamfer-regularized by definition,
                    // whatever the suite config's metric says.
                    let add = super::AddConfig {
                        metric: super::AddMetric::Chamfer,
                        ..cfg.add
                    };
                    add_attack(victim, cloud, &add, s)?
                }
                AttackKind::Drop => drop_attack(victim, cloud, &cfg.drop)?,
                AttackKind::Clean | AttackKind::AddHd => unreachable!("not archived"),
            };
            entries.push(ArchiveEntry {
                kind,
                cloud: result.cloud,
            });
        }
    }
    Ok(AttackArchive { entries })
}
