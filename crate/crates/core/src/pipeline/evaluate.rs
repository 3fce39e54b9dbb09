//! Robustness evaluation: run the white-box attack grid against a model, or
//! replay a pre-generated archive against it (black-box transfer), with an
//! optional inference-time defense in front of the classifier. Results land
//! in a CSV report whose rows are directly comparable across models.

use super::infer::InferenceSession;
use super::PipelineError;
use crate::attacks::{
    add_attack, drop_attack, knn_attack, perturb_attack, pgd_attack, sor_defense, srs_defense,
    AddConfig, AddMetric, AttackArchive, AttackKind, AttackSuiteConfig, VictimModel,
};
use crate::geometry::{mix_seed, PointCloud};
use std::io::Write;
use std::path::Path;

/// Inference-time defense applied to every cloud before classification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DefenseKind {
    None,
    /// Simple random sampling: keep a random ordered subset.
    Srs { keep_ratio: f32 },
    /// Statistical outlier removal on k-nearest-neighbor distances.
    Sor { k: usize, alpha: f32 },
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Srs { .. } => "srs",
            DefenseKind::Sor { .. } => "sor",
        }
    }

    /// Applies the defense; `seed` only matters for the random-sampling
    /// defense and must vary per evaluated cloud.
    pub fn apply(&self, pc: &PointCloud, seed: u64) -> Result<PointCloud, PipelineError> {
        Ok(match self {
            DefenseKind::None => pc.clone(),
            DefenseKind::Srs { keep_ratio } => srs_defense(pc, *keep_ratio, seed)?,
            DefenseKind::Sor { k, alpha } => sor_defense(pc, *k, *alpha)?,
        })
    }
}

/// One model × defense evaluation: clean accuracy plus accuracy under each
/// attack kind and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub model: String,
    pub defense: String,
    pub clean_acc: f32,
    pub per_attack: Vec<(AttackKind, f32)>,
    pub avg_robust: f32,
}

/// A set of comparable rows; every row must cover the same attack kinds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// Writes the report as CSV with one accuracy column per attack kind.
    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let kinds: Vec<AttackKind> = match self.rows.first() {
            Some(r) => r.per_attack.iter().map(|(k, _)| *k).collect(),
            None => {
                return Err(PipelineError::ReportFormat {
                    msg: "refusing to write an empty report".to_string(),
                })
            }
        };
        for r in &self.rows {
            let row_kinds: Vec<AttackKind> = r.per_attack.iter().map(|(k, _)| *k).collect();
            if row_kinds != kinds {
                return Err(PipelineError::ReportFormat {
                    msg: format!(
                        "row '{}/{}' covers attacks {:?}, expected {:?}",
                        r.model, r.defense, row_kinds, kinds
                    ),
                });
            }
        }
        let mut f = std::fs::File::create(path)?;
        let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
        writeln!(f, "model,defense,clean,{},avg_robust", names.join(","))?;
        for r in &self.rows {
            let accs: Vec<String> = r.per_attack.iter().map(|(_, a)| a.to_string()).collect();
            writeln!(
                f,
                "{},{},{},{},{}",
                r.model,
                r.defense,
                r.clean_acc,
                accs.join(","),
                r.avg_robust
            )?;
        }
        Ok(())
    }

    /// Reads a report written by [`Self::write_csv`], re-deriving the attack
    /// kinds from the header and cross-checking each row's robustness mean.
    pub fn read_csv(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let bad = |msg: String| PipelineError::ReportFormat { msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".to_string()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5
            || cols[..3] != ["model", "defense", "clean"]
            || *cols.last().expect("non-empty") != "avg_robust"
        {
            return Err(bad(format!("unrecognized header '{header}'")));
        }
        let kinds: Vec<AttackKind> = cols[3..cols.len() - 1]
            .iter()
            .map(|name| name.parse().map_err(|_| bad(format!("unknown attack column '{name}'"))))
            .collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(format!(
                    "line {}: {} fields, header has {}",
                    lineno + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            let num = |s: &str| -> Result<f32, PipelineError> {
                s.parse().map_err(|_| bad(format!("line {}: bad number '{s}'", lineno + 2)))
            };
            let clean_acc = num(fields[2])?;
            let mut per_attack = Vec::with_capacity(kinds.len());
            for (k, s) in kinds.iter().zip(&fields[3..fields.len() - 1]) {
                per_attack.push((*k, num(s)?));
            }
            let avg_robust = num(fields[fields.len() - 1])?;
            let recomputed =
                per_attack.iter().map(|(_, a)| a).sum::<f32>() / per_attack.len() as f32;
            if (recomputed - avg_robust).abs() > 1e-4 {
                return Err(bad(format!(
                    "line {}: avg_robust {} does not match per-attack mean {}",
                    lineno + 2,
                    avg_robust,
                    recomputed
                )));
            }
            rows.push(RobustnessRow {
                model: fields[0].to_string(),
                defense: fields[1].to_string(),
                clean_acc,
                per_attack,
                avg_robust,
            });
        }
        Ok(Self { rows })
    }
}

fn mean_accuracy(hits: usize, total: usize) -> f32 {
    if total == 0 {
        0.0
    } else {
        hits as f32 / total as f32
    }
}

fn defended_predict(
    victim: &dyn VictimModel,
    pc: &PointCloud,
    defense: DefenseKind,
    seed: u64,
) -> Result<usize, PipelineError> {
    let cleaned = defense.apply(pc, seed)?;
    Ok(victim.predict(&cleaned.points))
}

/// Full white-box grid: every attack kind is generated once against the
/// *undefended* victim (the attacker sees the raw model), then accuracy is
/// measured for each requested defense applied at inference time. Rows come
/// back in defense order. Seeds depend only on `(seed, kind, sample)`, so a
/// grid call and single-defense calls produce identical numbers.
pub fn evaluate_whitebox_grid(
    model: &str,
    victim: &dyn VictimModel,
    test: &[PointCloud],
    cfg: &AttackSuiteConfig,
    defenses: &[DefenseKind],
    seed: u64,
) -> Result<Vec<RobustnessRow>, PipelineError> {
    let mut attacked: Vec<(AttackKind, Vec<PointCloud>)> =
        Vec::with_capacity(AttackKind::ALL_ATTACKS.len());
    for (ki, kind) in AttackKind::ALL_ATTACKS.into_iter().enumerate() {
        let mut clouds = Vec::with_capacity(test.len());
        for (si, pc) in test.iter().enumerate() {
            let aseed = mix_seed(seed, 1 + ki as u64, si as u64);
            let result = match kind {
                AttackKind::Pgd => pgd_attack(victim, pc, &cfg.pgd, aseed)?,
                AttackKind::Perturb => perturb_attack(victim, pc, &cfg.perturb)?,
                AttackKind::Knn => knn_attack(victim, pc, &cfg.knn)?,
                AttackKind::AddCd => {
                    let add = AddConfig {
                        metric: AddMetric::Chamfer,
                        ..cfg.add
                    };
                    add_attack(victim, pc, &add, aseed)?
                }
                AttackKind::AddHd => {
                    let add = AddConfig {
                        metric: AddMetric::Hausdorff,
                        ..cfg.add
                    };
                    add_attack(victim, pc, &add, aseed)?
                }
                AttackKind::Drop => drop_attack(victim, pc, &cfg.drop)?,
                AttackKind::Clean => unreachable!("clean is not an attack"),
            };
            clouds.push(result.cloud);
        }
        attacked.push((kind, clouds));
    }

    let mut rows = Vec::with_capacity(defenses.len());
    for &defense in defenses {
        let mut clean_hits = 0usize;
        for (si, pc) in test.iter().enumerate() {
            let dseed = mix_seed(seed, 0xDEF0, si as u64);
            if defended_predict(victim, pc, defense, dseed)? == pc.label {
                clean_hits += 1;
            }
        }
        let mut per_attack = Vec::with_capacity(attacked.len());
        for (ki, (kind, clouds)) in attacked.iter().enumerate() {
            let mut hits = 0usize;
            for (si, adv) in clouds.iter().enumerate() {
                let dseed = mix_seed(seed, 0xDEF1 + ki as u64, si as u64);
                if defended_predict(victim, adv, defense, dseed)? == test[si].label {
                    hits += 1;
                }
            }
            per_attack.push((*kind, mean_accuracy(hits, clouds.len())));
        }
        let avg_robust =
            per_attack.iter().map(|(_, a)| a).sum::<f32>() / per_attack.len() as f32;
        rows.push(RobustnessRow {
            model: model.to_string(),
            defense: defense.name().to_string(),
            clean_acc: mean_accuracy(clean_hits, test.len()),
            per_attack,
            avg_robust,
        });
    }
    Ok(rows)
}

/// Single-defense convenience wrapper over [`evaluate_whitebox_grid`].
pub fn evaluate_whitebox(
    model: &str,
    victim: &dyn VictimModel,
    test: &[PointCloud],
    cfg: &AttackSuiteConfig,
    defense: DefenseKind,
    seed: u64,
) -> Result<RobustnessRow, PipelineError> {
    let mut rows = evaluate_whitebox_grid(model, victim, test, cfg, &[defense], seed)?;
    Ok(rows.remove(0))
}

/// Trains a stand-in classifier for transfer-attack generation: a fresh,
/// independently seeded pretraining run whose *wider* point encoder (the
/// teacher-width architecture) serves as the attacker's model. It never
/// shares weights with the deployed student, only the encoder family.
pub fn train_surrogate(
    train: &[PointCloud],
    class_names: &[String],
    seed: u64,
) -> Result<InferenceSession, PipelineError> {
    let cfg = crate::encoders::BootstrapConfig::standard();
    let bundle = crate::encoders::bootstrap_teachers(train, class_names, &cfg, seed)?;
    InferenceSession::new(&bundle.point_teacher, &bundle.text, class_names, None)
}

/// Replays a pre-generated archive against a (possibly different) victim —
/// the black-box transfer setting. Clean rows give the clean accuracy.
pub fn evaluate_archive(
    model: &str,
    victim: &dyn VictimModel,
    archive: &AttackArchive,
    defense: DefenseKind,
    seed: u64,
) -> Result<RobustnessRow, PipelineError> {
    let mut clean_hits = 0usize;
    let mut clean_total = 0usize;
    for (si, entry) in archive.of_kind(AttackKind::Clean).enumerate() {
        let dseed = mix_seed(seed, 0xDEF0, si as u64);
        if defended_predict(victim, &entry.cloud, defense, dseed)? == entry.cloud.label {
            clean_hits += 1;
        }
        clean_total += 1;
    }
    if clean_total == 0 {
        return Err(PipelineError::ReportFormat {
            msg: "archive has no clean entries".to_string(),
        });
    }

    let mut per_attack = Vec::with_capacity(AttackKind::ARCHIVED.len());
    for (ki, kind) in AttackKind::ARCHIVED.into_iter().enumerate() {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (si, entry) in archive.of_kind(kind).enumerate() {
            let dseed = mix_seed(seed, 0xDEF1 + ki as u64, si as u64);
            if defended_predict(victim, &entry.cloud, defense, dseed)? == entry.cloud.label {
                hits += 1;
            }
            total += 1;
        }
        per_attack.push((kind, mean_accuracy(hits, total)));
    }

    let avg_robust =
        per_attack.iter().map(|(_, a)| a).sum::<f32>() / per_attack.len() as f32;
    Ok(RobustnessRow {
        model: model.to_string(),
        defense: defense.name().to_string(),
        clean_acc: mean_accuracy(clean_hits, clean_total),
        per_attack,
        avg_robust,
    })
}

/// Writes each cloud's embedding under the given session as one CSV row:
/// `id,label,d0..d{D-1}`.
pub fn export_embeddings_csv(
    session: &InferenceSession,
    clouds: &[PointCloud],
    path: &Path,
) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path)?;
    let dim = session.anchors().dims2().map(|(_, d)| d).unwrap_or(0);
    let header: Vec<String> = (0..dim).map(|i| format!("d{i}")).collect();
    writeln!(f, "id,label,{}", header.join(","))?;
    for pc in clouds {
        let z = session.embed(&pc.points);
        let vals: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{},{}", pc.id, pc.label, vals.join(","))?;
    }
    Ok(())
}
