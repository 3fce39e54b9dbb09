//! Adversarially fine-tuned baseline: retrains the student's classification
//! head (and nothing else) on the same mixed clean/adversarial diet the
//! prompt distiller sees, classifying against the frozen context-free text
//! anchors. This is the conventional-defense comparison point for the
//! prompt approach: equal data, equal attack budget, a head's worth of
//! trainable parameters.

use super::infer::InferenceSession;
use super::optim::{cosine_lr, AdamW, Moments};
use super::PipelineError;
use crate::attacks::{pgd_attack, PgdConfig};
use crate::diffmath::{Tape, Tensor};
use crate::encoders::{embed_text, point_features, PointEncoderWeights, TeacherBundle};
use crate::geometry::{mix_seed, PointCloud};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Head fine-tuning hyperparameters; the `mix_*` fields mean the same as in
/// the distillation config so both defenses train on an identical diet.
#[derive(Clone, Copy, Debug)]
pub struct AdvTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub eta_min: f32,
    pub weight_decay: f32,
    /// Temperature for the cosine-logit cross-entropy.
    pub tau: f32,
    pub mix_fraction: f32,
    pub mix_epsilon: f32,
    pub mix_steps: usize,
    pub mix_alpha: f32,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr0: 1e-3,
            eta_min: 1e-5,
            weight_decay: 1e-2,
            tau: 0.07,
            mix_fraction: 0.5,
            mix_epsilon: 0.05,
            mix_steps: 20,
            mix_alpha: 0.01,
            seed: 0,
        }
    }
}

/// Fine-tunes a copy of the bundle's student head against adversarial
/// examples and returns it, frozen, ready for a prompt-free
/// [`InferenceSession`].
pub fn adv_train_baseline(
    bundle: &TeacherBundle,
    train: &[PointCloud],
    cfg: &AdvTrainConfig,
) -> Result<PointEncoderWeights, PipelineError> {
    let classes = bundle.class_names.len();
    if cfg.batch_size == 0 || cfg.batch_size % classes != 0 {
        return Err(PipelineError::BatchShape {
            batch_size: cfg.batch_size,
            classes,
        });
    }
    if !(cfg.tau > 0.0) || !(0.0..=1.0).contains(&cfg.mix_fraction) {
        return Err(PipelineError::ConfigMismatch {
            what: format!(
                "tau {} must be positive and mix_fraction {} within [0,1]",
                cfg.tau, cfg.mix_fraction
            ),
        });
    }
    let per_class = cfg.batch_size / classes;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, pc) in train.iter().enumerate() {
        if pc.label >= classes {
            return Err(PipelineError::MissingClass { label: pc.label });
        }
        groups[pc.label].push(i);
    }
    for (label, g) in groups.iter().enumerate() {
        if g.len() < per_class {
            return Err(PipelineError::MissingClass { label });
        }
    }
    let batches_per_epoch = groups.iter().map(Vec::len).min().expect("classes") / per_class;

    // Context-free anchors are fixed for the whole run.
    let anchors = embed_text(&bundle.text, &bundle.class_names, None)?;
    let mut student = bundle.student.clone();
    student.frozen = false;

    // The backbone never changes, so pooled features of clean samples are
    // constants; adversarial twins are pooled fresh each time.
    let mut clean_pooled: Vec<Vec<f32>> = Vec::with_capacity(train.len());
    for pc in train {
        clean_pooled.push(pooled_backbone(&student, &pc.points)?);
    }

    let opt = AdamW::new(cfg.weight_decay);
    let mut mom_w = Moments::zeros(student.head.w.data().len());
    let mut mom_b = Moments::zeros(student.head.b.data().len());
    let mut t: u32 = 0;
    let feature_dim = student.feature_dim();
    let attacked_per_batch =
        ((cfg.mix_fraction * cfg.batch_size as f32).round() as usize).min(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr0, cfg.eta_min, cfg.epochs)?;
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xAD17, epoch as u64));
        let mut order = groups.clone();
        for g in &mut order {
            g.shuffle(&mut epoch_rng);
        }

        for b in 0..batches_per_epoch {
            let mut batch: Vec<usize> = Vec::with_capacity(cfg.batch_size);
            for g in &order {
                batch.extend_from_slice(&g[b * per_class..(b + 1) * per_class]);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();

            let mut attacked =
                rand::seq::index::sample(&mut epoch_rng, cfg.batch_size, attacked_per_batch)
                    .into_vec();
            attacked.sort_unstable();

            let mut pooled = Vec::with_capacity(cfg.batch_size * feature_dim);
            if attacked.is_empty() {
                for &i in &batch {
                    pooled.extend_from_slice(&clean_pooled[i]);
                }
            } else {
                let victim =
                    InferenceSession::new(&student, &bundle.text, &bundle.class_names, None)?;
                let pgd = PgdConfig {
                    epsilon: cfg.mix_epsilon,
                    steps: cfg.mix_steps,
                    alpha: cfg.mix_alpha,
                };
                let mut cursor = 0usize;
                for (pos, &i) in batch.iter().enumerate() {
                    if cursor < attacked.len() && attacked[cursor] == pos {
                        cursor += 1;
                        let seed = mix_seed(cfg.seed, 0xAD00 + epoch as u64, i as u64);
                        let adv = pgd_attack(&victim, &train[i], &pgd, seed)?;
                        pooled.extend_from_slice(&pooled_backbone(&student, &adv.cloud.points)?);
                    } else {
                        pooled.extend_from_slice(&clean_pooled[i]);
                    }
                }
            }

            let mut tape = Tape::new();
            let feats = tape.constant(
                Tensor::new(vec![cfg.batch_size, feature_dim], pooled).expect("sized"),
            );
            let w = tape.leaf(student.head.w.clone().with_grad());
            let bias = tape.leaf(student.head.b.clone().with_grad());
            let lin = tape.matmul(feats, w)?;
            let lin = tape.add_row(lin, bias)?;
            let z = tape.l2_normalize(lin)?;
            let anchor_var = tape.constant(anchors.clone());
            let logits = tape.matmul_nt(z, anchor_var)?;
            let scaled = tape.scale(logits, 1.0 / cfg.tau);
            let loss = tape.softmax_cross_entropy(scaled, &labels)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    step: t as usize,
                    losses: [loss_value; 3],
                });
            }
            let grads = tape.backward(loss)?;
            t += 1;
            if let Some(g) = grads.wrt(w) {
                opt.step(lr, student.head.w.data_mut(), g.data(), &mut mom_w, t);
            }
            if let Some(g) = grads.wrt(bias) {
                opt.step(lr, student.head.b.data_mut(), g.data(), &mut mom_b, t);
            }
        }
    }

    student.frozen = true;
    Ok(student)
}

/// Frozen-backbone pooled features `[feature_dim]` of one cloud.
fn pooled_backbone(
    student: &PointEncoderWeights,
    points: &[[f32; 3]],
) -> Result<Vec<f32>, PipelineError> {
    let mut tape = Tape::new();
    let vars = student.vars(&mut tape, false)?;
    let pts = tape.constant(super::infer::points_tensor(points));
    let f = point_features(&mut tape, pts, &vars)?;
    let pooled = tape.set_max_pool(f)?;
    Ok(tape.value(pooled).data().to_vec())
}
