//! Prompt distillation: the only trainable parameters are the point-prompt
//! rows, the text context, and three per-teacher weighting log-variances.
//!
//! Per batch, a configurable fraction of samples is replaced by adversarial
//! twins generated with the training-time attack against the *current*
//! prompted model; teachers always embed the clean twin. Teacher embeddings
//! and the frozen student's per-point features for clean samples are cached
//! once, so each optimizer step only runs the pool/head/anchor subgraph —
//! the attack inner loop dominates the cost, as it should.

use super::checkpoint::{Checkpoint, CheckpointError};
use super::config::DistillConfig;
use super::infer::InferenceSession;
use super::optim::{cosine_lr, AdamW, Moments};
use super::PipelineError;
use crate::attacks::{pgd_attack, PgdConfig};
use crate::diffmath::{Tape, Tensor, VarId};
use crate::encoders::{
    encode_text, point_features, pooled_head, Embedding, PromptParams, TeacherBundle,
};
use crate::geometry::{mix_seed, PointCloud};
use crate::losses::{
    confidence_mask, gated_contrastive_loss, reference_logits, text_reference, total_loss,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// One optimizer step's observable state, in teacher order
/// [image, point, text].
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub losses: [f32; 3],
    pub weights: [f32; 3],
    pub gate_fractions: [f32; 3],
    pub total: f32,
}

/// Resumable training state. Moment slots are ordered: point tokens, text
/// context, then the three log-variances.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub prompts: PromptParams,
    pub lambdas: [f32; 3],
    pub moments: Vec<Moments>,
    pub step: u32,
    pub next_epoch: usize,
}

impl TrainState {
    /// Fresh prompts and optimizer state. Point-prompt rows are initialized
    /// at the scale of the pooled backbone features (per-column mean plus
    /// jittered spread over the training set): rows far below the feature
    /// maxima would lose every pool column and receive exactly zero
    /// gradient, so a small random init would freeze them permanently.
    fn fresh(bundle: &TeacherBundle, cfg: &DistillConfig, clean_feats: &[Tensor]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x9601, 0));
        let mut prompts = PromptParams::random(
            cfg.m_p,
            bundle.student.feature_dim(),
            cfg.m_t,
            bundle.text.token_dim(),
            &mut rng,
        );

        let df = bundle.student.feature_dim();
        let n = clean_feats.len() as f32;
        let mut mean = vec![0.0f32; df];
        let mut sq = vec![0.0f32; df];
        for feats in clean_feats {
            let (rows, _) = feats.dims2().expect("feature matrix");
            for d in 0..df {
                let mut top = f32::NEG_INFINITY;
                for r in 0..rows {
                    top = top.max(feats.data()[r * df + d]);
                }
                mean[d] += top / n;
                sq[d] += top * top / n;
            }
        }
        let dist = rand_distr::Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut tokens = Vec::with_capacity(cfg.m_p * df);
        for _ in 0..cfg.m_p {
            for d in 0..df {
                let std = (sq[d] - mean[d] * mean[d]).max(0.0).sqrt();
                tokens.push(mean[d] + 0.1 * std * rand_distr::Distribution::sample(&dist, &mut rng));
            }
        }
        prompts.point_tokens = Tensor::new(vec![cfg.m_p, df], tokens).expect("sized");

        let moments = vec![
            Moments::zeros(prompts.point_tokens.data().len()),
            Moments::zeros(prompts.text_context.data().len()),
            Moments::zeros(1),
            Moments::zeros(1),
            Moments::zeros(1),
        ];
        Self {
            prompts,
            lambdas: [0.0; 3],
            moments,
            step: 0,
            next_epoch: 0,
        }
    }
}

/// A finished (or paused) distillation run.
#[derive(Clone, Debug)]
pub struct DistillRun {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    /// `(epoch, lambdas)` snapshot at each epoch end.
    pub lambda_trace: Vec<(usize, [f32; 3])>,
}

/// Combined content hash of the four frozen encoders; resume refuses to
/// continue against different teachers.
pub fn bundle_hash(bundle: &TeacherBundle) -> String {
    let mut h = Sha256::new();
    h.update(bundle.student.content_hash());
    h.update(bundle.point_teacher.content_hash());
    h.update(bundle.image_teacher.content_hash());
    h.update(bundle.text.content_hash());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_hash(cfg: &DistillConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs distillation from scratch over the configured epochs.
pub fn distill(
    bundle: &TeacherBundle,
    train: &[PointCloud],
    cfg: &DistillConfig,
) -> Result<DistillRun, PipelineError> {
    distill_from(bundle, train, cfg, None, None)
}

/// Runs distillation from an optional saved state until `stop_epoch`
/// (exclusive, capped at `cfg.epochs`). Stopping early and resuming from the
/// saved state reproduces the uninterrupted run bit-for-bit, because every
/// random choice derives from `(cfg.seed, epoch)` and the optimizer state
/// rides along.
pub fn distill_from(
    bundle: &TeacherBundle,
    train: &[PointCloud],
    cfg: &DistillConfig,
    state: Option<TrainState>,
    stop_epoch: Option<usize>,
) -> Result<DistillRun, PipelineError> {
    cfg.validate()?;
    let classes = bundle.class_names.len();
    if cfg.batch_size % classes != 0 {
        return Err(PipelineError::BatchShape {
            batch_size: cfg.batch_size,
            classes,
        });
    }
    let per_class = cfg.batch_size / classes;
    for (what, frozen) in [
        ("student", bundle.student.frozen),
        ("point teacher", bundle.point_teacher.frozen),
        ("image teacher", bundle.image_teacher.frozen),
        ("text encoder", bundle.text.frozen),
    ] {
        if !frozen {
            return Err(PipelineError::TeacherMismatch {
                what: format!("{what} must be frozen before distillation"),
            });
        }
    }
    if cfg.resolution != bundle.image_teacher.resolution || cfg.views != bundle.image_teacher.views
    {
        return Err(PipelineError::ConfigMismatch {
            what: format!(
                "projection {}x{} views {} does not match the image teacher ({}x{} views {})",
                cfg.resolution,
                cfg.resolution,
                cfg.views,
                bundle.image_teacher.resolution,
                bundle.image_teacher.views,
                bundle.image_teacher.views
            ),
        });
    }
    let teachers_before = bundle_hash(bundle);

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

    // ── one-time caches over the clean train set ────────────────────────────
    // Teachers only ever see clean clouds, and the student backbone is
    // frozen, so teacher embeddings and clean per-point features are
    // constants for the whole run.
    let mut z_img: Vec<Embedding> = Vec::with_capacity(train.len());
    let mut z_pt: Vec<Embedding> = Vec::with_capacity(train.len());
    let mut clean_feats: Vec<Tensor> = Vec::with_capacity(train.len());
    for pc in train {
        let depth = crate::projection::project_depth(pc, cfg.resolution, cfg.views)?;
        z_img.push(crate::encoders::embed_image_teacher(&bundle.image_teacher, &depth)?);
        z_pt.push(crate::encoders::embed_point_teacher(&bundle.point_teacher, pc)?);
        clean_feats.push(backbone_features(bundle, &pc.points)?);
    }

    let mut state = match state {
        Some(s) => {
            let (mp, df) = s.prompts.point_tokens.dims2().unwrap_or((0, 0));
            let (mt, de) = s.prompts.text_context.dims2().unwrap_or((0, 0));
            if mp != cfg.m_p || mt != cfg.m_t {
                return Err(PipelineError::ConfigMismatch {
                    what: format!(
                        "state has {mp} point / {mt} text prompt rows, config wants {} / {}",
                        cfg.m_p, cfg.m_t
                    ),
                });
            }
            if df != bundle.student.feature_dim() || de != bundle.text.token_dim() {
                return Err(PipelineError::ConfigMismatch {
                    what: "prompt widths do not match the teacher bundle".to_string(),
                });
            }
            s
        }
        None => TrainState::fresh(bundle, cfg, &clean_feats),
    };

    let opt_prompts = AdamW::new(cfg.weight_decay);
    // Log-variances are excluded from weight decay: decaying them toward
    // zero would fight the weighting objective itself.
    let opt_lambda = AdamW::new(0.0);
    let horizon = cfg.horizon();

    let mut log = Vec::new();
    let mut lambda_trace = Vec::new();
    let stop = stop_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);

    for epoch in state.next_epoch..stop {
        let lr = cosine_lr(epoch, cfg.lr0, cfg.eta_min, horizon)?;
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xE70C, epoch as u64));
        let mut order = groups.clone();
        for g in &mut order {
            g.shuffle(&mut epoch_rng);
        }
        let attacked_per_batch =
            ((cfg.mix_fraction * cfg.batch_size as f32).round() as usize).min(cfg.batch_size);

        for b in 0..batches_per_epoch {
            let mut batch: Vec<usize> = Vec::with_capacity(cfg.batch_size);
            for g in &order {
                batch.extend_from_slice(&g[b * per_class..(b + 1) * per_class]);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();

            // Which batch positions get adversarial twins this step.
            let mut attacked =
                rand::seq::index::sample(&mut epoch_rng, cfg.batch_size, attacked_per_batch)
                    .into_vec();
            attacked.sort_unstable();

            // Generate twins against the current prompted model and encode
            // their backbone features off-tape (they are constants for the
            // prompt gradient).
            let mut feats: Vec<Tensor> = Vec::with_capacity(cfg.batch_size);
            if attacked.is_empty() {
                for &i in &batch {
                    feats.push(clean_feats[i].clone());
                }
            } else {
                let victim = InferenceSession::new(
                    &bundle.student,
                    &bundle.text,
                    &bundle.class_names,
                    Some(&state.prompts),
                )?;
                let pgd = PgdConfig {
                    epsilon: cfg.mix_epsilon,
                    steps: cfg.mix_steps,
                    alpha: cfg.mix_alpha,
                };
                let mut cursor = 0usize;
                for (pos, &i) in batch.iter().enumerate() {
                    if cursor < attacked.len() && attacked[cursor] == pos {
                        cursor += 1;
                        let seed = mix_seed(cfg.seed, 0xADD0 + epoch as u64, i as u64);
                        let adv = pgd_attack(&victim, &train[i], &pgd, seed)?;
                        feats.push(backbone_features(bundle, &adv.cloud.points)?);
                    } else {
                        feats.push(clean_feats[i].clone());
                    }
                }
            }

            // ── the optimizer step tape ─────────────────────────────────────
            let mut tape = Tape::new();
            let student_vars = bundle.student.vars(&mut tape, false)?;
            let text_vars = bundle.text.vars(&mut tape, false)?;
            let point_tokens = tape.leaf(state.prompts.point_tokens.clone().with_grad());
            let text_context = tape.leaf(state.prompts.text_context.clone().with_grad());
            let lambda_vars: [VarId; 3] = std::array::from_fn(|k| {
                tape.leaf(Tensor::scalar(state.lambdas[k]).with_grad())
            });

            let mut student_rows = Vec::with_capacity(cfg.batch_size);
            for f in &feats {
                let fv = tape.constant(f.clone());
                student_rows.push(pooled_head(&mut tape, fv, Some(point_tokens), &student_vars)?);
            }
            let z_student = tape.stack_rows(&student_rows)?;

            let anchors = encode_text(
                &mut tape,
                &bundle.text,
                &text_vars,
                &bundle.class_names,
                Some(text_context),
            )?;
            let anchor_values = tape.value(anchors).clone();

            // References always come from the clean twin.
            let img_ref = tape.constant(stack_embeddings(&batch, &z_img));
            let pt_ref = tape.constant(stack_embeddings(&batch, &z_pt));
            let text_ref = text_reference(&mut tape, anchors, &labels)?;

            let mut losses = [0.0f32; 3];
            let mut gate_fractions = [0.0f32; 3];
            let mut loss_vars: [VarId; 3] = [z_student; 3];
            for (slot, reference) in [img_ref, pt_ref, text_ref].into_iter().enumerate() {
                let gate_logits =
                    reference_logits(tape.value(reference), &anchor_values, cfg.tau)?;
                let mask = confidence_mask(&gate_logits, &labels, cfg.k)?;
                let gated =
                    gated_contrastive_loss(&mut tape, z_student, reference, &mask, cfg.tau)?;
                losses[slot] = tape.value(gated.loss).item();
                gate_fractions[slot] = mask.fraction();
                loss_vars[slot] = gated.loss;
            }

            let total = total_loss(&mut tape, loss_vars, lambda_vars)?;
            let total_value = tape.value(total).item();
            if !total_value.is_finite() || losses.iter().any(|l| !l.is_finite()) {
                return Err(PipelineError::NonFiniteLoss {
                    step: state.step as usize,
                    losses,
                });
            }

            let weights_used: [f32; 3] = std::array::from_fn(|k| (-state.lambdas[k]).exp());
            let grads = tape.backward(total)?;
            state.step += 1;
            if let Some(g) = grads.wrt(point_tokens) {
                opt_prompts.step(
                    lr,
                    state.prompts.point_tokens.data_mut(),
                    g.data(),
                    &mut state.moments[0],
                    state.step,
                );
            }
            if let Some(g) = grads.wrt(text_context) {
                opt_prompts.step(
                    lr,
                    state.prompts.text_context.data_mut(),
                    g.data(),
                    &mut state.moments[1],
                    state.step,
                );
            }
            for k in 0..3 {
                if let Some(g) = grads.wrt(lambda_vars[k]) {
                    let mut lam = [state.lambdas[k]];
                    opt_lambda.step(lr, &mut lam, g.data(), &mut state.moments[2 + k], state.step);
                    state.lambdas[k] = lam[0].max(cfg.lambda_min);
                }
            }

            log.push(StepLog {
                step: state.step as usize,
                losses,
                weights: weights_used,
                gate_fractions,
                total: total_value,
            });
        }

        state.next_epoch = epoch + 1;
        lambda_trace.push((epoch, state.lambdas));
    }

    if bundle_hash(bundle) != teachers_before {
        return Err(PipelineError::TeacherMismatch {
            what: "teacher weights changed during distillation".to_string(),
        });
    }

    Ok(DistillRun {
        state,
        log,
        lambda_trace,
    })
}

/// Frozen-backbone per-point features of one cloud, computed off any
/// training tape.
fn backbone_features(bundle: &TeacherBundle, points: &[[f32; 3]]) -> Result<Tensor, PipelineError> {
    let mut tape = Tape::new();
    let vars = bundle.student.vars(&mut tape, false)?;
    let pts = tape.constant(super::infer::points_tensor(points));
    let f = point_features(&mut tape, pts, &vars)?;
    Ok(tape.value(f).clone())
}

fn stack_embeddings(batch: &[usize], all: &[Embedding]) -> Tensor {
    let d = all[batch[0]].dim();
    let mut data = Vec::with_capacity(batch.len() * d);
    for &i in batch {
        data.extend_from_slice(all[i].as_slice());
    }
    Tensor::new(vec![batch.len(), d], data).expect("sized")
}

// ── state persistence ────────────────────────────────────────────────────────

/// Saves a training state; ties it to the exact teachers and config via
/// content hashes so resume cannot silently diverge.
pub fn save_state(
    state: &TrainState,
    bundle: &TeacherBundle,
    cfg: &DistillConfig,
    path: &Path,
) -> Result<(), PipelineError> {
    let mut cp = Checkpoint::new();
    cp.set_meta("kind", "distill-state");
    cp.set_meta("step", state.step);
    cp.set_meta("next_epoch", state.next_epoch);
    cp.set_meta("teachers_sha", bundle_hash(bundle));
    cp.set_meta("config_sha", config_hash(cfg));
    cp.push_tensor("prompts.point_tokens", state.prompts.point_tokens.clone());
    cp.push_tensor("prompts.text_context", state.prompts.text_context.clone());
    cp.push_tensor(
        "lambda",
        Tensor::new(vec![3], state.lambdas.to_vec()).expect("sized"),
    );
    for (i, m) in state.moments.iter().enumerate() {
        cp.push_tensor(
            &format!("opt{i}.m"),
            Tensor::new(vec![m.m.len()], m.m.clone()).expect("sized"),
        );
        cp.push_tensor(
            &format!("opt{i}.v"),
            Tensor::new(vec![m.v.len()], m.v.clone()).expect("sized"),
        );
    }
    cp.write(path)?;
    Ok(())
}

/// Loads a state saved by [`save_state`], refusing mismatched teachers or a
/// different config.
pub fn load_state(
    path: &Path,
    bundle: &TeacherBundle,
    cfg: &DistillConfig,
) -> Result<TrainState, PipelineError> {
    let cp = Checkpoint::read(path)?;
    if cp.meta("kind")? != "distill-state" {
        return Err(CheckpointError::Corrupt {
            msg: format!("expected a distill-state checkpoint, found '{}'", cp.meta("kind")?),
        }
        .into());
    }
    if cp.meta("teachers_sha")? != bundle_hash(bundle) {
        return Err(PipelineError::TeacherMismatch {
            what: "saved state was trained against different teachers".to_string(),
        });
    }
    if cp.meta("config_sha")? != config_hash(cfg) {
        return Err(PipelineError::ConfigMismatch {
            what: "saved state was trained under a different config".to_string(),
        });
    }
    let lambda = cp.tensor("lambda")?;
    let lambdas: [f32; 3] = lambda
        .data()
        .to_vec()
        .try_into()
        .map_err(|_| CheckpointError::Corrupt {
            msg: "lambda tensor must have three entries".to_string(),
        })?;
    let mut moments = Vec::with_capacity(5);
    for i in 0..5 {
        moments.push(Moments {
            m: cp.tensor(&format!("opt{i}.m"))?.data().to_vec(),
            v: cp.tensor(&format!("opt{i}.v"))?.data().to_vec(),
        });
    }
    Ok(TrainState {
        prompts: PromptParams {
            point_tokens: cp.tensor("prompts.point_tokens")?.clone(),
            text_context: cp.tensor("prompts.text_context")?.clone(),
        },
        lambdas,
        moments,
        step: cp.meta_parsed("step")?,
        next_epoch: cp.meta_parsed("next_epoch")?,
    })
}

// ── log writers ──────────────────────────────────────────────────────────────

/// Writes the per-step training log as CSV.
pub fn write_train_log(log: &[StepLog], path: &Path) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "step,loss_image,loss_point,loss_text,w_image,w_point,w_text,\
         gate_image,gate_point,gate_text,total"
    )?;
    for r in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.losses[0],
            r.losses[1],
            r.losses[2],
            r.weights[0],
            r.weights[1],
            r.weights[2],
            r.gate_fractions[0],
            r.gate_fractions[1],
            r.gate_fractions[2],
            r.total
        )?;
    }
    Ok(())
}

/// Writes the per-epoch log-variance trace as CSV, alongside the effective
/// per-teacher loss weights `w_k = exp(-lambda_k)` they imply.
pub fn write_lambda_trace(
    trace: &[(usize, [f32; 3])],
    path: &Path,
) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "epoch,lambda_image,lambda_point,lambda_text,w_image,w_point,w_text"
    )?;
    for (epoch, l) in trace {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            epoch,
            l[0],
            l[1],
            l[2],
            (-l[0]).exp(),
            (-l[1]).exp(),
            (-l[2]).exp()
        )?;
    }
    Ok(())
}
