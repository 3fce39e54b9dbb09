//! Joint pretraining of the four encoders against shared text anchors.
//!
//! All four encoders start random and train together with a symmetric
//! contrastive objective on class-balanced batches: each encoder's batch
//! embeddings are pulled toward the text anchor of their class and pushed
//! from the rest. The result is one aligned embedding space; the teachers
//! and the student backbone are then frozen, and only prompts train later.

use super::{
    encode_image_teacher, encode_point_teacher, encode_student, encode_text, EncoderError,
    ImageEncoderWeights, PointCloud, PointEncoderWeights, TextEncoderWeights,
};
use crate::diffmath::{Gradients, Tape, Tensor, VarId};
use crate::geometry::mix_seed;
use crate::losses::{gated_contrastive_loss, GateMask};
use crate::pipeline::{AdamW, Moments};
use crate::projection::{project_depth, DepthImageSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture and schedule for encoder pretraining.
#[derive(Clone, Debug)]
pub struct BootstrapConfig {
    /// Student per-point widths (input is 3-D).
    pub student_widths: Vec<usize>,
    /// Point-teacher per-point widths.
    pub teacher_widths: Vec<usize>,
    /// Image-teacher hidden width over flattened view pixels.
    pub image_hidden: usize,
    /// Shared embedding dimension.
    pub embed_dim: usize,
    /// Token-table width of the text encoder.
    pub token_dim: usize,
    /// Depth-image resolution per view.
    pub resolution: usize,
    /// Number of orthographic views fed to the image teacher.
    pub views: usize,
    /// Hard cap on pretraining epochs.
    pub max_epochs: usize,
    /// Constant learning rate.
    pub lr: f32,
    /// Decoupled weight decay.
    pub weight_decay: f32,
    /// Softmax temperature of the contrastive objective.
    pub tau: f32,
    /// Stop early once every encoder's epoch accuracy reaches this.
    pub target_accuracy: f32,
    /// Convergence floor as a multiple of chance accuracy; ending below it
    /// is an error rather than a silently bad teacher set.
    pub floor_multiple: f32,
}

impl BootstrapConfig {
    pub fn standard() -> Self {
        Self {
            student_widths: vec![64, 64],
            teacher_widths: vec![128, 128],
            image_hidden: 128,
            embed_dim: 32,
            token_dim: 32,
            resolution: 32,
            views: 6,
            max_epochs: 40,
            lr: 2e-3,
            weight_decay: 1e-4,
            tau: 0.07,
            target_accuracy: 0.995,
            floor_multiple: 2.0,
        }
    }
}

/// How pretraining went: epochs actually run and the final epoch's mean
/// batch accuracy per encoder (student, point teacher, image teacher).
#[derive(Clone, Copy, Debug)]
pub struct BootstrapMetrics {
    pub epochs_run: usize,
    pub final_accuracy: [f32; 3],
}

/// Everything distillation needs: a frozen student backbone, three frozen
/// teachers, and the class names that index the text anchors.
#[derive(Clone, Debug)]
pub struct TeacherBundle {
    pub student: PointEncoderWeights,
    pub point_teacher: PointEncoderWeights,
    pub image_teacher: ImageEncoderWeights,
    pub text: TextEncoderWeights,
    pub class_names: Vec<String>,
    pub metrics: BootstrapMetrics,
}

/// Optimizer state for one encoder: moment buffers in canonical tensor order.
struct EncoderMoments(Vec<Moments>);

impl EncoderMoments {
    fn for_point(w: &mut PointEncoderWeights) -> Self {
        let mut out = Vec::new();
        w.for_each_tensor_mut(&mut |t| out.push(Moments::zeros(t.data().len())));
        Self(out)
    }

    fn for_image(w: &mut ImageEncoderWeights) -> Self {
        let mut out = Vec::new();
        w.for_each_tensor_mut(&mut |t| out.push(Moments::zeros(t.data().len())));
        Self(out)
    }

    fn for_text(w: &mut TextEncoderWeights) -> Self {
        let mut out = Vec::new();
        w.for_each_tensor_mut(&mut |t| out.push(Moments::zeros(t.data().len())));
        Self(out)
    }
}

/// Applies one AdamW step to every tensor of an encoder, zipping the
/// canonical traversal with the VarIds captured when the tape was built.
fn apply_grads(
    each: &mut dyn FnMut(&mut dyn FnMut(&mut Tensor)),
    ids: &[VarId],
    grads: &Gradients,
    moms: &mut EncoderMoments,
    opt: &AdamW,
    lr: f32,
    t: u32,
) {
    let mut idx = 0usize;
    each(&mut |tensor: &mut Tensor| {
        if let Some(g) = grads.wrt(ids[idx]) {
            opt.step(lr, tensor.data_mut(), g.data(), &mut moms.0[idx], t);
        }
        idx += 1;
    });
}

fn batch_accuracy(z: &Tensor, anchors: &Tensor, labels: &[usize]) -> f32 {
    let (b, d) = z.dims2().expect("batch embeddings");
    let (c, _) = anchors.dims2().expect("anchor matrix");
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let zr = &z.data()[row * d..(row + 1) * d];
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for class in 0..c {
            let ar = &anchors.data()[class * d..(class + 1) * d];
            let s: f32 = zr.iter().zip(ar).map(|(a, b)| a * b).sum();
            if s > best_v {
                best_v = s;
                best = class;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f32 / b.max(1) as f32
}

/// Trains the student backbone and the three teachers jointly from scratch,
/// then freezes all of them. Deterministic in `(train, class_names, cfg,
/// seed)`; depth projections of the train set are computed once and cached.
pub fn bootstrap_teachers(
    train: &[PointCloud],
    class_names: &[String],
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<TeacherBundle, EncoderError> {
    let classes = class_names.len();
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB007, 0));
    let mut student = PointEncoderWeights::random(&cfg.student_widths, cfg.embed_dim, &mut init_rng);
    let mut point_teacher =
        PointEncoderWeights::random(&cfg.teacher_widths, cfg.embed_dim, &mut init_rng);
    let mut image_teacher = ImageEncoderWeights::random(
        cfg.resolution,
        cfg.views,
        cfg.image_hidden,
        cfg.embed_dim,
        &mut init_rng,
    );
    let mut text = TextEncoderWeights::random(class_names, cfg.token_dim, cfg.embed_dim, &mut init_rng);

    // One balanced batch = one sample of every class; group indices by label.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, pc) in train.iter().enumerate() {
        if pc.label >= classes {
            return Err(EncoderError::MissingClassSamples { label: pc.label });
        }
        groups[pc.label].push(i);
    }
    for (label, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(EncoderError::MissingClassSamples { label });
        }
    }
    let batches_per_epoch = groups.iter().map(Vec::len).min().expect("classes > 0");

    // Depth projections never change across epochs; render once.
    let depths: Vec<DepthImageSet> = train
        .iter()
        .map(|pc| project_depth(pc, cfg.resolution, cfg.views))
        .collect::<Result<_, _>>()?;

    let opt = AdamW::new(cfg.weight_decay);
    let mut mom_student = EncoderMoments::for_point(&mut student);
    let mut mom_point = EncoderMoments::for_point(&mut point_teacher);
    let mut mom_image = EncoderMoments::for_image(&mut image_teacher);
    let mut mom_text = EncoderMoments::for_text(&mut text);

    let mut step = 0u32;
    let mut epochs_run = 0usize;
    let mut final_accuracy = [0.0f32; 3];
    for epoch in 0..cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB007, 1 + epoch as u64));
        let mut order = groups.clone();
        for g in &mut order {
            g.shuffle(&mut shuffle_rng);
        }

        let mut acc_sums = [0.0f64; 3];
        for b in 0..batches_per_epoch {
            let batch: Vec<usize> = (0..classes).map(|c| order[c][b]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();

            let mut tape = Tape::new();
            let sv = student.vars(&mut tape, true)?;
            let pv = point_teacher.vars(&mut tape, true)?;
            let iv = image_teacher.vars(&mut tape, true)?;
            let tv = text.vars(&mut tape, true)?;

            let mut stu_rows = Vec::with_capacity(classes);
            let mut pt_rows = Vec::with_capacity(classes);
            let mut img_rows = Vec::with_capacity(classes);
            for &i in &batch {
                let pts = tape.constant(super::cloud_tensor(&train[i]));
                stu_rows.push(encode_student(&mut tape, pts, None, &sv)?);
                pt_rows.push(encode_point_teacher(&mut tape, pts, &pv)?);
                img_rows.push(encode_image_teacher(&mut tape, &depths[i], &iv)?);
            }
            let z_stu = tape.stack_rows(&stu_rows)?;
            let z_pt = tape.stack_rows(&pt_rows)?;
            let z_img = tape.stack_rows(&img_rows)?;
            let z_text = encode_text(&mut tape, &text, &tv, class_names, None)?;
            let anchors = tape.gather_rows(z_text, &labels)?;

            let mask = GateMask::all(classes);
            let mut total: Option<VarId> = None;
            for z in [z_stu, z_pt, z_img] {
                let term = gated_contrastive_loss(&mut tape, z, anchors, &mask, cfg.tau)?;
                total = Some(match total {
                    Some(t) => tape.add(t, term.loss)?,
                    None => term.loss,
                });
            }
            let total = total.expect("three loss terms");

            let z_text_val = tape.value(z_text).clone();
            for (slot, z) in [z_stu, z_pt, z_img].into_iter().enumerate() {
                acc_sums[slot] += batch_accuracy(tape.value(z), &z_text_val, &labels) as f64;
            }

            let grads = tape.backward(total)?;
            step += 1;
            apply_grads(
                &mut |f| student.for_each_tensor_mut(f),
                &sv.ids(),
                &grads,
                &mut mom_student,
                &opt,
                cfg.lr,
                step,
            );
            apply_grads(
                &mut |f| point_teacher.for_each_tensor_mut(f),
                &pv.ids(),
                &grads,
                &mut mom_point,
                &opt,
                cfg.lr,
                step,
            );
            apply_grads(
                &mut |f| image_teacher.for_each_tensor_mut(f),
                &iv.ids(),
                &grads,
                &mut mom_image,
                &opt,
                cfg.lr,
                step,
            );
            apply_grads(
                &mut |f| text.for_each_tensor_mut(f),
                &tv.ids(),
                &grads,
                &mut mom_text,
                &opt,
                cfg.lr,
                step,
            );
        }

        epochs_run = epoch + 1;
        for (slot, sum) in acc_sums.iter().enumerate() {
            final_accuracy[slot] = (sum / batches_per_epoch as f64) as f32;
        }
        if final_accuracy.iter().all(|&a| a >= cfg.target_accuracy) {
            break;
        }
    }

    let min_acc = final_accuracy.iter().copied().fold(f32::INFINITY, f32::min);
    let floor = cfg.floor_multiple / classes as f32;
    if min_acc < floor {
        return Err(EncoderError::NonConvergence {
            accuracy: min_acc,
            floor,
        });
    }

    student.frozen = true;
    point_teacher.frozen = true;
    image_teacher.frozen = true;
    text.frozen = true;
    Ok(TeacherBundle {
        student,
        point_teacher,
        image_teacher,
        text,
        class_names: class_names.to_vec(),
        metrics: BootstrapMetrics {
            epochs_run,
            final_accuracy,
        },
    })
}
