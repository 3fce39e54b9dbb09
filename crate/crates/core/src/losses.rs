//! Confidence-gated contrastive distillation losses.
//!
//! For each frozen teacher, the teacher's own agreement with the text anchors
//! decides which batch samples are trustworthy (the gate); the student is
//! then pulled toward the teacher on exactly those samples with a symmetric
//! in-batch contrastive loss. A learned log-variance per teacher balances the
//! three loss terms.
//!
//! Teacher order is `[image, point, text]` everywhere (indices 0, 1, 2).

use crate::diffmath::{DiffError, Tape, Tensor, VarId};
use thiserror::Error;

/// Slack allowed when validating unit-norm embedding rows.
pub const UNIT_ROW_SLACK: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: row {row} has norm {norm:.4}, expected unit rows")]
    NonUnitRow {
        what: &'static str,
        row: usize,
        norm: f32,
    },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f32),
    #[error("gate k = {k} out of range for {classes} classes")]
    KOutOfRange { k: usize, classes: usize },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{what}: expected {want} rows, got {got}")]
    RowCountMismatch {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("embedding widths differ: student {student}, reference {reference}")]
    WidthMismatch { student: usize, reference: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Per-sample confidence gate for one teacher over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    bits: Vec<bool>,
}

impl GateMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// All-pass gate of the given batch size.
    pub fn all(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn batch_size(&self) -> usize {
        self.bits.len()
    }

    /// Indices of gated-in samples, ascending.
    pub fn selected(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of the batch the gate keeps.
    pub fn fraction(&self) -> f32 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f32 / self.bits.len() as f32
        }
    }
}

fn check_unit_rows(what: &'static str, t: &Tensor) -> Result<(usize, usize), LossError> {
    let (rows, cols) = t.dims2().ok_or(LossError::RowCountMismatch {
        what,
        want: 2,
        got: t.shape().len(),
    })?;
    for r in 0..rows {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > UNIT_ROW_SLACK {
            return Err(LossError::NonUnitRow { what, row: r, norm });
        }
    }
    Ok((rows, cols))
}

/// Temperature-scaled similarity logits between reference embeddings and the
/// text anchors: `L[i][j] = (z_ref_i · z_text_j) / τ`. Both inputs must have
/// unit-norm rows. Plain values (gating is non-differentiable by design).
pub fn reference_logits(
    z_ref: &Tensor,
    z_text: &Tensor,
    tau: f32,
) -> Result<Tensor, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let (b, d) = check_unit_rows("reference embeddings", z_ref)?;
    let (c, d2) = check_unit_rows("text anchors", z_text)?;
    if d != d2 {
        return Err(LossError::WidthMismatch {
            student: d,
            reference: d2,
        });
    }
    let inv = 1.0 / tau;
    let mut data = Vec::with_capacity(b * c);
    for i in 0..b {
        let zi = z_ref.row(i);
        for j in 0..c {
            let s: f32 = zi.iter().zip(z_text.row(j)).map(|(x, y)| x * y).sum();
            data.push(s * inv);
        }
    }
    Ok(Tensor::new(vec![b, c], data).expect("sized"))
}

/// Top-k confidence gate: sample `i` passes iff its true label ranks within
/// the `k` highest logits of row `i`. Ties rank the lower class index first,
/// so the gate is deterministic.
pub fn confidence_mask(
    logits: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<GateMask, LossError> {
    let (b, c) = logits.dims2().ok_or(LossError::RowCountMismatch {
        what: "reference logits",
        want: 2,
        got: logits.shape().len(),
    })?;
    if labels.len() != b {
        return Err(LossError::RowCountMismatch {
            what: "labels",
            want: b,
            got: labels.len(),
        });
    }
    if k == 0 || k > c {
        return Err(LossError::KOutOfRange { k, classes: c });
    }
    let mut bits = Vec::with_capacity(b);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(LossError::LabelOutOfRange {
                row: i,
                label,
                classes: c,
            });
        }
        let row = logits.row(i);
        let ly = row[label];
        // rank = number of classes strictly ahead of the label.
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > ly || (v == ly && j < label))
            .count();
        bits.push(rank < k);
    }
    Ok(GateMask { bits })
}

/// Output of [`gated_contrastive_loss`].
pub struct GatedLoss {
    pub loss: VarId,
    /// True when the gate selected nothing; the loss is then a constant zero
    /// (no gradient) and the caller should surface the event.
    pub empty_gate: bool,
}

/// Symmetric contrastive alignment on the gated sub-batch: with selected
/// student rows `S` and reference rows `R` (unit norm, `[B_sel, D]`), the
/// similarity matrix is `M = S·Rᵀ/τ` and the loss is
/// `(CE(M, identity) + CE(Mᵀ, identity)) / 2`.
pub fn gated_contrastive_loss(
    tape: &mut Tape,
    z_student: VarId,
    z_reference: VarId,
    mask: &GateMask,
    tau: f32,
) -> Result<GatedLoss, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let (bs, ds) = tape.value(z_student).dims2().ok_or(LossError::RowCountMismatch {
        what: "student embeddings",
        want: 2,
        got: tape.value(z_student).shape().len(),
    })?;
    let (br, dr) = tape.value(z_reference).dims2().ok_or(LossError::RowCountMismatch {
        what: "reference embeddings",
        want: 2,
        got: tape.value(z_reference).shape().len(),
    })?;
    if bs != br || bs != mask.batch_size() {
        return Err(LossError::RowCountMismatch {
            what: "gated batch",
            want: bs,
            got: if bs != br { br } else { mask.batch_size() },
        });
    }
    if ds != dr {
        return Err(LossError::WidthMismatch {
            student: ds,
            reference: dr,
        });
    }

    let selected = mask.selected();
    if selected.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(GatedLoss {
            loss: zero,
            empty_gate: true,
        });
    }

    let s = tape.gather_rows(z_student, &selected)?;
    let r = tape.gather_rows(z_reference, &selected)?;
    let sim = tape.matmul_nt(s, r)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let identity: Vec<usize> = (0..selected.len()).collect();
    let fwd = tape.softmax_cross_entropy(sim, &identity)?;
    let sim_t = tape.transpose(sim)?;
    let bwd = tape.softmax_cross_entropy(sim_t, &identity)?;
    let sum = tape.add(fwd, bwd)?;
    let loss = tape.scale(sum, 0.5);
    Ok(GatedLoss {
        loss,
        empty_gate: false,
    })
}

/// Per-sample text reference rows: row `i` is the text anchor of sample `i`'s
/// true class. On-tape gather so gradients flow back into the text context.
pub fn text_reference(
    tape: &mut Tape,
    z_text: VarId,
    labels: &[usize],
) -> Result<VarId, LossError> {
    let (c, _) = tape.value(z_text).dims2().ok_or(LossError::RowCountMismatch {
        what: "text anchors",
        want: 2,
        got: tape.value(z_text).shape().len(),
    })?;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(LossError::LabelOutOfRange {
                row: i,
                label,
                classes: c,
            });
        }
    }
    Ok(tape.gather_rows(z_text, labels)?)
}

/// Homoscedastic-uncertainty combination of the three teacher losses: each
/// term contributes `exp(-λ_k)·L_k + λ_k`, with λ the learned log-variances.
/// All six inputs must be scalars already on the tape.
pub fn total_loss(
    tape: &mut Tape,
    losses: [VarId; 3],
    lambdas: [VarId; 3],
) -> Result<VarId, LossError> {
    let mut total: Option<VarId> = None;
    for (l, lam) in losses.into_iter().zip(lambdas) {
        for (what, id) in [("loss term", l), ("log-variance", lam)] {
            if !tape.value(id).shape().is_empty() {
                return Err(LossError::RowCountMismatch {
                    what,
                    want: 0,
                    got: tape.value(id).shape().len(),
                });
            }
        }
        let neg = tape.neg(lam);
        let w = tape.exp(neg);
        let weighted = tape.mul(w, l)?;
        let term = tape.add(weighted, lam)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("three terms"))
}

/// Scalar telemetry the trainer logs each step.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    /// Raw per-teacher losses `[image, point, text]`.
    pub losses: [f32; 3],
    /// Effective weights `exp(-λ_k)`.
    pub weights: [f32; 3],
    /// Gate pass fractions per teacher.
    pub gate_fractions: [f32; 3],
    /// Weighted total including the `+λ` regularizers.
    pub total: f32,
}
