//! Inference sessions: cosine classification against cached text anchors,
//! with call counters that make overhead claims checkable.
//!
//! Text anchors (including any learned context) are embedded exactly once
//! at session construction. Point prompts enter the forward as one constant
//! leaf plus one row-concat — the only structural difference from the
//! promptless forward, whatever the cloud size.

use super::PipelineError;
use crate::attacks::VictimModel;
use crate::diffmath::{Tape, Tensor};
use crate::encoders::{
    embed_text, encode_student, PointEncoderWeights, PromptParams, TextEncoderWeights,
};
use std::cell::Cell;

/// Monotonic call counters of one session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionCounters {
    /// Times the text anchors were embedded (stays 1 for a session's life).
    pub anchor_builds: u64,
    pub classify_calls: u64,
    pub loss_grad_calls: u64,
}

/// A ready-to-serve classifier: frozen student backbone, optional point
/// prompts, precomputed anchor matrix.
pub struct InferenceSession {
    student: PointEncoderWeights,
    point_prompts: Option<Tensor>,
    anchors: Tensor,
    class_names: Vec<String>,
    /// Temperature used by the attack-facing loss; classification argmax is
    /// temperature-free. Defaults to the contrastive training temperature so
    /// gradient attacks see the same sharpness the model was fitted at.
    pub tau_attack: f32,
    anchor_builds: Cell<u64>,
    classify_calls: Cell<u64>,
    loss_grad_calls: Cell<u64>,
}

impl InferenceSession {
    /// Builds a session. With `prompts`, the text context conditions the
    /// anchors (computed here, once) and the point rows join every pooled
    /// set; without, this is the plain backbone.
    pub fn new(
        student: &PointEncoderWeights,
        text: &TextEncoderWeights,
        class_names: &[String],
        prompts: Option<&PromptParams>,
    ) -> Result<Self, PipelineError> {
        let ctx = prompts.map(|p| &p.text_context);
        let anchors = embed_text(text, class_names, ctx)?;
        Ok(Self {
            student: student.clone(),
            point_prompts: prompts.map(|p| p.point_tokens.clone()),
            anchors,
            class_names: class_names.to_vec(),
            tau_attack: 0.07,
            anchor_builds: Cell::new(1),
            classify_calls: Cell::new(0),
            loss_grad_calls: Cell::new(0),
        })
    }

    pub fn counters(&self) -> SessionCounters {
        SessionCounters {
            anchor_builds: self.anchor_builds.get(),
            classify_calls: self.classify_calls.get(),
            loss_grad_calls: self.loss_grad_calls.get(),
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }

    pub fn has_prompts(&self) -> bool {
        self.point_prompts.is_some()
    }

    fn forward(&self, tape: &mut Tape, points: Tensor) -> Vec<f32> {
        let vars = self.student.vars(tape, false).expect("inference vars");
        let pts = tape.constant(points);
        let prompt_var = self.point_prompts.as_ref().map(|p| tape.constant(p.clone()));
        let z = encode_student(tape, pts, prompt_var, &vars).expect("student forward");
        tape.value(z).data().to_vec()
    }

    /// Unit-norm student embedding of one cloud, prompts included when the
    /// session has them.
    pub fn embed(&self, points: &[[f32; 3]]) -> Vec<f32> {
        let mut tape = Tape::new();
        self.forward(&mut tape, points_tensor(points))
    }

    /// Cosine logits against the cached anchors (one per class).
    pub fn logits(&self, points: &[[f32; 3]]) -> Vec<f32> {
        let mut tape = Tape::new();
        let z = self.forward(&mut tape, points_tensor(points));
        let (c, d) = self.anchors.dims2().expect("anchor matrix");
        (0..c)
            .map(|class| {
                let row = &self.anchors.data()[class * d..(class + 1) * d];
                row.iter().zip(&z).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Predicted class and logits; argmax ties resolve to the lower class.
    pub fn classify(&self, points: &[[f32; 3]]) -> (usize, Vec<f32>) {
        self.classify_calls.set(self.classify_calls.get() + 1);
        let logits = self.logits(points);
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        (best, logits)
    }

    /// Tape length of one classification forward on an `n_points` cloud —
    /// the structural cost probe used to verify prompt overhead.
    pub fn node_count(&self, n_points: usize) -> usize {
        let mut tape = Tape::new();
        let dummy = Tensor::zeros(vec![n_points, 3]);
        let _ = self.forward(&mut tape, dummy);
        tape.len()
    }
}

pub(crate) fn points_tensor(points: &[[f32; 3]]) -> Tensor {
    let flat: Vec<f32> = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(vec![points.len(), 3], flat).expect("sized")
}

impl VictimModel for InferenceSession {
    fn num_classes(&self) -> usize {
        self.anchors.dims2().expect("anchor matrix").0
    }

    fn predict(&self, points: &[[f32; 3]]) -> usize {
        self.classify(points).0
    }

    /// Cross-entropy of the true class under softmax over cosine logits at
    /// `tau_attack`, differentiated with respect to the input points.
    fn loss_grad(&self, points: &[[f32; 3]], label: usize) -> (f32, Vec<[f32; 3]>) {
        self.loss_grad_calls.set(self.loss_grad_calls.get() + 1);
        let mut tape = Tape::new();
        let vars = self.student.vars(&mut tape, false).expect("inference vars");
        let pts = tape.leaf(points_tensor(points).with_grad());
        let prompt_var = self.point_prompts.as_ref().map(|p| tape.constant(p.clone()));
        let z = encode_student(&mut tape, pts, prompt_var, &vars).expect("student forward");
        let zr = tape.stack_rows(&[z]).expect("row");
        let anchors = tape.constant(self.anchors.clone());
        let sims = tape.matmul_nt(zr, anchors).expect("logits");
        let logits = tape.scale(sims, 1.0 / self.tau_attack);
        let loss = tape
            .softmax_cross_entropy(logits, &[label])
            .expect("cross entropy");
        let grads = tape.backward(loss).expect("backward");
        let g = grads.wrt(pts).expect("points are differentiable");
        let out: Vec<[f32; 3]> = g
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        (tape.value(loss).item(), out)
    }
}
