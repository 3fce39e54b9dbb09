//! The four encoders: student and point teacher (shared-MLP set encoders),
//! depth-image teacher, and the text encoder with learnable context.
//!
//! Weight structs hold plain tensors plus a `frozen` flag; forwards run on a
//! [`Tape`] through `*Vars` handles created per tape. Asking for trainable
//! vars on frozen weights is an error, which is how teacher immutability is
//! enforced mechanically during distillation.

mod bootstrap;

pub use bootstrap::{bootstrap_teachers, BootstrapConfig, BootstrapMetrics, TeacherBundle};

use crate::diffmath::{DiffError, Tape, Tensor, VarId};
use crate::geometry::PointCloud;
use crate::losses::LossError;
use crate::projection::{DepthImageSet, ProjectionError};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{what}: expected width {want}, got {got}")]
    ArchitectureMismatch {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("cannot build trainable vars for frozen {what} weights")]
    FrozenViolation { what: &'static str },
    #[error("class '{class}': token '{token}' not in vocabulary")]
    UnknownToken { class: String, token: String },
    #[error("class name '{class}' has no tokens")]
    EmptyClassName { class: String },
    #[error("embedding norm {norm:.4} is not unit")]
    NonUnitEmbedding { norm: f32 },
    #[error("bootstrap failed to converge: min accuracy {accuracy:.3} below floor {floor:.3}")]
    NonConvergence { accuracy: f32, floor: f32 },
    #[error("training split has no samples for class {label}")]
    MissingClassSamples { label: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// A unit-norm embedding cached off-tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    data: Vec<f32>,
}

impl Embedding {
    /// Wraps a vector, validating unit norm (1e-4 slack, distillation and
    /// classification both assume cosine geometry).
    pub fn new(data: Vec<f32>) -> Result<Self, EncoderError> {
        let norm = data.iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(EncoderError::NonUnitEmbedding { norm });
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn dot(&self, other: &Embedding) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// One dense layer: `w` is `[in, out]`, `b` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    /// He-style init scaled for the given fan-in; biases start at zero.
    fn random(fan_in: usize, fan_out: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let sigma = gain / (fan_in as f32).sqrt();
        let dist = Normal::new(0.0f32, sigma).expect("positive sigma");
        let w = Tensor::new(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
        )
        .expect("sized");
        Dense {
            w,
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w.data().len() + self.b.data().len()
    }
}

/// On-tape handles for one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: VarId,
    pub b: VarId,
}

fn dense_vars(tape: &mut Tape, d: &Dense, trainable: bool) -> DenseVars {
    if trainable {
        DenseVars {
            w: tape.leaf(d.w.clone().with_grad()),
            b: tape.leaf(d.b.clone().with_grad()),
        }
    } else {
        DenseVars {
            w: tape.constant(d.w.clone()),
            b: tape.constant(d.b.clone()),
        }
    }
}

/// Affine layer application for both matrix `[n,in]` and vector `[in]` input.
fn affine(tape: &mut Tape, x: VarId, d: DenseVars) -> Result<VarId, DiffError> {
    let y = tape.matmul(x, d.w)?;
    if tape.value(y).shape().len() == 1 {
        tape.add(y, d.b)
    } else {
        tape.add_row(y, d.b)
    }
}

// ── point encoders (student and point teacher) ──────────────────────────────

/// Shared-MLP set encoder: per-point dense+relu stack, set max-pool, dense
/// head, L2 normalization. The student and the point teacher differ only in
/// layer widths (and the student accepts prompt rows).
#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoderWeights {
    pub mlp: Vec<Dense>,
    pub head: Dense,
    pub frozen: bool,
}

impl PointEncoderWeights {
    /// Fresh random weights: `hidden` per-point widths after the 3-D input,
    /// then a head onto `embed_dim`.
    pub fn random(hidden: &[usize], embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(!hidden.is_empty(), "need at least one per-point layer");
        let mut mlp = Vec::with_capacity(hidden.len());
        let mut prev = 3usize;
        for &w in hidden {
            mlp.push(Dense::random(prev, w, std::f32::consts::SQRT_2, rng));
            prev = w;
        }
        let head = Dense::random(prev, embed_dim, 1.0, rng);
        Self {
            mlp,
            head,
            frozen: false,
        }
    }

    /// Width of per-point features entering the pool (= prompt row width).
    pub fn feature_dim(&self) -> usize {
        self.mlp.last().expect("non-empty mlp").out_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.iter().map(Dense::param_count).sum::<usize>() + self.head.param_count()
    }

    /// Places weights on a tape. `trainable` requires unfrozen weights.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> Result<PointEncoderVars, EncoderError> {
        if trainable && self.frozen {
            return Err(EncoderError::FrozenViolation {
                what: "point encoder",
            });
        }
        Ok(PointEncoderVars {
            mlp: self
                .mlp
                .iter()
                .map(|d| dense_vars(tape, d, trainable))
                .collect(),
            head: dense_vars(tape, &self.head, trainable),
            feature_dim: self.feature_dim(),
        })
    }

    /// Canonical tensor traversal order (matches [`PointEncoderVars::ids`]).
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for d in &mut self.mlp {
            f(&mut d.w);
            f(&mut d.b);
        }
        f(&mut self.head.w);
        f(&mut self.head.b);
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in &self.mlp {
            hash_tensor(&mut h, &d.w);
            hash_tensor(&mut h, &d.b);
        }
        hash_tensor(&mut h, &self.head.w);
        hash_tensor(&mut h, &self.head.b);
        h.finalize().into()
    }
}

/// Tape handles for a point encoder.
pub struct PointEncoderVars {
    pub mlp: Vec<DenseVars>,
    pub head: DenseVars,
    feature_dim: usize,
}

impl PointEncoderVars {
    /// VarIds in the same order as `for_each_tensor_mut`.
    pub fn ids(&self) -> Vec<VarId> {
        let mut out = Vec::with_capacity(self.mlp.len() * 2 + 2);
        for d in &self.mlp {
            out.push(d.w);
            out.push(d.b);
        }
        out.push(self.head.w);
        out.push(self.head.b);
        out
    }
}

/// Per-point features: `[N,3] → [N, feature_dim]` through the shared MLP.
pub fn point_features(
    tape: &mut Tape,
    points: VarId,
    vars: &PointEncoderVars,
) -> Result<VarId, EncoderError> {
    let shape = tape.value(points).shape().to_vec();
    match shape.as_slice() {
        [_, 3] => {}
        other => {
            return Err(EncoderError::ArchitectureMismatch {
                what: "point input",
                want: 3,
                got: other.last().copied().unwrap_or(0),
            })
        }
    }
    let mut x = points;
    for layer in &vars.mlp {
        x = affine(tape, x, *layer)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Pools per-point features (plus optional extra rows) and projects to the
/// unit sphere: `[N, F] (⧺ [M, F]) → [embed_dim]`.
pub fn pooled_head(
    tape: &mut Tape,
    features: VarId,
    extra_rows: Option<VarId>,
    vars: &PointEncoderVars,
) -> Result<VarId, EncoderError> {
    let mut set = features;
    if let Some(extra) = extra_rows {
        let got = tape
            .value(extra)
            .dims2()
            .map(|(_, d)| d)
            .unwrap_or(0);
        if got != vars.feature_dim {
            return Err(EncoderError::ArchitectureMismatch {
                what: "prompt rows",
                want: vars.feature_dim,
                got,
            });
        }
        set = tape.concat_rows(features, extra)?;
    }
    let pooled = tape.set_max_pool(set)?;
    let z = affine(tape, pooled, vars.head)?;
    Ok(tape.l2_normalize(z)?)
}

/// Student forward: per-point MLP, optional prompt rows joining the pool,
/// head, L2 normalize. Prompts extend the pooled set only — point count and
/// all weights are untouched, which is what makes inference zero-overhead
/// when prompts are absent.
pub fn encode_student(
    tape: &mut Tape,
    points: VarId,
    prompts: Option<VarId>,
    vars: &PointEncoderVars,
) -> Result<VarId, EncoderError> {
    let features = point_features(tape, points, vars)?;
    pooled_head(tape, features, prompts, vars)
}

/// Point-teacher forward: the same set encoder without prompt rows.
pub fn encode_point_teacher(
    tape: &mut Tape,
    points: VarId,
    vars: &PointEncoderVars,
) -> Result<VarId, EncoderError> {
    encode_student(tape, points, None, vars)
}

// ── depth-image teacher ──────────────────────────────────────────────────────

/// Depth-image teacher: a shared dense+relu over each view's flattened
/// pixels, mean-pooled over views, then a head onto the embed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderWeights {
    pub view_mlp: Dense,
    pub head: Dense,
    pub resolution: usize,
    pub views: usize,
    pub frozen: bool,
}

impl ImageEncoderWeights {
    pub fn random(
        resolution: usize,
        views: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pixels = resolution * resolution;
        Self {
            view_mlp: Dense::random(pixels, hidden, std::f32::consts::SQRT_2, rng),
            head: Dense::random(hidden, embed_dim, 1.0, rng),
            resolution,
            views,
            frozen: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> Result<ImageEncoderVars, EncoderError> {
        if trainable && self.frozen {
            return Err(EncoderError::FrozenViolation {
                what: "image encoder",
            });
        }
        Ok(ImageEncoderVars {
            view_mlp: dense_vars(tape, &self.view_mlp, trainable),
            head: dense_vars(tape, &self.head, trainable),
            pixels: self.resolution * self.resolution,
        })
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.view_mlp.w);
        f(&mut self.view_mlp.b);
        f(&mut self.head.w);
        f(&mut self.head.b);
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        hash_tensor(&mut h, &self.view_mlp.w);
        hash_tensor(&mut h, &self.view_mlp.b);
        hash_tensor(&mut h, &self.head.w);
        hash_tensor(&mut h, &self.head.b);
        h.finalize().into()
    }
}

pub struct ImageEncoderVars {
    pub view_mlp: DenseVars,
    pub head: DenseVars,
    /// Expected flattened width (`resolution²`), used to validate inputs.
    pub pixels: usize,
}

impl ImageEncoderVars {
    pub fn ids(&self) -> Vec<VarId> {
        vec![self.view_mlp.w, self.view_mlp.b, self.head.w, self.head.b]
    }
}

/// Image-teacher forward. The projection itself is not differentiated; the
/// teacher only ever sees clean clouds.
pub fn encode_image_teacher(
    tape: &mut Tape,
    depth: &DepthImageSet,
    vars: &ImageEncoderVars,
) -> Result<VarId, EncoderError> {
    let px = depth.resolution() * depth.resolution();
    if px != vars.pixels {
        return Err(EncoderError::ArchitectureMismatch {
            what: "depth image pixels",
            want: vars.pixels,
            got: px,
        });
    }
    let flat = tape.constant(depth.flattened());
    let h = affine(tape, flat, vars.view_mlp)?;
    let h = tape.relu(h);
    let pooled = tape.mean_rows(h)?;
    let z = affine(tape, pooled, vars.head)?;
    Ok(tape.l2_normalize(z)?)
}

// ── text encoder ─────────────────────────────────────────────────────────────

/// Text encoder: token embedding table, mean pooling over (context ⧺ class
/// tokens), dense projection, L2 normalize. The learnable context rows are
/// shared across classes and prepended before pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderWeights {
    pub vocab: Vec<String>,
    pub embed: Tensor,
    pub proj: Dense,
    pub frozen: bool,
}

impl TextEncoderWeights {
    /// Builds a vocabulary from the class names (lowercased whitespace
    /// tokens, sorted for determinism) and random table/projection.
    pub fn random(
        class_names: &[String],
        token_dim: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut vocab: Vec<String> = class_names
            .iter()
            .flat_map(|c| c.split_whitespace())
            .map(|t| t.to_lowercase())
            .collect();
        vocab.sort();
        vocab.dedup();
        let dist = Normal::new(0.0f32, 0.3).expect("positive sigma");
        let embed = Tensor::new(
            vec![vocab.len(), token_dim],
            (0..vocab.len() * token_dim).map(|_| dist.sample(rng)).collect(),
        )
        .expect("sized");
        let proj = Dense::random(token_dim, embed_dim, 1.0, rng);
        Self {
            vocab,
            embed,
            proj,
            frozen: false,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// Token ids of one class name.
    pub fn tokenize(&self, class: &str) -> Result<Vec<usize>, EncoderError> {
        let toks: Vec<&str> = class.split_whitespace().collect();
        if toks.is_empty() {
            return Err(EncoderError::EmptyClassName {
                class: class.to_string(),
            });
        }
        toks.iter()
            .map(|t| {
                let lower = t.to_lowercase();
                self.vocab
                    .iter()
                    .position(|v| *v == lower)
                    .ok_or_else(|| EncoderError::UnknownToken {
                        class: class.to_string(),
                        token: lower.clone(),
                    })
            })
            .collect()
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> Result<TextEncoderVars, EncoderError> {
        if trainable && self.frozen {
            return Err(EncoderError::FrozenViolation {
                what: "text encoder",
            });
        }
        let embed = if trainable {
            tape.leaf(self.embed.clone().with_grad())
        } else {
            tape.constant(self.embed.clone())
        };
        Ok(TextEncoderVars {
            embed,
            proj: dense_vars(tape, &self.proj, trainable),
            token_dim: self.token_dim(),
        })
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.embed);
        f(&mut self.proj.w);
        f(&mut self.proj.b);
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for w in &self.vocab {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hash_tensor(&mut h, &self.embed);
        hash_tensor(&mut h, &self.proj.w);
        hash_tensor(&mut h, &self.proj.b);
        h.finalize().into()
    }
}

pub struct TextEncoderVars {
    pub embed: VarId,
    pub proj: DenseVars,
    token_dim: usize,
}

impl TextEncoderVars {
    pub fn ids(&self) -> Vec<VarId> {
        vec![self.embed, self.proj.w, self.proj.b]
    }
}

/// Text forward: one unit-norm anchor row per class, `[C, embed_dim]`.
/// `ctx` is the learnable context `[M_t, token_dim]`, prepended to every
/// class's token rows before mean pooling; `None` means no context (the
/// zero-token configuration).
pub fn encode_text(
    tape: &mut Tape,
    w: &TextEncoderWeights,
    vars: &TextEncoderVars,
    class_names: &[String],
    ctx: Option<VarId>,
) -> Result<VarId, EncoderError> {
    if let Some(c) = ctx {
        let got = tape.value(c).dims2().map(|(_, d)| d).unwrap_or(0);
        if got != vars.token_dim {
            return Err(EncoderError::ArchitectureMismatch {
                what: "text context",
                want: vars.token_dim,
                got,
            });
        }
    }
    let mut rows = Vec::with_capacity(class_names.len());
    for class in class_names {
        let ids = w.tokenize(class)?;
        let toks = tape.gather_rows(vars.embed, &ids)?;
        let seq = match ctx {
            Some(c) => tape.concat_rows(c, toks)?,
            None => toks,
        };
        rows.push(tape.mean_rows(seq)?);
    }
    let stacked = tape.stack_rows(&rows)?;
    let z = affine(tape, stacked, vars.proj)?;
    Ok(tape.l2_normalize(z)?)
}

// ── one-off embedding helpers ────────────────────────────────────────────────

fn cloud_tensor(pc: &PointCloud) -> Tensor {
    Tensor::new(vec![pc.len(), 3], pc.flat()).expect("sized")
}

/// Runs the student once off-tape and returns the embedding.
pub fn embed_student(
    w: &PointEncoderWeights,
    prompts: Option<&Tensor>,
    pc: &PointCloud,
) -> Result<Embedding, EncoderError> {
    let mut tape = Tape::new();
    let vars = w.vars(&mut tape, false)?;
    let points = tape.constant(cloud_tensor(pc));
    let p = prompts.map(|t| tape.constant(t.clone()));
    let z = encode_student(&mut tape, points, p, &vars)?;
    Embedding::new(tape.value(z).data().to_vec())
}

/// Runs the point teacher once and returns the embedding.
pub fn embed_point_teacher(
    w: &PointEncoderWeights,
    pc: &PointCloud,
) -> Result<Embedding, EncoderError> {
    embed_student(w, None, pc)
}

/// Runs the image teacher once on a projected cloud.
pub fn embed_image_teacher(
    w: &ImageEncoderWeights,
    depth: &DepthImageSet,
) -> Result<Embedding, EncoderError> {
    let mut tape = Tape::new();
    let vars = w.vars(&mut tape, false)?;
    let z = encode_image_teacher(&mut tape, depth, &vars)?;
    Embedding::new(tape.value(z).data().to_vec())
}

/// Runs the text encoder once; returns the `[C, D]` anchor matrix.
pub fn embed_text(
    w: &TextEncoderWeights,
    class_names: &[String],
    ctx: Option<&Tensor>,
) -> Result<Tensor, EncoderError> {
    let mut tape = Tape::new();
    let vars = w.vars(&mut tape, false)?;
    let c = ctx.map(|t| tape.constant(t.clone()));
    let z = encode_text(&mut tape, w, &vars, class_names, c)?;
    Ok(tape.value(z).clone())
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

/// Learnable prompt parameters: point rows joining the student's pooled set
/// and context rows prepended to class tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams {
    /// `[M_p, feature_dim]`
    pub point_tokens: Tensor,
    /// `[M_t, token_dim]`
    pub text_context: Tensor,
}

impl PromptParams {
    /// Small random init (σ = 0.02), matching usual prompt-tuning practice.
    pub fn random(m_p: usize, feature_dim: usize, m_t: usize, token_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f32, 0.02).expect("positive sigma");
        let point_tokens = Tensor::new(
            vec![m_p, feature_dim],
            (0..m_p * feature_dim).map(|_| dist.sample(rng)).collect(),
        )
        .expect("sized");
        let text_context = Tensor::new(
            vec![m_t, token_dim],
            (0..m_t * token_dim).map(|_| dist.sample(rng)).collect(),
        )
        .expect("sized");
        Self {
            point_tokens,
            text_context,
        }
    }

    pub fn param_count(&self) -> usize {
        self.point_tokens.data().len() + self.text_context.data().len()
    }
}
