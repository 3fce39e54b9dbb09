//! Checkpoint container: named tensors plus string metadata in one file.
//!
//! Layout is a UTF-8 header followed by a raw little-endian `f32` payload:
//!
//! ```text
//! PPCK 1
//! meta <key> <value…>
//! tensor <name> <d0>x<d1>… <offset>
//! sha256 <hex of payload>
//! payload <float count>
//! <raw bytes>
//! ```
//!
//! Offsets are in floats and must be contiguous; the SHA-256 of the payload
//! is verified on read, so silent truncation or bit rot fails loudly.

use crate::diffmath::Tensor;
use crate::encoders::{
    Dense, ImageEncoderWeights, PointEncoderWeights, TeacherBundle, TextEncoderWeights,
    BootstrapMetrics,
};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

const MAGIC: &str = "PPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {got} unsupported (expected {VERSION})")]
    VersionMismatch { got: String },
    #[error("corrupt checkpoint: {msg}")]
    Corrupt { msg: String },
    #[error("checkpoint is missing tensor '{name}'")]
    MissingTensor { name: String },
    #[error("checkpoint is missing meta '{name}'")]
    MissingMeta { name: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// In-memory checkpoint: ordered tensors plus a meta map.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    metas: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds/overwrites a meta entry. Keys must be whitespace-free; values
    /// may contain spaces but not newlines.
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(
            !key.contains(char::is_whitespace) && !key.is_empty(),
            "meta key must be one token"
        );
        assert!(!value.contains('\n'), "meta value must be one line");
        self.metas.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.metas
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingMeta {
                name: key.to_string(),
            })
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.meta(key)?
            .parse()
            .map_err(|_| CheckpointError::Corrupt {
                msg: format!("meta '{key}' does not parse"),
            })
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.metas.contains_key(key)
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor) {
        assert!(
            !name.contains(char::is_whitespace) && !name.is_empty(),
            "tensor name must be one token"
        );
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor {
                name: name.to_string(),
            })
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut payload: Vec<u8> = Vec::new();
        let mut header = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.metas {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("tensor {name} {dims} {offset}\n"));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.data().len();
        }
        let digest = Sha256::digest(&payload);
        header.push_str(&format!("sha256 {}\n", hex(&digest)));
        header.push_str(&format!("payload {offset}\n"));

        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(&payload);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        let corrupt = |msg: String| CheckpointError::Corrupt { msg };

        // The header is everything up to and including the "payload N" line.
        let mut pos = 0usize;
        let mut lines: Vec<String> = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("header never ends".to_string()))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| corrupt("header is not UTF-8".to_string()))?
                .to_string();
            pos += nl + 1;
            let done = line.starts_with("payload ");
            lines.push(line);
            if done {
                break;
            }
        }
        let payload = &bytes[pos..];

        let header = lines.first().ok_or_else(|| corrupt("empty header".to_string()))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(MAGIC) {
            return Err(corrupt(format!("bad magic in '{header}'")));
        }
        let got_version = hp.next().unwrap_or("missing").to_string();
        if got_version != VERSION.to_string() {
            return Err(CheckpointError::VersionMismatch { got: got_version });
        }

        let mut cp = Checkpoint::new();
        let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut want_sha: Option<String> = None;
        let mut want_count: Option<usize> = None;
        for line in &lines[1..] {
            let mut toks = line.splitn(2, ' ');
            let tag = toks.next().unwrap_or("");
            let rest = toks.next().unwrap_or("");
            match tag {
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| corrupt(format!("bad meta line '{line}'")))?;
                    cp.metas.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let t: Vec<&str> = rest.split_whitespace().collect();
                    if t.len() != 3 {
                        return Err(corrupt(format!("bad tensor line '{line}'")));
                    }
                    let shape: Vec<usize> = if t[1] == "scalar" {
                        vec![]
                    } else {
                        t[1].split('x')
                            .map(|d| d.parse().map_err(|_| corrupt(format!("bad dims '{}'", t[1]))))
                            .collect::<Result<_, _>>()?
                    };
                    let offset: usize = t[2]
                        .parse()
                        .map_err(|_| corrupt(format!("bad offset '{}'", t[2])))?;
                    specs.push((t[0].to_string(), shape, offset));
                }
                "sha256" => want_sha = Some(rest.to_string()),
                "payload" => {
                    want_count = Some(
                        rest.parse()
                            .map_err(|_| corrupt(format!("bad payload count '{rest}'")))?,
                    )
                }
                other => return Err(corrupt(format!("unknown header tag '{other}'"))),
            }
        }

        let count = want_count.ok_or_else(|| corrupt("missing payload line".to_string()))?;
        if payload.len() != count * 4 {
            return Err(corrupt(format!(
                "payload is {} bytes, header promises {}",
                payload.len(),
                count * 4
            )));
        }
        let sha = want_sha.ok_or_else(|| corrupt("missing sha256 line".to_string()))?;
        let digest = hex(&Sha256::digest(payload));
        if digest != sha {
            return Err(corrupt(format!("payload sha {digest} != recorded {sha}")));
        }

        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut consumed = 0usize;
        for (name, shape, offset) in specs {
            if offset != consumed {
                return Err(corrupt(format!(
                    "tensor '{name}' offset {offset} does not follow {consumed}"
                )));
            }
            let len: usize = shape.iter().product::<usize>().max(usize::from(shape.is_empty()));
            let end = offset + len;
            if end > floats.len() {
                return Err(corrupt(format!("tensor '{name}' overruns payload")));
            }
            let t = Tensor::new(shape, floats[offset..end].to_vec())
                .map_err(|e| corrupt(format!("tensor '{name}': {e}")))?;
            cp.tensors.push((name, t));
            consumed = end;
        }
        if consumed != floats.len() {
            return Err(corrupt(format!(
                "payload has {} floats, tensors account for {consumed}",
                floats.len()
            )));
        }
        Ok(cp)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── teacher bundle persistence ───────────────────────────────────────────────

fn push_dense(cp: &mut Checkpoint, prefix: &str, d: &Dense) {
    cp.push_tensor(&format!("{prefix}.w"), d.w.clone());
    cp.push_tensor(&format!("{prefix}.b"), d.b.clone());
}

fn read_dense(cp: &Checkpoint, prefix: &str) -> Result<Dense, CheckpointError> {
    Ok(Dense {
        w: cp.tensor(&format!("{prefix}.w"))?.clone(),
        b: cp.tensor(&format!("{prefix}.b"))?.clone(),
    })
}

fn push_point_encoder(cp: &mut Checkpoint, prefix: &str, w: &PointEncoderWeights) {
    cp.set_meta(&format!("{prefix}_layers"), w.mlp.len());
    for (i, d) in w.mlp.iter().enumerate() {
        push_dense(cp, &format!("{prefix}.mlp{i}"), d);
    }
    push_dense(cp, &format!("{prefix}.head"), &w.head);
}

fn read_point_encoder(cp: &Checkpoint, prefix: &str) -> Result<PointEncoderWeights, CheckpointError> {
    let layers: usize = cp.meta_parsed(&format!("{prefix}_layers"))?;
    let mut mlp = Vec::with_capacity(layers);
    for i in 0..layers {
        mlp.push(read_dense(cp, &format!("{prefix}.mlp{i}"))?);
    }
    Ok(PointEncoderWeights {
        mlp,
        head: read_dense(cp, &format!("{prefix}.head"))?,
        frozen: true,
    })
}

/// Writes the frozen bundle (all four encoders, class names, vocabulary,
/// bootstrap metrics) as a single checkpoint file.
pub fn save_teachers(bundle: &TeacherBundle, path: &Path) -> Result<(), CheckpointError> {
    let mut cp = Checkpoint::new();
    cp.set_meta("kind", "teachers");
    cp.set_meta("class_names", bundle.class_names.join(","));
    cp.set_meta("vocab", bundle.text.vocab.join(","));
    cp.set_meta("resolution", bundle.image_teacher.resolution);
    cp.set_meta("views", bundle.image_teacher.views);
    cp.set_meta("epochs_run", bundle.metrics.epochs_run);
    cp.set_meta(
        "final_accuracy",
        bundle
            .metrics
            .final_accuracy
            .iter()
            .map(|a| format!("{a:.6}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    push_point_encoder(&mut cp, "student", &bundle.student);
    push_point_encoder(&mut cp, "point", &bundle.point_teacher);
    push_dense(&mut cp, "image.view", &bundle.image_teacher.view_mlp);
    push_dense(&mut cp, "image.head", &bundle.image_teacher.head);
    cp.push_tensor("text.embed", bundle.text.embed.clone());
    push_dense(&mut cp, "text.proj", &bundle.text.proj);
    cp.write(path)
}

/// Reads a bundle written by [`save_teachers`]; every encoder comes back
/// frozen.
pub fn load_teachers(path: &Path) -> Result<TeacherBundle, CheckpointError> {
    let cp = Checkpoint::read(path)?;
    if cp.meta("kind")? != "teachers" {
        return Err(CheckpointError::Corrupt {
            msg: format!("expected a teachers checkpoint, found kind '{}'", cp.meta("kind")?),
        });
    }
    let class_names: Vec<String> = cp
        .meta("class_names")?
        .split(',')
        .map(str::to_string)
        .collect();
    let vocab: Vec<String> = cp.meta("vocab")?.split(',').map(str::to_string).collect();
    let final_accuracy_vec: Vec<f32> = cp
        .meta("final_accuracy")?
        .split(',')
        .map(|s| {
            s.parse().map_err(|_| CheckpointError::Corrupt {
                msg: format!("bad final_accuracy component '{s}'"),
            })
        })
        .collect::<Result<_, _>>()?;
    let final_accuracy: [f32; 3] = final_accuracy_vec
        .try_into()
        .map_err(|_| CheckpointError::Corrupt {
            msg: "final_accuracy must have three components".to_string(),
        })?;

    Ok(TeacherBundle {
        student: read_point_encoder(&cp, "student")?,
        point_teacher: read_point_encoder(&cp, "point")?,
        image_teacher: ImageEncoderWeights {
            view_mlp: read_dense(&cp, "image.view")?,
            head: read_dense(&cp, "image.head")?,
            resolution: cp.meta_parsed("resolution")?,
            views: cp.meta_parsed("views")?,
            frozen: true,
        },
        text: TextEncoderWeights {
            vocab,
            embed: cp.tensor("text.embed")?.clone(),
            proj: read_dense(&cp, "text.proj")?,
            frozen: true,
        },
        class_names,
        metrics: BootstrapMetrics {
            epochs_run: cp.meta_parsed("epochs_run")?,
            final_accuracy,
        },
    })
}
