//! Orthographic multi-view depth projection of unit-sphere point clouds.
//!
//! Each view is a `res × res` "closeness" image: pixel value is the maximum
//! over points in that cell of `(1 + d)/2`, where `d` is the point's
//! coordinate along the view axis times the view sign. Nearer points are
//! brighter; empty cells are 0. Views use the axis order
//! `+x, −x, +y, −y, +z, −z` and a view count of 2 or 4 takes a prefix of
//! that list. In-plane axes are the remaining two in ascending order
//! (u → column, v → row); no handedness flip is applied for mirrored views.

use crate::diffmath::Tensor;
use crate::geometry::PointCloud;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Norm slack: inputs must satisfy ‖p‖ ≤ 1 + this.
pub const NORM_SLACK: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("resolution {got} too small (need >= 4)")]
    ResolutionTooSmall { got: usize },
    #[error("view count {got} unsupported (need 2, 4, or 6)")]
    BadViewCount { got: usize },
    #[error("point {index} has norm {norm:.4}, input must be unit-sphere normalized")]
    UnnormalizedInput { index: usize, norm: f32 },
}

/// One view direction: coordinate axis and sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewDirection {
    pub axis: usize,
    pub negative: bool,
}

/// All view directions in canonical order.
pub const VIEW_ORDER: [ViewDirection; 6] = [
    ViewDirection { axis: 0, negative: false },
    ViewDirection { axis: 0, negative: true },
    ViewDirection { axis: 1, negative: false },
    ViewDirection { axis: 1, negative: true },
    ViewDirection { axis: 2, negative: false },
    ViewDirection { axis: 2, negative: true },
];

/// A stack of depth views of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImageSet {
    views: Vec<Vec<f32>>,
    resolution: usize,
    directions: Vec<ViewDirection>,
}

impl DepthImageSet {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn directions(&self) -> &[ViewDirection] {
        &self.directions
    }

    /// Row-major pixels of one view.
    pub fn view(&self, i: usize) -> &[f32] {
        &self.views[i]
    }

    /// All views flattened into a `[V, res²]` tensor for the image encoder.
    pub fn flattened(&self) -> Tensor {
        let r2 = self.resolution * self.resolution;
        let mut data = Vec::with_capacity(self.views.len() * r2);
        for v in &self.views {
            data.extend_from_slice(v);
        }
        Tensor::new(vec![self.views.len(), r2], data).expect("sized by construction")
    }

    /// Writes one view as an ASCII PGM (P2) image, closeness scaled to 0-255.
    pub fn write_pgm(&self, view: usize, path: &Path) -> std::io::Result<()> {
        let v = &self.views[view];
        let mut out = String::with_capacity(v.len() * 4 + 32);
        out.push_str(&format!("P2\n{} {}\n255\n", self.resolution, self.resolution));
        for row in v.chunks(self.resolution) {
            let line: Vec<String> = row
                .iter()
                .map(|&p| ((p.clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())
    }
}

/// Maps a coordinate in [-1, 1] to a pixel index in [0, res).
#[inline]
fn to_cell(u: f32, res: usize) -> usize {
    let c = ((u + 1.0) * 0.5 * res as f32).floor() as isize;
    c.clamp(0, res as isize - 1) as usize
}

/// Projects a unit-sphere-normalized cloud into `views` depth images of
/// `resolution × resolution` pixels. Rejects unnormalized inputs.
pub fn project_depth(
    pc: &PointCloud,
    resolution: usize,
    views: usize,
) -> Result<DepthImageSet, ProjectionError> {
    if resolution < 4 {
        return Err(ProjectionError::ResolutionTooSmall { got: resolution });
    }
    if !matches!(views, 2 | 4 | 6) {
        return Err(ProjectionError::BadViewCount { got: views });
    }
    for (index, p) in pc.points.iter().enumerate() {
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if norm > 1.0 + NORM_SLACK {
            return Err(ProjectionError::UnnormalizedInput { index, norm });
        }
    }

    let directions = VIEW_ORDER[..views].to_vec();
    let mut out = Vec::with_capacity(views);
    for dir in &directions {
        let mut img = vec![0.0f32; resolution * resolution];
        // In-plane axes: the two remaining, ascending (u → col, v → row).
        let (ua, va) = match dir.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let sign = if dir.negative { -1.0f32 } else { 1.0 };
        for p in &pc.points {
            let closeness = (1.0 + sign * p[dir.axis]) * 0.5;
            let col = to_cell(p[ua], resolution);
            let row = to_cell(p[va], resolution);
            let px = &mut img[row * resolution + col];
            if closeness > *px {
                *px = closeness;
            }
        }
        out.push(img);
    }
    Ok(DepthImageSet {
        views: out,
        resolution,
        directions,
    })
}
