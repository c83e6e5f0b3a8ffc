//! Conversion between joint coordinates and per-bone (unit direction, length)
//! attributes, plus the 7-wide fused per-joint layout fed to the denoiser.
//!
//! Bone attributes are stored per joint: the row of joint `c` describes the
//! bone from `parent(c)` to `c`. The root row is always zero, and so is the row
//! of any zero-length bone.

use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, SkeletonTopology};

#[derive(Debug, Clone, PartialEq)]
pub struct Pose4D {
    /// `[dir_x, dir_y, dir_z, length]` per joint.
    pub attrs: Vec<[f64; 4]>,
}

impl Pose4D {
    pub fn zeros(num_joints: usize) -> Self {
        Self {
            attrs: vec![[0.0; 4]; num_joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.attrs.len()
    }

    pub fn direction(&self, joint: usize) -> [f64; 3] {
        let [x, y, z, _] = self.attrs[joint];
        [x, y, z]
    }

    pub fn length(&self, joint: usize) -> f64 {
        self.attrs[joint][3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused7D {
    pub rows: Vec<[f64; 7]>,
}

impl Fused7D {
    /// Builds from a flat row-major buffer whose row width must be 7.
    pub fn from_flat(values: &[f64], width: usize) -> Result<Self> {
        if width != 7 {
            return Err(Error::Shape(format!(
                "fused rows must be 7 wide, got {width}"
            )));
        }
        if !values.len().is_multiple_of(7) {
            return Err(Error::Shape(format!(
                "{} values do not form 7-wide rows",
                values.len()
            )));
        }
        let rows = values
            .chunks_exact(7)
            .map(|c| c.try_into().expect("chunk of 7"))
            .collect();
        Ok(Self { rows })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Unit direction and length of the vector `to - from`. Zero-length bones map
/// to all zeros.
#[inline]
pub fn bone_attributes(from: [f64; 3], to: [f64; 3]) -> [f64; 4] {
    let d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if len > f64::MIN_POSITIVE && len.is_finite() {
        [d[0] / len, d[1] / len, d[2] / len, len]
    } else {
        [0.0; 4]
    }
}

pub fn disentangle(pose: &Pose3D, topology: &SkeletonTopology) -> Pose4D {
    debug_assert_eq!(pose.num_joints(), topology.num_joints());
    let root = topology.root();
    let attrs = topology
        .parents()
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            if c == root {
                [0.0; 4]
            } else {
                bone_attributes(pose.coords[p], pose.coords[c])
            }
        })
        .collect();
    Pose4D { attrs }
}

/// Inverse of [`disentangle`]: places the root and walks the tree outward.
pub fn reassemble(attrs: &Pose4D, root_position: [f64; 3], topology: &SkeletonTopology) -> Pose3D {
    let mut coords = vec![[0.0; 3]; topology.num_joints()];
    let parents = topology.parents();
    for &j in topology.topological_order() {
        if j == topology.root() {
            coords[j] = root_position;
            continue;
        }
        let p = coords[parents[j]];
        let [dx, dy, dz, len] = attrs.attrs[j];
        coords[j] = [p[0] + len * dx, p[1] + len * dy, p[2] + len * dz];
    }
    Pose3D { coords }
}

pub fn fuse(pose: &Pose3D, attrs: &Pose4D) -> Result<Fused7D> {
    if pose.num_joints() != attrs.num_joints() {
        return Err(Error::Shape(format!(
            "fuse: {} joint rows vs {} attribute rows",
            pose.num_joints(),
            attrs.num_joints()
        )));
    }
    let rows = pose
        .coords
        .iter()
        .zip(&attrs.attrs)
        .map(|(c, a)| [c[0], c[1], c[2], a[0], a[1], a[2], a[3]])
        .collect();
    Ok(Fused7D { rows })
}

pub fn split(fused: &Fused7D) -> (Pose3D, Pose4D) {
    let (coords, attrs) = fused
        .rows
        .iter()
        .map(|r| ([r[0], r[1], r[2]], [r[3], r[4], r[5], r[6]]))
        .unzip();
    (Pose3D { coords }, Pose4D { attrs })
}

/// Fuses every frame of a flat `S×J×3` buffer into a flat `S×J×7` buffer.
pub fn fuse_frames(flat_coords: &[f64], topology: &SkeletonTopology) -> Vec<f64> {
    let j = topology.num_joints();
    let parents = topology.parents();
    let root = topology.root();
    let mut out = Vec::with_capacity(flat_coords.len() / 3 * 7);
    for frame in flat_coords.chunks_exact(j * 3) {
        for (c, &p) in parents.iter().enumerate() {
            let q = [frame[3 * c], frame[3 * c + 1], frame[3 * c + 2]];
            let a = if c == root {
                [0.0; 4]
            } else {
                bone_attributes([frame[3 * p], frame[3 * p + 1], frame[3 * p + 2]], q)
            };
            out.extend_from_slice(&[q[0], q[1], q[2], a[0], a[1], a[2], a[3]]);
        }
    }
    out
}
