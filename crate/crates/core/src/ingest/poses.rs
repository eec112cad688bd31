use std::fmt::Write;

use super::{Pose, ORTHONORMAL_TOLERANCE};
use crate::error::{Error, Result};

/// Parses a KITTI odometry pose file: one row-major 3×4 `[R|t]` per non-empty line.
pub fn parse_pose_file(text: &str) -> Result<Vec<Pose>> {
    parse_pose_file_with_tolerance(text, ORTHONORMAL_TOLERANCE)
}

/// Like [`parse_pose_file`] with a custom orthonormality tolerance. Published
/// pose files are printed with six significant digits, which can exceed the
/// default tolerance.
pub fn parse_pose_file_with_tolerance(text: &str, tolerance: f64) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 12 values, found {}", fields.len()),
            });
        }
        let mut v = [0f64; 12];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("{f:?}: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value {f:?}"),
                });
            }
        }
        let pose = Pose {
            rotation: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            position: [v[3], v[7], v[11]],
        };
        let deviation = pose.orthonormality_deviation();
        if deviation > tolerance {
            return Err(Error::Orthonormality {
                line: line_no,
                deviation,
            });
        }
        poses.push(pose);
    }
    Ok(poses)
}

/// Writes poses in the format read by [`parse_pose_file`], using the shortest
/// representation that parses back to the same `f64`.
pub fn serialize_pose_file(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.position;
        let vals = [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ];
        for (i, v) in vals.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}
