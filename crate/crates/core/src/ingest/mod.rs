//! Point cloud ingestion: KITTI-style file formats, the reproducible synthetic
//! scene generator and the crop / downsample / yaw-rotation preprocessing.

mod dataset_io;
mod poses;
mod preprocess;
pub mod synth;
mod velodyne;

pub use dataset_io::{read_dataset, write_dataset, POSE_FILE, VELODYNE_DIR};
pub use poses::{parse_pose_file, parse_pose_file_with_tolerance, serialize_pose_file};
pub use preprocess::{crop_window, downsample, rotate_cloud_yaw};
pub use synth::{synth_scene, SynthConfig, SynthWorld};
pub use velodyne::{parse_velodyne_bin, serialize_velodyne_bin};

/// Default half side of the cubic crop window, in meters.
pub const DEFAULT_HALF_EXTENT: f64 = 20.0;
/// Default number of points kept after downsampling.
pub const DEFAULT_NUM_POINTS: usize = 4096;
/// Tolerance on `RᵀR = I` and `det R = 1` for pose rotations.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Unitless reflectance in `[0, 1]`; zero when the source has none.
    pub reflectance: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            reflectance: 0.0,
        }
    }

    pub fn with_reflectance(x: f64, y: f64, z: f64, reflectance: f64) -> Self {
        Self {
            x,
            y,
            z,
            reflectance,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.reflectance.is_finite()
    }
}

/// An unordered set of LiDAR returns in the sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_id: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame_id: u64) -> Self {
        Self { points, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sensor pose in the world frame: `p_world = rotation · p_sensor + position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Row-major 3×3 rotation.
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            position: [0.0; 3],
        }
    }

    /// Planar pose with heading `yaw` about the z axis.
    pub fn from_xy_yaw(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            position: [x, y, 0.0],
        }
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.position[0], self.position[1]]
    }

    /// Euclidean distance between the two positions.
    pub fn distance(&self, other: &Pose) -> f64 {
        let d: f64 = (0..3)
            .map(|i| (self.position[i] - other.position[i]).powi(2))
            .sum();
        d.sqrt()
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_deviation(&self) -> f64 {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        worst.max((det - 1.0).abs())
    }

    /// Maps a world-frame point into this pose's sensor frame.
    pub fn world_to_sensor(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Database,
    Query,
}

/// Pose-tagged point clouds sharing one world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub entries: Vec<(PointCloud, Pose)>,
    pub split: Split,
}

impl Dataset {
    pub fn new(split: Split) -> Self {
        Self {
            entries: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }

    /// Entries whose index lies in `range`, keeping frame ids.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Dataset {
        let end = range.end.min(self.entries.len());
        let start = range.start.min(end);
        Dataset {
            entries: self.entries[start..end].to_vec(),
            split,
        }
    }
}
