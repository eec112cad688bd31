//! Deterministic synthetic road scenes.
//!
//! A smooth random trajectory is lined with box, pole and wall clusters whose
//! surface points are fixed in the world frame. Each frame observes the
//! clusters near its pose with per-frame dropout and jitter plus a ground
//! ring, so nearby frames see nearly the same structure.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{Dataset, Point3, PointCloud, Pose, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_frames: usize,
    /// Arc length between consecutive frames, meters.
    pub spacing: f64,
    /// Horizontal range of the simulated sensor, meters.
    pub sensor_range: f64,
    /// Expected clusters per meter of trajectory.
    pub cluster_density: f64,
    /// Clusters keep at least this lateral distance from the trajectory.
    pub road_half_width: f64,
    /// Clusters are placed up to this far beyond the road edge.
    pub corridor_width: f64,
    /// Per-frame probability that a surface point is observed.
    pub keep_prob: f64,
    /// Standard deviation of per-frame point jitter, meters.
    pub jitter: f64,
    pub ground_points: usize,
    pub sensor_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 100,
            spacing: 1.0,
            sensor_range: 30.0,
            cluster_density: 1.2,
            road_half_width: 4.0,
            corridor_width: 22.0,
            keep_prob: 0.8,
            jitter: 0.02,
            ground_points: 1500,
            sensor_height: 1.7,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_frames: usize, spacing: f64) -> Self {
        Self {
            seed,
            n_frames,
            spacing,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterKind {
    Box,
    Pole,
    Wall,
}

/// One static structure, with its surface samples in world coordinates.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub kind: ClusterKind,
    pub center: [f64; 2],
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    config: SynthConfig,
    trajectory: Vec<Pose>,
    clusters: Vec<Cluster>,
}

/// Generates a synthetic database split of `n_frames` frames spaced `spacing`
/// meters apart. Identical arguments produce identical datasets.
pub fn synth_scene(seed: u64, n_frames: usize, spacing: f64) -> Dataset {
    SynthWorld::generate(SynthConfig::new(seed, n_frames, spacing)).dataset()
}

fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id.wrapping_add(1));
    rng
}

impl SynthWorld {
    pub fn generate(config: SynthConfig) -> Self {
        assert!(config.n_frames >= 1, "need at least one frame");
        assert!(config.spacing > 0.0, "spacing must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let trajectory = Self::make_trajectory(&config, &mut rng);
        let clusters = Self::make_clusters(&config, &trajectory, &mut rng);
        Self {
            config,
            trajectory,
            clusters,
        }
    }

    fn make_trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
        let mut heading = rng.gen_range(-PI..PI);
        let mut curvature = 0.0f64;
        let noise = Normal::new(0.0, 0.012).unwrap();
        let (mut x, mut y) = (0.0f64, 0.0f64);
        let mut poses = Vec::with_capacity(cfg.n_frames);
        for _ in 0..cfg.n_frames {
            poses.push(Pose::from_xy_yaw(x, y, heading));
            // curvature per meter follows a mean-reverting walk
            let steps = (cfg.spacing / 0.5).ceil() as usize;
            let ds = cfg.spacing / steps as f64;
            for _ in 0..steps {
                curvature = (0.95 * curvature + noise.sample(rng)).clamp(-0.06, 0.06);
                heading += curvature * ds;
                x += heading.cos() * ds;
                y += heading.sin() * ds;
            }
        }
        poses
    }

    /// Position and heading at arc length `s`, extrapolated past both ends.
    fn path_at(cfg: &SynthConfig, traj: &[Pose], s: f64) -> ([f64; 2], f64) {
        let last = traj.len() - 1;
        let f = s / cfg.spacing;
        if f > 0.0 && f < last as f64 {
            let i = f.floor() as usize;
            let t = f - i as f64;
            let (p, q) = (traj[i].xy(), traj[i + 1].xy());
            return (
                [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])],
                (q[1] - p[1]).atan2(q[0] - p[0]),
            );
        }
        let (i, over) = if f <= 0.0 {
            (0, s)
        } else {
            (last, s - last as f64 * cfg.spacing)
        };
        let p = traj[i].xy();
        let h = traj[i].yaw();
        ([p[0] + over * h.cos(), p[1] + over * h.sin()], h)
    }

    fn make_clusters(cfg: &SynthConfig, traj: &[Pose], rng: &mut ChaCha8Rng) -> Vec<Cluster> {
        let margin = cfg.sensor_range + 10.0;
        let length = (traj.len() - 1) as f64 * cfg.spacing;
        let expected = cfg.cluster_density * (length + 2.0 * margin);
        let count = Poisson::new(expected.max(1.0)).unwrap().sample(rng) as usize;
        let mut clusters = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.gen_range(-margin..length + margin);
            let (p, h) = Self::path_at(cfg, traj, s);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = side * (cfg.road_half_width + rng.gen_range(0.0..cfg.corridor_width));
            let center = [p[0] - lateral * h.sin(), p[1] + lateral * h.cos()];
            let kind = match rng.gen_range(0..10) {
                0..=3 => ClusterKind::Pole,
                4..=7 => ClusterKind::Box,
                _ => ClusterKind::Wall,
            };
            let cluster = Self::make_cluster(kind, center, h, rng);
            // curved roads can bring a cluster back onto the driven path
            let clear = cfg.road_half_width - 0.5;
            let blocks_road = traj.iter().any(|pose| {
                let q = pose.xy();
                (q[0] - center[0]).hypot(q[1] - center[1]) < clear
            });
            if !blocks_road {
                clusters.push(cluster);
            }
        }
        clusters
    }

    fn make_cluster(
        kind: ClusterKind,
        center: [f64; 2],
        road_heading: f64,
        rng: &mut ChaCha8Rng,
    ) -> Cluster {
        let mut points = Vec::new();
        match kind {
            ClusterKind::Pole => {
                let radius = rng.gen_range(0.15..0.35);
                let height = rng.gen_range(3.0..8.0);
                let n = (45.0 * height) as usize;
                for _ in 0..n {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    points.push([
                        center[0] + radius * a.cos(),
                        center[1] + radius * a.sin(),
                        rng.gen_range(0.0..height),
                    ]);
                }
            }
            ClusterKind::Box => {
                let w = rng.gen_range(1.5..6.0);
                let l = rng.gen_range(2.0..10.0);
                let height = rng.gen_range(1.5..5.0);
                let yaw = rng.gen_range(-PI..PI);
                let n = (7.0 * 2.0 * (w + l) * height) as usize;
                let (s, c) = yaw.sin_cos();
                for _ in 0..n {
                    // pick a point on the perimeter of the footprint
                    let t = rng.gen_range(0.0..2.0 * (w + l));
                    let (u, v) = if t < l {
                        (t - l / 2.0, -w / 2.0)
                    } else if t < l + w {
                        (l / 2.0, t - l - w / 2.0)
                    } else if t < 2.0 * l + w {
                        (t - l - w - l / 2.0, w / 2.0)
                    } else {
                        (-l / 2.0, t - 2.0 * l - w - w / 2.0)
                    };
                    points.push([
                        center[0] + u * c - v * s,
                        center[1] + u * s + v * c,
                        rng.gen_range(0.0..height),
                    ]);
                }
            }
            ClusterKind::Wall => {
                let length = rng.gen_range(5.0..18.0);
                let height = rng.gen_range(2.0..4.0);
                let yaw = road_heading + rng.gen_range(-0.3..0.3);
                let n = (10.0 * length * height) as usize;
                let (s, c) = yaw.sin_cos();
                for _ in 0..n {
                    let u = rng.gen_range(-length / 2.0..length / 2.0);
                    let v = if rng.gen_bool(0.5) { 0.15 } else { -0.15 };
                    points.push([
                        center[0] + u * c - v * s,
                        center[1] + u * s + v * c,
                        rng.gen_range(0.0..height),
                    ]);
                }
            }
        }
        Cluster {
            kind,
            center,
            points,
        }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn trajectory(&self) -> &[Pose] {
        &self.trajectory
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Indices of clusters whose center falls in the sensor-frame window
    /// `|x|, |y| ≤ half_extent` of `pose`.
    pub fn visible_clusters(&self, pose: &Pose, half_extent: f64) -> Vec<usize> {
        self.clusters
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let p = pose.world_to_sensor([c.center[0], c.center[1], 0.0]);
                p[0].abs() <= half_extent && p[1].abs() <= half_extent
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Simulated scan from `pose`, in the sensor frame. The per-frame noise
    /// stream is keyed by `frame_id`. Coordinates are rounded to `f32` so the
    /// cloud survives a velodyne round trip unchanged.
    pub fn observe(&self, pose: &Pose, frame_id: u64) -> PointCloud {
        let cfg = &self.config;
        let mut rng = frame_rng(cfg.seed, frame_id);
        let jitter = Normal::new(0.0, cfg.jitter.max(1e-12)).unwrap();
        let range = cfg.sensor_range;
        let [px, py] = pose.xy();
        let mut points = Vec::new();
        let emit = |p: [f64; 3], refl: f64, points: &mut Vec<Point3>| {
            let s = pose.world_to_sensor(p);
            points.push(Point3::with_reflectance(
                s[0] as f32 as f64,
                s[1] as f32 as f64,
                (s[2] - cfg.sensor_height) as f32 as f64,
                refl as f32 as f64,
            ));
        };
        for cluster in &self.clusters {
            let reach = (cluster.center[0] - px).hypot(cluster.center[1] - py);
            if reach > range + 10.0 {
                continue;
            }
            for q in &cluster.points {
                if !rng.gen_bool(cfg.keep_prob) {
                    continue;
                }
                let p = [
                    q[0] + jitter.sample(&mut rng),
                    q[1] + jitter.sample(&mut rng),
                    q[2] + jitter.sample(&mut rng),
                ];
                if (p[0] - px).hypot(p[1] - py) <= range {
                    let refl = rng.gen_range(0.2..0.9);
                    emit(p, refl, &mut points);
                }
            }
        }
        for _ in 0..cfg.ground_points {
            let r = rng.gen_range(2.0..range);
            let a = rng.gen_range(0.0..2.0 * PI);
            let p = [px + r * a.cos(), py + r * a.sin(), jitter.sample(&mut rng)];
            let refl = rng.gen_range(0.0..0.3);
            emit(p, refl, &mut points);
        }
        PointCloud::new(points, frame_id)
    }

    /// The database split: one scan per trajectory pose, frame ids `0..n`.
    pub fn dataset(&self) -> Dataset {
        let entries = self
            .trajectory
            .iter()
            .enumerate()
            .map(|(i, pose)| (self.observe(pose, i as u64), *pose))
            .collect();
        Dataset {
            entries,
            split: Split::Database,
        }
    }

    /// Query poses near the trajectory: each picks a random frame, moves up
    /// to `max_offset` meters away from it and takes a heading either equal
    /// to the frame's or, with `random_yaw`, uniform in `[-π, π)`.
    /// Returns `(source frame index, pose)` pairs.
    pub fn query_poses(
        &self,
        n: usize,
        max_offset: f64,
        random_yaw: bool,
        seed: u64,
    ) -> Vec<(usize, Pose)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let i = rng.gen_range(0..self.trajectory.len());
                let base = self.trajectory[i];
                let a = rng.gen_range(0.0..2.0 * PI);
                let r = rng.gen_range(0.0..=max_offset);
                let yaw = if random_yaw {
                    rng.gen_range(-PI..PI)
                } else {
                    base.yaw()
                };
                let [x, y] = base.xy();
                (i, Pose::from_xy_yaw(x + r * a.cos(), y + r * a.sin(), yaw))
            })
            .collect()
    }

    /// Scans at the given query poses. Frame ids start at `first_frame_id`,
    /// which should not collide with database ids so the noise differs.
    pub fn query_dataset(&self, poses: &[Pose], first_frame_id: u64) -> Dataset {
        let entries = poses
            .iter()
            .enumerate()
            .map(|(i, pose)| (self.observe(pose, first_frame_id + i as u64), *pose))
            .collect();
        Dataset {
            entries,
            split: Split::Query,
        }
    }
}
