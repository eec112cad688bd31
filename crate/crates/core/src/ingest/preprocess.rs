use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Point3, PointCloud};

/// Keeps the points inside the closed cube `|x|, |y|, |z| ≤ half_extent`,
/// preserving their relative order.
pub fn crop_window(cloud: &PointCloud, half_extent: f64) -> PointCloud {
    let h = half_extent;
    let points = cloud
        .points
        .iter()
        .filter(|p| p.x.abs() <= h && p.y.abs() <= h && p.z.abs() <= h)
        .copied()
        .collect();
    PointCloud::new(points, cloud.frame_id)
}

/// Uniform sampling of `n` points without replacement. Clouds with at most
/// `n` points are returned unchanged. The kept points stay in input order.
pub fn downsample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    assert!(n > 0, "downsample target must be positive");
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, cloud.len(), n).into_vec();
    picked.sort_unstable();
    let points = picked.into_iter().map(|i| cloud.points[i]).collect();
    PointCloud::new(points, cloud.frame_id)
}

/// Rotates every point by `angle` radians about the z axis.
pub fn rotate_cloud_yaw(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| Point3 {
            x: p.x * c - p.y * s,
            y: p.x * s + p.y * c,
            ..*p
        })
        .collect();
    PointCloud::new(points, cloud.frame_id)
}
