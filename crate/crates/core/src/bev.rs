//! Bird's-eye-view density images.
//!
//! Pixel `(row, col)` covers sensor-frame `x ∈ [-h + col·g, -h + (col+1)·g)` and
//! `y ∈ [-h + row·g, -h + (row+1)·g)`, so rows follow `y` and columns follow `x`.
//! Rotations act about the image center with the same handedness as
//! [`rotate_cloud_yaw`](crate::ingest::rotate_cloud_yaw): rasterizing a cloud
//! rotated by a multiple of π/2 equals rotating its image by the same angle.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::ingest::PointCloud;

pub const DEFAULT_GRID_SIZE: f64 = 0.4;
pub const DEFAULT_DENSITY_CAP: u32 = 10;

/// Square single-channel intensity image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    side: usize,
    pixels: Vec<f64>,
    /// Meters per pixel.
    pub grid_size: f64,
    /// Sensor-frame `(x, y)` of the outer corner of pixel `(0, 0)`.
    pub origin: [f64; 2],
}

impl BevImage {
    pub fn zeros(side: usize, grid_size: f64, origin: [f64; 2]) -> Self {
        Self {
            side,
            pixels: vec![0.0; side * side],
            grid_size,
            origin,
        }
    }

    /// Builds an image from row-major pixels. Panics if `pixels` is not square.
    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), side * side, "pixel buffer is not side×side");
        let h = side as f64 / 2.0;
        Self {
            side,
            pixels,
            grid_size: 1.0,
            origin: [-h, -h],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.side + col] = v;
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        Self {
            side: self.side,
            pixels,
            grid_size: self.grid_size,
            origin: self.origin,
        }
    }

    /// 8-bit binary PGM of `round(255 · intensity)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    /// Writes `path` as PGM and `path` + `.txt` with the geo-referencing.
    pub fn save_debug(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        let mut sidecar = String::new();
        writeln!(sidecar, "grid_size {}", self.grid_size).unwrap();
        writeln!(sidecar, "origin_x {}", self.origin[0]).unwrap();
        writeln!(sidecar, "origin_y {}", self.origin[1]).unwrap();
        let mut side_path = path.as_os_str().to_owned();
        side_path.push(".txt");
        fs::write(side_path, sidecar)?;
        Ok(())
    }
}

/// Side length in pixels for a window of `±half_extent` at `grid_size`.
pub fn image_side(grid_size: f64, half_extent: f64) -> usize {
    // relative slack so that e.g. 40 / 0.4 lands on 100 regardless of rounding
    ((2.0 * half_extent / grid_size) * (1.0 + 1e-12)).floor() as usize
}

/// Counts points per ground cell and maps counts to `min(count, cap) / cap`.
/// Points with `|x| ≥ h` or `|y| ≥ h` are ignored.
pub fn rasterize(
    cloud: &PointCloud,
    grid_size: f64,
    half_extent: f64,
    density_cap: u32,
) -> BevImage {
    assert!(grid_size > 0.0 && half_extent > 0.0 && density_cap >= 1);
    let h = half_extent;
    let side = image_side(grid_size, h);
    let mut counts = vec![0u32; side * side];
    for p in &cloud.points {
        if p.x.abs() >= h || p.y.abs() >= h {
            continue;
        }
        let row = ((p.y + h) / grid_size).floor() as usize;
        let col = ((p.x + h) / grid_size).floor() as usize;
        if row < side && col < side {
            counts[row * side + col] += 1;
        }
    }
    let cap = density_cap as f64;
    let pixels = counts
        .iter()
        .map(|&n| (n.min(density_cap)) as f64 / cap)
        .collect();
    BevImage {
        side,
        pixels,
        grid_size,
        origin: [-h, -h],
    }
}

/// Number of quarter turns if `angle` is a multiple of π/2.
pub(crate) fn quarter_turns(angle: f64) -> Option<usize> {
    let k = (angle / FRAC_PI_2).round();
    if (angle - k * FRAC_PI_2).abs() <= 1e-12 * angle.abs().max(1.0) {
        Some((k as i64).rem_euclid(4) as usize)
    } else {
        None
    }
}

/// Rotates a row-major square buffer by `turns` quarter turns counterclockwise
/// (in the `x`-right, `y`-along-rows frame). Pure permutation.
pub(crate) fn rotate_quarter(src: &[f64], side: usize, turns: usize) -> Vec<f64> {
    let n = side;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = match turns % 4 {
                0 => (r, c),
                1 => (n - 1 - c, r),
                2 => (n - 1 - r, n - 1 - c),
                _ => (c, n - 1 - r),
            };
            out[r * n + c] = src[sr * n + sc];
        }
    }
    out
}

/// Bilinear sampling weights for rotating a square buffer by `angle`:
/// for each output pixel, up to four `(source index, weight)` pairs.
/// Samples that fall outside the frame contribute zero.
pub(crate) fn bilinear_rotation_taps(side: usize, angle: f64) -> Vec<Vec<(usize, f64)>> {
    let n = side as f64;
    let half = n / 2.0;
    let (s, c) = angle.sin_cos();
    let mut taps = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let u = col as f64 + 0.5 - half;
            let v = r as f64 + 0.5 - half;
            // inverse rotation gives the source location
            let su = u * c + v * s;
            let sv = -u * s + v * c;
            let fx = su + half - 0.5;
            let fy = sv + half - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let (tx, ty) = (fx - x0, fy - y0);
            let mut t = Vec::with_capacity(4);
            for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
                for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    let w = wx * wy;
                    if w > 0.0 && yy >= 0.0 && xx >= 0.0 && yy < n && xx < n {
                        t.push((yy as usize * side + xx as usize, w));
                    }
                }
            }
            taps.push(t);
        }
    }
    taps
}

/// Rotates a square buffer about its center: exact permutation for quarter
/// turns, bilinear interpolation otherwise.
pub(crate) fn rotate_buffer(src: &[f64], side: usize, angle: f64) -> Vec<f64> {
    if let Some(turns) = quarter_turns(angle) {
        return rotate_quarter(src, side, turns);
    }
    bilinear_rotation_taps(side, angle)
        .iter()
        .map(|t| t.iter().map(|&(i, w)| w * src[i]).sum())
        .collect()
}

/// Rotates the image by `angle` radians about its center.
pub fn rotate_image(img: &BevImage, angle: f64) -> BevImage {
    img.with_pixels(rotate_buffer(&img.pixels, img.side, angle))
}

/// Whether pixel `(row, col)` has its center inside the inscribed circle.
pub fn in_inscribed_circle(side: usize, row: usize, col: usize) -> bool {
    let half = side as f64 / 2.0;
    let u = col as f64 + 0.5 - half;
    let v = row as f64 + 0.5 - half;
    u * u + v * v <= half * half
}

/// Zeroes every pixel whose center lies outside the inscribed circle.
pub fn apply_circular_mask(img: &BevImage) -> BevImage {
    let n = img.side;
    let mut out = img.clone();
    for r in 0..n {
        for c in 0..n {
            if !in_inscribed_circle(n, r, c) {
                out.pixels[r * n + c] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{rotate_cloud_yaw, Point3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_image(side: usize, seed: u64) -> BevImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BevImage::from_pixels(side, (0..side * side).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn empty_cloud_gives_blank_image() {
        let img = rasterize(&PointCloud::default(), 0.4, 20.0, 10);
        assert_eq!(img.side(), 100);
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_binning() {
        let c = PointCloud::new(vec![Point3::new(0.01, 0.01, 0.0)], 0);
        let img = rasterize(&c, 0.4, 20.0, 10);
        // (0.01 + 20) / 0.4 = 50.025 -> cell 50 on both axes
        let nonzero: Vec<_> = img
            .pixels()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].0, 50 * 100 + 50);
        assert_eq!(*nonzero[0].1, 0.1);
    }

    #[test]
    fn density_saturates() {
        let c = PointCloud::new(vec![Point3::new(1.1, -3.3, 0.0); 15], 0);
        let img = rasterize(&c, 0.4, 20.0, 10);
        assert_eq!(img.pixels().iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn boundary_points_dropped() {
        let c = PointCloud::new(
            vec![
                Point3::new(20.0, 0.0, 0.0),
                Point3::new(0.0, -20.0, 0.0),
                Point3::new(-19.99, 19.99, 0.0),
            ],
            0,
        );
        let img = rasterize(&c, 0.4, 20.0, 10);
        assert_eq!(img.pixels().iter().filter(|&&v| v > 0.0).count(), 1);
        assert!(img.get(99, 0) > 0.0);
    }

    #[test]
    fn quarter_turn_closure() {
        let img = random_image(100, 1);
        assert_eq!(rotate_image(&img, 0.0), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate_image(&r, FRAC_PI_2);
        }
        assert_eq!(r, img);
    }

    #[test]
    fn quarter_turn_moves_pixel() {
        let mut img = BevImage::zeros(100, 0.4, [-20.0, -20.0]);
        img.set(50, 80, 1.0);
        let r = rotate_image(&img, FRAC_PI_2);
        // center of (50, 80) is (u, v) = (30.5, 0.5); +90° maps it to (-0.5, 30.5),
        // i.e. column 49, row 80
        assert_eq!(r.get(80, 49), 1.0);
        assert_eq!(r.pixels().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn bilinear_agrees_with_permutation_at_quarter_turn() {
        let img = random_image(16, 4);
        let exact = rotate_quarter(img.pixels(), 16, 1);
        let interp: Vec<f64> = bilinear_rotation_taps(16, FRAC_PI_2)
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * img.pixels()[i]).sum())
            .collect();
        for (a, b) in exact.iter().zip(&interp) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_examples() {
        let ones = BevImage::from_pixels(100, vec![1.0; 10000]);
        let m = apply_circular_mask(&ones);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(99, 99), 0.0);
        assert_eq!(m.get(50, 50), 1.0);
        assert_eq!(m.get(50, 0), 1.0);
        assert_eq!(apply_circular_mask(&m), m);
    }

    #[test]
    fn mask_commutes_with_rotation() {
        let img = random_image(100, 2);
        let n = img.side();
        let half = n as f64 / 2.0;
        for k in 1..4 {
            let a = k as f64 * FRAC_PI_2;
            assert_eq!(
                rotate_image(&apply_circular_mask(&img), a),
                apply_circular_mask(&rotate_image(&img, a))
            );
        }
        for &a in &[0.3, 1.0, 2.2, -2.9] {
            let lhs = apply_circular_mask(&rotate_image(&apply_circular_mask(&img), a));
            let rhs = apply_circular_mask(&rotate_image(&img, a));
            for r in 0..n {
                for c in 0..n {
                    let u = c as f64 + 0.5 - half;
                    let v = r as f64 + 0.5 - half;
                    // bilinear taps lie within √2 px of the sample point
                    if (u * u + v * v).sqrt() <= half - std::f64::consts::SQRT_2 {
                        assert!((lhs.get(r, c) - rhs.get(r, c)).abs() < 1e-6);
                    }
                }
            }
        }
    }

    fn interior_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        while pts.len() < n {
            let x: f64 = rng.gen_range(-19.9..19.9);
            let y: f64 = rng.gen_range(-19.9..19.9);
            // stay clear of grid lines so floor() is unambiguous after rotation
            let fx = ((x + 20.0) / 0.4).fract();
            let fy = ((y + 20.0) / 0.4).fract();
            if (0.05..0.95).contains(&fx) && (0.05..0.95).contains(&fy) {
                pts.push(Point3::new(x, y, rng.gen_range(-2.0..2.0)));
            }
        }
        PointCloud::new(pts, 0)
    }

    #[test]
    fn cloud_rotation_matches_image_rotation() {
        for seed in 0..5 {
            let c = interior_cloud(seed, 3000);
            let img = rasterize(&c, 0.4, 20.0, 10);
            for k in 0..4 {
                let a = k as f64 * FRAC_PI_2;
                let lhs = rasterize(&rotate_cloud_yaw(&c, a), 0.4, 20.0, 10);
                assert_eq!(lhs, rotate_image(&img, a), "seed {seed} k {k}");
            }
        }
    }

    #[test]
    fn pgm_encoding() {
        let mut img = BevImage::zeros(2, 0.4, [-0.4, -0.4]);
        img.set(0, 1, 1.0);
        img.set(1, 0, 0.5);
        assert_eq!(img.to_pgm(), b"P5\n2 2\n255\n\x00\xff\x80\x00".to_vec());
    }

    proptest! {
        #[test]
        fn raster_is_order_invariant_and_bounded(
            pts in proptest::collection::vec((-25.0f64..25.0, -25.0f64..25.0), 0..300),
            cap in 1u32..20,
        ) {
            let cloud = PointCloud::new(pts.iter().map(|&(x, y)| Point3::new(x, y, 0.0)).collect(), 0);
            let mut rev = cloud.clone();
            rev.points.reverse();
            let a = rasterize(&cloud, 0.4, 20.0, cap);
            prop_assert_eq!(&a, &rasterize(&rev, 0.4, 20.0, cap));
            prop_assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn quarter_turn_preserves_pixel_multiset(seed in any::<u64>(), k in 0usize..4) {
            let img = random_image(20, seed);
            let r = rotate_image(&img, k as f64 * FRAC_PI_2 + 2.0 * PI);
            let mut a = img.pixels().to_vec();
            let mut b = r.pixels().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
