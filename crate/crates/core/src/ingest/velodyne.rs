use byteorder::{ByteOrder, LittleEndian};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

/// Decodes a headerless KITTI velodyne scan: little-endian `f32` quadruples
/// `(x, y, z, reflectance)`.
pub fn parse_velodyne_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Length(format!(
            "velodyne payload of {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut v = [0f32; 4];
        LittleEndian::read_f32_into(rec, &mut v);
        if v.iter().any(|f| !f.is_finite()) {
            return Err(Error::Value(format!("non-finite value in point {i}")));
        }
        points.push(Point3::with_reflectance(
            v[0] as f64,
            v[1] as f64,
            v[2] as f64,
            v[3] as f64,
        ));
    }
    Ok(PointCloud::new(points, 0))
}

/// Inverse of [`parse_velodyne_bin`]. Coordinates are narrowed to `f32`.
pub fn serialize_velodyne_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = vec![0u8; cloud.len() * RECORD_BYTES];
    for (p, rec) in cloud.points.iter().zip(out.chunks_exact_mut(RECORD_BYTES)) {
        let v = [p.x as f32, p.y as f32, p.z as f32, p.reflectance as f32];
        LittleEndian::write_f32_into(&v, rec);
    }
    out
}
