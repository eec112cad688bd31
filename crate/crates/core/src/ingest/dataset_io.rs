use std::fs;
use std::path::Path;

use super::{
    parse_pose_file, parse_velodyne_bin, serialize_pose_file, serialize_velodyne_bin, Dataset,
    Split,
};
use crate::error::{Error, Result};

/// Directory holding one `NNNNNN.bin` scan per frame.
pub const VELODYNE_DIR: &str = "velodyne";
/// Pose file, one line per frame in frame order.
pub const POSE_FILE: &str = "poses.txt";

/// Writes `dir/velodyne/NNNNNN.bin` (named by frame id) and `dir/poses.txt`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let scans = dir.join(VELODYNE_DIR);
    fs::create_dir_all(&scans)?;
    for (cloud, _) in &dataset.entries {
        fs::write(
            scans.join(format!("{:06}.bin", cloud.frame_id)),
            serialize_velodyne_bin(cloud),
        )?;
    }
    fs::write(dir.join(POSE_FILE), serialize_pose_file(&dataset.poses()))?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`] (or a KITTI sequence laid out
/// the same way). Scans are matched to pose lines in sorted filename order.
pub fn read_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let poses = parse_pose_file(&fs::read_to_string(dir.join(POSE_FILE))?)?;
    let mut files: Vec<_> = fs::read_dir(dir.join(VELODYNE_DIR))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    if files.len() != poses.len() {
        return Err(Error::Format(format!(
            "{} scans but {} poses in {}",
            files.len(),
            poses.len(),
            dir.display()
        )));
    }
    let mut entries = Vec::with_capacity(files.len());
    for (idx, (path, pose)) in files.iter().zip(poses).enumerate() {
        let mut cloud = parse_velodyne_bin(&fs::read(path)?)?;
        cloud.frame_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or(idx as u64);
        entries.push((cloud, pose));
    }
    Ok(Dataset { entries, split })
}
