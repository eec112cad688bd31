//! Versioned binary container for a trained [`Model`] and the raster
//! settings it was trained with.
//!
//! Layout (little endian): magic `BEVPCKPT`, `u32` version, a config block,
//! then a `u32` tensor count followed by each tensor as `u32` rank, `u32`
//! dims and `f32` values. Network tensors come first in layer order (filters
//! then bias), then NetVLAD centers, weights and biases.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::equivariant::{NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::model::{Model, RasterConfig};
use crate::netvlad::VladParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEVPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub raster: RasterConfig,
}

fn tensor_shapes(model: &Model) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for l in &model.net.layers {
        shapes.push(vec![
            l.out_channels,
            l.in_channels,
            l.in_group,
            l.kernel_size,
            l.kernel_size,
        ]);
        shapes.push(vec![l.out_channels]);
    }
    let (k, d) = (model.vlad.clusters, model.vlad.dim);
    shapes.push(vec![k, d]);
    shapes.push(vec![k, d]);
    shapes.push(vec![k]);
    shapes
}

fn tensors_mut(model: &mut Model) -> Vec<&mut Vec<f64>> {
    let mut out = Vec::new();
    for l in &mut model.net.layers {
        out.push(&mut l.filters);
        out.push(&mut l.bias);
    }
    out.push(&mut model.vlad.centers);
    out.push(&mut model.vlad.weights);
    out.push(&mut model.vlad.biases);
    out
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.check()?;
        let mut w = Vec::new();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let cfg = &self.model.net_config;
        w.write_u32::<LittleEndian>(to_u32(cfg.group_order, "group order")?)?;
        w.write_u32::<LittleEndian>(to_u32(cfg.kernel_size, "kernel size")?)?;
        w.write_u32::<LittleEndian>(to_u32(cfg.channels.len(), "layer count")?)?;
        for &c in &cfg.channels {
            w.write_u32::<LittleEndian>(to_u32(c, "channel count")?)?;
        }
        w.write_u32::<LittleEndian>(to_u32(self.model.vlad.clusters, "cluster count")?)?;
        w.write_u32::<LittleEndian>(to_u32(self.model.vlad.dim, "descriptor dimension")?)?;
        w.write_f64::<LittleEndian>(self.raster.grid_size)?;
        w.write_f64::<LittleEndian>(self.raster.half_extent)?;
        w.write_u32::<LittleEndian>(self.raster.density_cap)?;
        w.write_u32::<LittleEndian>(to_u32(self.raster.num_points, "point count")?)?;
        w.write_u8(self.raster.mask as u8)?;

        let shapes = tensor_shapes(&self.model);
        w.write_u32::<LittleEndian>(shapes.len() as u32)?;
        let mut model = self.model.clone();
        for (shape, t) in shapes.iter().zip(tensors_mut(&mut model)) {
            w.write_u32::<LittleEndian>(shape.len() as u32)?;
            for &d in shape {
                w.write_u32::<LittleEndian>(to_u32(d, "tensor dimension")?)?;
            }
            for &v in t.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let truncated = |_| Error::Format("checkpoint is truncated".into());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let group_order = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let kernel_size = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let layers = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if layers > 1024 {
            return Err(Error::Format(format!("implausible layer count {layers}")));
        }
        let mut channels = Vec::with_capacity(layers);
        for _ in 0..layers {
            channels.push(r.read_u32::<LittleEndian>().map_err(truncated)? as usize);
        }
        let net_config = NetConfig {
            group_order,
            channels,
            kernel_size,
        };
        net_config
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let clusters = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if clusters == 0 || dim != net_config.descriptor_dim() {
            return Err(Error::Format(
                "NetVLAD shape does not match the network".into(),
            ));
        }
        let raster = RasterConfig {
            grid_size: r.read_f64::<LittleEndian>().map_err(truncated)?,
            half_extent: r.read_f64::<LittleEndian>().map_err(truncated)?,
            density_cap: r.read_u32::<LittleEndian>().map_err(truncated)?,
            num_points: r.read_u32::<LittleEndian>().map_err(truncated)? as usize,
            mask: r.read_u8().map_err(truncated)? != 0,
        };
        raster
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;

        let mut model = Model {
            net: NetParams::zeros(&net_config),
            net_config,
            vlad: VladParams::zeros(clusters, dim),
        };
        let shapes = tensor_shapes(&model);
        let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if count != shapes.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {count}",
                shapes.len()
            )));
        }
        for (shape, t) in shapes.iter().zip(tensors_mut(&mut model)) {
            let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank.min(8) {
                dims.push(r.read_u32::<LittleEndian>().map_err(truncated)? as usize);
            }
            if &dims != shape {
                return Err(Error::Format(format!(
                    "tensor shape {dims:?}, expected {shape:?}"
                )));
            }
            for v in t.iter_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(truncated)? as f64;
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        if !model.is_finite() {
            return Err(Error::Format(
                "checkpoint holds non-finite parameters".into(),
            ));
        }
        Ok(Self { model, raster })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
