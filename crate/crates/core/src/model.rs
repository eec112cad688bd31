//! The full place descriptor: preprocessing, equivariant network, group
//! pooling and NetVLAD, with the backward pass through all of them.

use crate::bev::{
    apply_circular_mask, rasterize, BevImage, DEFAULT_DENSITY_CAP, DEFAULT_GRID_SIZE,
};
use crate::equivariant::{
    self, group_pool, group_pool_backward, GroupFeatureMap, NetCache, NetConfig, NetParams,
};
use crate::error::{Error, Result};
use crate::ingest::{
    crop_window, downsample, rotate_cloud_yaw, PointCloud, DEFAULT_HALF_EXTENT, DEFAULT_NUM_POINTS,
};
use crate::netvlad::{self, init_vlad, GlobalDescriptor, VladCache, VladParams, DEFAULT_CLUSTERS};
use crate::params::ParamSet;

/// How a point cloud becomes a network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub grid_size: f64,
    pub half_extent: f64,
    pub density_cap: u32,
    pub num_points: usize,
    pub mask: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            half_extent: DEFAULT_HALF_EXTENT,
            density_cap: DEFAULT_DENSITY_CAP,
            num_points: DEFAULT_NUM_POINTS,
            mask: true,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_size > 0.0
            && self.half_extent > 0.0
            && self.grid_size.is_finite()
            && self.half_extent.is_finite())
        {
            return Err(Error::Value(
                "grid size and half extent must be positive".into(),
            ));
        }
        if self.density_cap == 0 || self.num_points == 0 {
            return Err(Error::Value(
                "density cap and point count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Crop, downsample, optionally rotate about z, rasterize and mask.
pub fn preprocess(cloud: &PointCloud, cfg: &RasterConfig, yaw: f64, seed: u64) -> BevImage {
    let mut c = downsample(&crop_window(cloud, cfg.half_extent), cfg.num_points, seed);
    if yaw != 0.0 {
        c = rotate_cloud_yaw(&c, yaw);
    }
    let img = rasterize(&c, cfg.grid_size, cfg.half_extent, cfg.density_cap);
    if cfg.mask {
        apply_circular_mask(&img)
    } else {
        img
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net_config: NetConfig,
    pub net: NetParams,
    pub vlad: VladParams,
}

/// Gradients with the same layout as [`Model`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub net: NetParams,
    pub vlad: VladParams,
}

#[derive(Debug, Clone, Default)]
pub struct ModelCache {
    net: NetCache,
    features: Option<GroupFeatureMap>,
    vlad: VladCache,
}

impl Model {
    pub fn init(net_config: NetConfig, clusters: usize, seed: u64) -> Result<Self> {
        net_config.validate()?;
        if clusters == 0 {
            return Err(Error::Value("NetVLAD needs at least one cluster".into()));
        }
        let net = equivariant::init_params(&net_config, seed);
        let vlad = init_vlad(clusters, net_config.descriptor_dim(), seed.wrapping_add(1));
        Ok(Self {
            net_config,
            net,
            vlad,
        })
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::init(NetConfig::default(), DEFAULT_CLUSTERS, seed)
            .expect("default configuration is valid")
    }

    pub fn descriptor_len(&self) -> usize {
        self.vlad.descriptor_len()
    }

    pub fn check(&self) -> Result<()> {
        self.net_config.validate()?;
        self.net.check(&self.net_config)?;
        self.vlad.check()?;
        if self.vlad.dim != self.net_config.descriptor_dim() {
            return Err(Error::Shape(
                "NetVLAD dimension differs from the network output".into(),
            ));
        }
        Ok(())
    }

    pub fn describe(&self, img: &BevImage) -> Result<GlobalDescriptor> {
        let fm = equivariant::forward(img, &self.net, &self.net_config)?;
        netvlad::vlad_forward(&group_pool(&fm), &self.vlad)
    }

    pub fn describe_cached(&self, img: &BevImage) -> Result<(GlobalDescriptor, ModelCache)> {
        let (fm, net) = equivariant::forward_cached(img, &self.net, &self.net_config)?;
        let (d, vlad) = netvlad::vlad_forward_cached(&group_pool(&fm), &self.vlad)?;
        Ok((
            d,
            ModelCache {
                net,
                features: Some(fm),
                vlad,
            },
        ))
    }

    pub fn describe_cloud(
        &self,
        cloud: &PointCloud,
        raster: &RasterConfig,
        seed: u64,
    ) -> Result<GlobalDescriptor> {
        self.describe(&preprocess(cloud, raster, 0.0, seed))
    }

    /// Gradients w.r.t. all parameters and the input image.
    pub fn backward(&self, grad_out: &[f64], cache: &ModelCache) -> Result<(ModelGrads, Vec<f64>)> {
        let fm = cache.features.as_ref().ok_or_else(|| {
            Error::State("model backward called without a cached forward pass".into())
        })?;
        let (vlad, grad_locals) = netvlad::vlad_backward(grad_out, &cache.vlad, &self.vlad)?;
        let grad_fm = group_pool_backward(&grad_locals, fm);
        let (net, grad_img) = equivariant::backward(&grad_fm, &cache.net, &self.net)?;
        Ok((ModelGrads { net, vlad }, grad_img))
    }

    /// Plain gradient step `θ ← θ − lr · g`.
    pub fn apply(&mut self, grads: &ModelGrads, lr: f64) {
        self.net.axpy(-lr, &grads.net);
        self.vlad.axpy(-lr, &grads.vlad);
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.vlad.is_finite()
    }
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let mut net = model.net.clone();
        net.scale(0.0);
        Self {
            net,
            vlad: VladParams::zeros(model.vlad.clusters, model.vlad.dim),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        self.net.axpy(1.0, &other.net);
        self.vlad.axpy(1.0, &other.vlad);
    }
}
