//! Run configuration: command-line flags over an optional TOML file over
//! built-in defaults.

use std::path::{Path, PathBuf};

use bevplace::equivariant::{
    NetConfig, DEFAULT_CHANNELS, DEFAULT_GROUP_ORDER, DEFAULT_KERNEL_SIZE,
};
use bevplace::model::RasterConfig;
use bevplace::netvlad::DEFAULT_CLUSTERS;
use bevplace::trainer::{
    TrainConfig, DEFAULT_EPSILON, DEFAULT_LEARNING_RATE, DEFAULT_MARGIN, DEFAULT_NEGATIVES,
};
use clap::Args;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Flags shared by every subcommand. Each one may also be set in the
/// `--config` file under the same name with underscores.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Global seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory (velodyne/ and poses.txt)
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Query dataset directory
    #[arg(long, global = true)]
    pub queries: Option<PathBuf>,
    /// Model checkpoint file
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Descriptor database file
    #[arg(long, global = true)]
    pub db: Option<PathBuf>,
    /// Directory holding mappings.csv and global_mapping.csv
    #[arg(long, global = true)]
    pub mappings: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single velodyne scan for `query`
    #[arg(long, global = true)]
    pub scan: Option<PathBuf>,
    /// Revisit radius, meters
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// BEV cell size, meters
    #[arg(long, global = true)]
    pub grid_size: Option<f64>,
    #[arg(long, global = true)]
    pub half_extent: Option<f64>,
    #[arg(long, global = true)]
    pub density_cap: Option<u32>,
    #[arg(long, global = true)]
    pub num_points: Option<usize>,
    /// Order N of the rotation group
    #[arg(long, global = true)]
    pub group_order: Option<usize>,
    /// Layer widths, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// NetVLAD cluster count
    #[arg(long, global = true)]
    pub clusters: Option<usize>,
    /// Triplet margin
    #[arg(long, global = true)]
    pub margin: Option<f64>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Cap on triplet batches per epoch
    #[arg(long, global = true)]
    pub batches_per_epoch: Option<usize>,
    /// Synthetic database frame count
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    /// Synthetic frame spacing, meters
    #[arg(long, global = true)]
    pub spacing: Option<f64>,
    /// Synthetic query frame count
    #[arg(long, global = true)]
    pub query_count: Option<usize>,
    /// Largest query offset from its source frame, meters
    #[arg(long, global = true)]
    pub query_offset: Option<f64>,
    /// Give synthetic queries a uniform random heading
    #[arg(long, global = true)]
    pub random_yaw: Option<bool>,
    /// Matches reported by `query`
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Threshold count for `eval-pr`
    #[arg(long, global = true)]
    pub thresholds: Option<usize>,
}

macro_rules! merge {
    ($self:ident, $other:ident; $($f:ident),*) => {
        Settings { $($f: $self.$f.or($other.$f)),* }
    };
}

impl Settings {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fields set here win; unset ones come from `lower`.
    pub fn over(self, lower: Settings) -> Settings {
        merge!(self, lower; seed, data, queries, checkpoint, db, mappings, out, scan, epsilon,
            grid_size, half_extent, density_cap, num_points, group_order, channels, clusters,
            margin, learning_rate, epochs, batches_per_epoch, frames, spacing, query_count,
            query_offset, random_yaw, k, thresholds)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(DEFAULT_EPSILON)
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }

    pub fn raster(&self) -> RasterConfig {
        let d = RasterConfig::default();
        RasterConfig {
            grid_size: self.grid_size.unwrap_or(d.grid_size),
            half_extent: self.half_extent.unwrap_or(d.half_extent),
            density_cap: self.density_cap.unwrap_or(d.density_cap),
            num_points: self.num_points.unwrap_or(d.num_points),
            mask: true,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            group_order: self.group_order.unwrap_or(DEFAULT_GROUP_ORDER),
            channels: self
                .channels
                .clone()
                .unwrap_or_else(|| DEFAULT_CHANNELS.to_vec()),
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }

    pub fn clusters(&self) -> usize {
        self.clusters.unwrap_or(DEFAULT_CLUSTERS)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin.unwrap_or(DEFAULT_MARGIN),
            epsilon: self.epsilon(),
            learning_rate: self.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
            epochs: self.epochs.unwrap_or(1),
            seed: self.seed(),
            negatives: DEFAULT_NEGATIVES,
            raster: self.raster(),
            augment: true,
            batches_per_epoch: self.batches_per_epoch,
        }
    }
}
