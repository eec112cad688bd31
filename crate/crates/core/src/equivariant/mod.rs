//! Cyclic-group equivariant convolutional network.
//!
//! The first layer lifts a BEV image to a function on `C_N × Z²`: slice `g`
//! correlates the image with the base filters rotated by `2πg/N`. Hidden
//! layers correlate every input slice `h` with filter `(h - g) mod N` rotated
//! by `2πg/N`. Rotating the input by `2π/N` then rotates every output slice
//! spatially and shifts the group axis by one. Filter rotation is an exact
//! pixel permutation for quarter turns, a ring shift of the taps for eighth
//! turns, and bilinear otherwise.
//!
//! All convolutions are same-size correlations with zero padding, lowered to
//! im2col + GEMM. Every layer in [`forward`] is followed by `max(0, ·)`.

mod conv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bev::{bilinear_rotation_taps, quarter_turns, rotate_buffer, rotate_quarter, BevImage};
use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::params::ParamSet;
use std::cell::RefCell;

use conv::{col2im, im2col_into};

pub const DEFAULT_GROUP_ORDER: usize = 4;
pub const DEFAULT_CHANNELS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub group_order: usize,
    /// Output channels of each layer; the first entry is the lifting layer.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            group_order: DEFAULT_GROUP_ORDER,
            channels: DEFAULT_CHANNELS.to_vec(),
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }
}

impl NetConfig {
    /// Width of the per-location descriptors handed to NetVLAD.
    pub fn descriptor_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_order < 2 {
            return Err(Error::Shape(format!(
                "group order {} < 2",
                self.group_order
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Shape(format!(
                "kernel size {} is even",
                self.kernel_size
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Shape(
                "need at least one layer with nonzero width".into(),
            ));
        }
        Ok(())
    }
}

/// Filter bank and bias of one layer.
///
/// `filters` is laid out `[out][in][in_group][k][k]`, where `in_group` is 1
/// for the lifting layer and `N` for group layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_group: usize,
    pub kernel_size: usize,
    pub filters: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        in_group: usize,
        kernel_size: usize,
    ) -> Self {
        let len = out_channels * in_channels * in_group * kernel_size * kernel_size;
        Self {
            in_channels,
            out_channels,
            in_group,
            kernel_size,
            filters: vec![0.0; len],
            bias: vec![0.0; out_channels],
        }
    }

    fn filter_index(&self, co: usize, ci: usize, gi: usize) -> usize {
        ((co * self.in_channels + ci) * self.in_group + gi) * self.kernel_size * self.kernel_size
    }

    pub fn filter(&self, co: usize, ci: usize, gi: usize) -> &[f64] {
        let kk = self.kernel_size * self.kernel_size;
        &self.filters[self.filter_index(co, ci, gi)..][..kk]
    }

    pub fn filter_mut(&mut self, co: usize, ci: usize, gi: usize) -> &mut [f64] {
        let kk = self.kernel_size * self.kernel_size;
        let i = self.filter_index(co, ci, gi);
        &mut self.filters[i..][..kk]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

impl ParamSet for NetParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.filters.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.filters.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl NetParams {
    pub fn zeros(config: &NetConfig) -> Self {
        let mut layers = Vec::with_capacity(config.channels.len());
        let mut in_channels = 1;
        for (i, &out) in config.channels.iter().enumerate() {
            let in_group = if i == 0 { 1 } else { config.group_order };
            layers.push(LayerParams::zeros(
                in_channels,
                out,
                in_group,
                config.kernel_size,
            ));
            in_channels = out;
        }
        Self { layers }
    }

    /// Checks the parameter shapes against `config`.
    pub fn check(&self, config: &NetConfig) -> Result<()> {
        config.validate()?;
        let expected = Self::zeros(config);
        if self.layers.len() != expected.layers.len() {
            return Err(Error::Shape(format!(
                "{} layers, config has {}",
                self.layers.len(),
                expected.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&expected.layers).enumerate() {
            let same = a.in_channels == b.in_channels
                && a.out_channels == b.out_channels
                && a.in_group == b.in_group
                && a.kernel_size == b.kernel_size
                && a.filters.len() == b.filters.len()
                && a.bias.len() == b.bias.len();
            if !same {
                return Err(Error::Shape(format!("layer {i} does not match the config")));
            }
        }
        Ok(())
    }
}

/// He-style initialization: filters `~ N(0, 2 / fan_in)`, biases zero.
pub fn init_params(config: &NetConfig, seed: u64) -> NetParams {
    config.validate().expect("invalid network config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::zeros(config);
    for layer in &mut params.layers {
        let fan_in = layer.in_channels * layer.in_group * layer.kernel_size * layer.kernel_size;
        let scale = (2.0 / fan_in as f64).sqrt();
        for w in &mut layer.filters {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = scale * z;
        }
    }
    params
}

/// Feature map over `C_N × channels × side × side`, stored in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFeatureMap {
    pub group_order: usize,
    pub channels: usize,
    pub side: usize,
    pub values: Vec<f64>,
}

impl GroupFeatureMap {
    pub fn zeros(group_order: usize, channels: usize, side: usize) -> Self {
        Self {
            group_order,
            channels,
            side,
            values: vec![0.0; group_order * channels * side * side],
        }
    }

    pub fn plane(&self, g: usize, c: usize) -> &[f64] {
        let hw = self.side * self.side;
        &self.values[(g * self.channels + c) * hw..][..hw]
    }

    pub fn get(&self, g: usize, c: usize, row: usize, col: usize) -> f64 {
        self.plane(g, c)[row * self.side + col]
    }

    /// Rotates every plane about the image center.
    pub fn rotate_spatial(&self, angle: f64) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for plane in self.values.chunks(self.side * self.side) {
            values.extend(rotate_buffer(plane, self.side, angle));
        }
        Self { values, ..*self }
    }

    /// Cyclic shift of the group axis: new slice `g` is old slice `g - k`.
    pub fn shift_group(&self, k: usize) -> Self {
        let n = self.group_order;
        let slice = self.channels * self.side * self.side;
        let mut values = vec![0.0; self.values.len()];
        for g in 0..n {
            let src = (g + n - k % n) % n;
            values[g * slice..(g + 1) * slice]
                .copy_from_slice(&self.values[src * slice..(src + 1) * slice]);
        }
        Self { values, ..*self }
    }

    /// The induced action of rotating the input by `k` steps of `2π/N`.
    pub fn group_action(&self, k: usize) -> Self {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.group_order as f64;
        self.rotate_spatial(angle).shift_group(k)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-location descriptors, `channels × side × side`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    pub channels: usize,
    pub side: usize,
    pub values: Vec<f64>,
}

impl LocalFeatureMap {
    pub fn new(channels: usize, side: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), channels * side * side);
        Self {
            channels,
            side,
            values,
        }
    }

    pub fn locations(&self) -> usize {
        self.side * self.side
    }

    /// Descriptor at flat location `i`.
    pub fn descriptor(&self, i: usize) -> Vec<f64> {
        let hw = self.locations();
        (0..self.channels)
            .map(|c| self.values[c * hw + i])
            .collect()
    }
}

/// Perimeter positions of each concentric square ring of a `k × k` kernel,
/// walked top row left to right, then down, then back.
fn kernel_rings(k: usize) -> Vec<Vec<usize>> {
    let p = k / 2;
    (1..=p)
        .map(|j| {
            let (lo, hi) = (p - j, p + j);
            let mut ring = Vec::with_capacity(8 * j);
            ring.extend((lo..hi).map(|c| lo * k + c));
            ring.extend((lo..hi).map(|r| r * k + hi));
            ring.extend((lo + 1..=hi).rev().map(|c| hi * k + c));
            ring.extend((lo + 1..=hi).rev().map(|r| r * k + lo));
            ring
        })
        .collect()
}

/// Rotation of a kernel by `steps` eighth turns as a permutation: each ring
/// of `8j` pixels shifts by `j` positions per step. Two steps equal the exact
/// quarter turn.
fn eighth_turn_taps(k: usize, steps: usize) -> Vec<Vec<(usize, f64)>> {
    let mut src = (0..k * k).collect::<Vec<_>>();
    for ring in kernel_rings(k) {
        let len = ring.len();
        let shift = (len / 8) * steps % len;
        for (i, &dst) in ring.iter().enumerate() {
            src[dst] = ring[(i + len - shift) % len];
        }
    }
    src.into_iter().map(|s| vec![(s, 1.0)]).collect()
}

/// For each group element, the rotated-kernel taps: `taps[g][dst]` lists
/// `(src, weight)` pairs so that `rotated[dst] = Σ weight · base[src]`.
/// Multiples of π/4 are pixel permutations; other angles are bilinear.
fn kernel_taps(group_order: usize, k: usize) -> Vec<Vec<Vec<(usize, f64)>>> {
    (0..group_order)
        .map(|g| {
            let angle = 2.0 * std::f64::consts::PI * g as f64 / group_order as f64;
            if let Some(turns) = quarter_turns(angle) {
                let idx: Vec<f64> = (0..k * k).map(|i| i as f64).collect();
                return rotate_quarter(&idx, k, turns)
                    .into_iter()
                    .map(|s| vec![(s as usize, 1.0)])
                    .collect();
            }
            if (8 * g) % group_order == 0 {
                return eighth_turn_taps(k, 8 * g / group_order);
            }
            bilinear_rotation_taps(k, angle)
        })
        .collect()
}

/// One layer lowered to `out = W · im2col(input) + b`, where `W` has
/// `N · out_channels` rows and `in_group · in_channels · k²` columns.
struct Lowered<'a> {
    layer: &'a LayerParams,
    n: usize,
    taps: Vec<Vec<Vec<(usize, f64)>>>,
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with this thread's im2col buffer, which is kept between calls so
/// large layers do not pay for fresh pages every time.
fn with_scratch<T>(f: impl FnOnce(&mut Vec<f64>) -> T) -> T {
    SCRATCH.with(|s| f(&mut s.borrow_mut()))
}

impl<'a> Lowered<'a> {
    fn new(layer: &'a LayerParams, group_order: usize) -> Self {
        Self {
            layer,
            n: group_order,
            taps: kernel_taps(group_order, layer.kernel_size),
        }
    }

    fn rows(&self) -> usize {
        self.n * self.layer.out_channels
    }

    fn cols(&self) -> usize {
        let l = self.layer;
        l.in_group * l.in_channels * l.kernel_size * l.kernel_size
    }

    /// Calls `f(row, col0, filter_offset, g)` for every (output slice, output
    /// channel, input slice, input channel) block of the weight matrix.
    fn for_each_block(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let l = self.layer;
        let kk = l.kernel_size * l.kernel_size;
        for g in 0..self.n {
            for co in 0..l.out_channels {
                let row = g * l.out_channels + co;
                for h in 0..l.in_group {
                    let fg = if l.in_group == 1 {
                        0
                    } else {
                        (h + self.n - g) % self.n
                    };
                    for ci in 0..l.in_channels {
                        let col0 = (h * l.in_channels + ci) * kk;
                        f(row, col0, l.filter_index(co, ci, fg), g);
                    }
                }
            }
        }
    }

    fn weight_matrix(&self) -> Vec<f64> {
        let cols = self.cols();
        let mut w = vec![0.0; self.rows() * cols];
        let filters = &self.layer.filters;
        self.for_each_block(|row, col0, f0, g| {
            for (dst, taps) in self.taps[g].iter().enumerate() {
                w[row * cols + col0 + dst] = taps.iter().map(|&(s, wt)| wt * filters[f0 + s]).sum();
            }
        });
        w
    }

    /// Adjoint of [`Self::weight_matrix`].
    fn filter_grad(&self, grad_w: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut gf = vec![0.0; self.layer.filters.len()];
        self.for_each_block(|row, col0, f0, g| {
            for (dst, taps) in self.taps[g].iter().enumerate() {
                let gw = grad_w[row * cols + col0 + dst];
                for &(s, wt) in taps {
                    gf[f0 + s] += wt * gw;
                }
            }
        });
        gf
    }

    fn forward(&self, input: &[f64], side: usize, relu: bool) -> Vec<f64> {
        let l = self.layer;
        let hw = side * side;
        let w = self.weight_matrix();
        let mut out = vec![0.0; self.rows() * hw];
        for (r, plane) in out.chunks_mut(hw).enumerate() {
            plane.fill(l.bias[r % l.out_channels]);
        }
        with_scratch(|x| {
            im2col_into(input, l.in_group * l.in_channels, side, l.kernel_size, x);
            gemm(
                1.0,
                Mat::new(&w, self.rows(), self.cols()),
                Mat::new(x, self.cols(), hw),
                1.0,
                &mut out,
            );
        });
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }

    /// Returns the layer gradients and the gradient w.r.t. `input`.
    fn backward(
        &self,
        input: &[f64],
        output: &[f64],
        grad_out: &[f64],
        side: usize,
        relu: bool,
    ) -> (LayerParams, Vec<f64>) {
        let l = self.layer;
        let hw = side * side;
        let grad_pre: Vec<f64> = if relu {
            grad_out
                .iter()
                .zip(output)
                .map(|(g, &o)| if o > 0.0 { *g } else { 0.0 })
                .collect()
        } else {
            grad_out.to_vec()
        };
        let mut grads =
            LayerParams::zeros(l.in_channels, l.out_channels, l.in_group, l.kernel_size);
        for (r, plane) in grad_pre.chunks(hw).enumerate() {
            grads.bias[r % l.out_channels] += plane.iter().sum::<f64>();
        }
        let mut grad_w = vec![0.0; self.rows() * self.cols()];
        let w = self.weight_matrix();
        let grad_in = with_scratch(|x| {
            im2col_into(input, l.in_group * l.in_channels, side, l.kernel_size, x);
            gemm(
                1.0,
                Mat::new(&grad_pre, self.rows(), hw),
                Mat::new(x, self.cols(), hw).t(),
                0.0,
                &mut grad_w,
            );
            // reuse the buffer for the column gradient
            gemm(
                1.0,
                Mat::new(&w, self.rows(), self.cols()).t(),
                Mat::new(&grad_pre, self.rows(), hw),
                0.0,
                x,
            );
            col2im(x, l.in_group * l.in_channels, side, l.kernel_size)
        });
        grads.filters = self.filter_grad(&grad_w);
        (grads, grad_in)
    }
}

fn check_layer(layer: &LayerParams, in_group: usize, in_channels: usize) -> Result<()> {
    let kk = layer.kernel_size * layer.kernel_size;
    if layer.kernel_size % 2 == 0
        || layer.in_group != in_group
        || layer.in_channels != in_channels
        || layer.filters.len() != layer.out_channels * in_channels * in_group * kk
        || layer.bias.len() != layer.out_channels
    {
        return Err(Error::Shape(format!(
            "layer expects {}×{} input slices, got {in_group}×{in_channels}",
            layer.in_group, layer.in_channels
        )));
    }
    Ok(())
}

/// Lifting correlation of a single-channel image to `N` group slices (no
/// activation).
pub fn lift_conv(
    img: &BevImage,
    layer: &LayerParams,
    group_order: usize,
) -> Result<GroupFeatureMap> {
    check_layer(layer, 1, 1)?;
    let side = img.side();
    let values = Lowered::new(layer, group_order).forward(img.pixels(), side, false);
    Ok(GroupFeatureMap {
        group_order,
        channels: layer.out_channels,
        side,
        values,
    })
}

/// Group correlation over `C_N` followed by `max(0, ·)`.
pub fn group_conv(fm: &GroupFeatureMap, layer: &LayerParams) -> Result<GroupFeatureMap> {
    check_layer(layer, fm.group_order, fm.channels)?;
    let values = Lowered::new(layer, fm.group_order).forward(&fm.values, fm.side, true);
    Ok(GroupFeatureMap {
        group_order: fm.group_order,
        channels: layer.out_channels,
        side: fm.side,
        values,
    })
}

/// Activations recorded by [`forward_cached`]: the input image followed by
/// every layer output.
#[derive(Debug, Clone, Default)]
pub struct NetCache {
    group_order: usize,
    side: usize,
    activations: Vec<Vec<f64>>,
}

impl NetCache {
    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

/// Runs the network: lifting layer, then each group layer, all rectified.
pub fn forward(img: &BevImage, params: &NetParams, config: &NetConfig) -> Result<GroupFeatureMap> {
    forward_cached(img, params, config).map(|(fm, _)| fm)
}

pub fn forward_cached(
    img: &BevImage,
    params: &NetParams,
    config: &NetConfig,
) -> Result<(GroupFeatureMap, NetCache)> {
    params.check(config)?;
    let n = config.group_order;
    let side = img.side();
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(img.pixels().to_vec());
    for layer in &params.layers {
        let out = Lowered::new(layer, n).forward(activations.last().unwrap(), side, true);
        activations.push(out);
    }
    let fm = GroupFeatureMap {
        group_order: n,
        channels: config.descriptor_dim(),
        side,
        values: activations.last().unwrap().clone(),
    };
    Ok((
        fm,
        NetCache {
            group_order: n,
            side,
            activations,
        },
    ))
}

/// Gradients of a scalar loss w.r.t. the parameters and the input image,
/// given its gradient w.r.t. the network output.
pub fn backward(
    grad_out: &GroupFeatureMap,
    cache: &NetCache,
    params: &NetParams,
) -> Result<(NetParams, Vec<f64>)> {
    if cache.is_empty() {
        return Err(Error::State(
            "network backward called without a cached forward pass".into(),
        ));
    }
    if cache.activations.len() != params.layers.len() + 1
        || grad_out.values.len() != cache.activations.last().unwrap().len()
        || grad_out.side != cache.side
    {
        return Err(Error::Shape(
            "gradient does not match the cached forward pass".into(),
        ));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut grad = grad_out.values.clone();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let lowered = Lowered::new(layer, cache.group_order);
        let (g, gin) = lowered.backward(
            &cache.activations[i],
            &cache.activations[i + 1],
            &grad,
            cache.side,
            true,
        );
        grads.push(g);
        grad = gin;
    }
    grads.reverse();
    Ok((NetParams { layers: grads }, grad))
}

/// Max over the group axis at every location and channel.
pub fn group_pool(fm: &GroupFeatureMap) -> LocalFeatureMap {
    let slice = fm.channels * fm.side * fm.side;
    let mut values = fm.values[..slice].to_vec();
    for g in 1..fm.group_order {
        for (v, &x) in values
            .iter_mut()
            .zip(&fm.values[g * slice..(g + 1) * slice])
        {
            if x > *v {
                *v = x;
            }
        }
    }
    LocalFeatureMap {
        channels: fm.channels,
        side: fm.side,
        values,
    }
}

/// Routes each pooled gradient to the first group index attaining the max.
pub fn group_pool_backward(grad: &LocalFeatureMap, fm: &GroupFeatureMap) -> GroupFeatureMap {
    let slice = fm.channels * fm.side * fm.side;
    let mut out = GroupFeatureMap::zeros(fm.group_order, fm.channels, fm.side);
    for i in 0..slice {
        let mut best = 0;
        for g in 1..fm.group_order {
            if fm.values[g * slice + i] > fm.values[best * slice + i] {
                best = g;
            }
        }
        out.values[best * slice + i] = grad.values[i];
    }
    out
}
