//! NetVLAD aggregation of per-location descriptors into one global descriptor.
//!
//! For descriptors `x_i` and clusters `k`:
//! `a_k(x_i) = softmax_k(w_kᵀ x_i + b_k)`, `V(k) = Σ_i a_k(x_i) (x_i - c_k)`;
//! each `V(k)` is scaled to unit norm (zero rows stay zero), the rows are
//! concatenated and the result is scaled to unit norm (the zero vector is
//! returned as is).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::equivariant::LocalFeatureMap;
use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::params::ParamSet;

pub const DEFAULT_CLUSTERS: usize = 64;
/// Softmax sharpness used by [`init_vlad`].
pub const INIT_SHARPNESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    pub clusters: usize,
    pub dim: usize,
    /// `clusters × dim`, row-major.
    pub centers: Vec<f64>,
    /// `clusters × dim`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ParamSet for VladParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.centers, &self.weights, &self.biases]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.centers, &mut self.weights, &mut self.biases]
    }
}

impl VladParams {
    pub fn zeros(clusters: usize, dim: usize) -> Self {
        Self {
            clusters,
            dim,
            centers: vec![0.0; clusters * dim],
            weights: vec![0.0; clusters * dim],
            biases: vec![0.0; clusters],
        }
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn descriptor_len(&self) -> usize {
        self.clusters * self.dim
    }

    pub fn check(&self) -> Result<()> {
        let kd = self.clusters * self.dim;
        if self.clusters == 0
            || self.dim == 0
            || self.centers.len() != kd
            || self.weights.len() != kd
            || self.biases.len() != self.clusters
        {
            return Err(Error::Shape(format!(
                "NetVLAD parameters inconsistent with {}×{}",
                self.clusters, self.dim
            )));
        }
        Ok(())
    }
}

/// Centers `~ 0.1 · N(0, I)`, `w_k = 2 s c_k`, `b_k = -s ‖c_k‖²` with
/// `s = INIT_SHARPNESS`, so the initial assignment favours the nearest center.
pub fn init_vlad(clusters: usize, dim: usize, seed: u64) -> VladParams {
    assert!(
        clusters >= 1 && dim >= 1,
        "NetVLAD needs at least one cluster and dimension"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = VladParams::zeros(clusters, dim);
    for c in &mut p.centers {
        let z: f64 = StandardNormal.sample(&mut rng);
        *c = 0.1 * z;
    }
    for k in 0..clusters {
        let c = &p.centers[k * dim..(k + 1) * dim];
        let sq: f64 = c.iter().map(|v| v * v).sum();
        for d in 0..dim {
            p.weights[k * dim + d] = 2.0 * INIT_SHARPNESS * c[d];
        }
        p.biases[k] = -INIT_SHARPNESS * sq;
    }
    p
}

/// Data-driven alternative to [`init_vlad`]: centers from k-means
/// (k-means++ seeding, then `iters` Lloyd steps) over sampled local
/// descriptors, with weights and biases set from the centers as in
/// [`init_vlad`] using `sharpness`.
pub fn init_vlad_kmeans(
    samples: &[Vec<f64>],
    clusters: usize,
    sharpness: f64,
    iters: usize,
    seed: u64,
) -> Result<VladParams> {
    let dim = samples.first().map_or(0, |s| s.len());
    if clusters == 0 || dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Shape(
            "k-means needs equally sized, nonempty samples".into(),
        ));
    }
    if samples.len() < clusters {
        return Err(Error::InsufficientData(format!(
            "{} samples for {clusters} clusters",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = vec![samples[rng.gen_range(0..samples.len())].clone()];
    let mut nearest: Vec<f64> = samples.iter().map(|s| sq(s, &centers[0])).collect();
    while centers.len() < clusters {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = samples.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.gen_range(0..samples.len())
        };
        centers.push(samples[next].clone());
        let c = centers.last().unwrap();
        for (n, s) in nearest.iter_mut().zip(samples) {
            *n = n.min(sq(s, c));
        }
    }
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for s in samples {
            let k = (0..clusters)
                .min_by(|&a, &b| sq(s, &centers[a]).total_cmp(&sq(s, &centers[b])))
                .unwrap();
            counts[k] += 1;
            sums[k].iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        for k in 0..clusters {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|v| v / counts[k] as f64).collect();
            }
        }
    }
    let mut p = VladParams::zeros(clusters, dim);
    for (k, c) in centers.iter().enumerate() {
        let norm2: f64 = c.iter().map(|v| v * v).sum();
        for d in 0..dim {
            p.centers[k * dim + d] = c[d];
            p.weights[k * dim + d] = 2.0 * sharpness * c[d];
        }
        p.biases[k] = -sharpness * norm2;
    }
    Ok(p)
}

/// Unit-norm (or all-zero) global place descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Intermediate values of [`vlad_forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct VladCache {
    locations: usize,
    /// `dim × locations`, the input as laid out by [`LocalFeatureMap`].
    x: Vec<f64>,
    /// `clusters × locations`.
    assign: Vec<f64>,
    /// Intra-normalized rows, `clusters × dim`.
    normalized: Vec<f64>,
    row_norms: Vec<f64>,
    total_norm: f64,
    out: Vec<f64>,
}

impl VladCache {
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn vlad_forward(locals: &LocalFeatureMap, params: &VladParams) -> Result<GlobalDescriptor> {
    vlad_forward_cached(locals, params).map(|(d, _)| d)
}

pub fn vlad_forward_cached(
    locals: &LocalFeatureMap,
    params: &VladParams,
) -> Result<(GlobalDescriptor, VladCache)> {
    params.check()?;
    if locals.channels != params.dim {
        return Err(Error::Shape(format!(
            "local descriptors have {} channels, NetVLAD expects {}",
            locals.channels, params.dim
        )));
    }
    let (kc, d, n) = (params.clusters, params.dim, locals.locations());
    let x = &locals.values;

    // logits = W·X + b, softmax down each column
    let mut assign = vec![0.0; kc * n];
    for (k, row) in assign.chunks_mut(n.max(1)).enumerate() {
        row.fill(params.biases[k]);
    }
    gemm(
        1.0,
        Mat::new(&params.weights, kc, d),
        Mat::new(x, d, n),
        1.0,
        &mut assign,
    );
    for i in 0..n {
        let max = (0..kc)
            .map(|k| assign[k * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..kc {
            let e = (assign[k * n + i] - max).exp();
            assign[k * n + i] = e;
            sum += e;
        }
        for k in 0..kc {
            assign[k * n + i] /= sum;
        }
    }

    // V = A·Xᵀ - diag(Σ_i a_ki)·C
    let mut v = vec![0.0; kc * d];
    gemm(
        1.0,
        Mat::new(&assign, kc, n),
        Mat::new(x, d, n).t(),
        0.0,
        &mut v,
    );
    for k in 0..kc {
        let mass: f64 = assign[k * n..(k + 1) * n].iter().sum();
        for j in 0..d {
            v[k * d + j] -= mass * params.centers[k * d + j];
        }
    }

    let mut row_norms = vec![0.0; kc];
    for (k, row) in v.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        row_norms[k] = norm;
        if norm > 0.0 {
            row.iter_mut().for_each(|a| *a /= norm);
        }
    }
    let total_norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let out: Vec<f64> = if total_norm > 0.0 {
        v.iter().map(|a| a / total_norm).collect()
    } else {
        v.clone()
    };

    let cache = VladCache {
        locations: n,
        x: x.clone(),
        assign,
        normalized: v,
        row_norms,
        total_norm,
        out: out.clone(),
    };
    Ok((GlobalDescriptor(out), cache))
}

/// Gradients w.r.t. the parameters and the local descriptors.
pub fn vlad_backward(
    grad_out: &[f64],
    cache: &VladCache,
    params: &VladParams,
) -> Result<(VladParams, LocalFeatureMap)> {
    if cache.is_empty() {
        return Err(Error::State(
            "NetVLAD backward called without a cached forward pass".into(),
        ));
    }
    let (kc, d, n) = (params.clusters, params.dim, cache.locations);
    if grad_out.len() != kc * d || cache.x.len() != d * n {
        return Err(Error::Shape(
            "gradient does not match the cached forward pass".into(),
        ));
    }

    // through the global normalization
    let mut g = grad_out.to_vec();
    if cache.total_norm > 0.0 {
        let dot: f64 = cache.out.iter().zip(grad_out).map(|(o, g)| o * g).sum();
        for (gi, o) in g.iter_mut().zip(&cache.out) {
            *gi = (*gi - o * dot) / cache.total_norm;
        }
    }
    // through the per-cluster normalization, giving dL/dV
    for k in 0..kc {
        let row = &mut g[k * d..(k + 1) * d];
        let norm = cache.row_norms[k];
        if norm > 0.0 {
            let vn = &cache.normalized[k * d..(k + 1) * d];
            let dot: f64 = vn.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for (r, a) in row.iter_mut().zip(vn) {
                *r = (*r - a * dot) / norm;
            }
        } else {
            row.fill(0.0);
        }
    }
    let grad_v = g;

    let mut grads = VladParams::zeros(kc, d);
    // dL/da_ki = gV_k · (x_i - c_k)
    let mut grad_a = vec![0.0; kc * n];
    gemm(
        1.0,
        Mat::new(&grad_v, kc, d),
        Mat::new(&cache.x, d, n),
        0.0,
        &mut grad_a,
    );
    for k in 0..kc {
        let gv = &grad_v[k * d..(k + 1) * d];
        let gc: f64 = gv.iter().zip(params.center(k)).map(|(a, b)| a * b).sum();
        let mass: f64 = cache.assign[k * n..(k + 1) * n].iter().sum();
        grad_a[k * n..(k + 1) * n].iter_mut().for_each(|a| *a -= gc);
        for j in 0..d {
            grads.centers[k * d + j] = -mass * gv[j];
        }
    }
    // residual term: dL/dX += gVᵀ·A
    let mut grad_x = vec![0.0; d * n];
    gemm(
        1.0,
        Mat::new(&grad_v, kc, d).t(),
        Mat::new(&cache.assign, kc, n),
        0.0,
        &mut grad_x,
    );

    // softmax
    let mut grad_logits = vec![0.0; kc * n];
    for i in 0..n {
        let dot: f64 = (0..kc)
            .map(|k| cache.assign[k * n + i] * grad_a[k * n + i])
            .sum();
        for k in 0..kc {
            grad_logits[k * n + i] = cache.assign[k * n + i] * (grad_a[k * n + i] - dot);
        }
    }
    gemm(
        1.0,
        Mat::new(&grad_logits, kc, n),
        Mat::new(&cache.x, d, n).t(),
        0.0,
        &mut grads.weights,
    );
    for k in 0..kc {
        grads.biases[k] = grad_logits[k * n..(k + 1) * n].iter().sum();
    }
    gemm(
        1.0,
        Mat::new(&params.weights, kc, d).t(),
        Mat::new(&grad_logits, kc, n),
        1.0,
        &mut grad_x,
    );

    let side = (n as f64).sqrt().round() as usize;
    Ok((
        grads,
        LocalFeatureMap {
            channels: d,
            side,
            values: grad_x,
        },
    ))
}
