//! Metric learning with the lazy triplet loss.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{preprocess, Model, ModelCache, ModelGrads, RasterConfig};
use crate::netvlad::GlobalDescriptor;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 5.0;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_NEGATIVES: usize = 10;

/// `max_j max(0, m + d_pos - d_neg_j)`.
pub fn lazy_triplet_loss(d_pos: f64, d_negs: &[f64], margin: f64) -> Result<f64> {
    hardest_negative(d_pos, d_negs, margin).map(|(_, l)| l)
}

/// Index of the first negative attaining the loss, and the loss itself.
fn hardest_negative(d_pos: f64, d_negs: &[f64], margin: f64) -> Result<(usize, f64)> {
    if d_negs.is_empty() {
        return Err(Error::Empty(
            "lazy triplet loss needs at least one negative".into(),
        ));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &dn) in d_negs.iter().enumerate() {
        let x = margin + d_pos - dn;
        if x.is_nan() {
            return Ok((j, x));
        }
        let l = x.max(0.0);
        if l > best.1 {
            best = (j, l);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub negatives: usize,
    pub raster: RasterConfig,
    /// Random yaw in `[-π, π)` for every cloud of every batch.
    pub augment: bool,
    /// Caps the number of batches drawn per epoch; `None` uses every anchor.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            epsilon: DEFAULT_EPSILON,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 1,
            seed: 0,
            negatives: DEFAULT_NEGATIVES,
            raster: RasterConfig::default(),
            augment: true,
            batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Value(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Value(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Value(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.negatives == 0 {
            return Err(Error::Value(
                "need at least one negative per triplet".into(),
            ));
        }
        self.raster.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    /// Checks the geometric predicates and index distinctness.
    pub fn is_valid(&self, dataset: &Dataset, epsilon: f64) -> bool {
        let n = dataset.len();
        let pos = |i: usize| dataset.entries[i].1;
        let mut all = vec![self.anchor, self.positive];
        all.extend(&self.negatives);
        if all.iter().any(|&i| i >= n) {
            return false;
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return false;
        }
        let a = pos(self.anchor);
        a.distance(&pos(self.positive)) < epsilon
            && self
                .negatives
                .iter()
                .all(|&j| a.distance(&pos(j)) >= epsilon)
    }
}

/// One batch per qualifying anchor, in anchor order.
pub fn mine_triplets(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<TripletBatch>> {
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for a in 0..n {
        let pa = dataset.entries[a].1;
        let (mut positives, mut negatives) = (Vec::new(), Vec::new());
        for (j, (_, pj)) in dataset.entries.iter().enumerate() {
            if j == a {
                continue;
            }
            if pa.distance(pj) < config.epsilon {
                positives.push(j);
            } else {
                negatives.push(j);
            }
        }
        if positives.is_empty() || negatives.len() < config.negatives {
            continue;
        }
        let positive = positives[rng.gen_range(0..positives.len())];
        let mut picked: Vec<usize> = sample(&mut rng, negatives.len(), config.negatives)
            .into_iter()
            .map(|i| negatives[i])
            .collect();
        picked.sort_unstable();
        batches.push(TripletBatch {
            anchor: a,
            positive,
            negatives: picked,
        });
    }
    if batches.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no anchor has a positive within {} m and {} negatives",
            config.epsilon, config.negatives
        )));
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub steps: Vec<StepLoss>,
}

impl LossHistory {
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); epochs];
        for s in &self.steps {
            sums[s.epoch].0 += s.loss;
            sums[s.epoch].1 += 1;
        }
        sums.into_iter()
            .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.epoch, s.step, s.loss));
        }
        out
    }
}

fn unit_diff(a: &GlobalDescriptor, b: &GlobalDescriptor) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.0.iter().zip(&b.0).map(|(x, y)| x - y).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit = if d > 0.0 {
        diff.iter().map(|v| v / d).collect()
    } else {
        vec![0.0; diff.len()]
    };
    (d, unit)
}

/// Runs one triplet group: forward, loss and, when the loss is active, the
/// parameter gradient.
pub fn triplet_step(
    model: &Model,
    images: &[crate::bev::BevImage],
    margin: f64,
) -> Result<(f64, Option<ModelGrads>)> {
    let (anchor, positive, negatives) = match images {
        [a, p, rest @ ..] if !rest.is_empty() => (a, p, rest),
        _ => {
            return Err(Error::Empty(
                "a triplet group needs an anchor, a positive and a negative".into(),
            ))
        }
    };
    let (da, ca) = model.describe_cached(anchor)?;
    let (dp, cp) = model.describe_cached(positive)?;
    let (d_pos, u_pos) = unit_diff(&da, &dp);
    let mut negs = Vec::with_capacity(negatives.len());
    for img in negatives {
        negs.push(model.describe(img)?);
    }
    let d_negs: Vec<f64> = negs.iter().map(|n| da.distance(n)).collect();
    let (j, loss) = hardest_negative(d_pos, &d_negs, margin)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss became {loss}")));
    }
    if loss <= 0.0 {
        return Ok((loss, None));
    }
    let (dn, cn) = model.describe_cached(&negatives[j])?;
    let (_, u_neg) = unit_diff(&da, &dn);
    let grad_a: Vec<f64> = u_pos.iter().zip(&u_neg).map(|(p, n)| p - n).collect();
    let grad_p: Vec<f64> = u_pos.iter().map(|v| -v).collect();
    let mut total = ModelGrads::zeros_like(model);
    for (g, cache) in [(&grad_a, &ca), (&grad_p, &cp), (&u_neg, &cn)] {
        let cache: &ModelCache = cache;
        total.add(&model.backward(g, cache)?.0);
    }
    Ok((loss, Some(total)))
}

/// Plain gradient descent on the lazy triplet loss. Deterministic for a fixed
/// configuration.
pub fn train(
    dataset: &Dataset,
    model: &Model,
    config: &TrainConfig,
) -> Result<(Model, LossHistory)> {
    train_with_progress(dataset, model, config, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with_progress(
    dataset: &Dataset,
    model: &Model,
    config: &TrainConfig,
    mut progress: impl FnMut(&StepLoss),
) -> Result<(Model, LossHistory)> {
    config.validate()?;
    model.check()?;
    let mut model = model.clone();
    let mut history = LossHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.epochs {
        let mut batches = mine_triplets(dataset, config, rng.gen())?;
        batches.shuffle(&mut rng);
        if let Some(cap) = config.batches_per_epoch {
            batches.truncate(cap);
        }
        for (step, batch) in batches.iter().enumerate() {
            let mut ids = vec![batch.anchor, batch.positive];
            ids.extend(&batch.negatives);
            let images: Vec<_> = ids
                .iter()
                .map(|&i| {
                    let yaw = if config.augment {
                        rng.gen_range(-PI..PI)
                    } else {
                        0.0
                    };
                    preprocess(&dataset.entries[i].0, &config.raster, yaw, rng.gen())
                })
                .collect();
            let (loss, grads) = triplet_step(&model, &images, config.margin)?;
            if let Some(g) = grads {
                model.apply(&g, config.learning_rate);
                if !model.is_finite() {
                    return Err(Error::Divergence(format!(
                        "parameters became non-finite at epoch {epoch}, step {step}"
                    )));
                }
            }
            let s = StepLoss { epoch, step, loss };
            progress(&s);
            history.steps.push(s);
        }
    }
    Ok((model, history))
}
