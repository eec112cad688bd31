//! Metric position of a query from its feature distances to nearby
//! database frames.
//!
//! Each database frame gets a mapping `feat = α (1 - exp(-geo^γ / β))`
//! from geometric to feature distance. Inverting it for the frames around
//! the top-1 match gives range estimates, and a least-squares
//! trilateration turns those into a 2D position.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::netvlad::GlobalDescriptor;
use crate::retrieval::{query_topk, DescriptorDb};

/// Clamp margin below the saturation level `α`.
pub const SATURATION_DELTA: f64 = 1e-3;
/// Smallest singular value of the centered reference positions accepted as
/// non-collinear.
pub const COLLINEAR_TOLERANCE: f64 = 1e-6;
pub const MIN_FIT_SAMPLES: usize = 10;

const FIT_MAX_ITERS: usize = 100;
const FIT_STEP_TOL: f64 = 1e-9;
const TRI_MAX_ITERS: usize = 50;
const TRI_STEP_TOL: f64 = 1e-9;
const TRI_ACCEPT_TOL: f64 = 1e-6;
const ZERO_RANGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingModel {
    pub frame_id: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl MappingModel {
    pub fn new(frame_id: u64, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let m = Self {
            frame_id,
            alpha,
            beta,
            gamma,
        };
        if [alpha, beta, gamma]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(m)
        } else {
            Err(Error::Fit(format!(
                "parameters must be finite and positive: α={alpha}, β={beta}, γ={gamma}"
            )))
        }
    }

    /// Feature distance predicted at geometric distance `geo`.
    pub fn feature_distance(&self, geo: f64) -> f64 {
        -self.alpha * (-geo.max(0.0).powf(self.gamma) / self.beta).exp_m1()
    }

    /// Geometric distance at which the curve reaches `1 - 1/e` of `α`.
    pub fn knee(&self) -> f64 {
        self.beta.powf(1.0 / self.gamma)
    }
}

/// Geometric distance for a feature distance, and whether it was clamped at
/// the saturation limit `α (1 - δ)`.
pub fn invert_distance(model: &MappingModel, feat_dist: f64) -> (f64, bool) {
    let limit = model.alpha * (1.0 - SATURATION_DELTA);
    let (f, saturated) = if feat_dist >= limit {
        (limit, true)
    } else {
        (feat_dist.max(0.0), false)
    };
    let geo = (-model.beta * (-f / model.alpha).ln_1p()).powf(1.0 / model.gamma);
    (geo, saturated)
}

fn sse(samples: &[(f64, f64)], a: f64, b: f64, g: f64) -> f64 {
    samples
        .iter()
        .map(|&(d, y)| {
            let r = -a * (-d.powf(g) / b).exp_m1() - y;
            r * r
        })
        .sum()
}

/// Least-squares `α` for fixed `(β, γ)`; the model is linear in `α`.
fn best_alpha(samples: &[(f64, f64)], b: f64, g: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(d, y) in samples {
        let s = -(-d.powf(g) / b).exp_m1();
        num += s * y;
        den += s * s;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Fits the mapping to `(geo_dist, feat_dist)` samples: grid search over
/// `(γ, β)` with `α` in closed form, then Gauss–Newton in log-parameters.
pub fn fit_mapping(frame_id: u64, samples: &[(f64, f64)]) -> Result<MappingModel> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::Fit(format!(
            "{} samples, need at least {MIN_FIT_SAMPLES}",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|&(d, y)| !(d.is_finite() && y.is_finite() && d >= 0.0 && y >= 0.0))
    {
        return Err(Error::Fit("samples must be finite and nonnegative".into()));
    }
    let positive: Vec<f64> = samples.iter().map(|s| s.0).filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Fit("all samples are at zero distance".into()));
    }
    let d_min = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let d_max = positive.iter().cloned().fold(0.0, f64::max);

    // coarse grid, parameterized by the knee distance so β tracks γ
    let mut best = (f64::INFINITY, 1.0, 1.0, 1.0);
    let knees = 48;
    let (lo, hi) = ((d_min / 4.0).ln(), (d_max * 4.0).ln());
    for gi in 0..=25 {
        let g = 0.5 + 0.1 * gi as f64;
        for ki in 0..knees {
            let knee = (lo + (hi - lo) * ki as f64 / (knees - 1) as f64).exp();
            let b = knee.powf(g);
            let a = best_alpha(samples, b, g);
            if a <= 0.0 {
                continue;
            }
            let e = sse(samples, a, b, g);
            if e < best.0 {
                best = (e, a, b, g);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Fit(
            "no positive saturation level fits the samples".into(),
        ));
    }

    let mut theta = Vector3::new(best.1.ln(), best.2.ln(), best.3.ln());
    let mut cost = best.0;
    for _ in 0..FIT_MAX_ITERS {
        let (a, b, g) = (theta[0].exp(), theta[1].exp(), theta[2].exp());
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for &(d, y) in samples {
            let u = if d > 0.0 { d.powf(g) / b } else { 0.0 };
            let e = (-u).exp();
            let f = a * (1.0 - e);
            let du_dlng = if d > 0.0 { u * d.ln() * g } else { 0.0 };
            let j = Vector3::new(f, -a * e * u, a * e * du_dlng);
            jtj += j * j.transpose();
            jtr += j * (f - y);
        }
        let step = match jtj.lu().solve(&(-jtr)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => break,
        };
        // halve until the cost does not increase
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = theta + step * t;
            let c = sse(samples, cand[0].exp(), cand[1].exp(), cand[2].exp());
            if c <= cost {
                accepted = Some((cand, c));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, c)) = accepted else { break };
        let moved = (cand - theta).norm();
        theta = cand;
        cost = c;
        if moved < FIT_STEP_TOL {
            break;
        }
    }

    let model = MappingModel::new(frame_id, theta[0].exp(), theta[1].exp(), theta[2].exp())?;
    let knee = model.knee();
    if !(knee > d_min && knee < d_max) {
        return Err(Error::Fit(format!(
            "samples span {d_min:.3}..{d_max:.3} m but the fitted knee is at {knee:.3} m; the curve is not identifiable"
        )));
    }
    Ok(model)
}

fn geo_feat_samples(db: &DescriptorDb, anchor: usize) -> Vec<(f64, f64)> {
    let a = db.entry(anchor);
    db.entries()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != anchor)
        .map(|(_, e)| {
            (
                a.pose.distance(&e.pose),
                f32_distance(&a.descriptor, &e.descriptor),
            )
        })
        .collect()
}

fn f32_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-frame mapping fitted against every other database frame.
pub fn fit_anchor(db: &DescriptorDb, anchor: usize) -> Result<MappingModel> {
    fit_mapping(db.entry(anchor).frame_id, &geo_feat_samples(db, anchor))
}

/// One mapping fitted on frame pairs across the whole database, for frames
/// whose own fit fails. At most `max_pairs` evenly strided pairs are used.
pub fn fit_global(db: &DescriptorDb, max_pairs: usize) -> Result<MappingModel> {
    let n = db.len();
    let total = n * n.saturating_sub(1) / 2;
    let stride = total.div_ceil(max_pairs.max(1)).max(1);
    let mut samples = Vec::new();
    let mut k = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if k % stride == 0 {
                let (a, b) = (db.entry(i), db.entry(j));
                samples.push((
                    a.pose.distance(&b.pose),
                    f32_distance(&a.descriptor, &b.descriptor),
                ));
            }
            k += 1;
        }
    }
    fit_mapping(u64::MAX, &samples)
}

/// Mapping for every database frame, falling back to `global` when a
/// frame's own fit fails. The flag marks fallbacks.
pub fn fit_all(db: &DescriptorDb, global: &MappingModel) -> Vec<(MappingModel, bool)> {
    (0..db.len())
        .map(|i| match fit_anchor(db, i) {
            Ok(m) => (m, false),
            Err(_) => (
                MappingModel {
                    frame_id: db.entry(i).frame_id,
                    ..*global
                },
                true,
            ),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub frame_id: u64,
    pub index: usize,
    pub position: [f64; 2],
    /// Recovered geometric distance to the query; zero until populated.
    pub distance: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub members: Vec<Reference>,
}

/// The top-1 frame and every database frame within `epsilon` of it.
pub fn select_references(db: &DescriptorDb, top1_frame: u64, epsilon: f64) -> Result<ReferenceSet> {
    let r = db
        .entries()
        .iter()
        .position(|e| e.frame_id == top1_frame)
        .ok_or_else(|| Error::Value(format!("frame {top1_frame} is not in the database")))?;
    let tr = db.entry(r).pose;
    let mut members = Vec::new();
    for (i, e) in db.entries().iter().enumerate() {
        if i == r || tr.distance(&e.pose) < epsilon {
            members.push(Reference {
                frame_id: e.frame_id,
                index: i,
                position: e.pose.xy(),
                distance: 0.0,
                saturated: false,
            });
        }
    }
    // the match itself first
    members.sort_by_key(|m| m.index != r);
    if members.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "{} reference frames within {epsilon} m of frame {top1_frame}, need 3",
            members.len()
        )));
    }
    Ok(ReferenceSet { members })
}

/// Smallest singular value of the centered `n × 2` position matrix.
pub fn spread(positions: &[[f64; 2]]) -> f64 {
    let n = positions.len().max(1) as f64;
    let cx = positions.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = positions.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut m = Matrix2::zeros();
    for p in positions {
        let v = Vector2::new(p[0] - cx, p[1] - cy);
        m += v * v.transpose();
    }
    m.symmetric_eigenvalues().min().max(0.0).sqrt()
}

/// Closed-form estimate from the range equations linearized about the
/// reference centroid. Exact for noiseless ranges.
fn linear_estimate(refs: &[([f64; 2], f64)]) -> Option<Vector2<f64>> {
    let n = refs.len() as f64;
    let c = refs.iter().fold(Vector2::zeros(), |acc, r| {
        acc + Vector2::new(r.0[0], r.0[1])
    }) / n;
    let sq = |r: &([f64; 2], f64)| r.0[0] * r.0[0] + r.0[1] * r.0[1] - r.1 * r.1;
    let mean_sq = refs.iter().map(sq).sum::<f64>() / n;
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for r in refs {
        let a = Vector2::new(r.0[0], r.0[1]) - c;
        ata += a * a.transpose();
        atb += a * (0.5 * (sq(r) - mean_sq));
    }
    ata.lu().solve(&atb)
}

struct GnRun {
    t: Vector2<f64>,
    cost: f64,
    last_step: f64,
}

fn gauss_newton(refs: &[([f64; 2], f64)], start: Vector2<f64>) -> GnRun {
    let cost = |t: &Vector2<f64>| -> f64 {
        refs.iter()
            .map(|&(p, d)| ((t - Vector2::new(p[0], p[1])).norm() - d).powi(2))
            .sum()
    };
    let mut t = start;
    let mut c = cost(&t);
    let mut last_step = f64::INFINITY;
    for _ in 0..TRI_MAX_ITERS {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for &(p, d) in refs {
            let diff = t - Vector2::new(p[0], p[1]);
            let range = diff.norm();
            if range < ZERO_RANGE {
                continue;
            }
            let j = diff / range;
            jtj += j * j.transpose();
            jtr += j * (range - d);
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        // halve until the cost does not increase
        let mut k = 1.0;
        let mut moved = 0.0;
        for _ in 0..40 {
            let cand = t + step * k;
            let cc = cost(&cand);
            if cc <= c {
                moved = (cand - t).norm();
                t = cand;
                c = cc;
                break;
            }
            k *= 0.5;
        }
        last_step = moved;
        if moved < TRI_STEP_TOL {
            break;
        }
    }
    GnRun {
        t,
        cost: c,
        last_step,
    }
}

/// `argmin_t Σ_k (‖t - t_k‖ - d_k)²` by Gauss–Newton from `init`. A second
/// run starts from the linearized closed-form estimate, and the lower-cost
/// converged result wins, so a local minimum near `init` is not returned.
pub fn trilaterate(refs: &[([f64; 2], f64)], init: [f64; 2]) -> Result<[f64; 2]> {
    if refs.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "{} references, need 3",
            refs.len()
        )));
    }
    let positions: Vec<[f64; 2]> = refs.iter().map(|r| r.0).collect();
    let s = spread(&positions);
    if s <= COLLINEAR_TOLERANCE {
        return Err(Error::Collinear(s));
    }
    let mut runs = vec![gauss_newton(refs, Vector2::new(init[0], init[1]))];
    if let Some(start) = linear_estimate(refs) {
        runs.push(gauss_newton(refs, start));
    }
    let first_step = runs[0].last_step;
    runs.retain(|r| r.last_step <= TRI_ACCEPT_TOL);
    let best = runs
        .into_iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .ok_or(Error::NonConvergence(first_step))?;
    Ok([best.t[0], best.t[1]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub top1_frame: u64,
    pub references: ReferenceSet,
    pub position: [f64; 2],
}

/// Retrieves the top-1 match, recovers distances to the frames around it
/// with their mappings (`mappings[i]` belongs to database entry `i`), drops
/// saturated ones and trilaterates from the match position.
pub fn localize(
    db: &DescriptorDb,
    mappings: &[MappingModel],
    q: &GlobalDescriptor,
    epsilon: f64,
) -> Result<Localization> {
    if mappings.len() != db.len() {
        return Err(Error::Length(format!(
            "{} mappings for {} database frames",
            mappings.len(),
            db.len()
        )));
    }
    let top = *query_topk(db, q, 1)?.top().expect("nonempty database");
    let mut refs = select_references(db, top.frame_id, epsilon)?;
    let q32: Vec<f32> = q.0.iter().map(|&v| v as f32).collect();
    for m in &mut refs.members {
        let feat = f32_distance(&q32, &db.entry(m.index).descriptor);
        let (d, sat) = invert_distance(&mappings[m.index], feat);
        m.distance = d;
        m.saturated = sat;
    }
    let usable: Vec<([f64; 2], f64)> = refs
        .members
        .iter()
        .filter(|m| !m.saturated)
        .map(|m| (m.position, m.distance))
        .collect();
    if usable.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "{} unsaturated references, need 3",
            usable.len()
        )));
    }
    let position = trilaterate(&usable, refs.members[0].position)?;
    Ok(Localization {
        top1_frame: top.frame_id,
        references: refs,
        position,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// `(threshold, fraction of errors ≤ threshold)`.
    pub cdf: Vec<(f64, f64)>,
}

pub fn ate(
    estimates: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    thresholds: &[f64],
) -> Result<AteReport> {
    if estimates.len() != ground_truth.len() || estimates.is_empty() {
        return Err(Error::Length(format!(
            "{} estimates against {} ground-truth positions",
            estimates.len(),
            ground_truth.len()
        )));
    }
    let errors: Vec<f64> = estimates
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| (e[0] - g[0]).hypot(e[1] - g[1]))
        .collect();
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let cdf = thresholds
        .iter()
        .map(|&t| {
            (
                t,
                sorted.iter().filter(|&&e| e <= t).count() as f64 / n as f64,
            )
        })
        .collect();
    Ok(AteReport {
        errors,
        mean,
        median,
        cdf,
    })
}

pub fn mapping_csv(models: &[MappingModel]) -> String {
    let mut out = String::from("frame_id,alpha,beta,gamma\n");
    for m in models {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.frame_id, m.alpha, m.beta, m.gamma
        ));
    }
    out
}

/// Parses the output of [`mapping_csv`].
pub fn parse_mapping_csv(text: &str) -> Result<Vec<MappingModel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 fields, found {}",
                fields.len()
            )));
        }
        let frame_id = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| parse_err(e.to_string()))?;
        let mut v = [0.0f64; 3];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(e.to_string()))?;
        }
        out.push(
            MappingModel::new(frame_id, v[0], v[1], v[2]).map_err(|e| parse_err(e.to_string()))?,
        );
    }
    Ok(out)
}

/// One row of the localization report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationRow {
    pub query_id: u64,
    pub estimate: [f64; 2],
    pub truth: [f64; 2],
}

impl LocalizationRow {
    pub fn error(&self) -> f64 {
        (self.estimate[0] - self.truth[0]).hypot(self.estimate[1] - self.truth[1])
    }
}

pub fn localization_csv(rows: &[LocalizationRow]) -> String {
    let mut out = String::from("query_id,est_x,est_y,true_x,true_y,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.query_id,
            r.estimate[0],
            r.estimate[1],
            r.truth[0],
            r.truth[1],
            r.error()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Pose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn truth() -> MappingModel {
        MappingModel::new(0, 1.2, 15.0, 1.5).unwrap()
    }

    /// Eq. 5 written out directly.
    fn forward(a: f64, b: f64, g: f64, d: f64) -> f64 {
        a * (1.0 - (-(d.powf(g)) / b).exp())
    }

    #[test]
    fn noiseless_fit_recovers_parameters() {
        let samples: Vec<(f64, f64)> = (1..=60)
            .map(|d| (d as f64, forward(1.2, 15.0, 1.5, d as f64)))
            .collect();
        let m = fit_mapping(3, &samples).unwrap();
        assert_eq!(m.frame_id, 3);
        for (got, want) in [(m.alpha, 1.2), (m.beta, 15.0), (m.gamma, 1.5)] {
            assert!((got - want).abs() / want < 1e-2, "{got} vs {want}");
        }
    }

    #[test]
    fn flat_samples_are_rejected() {
        let samples: Vec<(f64, f64)> = (0..20)
            .map(|i| (200.0 + i as f64, forward(1.2, 15.0, 1.5, 200.0 + i as f64)))
            .collect();
        assert!(matches!(fit_mapping(0, &samples), Err(Error::Fit(_))));
        assert!(matches!(fit_mapping(0, &samples[..5]), Err(Error::Fit(_))));
        assert!(matches!(
            fit_mapping(0, &[(f64::NAN, 1.0); 12]),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn noisy_fit_is_no_worse_than_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let samples: Vec<(f64, f64)> = (1..=60)
                .map(|d| {
                    (
                        d as f64,
                        forward(1.2, 15.0, 1.5, d as f64) * (1.0 + rng.gen_range(-0.02..0.02)),
                    )
                })
                .collect();
            let m = fit_mapping(0, &samples).unwrap();
            assert!(
                sse(&samples, m.alpha, m.beta, m.gamma)
                    <= sse(&samples, 1.2, 15.0, 1.5) * (1.0 + 1e-9)
            );
            for (got, want) in [(m.alpha, 1.2), (m.beta, 15.0), (m.gamma, 1.5)] {
                assert!((got - want).abs() / want < 0.1, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn inversion_examples() {
        let m = truth();
        assert_eq!(invert_distance(&m, 0.0), (0.0, false));
        let (d, sat) = invert_distance(&m, forward(1.2, 15.0, 1.5, 7.0));
        assert!(!sat);
        assert!((d - 7.0).abs() < 1e-9);
        let (d, sat) = invert_distance(&m, 1.2);
        assert!(sat && d.is_finite());
        assert_eq!(invert_distance(&m, 5.0), (d, true));
    }

    proptest! {
        #[test]
        fn inversion_round_trip(d in 0.0..20.0f64) {
            let m = truth();
            let f = m.feature_distance(d);
            prop_assume!(f < m.alpha * (1.0 - SATURATION_DELTA));
            let (back, sat) = invert_distance(&m, f);
            prop_assert!(!sat);
            prop_assert!((back - d).abs() < 1e-9);
        }
    }

    #[test]
    fn inversion_is_monotone() {
        let m = truth();
        let limit = m.alpha * (1.0 - SATURATION_DELTA);
        let mut prev = -1.0;
        for i in 0..=1000 {
            let (d, _) = invert_distance(&m, limit * i as f64 / 1000.0);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn trilateration_examples() {
        let refs = [
            ([0.0, 0.0], 5.0),
            ([10.0, 0.0], 65f64.sqrt()),
            ([0.0, 10.0], 45f64.sqrt()),
        ];
        let t = trilaterate(&refs, [0.0, 0.0]).unwrap();
        assert!((t[0] - 3.0).abs() < 1e-6 && (t[1] - 4.0).abs() < 1e-6);
        // the answer sits on a reference
        let refs = [([0.0, 0.0], 0.0), ([10.0, 0.0], 10.0), ([0.0, 10.0], 10.0)];
        let t = trilaterate(&refs, [0.0, 0.0]).unwrap();
        assert_eq!(t, [0.0, 0.0]);
        let refs = [([0.0, 0.0], 1.0), ([5.0, 0.0], 4.0), ([10.0, 0.0], 9.0)];
        assert!(matches!(
            trilaterate(&refs, [0.0, 0.0]),
            Err(Error::Collinear(_))
        ));
        assert!(matches!(
            trilaterate(&refs[..2], [0.0, 0.0]),
            Err(Error::Underdetermined(_))
        ));
    }

    fn random_refs(
        rng: &mut ChaCha8Rng,
        truth: [f64; 2],
        n: usize,
        noise: f64,
    ) -> Vec<([f64; 2], f64)> {
        loop {
            let refs: Vec<([f64; 2], f64)> = (0..n)
                .map(|_| {
                    let p = [
                        truth[0] + rng.gen_range(-5.0..5.0),
                        truth[1] + rng.gen_range(-5.0..5.0),
                    ];
                    let d = (p[0] - truth[0]).hypot(p[1] - truth[1]);
                    (p, d * (1.0 + rng.gen_range(-noise..=noise)))
                })
                .collect();
            let ps: Vec<[f64; 2]> = refs.iter().map(|r| r.0).collect();
            if spread(&ps) >= 3.0 {
                return refs;
            }
        }
    }

    #[test]
    fn trilateration_escapes_a_local_minimum_near_init() {
        // Gauss–Newton from the first reference alone settles about 5 m off
        let truth: [f64; 2] = [-25.071344334903788, -26.70674257667669];
        let pos = [
            [-20.97613852302662, -30.422228772358427],
            [-27.684628181342177, -29.79374655922309],
            [-21.379293530499233, -26.007149386206745],
            [-22.35794719663503, -29.745935892941976],
            [-23.63769464193723, -29.39095942629735],
            [-24.917138093770127, -29.7862600469844],
        ];
        let refs: Vec<([f64; 2], f64)> = pos
            .iter()
            .map(|&p| (p, (p[0] - truth[0]).hypot(p[1] - truth[1])))
            .collect();
        let single = gauss_newton(&refs, Vector2::new(pos[0][0], pos[0][1]));
        assert!((single.t[0] - truth[0]).hypot(single.t[1] - truth[1]) > 1.0);
        let t = trilaterate(&refs, pos[0]).unwrap();
        assert!((t[0] - truth[0]).hypot(t[1] - truth[1]) < 1e-6);
    }

    #[test]
    fn noiseless_trilateration_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let truth = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let n = rng.gen_range(3..7);
            let refs = random_refs(&mut rng, truth, n, 0.0);
            let t = trilaterate(&refs, refs[0].0).unwrap();
            assert!((t[0] - truth[0]).hypot(t[1] - truth[1]) < 1e-6);
        }
    }

    #[test]
    fn noisy_trilateration_is_within_a_meter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut good = 0;
        for _ in 0..1000 {
            let truth = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let refs = random_refs(&mut rng, truth, 5, 0.05);
            if let Ok(t) = trilaterate(&refs, refs[0].0) {
                if (t[0] - truth[0]).hypot(t[1] - truth[1]) < 1.0 {
                    good += 1;
                }
            }
        }
        assert!(good >= 950, "{good} of 1000 within 1 m");
    }

    fn db_with_positions(xy: &[[f64; 2]]) -> DescriptorDb {
        let mut db = DescriptorDb::new(2);
        for (i, p) in xy.iter().enumerate() {
            let a = i as f64 * 0.1;
            db.insert(
                100 + i as u64,
                &GlobalDescriptor(vec![a.cos(), a.sin()]),
                Pose::from_xy_yaw(p[0], p[1], 0.0),
            )
            .unwrap();
        }
        db
    }

    #[test]
    fn reference_selection() {
        let db = db_with_positions(&[
            [0.0, 0.0],
            [50.0, 0.0],
            [1.0, 1.0],
            [-2.0, 1.0],
            [0.0, -3.0],
            [3.0, 3.0],
            [9.0, 0.0],
        ]);
        let refs = select_references(&db, 100, 5.0).unwrap();
        let ids: Vec<u64> = refs.members.iter().map(|m| m.frame_id).collect();
        assert_eq!(ids, vec![100, 102, 103, 104, 105]);
        // brute force
        for (i, e) in db.entries().iter().enumerate() {
            let inside = e.pose.distance(&db.entry(0).pose) < 5.0;
            assert_eq!(inside, refs.members.iter().any(|m| m.index == i));
        }
        assert!(matches!(
            select_references(&db, 101, 5.0),
            Err(Error::Underdetermined(_))
        ));
        assert!(matches!(
            select_references(&db, 7, 5.0),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn ate_examples() {
        let r = ate(&[[1.0, 1.0]], &[[1.0, 1.0]], &[0.5]).unwrap();
        assert_eq!((r.mean, r.median), (0.0, 0.0));
        let r = ate(&[[3.0, 4.0]], &[[0.0, 0.0]], &[]).unwrap();
        assert_eq!(r.mean, 5.0);
        let est = [[1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [0.0, 0.5], [10.0, 0.0]];
        let r = ate(&est, &[[0.0, 0.0]; 5], &[1.0, 2.0, 100.0]).unwrap();
        // errors 1, 2, 3, 0.5, 10
        assert!((r.mean - 16.5 / 5.0).abs() < 1e-12);
        assert_eq!(r.median, 2.0);
        assert_eq!(r.cdf, vec![(1.0, 0.4), (2.0, 0.6), (100.0, 1.0)]);
        assert!(matches!(
            ate(&est, &[[0.0, 0.0]; 4], &[]),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn csv_outputs() {
        assert_eq!(
            mapping_csv(&[truth()]),
            "frame_id,alpha,beta,gamma\n0,1.2,15,1.5\n"
        );
        let row = LocalizationRow {
            query_id: 4,
            estimate: [3.0, 4.0],
            truth: [0.0, 0.0],
        };
        assert_eq!(
            localization_csv(&[row]),
            "query_id,est_x,est_y,true_x,true_y,error\n4,3,4,0,0,5\n"
        );
    }

    #[test]
    fn mapping_csv_round_trip() {
        let models = vec![
            truth(),
            MappingModel::new(7, 0.1 + 0.2, 1.0 / 3.0, std::f64::consts::PI).unwrap(),
        ];
        assert_eq!(parse_mapping_csv(&mapping_csv(&models)).unwrap(), models);
        assert!(matches!(
            parse_mapping_csv("h\n1,2,3\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_mapping_csv("h\n1,-1,3,1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
