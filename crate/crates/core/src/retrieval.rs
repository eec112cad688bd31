//! Exact nearest-neighbour place retrieval and its evaluation metrics.

use std::collections::HashSet;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, Pose};
use crate::model::{preprocess, Model, RasterConfig};
use crate::netvlad::GlobalDescriptor;

pub const DB_MAGIC: &[u8; 8] = b"BEVPDB\0\0";
pub const DB_VERSION: u32 = 1;

/// One stored place. Descriptors are kept in single precision, as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub frame_id: u64,
    pub descriptor: Vec<f32>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorDb {
    dim: usize,
    entries: Vec<DbEntry>,
    ids: HashSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub frame_id: u64,
    /// Position in the database.
    pub index: usize,
    pub distance: f64,
}

/// Matches ranked by increasing feature distance, ties by frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub matches: Vec<Match>,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<&Match> {
        self.matches.first()
    }
}

fn quantize(d: &GlobalDescriptor) -> Vec<f32> {
    d.0.iter().map(|&v| v as f32).collect()
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

impl DescriptorDb {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &DbEntry {
        &self.entries[index]
    }

    pub fn insert(
        &mut self,
        frame_id: u64,
        descriptor: &GlobalDescriptor,
        pose: Pose,
    ) -> Result<()> {
        self.insert_quantized(frame_id, quantize(descriptor), pose)
    }

    fn insert_quantized(&mut self, frame_id: u64, descriptor: Vec<f32>, pose: Pose) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::Shape(format!(
                "descriptor has {} values, database holds {}",
                descriptor.len(),
                self.dim
            )));
        }
        if !self.ids.insert(frame_id) {
            return Err(Error::Value(format!(
                "frame id {frame_id} is already in the database"
            )));
        }
        self.entries.push(DbEntry {
            frame_id,
            descriptor,
            pose,
        });
        Ok(())
    }

    /// Describes every frame of `dataset`.
    pub fn build(dataset: &Dataset, model: &Model, raster: &RasterConfig) -> Result<Self> {
        let mut db = Self::new(model.descriptor_len());
        for (cloud, pose) in &dataset.entries {
            let img = preprocess(cloud, raster, 0.0, cloud.frame_id);
            db.insert(cloud.frame_id, &model.describe(&img)?, *pose)?;
        }
        Ok(db)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(24 + self.entries.len() * (8 + 4 * self.dim + 96));
        w.extend_from_slice(DB_MAGIC);
        w.write_u32::<LittleEndian>(DB_VERSION).unwrap();
        w.write_u64::<LittleEndian>(self.entries.len() as u64)
            .unwrap();
        w.write_u64::<LittleEndian>(self.dim as u64).unwrap();
        for e in &self.entries {
            w.write_u64::<LittleEndian>(e.frame_id).unwrap();
            for &v in &e.descriptor {
                w.write_f32::<LittleEndian>(v).unwrap();
            }
            for row in &e.pose.rotation {
                w.write_f64::<LittleEndian>(row[0]).unwrap();
                w.write_f64::<LittleEndian>(row[1]).unwrap();
                w.write_f64::<LittleEndian>(row[2]).unwrap();
            }
            for &p in &e.pose.position {
                w.write_f64::<LittleEndian>(p).unwrap();
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| Error::Format("database file is truncated".into());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DB_MAGIC {
            return Err(Error::Format("not a descriptor database".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != DB_VERSION {
            return Err(Error::Format(format!(
                "unsupported database version {version}"
            )));
        }
        let count = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let entry_len = 8 + 4 * dim + 96;
        if dim == 0
            || count
                .checked_mul(entry_len)
                .map_or(true, |n| n != bytes.len() - r.position() as usize)
        {
            return Err(Error::Format(format!(
                "header ({count} × {dim}) does not match the file size"
            )));
        }
        let mut db = Self::new(dim);
        for _ in 0..count {
            let frame_id = r.read_u64::<LittleEndian>().map_err(truncated)?;
            let mut descriptor = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut descriptor)
                .map_err(truncated)?;
            let mut pose = [0f64; 12];
            r.read_f64_into::<LittleEndian>(&mut pose)
                .map_err(truncated)?;
            let pose = Pose {
                rotation: [
                    [pose[0], pose[1], pose[2]],
                    [pose[3], pose[4], pose[5]],
                    [pose[6], pose[7], pose[8]],
                ],
                position: [pose[9], pose[10], pose[11]],
            };
            db.insert_quantized(frame_id, descriptor, pose)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// The `k` nearest entries by L2 distance (all of them if `k` exceeds the
/// database size). The query is compared at the database's precision.
pub fn query_topk(db: &DescriptorDb, q: &GlobalDescriptor, k: usize) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::EmptyDb);
    }
    if k == 0 {
        return Err(Error::Value("k must be at least 1".into()));
    }
    if q.len() != db.dim {
        return Err(Error::Shape(format!(
            "query has {} values, database holds {}",
            q.len(),
            db.dim
        )));
    }
    let q = quantize(q);
    let mut matches: Vec<Match> = db
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| Match {
            frame_id: e.frame_id,
            index,
            distance: squared_distance(&q, &e.descriptor).sqrt(),
        })
        .collect();
    let by_rank = |a: &Match, b: &Match| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.frame_id.cmp(&b.frame_id))
    };
    if k < matches.len() {
        matches.select_nth_unstable_by(k - 1, by_rank);
        matches.truncate(k);
    }
    matches.sort_unstable_by(by_rank);
    Ok(RetrievalResult { matches })
}

/// A query descriptor with its ground-truth pose.
pub type LabeledQuery = (GlobalDescriptor, Pose);

/// Top-1 outcome of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOutcome {
    pub top1: Match,
    /// Geometric distance between the query and its top-1 match.
    pub geo_distance: f64,
    /// Whether any database pose lies within ε of the query.
    pub has_true_match: bool,
}

impl QueryOutcome {
    pub fn correct(&self, epsilon: f64) -> bool {
        self.geo_distance < epsilon
    }
}

fn check_queries(queries: &[LabeledQuery]) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::Empty("no queries".into()));
    }
    Ok(())
}

pub fn evaluate_top1(
    db: &DescriptorDb,
    queries: &[LabeledQuery],
    epsilon: f64,
) -> Result<Vec<QueryOutcome>> {
    check_queries(queries)?;
    queries
        .iter()
        .map(|(q, pose)| {
            let top1 = *query_topk(db, q, 1)?.top().expect("nonempty database");
            Ok(QueryOutcome {
                top1,
                geo_distance: db.entries[top1.index].pose.distance(pose),
                has_true_match: db.entries.iter().any(|e| e.pose.distance(pose) < epsilon),
            })
        })
        .collect()
}

/// Fraction of queries whose top-1 match lies within `epsilon` meters.
pub fn recall_at_1(db: &DescriptorDb, queries: &[LabeledQuery], epsilon: f64) -> Result<f64> {
    let outcomes = evaluate_top1(db, queries, epsilon)?;
    Ok(outcomes.iter().filter(|o| o.correct(epsilon)).count() as f64 / outcomes.len() as f64)
}

/// Number of candidates considered for `percent` of the database.
pub fn top_percent_count(db_len: usize, percent: f64) -> usize {
    ((percent / 100.0 * db_len as f64).ceil() as usize).clamp(1, db_len.max(1))
}

/// Fraction of queries with a geometrically correct match among the top
/// `ceil(percent / 100 · |db|)` candidates.
pub fn recall_at_top_percent(
    db: &DescriptorDb,
    queries: &[LabeledQuery],
    epsilon: f64,
    percent: f64,
) -> Result<f64> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Value(format!(
            "percent must lie in (0, 100], got {percent}"
        )));
    }
    check_queries(queries)?;
    if db.is_empty() {
        return Err(Error::EmptyDb);
    }
    let k = top_percent_count(db.len(), percent);
    let mut hits = 0;
    for (q, pose) in queries {
        let res = query_topk(db, q, k)?;
        if res
            .matches
            .iter()
            .any(|m| db.entries[m.index].pose.distance(pose) < epsilon)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of accepting the top-1 match when its feature
/// distance is below each threshold.
pub fn pr_curve(
    db: &DescriptorDb,
    queries: &[LabeledQuery],
    epsilon: f64,
    thresholds: &[f64],
) -> Result<Vec<PrPoint>> {
    let outcomes = evaluate_top1(db, queries, epsilon)?;
    Ok(pr_from_outcomes(&outcomes, epsilon, thresholds))
}

pub fn pr_from_outcomes(
    outcomes: &[QueryOutcome],
    epsilon: f64,
    thresholds: &[f64],
) -> Vec<PrPoint> {
    thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for o in outcomes {
                let positive = o.top1.distance < t;
                if positive && o.correct(epsilon) {
                    tp += 1;
                } else if positive {
                    fp += 1;
                } else if o.has_true_match {
                    fn_ += 1;
                }
            }
            let ratio = |num: usize, den: usize| {
                if den == 0 {
                    1.0
                } else {
                    num as f64 / den as f64
                }
            };
            PrPoint {
                threshold: t,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
            }
        })
        .collect()
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}

/// `n` evenly spaced thresholds covering `[0, max_distance]`, where
/// `max_distance` is the largest top-1 distance (at least 2, the diameter of
/// the unit sphere).
pub fn default_thresholds(outcomes: &[QueryOutcome], n: usize) -> Vec<f64> {
    let hi = outcomes
        .iter()
        .map(|o| o.top1.distance)
        .fold(2.0f64, f64::max)
        * (1.0 + 1e-9);
    let n = n.max(2);
    (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> GlobalDescriptor {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        GlobalDescriptor(v.iter().map(|a| a / n).collect())
    }

    fn at(x: f64, y: f64) -> Pose {
        Pose::from_xy_yaw(x, y, 0.0)
    }

    fn random_db(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DescriptorDb {
        let mut db = DescriptorDb::new(dim);
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // a few coarse values make exact ties likely
            let v: Vec<f64> = if i % 3 == 0 {
                v.iter().map(|a| (a * 2.0).round()).collect()
            } else {
                v
            };
            db.insert((n - i) as u64 * 7, &GlobalDescriptor(v), at(i as f64, 0.0))
                .unwrap();
        }
        db
    }

    #[test]
    fn equal_descriptor_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let db = random_db(&mut rng, 20, 8);
        let e = db.entry(5);
        let q = GlobalDescriptor(e.descriptor.iter().map(|&v| v as f64).collect());
        let top = query_topk(&db, &q, 3).unwrap();
        assert_eq!(top.matches[0].frame_id, e.frame_id);
        assert_eq!(top.matches[0].distance, 0.0);
    }

    #[test]
    fn hand_built_ordering() {
        let mut db = DescriptorDb::new(2);
        db.insert(10, &unit(&[1.0, 0.0]), at(0.0, 0.0)).unwrap();
        db.insert(11, &unit(&[0.0, 1.0]), at(10.0, 0.0)).unwrap();
        db.insert(12, &unit(&[-1.0, 0.0]), at(20.0, 0.0)).unwrap();
        let q = unit(&[0.8, 0.6]);
        let res = query_topk(&db, &q, 10).unwrap();
        let ids: Vec<u64> = res.matches.iter().map(|m| m.frame_id).collect();
        assert_eq!(ids, vec![10, 11, 12]);
        // |(0.8,0.6)-(1,0)| = √0.4, |.-(0,1)| = √0.8, |.-(-1,0)| = √3.6
        for (m, want) in res.matches.iter().zip([0.4f64, 0.8, 3.6]) {
            assert!((m.distance - want.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let db = DescriptorDb::new(2);
        assert!(matches!(
            query_topk(&db, &unit(&[1.0, 0.0]), 1),
            Err(Error::EmptyDb)
        ));
        let mut db = DescriptorDb::new(2);
        db.insert(1, &unit(&[1.0, 0.0]), at(0.0, 0.0)).unwrap();
        assert!(matches!(
            db.insert(1, &unit(&[0.0, 1.0]), at(0.0, 0.0)),
            Err(Error::Value(_))
        ));
        assert!(matches!(
            db.insert(2, &unit(&[1.0, 0.0, 0.0]), at(0.0, 0.0)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            query_topk(&db, &unit(&[1.0, 0.0]), 0),
            Err(Error::Value(_))
        ));
        assert!(matches!(
            recall_at_top_percent(&db, &[], 5.0, 1.0),
            Err(Error::Value(_)) | Err(Error::Empty(_))
        ));
    }

    /// Full distance table sorted by (distance, frame id).
    fn naive_rank(db: &DescriptorDb, q: &GlobalDescriptor) -> Vec<(u64, f64)> {
        let q32: Vec<f32> = q.0.iter().map(|&v| v as f32).collect();
        let mut all: Vec<(u64, f64)> = db
            .entries()
            .iter()
            .map(|e| {
                let mut s = 0.0;
                for (a, b) in q32.iter().zip(&e.descriptor) {
                    s += (*a as f64 - *b as f64) * (*a as f64 - *b as f64);
                }
                (e.frame_id, s.sqrt())
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }

    #[test]
    fn topk_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let dim = rng.gen_range(1..6);
            let db = random_db(&mut rng, n, dim);
            let q = GlobalDescriptor(
                (0..dim)
                    .map(|_| (rng.gen_range(-1.0f64..1.0) * 2.0).round())
                    .collect(),
            );
            let k = rng.gen_range(1..n + 5);
            let got: Vec<(u64, f64)> = query_topk(&db, &q, k)
                .unwrap()
                .matches
                .iter()
                .map(|m| (m.frame_id, m.distance))
                .collect();
            let want = naive_rank(&db, &q);
            assert_eq!(got, want[..k.min(n)].to_vec());
        }
    }

    #[test]
    fn database_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let db = random_db(&mut rng, 17, 9);
        let bytes = db.to_bytes();
        let back = DescriptorDb::from_bytes(&bytes).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            DescriptorDb::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn recall_edge_cases() {
        let mut db = DescriptorDb::new(2);
        db.insert(0, &unit(&[1.0, 0.0]), at(0.0, 0.0)).unwrap();
        db.insert(1, &unit(&[0.0, 1.0]), at(100.0, 0.0)).unwrap();
        let same = vec![
            (unit(&[1.0, 0.0]), at(0.0, 0.0)),
            (unit(&[0.0, 1.0]), at(100.0, 0.0)),
        ];
        assert_eq!(recall_at_1(&db, &same, 5.0).unwrap(), 1.0);
        let far = vec![(unit(&[1.0, 0.0]), at(50.0, 0.0))];
        assert_eq!(recall_at_1(&db, &far, 5.0).unwrap(), 0.0);
        let swapped = vec![(unit(&[0.0, 1.0]), at(0.0, 0.0))];
        assert_eq!(recall_at_1(&db, &swapped, 5.0).unwrap(), 0.0);
        assert_eq!(
            recall_at_top_percent(&db, &swapped, 5.0, 100.0).unwrap(),
            1.0
        );
        assert_eq!(
            recall_at_top_percent(&db, &swapped, 5.0, 50.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn pr_edge_cases() {
        let mut db = DescriptorDb::new(2);
        db.insert(0, &unit(&[1.0, 0.0]), at(0.0, 0.0)).unwrap();
        db.insert(1, &unit(&[0.0, 1.0]), at(100.0, 0.0)).unwrap();
        let qs = vec![
            (unit(&[1.0, 0.1]), at(1.0, 0.0)),
            (unit(&[0.1, 1.0]), at(99.0, 0.0)),
        ];
        let pts = pr_curve(&db, &qs, 5.0, &[0.0, f64::INFINITY]).unwrap();
        assert_eq!((pts[0].precision, pts[0].recall), (1.0, 0.0));
        assert_eq!((pts[1].precision, pts[1].recall), (1.0, 1.0));
        assert!(pr_csv(&pts).starts_with("threshold,precision,recall\n0,1,0\n"));
    }

    proptest! {
        #[test]
        fn recall_monotone_in_percent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let db = random_db(&mut rng, 30, 4);
            let qs: Vec<LabeledQuery> = (0..8)
                .map(|_| (GlobalDescriptor((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()), at(rng.gen_range(0.0..30.0), 0.0)))
                .collect();
            let mut prev = 0.0;
            for p in [1.0, 5.0, 10.0, 30.0, 60.0, 100.0] {
                let r = recall_at_top_percent(&db, &qs, 2.0, p).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            let small = recall_at_top_percent(&db, &qs, 2.0, 1.0).unwrap();
            prop_assert_eq!(small, recall_at_1(&db, &qs, 2.0).unwrap());
            let ts: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
            let pr = pr_curve(&db, &qs, 2.0, &ts).unwrap();
            for w in pr.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
            }
        }
    }
}
