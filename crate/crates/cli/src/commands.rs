use std::fs;
use std::path::Path;

use bevplace::checkpoint::Checkpoint;
use bevplace::ingest::synth::SynthWorld;
use bevplace::ingest::Split;
use bevplace::ingest::{parse_velodyne_bin, read_dataset, write_dataset, Dataset, SynthConfig};
use bevplace::model::Model;
use bevplace::position::{
    ate, fit_anchor, fit_global, localization_csv, localize, mapping_csv, parse_mapping_csv,
    LocalizationRow, MappingModel,
};
use bevplace::retrieval::{
    default_thresholds, evaluate_top1, pr_csv, pr_from_outcomes, query_topk, recall_at_top_percent,
    top_percent_count, DescriptorDb, LabeledQuery,
};
use bevplace::trainer::train_with_progress;
use bevplace::Error;
use serde::Serialize;

use crate::config::Settings;
use crate::error::{CliError, CliResult};

pub const MAPPINGS_FILE: &str = "mappings.csv";
pub const GLOBAL_MAPPING_FILE: &str = "global_mapping.csv";
pub const ATE_THRESHOLDS: [f64; 8] = [0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0];

fn emit<T: Serialize>(out: Option<&Path>, name: &str, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable summary") + "\n";
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn out_dir(s: &Settings) -> CliResult<&Path> {
    s.require(&s.out, "out")
}

#[derive(Serialize)]
struct SynthSummary {
    seed: u64,
    frames: usize,
    spacing: f64,
    queries: usize,
    query_offset: f64,
    random_yaw: bool,
}

/// Writes `out/database` and, when queries are requested, `out/queries`.
pub fn synth(s: &Settings) -> CliResult<()> {
    let out = out_dir(s)?;
    let frames = s.frames.unwrap_or(100);
    let spacing = s.spacing.unwrap_or(1.0);
    if frames == 0 || !(spacing > 0.0) {
        return Err(CliError::Usage(
            "need --frames ≥ 1 and --spacing > 0".into(),
        ));
    }
    let queries = s.query_count.unwrap_or(0);
    let offset = s.query_offset.unwrap_or(5.0);
    let random_yaw = s.random_yaw.unwrap_or(true);
    let world = SynthWorld::generate(SynthConfig::new(s.seed(), frames, spacing));
    write_dataset(&out.join("database"), &world.dataset())?;
    if queries > 0 {
        let poses: Vec<_> = world
            .query_poses(queries, offset, random_yaw, s.seed().wrapping_add(1))
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        write_dataset(
            &out.join("queries"),
            &world.query_dataset(&poses, frames as u64),
        )?;
    }
    let summary = SynthSummary {
        seed: s.seed(),
        frames,
        spacing,
        queries,
        query_offset: offset,
        random_yaw,
    };
    emit(Some(out), "synth.json", &summary)
}

#[derive(Serialize)]
struct TrainSummary {
    frames: usize,
    epochs: usize,
    steps: usize,
    learning_rate: f64,
    margin: f64,
    epsilon: f64,
    epoch_mean_loss: Vec<f64>,
}

pub fn train(s: &Settings) -> CliResult<()> {
    let data = read_dataset(s.require(&s.data, "data")?, Split::Database)?;
    let out = out_dir(s)?;
    let cfg = s.train();
    let model = Model::init(s.net(), s.clusters(), s.seed())?;
    let (model, history) = train_with_progress(&data, &model, &cfg, |step| {
        log::info!(
            "epoch {} step {} loss {:.6}",
            step.epoch,
            step.step,
            step.loss
        );
    })?;
    fs::create_dir_all(out)?;
    Checkpoint {
        model,
        raster: cfg.raster,
    }
    .save(&out.join("checkpoint.bin"))?;
    fs::write(out.join("loss.csv"), history.to_csv())?;
    let summary = TrainSummary {
        frames: data.len(),
        epochs: cfg.epochs,
        steps: history.steps.len(),
        learning_rate: cfg.learning_rate,
        margin: cfg.margin,
        epsilon: cfg.epsilon,
        epoch_mean_loss: history.epoch_means(),
    };
    emit(Some(out), "train.json", &summary)
}

#[derive(Serialize)]
struct GlobalFit {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

#[derive(Serialize)]
struct FitSummary {
    entries: usize,
    descriptor_dim: usize,
    anchor_fits: usize,
    fallbacks: usize,
    global: Option<GlobalFit>,
}

/// Per-anchor fits, with the global model standing in for frames whose own
/// fit fails. Writes `mappings.csv` (successful anchors only) and, when any
/// fallback was needed, `global_mapping.csv`.
fn fit_and_write(db: &DescriptorDb, out: &Path) -> CliResult<FitSummary> {
    let mut fitted = Vec::new();
    let mut failed = Vec::new();
    for i in 0..db.len() {
        match fit_anchor(db, i) {
            Ok(m) => fitted.push(m),
            Err(e) => {
                log::warn!(
                    "frame {}: {e}; using the global mapping",
                    db.entry(i).frame_id
                );
                failed.push(i);
            }
        }
    }
    fs::create_dir_all(out)?;
    let mut global = None;
    if !failed.is_empty() {
        let g = fit_global(db, 20_000)?;
        fs::write(out.join(GLOBAL_MAPPING_FILE), mapping_csv(&[g]))?;
        global = Some(GlobalFit {
            alpha: g.alpha,
            beta: g.beta,
            gamma: g.gamma,
        });
    } else if out.join(GLOBAL_MAPPING_FILE).exists() {
        fs::remove_file(out.join(GLOBAL_MAPPING_FILE))?;
    }
    fs::write(out.join(MAPPINGS_FILE), mapping_csv(&fitted))?;
    Ok(FitSummary {
        entries: db.len(),
        descriptor_dim: db.dim(),
        anchor_fits: fitted.len(),
        fallbacks: failed.len(),
        global,
    })
}

pub fn build_db(s: &Settings) -> CliResult<()> {
    let data = read_dataset(s.require(&s.data, "data")?, Split::Database)?;
    let ckpt = Checkpoint::load(s.require(&s.checkpoint, "checkpoint")?)?;
    let db_path = s.require(&s.db, "db")?;
    let out = out_dir(s)?;
    let db = DescriptorDb::build(&data, &ckpt.model, &ckpt.raster)?;
    db.save(db_path)?;
    let summary = fit_and_write(&db, out)?;
    emit(Some(out), "build_db.json", &summary)
}

pub fn fit_mapping(s: &Settings) -> CliResult<()> {
    let db = DescriptorDb::load(s.require(&s.db, "db")?)?;
    let out = out_dir(s)?;
    let summary = fit_and_write(&db, out)?;
    emit(Some(out), "fit_mapping.json", &summary)
}

/// One mapping per database entry, in database order.
fn load_mappings(db: &DescriptorDb, dir: &Path) -> CliResult<Vec<MappingModel>> {
    let fitted = parse_mapping_csv(&fs::read_to_string(dir.join(MAPPINGS_FILE))?)?;
    let global_path = dir.join(GLOBAL_MAPPING_FILE);
    let global = if global_path.exists() {
        parse_mapping_csv(&fs::read_to_string(global_path)?)?
            .first()
            .copied()
    } else {
        None
    };
    db.entries()
        .iter()
        .map(|e| match fitted.iter().find(|m| m.frame_id == e.frame_id) {
            Some(m) => Ok(*m),
            None => global
                .map(|g| MappingModel {
                    frame_id: e.frame_id,
                    ..g
                })
                .ok_or_else(|| {
                    CliError::Core(Error::Format(format!(
                        "no mapping for frame {} and no global mapping",
                        e.frame_id
                    )))
                }),
        })
        .collect()
}

fn describe_queries(s: &Settings, ckpt: &Checkpoint) -> CliResult<(Dataset, Vec<LabeledQuery>)> {
    let queries = read_dataset(s.require(&s.queries, "queries")?, Split::Query)?;
    if queries.is_empty() {
        return Err(Error::Empty("query set has no frames".into()).into());
    }
    let labeled = queries
        .entries
        .iter()
        .map(|(c, p)| Ok((ckpt.model.describe_cloud(c, &ckpt.raster, c.frame_id)?, *p)))
        .collect::<bevplace::Result<Vec<_>>>()?;
    Ok((queries, labeled))
}

fn load_db_and_checkpoint(s: &Settings) -> CliResult<(DescriptorDb, Checkpoint)> {
    let db = DescriptorDb::load(s.require(&s.db, "db")?)?;
    let ckpt = Checkpoint::load(s.require(&s.checkpoint, "checkpoint")?)?;
    if ckpt.model.descriptor_len() != db.dim() {
        return Err(Error::Shape(format!(
            "checkpoint produces {}-dimensional descriptors, database holds {}",
            ckpt.model.descriptor_len(),
            db.dim()
        ))
        .into());
    }
    Ok((db, ckpt))
}

#[derive(Serialize)]
struct MatchJson {
    frame_id: u64,
    distance: f64,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct QuerySummary {
    matches: Vec<MatchJson>,
}

pub fn query(s: &Settings) -> CliResult<()> {
    let (db, ckpt) = load_db_and_checkpoint(s)?;
    let path = s.require(&s.scan, "scan")?;
    let cloud = parse_velodyne_bin(&fs::read(path)?)?;
    let q = ckpt.model.describe_cloud(&cloud, &ckpt.raster, 0)?;
    let k = s.k.unwrap_or(5);
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let result = query_topk(&db, &q, k)?;
    let matches = result
        .matches
        .iter()
        .map(|m| {
            let [x, y] = db.entry(m.index).pose.xy();
            MatchJson {
                frame_id: m.frame_id,
                distance: m.distance,
                x,
                y,
            }
        })
        .collect();
    emit(s.out.as_deref(), "query.json", &QuerySummary { matches })
}

#[derive(Serialize)]
struct RecallSummary {
    queries: usize,
    epsilon: f64,
    recall_at_1: f64,
    recall_at_1_percent: f64,
    top_percent_k: usize,
}

pub fn eval_recall(s: &Settings) -> CliResult<()> {
    let (db, ckpt) = load_db_and_checkpoint(s)?;
    let out = out_dir(s)?;
    let (queries, labeled) = describe_queries(s, &ckpt)?;
    let eps = s.epsilon();
    let outcomes = evaluate_top1(&db, &labeled, eps)?;
    let mut csv = String::from("query_id,top1_frame,feature_distance,geo_distance,correct\n");
    for ((cloud, _), o) in queries.entries.iter().zip(&outcomes) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            cloud.frame_id,
            o.top1.frame_id,
            o.top1.distance,
            o.geo_distance,
            u8::from(o.correct(eps))
        ));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("recall.csv"), csv)?;
    let summary = RecallSummary {
        queries: labeled.len(),
        epsilon: eps,
        recall_at_1: outcomes.iter().filter(|o| o.correct(eps)).count() as f64
            / outcomes.len() as f64,
        recall_at_1_percent: recall_at_top_percent(&db, &labeled, eps, 1.0)?,
        top_percent_k: top_percent_count(db.len(), 1.0),
    };
    emit(Some(out), "recall.json", &summary)
}

#[derive(Serialize)]
struct PrSummary {
    queries: usize,
    epsilon: f64,
    thresholds: usize,
    max_f1: f64,
}

pub fn eval_pr(s: &Settings) -> CliResult<()> {
    let (db, ckpt) = load_db_and_checkpoint(s)?;
    let out = out_dir(s)?;
    let (_, labeled) = describe_queries(s, &ckpt)?;
    let eps = s.epsilon();
    let outcomes = evaluate_top1(&db, &labeled, eps)?;
    let n = s.thresholds.unwrap_or(100);
    if n < 2 {
        return Err(CliError::Usage("--thresholds must be at least 2".into()));
    }
    let points = pr_from_outcomes(&outcomes, eps, &default_thresholds(&outcomes, n));
    fs::create_dir_all(out)?;
    fs::write(out.join("pr.csv"), pr_csv(&points))?;
    let max_f1 = points
        .iter()
        .map(|p| {
            if p.precision + p.recall > 0.0 {
                2.0 * p.precision * p.recall / (p.precision + p.recall)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    emit(
        Some(out),
        "pr.json",
        &PrSummary {
            queries: labeled.len(),
            epsilon: eps,
            thresholds: n,
            max_f1,
        },
    )
}

struct LocalizeRun {
    queries: usize,
    rows: Vec<LocalizationRow>,
    failures: Vec<(u64, String)>,
}

fn run_localize(s: &Settings) -> CliResult<LocalizeRun> {
    let (db, ckpt) = load_db_and_checkpoint(s)?;
    let mappings = load_mappings(&db, s.require(&s.mappings, "mappings")?)?;
    let (queries, labeled) = describe_queries(s, &ckpt)?;
    let eps = s.epsilon();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((cloud, _), (q, pose)) in queries.entries.iter().zip(&labeled) {
        match localize(&db, &mappings, q, eps) {
            Ok(loc) => rows.push(LocalizationRow {
                query_id: cloud.frame_id,
                estimate: loc.position,
                truth: pose.xy(),
            }),
            Err(
                e @ (Error::Underdetermined(_) | Error::Collinear(_) | Error::NonConvergence(_)),
            ) => {
                log::warn!("query {}: {e}", cloud.frame_id);
                failures.push((cloud.frame_id, e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(LocalizeRun {
        queries: labeled.len(),
        rows,
        failures,
    })
}

#[derive(Serialize)]
struct FailureJson {
    query_id: u64,
    reason: String,
}

#[derive(Serialize)]
struct LocalizeSummary {
    queries: usize,
    localized: usize,
    failures: Vec<FailureJson>,
}

fn failures_json(run: &LocalizeRun) -> Vec<FailureJson> {
    run.failures
        .iter()
        .map(|(id, r)| FailureJson {
            query_id: *id,
            reason: r.clone(),
        })
        .collect()
}

pub fn localize_cmd(s: &Settings) -> CliResult<()> {
    let out = out_dir(s)?;
    let run = run_localize(s)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("localization.csv"), localization_csv(&run.rows))?;
    let summary = LocalizeSummary {
        queries: run.queries,
        localized: run.rows.len(),
        failures: failures_json(&run),
    };
    emit(Some(out), "localize.json", &summary)
}

#[derive(Serialize)]
struct AteSummary {
    queries: usize,
    localized: usize,
    mean: f64,
    median: f64,
    failures: Vec<FailureJson>,
}

pub fn eval_ate(s: &Settings) -> CliResult<()> {
    let out = out_dir(s)?;
    let run = run_localize(s)?;
    if run.rows.is_empty() {
        return Err(Error::Empty("no query could be localized".into()).into());
    }
    let est: Vec<_> = run.rows.iter().map(|r| r.estimate).collect();
    let gt: Vec<_> = run.rows.iter().map(|r| r.truth).collect();
    let report = ate(&est, &gt, &ATE_THRESHOLDS)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("localization.csv"), localization_csv(&run.rows))?;
    let mut cdf = String::from("threshold,fraction\n");
    for (t, f) in &report.cdf {
        cdf.push_str(&format!("{t},{f}\n"));
    }
    fs::write(out.join("ate_cdf.csv"), cdf)?;
    let summary = AteSummary {
        queries: run.queries,
        localized: run.rows.len(),
        mean: report.mean,
        median: report.median,
        failures: failures_json(&run),
    };
    emit(Some(out), "ate.json", &summary)
}
