use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevplace::checkpoint::Checkpoint;
use bevplace::ingest::{read_dataset, Pose, Split};
use bevplace::netvlad::GlobalDescriptor;
use bevplace::position::{ate, localize, parse_mapping_csv, MappingModel};
use bevplace::retrieval::DescriptorDb;
use bevplace::trainer::{mine_triplets, TrainConfig};
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--grid-size",
    "1.6",
    "--num-points",
    "1024",
    "--channels",
    "2,4",
    "--clusters",
    "4",
];

macro_rules! argv {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

fn bevplace(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevplace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[String]) -> serde_json::Value {
    let out = bevplace(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// synth -> train -> build-db on a 30-frame scene with 10 queries, default
/// network so the mapping fits have structure to work with.
struct Pipeline {
    _tmp: TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let p = Self { _tmp: tmp, root };
        ok(&argv![
            "synth",
            "--seed",
            "4",
            "--frames",
            "30",
            "--spacing",
            "2",
            "--query-count",
            "10",
            "--query-offset",
            "3",
            "--out",
            p.arg("scene")
        ]);
        let train = argv![
            "train",
            "--seed",
            "1",
            "--data",
            p.arg("scene/database"),
            "--out",
            p.arg("model"),
            "--batches-per-epoch",
            "2",
            "--learning-rate",
            "0.01"
        ];
        ok(&train);
        ok(&argv![
            "build-db",
            "--data",
            p.arg("scene/database"),
            "--checkpoint",
            p.arg("model/checkpoint.bin"),
            "--db",
            p.arg("db.bin"),
            "--out",
            p.arg("maps")
        ]);
        p
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        s(&self.path(rel))
    }
}

#[test]
fn synth_writes_scans_and_poses() {
    let tmp = TempDir::new().unwrap();
    let v = ok(&argv!["synth", "--frames", "10", "--out", s(tmp.path())]);
    assert_eq!(v["frames"], 10);
    let db = tmp.path().join("database");
    assert_eq!(fs::read_dir(db.join("velodyne")).unwrap().count(), 10);
    assert_eq!(
        fs::read_to_string(db.join("poses.txt"))
            .unwrap()
            .lines()
            .count(),
        10
    );
    assert!(!tmp.path().join("queries").exists());
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for t in [&a, &b] {
        ok(&argv![
            "synth",
            "--seed",
            "11",
            "--frames",
            "6",
            "--query-count",
            "3",
            "--out",
            s(t.path())
        ]);
    }
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let out = bevplace(&argv![
        "synth",
        "--frames",
        "3",
        "--out",
        s(&file.join("sub"))
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bevplace(&argv!["no-such-command"]).status.code(), Some(1));
    assert_eq!(bevplace(&argv!["synth"]).status.code(), Some(1));
    assert_eq!(
        bevplace(&argv!["synth", "--frames", "zero"]).status.code(),
        Some(1)
    );
    assert_eq!(bevplace(&argv!["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "frames = 7\nspacing = 3.0\n").unwrap();
    let v = ok(&argv![
        "synth",
        "--config",
        s(&cfg),
        "--frames",
        "5",
        "--out",
        s(&tmp.path().join("o"))
    ]);
    assert_eq!(v["frames"], 5);
    assert_eq!(v["spacing"], 3.0);
    fs::write(&cfg, "frame_count = 7\n").unwrap();
    assert_eq!(
        bevplace(&argv!["synth", "--config", s(&cfg), "--out", s(tmp.path())])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        bevplace(&argv![
            "synth",
            "--config",
            s(&tmp.path().join("missing.toml"))
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn train_log_has_one_row_per_mined_batch() {
    let tmp = TempDir::new().unwrap();
    ok(&argv![
        "synth",
        "--seed",
        "2",
        "--frames",
        "16",
        "--spacing",
        "2",
        "--out",
        s(tmp.path())
    ]);
    let data = tmp.path().join("database");
    let mut args = argv![
        "train",
        "--epochs",
        "2",
        "--seed",
        "5",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("m"))
    ];
    args.extend(SMALL.iter().map(|a| a.to_string()));
    let v = ok(&args);

    let ds = read_dataset(&data, Split::Database).unwrap();
    let per_epoch = mine_triplets(&ds, &TrainConfig::default(), 0)
        .unwrap()
        .len();
    let rows = fs::read_to_string(tmp.path().join("m/loss.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(rows, 2 * per_epoch);
    assert_eq!(v["steps"], 2 * per_epoch);
    assert_eq!(v["epoch_mean_loss"].as_array().unwrap().len(), 2);
    let ckpt = Checkpoint::load(&tmp.path().join("m/checkpoint.bin")).unwrap();
    assert_eq!(ckpt.model.net_config.channels, vec![2, 4]);
    assert_eq!(ckpt.raster.grid_size, 1.6);
}

#[test]
fn train_without_positive_pairs_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    ok(&argv![
        "synth",
        "--frames",
        "12",
        "--spacing",
        "10",
        "--out",
        s(tmp.path())
    ]);
    let out = bevplace(&argv![
        "train",
        "--data",
        s(&tmp.path().join("database")),
        "--out",
        s(&tmp.path().join("m"))
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_divergence_exits_four() {
    let tmp = TempDir::new().unwrap();
    ok(&argv![
        "synth",
        "--frames",
        "14",
        "--spacing",
        "2",
        "--out",
        s(tmp.path())
    ]);
    let mut args = argv![
        "train",
        "--data",
        s(&tmp.path().join("database")),
        "--out",
        s(&tmp.path().join("m")),
        "--batches-per-epoch",
        "6",
        "--epochs",
        "3"
    ];
    args.extend(SMALL.iter().map(|a| a.to_string()));
    args.extend(argv!["--learning-rate", "1e300"]);
    assert_eq!(bevplace(&args).status.code(), Some(4));
}

#[test]
fn build_db_is_complete_and_reproducible() {
    let p = Pipeline::new();
    let db = DescriptorDb::load(&p.path("db.bin")).unwrap();
    assert_eq!(db.len(), 30);
    let first = fs::read(p.path("db.bin")).unwrap();
    ok(&argv![
        "build-db",
        "--data",
        p.arg("scene/database"),
        "--checkpoint",
        p.arg("model/checkpoint.bin"),
        "--db",
        p.arg("db2.bin"),
        "--out",
        p.arg("maps2")
    ]);
    assert_eq!(first, fs::read(p.path("db2.bin")).unwrap());

    // one row per frame whose own fit succeeds, checked against the library
    let rows =
        parse_mapping_csv(&fs::read_to_string(p.path("maps/mappings.csv")).unwrap()).unwrap();
    let expected: Vec<MappingModel> = (0..db.len())
        .filter_map(|i| bevplace::position::fit_anchor(&db, i).ok())
        .collect();
    assert_eq!(rows, expected);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(p.path("maps/build_db.json")).unwrap()).unwrap();
    assert_eq!(summary["anchor_fits"], expected.len());
    assert_eq!(summary["fallbacks"], 30 - expected.len());
}

#[test]
fn query_ranks_a_database_scan_first() {
    let p = Pipeline::new();
    let scan = p.path("scene/database/velodyne/000000.bin");
    let v = ok(&argv![
        "query",
        "--checkpoint",
        p.arg("model/checkpoint.bin"),
        "--db",
        p.arg("db.bin"),
        "--scan",
        s(&scan),
        "--k",
        "3"
    ]);
    let m = v["matches"].as_array().unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m[0]["frame_id"], 0);
    assert_eq!(m[0]["distance"], 0.0);
}

#[test]
fn recall_is_one_for_database_frames_as_queries() {
    let p = Pipeline::new();
    let v = ok(&argv![
        "eval-recall",
        "--checkpoint",
        p.arg("model/checkpoint.bin"),
        "--db",
        p.arg("db.bin"),
        "--queries",
        p.arg("scene/database"),
        "--out",
        p.arg("eval")
    ]);
    assert_eq!(v["recall_at_1"], 1.0);
    assert_eq!(v["recall_at_1_percent"], 1.0);
    assert_eq!(v["queries"], 30);
    assert_eq!(
        fs::read_to_string(p.path("eval/recall.csv"))
            .unwrap()
            .lines()
            .count(),
        31
    );
}

#[test]
fn pr_curve_has_one_row_per_threshold() {
    let p = Pipeline::new();
    ok(&argv![
        "eval-pr",
        "--checkpoint",
        p.arg("model/checkpoint.bin"),
        "--db",
        p.arg("db.bin"),
        "--queries",
        p.arg("scene/queries"),
        "--thresholds",
        "10",
        "--out",
        p.arg("eval")
    ]);
    let csv = fs::read_to_string(p.path("eval/pr.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(csv.lines().next(), Some("threshold,precision,recall"));
}

#[test]
fn ate_summary_matches_the_library() {
    let p = Pipeline::new();
    let args = argv![
        "eval-ate",
        "--checkpoint",
        p.arg("model/checkpoint.bin"),
        "--db",
        p.arg("db.bin"),
        "--queries",
        p.arg("scene/queries"),
        "--mappings",
        p.arg("maps"),
        "--out",
        p.arg("ate")
    ];
    let out = bevplace(&args);
    let code = out.status.code();

    let db = DescriptorDb::load(&p.path("db.bin")).unwrap();
    let ckpt = Checkpoint::load(&p.path("model/checkpoint.bin")).unwrap();
    let fitted =
        parse_mapping_csv(&fs::read_to_string(p.path("maps/mappings.csv")).unwrap()).unwrap();
    let global = fs::read_to_string(p.path("maps/global_mapping.csv"))
        .ok()
        .map(|t| parse_mapping_csv(&t).unwrap()[0]);
    let mappings: Vec<MappingModel> = db
        .entries()
        .iter()
        .map(|e| {
            fitted
                .iter()
                .find(|m| m.frame_id == e.frame_id)
                .copied()
                .unwrap_or(MappingModel {
                    frame_id: e.frame_id,
                    ..global.unwrap()
                })
        })
        .collect();
    let queries = read_dataset(&p.path("scene/queries"), Split::Query).unwrap();
    let (mut est, mut gt) = (Vec::new(), Vec::new());
    for (c, pose) in &queries.entries {
        let q: GlobalDescriptor = ckpt
            .model
            .describe_cloud(c, &ckpt.raster, c.frame_id)
            .unwrap();
        if let Ok(loc) = localize(&db, &mappings, &q, 5.0) {
            est.push(loc.position);
            gt.push(Pose::xy(pose));
        }
    }
    if est.is_empty() {
        assert_eq!(code, Some(3));
        return;
    }
    assert_eq!(code, Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let report = ate(&est, &gt, &[1.0]).unwrap();
    assert_eq!(v["localized"], est.len());
    assert_eq!(v["queries"], 10);
    assert_eq!(v["mean"].as_f64().unwrap(), report.mean);
    assert_eq!(v["median"].as_f64().unwrap(), report.median);
    let loc_rows = fs::read_to_string(p.path("ate/localization.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(loc_rows, est.len());

    let v2 = ok(&argv![
        "localize",
        "--checkpoint",
        p.arg("model/checkpoint.bin"),
        "--db",
        p.arg("db.bin"),
        "--queries",
        p.arg("scene/queries"),
        "--mappings",
        p.arg("maps"),
        "--out",
        p.arg("loc")
    ]);
    assert_eq!(v2["localized"], est.len());
    assert_eq!(
        fs::read(p.path("loc/localization.csv")).unwrap(),
        fs::read(p.path("ate/localization.csv")).unwrap()
    );
}

#[test]
fn fit_failure_exits_five() {
    let tmp = TempDir::new().unwrap();
    let mut db = DescriptorDb::new(2);
    for i in 0..12u64 {
        db.insert(
            i,
            &GlobalDescriptor(vec![1.0, 0.0]),
            Pose::from_xy_yaw(i as f64, 0.0, 0.0),
        )
        .unwrap();
    }
    let path = tmp.path().join("flat.bin");
    db.save(&path).unwrap();
    let out = bevplace(&argv![
        "fit-mapping",
        "--db",
        s(&path),
        "--out",
        s(tmp.path())
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn missing_inputs_are_io_errors() {
    let tmp = TempDir::new().unwrap();
    let out = bevplace(&argv![
        "fit-mapping",
        "--db",
        s(&tmp.path().join("none.bin")),
        "--out",
        s(tmp.path())
    ]);
    assert_eq!(out.status.code(), Some(2));
}
