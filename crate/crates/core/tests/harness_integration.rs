//! Harness-level integration: config assembly, checkpoint round-trips,
//! deterministic training logs, penalty-mode equivalence at lambda 0,
//! evaluation behavior, dumps, interpolation records, and report CSVs.

use std::fs;
use std::path::PathBuf;

use daft_core::harness::checkpoint::{load_checkpoint, save_checkpoint};
use daft_core::harness::config::{build_config, RunConfig};
use daft_core::harness::dump;
use daft_core::harness::eval::{evaluate, RunSummary};
use daft_core::harness::report;
use daft_core::harness::train::train;
use daft_core::metrics;
use daft_core::model::ModelKind;
use daft_core::ode::Method;
use daft_core::taskgen;
use tempfile::TempDir;

fn write_dataset(dir: &TempDir, n_train: usize, n_val: usize, seed: u64) -> (String, String) {
    let ds = taskgen::generate_dataset(n_train, n_val, seed);
    let train_path = dir.path().join("train.jsonl");
    let val_path = dir.path().join("val.jsonl");
    taskgen::write_jsonl(&ds.train, fs::File::create(&train_path).unwrap()).unwrap();
    taskgen::write_jsonl(&ds.val, fs::File::create(&val_path).unwrap()).unwrap();
    (
        train_path.to_string_lossy().into_owned(),
        val_path.to_string_lossy().into_owned(),
    )
}

fn small_config(model: &str, dir: &TempDir, seed: u64) -> RunConfig {
    let (train_path, val_path) = write_dataset(dir, 500, 120, 1234);
    build_config(
        None,
        &[
            ("preset".into(), "custom".into()),
            ("model".into(), model.into()),
            ("steps".into(), "2".into()),
            ("d".into(), "32".into()),
            ("e".into(), "16".into()),
            ("lr".into(), "1e-3".into()),
            ("batch_size".into(), "32".into()),
            ("max_epochs".into(), "2".into()),
            ("seed".into(), seed.to_string()),
            ("tlt_subset".into(), "50".into()),
            ("data_train".into(), train_path),
            ("data_val".into(), val_path),
        ],
    )
    .unwrap()
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(
        &cfg_path,
        "# comment line\nmodel = daft\nsteps=3\nlr = 5e-4\nd=32\n",
    )
    .unwrap();
    let cfg = build_config(
        Some(&cfg_path),
        &[("steps".into(), "5".into()), ("e".into(), "16".into())],
    )
    .unwrap();
    assert_eq!(cfg.model, ModelKind::Daft);
    assert_eq!(cfg.steps, 5, "flags win over the file");
    assert_eq!(cfg.lr, 5e-4);
    assert_eq!(cfg.e, 16);
    assert_eq!(cfg.d, 32);

    assert!(build_config(None, &[("nope".into(), "1".into())]).is_err());
    assert!(build_config(None, &[("steps".into(), "zero".into())]).is_err());
}

#[test]
fn residual_model_forces_single_step_euler_training() {
    let cfg = build_config(None, &[("model".into(), "daft_residual".into())]).unwrap();
    assert_eq!(cfg.train_solver.method, Method::Euler);
    assert_eq!(cfg.train_solver.fixed_steps, 1);
    // Evaluation solver stays independently configurable.
    assert_eq!(cfg.eval_solver.method, Method::Dopri5);
}

#[test]
fn paper_preset_keeps_original_widths() {
    let cfg = build_config(None, &[("preset".into(), "paper".into())]).unwrap();
    assert_eq!((cfg.d, cfg.e), (512, 300));
    assert_eq!(cfg.lr, 1e-4);
    let desk = build_config(None, &[]).unwrap();
    assert_eq!((desk.d, desk.e), (64, 32));
}

#[test]
fn training_twice_gives_byte_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("mac", &dir, 7);
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    train(&cfg, &out_a).unwrap();
    train(&cfg, &out_b).unwrap();
    for file in ["train_log.csv", "checkpoint.json", "summary.json"] {
        let a = fs::read(out_a.join(file)).unwrap();
        let b = fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn zero_lambda_penalty_matches_plain_mac() {
    let dir = TempDir::new().unwrap();
    let cfg_mac = small_config("mac", &dir, 11);
    let out_mac = dir.path().join("mac");
    let mac = train(&cfg_mac, &out_mac).unwrap();

    let dir2 = TempDir::new().unwrap();
    let mut cfg_penalty = small_config("mac_tlt_penalty", &dir2, 11);
    cfg_penalty.lambda = 0.0;
    let out_pen = dir2.path().join("penalty");
    let pen = train(&cfg_penalty, &out_pen).unwrap();

    for (a, b) in mac.log.iter().zip(pen.log.iter()) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_acc.to_bits(), b.val_acc.to_bits());
    }
}

#[test]
fn positive_lambda_changes_the_loss() {
    let dir = TempDir::new().unwrap();
    let cfg_mac = small_config("mac", &dir, 13);
    let mac = train(&cfg_mac, &dir.path().join("mac")).unwrap();

    let dir2 = TempDir::new().unwrap();
    let mut cfg_penalty = small_config("mac_tlt_penalty", &dir2, 13);
    cfg_penalty.lambda = 0.5;
    let pen = train(&cfg_penalty, &dir2.path().join("pen")).unwrap();
    assert_ne!(
        mac.log[0].train_loss.to_bits(),
        pen.log[0].train_loss.to_bits()
    );
}

#[test]
fn checkpoint_round_trip_is_exact_and_detects_mismatch() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("daft", &dir, 17);
    let out = dir.path().join("run");
    train(&cfg, &out).unwrap();
    let ckpt = out.join("checkpoint.json");
    let (loaded_cfg, model) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded_cfg.steps, cfg.steps);

    // Round trip reproduces the file byte for byte.
    let second = dir.path().join("resaved.json");
    save_checkpoint(&second, &loaded_cfg, &model).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&second).unwrap());

    // Corrupting a shape fails loudly.
    let text = fs::read_to_string(&ckpt).unwrap();
    let broken = text.replacen("\"shape\":[32]", "\"shape\":[33]", 1);
    assert_ne!(text, broken, "fixture should contain a [32] shape");
    let broken_path = dir.path().join("broken.json");
    fs::write(&broken_path, broken).unwrap();
    assert!(load_checkpoint(&broken_path).is_err());
}

#[test]
fn evaluation_is_repeatable_and_warns_for_mac_solver_flag() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("mac", &dir, 19);
    let out = dir.path().join("run");
    train(&cfg, &out).unwrap();
    let (loaded_cfg, model) = load_checkpoint(&out.join("checkpoint.json")).unwrap();
    let val = taskgen::load_encoded(std::path::Path::new(&cfg.data_val)).unwrap();

    let a = evaluate(&model, &loaded_cfg, &val, None).unwrap();
    let b = evaluate(&model, &loaded_cfg, &val, None).unwrap();
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.mean_tlt.to_bits(), b.mean_tlt.to_bits());
    assert!(a.warning.is_none());

    let mut spec = loaded_cfg.eval_solver;
    spec.method = Method::Rk4_38;
    let with_flag = evaluate(&model, &loaded_cfg, &val, Some(spec)).unwrap();
    assert!(with_flag.warning.is_some(), "mac must warn and ignore");
    assert_eq!(with_flag.accuracy.to_bits(), a.accuracy.to_bits());
}

#[test]
fn dump_has_t_rows_and_consistent_tlt() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("daft", &dir, 23);
    let out = dir.path().join("run");
    train(&cfg, &out).unwrap();
    let (loaded_cfg, model) = load_checkpoint(&out.join("checkpoint.json")).unwrap();
    let val = taskgen::load_encoded(std::path::Path::new(&cfg.data_val)).unwrap();

    let records = dump::dump_attention(&model, &loaded_cfg, &val, 6, 1, None).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert_eq!(r.text_attention.len(), loaded_cfg.steps);
        assert_eq!(r.kb_attention.len(), loaded_cfg.steps);
        assert_eq!(r.lt.len(), loaded_cfg.steps - 1);
        // Recomputing TLT from the dumped matrix reproduces the dumped
        // value.
        let traj = metrics::AttentionTrajectory::new(r.text_attention.clone()).unwrap();
        let recomputed = metrics::tlt(&traj).unwrap().tlt;
        assert!((recomputed - r.tlt).abs() < 1e-9);
        assert!(r.nfe.is_some());
    }

    // JSONL round trip.
    let path = dir.path().join("dump.jsonl");
    dump::write_dump_jsonl(&records, &path).unwrap();
    let back = dump::read_dump_jsonl(&path).unwrap();
    assert_eq!(back.len(), records.len());

    // Heatmap export writes one CSV and one SVG per record.
    let hm = dir.path().join("heatmaps");
    dump::write_heatmaps(&records, &hm).unwrap();
    assert!(hm.join("example_0000.csv").exists());
    assert!(hm.join("example_0000.svg").exists());
}

#[test]
fn interpolation_rate_20_has_20t_plus_1_increasing_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("daft", &dir, 29);
    let out = dir.path().join("run");
    train(&cfg, &out).unwrap();
    let (loaded_cfg, model) = load_checkpoint(&out.join("checkpoint.json")).unwrap();
    let val = taskgen::load_encoded(std::path::Path::new(&cfg.data_val)).unwrap();

    let records = dump::interpolate_dump(&model, &loaded_cfg, &val, 2, 20, None).unwrap();
    for r in &records {
        assert_eq!(r.times.len(), 20 * loaded_cfg.steps + 1);
        for w in r.times.windows(2) {
            assert!(w[1] > w[0], "sample times must strictly increase");
        }
    }

    // Fine samples also ride along in dumps.
    let with_fine = dump::dump_attention(&model, &loaded_cfg, &val, 2, 20, None).unwrap();
    for r in &with_fine {
        assert_eq!(r.fine.as_ref().unwrap().len(), 20 * loaded_cfg.steps + 1);
    }
}

#[test]
fn interpolating_the_baseline_cell_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("mac", &dir, 31);
    let out = dir.path().join("run");
    train(&cfg, &out).unwrap();
    let (loaded_cfg, model) = load_checkpoint(&out.join("checkpoint.json")).unwrap();
    let val = taskgen::load_encoded(std::path::Path::new(&cfg.data_val)).unwrap();
    let err = dump::dump_attention(&model, &loaded_cfg, &val, 2, 20, None).unwrap_err();
    assert!(err.to_string().contains("no dynamics"));
    assert!(dump::interpolate_dump(&model, &loaded_cfg, &val, 2, 20, None).is_err());
}

fn fake_summary(model: &str, steps: usize, seed: u64, tlt: f64) -> RunSummary {
    RunSummary {
        model: model.into(),
        steps,
        seed,
        best_epoch: 0,
        best_val_acc: 0.9,
        accuracy: 0.9 + seed as f64 * 1e-3,
        mean_tlt: tlt,
        tlt_ci95: None,
        per_type_tlt: [("count".to_string(), tlt), ("exist".to_string(), tlt)]
            .into_iter()
            .collect(),
        per_type_accuracy: Default::default(),
        mean_nfe: None,
        max_nfe: None,
        n_val: 100,
    }
}

fn write_summary(dir: &std::path::Path, s: &RunSummary) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(s).unwrap(),
    )
    .unwrap();
    dir.to_path_buf()
}

#[test]
fn report_aggregates_runs_and_tolerates_incomplete_dirs() {
    let dir = TempDir::new().unwrap();
    let mut runs = Vec::new();
    // Five seeds at T=2 and T=8 with constant TLT per T for mac.
    for seed in 0..5 {
        runs.push(write_summary(
            &dir.path().join(format!("mac_t2_s{seed}")),
            &fake_summary("mac", 2, seed, 1.0),
        ));
        runs.push(write_summary(
            &dir.path().join(format!("mac_t8_s{seed}")),
            &fake_summary("mac", 8, seed, 1.0),
        ));
    }
    // A single daft run and one incomplete directory.
    runs.push(write_summary(
        &dir.path().join("daft_t2_s0"),
        &fake_summary("daft", 2, 0, 0.5),
    ));
    let empty = dir.path().join("missing_run");
    fs::create_dir_all(&empty).unwrap();
    runs.push(empty);

    let out_dir = dir.path().join("report");
    let result = report::report(&runs, &out_dir).unwrap();
    assert_eq!(result.runs.len(), 11);
    assert_eq!(result.incomplete.len(), 1);

    let tlt_csv = fs::read_to_string(out_dir.join("tlt.csv")).unwrap();
    // Five-seed aggregates use the N=5 t interval; identical values
    // give width zero. A single run leaves the CI column empty.
    assert!(tlt_csv.contains("aggregate,mac,2,,1.000000,0.000000"));
    assert!(tlt_csv.contains("aggregate,daft,2,,0.500000,"));

    // Constant TLT over steps gives zero growth.
    let growth = fs::read_to_string(out_dir.join("growth.csv")).unwrap();
    assert!(growth.contains("mac,8,0.000000"), "{growth}");
    assert!(fs::read_to_string(out_dir.join("incomplete.csv"))
        .unwrap()
        .contains("missing_run"));

    let acc_csv = fs::read_to_string(out_dir.join("accuracy.csv")).unwrap();
    let agg_line = acc_csv
        .lines()
        .find(|l| l.starts_with("aggregate,mac,2"))
        .unwrap();
    // Accuracies 0.900..0.904: mean 0.902, CI half-width from the
    // t table: 2.776445 * sd/sqrt(5).
    let fields: Vec<&str> = agg_line.split(',').collect();
    let mean: f64 = fields[4].parse().unwrap();
    let hw: f64 = fields[5].parse().unwrap();
    assert!((mean - 0.902).abs() < 1e-9);
    let sd = (0..5)
        .map(|s| (0.9 + s as f64 * 1e-3 - mean).powi(2))
        .sum::<f64>()
        / 4.0;
    let expect = 2.776445105198 * sd.sqrt() / 5.0f64.sqrt();
    assert!((hw - expect).abs() < 1e-6, "{hw} vs {expect}");
}

#[test]
fn residual_training_then_adaptive_evaluation_is_valid() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config("daft_residual", &dir, 37);
    let out = dir.path().join("run");
    train(&cfg, &out).unwrap();
    let (loaded_cfg, model) = load_checkpoint(&out.join("checkpoint.json")).unwrap();
    assert_eq!(loaded_cfg.train_solver.method, Method::Euler);
    let val = taskgen::load_encoded(std::path::Path::new(&cfg.data_val)).unwrap();
    let mut spec = loaded_cfg.eval_solver;
    spec.method = Method::Dopri5;
    let report = evaluate(&model, &loaded_cfg, &val, Some(spec)).unwrap();
    assert!(report.warning.is_none());
    assert!(report.mean_nfe.unwrap() >= 7.0);
    assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
}
