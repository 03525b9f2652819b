mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use hydra_plan::error::Error;
use hydra_plan::infer::{argmax_first, select_index, CostWeights};
use hydra_plan::metrics::score_trajectory;
use hydra_plan::model::{HeadLayout, PredictionBundle};
use hydra_plan::pipeline::*;
use hydra_plan::train::*;
use hydra_plan::vocab::build_vocabulary;
use rand::{Rng, SeedableRng};

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

fn small_dataset(dir: &Path) -> Dataset {
    let cfg = common::small_config();
    let v = &cfg.vocab;
    let (vocab, _) = build_vocabulary(v.n_samples, &v.kinematics, v.sample_seed, &v.kmeans, &dir.join("v.bin")).unwrap();
    build_dataset(&cfg, &vocab).unwrap()
}

#[test]
fn splits_are_disjoint_and_labels_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = common::small_config();
    let ids: Vec<HashSet<&str>> = [&data.train, &data.val, &data.test]
        .iter()
        .map(|s| s.scenarios.iter().map(|x| x.id.as_str()).collect())
        .collect();
    assert!(ids[0].is_disjoint(&ids[1]) && ids[0].is_disjoint(&ids[2]) && ids[1].is_disjoint(&ids[2]));
    assert_eq!(ids.iter().map(|s| s.len()).sum::<usize>(), 24 + 8 + 10);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let split = [&data.train, &data.val, &data.test][rng.gen_range(0..3)];
        let s = rng.gen_range(0..split.len());
        let i = rng.gen_range(0..data.vocab.len());
        let scenario = &split.scenarios[s];
        let fresh = score_trajectory(scenario, &data.vocab.get(i).to_world(&scenario.ego_start.pose), &cfg.metrics);
        assert_eq!(split.labels[s].scores[i], fresh, "{} entry {i}", scenario.id);
    }
}

#[test]
fn rebuilt_dataset_is_byte_identical_and_tampering_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ma = save_dataset(&a, &data).unwrap();
    save_dataset(&b, &small_dataset(dir.path())).unwrap();
    for f in [&ma.train.labels, &ma.test.labels, &ma.val.observations, &ma.train.scenarios] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());

    let other = common::small_config();
    let mut kin = other.vocab.kinematics.clone();
    kin.max_speed += 1.0;
    let (wrong_vocab, _) = build_vocabulary(400, &kin, 0, &other.vocab.kmeans, &dir.path().join("w.bin")).unwrap();
    assert!(matches!(load_dataset(&a, &wrong_vocab), Err(Error::Integrity(_))));

    let labels = a.join(&ma.train.labels);
    let mut bytes = fs::read(&labels).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 1;
    fs::write(&labels, bytes).unwrap();
    assert!(matches!(load_dataset(&a, &data.vocab), Err(Error::Integrity(_))));
}

#[test]
fn oracle_and_perfect_predictor_reach_the_vocabulary_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let k = data.vocab.len();
    for labels in &data.test.labels {
        let pdm = labels.pdm();
        let best = pdm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(pdm[argmax_first(&pdm)], best);
        let perfect = PredictionBundle {
            imitation: vec![1.0 / k as f64; k],
            metric_scores: labels
                .scores
                .iter()
                .flat_map(|s| s.to_array().map(|v| v.clamp(1e-6, 1.0 - 1e-6)))
                .collect(),
            heads: HeadLayout::MultiTarget,
        };
        assert_eq!(pdm[select_index(&perfect, &CostWeights::default())], best);
    }
}

#[test]
fn training_curve_is_finite_and_best_dominates_final() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = common::small_config();
    for d in [Distillation::None, Distillation::MultiTarget, Distillation::PdmOnly] {
        let res = fit(&cfg, &data, d, 3).unwrap();
        assert_eq!(res.curve.len(), cfg.optim.epochs + 1);
        assert!(res.curve.iter().skip(1).all(|r| r.train_loss.is_finite()));
        assert!(res.best_val_pdm() >= res.final_val_pdm());
        assert_eq!(res.best.model.config.heads, d.heads());
        if d == Distillation::None {
            assert_eq!(cfg.lambda_kd(d), 0.0);
        }
    }
}

#[test]
fn evaluation_reports_recompute_and_reject_missing_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = common::small_config();
    let res = fit(&cfg, &data, Distillation::MultiTarget, 0).unwrap();
    let members = [(&res.best, 1.0)];
    let report = evaluate("t", &members, &data.test, &data.vocab, InferenceMode::AssembledCost, None, &cfg).unwrap();
    let n = report.records.len() as f64;
    let mean_pdm = 100.0 * report.records.iter().map(|r| r.pdm).sum::<f64>() / n;
    assert!((report.summary.score - mean_pdm).abs() < 1e-9);
    for v in [report.summary.nc, report.summary.dac, report.summary.ep, report.summary.ttc, report.summary.comfort] {
        assert!((0.0..=100.0).contains(&v));
    }
    let err = evaluate("t", &members, &data.test, &data.vocab, InferenceMode::AssembledCostGrid, None, &cfg);
    assert!(matches!(err, Err(Error::Config(_))));

    let out = dir.path().join("r");
    write_report(&out, "x", &report).unwrap();
    assert_eq!(read_report(&out, "x").unwrap(), report);
}

#[test]
fn vocab_only_run_writes_vocabulary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config();
    cfg.through = StageKind::Vocab;
    let out = run_pipeline(&cfg, dir.path(), &mut quiet()).unwrap();
    assert!(out.table.is_empty());
    assert_eq!(out.manifest.stages.len(), 1);
    assert!(out.manifest.vocab_hash.is_some() && out.manifest.dataset_hash.is_none());
    let mut top: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["config.toml", "manifest.json", "stages"]);
    let stages: Vec<_> = fs::read_dir(dir.path().join("stages")).unwrap().collect();
    assert_eq!(stages.len(), 1);
}

#[test]
fn rerun_is_fully_cached_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config();
    let first = run_pipeline(&cfg, dir.path(), &mut quiet()).unwrap();
    assert!(first.manifest.status.iter().all(|s| !s.cached));
    let table = fs::read(dir.path().join("table.json")).unwrap();
    let report_names = first.table.iter().flat_map(|r| r.reports.clone()).collect::<Vec<_>>();
    assert!(!report_names.is_empty());
    let reports: Vec<Vec<u8>> = report_names.iter().map(|s| fs::read(dir.path().join("reports").join(format!("{s}.csv"))).unwrap()).collect();

    let mut lines = Vec::new();
    let second = run_pipeline(&cfg, dir.path(), &mut |l: &str| lines.push(l.to_string())).unwrap();
    let stage_status: Vec<_> = second.manifest.status.iter().filter(|s| s.name != "report").collect();
    assert!(stage_status.iter().all(|s| s.cached), "{:?}", second.manifest.status);
    assert!(lines.iter().all(|l| l.starts_with("[cached]")), "{lines:?}");
    assert_eq!(second.table, first.table);
    assert_eq!(fs::read(dir.path().join("table.json")).unwrap(), table);
    for (name, bytes) in report_names.iter().zip(&reports) {
        assert_eq!(&fs::read(dir.path().join("reports").join(format!("{name}.csv"))).unwrap(), bytes);
    }
    let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    manifest.check_references().unwrap();
    for row in [ROW_ORACLE, ROW_IMITATION, ROW_POST_PROCESS, ROW_PDM_ONLY, ROW_MULTI, ROW_MULTI_W, ROW_ENSEMBLE, ROW_ENSEMBLE_W] {
        assert!(second.row(row).is_some(), "missing row {row}");
    }
}

#[test]
fn corrupted_label_store_stops_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config();
    cfg.through = StageKind::Data;
    let out = run_pipeline(&cfg, dir.path(), &mut quiet()).unwrap();
    let data_stage = out.manifest.stages.iter().find(|s| s.name == "data").unwrap();
    let labels = data_stage.outputs.keys().find(|f| f.starts_with("train") && f.ends_with("labels.bin")).unwrap();
    let path = dir.path().join(&data_stage.dir).join(labels);
    let mut bytes = fs::read(&path).unwrap();
    bytes[40] ^= 0xff;
    fs::write(&path, bytes).unwrap();

    cfg.through = StageKind::Report;
    let mut lines = Vec::new();
    let err = run_pipeline(&cfg, dir.path(), &mut |l: &str| lines.push(l.to_string())).unwrap_err();
    match err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "data");
            assert!(matches!(*source, Error::Integrity(_)));
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(!lines.iter().any(|l| l.contains("fit/")), "{lines:?}");
    assert!(!fs::read_dir(dir.path().join("stages")).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("fit-")));
}
