use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use hydra_plan::model::{save_checkpoint, Checkpoint, HeadLayout, ModelConfig, StudentModel};
use hydra_plan::vocab::{sample_trajectories, KinematicConfig, Vocabulary};
use hydra_plan_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hp_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn small_vocab() -> Vocabulary {
    let trajs = sample_trajectories(12, &KinematicConfig::default(), 3).unwrap();
    Vocabulary::new(trajs, 1.0).unwrap()
}

fn small_model(heads: HeadLayout) -> StudentModel {
    let cfg = ModelConfig { d_model: 8, encoder_hidden: vec![8], traj_hidden: 8, ffn_hidden: 8, heads, ..ModelConfig::default() };
    StudentModel::new(cfg, 5).unwrap()
}

#[test]
fn version_and_constants() {
    let v = unsafe { CStr::from_ptr(hp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(hp_num_metrics(), 5);
    assert_eq!(hp_observation_raster_len(), 2 * 32 * 32);
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(hp_scenario_generate(1, ptr::null_mut()), HpStatus::NullPointer);
        assert!(last_error().contains("out"), "{}", last_error());
        let mut out = ptr::null_mut();
        assert_eq!(hp_vocabulary_load(ptr::null(), &mut out), HpStatus::NullPointer);
        assert!(out.is_null());
        assert_eq!(hp_vocabulary_len(ptr::null()), 0);
        assert_eq!(hp_model_num_heads(ptr::null()), 0);
        hp_scenario_free(ptr::null_mut());
        hp_vocabulary_free(ptr::null_mut());
        hp_model_free(ptr::null_mut());
        hp_string_free(ptr::null_mut());
    }
}

#[test]
fn scenario_render_and_json() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(hp_scenario_generate(11, &mut s), HpStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(hp_scenario_to_json(s, &mut json), HpStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        hp_string_free(json);
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed.is_object());

        let n = hp_observation_raster_len();
        let mut raster = vec![0.0; n];
        let mut ego = [0.0; 4];
        assert_eq!(hp_observation_render(s, 2, raster.as_mut_ptr(), n, ego.as_mut_ptr()), HpStatus::Ok);
        let mut again = vec![0.0; n];
        assert_eq!(hp_observation_render(s, 2, again.as_mut_ptr(), n, ego.as_mut_ptr()), HpStatus::Ok);
        assert_eq!(raster, again);
        assert!(raster.iter().all(|v| v.is_finite()));

        assert_eq!(
            hp_observation_render(s, 2, raster.as_mut_ptr(), n - 1, ego.as_mut_ptr()),
            HpStatus::InvalidArgument
        );
        assert!(!last_error().is_empty());
        hp_scenario_free(s);
    }
}

#[test]
fn pdm_score_matches_formula_and_rejects_bad_rows() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(hp_pdm_score([1.0, 1.0, 1.0, 0.0, 0.5].as_ptr(), &mut out), HpStatus::Ok);
        assert!((out - 7.5 / 12.0).abs() < 1e-12);
        assert_eq!(hp_pdm_score([0.0, 1.0, 1.0, 1.0, 1.0].as_ptr(), &mut out), HpStatus::Ok);
        assert_eq!(out, 0.0);
        assert_eq!(hp_pdm_score([0.5, 1.0, 1.0, 1.0, 1.0].as_ptr(), &mut out), HpStatus::InvalidArgument);
    }
}

#[test]
fn vocabulary_simulate_and_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = small_vocab();
    let vpath = dir.path().join("v.bin");
    vocab.save(&vpath).unwrap();
    let model = small_model(HeadLayout::MultiTarget);
    let mpath = dir.path().join("m.ckpt");
    save_checkpoint(&mpath, &Checkpoint::new(model.clone(), vocab.content_hash())).unwrap();

    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(hp_vocabulary_load(cpath(&vpath).as_ptr(), &mut v), HpStatus::Ok);
        let k = hp_vocabulary_len(v);
        assert_eq!(k, 12);

        let mut poses = vec![0.0; 3 * 40];
        assert_eq!(hp_vocabulary_entry(v, 4, poses.as_mut_ptr(), poses.len()), HpStatus::Ok);
        assert_eq!(poses[3 * 39], vocab.get(4).poses[39].x);
        assert_eq!(hp_vocabulary_entry(v, k, poses.as_mut_ptr(), poses.len()), HpStatus::InvalidArgument);

        let mut s = ptr::null_mut();
        assert_eq!(hp_scenario_generate(4, &mut s), HpStatus::Ok);
        let mut scores = vec![0.0; k * 5];
        assert_eq!(hp_simulate(s, v, scores.as_mut_ptr(), scores.len()), HpStatus::Ok);
        for row in scores.chunks(5) {
            let mut pdm = 0.0;
            assert_eq!(hp_pdm_score(row.as_ptr(), &mut pdm), HpStatus::Ok);
            assert!((0.0..=1.0).contains(&pdm));
        }

        let mut m = ptr::null_mut();
        assert_eq!(hp_model_load(cpath(&mpath).as_ptr(), &mut m), HpStatus::Ok);
        assert_eq!(hp_model_num_heads(m), 5);

        let n = hp_observation_raster_len();
        let mut raster = vec![0.0; n];
        let mut ego = [0.0; 4];
        assert_eq!(hp_observation_render(s, 9, raster.as_mut_ptr(), n, ego.as_mut_ptr()), HpStatus::Ok);
        let mut imitation = vec![0.0; k];
        let mut metric = vec![0.0; k * 5];
        assert_eq!(
            hp_model_forward(m, v, raster.as_ptr(), n, ego.as_ptr(), imitation.as_mut_ptr(), k, metric.as_mut_ptr(), metric.len()),
            HpStatus::Ok
        );
        assert!((imitation.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let obs = hydra_plan::world::Observation {
            grid_size: 32,
            cell_size: hydra_plan::world::NoiseConfig::default().cell_size,
            bev_raster: raster.clone(),
            ego_status: ego,
        };
        let direct = model.forward(&obs, &vocab).unwrap();
        assert_eq!(direct.imitation, imitation);
        assert_eq!(direct.metric_scores, metric);

        let weights = [0.1, 1.0, 1.0, 1.0];
        let mut idx = usize::MAX;
        assert_eq!(hp_select(imitation.as_ptr(), metric.as_ptr(), k, 5, weights.as_ptr(), &mut idx), HpStatus::Ok);
        let w = hydra_plan::infer::CostWeights::from_array(weights);
        assert_eq!(idx, hydra_plan::infer::select_index(&direct, &w));

        assert_eq!(
            hp_model_forward(m, v, raster.as_ptr(), n, ego.as_ptr(), imitation.as_mut_ptr(), k - 1, metric.as_mut_ptr(), metric.len()),
            HpStatus::InvalidArgument
        );
        let bad = [0.1, -1.0, 1.0, 1.0];
        assert_eq!(hp_select(imitation.as_ptr(), metric.as_ptr(), k, 5, bad.as_ptr(), &mut idx), HpStatus::Config);
        assert_eq!(hp_select(imitation.as_ptr(), metric.as_ptr(), k, 3, weights.as_ptr(), &mut idx), HpStatus::InvalidArgument);

        hp_model_free(m);
        hp_scenario_free(s);
        hp_vocabulary_free(v);
    }
}

#[test]
fn truncated_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let vpath = dir.path().join("v.bin");
    small_vocab().save(&vpath).unwrap();
    let bytes = std::fs::read(&vpath).unwrap();
    std::fs::write(&vpath, &bytes[..bytes.len() - 7]).unwrap();
    unsafe {
        let mut v = ptr::null_mut();
        let status = hp_vocabulary_load(cpath(&vpath).as_ptr(), &mut v);
        assert_eq!(status, HpStatus::Format);
        assert!(v.is_null());
        let mut m = ptr::null_mut();
        assert_eq!(hp_model_load(cpath(&dir.path().join("missing")).as_ptr(), &mut m), HpStatus::Io);
        assert!(last_error().contains("missing"), "{}", last_error());
    }
}

#[test]
fn pdm_only_model_has_one_head() {
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("p.ckpt");
    save_checkpoint(&mpath, &Checkpoint::new(small_model(HeadLayout::PdmOnly), "x")).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(hp_model_load(cpath(&mpath).as_ptr(), &mut m), HpStatus::Ok);
        assert_eq!(hp_model_num_heads(m), 1);
        hp_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/hydra_plan.h")).unwrap();
    for name in ["hp_model_forward", "hp_select", "hp_simulate", "HP_STATUS_INTEGRITY", "typedef struct HpModel HpModel"] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let probe = std::process::Command::new(&cc)
        .args(["-fsyntax-only", "-x", "c", "-"])
        .arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include")))
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn();
    let Ok(mut child) = probe else {
        eprintln!("no C compiler, syntax check skipped");
        return;
    };
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"#include \"hydra_plan.h\"\nint main(void){return HP_STATUS_OK;}\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
