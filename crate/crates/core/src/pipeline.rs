//! End-to-end experiment runner with content-addressed stage caching.
//!
//! Every stage writes into `stages/<kind>-<key>/` where `key` hashes the
//! stage's inputs (configuration slices and the content hashes of upstream
//! artifacts). A stage whose directory already holds a matching `stage.json`
//! with intact outputs is skipped. `manifest.json` at the run root records
//! what was produced and from what.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::infer::{grid_search_weights, mean_selected_pdm, CostWeights, GridSearchResult};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::train::{
    build_dataset, evaluate, fit, load_dataset, read_report, save_dataset, write_report, Dataset, Distillation,
    EvalReport, ExperimentConfig, InferenceMode,
};
use crate::util::{hash_file, hash_json, read_file, write_file};
use crate::vocab::{build_vocabulary, Vocabulary};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Vocab,
    Data,
    Fit,
    Search,
    Eval,
    Report,
}

impl StageKind {
    pub const ALL: [StageKind; 6] = [
        StageKind::Vocab,
        StageKind::Data,
        StageKind::Fit,
        StageKind::Search,
        StageKind::Eval,
        StageKind::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Vocab => "vocab",
            StageKind::Data => "data",
            StageKind::Fit => "fit",
            StageKind::Search => "search",
            StageKind::Eval => "eval",
            StageKind::Report => "report",
        }
    }
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub key: String,
    /// Relative to the run root.
    pub dir: String,
    /// Names of the stages whose outputs this one consumed.
    pub inputs: Vec<String>,
    /// File name to sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub cached: bool,
}

/// Provenance for everything under one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub vocab_hash: Option<String>,
    pub dataset_hash: Option<String>,
    /// Checkpoint id to sha256 of the best checkpoint file.
    pub checkpoints: BTreeMap<String, String>,
    /// Weight-file id to sha256.
    pub weights: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub status: Vec<StageStatus>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Every input reference must name a stage recorded in this manifest.
    pub fn check_references(&self) -> Result<()> {
        for s in &self.stages {
            for i in &s.inputs {
                if !self.stages.iter().any(|o| &o.name == i) {
                    return Err(Error::Integrity(format!("stage {} references missing stage {i}", s.name)));
                }
            }
        }
        Ok(())
    }
}

/// One line of the comparison table; columns are means over model seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub distillation: Option<Distillation>,
    pub inference: Option<InferenceMode>,
    pub runs: usize,
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub score: f64,
    pub score_min: f64,
    pub score_max: f64,
    pub per_run: Vec<f64>,
    /// Report stems (under `reports/`) the row was aggregated from.
    pub reports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub weights: CostWeights,
    pub best_val_pdm: f64,
    pub default_weights: CostWeights,
    pub default_val_pdm: f64,
    pub default_in_grid: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub table: Vec<TableRow>,
    pub searches: BTreeMap<String, SearchSummary>,
}

impl PipelineOutcome {
    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.method == method)
    }
}

pub const ROW_ORACLE: &str = "Teacher oracle (upper bound)";
pub const ROW_IMITATION: &str = "Imitation only (A)";
pub const ROW_POST_PROCESS: &str = "Imitation + post-process (B)";
pub const ROW_PDM_ONLY: &str = "Hydra-distill, PDM-only";
pub const ROW_MULTI: &str = "Hydra-distill, multi-target";
pub const ROW_MULTI_W: &str = "Hydra-distill, multi-target + W";
pub const ROW_ENSEMBLE: &str = "Hydra-distill, multi-target + ensemble";
pub const ROW_ENSEMBLE_W: &str = "Hydra-distill, multi-target + W + ensemble";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn stage_key(kind: StageKind, inputs: serde_json::Value) -> Result<String> {
    hash_json(&json!({ "tool": TOOL_VERSION, "stage": kind.name(), "inputs": inputs }))
}

struct Runner<'a> {
    root: PathBuf,
    manifest: RunManifest,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    fn stage_dir(&self, kind: StageKind, key: &str) -> (String, PathBuf) {
        let rel = format!("stages/{}-{}", kind.name(), &key[..16]);
        let abs = self.root.join(&rel);
        (rel, abs)
    }

    /// Run `body` unless an intact cached result exists. `body` writes its
    /// files into the directory it is handed and returns their names.
    fn stage<F>(&mut self, name: &str, kind: StageKind, key: String, inputs: Vec<String>, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&Path) -> Result<Vec<String>>,
    {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let (rel, dir) = self.stage_dir(kind, &key);
        let record_path = dir.join("stage.json");
        if record_path.exists() {
            let rec: StageRecord = serde_json::from_slice(&read_file(&record_path).map_err(wrap)?)
                .map_err(|e| wrap(Error::format(&record_path, e.to_string())))?;
            if rec.key == key {
                for (file, sha) in &rec.outputs {
                    let p = dir.join(file);
                    if !p.exists() || &hash_file(&p).map_err(wrap)? != sha {
                        return Err(wrap(Error::Integrity(format!(
                            "cached artifact {} is missing or corrupted; delete {} to rebuild",
                            p.display(),
                            dir.display()
                        ))));
                    }
                }
                (self.log)(&format!("[cached] {name}"));
                self.manifest.status.push(StageStatus {
                    name: name.to_string(),
                    cached: true,
                });
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    inputs,
                    ..rec
                });
                return Ok(dir);
            }
        }
        (self.log)(&format!("[run] {name}"));
        let started = now();
        std::fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        let files = body(&dir).map_err(wrap)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let sha = hash_file(&dir.join(&f)).map_err(wrap)?;
            outputs.insert(f, sha);
        }
        let rec = StageRecord {
            name: name.to_string(),
            kind,
            key,
            dir: rel,
            inputs,
            outputs,
            started_unix: started,
            finished_unix: now(),
        };
        write_file(&record_path, serde_json::to_string_pretty(&rec)?.as_bytes()).map_err(wrap)?;
        self.manifest.status.push(StageStatus {
            name: name.to_string(),
            cached: false,
        });
        self.manifest.stages.push(rec);
        Ok(dir)
    }

    fn write_manifest(&mut self) -> Result<()> {
        self.manifest.finished_unix = now();
        self.manifest.check_references()?;
        write_file(
            &self.root.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )
    }
}

/// Member checkpoints of one evaluated planner with their ensemble weights.
struct Planner {
    id: String,
    stage_inputs: Vec<String>,
    members: Vec<(Checkpoint, String, f64)>,
}

impl Planner {
    fn key_part(&self) -> serde_json::Value {
        json!(self.members.iter().map(|(_, sha, w)| json!([sha, w])).collect::<Vec<_>>())
    }

    fn refs(&self) -> Vec<(&Checkpoint, f64)> {
        self.members.iter().map(|(c, _, w)| (c, *w)).collect()
    }
}

fn fit_name(d: Distillation, seed: u64) -> String {
    format!("fit/{}/seed-{seed}", d.name())
}

/// Run the stages up to `cfg.through`, reusing cached results, and write the
/// comparison table when the report stage is reached.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<PipelineOutcome> {
    let through = cfg.through;
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let mut r = Runner {
        root: out_dir.to_path_buf(),
        manifest: RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: hash_json(cfg)?,
            vocab_hash: None,
            dataset_hash: None,
            checkpoints: BTreeMap::new(),
            weights: BTreeMap::new(),
            stages: Vec::new(),
            status: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
        },
        log,
    };
    let result = run_stages(cfg, &mut r, through);
    r.write_manifest()?;
    let (table, searches) = result?;
    Ok(PipelineOutcome {
        manifest: r.manifest,
        table,
        searches,
    })
}

type StagesResult = (Vec<TableRow>, BTreeMap<String, SearchSummary>);

fn run_stages(cfg: &ExperimentConfig, r: &mut Runner, through: StageKind) -> Result<StagesResult> {
    let mut searches = BTreeMap::new();

    // Vocabulary.
    let vcfg = &cfg.vocab;
    let key = stage_key(StageKind::Vocab, json!(vcfg))?;
    let dir = r.stage("vocab", StageKind::Vocab, key, vec![], |dir| {
        build_vocabulary(vcfg.n_samples, &vcfg.kinematics, vcfg.sample_seed, &vcfg.kmeans, &dir.join("vocab.bin"))?;
        Ok(vec!["vocab.bin".into(), "vocab.bin.json".into()])
    })?;
    let vocab = Vocabulary::load(&dir.join("vocab.bin"))?;
    let vocab_hash = vocab.content_hash();
    r.manifest.vocab_hash = Some(vocab_hash.clone());
    if through == StageKind::Vocab {
        return Ok((Vec::new(), searches));
    }

    // Dataset and offline teacher simulation.
    let key = stage_key(
        StageKind::Data,
        json!({
            "vocab": vocab_hash, "data_seed": cfg.data_seed, "splits": cfg.splits, "world": cfg.world,
            "noise": cfg.noise, "metrics": cfg.metrics, "sigma": cfg.optim.sigma,
        }),
    )?;
    let data_dir = r.stage("data", StageKind::Data, key, vec!["vocab".into()], |dir| {
        let data = build_dataset(cfg, &vocab)?;
        let m = save_dataset(dir, &data)?;
        let mut files = vec!["dataset.json".to_string()];
        for f in [&m.train, &m.val, &m.test] {
            files.extend([
                f.scenarios.clone(),
                f.observations.clone(),
                f.targets.clone(),
                f.labels.clone(),
                f.labels.replace(".bin", ".index.json"),
            ]);
        }
        Ok(files)
    })?;
    let dataset_hash = hash_file(&data_dir.join("dataset.json"))?;
    r.manifest.dataset_hash = Some(dataset_hash.clone());
    if through == StageKind::Data {
        return Ok((Vec::new(), searches));
    }
    let data = load_dataset(&data_dir, &vocab).map_err(|e| Error::Stage {
        stage: "data".into(),
        source: Box::new(e),
    })?;

    // Students.
    let mut students: BTreeMap<(Distillation, u64), (Checkpoint, String)> = BTreeMap::new();
    let mut variants = cfg.distillation.clone();
    variants.sort();
    variants.dedup();
    for &d in &variants {
        for &seed in &cfg.model_seeds {
            let name = fit_name(d, seed);
            let key = stage_key(
                StageKind::Fit,
                json!({
                    "dataset": dataset_hash, "model": cfg.model_config(d), "optim": cfg.optim,
                    "lambda_kd": cfg.lambda_kd(d), "distillation": d, "seed": seed,
                    "validation_weights": cfg.inference.default_weights,
                }),
            )?;
            let dir = r.stage(&name, StageKind::Fit, key, vec!["data".into()], |dir| {
                let res = fit(cfg, &data, d, seed)?;
                if res.best_val_pdm() < res.final_val_pdm() {
                    return Err(Error::Integrity("best checkpoint scores below the final one".into()));
                }
                save_checkpoint(&dir.join("best.ckpt"), &res.best)?;
                save_checkpoint(&dir.join("final.ckpt"), &res.last)?;
                write_file(&dir.join("curve.csv"), res.curve_csv().as_bytes())?;
                let summary = json!({
                    "best_epoch": res.best_epoch, "best_val_pdm": res.best_val_pdm(),
                    "final_val_pdm": res.final_val_pdm(),
                });
                write_file(&dir.join("fit.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
                Ok(vec!["best.ckpt".into(), "final.ckpt".into(), "curve.csv".into(), "fit.json".into()])
            })?;
            let path = dir.join("best.ckpt");
            let sha = hash_file(&path)?;
            let ckpt = load_checkpoint(&path)?;
            if ckpt.header.vocab_hash != vocab_hash {
                return Err(Error::Integrity(format!("{name} was trained on a different vocabulary")));
            }
            r.manifest.checkpoints.insert(name.clone(), sha.clone());
            students.insert((d, seed), (ckpt, sha));
        }
    }
    if through == StageKind::Fit {
        return Ok((Vec::new(), searches));
    }

    // Planners: single students per seed, plus the multi-target ensemble.
    let single = |d: Distillation, seed: u64| -> Option<Planner> {
        students.get(&(d, seed)).map(|(c, sha)| Planner {
            id: format!("{}-seed-{seed}", d.name()),
            stage_inputs: vec![fit_name(d, seed)],
            members: vec![(c.clone(), sha.clone(), 1.0)],
        })
    };
    let ensemble = if cfg.model_seeds.len() > 1 && variants.contains(&Distillation::MultiTarget) {
        let w = 1.0 / cfg.model_seeds.len() as f64;
        Some(Planner {
            id: "multi-target-ensemble".into(),
            stage_inputs: cfg.model_seeds.iter().map(|&s| fit_name(Distillation::MultiTarget, s)).collect(),
            members: cfg
                .model_seeds
                .iter()
                .map(|&s| {
                    let (c, sha) = &students[&(Distillation::MultiTarget, s)];
                    (c.clone(), sha.clone(), w)
                })
                .collect(),
        })
    } else {
        None
    };

    // Weight search on the validation split.
    let mut searched: BTreeMap<String, (CostWeights, String)> = BTreeMap::new();
    let mut to_search: Vec<Planner> = cfg
        .model_seeds
        .iter()
        .filter_map(|&s| single(Distillation::MultiTarget, s))
        .collect();
    to_search.extend(ensemble.as_ref().map(|e| Planner {
        id: e.id.clone(),
        stage_inputs: e.stage_inputs.clone(),
        members: e.members.clone(),
    }));
    for p in &to_search {
        let name = format!("search/{}", p.id);
        let key = stage_key(
            StageKind::Search,
            json!({
                "dataset": dataset_hash, "members": p.key_part(), "grid": cfg.inference.grid,
                "default": cfg.inference.default_weights,
            }),
        )?;
        let mut inputs = p.stage_inputs.clone();
        inputs.push("data".into());
        let dir = r.stage(&name, StageKind::Search, key, inputs, |dir| {
            let (result, summary) = search(cfg, &data, &p.refs())?;
            result.best.weights.save(&dir.join("weights.toml"))?;
            let mut csv = String::from("w1,w2,w3,w4,val_pdm\n");
            for g in &result.evaluated {
                let w = g.weights;
                csv.push_str(&format!("{},{},{},{},{}\n", w.w1, w.w2, w.w3, w.w4, g.mean_pdm));
            }
            write_file(&dir.join("grid.csv"), csv.as_bytes())?;
            write_file(&dir.join("search.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
            Ok(vec!["weights.toml".into(), "grid.csv".into(), "search.json".into()])
        })?;
        let weights = CostWeights::load(&dir.join("weights.toml"))?;
        let summary: SearchSummary = serde_json::from_slice(&read_file(&dir.join("search.json"))?)?;
        let sha = hash_file(&dir.join("weights.toml"))?;
        r.manifest.weights.insert(name.clone(), sha.clone());
        searches.insert(p.id.clone(), summary);
        searched.insert(p.id.clone(), (weights, name));
    }
    if through == StageKind::Search {
        return Ok((Vec::new(), searches));
    }

    // Test-split evaluations, grouped by table row.
    let mut jobs: Vec<(&str, Planner, InferenceMode)> = Vec::new();
    for &seed in &cfg.model_seeds {
        for (row, d, mode) in [
            (ROW_IMITATION, Distillation::None, InferenceMode::ArgmaxImitation),
            (ROW_POST_PROCESS, Distillation::None, InferenceMode::PostProcess),
            (ROW_PDM_ONLY, Distillation::PdmOnly, InferenceMode::AssembledCost),
            (ROW_MULTI, Distillation::MultiTarget, InferenceMode::AssembledCost),
            (ROW_MULTI_W, Distillation::MultiTarget, InferenceMode::AssembledCostGrid),
        ] {
            if let Some(p) = single(d, seed) {
                jobs.push((row, p, mode));
            }
        }
    }
    if let Some(e) = &ensemble {
        for (row, mode) in [
            (ROW_ENSEMBLE, InferenceMode::AssembledCost),
            (ROW_ENSEMBLE_W, InferenceMode::AssembledCostGrid),
        ] {
            jobs.push((
                row,
                Planner {
                    id: e.id.clone(),
                    stage_inputs: e.stage_inputs.clone(),
                    members: e.members.clone(),
                },
                mode,
            ));
        }
    }
    let reports_dir = r.root.join("reports");
    let mut rows: BTreeMap<&str, Vec<(String, EvalReport)>> = BTreeMap::new();
    for (row, p, mode) in &jobs {
        let stem = format!("{}.{}", p.id, mode.name().replace('+', "-"));
        let name = format!("eval/{stem}");
        let weights = match mode {
            InferenceMode::AssembledCostGrid => Some(searched.get(&p.id).cloned().ok_or_else(|| {
                Error::config(format!("{name}: grid weights were not searched for {}", p.id))
            })?),
            _ => None,
        };
        let weights_sha = match &weights {
            Some((_, search_name)) => Some(r.manifest.weights[search_name].clone()),
            None => None,
        };
        let key = stage_key(
            StageKind::Eval,
            json!({
                "dataset": dataset_hash, "members": p.key_part(), "mode": mode, "weights": weights_sha,
                "default_weights": cfg.inference.default_weights, "perception": cfg.inference.perception,
                "metrics": cfg.metrics,
            }),
        )?;
        let mut inputs = p.stage_inputs.clone();
        inputs.push("data".into());
        if let Some((_, s)) = &weights {
            inputs.push(s.clone());
        }
        let w = weights.as_ref().map(|(w, _)| *w);
        let dir = r.stage(&name, StageKind::Eval, key, inputs, |dir| {
            let report = evaluate(&stem, &p.refs(), &data.test, &data.vocab, *mode, w.as_ref(), cfg)?;
            write_report(dir, "report", &report)?;
            Ok(vec!["report.csv".into(), "report.json".into()])
        })?;
        let report = read_report(&dir, "report")?;
        write_report(&reports_dir, &stem, &report)?;
        rows.entry(row).or_default().push((stem, report));
    }
    if through == StageKind::Eval {
        return Ok((Vec::new(), searches));
    }

    // Report.
    let mut table = vec![oracle_row(&data)];
    for (row, d, mode) in [
        (ROW_IMITATION, Some(Distillation::None), InferenceMode::ArgmaxImitation),
        (ROW_POST_PROCESS, Some(Distillation::None), InferenceMode::PostProcess),
        (ROW_PDM_ONLY, Some(Distillation::PdmOnly), InferenceMode::AssembledCost),
        (ROW_MULTI, Some(Distillation::MultiTarget), InferenceMode::AssembledCost),
        (ROW_MULTI_W, Some(Distillation::MultiTarget), InferenceMode::AssembledCostGrid),
        (ROW_ENSEMBLE, Some(Distillation::MultiTarget), InferenceMode::AssembledCost),
        (ROW_ENSEMBLE_W, Some(Distillation::MultiTarget), InferenceMode::AssembledCostGrid),
    ] {
        if let Some(reports) = rows.get(row) {
            table.push(aggregate(row, d, Some(mode), reports));
        }
    }
    write_file(&r.root.join("table.md"), render_table(&table).as_bytes())?;
    write_file(&r.root.join("table.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    r.manifest.status.push(StageStatus {
        name: "report".into(),
        cached: false,
    });
    Ok((table, searches))
}

fn search(
    cfg: &ExperimentConfig,
    data: &Dataset,
    members: &[(&Checkpoint, f64)],
) -> Result<(GridSearchResult, SearchSummary)> {
    let per_member: Vec<Vec<_>> = members
        .iter()
        .map(|(c, _)| c.model.forward_many(&data.val.observations, &data.vocab))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = members.iter().map(|(_, w)| *w).collect();
    let bundles = (0..data.val.len())
        .map(|s| {
            let b: Vec<_> = per_member.iter().map(|m| m[s].clone()).collect();
            if b.len() == 1 {
                Ok(b.into_iter().next().unwrap())
            } else {
                crate::infer::ensemble_subscores(&b, &weights)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pdm = data.val.teacher_pdm();
    let result = grid_search_weights(&bundles, &pdm, &cfg.inference.grid)?;
    let default = cfg.inference.default_weights;
    let default_val_pdm = mean_selected_pdm(&bundles, &pdm, &default);
    let default_in_grid = cfg.inference.grid.contains(&default);
    if default_in_grid && result.best.mean_pdm < default_val_pdm {
        return Err(Error::Integrity("grid search returned a point worse than a grid member".into()));
    }
    let summary = SearchSummary {
        weights: result.best.weights,
        best_val_pdm: result.best.mean_pdm,
        default_weights: default,
        default_val_pdm,
        default_in_grid,
    };
    Ok((result, summary))
}

fn oracle_row(data: &Dataset) -> TableRow {
    let best: Vec<usize> = data
        .test
        .labels
        .iter()
        .map(|l| crate::infer::argmax_first(&l.pdm()))
        .collect();
    let n = best.len().max(1) as f64;
    let mean = |f: &dyn Fn(&crate::metrics::SubScores) -> f64| {
        100.0 * data.test.labels.iter().zip(&best).map(|(l, &i)| f(&l.scores[i])).sum::<f64>() / n
    };
    let score = mean(&crate::metrics::pdm_score);
    TableRow {
        method: ROW_ORACLE.into(),
        distillation: None,
        inference: None,
        runs: 1,
        nc: mean(&|s| s.nc),
        dac: mean(&|s| s.dac),
        ep: mean(&|s| s.ep),
        ttc: mean(&|s| s.ttc),
        comfort: mean(&|s| s.comfort),
        score,
        score_min: score,
        score_max: score,
        per_run: vec![score],
        reports: Vec::new(),
    }
}

fn aggregate(
    method: &str,
    distillation: Option<Distillation>,
    inference: Option<InferenceMode>,
    reports: &[(String, EvalReport)],
) -> TableRow {
    let n = reports.len() as f64;
    let mean = |f: fn(&crate::train::EvalSummary) -> f64| reports.iter().map(|(_, r)| f(&r.summary)).sum::<f64>() / n;
    let per_run: Vec<f64> = reports.iter().map(|(_, r)| r.summary.score).collect();
    TableRow {
        method: method.into(),
        distillation,
        inference,
        runs: reports.len(),
        nc: mean(|s| s.nc),
        dac: mean(|s| s.dac),
        ep: mean(|s| s.ep),
        ttc: mean(|s| s.ttc),
        comfort: mean(|s| s.comfort),
        score: mean(|s| s.score),
        score_min: per_run.iter().cloned().fold(f64::INFINITY, f64::min),
        score_max: per_run.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        per_run,
        reports: reports.iter().map(|(s, _)| s.clone()).collect(),
    }
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::from("| Method | Runs | NC | DAC | EP | TTC | C | Score | Range |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.2} | {:.2} to {:.2} |\n",
            r.method, r.runs, r.nc, r.dac, r.ep, r.ttc, r.comfort, r.score, r.score_min, r.score_max
        ));
    }
    out
}
