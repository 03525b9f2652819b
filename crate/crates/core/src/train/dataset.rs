use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{read_label_store, simulate_vocabulary, write_label_store, TeacherLabels};
use crate::model::{imitation_target, median_pairwise_distance, ImitationTarget};
use crate::util::{hash_file, put_f64s, put_u32, read_file, write_file, Reader};
use crate::vocab::Vocabulary;
use crate::world::{generate_scenario, read_scenarios, render_observation, write_scenarios, Observation, Scenario};

/// Scenario seeds of different splits are this far apart.
pub(crate) const SPLIT_STRIDE: u64 = 1 << 24;

const OBS_MAGIC: &[u8; 8] = b"HPOBSV\0\x01";
const TARGET_MAGIC: &[u8; 8] = b"HPTARG\0\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}` (train, val, test)")))
    }
}

/// Seed of scenario `i` in `split`; ranges of different splits never overlap.
pub fn scenario_seed(data_seed: u64, split: Split, i: usize) -> u64 {
    data_seed
        .wrapping_mul(4 * SPLIT_STRIDE)
        .wrapping_add(split.index() * SPLIT_STRIDE)
        .wrapping_add(i as u64)
}

fn observation_seed(scenario_seed: u64) -> u64 {
    scenario_seed ^ 0x6f62_735f_6e6f_6973
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub split: Split,
    pub scenarios: Vec<Scenario>,
    pub observations: Vec<Observation>,
    pub targets: Vec<ImitationTarget>,
    pub labels: Vec<TeacherLabels>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Per-scenario teacher PDM of every vocabulary entry.
    pub fn teacher_pdm(&self) -> Vec<Vec<f64>> {
        self.labels.iter().map(|l| l.pdm()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub sigma: f64,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn build_split(cfg: &ExperimentConfig, vocab: &Vocabulary, sigma: f64, split: Split, n: usize) -> Result<SplitData> {
    let items: Vec<(Scenario, Observation, ImitationTarget)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = scenario_seed(cfg.data_seed, split, i);
            let scenario = generate_scenario(seed, &cfg.world)?;
            let obs = render_observation(&scenario, &cfg.noise, observation_seed(seed));
            let expert = scenario.expert_trajectory.to_local(&scenario.ego_start.pose);
            let target = imitation_target(vocab, &expert, sigma)?;
            Ok((scenario, obs, target))
        })
        .collect::<Result<_>>()?;
    let mut scenarios = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for (s, o, t) in items {
        scenarios.push(s);
        observations.push(o);
        targets.push(t);
    }
    let labels = scenarios
        .iter()
        .map(|s| simulate_vocabulary(s, vocab, &cfg.metrics))
        .collect();
    Ok(SplitData {
        split,
        scenarios,
        observations,
        targets,
        labels,
    })
}

/// Generate every split and run the teacher over the whole vocabulary.
pub fn build_dataset(cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<Dataset> {
    cfg.validate()?;
    if vocab.horizon_steps() != cfg.world.horizon_steps {
        return Err(Error::config("vocabulary horizon differs from the world horizon"));
    }
    let sigma = cfg.optim.sigma.unwrap_or_else(|| median_pairwise_distance(vocab));
    Ok(Dataset {
        sigma,
        train: build_split(cfg, vocab, sigma, Split::Train, cfg.splits.train)?,
        val: build_split(cfg, vocab, sigma, Split::Val, cfg.splits.val)?,
        test: build_split(cfg, vocab, sigma, Split::Test, cfg.splits.test)?,
        vocab: vocab.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub count: usize,
    pub scenarios: String,
    pub observations: String,
    pub targets: String,
    pub labels: String,
    /// sha256 per file, same order as above.
    pub sha256: [String; 4],
}

/// Index written at the root of a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vocab_hash: String,
    pub sigma: f64,
    pub train: SplitFiles,
    pub val: SplitFiles,
    pub test: SplitFiles,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &SplitFiles {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn content_hash(&self) -> Result<String> {
        crate::util::hash_json(self)
    }
}

fn observations_to_bytes(obs: &[Observation]) -> Vec<u8> {
    let g = obs.first().map(|o| o.grid_size).unwrap_or(0);
    let cell = obs.first().map(|o| o.cell_size).unwrap_or(0.0);
    let mut buf = Vec::new();
    buf.extend_from_slice(OBS_MAGIC);
    put_u32(&mut buf, obs.len() as u32);
    put_u32(&mut buf, g as u32);
    put_f64s(&mut buf, &[cell]);
    for o in obs {
        put_f64s(&mut buf, &o.ego_status);
        put_f64s(&mut buf, &o.bev_raster);
    }
    buf
}

fn observations_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<Observation>> {
    let mut r = Reader::new(bytes, path);
    r.expect_magic(OBS_MAGIC)?;
    let n = r.u32()? as usize;
    let g = r.u32()? as usize;
    let cell_size = r.f64()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let e = r.f64s(4)?;
        let bev_raster = r.f64s(Observation::CHANNELS * g * g)?;
        out.push(Observation {
            grid_size: g,
            cell_size,
            bev_raster,
            ego_status: [e[0], e[1], e[2], e[3]],
        });
    }
    r.finish()?;
    Ok(out)
}

fn targets_to_bytes(targets: &[ImitationTarget], sigma: f64) -> Vec<u8> {
    let k = targets.first().map(|t| t.y.len()).unwrap_or(0);
    let mut buf = Vec::new();
    buf.extend_from_slice(TARGET_MAGIC);
    put_u32(&mut buf, targets.len() as u32);
    put_u32(&mut buf, k as u32);
    put_f64s(&mut buf, &[sigma]);
    for t in targets {
        put_f64s(&mut buf, &t.y);
    }
    buf
}

fn targets_from_bytes(bytes: &[u8], path: &Path) -> Result<(Vec<ImitationTarget>, f64)> {
    let mut r = Reader::new(bytes, path);
    r.expect_magic(TARGET_MAGIC)?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let sigma = r.f64()?;
    let out = (0..n).map(|_| Ok(ImitationTarget { y: r.f64s(k)? })).collect::<Result<_>>()?;
    r.finish()?;
    Ok((out, sigma))
}

fn save_split(dir: &Path, data: &SplitData, sigma: f64) -> Result<SplitFiles> {
    let name = data.split.name();
    let files = [
        format!("{name}.scn.jsonl"),
        format!("{name}.obs.bin"),
        format!("{name}.targets.bin"),
        format!("{name}.labels.bin"),
    ];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_scenarios(&dir.join(&files[0]), &data.scenarios)?;
    write_file(&dir.join(&files[1]), &observations_to_bytes(&data.observations))?;
    write_file(&dir.join(&files[2]), &targets_to_bytes(&data.targets, sigma))?;
    write_label_store(&dir.join(&files[3]), &data.labels)?;
    let sha256 = [
        hash_file(&dir.join(&files[0]))?,
        hash_file(&dir.join(&files[1]))?,
        hash_file(&dir.join(&files[2]))?,
        hash_file(&dir.join(&files[3]))?,
    ];
    let [scenarios, observations, targets, labels] = files;
    Ok(SplitFiles {
        count: data.len(),
        scenarios,
        observations,
        targets,
        labels,
        sha256,
    })
}

/// Persist a dataset under `dir` with `dataset.json` at its root.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest> {
    let manifest = DatasetManifest {
        vocab_hash: data.vocab.content_hash(),
        sigma: data.sigma,
        train: save_split(dir, &data.train, data.sigma)?,
        val: save_split(dir, &data.val, data.sigma)?,
        test: save_split(dir, &data.test, data.sigma)?,
    };
    write_file(&dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn load_split(dir: &Path, files: &SplitFiles, split: Split, vocab_hash: &str) -> Result<SplitData> {
    let paths = [&files.scenarios, &files.observations, &files.targets, &files.labels].map(|f| dir.join(f));
    for (p, want) in paths.iter().zip(&files.sha256) {
        if &hash_file(p)? != want {
            return Err(Error::Integrity(format!("{} does not match the dataset manifest", p.display())));
        }
    }
    let scenarios = read_scenarios(&paths[0])?;
    let observations = observations_from_bytes(&read_file(&paths[1])?, &paths[1])?;
    let (targets, _) = targets_from_bytes(&read_file(&paths[2])?, &paths[2])?;
    let labels = read_label_store(&paths[3], Some(vocab_hash))?;
    let n = files.count;
    if scenarios.len() != n || observations.len() != n || targets.len() != n || labels.len() != n {
        return Err(Error::Integrity(format!("{} split has inconsistent record counts", split.name())));
    }
    if scenarios.iter().zip(&labels).any(|(s, l)| s.id != l.scenario_id) {
        return Err(Error::Integrity(format!("{} labels are not aligned with scenarios", split.name())));
    }
    Ok(SplitData {
        split,
        scenarios,
        observations,
        targets,
        labels,
    })
}

/// Load a persisted dataset, verifying every file hash and that the labels
/// were simulated against `vocab`.
pub fn load_dataset(dir: &Path, vocab: &Vocabulary) -> Result<Dataset> {
    let path = dir.join("dataset.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    let vocab_hash = vocab.content_hash();
    if manifest.vocab_hash != vocab_hash {
        return Err(Error::Integrity(format!(
            "dataset was built for vocabulary {} but {} was supplied",
            manifest.vocab_hash, vocab_hash
        )));
    }
    Ok(Dataset {
        sigma: manifest.sigma,
        train: load_split(dir, &manifest.train, Split::Train, &vocab_hash)?,
        val: load_split(dir, &manifest.val, Split::Val, &vocab_hash)?,
        test: load_split(dir, &manifest.test, Split::Test, &vocab_hash)?,
        vocab: vocab.clone(),
    })
}
