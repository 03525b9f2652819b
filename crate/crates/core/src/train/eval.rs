use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, SplitData};
use crate::error::{Error, Result};
use crate::infer::{argmax_first, baseline_select, ensemble_subscores, select_index, CostWeights, Paradigm};
use crate::metrics::{pdm_score, score_trajectory, SubScores};
use crate::model::Checkpoint;
use crate::util::{read_file, write_file};
use crate::vocab::Vocabulary;

/// How a trajectory is picked from the student outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    ArgmaxImitation,
    PostProcess,
    AssembledCost,
    AssembledCostGrid,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::ArgmaxImitation => "argmax-imitation",
            InferenceMode::PostProcess => "post-process",
            InferenceMode::AssembledCost => "assembled-cost",
            InferenceMode::AssembledCostGrid => "assembled-cost+grid",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            InferenceMode::ArgmaxImitation,
            InferenceMode::PostProcess,
            InferenceMode::AssembledCost,
            InferenceMode::AssembledCostGrid,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::config(format!("unknown inference mode `{s}`")))
    }
}

/// Teacher outcome of one selection. Holds no student scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario_id: String,
    pub selected: usize,
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub pdm: f64,
}

/// Means over the split, each multiplied by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub mode: InferenceMode,
    pub scenarios: usize,
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<ScenarioRecord>,
}

impl EvalReport {
    pub fn from_records(label: &str, mode: InferenceMode, records: Vec<ScenarioRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&ScenarioRecord) -> f64| 100.0 * records.iter().map(f).sum::<f64>() / n;
        Self {
            summary: EvalSummary {
                label: label.to_string(),
                mode,
                scenarios: records.len(),
                nc: mean(|r| r.nc),
                dac: mean(|r| r.dac),
                ep: mean(|r| r.ep),
                ttc: mean(|r| r.ttc),
                comfort: mean(|r| r.comfort),
                score: mean(|r| r.pdm),
            },
            records,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario_id,selected,nc,dac,ep,ttc,c,pdm\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.scenario_id, r.selected, r.nc, r.dac, r.ep, r.ttc, r.comfort, r.pdm
            ));
        }
        out
    }

    pub fn from_csv(label: &str, mode: InferenceMode, text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("line {}: malformed record", n + 1));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            records.push(ScenarioRecord {
                scenario_id: f[0].to_string(),
                selected: f[1].parse().map_err(|_| bad())?,
                nc: num(2)?,
                dac: num(3)?,
                ep: num(4)?,
                ttc: num(5)?,
                comfort: num(6)?,
                pdm: num(7)?,
            });
        }
        Ok(Self::from_records(label, mode, records))
    }
}

/// Write `<stem>.csv` (records) and `<stem>.json` (summary).
pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    write_file(&csv, report.to_csv().as_bytes())?;
    write_file(&json, serde_json::to_string_pretty(&report.summary)?.as_bytes())?;
    Ok((csv, json))
}

/// Read a report back from its JSON summary and CSV records.
pub fn read_report(dir: &Path, stem: &str) -> Result<EvalReport> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    let summary: EvalSummary =
        serde_json::from_slice(&read_file(&json)?).map_err(|e| Error::format(&json, e.to_string()))?;
    let text = String::from_utf8(read_file(&csv)?).map_err(|e| Error::format(&csv, e.to_string()))?;
    EvalReport::from_csv(&summary.label, summary.mode, &text, &csv)
}

/// Run the student(s) on a split, select per `mode`, and score each selection
/// with the teacher against the ground-truth scenario.
///
/// Several members are combined by sub-score ensembling with the given
/// weights. `weights` is required for the grid mode and defaults to the
/// configured weights for plain assembled cost.
pub fn evaluate(
    label: &str,
    members: &[(&Checkpoint, f64)],
    data: &SplitData,
    vocab: &Vocabulary,
    mode: InferenceMode,
    weights: Option<&CostWeights>,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    if members.is_empty() {
        return Err(Error::config("evaluation needs at least one checkpoint"));
    }
    let vocab_hash = vocab.content_hash();
    if let Some((c, _)) = members.iter().find(|(c, _)| c.header.vocab_hash != vocab_hash) {
        return Err(Error::Integrity(format!(
            "checkpoint trained on vocabulary {} evaluated with {}",
            c.header.vocab_hash, vocab_hash
        )));
    }
    let weights = match (mode, weights) {
        (InferenceMode::AssembledCostGrid, None) => {
            return Err(Error::config("assembled-cost+grid needs searched weights"))
        }
        (_, Some(w)) => *w,
        (_, None) => cfg.inference.default_weights,
    };
    let per_member: Vec<Vec<_>> = members
        .iter()
        .map(|(c, _)| c.model.forward_many(&data.observations, vocab))
        .collect::<Result<_>>()?;
    let member_weights: Vec<f64> = members.iter().map(|(_, w)| *w).collect();
    let records = (0..data.len())
        .into_par_iter()
        .map(|s| {
            let bundles: Vec<_> = per_member.iter().map(|b| b[s].clone()).collect();
            let bundle = if bundles.len() == 1 {
                bundles.into_iter().next().unwrap()
            } else {
                ensemble_subscores(&bundles, &member_weights)?
            };
            let scenario = &data.scenarios[s];
            let selected = match mode {
                InferenceMode::ArgmaxImitation => argmax_first(&bundle.imitation),
                InferenceMode::PostProcess => baseline_select(
                    Paradigm::B,
                    &bundle,
                    scenario,
                    &data.observations[s],
                    vocab,
                    &cfg.metrics,
                    &cfg.inference.perception,
                ),
                InferenceMode::AssembledCost | InferenceMode::AssembledCostGrid => select_index(&bundle, &weights),
            };
            let traj = vocab.get(selected).to_world(&scenario.ego_start.pose);
            let sub: SubScores = score_trajectory(scenario, &traj, &cfg.metrics);
            Ok(ScenarioRecord {
                scenario_id: scenario.id.clone(),
                selected,
                nc: sub.nc,
                dac: sub.dac,
                ep: sub.ep,
                ttc: sub.ttc,
                comfort: sub.comfort,
                pdm: pdm_score(&sub),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(label, mode, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_recomputes_means() {
        let records = vec![
            ScenarioRecord {
                scenario_id: "a".into(),
                selected: 3,
                nc: 1.0,
                dac: 1.0,
                ep: 0.5,
                ttc: 1.0,
                comfort: 1.0,
                pdm: (5.0 + 2.0 + 2.5) / 12.0,
            },
            ScenarioRecord {
                scenario_id: "b".into(),
                selected: 0,
                nc: 0.0,
                dac: 1.0,
                ep: 1.0,
                ttc: 0.0,
                comfort: 1.0,
                pdm: 0.0,
            },
        ];
        let r = EvalReport::from_records("x", InferenceMode::AssembledCost, records);
        assert_eq!(r.summary.nc, 50.0);
        assert_eq!(r.summary.ep, 75.0);
        let back = EvalReport::from_csv("x", InferenceMode::AssembledCost, &r.to_csv(), Path::new("r.csv")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn mode_names_parse() {
        for m in ["argmax-imitation", "post-process", "assembled-cost", "assembled-cost+grid"] {
            assert_eq!(m.parse::<InferenceMode>().unwrap().name(), m);
        }
    }
}
