use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hydra_plan::infer::{assemble_cost, ensemble_subscores, grid_search_weights, select_index, CostWeights};
use hydra_plan::metrics::{pdm_score, simulate_vocabulary, write_label_store};
use hydra_plan::model::{load_checkpoint, save_checkpoint, Checkpoint, PredictionBundle};
use hydra_plan::pipeline::{render_table, run_pipeline, RunManifest, StageKind, TableRow};
use hydra_plan::train::{
    build_dataset, evaluate, fit, load_dataset, save_dataset, write_report, Dataset, Distillation, ExperimentConfig,
    InferenceMode, Split,
};
use hydra_plan::util::write_file;
use hydra_plan::vocab::{build_vocabulary, Vocabulary};
use hydra_plan::world::{generate_scenario, read_scenarios, write_scenarios};

/// Trajectory-vocabulary planner with multi-target distillation.
#[derive(Parser)]
#[command(name = "hydra-plan", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: vocabulary sampling for `vocab`, model seed for `fit`,
    /// data seed everywhere else.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories and cluster them into a planning vocabulary.
    Vocab {
        /// Number of sampled trajectories.
        #[arg(long)]
        n: Option<usize>,
        /// Vocabulary size.
        #[arg(long)]
        k: Option<usize>,
        /// Output file, `<out-dir>/vocab.bin` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate scenario splits, observations, imitation targets and teacher labels.
    BuildData {
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Run the rule-based teacher over the vocabulary for a set of scenarios.
    Simulate {
        #[arg(long)]
        vocab: PathBuf,
        /// Scenario file (JSON lines). Without it, `--count` scenarios are generated.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one student.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "multi-target")]
        distillation: String,
    },
    /// Grid-search the assembled-cost weights on the validation split.
    SearchWeights {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        members: EnsembleArgs,
        /// Output weights file, `<out-dir>/weights.toml` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a split with the teacher.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        members: EnsembleArgs,
        #[arg(long, default_value = "assembled-cost")]
        mode: String,
        /// Weights file; required for `assembled-cost+grid`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report name; files are `<out-dir>/<label>.csv` and `.json`.
        #[arg(long, default_value = "report")]
        label: String,
    },
    /// Print the selected trajectory for scenarios of a split.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        members: EnsembleArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Only this scenario index.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Run the whole pipeline with stage caching.
    Run {
        /// Stop after this stage (vocab, data, fit, search, eval, report).
        #[arg(long)]
        through: Option<String>,
    },
    /// Print the comparison table of a finished run.
    Report,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `build-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Checkpoints as `path` or `path:weight`; unweighted members share equally.
    #[arg(long = "ensemble", num_args = 1.., required = true)]
    members: Vec<String>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn with_data_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    cfg
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let vocab = Vocabulary::load(&args.vocab).with_context(|| format!("loading vocabulary {}", args.vocab.display()))?;
    load_dataset(&args.data, &vocab).with_context(|| format!("loading dataset {}", args.data.display()))
}

fn parse_members(args: &EnsembleArgs) -> Result<Vec<(Checkpoint, f64)>> {
    let mut parsed: Vec<(PathBuf, Option<f64>)> = Vec::new();
    for m in &args.members {
        let (path, w) = match m.rsplit_once(':') {
            Some((p, w)) if w.parse::<f64>().is_ok() => (p, Some(w.parse::<f64>()?)),
            _ => (m.as_str(), None),
        };
        parsed.push((PathBuf::from(path), w));
    }
    let given: f64 = parsed.iter().filter_map(|(_, w)| *w).sum();
    let free = parsed.iter().filter(|(_, w)| w.is_none()).count();
    let share = if free > 0 { (1.0 - given) / free as f64 } else { 0.0 };
    parsed
        .into_iter()
        .map(|(p, w)| {
            let ckpt = load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok((ckpt, w.unwrap_or(share)))
        })
        .collect()
}

fn bundles(members: &[(Checkpoint, f64)], data: &Dataset, split: Split) -> Result<Vec<PredictionBundle>> {
    let part = data.split(split);
    let per_member = members
        .iter()
        .map(|(c, _)| c.model.forward_many(&part.observations, &data.vocab))
        .collect::<hydra_plan::Result<Vec<_>>>()?;
    let weights: Vec<f64> = members.iter().map(|(_, w)| *w).collect();
    (0..part.len())
        .map(|s| {
            let b: Vec<_> = per_member.iter().map(|m| m[s].clone()).collect();
            Ok(ensemble_subscores(&b, &weights)?)
        })
        .collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Vocab { n, k, out: path } => {
            let mut v = cfg.vocab.clone();
            if let Some(n) = n {
                v.n_samples = *n;
            }
            if let Some(k) = k {
                v.kmeans.k = *k;
            }
            if let Some(s) = cli.seed {
                v.sample_seed = s;
            }
            let path = path.clone().unwrap_or_else(|| out.join("vocab.bin"));
            let (vocab, fit) = build_vocabulary(v.n_samples, &v.kinematics, v.sample_seed, &v.kmeans, &path)?;
            println!(
                "vocabulary k={} from {} samples, sse {:.3} after {} iterations -> {}",
                vocab.len(),
                v.n_samples,
                fit.final_sse,
                fit.iterations,
                path.display()
            );
            println!("hash {}", vocab.content_hash());
        }
        Command::BuildData { vocab } => {
            let cfg = with_data_seed(cfg, cli.seed);
            let vocab = Vocabulary::load(vocab)?;
            let data = build_dataset(&cfg, &vocab)?;
            let m = save_dataset(&out, &data)?;
            println!(
                "dataset train/val/test {}/{}/{}, sigma {:.3}, hash {} -> {}",
                m.train.count,
                m.val.count,
                m.test.count,
                data.sigma,
                m.content_hash()?,
                out.display()
            );
        }
        Command::Simulate {
            vocab,
            scenarios,
            count,
            out: path,
        } => {
            let vocab = Vocabulary::load(vocab)?;
            let scenarios = match scenarios {
                Some(p) => read_scenarios(p)?,
                None => {
                    let seed = cli.seed.unwrap_or(cfg.data_seed);
                    let s = (0..*count as u64)
                        .map(|i| generate_scenario(seed.wrapping_add(i), &cfg.world))
                        .collect::<hydra_plan::Result<Vec<_>>>()?;
                    write_scenarios(&path.with_extension("scn.jsonl"), &s)?;
                    s
                }
            };
            let labels: Vec<_> = scenarios
                .iter()
                .map(|s| simulate_vocabulary(s, &vocab, &cfg.metrics))
                .collect();
            write_label_store(path, &labels)?;
            let best: f64 = labels
                .iter()
                .map(|l| l.scores.iter().map(pdm_score).fold(0.0, f64::max))
                .sum::<f64>()
                / labels.len().max(1) as f64;
            println!(
                "simulated {} scenarios x {} entries, mean best PDM {:.2} -> {}",
                labels.len(),
                vocab.len(),
                100.0 * best,
                path.display()
            );
        }
        Command::Fit { data, distillation } => {
            let d: Distillation = distillation.parse()?;
            let seed = cli.seed.unwrap_or(cfg.model_seeds.first().copied().unwrap_or(0));
            let data = load_data(data)?;
            let res = fit(&cfg, &data, d, seed)?;
            save_checkpoint(&out.join("best.ckpt"), &res.best)?;
            save_checkpoint(&out.join("final.ckpt"), &res.last)?;
            write_file(&out.join("curve.csv"), res.curve_csv().as_bytes())?;
            let summary = json!({
                "distillation": d, "seed": seed, "best_epoch": res.best_epoch,
                "best_val_pdm": res.best_val_pdm(), "final_val_pdm": res.final_val_pdm(),
            });
            write_file(&out.join("fit.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
            println!(
                "{} seed {seed}: best epoch {} val PDM {:.2} (final {:.2}) -> {}",
                d.name(),
                res.best_epoch,
                100.0 * res.best_val_pdm(),
                100.0 * res.final_val_pdm(),
                out.display()
            );
        }
        Command::SearchWeights {
            data,
            members,
            out: path,
        } => {
            let data = load_data(data)?;
            let members = parse_members(members)?;
            let b = bundles(&members, &data, Split::Val)?;
            let result = grid_search_weights(&b, &data.val.teacher_pdm(), &cfg.inference.grid)?;
            let path = path.clone().unwrap_or_else(|| out.join("weights.toml"));
            result.best.weights.save(&path)?;
            let w = result.best.weights;
            println!(
                "best of {} weights: w1={:.4} w2={:.4} w3={:.4} w4={:.4}, val PDM {:.2} -> {}",
                result.evaluated.len(),
                w.w1,
                w.w2,
                w.w3,
                w.w4,
                100.0 * result.best.mean_pdm,
                path.display()
            );
        }
        Command::Eval {
            data,
            members,
            mode,
            weights,
            split,
            label,
        } => {
            let mode: InferenceMode = mode.parse()?;
            let split: Split = split.parse()?;
            let data = load_data(data)?;
            let members = parse_members(members)?;
            let weights = weights.as_deref().map(CostWeights::load).transpose()?;
            let refs: Vec<(&Checkpoint, f64)> = members.iter().map(|(c, w)| (c, *w)).collect();
            let report = evaluate(label, &refs, data.split(split), &data.vocab, mode, weights.as_ref(), &cfg)?;
            let (csv, _) = write_report(&out, label, &report)?;
            let s = &report.summary;
            println!(
                "{} [{}] on {} scenarios: NC {:.1} DAC {:.1} EP {:.1} TTC {:.1} C {:.1} score {:.2} -> {}",
                s.label,
                s.mode.name(),
                s.scenarios,
                s.nc,
                s.dac,
                s.ep,
                s.ttc,
                s.comfort,
                s.score,
                csv.display()
            );
        }
        Command::Infer {
            data,
            members,
            weights,
            split,
            index,
        } => {
            let split: Split = split.parse()?;
            let data = load_data(data)?;
            let members = parse_members(members)?;
            let w = match weights {
                Some(p) => CostWeights::load(p)?,
                None => cfg.inference.default_weights,
            };
            let part = data.split(split);
            if let Some(i) = index {
                if *i >= part.len() {
                    bail!("scenario index {i} out of range for {} scenarios", part.len());
                }
            }
            let b = bundles(&members, &data, split)?;
            for (s, bundle) in b.iter().enumerate() {
                if index.is_some_and(|i| i != s) {
                    continue;
                }
                let selected = select_index(bundle, &w);
                let cost = assemble_cost(bundle, &w)[selected];
                let scenario = &part.scenarios[s];
                let traj = data.vocab.get(selected);
                let end = traj.poses.last().map(|p| [p.x, p.y, p.heading]);
                println!(
                    "{}",
                    json!({
                        "scenario_id": scenario.id, "selected": selected, "cost": cost,
                        "imitation": bundle.imitation[selected], "metric_scores": bundle.row(selected),
                        "end_pose_local": end, "teacher_pdm": pdm_score(&part.labels[s].scores[selected]),
                    })
                );
            }
        }
        Command::Run { through } => {
            let mut cfg = with_data_seed(cfg, cli.seed);
            if let Some(t) = through {
                cfg.through = t.parse::<StageKind>()?;
            }
            let outcome = run_pipeline(&cfg, &out, &mut |line| eprintln!("{line}"))?;
            if !outcome.table.is_empty() {
                print!("{}", render_table(&outcome.table));
            }
            let cached = outcome.manifest.status.iter().filter(|s| s.cached).count();
            eprintln!(
                "{} stages ({} cached); manifest at {}",
                outcome.manifest.status.len(),
                cached,
                out.join("manifest.json").display()
            );
        }
        Command::Report => print_report(&out)?,
    }
    Ok(())
}

fn print_report(dir: &Path) -> Result<()> {
    let manifest = RunManifest::load(&dir.join("manifest.json"))
        .with_context(|| format!("{} holds no finished run", dir.display()))?;
    manifest.check_references()?;
    let table: Vec<TableRow> = serde_json::from_slice(
        &std::fs::read(dir.join("table.json")).with_context(|| format!("{} has no table; run it through report", dir.display()))?,
    )?;
    print!("{}", render_table(&table));
    println!(
        "config {} | vocabulary {} | dataset {} | tool {}",
        &manifest.config_hash[..12],
        manifest.vocab_hash.as_deref().map_or("-", |h| &h[..12]),
        manifest.dataset_hash.as_deref().map_or("-", |h| &h[..12]),
        manifest.tool_version
    );
    Ok(())
}
