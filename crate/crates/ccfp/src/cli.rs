//! Command-line surface: train / eval / sweep / diagnose / compare.
//!
//! Options resolve in three layers: built-in defaults, then a JSON config
//! file (`--config`), then explicit flags.

use crate::error::{Error, Result};
use crate::harness::{
    aggregate, dump_feature_stats, evaluate_model, random_search, results_csv, run_trial,
    Algorithm, DatasetSpec, RunConfig, SearchSpace, TrialArtifacts,
};
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointModel};
use crate::objectives::SemVariant;
use crate::tensor::par::map_indexed;
use crate::tensor::Real;
use crate::data::split_domains;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "ccfp", version, about = "Dual-stream feature-perturbation training for domain generalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one model under leave-one-domain-out splits
    Train(CommonArgs),
    /// Evaluate a saved checkpoint on a dataset's splits
    Eval(EvalArgs),
    /// Random hyperparameter search, repeated over seeds
    Sweep(SweepArgs),
    /// Dump per-domain feature statistics of the tap sites to CSV
    Diagnose(DiagnoseArgs),
    /// Run several algorithms over every target domain and tabulate
    Compare(CompareArgs),
}

#[derive(Args, Clone, Default)]
pub struct CommonArgs {
    /// erm | ccfp | mixstyle_dual | dsu_dual
    #[arg(long)]
    pub algorithm: Option<String>,
    /// rmnist-mini | cmnist-mini | idx:<images>,<labels>
    #[arg(long)]
    pub dataset: Option<String>,
    /// Held-out domain id (rotation angle or correlation percentage)
    #[arg(long)]
    pub target_domain: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_dis: Option<f64>,
    #[arg(long)]
    pub lambda_sem: Option<f64>,
    #[arg(long)]
    pub apply_prob: Option<f64>,
    /// classifier | feature
    #[arg(long)]
    pub sem_variant: Option<String>,
    /// Output directory for artifacts
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint file produced by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 20)]
    pub n_trials: usize,
    /// Comma-separated seeds, e.g. 0,1,2
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to inspect; a freshly initialized model is used if absent
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated site ordinals; all sites if absent
    #[arg(long)]
    pub sites: Option<String>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated algorithm list
    #[arg(long, default_value = "erm,ccfp,mixstyle_dual,dsu_dual")]
    pub algorithms: String,
    #[arg(long, default_value = "0")]
    pub seeds: String,
}

// ── Config file and resolution ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub algorithm: String,
    pub dataset: String,
    pub target_domain: Option<usize>,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_dis: f64,
    pub lambda_sem: f64,
    pub apply_prob: f64,
    pub sem_variant: String,
    pub eval_every: usize,
    pub split_ratio: f64,
    /// f32 | f64
    pub precision: String,
    pub widths: Vec<usize>,
    pub bn_eval_uses_batch_stats: bool,
    pub mix_alpha: f64,
    pub mix_prob: f64,
    pub n_per_domain: Option<usize>,
    pub angles: Option<Vec<f64>>,
    pub correlations: Option<Vec<f64>>,
    pub label_noise: Option<f64>,
    pub data_seed: u64,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            algorithm: "ccfp".into(),
            dataset: "rmnist-mini".into(),
            target_domain: None,
            seed: 0,
            steps: 5000,
            lr: 1e-3,
            batch_size: 32,
            lambda_dis: 1.0,
            lambda_sem: 1.0,
            apply_prob: 0.5,
            sem_variant: "classifier".into(),
            eval_every: 300,
            split_ratio: 0.8,
            precision: "f32".into(),
            widths: vec![32, 32, 64, 64],
            bn_eval_uses_batch_stats: false,
            mix_alpha: 0.1,
            mix_prob: 0.5,
            n_per_domain: None,
            angles: None,
            correlations: None,
            label_noise: None,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Precision {
    F32,
    F64,
}

pub struct Resolved {
    pub file: FileConfig,
    pub run: RunConfig,
    pub dataset: DatasetSpec,
    pub target_domain: Option<usize>,
    pub precision: Precision,
    pub out: Option<PathBuf>,
}

fn parse_sem_variant(s: &str) -> Result<SemVariant> {
    match s {
        "classifier" => Ok(SemVariant::Classifier),
        "feature" => Ok(SemVariant::Feature),
        other => Err(Error::config(format!(
            "unknown sem_variant '{other}' (expected classifier or feature)"
        ))),
    }
}

pub fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let mut file = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| Error::config(format!("bad config file {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    // Explicit flags override the file.
    if let Some(v) = &common.algorithm {
        file.algorithm = v.clone();
    }
    if let Some(v) = &common.dataset {
        file.dataset = v.clone();
    }
    if let Some(v) = common.target_domain {
        file.target_domain = Some(v);
    }
    if let Some(v) = common.seed {
        file.seed = v;
    }
    if let Some(v) = common.steps {
        file.steps = v;
    }
    if let Some(v) = common.lr {
        file.lr = v;
    }
    if let Some(v) = common.batch_size {
        file.batch_size = v;
    }
    if let Some(v) = common.lambda_dis {
        file.lambda_dis = v;
    }
    if let Some(v) = common.lambda_sem {
        file.lambda_sem = v;
    }
    if let Some(v) = common.apply_prob {
        file.apply_prob = v;
    }
    if let Some(v) = &common.sem_variant {
        file.sem_variant = v.clone();
    }

    let algorithm = Algorithm::from_str(&file.algorithm)?;
    let mut dataset = DatasetSpec::parse(&file.dataset)?;
    match &mut dataset {
        DatasetSpec::RmnistMini { n_per_domain, angles, data_seed } => {
            if let Some(n) = file.n_per_domain {
                *n_per_domain = n;
            }
            if let Some(a) = &file.angles {
                *angles = a.clone();
            }
            *data_seed = file.data_seed;
        }
        DatasetSpec::CmnistMini { n_per_domain, correlations, label_noise, data_seed } => {
            if let Some(n) = file.n_per_domain {
                *n_per_domain = n;
            }
            if let Some(c) = &file.correlations {
                *correlations = c.clone();
            }
            if let Some(l) = file.label_noise {
                *label_noise = l;
            }
            *data_seed = file.data_seed;
        }
        DatasetSpec::Idx { angles, .. } => {
            if let Some(a) = &file.angles {
                *angles = a.clone();
            }
        }
    }

    let precision = match file.precision.as_str() {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(Error::config(format!("unknown precision '{other}'"))),
    };

    let run = RunConfig {
        algorithm,
        train: crate::trainer::TrainConfig {
            lr: file.lr,
            batch_size: file.batch_size,
            steps: file.steps,
            weights: crate::objectives::LossWeights {
                lambda_dis: file.lambda_dis,
                lambda_sem: file.lambda_sem,
            },
            apply_prob: file.apply_prob,
            sem_variant: parse_sem_variant(&file.sem_variant)?,
            seed: file.seed,
            eval_every: file.eval_every,
        },
        backbone: crate::nn::BackboneCfg {
            widths: file.widths.clone(),
            bn_eval_uses_batch_stats: file.bn_eval_uses_batch_stats,
            ..crate::nn::BackboneCfg::default()
        },
        mix_alpha: file.mix_alpha,
        mix_prob: file.mix_prob,
        split_ratio: file.split_ratio,
    };

    Ok(Resolved {
        file,
        run,
        dataset,
        target_domain: common.target_domain.or(match &common.config {
            Some(_) => None,
            None => None,
        }),
        precision,
        out: common.out.clone(),
    })
}

fn require_target(r: &Resolved) -> Result<usize> {
    r.target_domain
        .or(r.file.target_domain)
        .ok_or_else(|| Error::config("--target-domain is required"))
}

fn require_out(r: &Resolved) -> Result<&Path> {
    r.out.as_deref().ok_or_else(|| Error::config("--out is required"))
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| Error::config(format!("bad seed '{p}'"))))
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn write_trial_artifacts<T: Real>(out: &Path, artifacts: &TrialArtifacts<T>, resolved: &Resolved) -> Result<()> {
    fs::create_dir_all(out)?;
    write(&out.join("config.json"), &serde_json::to_string_pretty(&resolved.file)?)?;
    write(&out.join("trainlog.jsonl"), &artifacts.log.to_jsonl()?)?;
    write(&out.join("metrics.json"), &artifacts.result.metrics_json()?)?;
    write(&out.join("trial.json"), &serde_json::to_string_pretty(&artifacts.result)?)?;
    if let Some(model) = &artifacts.selected_model {
        save_checkpoint(&out.join("checkpoint_selected.json"), model)?;
    }
    if let Some(model) = &artifacts.final_model {
        save_checkpoint(&out.join("checkpoint_final.json"), model)?;
    }
    Ok(())
}

// ── Command execution ───────────────────────────────────────────────────────

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(common) => {
            let r = resolve(common)?;
            match r.precision {
                Precision::F32 => cmd_train::<f32>(&r),
                Precision::F64 => cmd_train::<f64>(&r),
            }
        }
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => {
            let r = resolve(&args.common)?;
            match r.precision {
                Precision::F32 => cmd_sweep::<f32>(&r, args),
                Precision::F64 => cmd_sweep::<f64>(&r, args),
            }
        }
        Command::Diagnose(args) => {
            let r = resolve(&args.common)?;
            match r.precision {
                Precision::F32 => cmd_diagnose::<f32>(&r, args),
                Precision::F64 => cmd_diagnose::<f64>(&r, args),
            }
        }
        Command::Compare(args) => {
            let r = resolve(&args.common)?;
            match r.precision {
                Precision::F32 => cmd_compare::<f32>(&r, args),
                Precision::F64 => cmd_compare::<f64>(&r, args),
            }
        }
    }
}

fn cmd_train<T: Real>(r: &Resolved) -> Result<()> {
    let target = require_target(r)?;
    let out = require_out(r)?.to_path_buf();
    let dataset = r.dataset.build()?;
    let artifacts = run_trial::<T>(&r.run, &dataset, target)?;
    write_trial_artifacts(&out, &artifacts, r)?;
    let res = &artifacts.result;
    if let Some(reason) = &res.failed {
        eprintln!("train {} target={target} seed={}: FAILED ({reason})", res.algorithm, res.seed);
        return Err(Error::TrainAborted { step: res.selected_step, reason: reason.clone() });
    }
    println!(
        "train {} target={target} seed={}: selected step {} val {:.4} target {:.4} ({:.1}s)",
        res.algorithm,
        res.seed,
        res.selected_step,
        res.selected_val_accuracy,
        res.target_test_accuracy.unwrap_or(f64::NAN),
        res.wall_clock_seconds,
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let r = resolve(&args.common)?;
    // The checkpoint's own precision tag decides the element type.
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&args.checkpoint)?)?;
    match raw.get("precision").and_then(|p| p.as_str()) {
        Some("f32") => cmd_eval_typed::<f32>(&r, &args.checkpoint),
        Some("f64") => cmd_eval_typed::<f64>(&r, &args.checkpoint),
        other => Err(Error::Format(format!("checkpoint precision tag missing or unknown: {other:?}"))),
    }
}

fn cmd_eval_typed<T: Real>(r: &Resolved, checkpoint: &Path) -> Result<()> {
    let target = require_target(r)?;
    let dataset = r.dataset.build()?;
    let splits = split_domains(dataset, target, r.run.split_ratio, r.run.train.seed)?;
    let mut model: CheckpointModel<T> = load_checkpoint(checkpoint)?;
    let target_test = evaluate_model(&mut model, &splits.target_test, splits.image_shape)?;
    let source_val = evaluate_model(&mut model, &splits.source_val, splits.image_shape)?;
    let target_val = evaluate_model(&mut model, &splits.target_val, splits.image_shape)?;
    let report = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "target_domain": target,
        "target_test_accuracy": target_test,
        "target_val_accuracy": target_val,
        "source_val_accuracy": source_val,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &r.out {
        fs::create_dir_all(out)?;
        write(&out.join("eval.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_sweep<T: Real>(r: &Resolved, args: &SweepArgs) -> Result<()> {
    let target = require_target(r)?;
    let out = require_out(r)?.to_path_buf();
    let seeds = parse_u64_list(&args.seeds)?;
    let dataset = r.dataset.build()?;
    let space = SearchSpace::default();
    let output = random_search::<T>(&space, args.n_trials, &seeds, &r.run, &dataset, target)?;
    fs::create_dir_all(&out)?;
    write(&out.join("results.csv"), &results_csv(&output.trials))?;
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&output.summary)?)?;
    write(&out.join("config.json"), &serde_json::to_string_pretty(&r.file)?)?;
    println!(
        "sweep {}: {} trials x {} seeds -> {} runs; target accuracy {}",
        r.run.algorithm,
        args.n_trials,
        seeds.len(),
        output.trials.len(),
        output.summary.formatted,
    );
    Ok(())
}

fn cmd_diagnose<T: Real>(r: &Resolved, args: &DiagnoseArgs) -> Result<()> {
    let out = require_out(r)?.to_path_buf();
    let dataset = r.dataset.build()?;
    let mut model: CheckpointModel<T> = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut run = r.run.clone();
            run.backbone.in_channels = dataset.image_shape[0];
            run.backbone.class_count = dataset.class_count;
            build_fresh::<T>(&run)?
        }
    };
    let site_count = match &model {
        CheckpointModel::Single(m) => m.backbone.site_count(),
        CheckpointModel::Dual(m) => m.site_count(),
    };
    let sites: Vec<usize> = match &args.sites {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::config(format!("bad site '{p}'"))))
            .collect::<Result<_>>()?,
        None => (0..site_count).collect(),
    };
    let dump = dump_feature_stats(&mut model, &dataset, &sites)?;
    fs::create_dir_all(&out)?;
    write(&out.join("stats.csv"), &dump.to_csv())?;
    println!("diagnose: {} rows over {} domains x {} sites", dump.rows.len(), dataset.domain_ids.len(), sites.len());
    Ok(())
}

fn build_fresh<T: Real>(run: &RunConfig) -> Result<CheckpointModel<T>> {
    use crate::nn::{DualStreamModel, IdGen, PerturbKind, SingleStream};
    let mut rng = crate::rng::derive_rng(run.train.seed, "model-init", 0);
    Ok(match run.algorithm {
        Algorithm::Erm => {
            CheckpointModel::Single(SingleStream::new(&run.backbone, &mut IdGen::new(), &mut rng)?)
        }
        Algorithm::Ccfp => CheckpointModel::Dual(DualStreamModel::new(
            &run.backbone,
            PerturbKind::Ldp,
            run.train.apply_prob,
            run.mix_alpha,
            run.mix_prob,
            &mut rng,
        )?),
        Algorithm::MixstyleDual => CheckpointModel::Dual(DualStreamModel::new(
            &run.backbone,
            PerturbKind::Mixstyle,
            run.train.apply_prob,
            run.mix_alpha,
            run.mix_prob,
            &mut rng,
        )?),
        Algorithm::DsuDual => CheckpointModel::Dual(DualStreamModel::new(
            &run.backbone,
            PerturbKind::Dsu,
            run.train.apply_prob,
            run.mix_alpha,
            run.mix_prob,
            &mut rng,
        )?),
    })
}

fn cmd_compare<T: Real>(r: &Resolved, args: &CompareArgs) -> Result<()> {
    let seeds = parse_u64_list(&args.seeds)?;
    let algorithms: Vec<Algorithm> = args
        .algorithms
        .split(',')
        .map(|s| Algorithm::from_str(s.trim()))
        .collect::<Result<_>>()?;
    let dataset = r.dataset.build()?;
    let domains = dataset.domain_ids.clone();

    let mut jobs: Vec<(Algorithm, usize, u64)> = Vec::new();
    for &a in &algorithms {
        for &d in &domains {
            for &s in &seeds {
                jobs.push((a, d, s));
            }
        }
    }
    let dataset_ref = &dataset;
    let run_ref = &r.run;
    let results: Vec<Result<(Algorithm, usize, f64)>> = map_indexed(jobs.len(), move |j| {
        let (algo, domain, seed) = jobs[j];
        let mut run = run_ref.clone();
        run.algorithm = algo;
        run.train.seed = seed;
        let artifacts = run_trial::<T>(&run, dataset_ref, domain)?;
        Ok((algo, domain, artifacts.result.target_test_accuracy.unwrap_or(0.0)))
    });

    let mut table: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for res in results {
        let (algo, domain, acc) = res?;
        table.entry((algo.to_string(), domain)).or_default().push(acc);
    }

    let mut csv = String::from("algorithm,target_domain,mean,stderr,n\n");
    let mut header = format!("{:<16}", "algorithm");
    for d in &domains {
        header.push_str(&format!("{:<14}", d));
    }
    header.push_str("avg");
    println!("{header}");
    for algo in &algorithms {
        let mut line = format!("{:<16}", algo.to_string());
        let mut means = Vec::new();
        for d in &domains {
            let vals = &table[&(algo.to_string(), *d)];
            let agg = aggregate(vals)?;
            means.push(agg.mean);
            line.push_str(&format!("{:<14}", agg.formatted_percent()));
            csv.push_str(&format!("{algo},{d},{},{},{}\n", agg.mean, agg.stderr, agg.n));
        }
        let avg = aggregate(&means)?;
        line.push_str(&format!("{:.1}", avg.mean * 100.0));
        println!("{line}");
    }
    if let Some(out) = &r.out {
        fs::create_dir_all(out)?;
        write(&out.join("compare.csv"), &csv)?;
    }
    Ok(())
}

/// Exit code contract: 0 success, 2 configuration problems, 3 failed runs.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::TrainAborted { .. } => 3,
        _ => 2,
    }
}
