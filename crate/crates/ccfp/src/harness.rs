//! Experiment protocol: single trials with training-domain model selection,
//! random hyperparameter search across seeds, aggregation, and the
//! feature-statistics diagnostic dump.

use crate::data::{
    load_idx, make_colored_domains, make_rotated_domains, split_domains, synth_glyphs,
    DomainDataset,
};
use crate::error::{Error, Result};
use crate::nn::{
    BackboneCfg, BindMode, CheckpointModel, DualPass, DualStreamModel, IdGen, Mode, PerturbKind,
    SingleStream,
};
use crate::rng::derive_rng;
use crate::tensor::par::map_indexed;
use crate::tensor::{Graph, Real, Tensor};
use crate::trainer::{accuracy_of, train_ccfp, train_erm, CheckpointRecord, TrainConfig, TrainLog};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

// ── Algorithms and run configuration ────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    Ccfp,
    MixstyleDual,
    DsuDual,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Algorithm::Erm),
            "ccfp" => Ok(Algorithm::Ccfp),
            "mixstyle_dual" => Ok(Algorithm::MixstyleDual),
            "dsu_dual" => Ok(Algorithm::DsuDual),
            other => Err(Error::config(format!(
                "unknown algorithm '{other}' (expected erm, ccfp, mixstyle_dual, dsu_dual)"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Algorithm::Erm => "erm",
            Algorithm::Ccfp => "ccfp",
            Algorithm::MixstyleDual => "mixstyle_dual",
            Algorithm::DsuDual => "dsu_dual",
        };
        f.write_str(s)
    }
}

/// Everything one trial needs besides the dataset and target domain.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub train: TrainConfig,
    pub backbone: BackboneCfg,
    pub mix_alpha: f64,
    pub mix_prob: f64,
    pub split_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::Ccfp,
            train: TrainConfig::default(),
            backbone: BackboneCfg::default(),
            mix_alpha: 0.1,
            mix_prob: 0.5,
            split_ratio: 0.8,
        }
    }
}

// ── Dataset specifications ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Rotated glyph domains (single-channel).
    RmnistMini { n_per_domain: usize, angles: Vec<f64>, data_seed: u64 },
    /// Color-label correlation domains (two-channel, binary labels).
    CmnistMini { n_per_domain: usize, correlations: Vec<f64>, label_noise: f64, data_seed: u64 },
    /// IDX images/labels pair turned into rotation domains.
    Idx { images: PathBuf, labels: PathBuf, limit: Option<usize>, angles: Vec<f64> },
}

impl DatasetSpec {
    pub fn rmnist_mini() -> Self {
        DatasetSpec::RmnistMini {
            n_per_domain: 2000,
            angles: vec![0.0, 15.0, 30.0, 45.0],
            data_seed: 0,
        }
    }

    pub fn cmnist_mini() -> Self {
        DatasetSpec::CmnistMini {
            n_per_domain: 2000,
            correlations: vec![0.9, 0.8, 0.1],
            label_noise: 0.25,
            data_seed: 0,
        }
    }

    /// Parse a CLI dataset argument: `rmnist-mini`, `cmnist-mini`, or
    /// `idx:<images>,<labels>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rmnist-mini" => Ok(Self::rmnist_mini()),
            "cmnist-mini" => Ok(Self::cmnist_mini()),
            other => {
                if let Some(rest) = other.strip_prefix("idx:") {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() != 2 {
                        return Err(Error::config(
                            "idx dataset expects 'idx:<images_path>,<labels_path>'",
                        ));
                    }
                    Ok(DatasetSpec::Idx {
                        images: PathBuf::from(parts[0]),
                        labels: PathBuf::from(parts[1]),
                        limit: None,
                        angles: vec![0.0, 15.0, 30.0, 45.0],
                    })
                } else {
                    Err(Error::config(format!(
                        "unknown dataset '{other}' (expected rmnist-mini, cmnist-mini, idx:<paths>)"
                    )))
                }
            }
        }
    }

    pub fn build(&self) -> Result<DomainDataset> {
        match self {
            DatasetSpec::RmnistMini { n_per_domain, angles, data_seed } => {
                let total = n_per_domain * angles.len();
                let base = synth_glyphs(*data_seed, total.div_ceil(10), 10)?;
                make_rotated_domains(&base, angles)
            }
            DatasetSpec::CmnistMini { n_per_domain, correlations, label_noise, data_seed } => {
                let total = n_per_domain * correlations.len();
                let base = synth_glyphs(*data_seed, total.div_ceil(10), 10)?;
                make_colored_domains(&base, correlations, *label_noise, *data_seed)
            }
            DatasetSpec::Idx { images, labels, limit, angles } => {
                let mut base = load_idx(images, labels)?;
                if let Some(n) = limit {
                    base.images.truncate(*n);
                    base.labels.truncate(*n);
                }
                make_rotated_domains(&base, angles)
            }
        }
    }
}

// ── Trial execution ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialResult {
    pub algorithm: Algorithm,
    pub target_domain: usize,
    pub seed: u64,
    /// Index of the hyperparameter draw within a search; 0 for single runs.
    pub trial_index: usize,
    pub config: RunConfig,
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected_step: usize,
    pub selected_val_accuracy: f64,
    pub target_test_accuracy: Option<f64>,
    pub failed: Option<String>,
    pub wall_clock_seconds: f64,
}

impl TrialResult {
    /// The deterministic subset of the trial: everything except wall-clock
    /// time. Serialized as `metrics.json`.
    pub fn metrics_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "algorithm": self.algorithm,
            "target_domain": self.target_domain,
            "seed": self.seed,
            "selected_step": self.selected_step,
            "selected_val_accuracy": self.selected_val_accuracy,
            "target_test_accuracy": self.target_test_accuracy,
            "failed": self.failed,
            "checkpoints": self.checkpoints,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Checkpoint selection: highest source-validation accuracy, earliest step on
/// ties.
pub fn select_checkpoint(checkpoints: &[CheckpointRecord]) -> Option<&CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for c in checkpoints {
        if best.is_none_or(|b| c.source_val_accuracy > b.source_val_accuracy) {
            best = Some(c);
        }
    }
    best
}

pub fn evaluate_model<T: Real>(
    model: &mut CheckpointModel<T>,
    examples: &[crate::data::Example],
    shape: [usize; 3],
) -> Result<f64> {
    match model {
        CheckpointModel::Single(m) => accuracy_of::<T>(|d, s| m.predict_batch(d, s), examples, shape),
        CheckpointModel::Dual(m) => accuracy_of::<T>(|d, s| m.predict_batch(d, s), examples, shape),
    }
}

pub struct TrialArtifacts<T: Real> {
    pub result: TrialResult,
    pub log: TrainLog,
    pub selected_model: Option<CheckpointModel<T>>,
    pub final_model: Option<CheckpointModel<T>>,
}

fn build_model<T: Real>(run: &RunConfig, seed: u64) -> Result<CheckpointModel<T>> {
    let mut rng = derive_rng(seed, "model-init", 0);
    match run.algorithm {
        Algorithm::Erm => {
            let mut ids = IdGen::new();
            Ok(CheckpointModel::Single(SingleStream::new(&run.backbone, &mut ids, &mut rng)?))
        }
        Algorithm::Ccfp | Algorithm::MixstyleDual | Algorithm::DsuDual => {
            let kind = match run.algorithm {
                Algorithm::Ccfp => PerturbKind::Ldp,
                Algorithm::MixstyleDual => PerturbKind::Mixstyle,
                _ => PerturbKind::Dsu,
            };
            Ok(CheckpointModel::Dual(DualStreamModel::new(
                &run.backbone,
                kind,
                run.train.apply_prob,
                run.mix_alpha,
                run.mix_prob,
                &mut rng,
            )?))
        }
    }
}

/// Train, checkpoint, select by source-validation accuracy, evaluate the
/// selected checkpoint on the target test split once. A training abort is
/// reported in the result, not propagated.
pub fn run_trial<T: Real>(
    run: &RunConfig,
    dataset: &DomainDataset,
    target_domain: usize,
) -> Result<TrialArtifacts<T>> {
    let start = Instant::now();
    let mut run = run.clone();
    run.backbone.in_channels = dataset.image_shape[0];
    run.backbone.class_count = dataset.class_count;
    run.train.validate()?;

    let seed = run.train.seed;
    let splits = split_domains(dataset.clone(), target_domain, run.split_ratio, seed)?;
    let model = build_model::<T>(&run, seed)?;

    let outcome = match model {
        CheckpointModel::Single(m) => {
            train_erm(&run.train, m, &splits).map(|(m, out)| (CheckpointModel::Single(m), out))
        }
        CheckpointModel::Dual(m) => {
            train_ccfp(&run.train, m, &splits).map(|(m, out)| (CheckpointModel::Dual(m), out))
        }
    };

    match outcome {
        Ok((final_model, out)) => {
            let selected = select_checkpoint(&out.log.checkpoints)
                .ok_or_else(|| Error::config("no checkpoints recorded"))?
                .clone();
            let mut selected_model = out
                .checkpoints
                .iter()
                .find(|c| c.step == selected.step)
                .map(|c| c.model.clone())
                .expect("selected checkpoint snapshot exists");
            let target_acc =
                evaluate_model(&mut selected_model, &splits.target_test, splits.image_shape)?;
            Ok(TrialArtifacts {
                result: TrialResult {
                    algorithm: run.algorithm,
                    target_domain,
                    seed,
                    trial_index: 0,
                    config: run.clone(),
                    checkpoints: out.log.checkpoints.clone(),
                    selected_step: selected.step,
                    selected_val_accuracy: selected.source_val_accuracy,
                    target_test_accuracy: Some(target_acc),
                    failed: None,
                    wall_clock_seconds: start.elapsed().as_secs_f64(),
                },
                log: out.log,
                selected_model: Some(selected_model),
                final_model: Some(final_model),
            })
        }
        Err(Error::TrainAborted { step, reason }) => Ok(TrialArtifacts {
            result: TrialResult {
                algorithm: run.algorithm,
                target_domain,
                seed,
                trial_index: 0,
                config: run.clone(),
                checkpoints: Vec::new(),
                selected_step: 0,
                selected_val_accuracy: 0.0,
                target_test_accuracy: None,
                failed: Some(format!("aborted at step {step}: {reason}")),
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            },
            log: TrainLog::default(),
            selected_model: None,
            final_model: None,
        }),
        Err(e) => Err(e),
    }
}

// ── Random hyperparameter search ────────────────────────────────────────────

/// Sampling ranges for the random search. Continuous ranges are sampled
/// log-uniformly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SearchSpace {
    pub lr_log10: (f64, f64),
    pub batch_choices: Vec<usize>,
    pub lambda_dis: (f64, f64),
    pub lambda_sem: (f64, f64),
    pub apply_prob_choices: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr_log10: (-3.5, -2.5),
            batch_choices: vec![16, 32],
            lambda_dis: (0.1, 10.0),
            lambda_sem: (0.1, 10.0),
            apply_prob_choices: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.lambda_dis, self.lambda_sem] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::config(format!("invalid lambda range ({lo}, {hi})")));
            }
        }
        if self.batch_choices.is_empty() || self.apply_prob_choices.is_empty() {
            return Err(Error::config("empty choice list in search space"));
        }
        Ok(())
    }

    /// Hyperparameters of one trial; deterministic per trial index and
    /// shared across seeds.
    pub fn sample(&self, trial_index: u64, base: &TrainConfig) -> TrainConfig {
        let mut rng = derive_rng(0, "hparams", trial_index);
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            (rng.gen_range(lo.ln()..=hi.ln())).exp()
        };
        let mut cfg = base.clone();
        cfg.lr = 10f64.powf(rng.gen_range(self.lr_log10.0..=self.lr_log10.1));
        cfg.batch_size = self.batch_choices[rng.gen_range(0..self.batch_choices.len())];
        cfg.weights.lambda_dis = log_uniform(&mut rng, self.lambda_dis.0, self.lambda_dis.1);
        cfg.weights.lambda_sem = log_uniform(&mut rng, self.lambda_sem.0, self.lambda_sem.1);
        cfg.apply_prob = self.apply_prob_choices[rng.gen_range(0..self.apply_prob_choices.len())];
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedBest {
    pub seed: u64,
    pub trial_index: usize,
    pub val_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchSummary {
    pub per_seed_best: Vec<SeedBest>,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub formatted: String,
}

pub struct SearchOutput {
    pub trials: Vec<TrialResult>,
    pub summary: SearchSummary,
}

/// `n_trials` hyperparameter draws, each run under every seed. Failed trials
/// are recorded, not propagated. The summary aggregates each seed's
/// best-by-validation target accuracy.
pub fn random_search<T: Real>(
    space: &SearchSpace,
    n_trials: usize,
    seeds: &[u64],
    run: &RunConfig,
    dataset: &DomainDataset,
    target_domain: usize,
) -> Result<SearchOutput> {
    if n_trials < 1 {
        return Err(Error::config("n_trials must be >= 1"));
    }
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    space.validate()?;

    let jobs: Vec<(usize, u64)> = (0..n_trials)
        .flat_map(|t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results: Vec<Result<TrialResult>> = map_indexed(jobs.len(), |j| {
        let (trial_index, seed) = jobs[j];
        let mut cfg = run.clone();
        cfg.train = space.sample(trial_index as u64, &run.train);
        cfg.train.seed = seed;
        run_trial::<T>(&cfg, dataset, target_domain).map(|a| {
            let mut res = a.result;
            res.trial_index = trial_index;
            res
        })
    });
    let mut trials = Vec::with_capacity(results.len());
    for r in results {
        trials.push(r?);
    }

    let mut per_seed_best = Vec::new();
    for &seed in seeds {
        let best = trials
            .iter()
            .filter(|t| t.seed == seed && t.failed.is_none())
            .max_by(|a, b| {
                a.selected_val_accuracy
                    .partial_cmp(&b.selected_val_accuracy)
                    .unwrap()
                    .then(b.trial_index.cmp(&a.trial_index)) // earlier trial wins ties
            });
        if let Some(t) = best {
            per_seed_best.push(SeedBest {
                seed,
                trial_index: t.trial_index,
                val_accuracy: t.selected_val_accuracy,
                target_accuracy: t.target_test_accuracy.unwrap_or(0.0),
            });
        }
    }
    let values: Vec<f64> = per_seed_best.iter().map(|b| b.target_accuracy).collect();
    let agg = aggregate(&values)?;
    Ok(SearchOutput {
        trials,
        summary: SearchSummary {
            per_seed_best,
            mean: agg.mean,
            stderr: agg.stderr,
            n: agg.n,
            formatted: agg.formatted_percent(),
        },
    })
}

pub fn results_csv(trials: &[TrialResult]) -> String {
    let mut out = String::from(
        "trial,seed,algorithm,target_domain,lr,batch_size,lambda_dis,lambda_sem,apply_prob,\
         selected_step,selected_val_accuracy,target_test_accuracy,failed\n",
    );
    for t in trials {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            t.trial_index,
            t.seed,
            t.algorithm,
            t.target_domain,
            t.config.train.lr,
            t.config.train.batch_size,
            t.config.train.weights.lambda_dis,
            t.config.train.weights.lambda_sem,
            t.config.train.apply_prob,
            t.selected_step,
            t.selected_val_accuracy,
            t.target_test_accuracy.map_or(String::new(), |v| v.to_string()),
            t.failed.as_deref().unwrap_or(""),
        ));
    }
    out
}

// ── Aggregation ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation divided by sqrt(n); zero for n = 1.
    pub stderr: f64,
    pub n: usize,
}

impl Aggregate {
    /// Table formatting: accuracies as percentages, one decimal.
    pub fn formatted_percent(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean * 100.0, self.stderr * 100.0)
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Aggregation("empty result group".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok(Aggregate { mean, stderr, n })
}

// ── Feature-statistics diagnostics ──────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StatsRow {
    pub domain: usize,
    pub site: usize,
    pub channel: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StatsDump {
    pub rows: Vec<StatsRow>,
}

impl StatsDump {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,site,channel,mean,std\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.domain, r.site, r.channel, r.mean, r.std));
        }
        out
    }
}

/// One evaluation-mode pass per domain; per (domain, site, channel) mean and
/// population std of the tap activations over all examples and spatial
/// positions. For a dual model the perturbed (inference) stream is tapped.
pub fn dump_feature_stats<T: Real>(
    model: &mut CheckpointModel<T>,
    ds: &DomainDataset,
    sites: &[usize],
) -> Result<StatsDump> {
    let site_count = match model {
        CheckpointModel::Single(m) => m.backbone.site_count(),
        CheckpointModel::Dual(m) => m.site_count(),
    };
    for &s in sites {
        if s >= site_count {
            return Err(Error::config(format!(
                "unknown tap site {s}; model has {site_count} sites"
            )));
        }
    }
    let [c, h, w] = ds.image_shape;
    let mut rows = Vec::new();
    for &domain in &ds.domain_ids {
        let examples = ds.domain_examples(domain);
        if examples.is_empty() {
            continue;
        }
        // (sum, sumsq, count) per (site ordinal, channel)
        let mut acc: Vec<Vec<(f64, f64, u64)>> = Vec::new();
        for chunk in examples.chunks(128) {
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for ex in chunk {
                data.extend(ex.image.iter().map(|&p| T::from_f64(p as f64)));
            }
            let g: Graph<T> = Graph::new();
            let x = g.leaf(data, vec![chunk.len(), c, h, w], false, None)?;
            let taps: Vec<Tensor<T>> = match model {
                CheckpointModel::Single(m) => {
                    let (_, _, taps) = m.forward(
                        &g,
                        &x,
                        Mode::Eval,
                        BindMode::Frozen,
                        false,
                        true,
                        &mut |_, _, t| Ok(t),
                    )?;
                    taps
                }
                CheckpointModel::Dual(m) => {
                    let draws = m.eval_draws();
                    // Evaluation-mode taps of the inference stream only.
                    let acts = m.dual_pass(&g, &x, DualPass::Eval, &draws)?;
                    acts.taps_p
                }
            };
            if acc.is_empty() {
                acc = taps.iter().map(|t| vec![(0.0, 0.0, 0u64); t.shape()[1]]).collect();
            }
            for (tap, slot) in taps.iter().zip(&mut acc) {
                let shape = tap.shape().to_vec();
                let (b, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let data = tap.data();
                for bi in 0..b {
                    for ci in 0..ch {
                        let plane = &data[(bi * ch + ci) * hw..(bi * ch + ci + 1) * hw];
                        let (sum, sumsq, count) = &mut slot[ci];
                        for &v in plane {
                            let v = v.as_f64();
                            *sum += v;
                            *sumsq += v * v;
                            *count += 1;
                        }
                    }
                }
            }
        }
        for &site in sites {
            for (channel, &(sum, sumsq, count)) in acc[site].iter().enumerate() {
                let mean = sum / count as f64;
                let var = (sumsq / count as f64 - mean * mean).max(0.0);
                rows.push(StatsRow { domain, site, channel, mean, std: var.sqrt() });
            }
        }
    }
    Ok(StatsDump { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_reference_values() {
        let a = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert!((a.mean - 2.0).abs() < 1e-12);
        assert!((a.stderr - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((a.stderr - 0.5774).abs() < 1e-4);

        let single = aggregate(&[0.5]).unwrap();
        assert_eq!(single.stderr, 0.0);
        assert_eq!(single.n, 1);

        let constant = aggregate(&[0.7, 0.7, 0.7, 0.7]).unwrap();
        assert_eq!(constant.stderr, 0.0);

        assert!(matches!(aggregate(&[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let a = aggregate(&[0.1, 0.9, 0.4]).unwrap();
        let b = aggregate(&[0.9, 0.4, 0.1]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15 && (a.stderr - b.stderr).abs() < 1e-15);
    }

    #[test]
    fn formatted_percent_matches_table_style() {
        let a = Aggregate { mean: 0.978, stderr: 0.001, n: 3 };
        assert_eq!(a.formatted_percent(), "97.8 ± 0.1");
    }

    #[test]
    fn checkpoint_selection_takes_first_maximum() {
        let cps = vec![
            CheckpointRecord { step: 100, source_val_accuracy: 0.7 },
            CheckpointRecord { step: 200, source_val_accuracy: 0.9 },
            CheckpointRecord { step: 300, source_val_accuracy: 0.9 },
        ];
        assert_eq!(select_checkpoint(&cps).unwrap().step, 200);
        let cps2 = vec![
            CheckpointRecord { step: 10, source_val_accuracy: 0.7 },
            CheckpointRecord { step: 20, source_val_accuracy: 0.9 },
        ];
        assert_eq!(select_checkpoint(&cps2).unwrap().step, 20);
    }

    #[test]
    fn dataset_spec_parsing() {
        assert_eq!(DatasetSpec::parse("rmnist-mini").unwrap(), DatasetSpec::rmnist_mini());
        assert_eq!(DatasetSpec::parse("cmnist-mini").unwrap(), DatasetSpec::cmnist_mini());
        assert!(DatasetSpec::parse("idx:a.idx,b.idx").is_ok());
        assert!(matches!(DatasetSpec::parse("idx:a.idx"), Err(Error::Config(_))));
        assert!(matches!(DatasetSpec::parse("mnist"), Err(Error::Config(_))));
    }

    #[test]
    fn hyperparameter_samples_are_deterministic_and_in_range() {
        let space = SearchSpace::default();
        let base = TrainConfig::default();
        for t in 0..50 {
            let a = space.sample(t, &base);
            let b = space.sample(t, &base);
            assert_eq!(a, b, "same trial index gives same config");
            assert!((0.1..=10.0).contains(&a.weights.lambda_dis));
            assert!((0.1..=10.0).contains(&a.weights.lambda_sem));
            assert!(space.batch_choices.contains(&a.batch_size));
            assert!(space.apply_prob_choices.contains(&a.apply_prob));
            let lg = a.lr.log10();
            assert!((space.lr_log10.0..=space.lr_log10.1).contains(&lg));
        }
    }
}
