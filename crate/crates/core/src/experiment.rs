//! Experiment configuration, orchestration, reports and diagnostic exports.
//!
//! A config file holds one `key = value` per line; `#` starts a comment.
//! Relative dataset paths are resolved against the config file's directory,
//! a relative `output_dir` against `$ESRF_OUTPUT_ROOT` when it is set.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `ratings`, `trust` | dataset files (`user<TAB>item[<TAB>weight]`, `truster<TAB>trustee`) | required |
//! | `ratings_header`, `trust_header` | skip the first line | `false` |
//! | `rating_threshold` | keep weights strictly above this | none |
//! | `folds`, `fold` | fold count; fold index or `all` | `5`, `0` |
//! | `repeats` | repetitions of the split with seeds `seed, seed+1, ...` | `1` |
//! | `model` | `esrf`, `bpr`, `lightgcn` or `random` | `esrf` |
//! | `cold_start`, `cold_start_threshold` | cold-start protocol and its record cutoff | `false`, `20` |
//! | `validation_fraction` | share of each user's training items held out for early stopping | `0.1` |
//! | `inference` | `exact` or `fast` attention context at evaluation | `exact` |
//! | `output_dir` | artifact directory | `esrf-output` |
//! | `export_diagnostics`, `diagnostic_users` | write heatmap/overlap/ego files; sampled users | `false`, `20` |
//! | `checkpoint_every` | adversarial epochs between checkpoints, 0 for final only | `0` |
//! | `deterministic` | recorded in report headers; runs are always reproducible | `false` |
//! | `ablation` | comma list of `no-motif`, `no-denoise`, `no-attention`, `no-adversarial` | none |
//! | `sweep` | `key=v1,v2,...` or `key=a..b[:step]` | none |
//! | `seed`, `dim`, `layers`, `k`, `tau`, `beta`, `lambda`, `generator_lambda`, `learning_rate`, `batch_size`, `pretrain_epochs_d`, `pretrain_epochs_g`, `adversarial_epochs`, `baseline_epochs`, `patience`, `init_std`, `decoder_hidden`, `g_steps` | training hyperparameters | see [`TrainingConfig`] |
//! | `finetune` | `epoch` or `batch` | `epoch` |
//! | `binarize_motifs`, `binarize_target`, `reconstruct_all_users` | motif variants | `false` |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{train_bpr_mf, train_lightgcn};
use crate::data::{cold_start_filter, holdout, kfold_split, FeedbackOptions, InteractionLog, SocialDataset};
use crate::discriminator::attention_weights;
use crate::error::{Error, Result};
use crate::eval::{evaluate_users, EvalMode, MetricsReport, Scorer};
use crate::generator::AlternativeNeighborhood;
use crate::sparse::SparseMatrix;
use crate::trainer::{
    EsrfModel, FinetuneSchedule, InferenceMode, Trainer, TrainingConfig, TrainingData, TrainingHistory,
};

/// Environment variable that roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ESRF_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Esrf,
    Bpr,
    LightGcn,
    /// ESRF with random neighborhoods and no adversarial training.
    Random,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Esrf => "esrf",
            ModelChoice::Bpr => "bpr",
            ModelChoice::LightGcn => "lightgcn",
            ModelChoice::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "esrf" => ModelChoice::Esrf,
            "bpr" | "bpr-mf" => ModelChoice::Bpr,
            "lightgcn" => ModelChoice::LightGcn,
            "random" | "random_neighbors" | "random-neighbors" => ModelChoice::Random,
            other => return Err(Error::Config(format!("unknown model {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSelection {
    One(usize),
    All,
}

/// A grid over one config key.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

const INTEGER_KEYS: [&str; 12] = [
    "seed",
    "dim",
    "layers",
    "k",
    "batch_size",
    "pretrain_epochs_d",
    "pretrain_epochs_g",
    "adversarial_epochs",
    "baseline_epochs",
    "patience",
    "decoder_hidden",
    "g_steps",
];

impl Sweep {
    /// `key=v1,v2,...` or `key=a..b[:step]` (step 1 for integer keys, 0.1 otherwise).
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, list) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {spec:?} is not key=values")))?;
        let key = canonical_key(key.trim()).to_owned();
        let list = list.trim();
        let values: Vec<String> = if let Some((lo, rest)) = list.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((hi, step)) => (hi, Some(step)),
                None => (rest, None),
            };
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad sweep bound {s:?}")))
            };
            let (lo, hi) = (num(lo)?, num(hi)?);
            let integer = INTEGER_KEYS.contains(&key.as_str());
            let step = match step {
                Some(s) => num(s)?,
                None if integer => 1.0,
                None => 0.1,
            };
            if !(step > 0.0) || hi < lo {
                return Err(Error::Config(format!("empty sweep range {list:?}")));
            }
            let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            (0..count)
                .map(|i| {
                    let v = lo + i as f64 * step;
                    if integer {
                        format!("{}", v.round() as i64)
                    } else {
                        format!("{}", (v * 1e10).round() / 1e10)
                    }
                })
                .collect()
        } else {
            list.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect()
        };
        if values.is_empty() {
            return Err(Error::Config(format!("sweep {spec:?} has no values")));
        }
        Ok(Self { key, values })
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "d" => "dim",
        "L" => "layers",
        "lr" => "learning_rate",
        "τ" => "tau",
        "β" => "beta",
        "λ" => "lambda",
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub ratings: PathBuf,
    pub trust: PathBuf,
    pub ratings_header: bool,
    pub trust_header: bool,
    pub rating_threshold: Option<f64>,
    pub folds: usize,
    pub fold: FoldSelection,
    pub repeats: usize,
    pub model: ModelChoice,
    pub cold_start: bool,
    pub cold_start_threshold: usize,
    pub validation_fraction: f64,
    pub inference: InferenceMode,
    pub output_dir: PathBuf,
    pub export_diagnostics: bool,
    pub diagnostic_users: usize,
    pub checkpoint_every: usize,
    pub deterministic: bool,
    pub sweep: Option<Sweep>,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ratings: PathBuf::new(),
            trust: PathBuf::new(),
            ratings_header: false,
            trust_header: false,
            rating_threshold: None,
            folds: 5,
            fold: FoldSelection::One(0),
            repeats: 1,
            model: ModelChoice::Esrf,
            cold_start: false,
            cold_start_threshold: 20,
            validation_fraction: 0.1,
            inference: InferenceMode::Exact,
            output_dir: PathBuf::from("esrf-output"),
            export_diagnostics: false,
            diagnostic_users: 20,
            checkpoint_every: 0,
            deterministic: false,
            sweep: None,
            training: TrainingConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl ExperimentConfig {
    /// Reads a config file; dataset paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.ratings, &mut config.trust] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    /// Sets one key; used for config lines, CLI overrides and sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        match canonical_key(key) {
            "ratings" => self.ratings = PathBuf::from(value),
            "trust" => self.trust = PathBuf::from(value),
            "ratings_header" => self.ratings_header = parse_bool(key, value)?,
            "trust_header" => self.trust_header = parse_bool(key, value)?,
            "rating_threshold" => {
                self.rating_threshold = match value {
                    "" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "folds" => self.folds = parse_value(key, value)?,
            "fold" => {
                self.fold = match value {
                    "all" => FoldSelection::All,
                    v => FoldSelection::One(parse_value(key, v)?),
                }
            }
            "repeats" => self.repeats = parse_value(key, value)?,
            "model" => self.model = ModelChoice::parse(value)?,
            "cold_start" => self.cold_start = parse_bool(key, value)?,
            "cold_start_threshold" => self.cold_start_threshold = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "inference" => {
                self.inference = match value {
                    "exact" => InferenceMode::Exact,
                    "fast" => InferenceMode::Fast,
                    _ => return Err(Error::Config(format!("inference: expected exact or fast, got {value:?}"))),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "export_diagnostics" => self.export_diagnostics = parse_bool(key, value)?,
            "diagnostic_users" => self.diagnostic_users = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "sweep" => self.sweep = Some(Sweep::parse(value)?),
            "ablation" | "ablations" => {
                for a in value.split(',').map(str::trim).filter(|a| !a.is_empty()) {
                    self.add_ablation(a)?;
                }
            }
            "seed" => t.seed = parse_value(key, value)?,
            "dim" => t.dim = parse_value(key, value)?,
            "layers" => t.layers = parse_value(key, value)?,
            "k" => t.k = parse_value(key, value)?,
            "tau" => t.tau = parse_value(key, value)?,
            "beta" => t.beta = parse_value(key, value)?,
            "lambda" => t.lambda = parse_value(key, value)?,
            "generator_lambda" => t.generator_lambda = parse_value(key, value)?,
            "learning_rate" => t.learning_rate = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "pretrain_epochs_d" => t.pretrain_epochs_d = parse_value(key, value)?,
            "pretrain_epochs_g" => t.pretrain_epochs_g = parse_value(key, value)?,
            "adversarial_epochs" => t.adversarial_epochs = parse_value(key, value)?,
            "baseline_epochs" => t.baseline_epochs = parse_value(key, value)?,
            "patience" => t.patience = parse_value(key, value)?,
            "init_std" => t.init_std = parse_value(key, value)?,
            "decoder_hidden" => t.decoder_hidden = parse_value(key, value)?,
            "g_steps" => t.g_steps = parse_value(key, value)?,
            "finetune" => {
                t.finetune = match value {
                    "epoch" => FinetuneSchedule::Epoch,
                    "batch" => FinetuneSchedule::Batch,
                    _ => return Err(Error::Config(format!("finetune: expected epoch or batch, got {value:?}"))),
                }
            }
            "binarize_motifs" => t.binarize_motifs = parse_bool(key, value)?,
            "binarize_target" => t.binarize_target = parse_bool(key, value)?,
            "reconstruct_all_users" => t.reconstruct_all_users = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn add_ablation(&mut self, name: &str) -> Result<()> {
        let a = &mut self.training.ablations;
        match name.replace('_', "-").as_str() {
            "no-motif" => a.no_motif = true,
            "no-denoise" => a.no_denoise = true,
            "no-attention" => a.no_attention = true,
            "no-adversarial" => a.no_adversarial = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }

    /// The output directory, rooted at `$ESRF_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Training config for the chosen model, with model-implied ablations.
    pub fn effective_training(&self) -> TrainingConfig {
        let mut t = self.training.clone();
        if self.model == ModelChoice::Random {
            t.ablations.random_neighbors = true;
            t.ablations.no_adversarial = true;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("ratings", &self.ratings), ("trust", &self.trust)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{name} path is not set")));
            }
            if !p.exists() {
                return Err(Error::Config(format!("{name} file {} does not exist", p.display())));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if let FoldSelection::One(f) = self.fold {
            if f >= self.folds {
                return Err(Error::Config(format!("fold {f} out of range 0..{}", self.folds)));
            }
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        self.effective_training().validate()
    }
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Model name, with the swept setting when there is one.
    pub model: String,
    pub metrics: MetricsReport,
    pub seed: u64,
    pub fold: usize,
}

/// Artifacts of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub output_dir: PathBuf,
    /// Global alternative/explicit overlap of each diagnosed run, in percent.
    pub overlaps: Vec<f64>,
}

/// Any trained model, for evaluation and artifacts.
pub enum TrainedModel {
    Esrf(EsrfModel),
    Mf(crate::baselines::MfModel),
}

/// Loads, splits, trains, evaluates and writes every artifact.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let out = config.resolved_output_dir();
    fs::create_dir_all(&out)?;
    let dataset = SocialDataset::load(
        &config.ratings,
        &config.trust,
        &FeedbackOptions {
            rating_threshold: config.rating_threshold,
            header: config.ratings_header,
        },
        config.trust_header,
    )?;
    log::info!(
        "{} users, {} items, {} interactions, {} relations",
        dataset.feedback.n_users(),
        dataset.feedback.n_items(),
        dataset.feedback.len(),
        dataset.social.s.nnz()
    );
    let settings: Vec<Option<(String, String)>> = match &config.sweep {
        Some(s) => s.values.iter().map(|v| Some((s.key.clone(), v.clone()))).collect(),
        None => vec![None],
    };
    let folds: Vec<usize> = match config.fold {
        FoldSelection::One(f) => vec![f],
        FoldSelection::All => (0..config.folds).collect(),
    };
    let root_seed = config.training.seed;
    let mut results = Vec::new();
    let mut overlaps = Vec::new();
    for repeat in 0..config.repeats as u64 {
        let split_seed = root_seed + repeat;
        let plan = kfold_split(&dataset.feedback, config.folds, split_seed)?;
        plan.write_manifest(&dataset.feedback, &out.join(format!("splits_seed{split_seed}.tsv")))?;
        for setting in &settings {
            let mut run_config = config.clone();
            if let Some((key, value)) = setting {
                run_config.set(key, value)?;
                run_config.validate()?;
            }
            run_config.training.seed = run_config.training.seed + repeat;
            let model_name = match setting {
                Some((k, v)) => format!("{}[{k}={v}]", config.model.name()),
                None => config.model.name().to_owned(),
            };
            for &fold in &folds {
                let (train, test) = plan.train_test(&dataset.feedback, fold)?;
                let tag = run_tag(&run_config, setting.as_ref(), fold);
                let result = run_fold(
                    &run_config,
                    &dataset,
                    train,
                    test,
                    fold,
                    &model_name,
                    &tag,
                    &out,
                    &mut overlaps,
                )?;
                log::info!(
                    "{tag}: Prec@10 {:.3}% Recall@10 {:.3}% NDCG@10 {:.5}",
                    100.0 * result.metrics.precision_at_n,
                    100.0 * result.metrics.recall_at_n,
                    result.metrics.ndcg_at_n
                );
                results.push(result);
                // partial reports survive a later abort
                emit_report(&results, &out, root_seed, config.deterministic)?;
            }
        }
    }
    Ok(ExperimentOutcome {
        results,
        output_dir: out,
        overlaps,
    })
}

fn run_tag(config: &ExperimentConfig, setting: Option<&(String, String)>, fold: usize) -> String {
    let mut tag = format!("{}_seed{}_fold{fold}", config.model.name(), config.training.seed);
    if let Some((k, v)) = setting {
        let _ = write!(tag, "_{k}{v}");
    }
    if config.cold_start {
        tag.push_str("_cold");
    }
    tag
}

/// Users with fewer than `threshold` training records and a test item.
fn cold_users(train: &InteractionLog, test: &InteractionLog, threshold: usize) -> Vec<usize> {
    let degrees = train.user_degrees();
    (0..test.n_users())
        .filter(|&u| degrees[u] < threshold && !test.items_of(u).is_empty())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    config: &ExperimentConfig,
    dataset: &SocialDataset,
    train: InteractionLog,
    test: InteractionLog,
    fold: usize,
    model_name: &str,
    tag: &str,
    out: &Path,
    overlaps: &mut Vec<f64>,
) -> Result<RunResult> {
    let training = config.effective_training();
    let (train, eval_users, mode) = if config.cold_start {
        let users = cold_users(&train, &test, config.cold_start_threshold);
        if users.is_empty() {
            return Err(Error::Input("no cold-start user has a test item".into()));
        }
        (cold_start_filter(&train, config.cold_start_threshold)?, users, EvalMode::ColdStart)
    } else {
        let users = (0..test.n_users()).filter(|&u| !test.items_of(u).is_empty()).collect();
        (train, users, EvalMode::General)
    };
    let (fit, validation) = if config.validation_fraction > 0.0 {
        let (fit, val) = holdout(&train, config.validation_fraction, training.seed)?;
        (fit, Some(val))
    } else {
        (train.clone(), None)
    };
    let data = TrainingData::prepare(fit, validation, dataset.social.s.clone(), &training)?;
    let (model, history) = train_model(config.model, &data, &training, out, config.checkpoint_every)?;
    history.write_tsv(&out.join(format!("history_{tag}.tsv")))?;
    let checkpoint = match &model {
        TrainedModel::Esrf(m) => m.to_checkpoint(),
        TrainedModel::Mf(m) => m.to_checkpoint(),
    };
    checkpoint.save(&out.join(format!("checkpoint_{tag}.txt")))?;
    let scorer: Box<dyn Scorer> = match &model {
        TrainedModel::Esrf(m) => m.scorer(&data, config.inference),
        TrainedModel::Mf(m) => Box::new(m.scorer()),
    };
    // the held-out validation items are training items too
    let metrics = evaluate_users(scorer.as_ref(), &train, &test, &eval_users, 10, mode)?;
    if config.export_diagnostics {
        let social = match &model {
            TrainedModel::Esrf(m) if m.neighborhoods.iter().any(|h| !h.is_empty()) => Some(m),
            _ => None,
        };
        if let Some(m) = social {
            let dir = out.join(format!("diagnostics_{tag}"));
            let summary = export_diagnostics(m, &data, config.diagnostic_users, training.seed, &dir)?;
            overlaps.push(summary.global_overlap_percent);
        }
    }
    Ok(RunResult {
        model: model_name.to_owned(),
        metrics,
        seed: training.seed,
        fold,
    })
}

/// Trains the chosen model on prepared data.
pub fn train_model(
    choice: ModelChoice,
    data: &TrainingData,
    training: &TrainingConfig,
    out: &Path,
    checkpoint_every: usize,
) -> Result<(TrainedModel, TrainingHistory)> {
    Ok(match choice {
        ModelChoice::Esrf | ModelChoice::Random => {
            let trainer = Trainer::new(data, training.clone())?.with_checkpoints(out.to_path_buf(), checkpoint_every);
            let (m, h) = trainer.run()?;
            (TrainedModel::Esrf(m), h)
        }
        ModelChoice::Bpr => {
            let (m, h) = train_bpr_mf(data, training)?;
            (TrainedModel::Mf(m), h)
        }
        ModelChoice::LightGcn => {
            let (m, h) = train_lightgcn(data, training)?;
            (TrainedModel::Esrf(m), h)
        }
    })
}

fn format_fold(fold: Option<usize>) -> String {
    fold.map_or("mean".to_owned(), |f| f.to_string())
}

/// Rows of the report: one per result plus per-model means when a model
/// appears in several rows.
fn report_rows(results: &[RunResult]) -> Vec<(String, EvalMode, f64, f64, f64, u64, Option<usize>)> {
    let mut rows: Vec<_> = results
        .iter()
        .map(|r| {
            (
                r.model.clone(),
                r.metrics.mode,
                r.metrics.precision_at_n,
                r.metrics.recall_at_n,
                r.metrics.ndcg_at_n,
                r.seed,
                Some(r.fold),
            )
        })
        .collect();
    let mut groups: Vec<(String, EvalMode)> = Vec::new();
    for r in results {
        let key = (r.model.clone(), r.metrics.mode);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (model, mode) in groups {
        let members: Vec<&RunResult> = results
            .iter()
            .filter(|r| r.model == model && r.metrics.mode == mode)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let n = members.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| members.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        rows.push((
            model,
            mode,
            mean(|m| m.precision_at_n),
            mean(|m| m.recall_at_n),
            mean(|m| m.ndcg_at_n),
            members[0].seed,
            None,
        ));
    }
    rows
}

/// Writes `report.tsv` and `report.md`. Precision and recall are percentages
/// with 3 decimals, NDCG has 5 decimals.
pub fn emit_report(results: &[RunResult], dir: &Path, seed: u64, deterministic: bool) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Input("no results to report".into()));
    }
    let rows = report_rows(results);
    let mut tsv = format!("# seed={seed} deterministic={deterministic}\n");
    tsv.push_str("model\tmode\tPrec@10\tRecall@10\tNDCG@10\tseed\tfold\n");
    let mut md = format!("# Results (seed {seed})\n\n");
    md.push_str("| Model | Mode | Prec@10 (%) | Recall@10 (%) | NDCG@10 | Seed | Fold |\n");
    md.push_str("|---|---|---:|---:|---:|---:|---:|\n");
    for (model, mode, p, r, g, s, fold) in rows {
        let fold = format_fold(fold);
        let _ = writeln!(
            tsv,
            "{model}\t{mode}\t{:.3}\t{:.3}\t{g:.5}\t{s}\t{fold}",
            100.0 * p,
            100.0 * r
        );
        let _ = writeln!(
            md,
            "| {model} | {mode} | {:.3} | {:.3} | {g:.5} | {s} | {fold} |",
            100.0 * p,
            100.0 * r
        );
    }
    fs::write(dir.join("report.tsv"), tsv)?;
    fs::write(dir.join("report.md"), md)?;
    Ok(())
}

/// Per-user share of alternative neighbors that are also explicit relations
/// (in either direction), and the pooled percentage over all users.
pub fn overlap_stats(neighborhoods: &[AlternativeNeighborhood], social: &SparseMatrix) -> (Vec<Option<f64>>, f64) {
    let mut shared = 0usize;
    let mut total = 0usize;
    let per_user = neighborhoods
        .iter()
        .enumerate()
        .map(|(u, hood)| {
            if hood.is_empty() {
                return None;
            }
            let hits = hood
                .users()
                .filter(|&v| social.get(u, v) != 0.0 || social.get(v, u) != 0.0)
                .count();
            shared += hits;
            total += hood.len();
            Some(hits as f64 / hood.len() as f64)
        })
        .collect();
    let global = if total == 0 {
        0.0
    } else {
        100.0 * shared as f64 / total as f64
    };
    (per_user, global)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsSummary {
    pub sampled_users: Vec<usize>,
    pub global_overlap_percent: f64,
}

fn explicit_neighbors(social: &SparseMatrix, u: usize) -> Vec<usize> {
    let mut v: Vec<usize> = social.row(u).0.to_vec();
    for w in 0..social.n_rows() {
        if social.get(w, u) != 0.0 {
            v.push(w);
        }
    }
    v.sort_unstable();
    v.dedup();
    v
}

/// Writes `attention_heatmap.csv`, `overlap.tsv` and `ego_network.tsv` into
/// `dir` for `sample` users drawn with `seed`.
pub fn export_diagnostics(
    model: &EsrfModel,
    data: &TrainingData,
    sample: usize,
    seed: u64,
    dir: &Path,
) -> Result<DiagnosticsSummary> {
    let candidates: Vec<usize> = (0..model.neighborhoods.len())
        .filter(|&u| !model.neighborhoods[u].is_empty())
        .collect();
    if candidates.is_empty() || model.discriminator.attention.is_empty() {
        return Err(Error::Input("model has no alternative neighborhoods; train it first".into()));
    }
    fs::create_dir_all(dir)?;
    let labels = &data.train.users;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users: Vec<usize> = candidates
        .choose_multiple(&mut rng, sample.min(candidates.len()))
        .copied()
        .collect();
    users.sort_unstable();

    let width = model.neighborhoods.iter().map(|h| h.len()).max().unwrap_or(0);
    let mut heat = format!("# seed={seed}\nuser");
    for j in 1..=width {
        let _ = write!(heat, ",w{j}");
    }
    heat.push('\n');
    let params = &model.discriminator.attention[0];
    for &u in &users {
        let hood = &model.neighborhoods[u];
        let weights = if model.attention {
            attention_weights(
                u,
                hood,
                data.default_context[u],
                model.discriminator.user_e0.view(),
                model.discriminator.item_e0.view(),
                params,
            )
            .expect("nonempty")
        } else {
            vec![1.0 / hood.len() as f64; hood.len()]
        };
        heat.push_str(labels.label(u));
        for j in 0..width {
            let _ = write!(heat, ",{:.8}", weights.get(j).copied().unwrap_or(0.0));
        }
        heat.push('\n');
    }
    fs::write(dir.join("attention_heatmap.csv"), heat)?;

    let (per_user, global) = overlap_stats(&model.neighborhoods, &data.social);
    let mut overlap = format!("# seed={seed}\nuser\talternative\toverlap\tshare\n");
    for (u, share) in per_user.iter().enumerate() {
        if let Some(share) = share {
            let hood = &model.neighborhoods[u];
            let hits = (share * hood.len() as f64).round() as usize;
            let _ = writeln!(overlap, "{}\t{}\t{hits}\t{share:.6}", labels.label(u), hood.len());
        }
    }
    let _ = writeln!(overlap, "global\t\t\t{global:.4}%");
    fs::write(dir.join("overlap.tsv"), overlap)?;

    let mut ego = format!("# seed={seed}\nego\tneighbor\trelation\n");
    for &u in &users {
        let explicit: HashSet<usize> = explicit_neighbors(&data.social, u).into_iter().collect();
        let alternative: HashSet<usize> = model.neighborhoods[u].users().collect();
        let mut all: Vec<usize> = explicit.union(&alternative).copied().collect();
        all.sort_unstable();
        for v in all {
            let relation = match (explicit.contains(&v), alternative.contains(&v)) {
                (true, true) => "overlap",
                (true, false) => "explicit",
                _ => "alternative",
            };
            let _ = writeln!(ego, "{}\t{}\t{relation}", labels.label(u), labels.label(v));
        }
    }
    fs::write(dir.join("ego_network.tsv"), ego)?;
    Ok(DiagnosticsSummary {
        sampled_users: users,
        global_overlap_percent: global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_config_and_overrides() {
        let c = ExperimentConfig::parse(
            "# toy\nratings = r.tsv\ntrust = t.tsv\nk = 10\nL = 2\nbeta=0.5\nfold = all\nmodel = lightgcn\nablation = no-motif, no_attention\n",
        )
        .unwrap();
        assert_eq!(c.training.k, 10);
        assert_eq!(c.training.layers, 2);
        assert_eq!(c.training.beta, 0.5);
        assert_eq!(c.fold, FoldSelection::All);
        assert_eq!(c.model, ModelChoice::LightGcn);
        assert!(c.training.ablations.no_motif && c.training.ablations.no_attention);
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("k = ten").is_err());
        assert!(ExperimentConfig::parse("just a line").is_err());
    }

    #[test]
    fn sweep_lists_and_ranges() {
        let s = Sweep::parse("k=10,20,30,40,50").unwrap();
        assert_eq!(s.values, ["10", "20", "30", "40", "50"]);
        let b = Sweep::parse("beta=0.1..0.9").unwrap();
        assert_eq!(b.values.len(), 9);
        assert_eq!(b.values[2], "0.3");
        assert_eq!(b.values[8], "0.9");
        assert_eq!(Sweep::parse("k=2..6:2").unwrap().values, ["2", "4", "6"]);
        assert!(Sweep::parse("k=5..1").is_err());
        assert!(Sweep::parse("k").is_err());
    }

    #[test]
    fn overlap_extremes() {
        let s = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap();
        let same = vec![
            AlternativeNeighborhood::from_users([1, 2]),
            AlternativeNeighborhood::from_users([0, 2]),
            AlternativeNeighborhood::from_users([0, 1]),
        ];
        assert_eq!(overlap_stats(&same, &s).1, 100.0);
        let s2 = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0)]).unwrap();
        let disjoint = vec![
            AlternativeNeighborhood::from_users([2]),
            AlternativeNeighborhood::from_users([2]),
            AlternativeNeighborhood::default(),
        ];
        let (per, global) = overlap_stats(&disjoint, &s2);
        assert_eq!(global, 0.0);
        assert_eq!(per, vec![Some(0.0), Some(0.0), None]);
    }

    fn result(model: &str, mode: EvalMode, fold: usize, p: f64) -> RunResult {
        RunResult {
            model: model.into(),
            metrics: MetricsReport {
                precision_at_n: p,
                recall_at_n: 0.5,
                ndcg_at_n: 0.123456789,
                n: 10,
                user_count: 3,
                mode,
            },
            seed: 4,
            fold,
        }
    }

    #[test]
    fn report_layout() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            result("bpr", EvalMode::General, 0, 0.07585),
            result("bpr", EvalMode::ColdStart, 0, 0.05),
            result("esrf", EvalMode::General, 0, 0.10723),
            result("esrf", EvalMode::ColdStart, 0, 0.06),
        ];
        emit_report(&results, dir.path(), 4, true).unwrap();
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "model\tmode\tPrec@10\tRecall@10\tNDCG@10\tseed\tfold");
        assert_eq!(lines[2], "bpr\tgeneral\t7.585\t50.000\t0.12346\t4\t0");
        assert!(lines[0].contains("seed=4"));
        let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(md.contains("| esrf | cold_start | 6.000 |"));
        assert!(emit_report(&[], dir.path(), 4, true).is_err());
    }

    #[test]
    fn fold_means_are_appended() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            result("bpr", EvalMode::General, 0, 0.1),
            result("bpr", EvalMode::General, 1, 0.2),
        ];
        emit_report(&results, dir.path(), 4, false).unwrap();
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert!(tsv.lines().last().unwrap().starts_with("bpr\tgeneral\t15.000"));
        assert!(tsv.lines().last().unwrap().ends_with("\tmean"));
    }
}
