//! Experiment runner: generates or loads the domains for each seed, trains
//! the requested learners, evaluates accuracy on held-out domains and
//! aggregates the results into a report.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{train_erm, train_finetune, train_frozen, BASELINE_HIDDEN};
use crate::crossval::{
    accuracy, lodcv_select, score_fold_models, tdv_select, train_fold_models, train_full_models,
    CvData, CvSetup, HyperPoint, SelectorKind,
};
use crate::datagen::{
    coarsen_dataset, domain_name, gen_syn1, gen_syn2, load_csv, syn1_hierarchy, syn2_hierarchy,
    DatasetManifest,
};
use crate::dataset::{DomainDataset, LabelLevel};
use crate::error::{invalid, Error, Result};
use crate::hierarchy::HierarchyMap;
use crate::models::{Architecture, ModelBundle};
use crate::objective::{BatchMode, TrainConfig};
use crate::theory::{TheoryInstance, TheoryVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Syn1,
    Syn2,
    Theory,
    CustomManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodName {
    #[serde(rename = "ours+CVI")]
    OursCvI,
    #[serde(rename = "ours+CVII")]
    OursCvII,
    #[serde(rename = "ours+TrCV")]
    OursTrCv,
    #[serde(rename = "ours+LODCV")]
    OursLodCv,
    #[serde(rename = "ours+TDV")]
    OursTdv,
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "FE")]
    Fe,
}

impl MethodName {
    pub const ALL: [MethodName; 8] = [
        Self::OursCvI,
        Self::OursCvII,
        Self::OursTrCv,
        Self::OursLodCv,
        Self::OursTdv,
        Self::Erm,
        Self::Ft,
        Self::Fe,
    ];

    fn selector(self) -> Option<SelectorKind> {
        match self {
            Self::OursCvI => Some(SelectorKind::CvI),
            Self::OursCvII => Some(SelectorKind::CvII),
            Self::OursTrCv => Some(SelectorKind::TrCv),
            Self::OursLodCv => Some(SelectorKind::LodCv),
            Self::OursTdv => Some(SelectorKind::Tdv),
            _ => None,
        }
    }

    fn uses_fold_models(self) -> bool {
        matches!(self, Self::OursCvI | Self::OursCvII | Self::OursTrCv)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OursCvI => "ours+CVI",
            Self::OursCvII => "ours+CVII",
            Self::OursTrCv => "ours+TrCV",
            Self::OursLodCv => "ours+LODCV",
            Self::OursTdv => "ours+TDV",
            Self::Erm => "ERM",
            Self::Ft => "FT",
            Self::Fe => "FE",
        })
    }
}

/// Layer widths of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub feature_dim: Option<usize>,
}

/// Optimizer settings shared by every learner; the schedule fields come from
/// the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub l2_coef: f64,
    pub max_epoch: usize,
    pub batch_mode: BatchMode,
}

impl TrainSettings {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            l2_coef: self.l2_coef,
            max_epoch: self.max_epoch,
            t_threshold: 0,
            lambda_after: 0.0,
            batch_mode: self.batch_mode,
            seed,
            aux_coarse_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub e_star: f64,
    #[serde(default)]
    pub e_ad: Vec<f64>,
    #[serde(default)]
    pub target_samples: usize,
    #[serde(default)]
    pub ad_samples: usize,
    #[serde(default)]
    pub grid: Vec<HyperPoint>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub methods: Vec<MethodName>,
    #[serde(default)]
    pub eval_domains: Vec<f64>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Defaults to the benchmark's published settings.
    #[serde(default)]
    pub train: Option<TrainSettings>,
    /// Network of the invariant learner; defaults per benchmark.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    /// Network of ERM, FT and FE.
    #[serde(default)]
    pub baseline_arch: Option<ArchSpec>,
    /// Dataset manifest for `custom-manifest`. Relative paths resolve
    /// against the config file's directory when loaded with `from_file`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Fine domain of the manifest used for training; the other fine domains
    /// are evaluated.
    #[serde(default)]
    pub target_domain: Option<String>,
    /// Instance file for `theory`.
    #[serde(default)]
    pub theory_instance: Option<PathBuf>,
    /// Grid points must come from the published candidate sets.
    #[serde(default = "default_true")]
    pub restrict_grid: bool,
}

fn default_k() -> usize {
    10
}

fn default_eval_samples() -> usize {
    2000
}

fn default_true() -> bool {
    true
}

const SYN1_LAMBDAS: [f64; 5] = [1.0, 10.0, 100.0, 1000.0, 10000.0];
const SYN2_LAMBDAS: [f64; 4] = [0.0, 0.001, 80.0, 100.0];

impl ExperimentConfig {
    /// The Synthetic Data 1 protocol at target domain `e_star`, evaluated on
    /// `-e_star`.
    pub fn syn1(e_star: f64) -> Self {
        let train = Self::default_train(Experiment::Syn1);
        let step = train.max_epoch / 5;
        Self {
            experiment: Experiment::Syn1,
            e_star,
            e_ad: vec![-100.0, -50.0, 0.0, 50.0, 100.0],
            target_samples: 2000,
            ad_samples: 1000,
            grid: crate::crossval::grid(&[0, step, 2 * step], &SYN1_LAMBDAS),
            k: 10,
            seeds: vec![1, 2, 3, 4, 5],
            methods: MethodName::ALL.to_vec(),
            eval_domains: vec![-e_star],
            eval_samples: 2000,
            train: Some(train),
            arch: None,
            baseline_arch: None,
            manifest: None,
            target_domain: None,
            theory_instance: None,
            restrict_grid: true,
        }
    }

    /// The Synthetic Data 2 protocol with auxiliary domains `{e_ad, 40}`.
    pub fn syn2(e_ad: f64) -> Self {
        Self {
            experiment: Experiment::Syn2,
            e_star: 20.0,
            e_ad: vec![e_ad, 40.0],
            target_samples: 60000,
            ad_samples: 20000,
            grid: crate::crossval::grid(&[0], &SYN2_LAMBDAS),
            methods: vec![MethodName::OursCvI, MethodName::OursCvII, MethodName::OursTdv],
            eval_domains: vec![-20.0],
            train: Some(Self::default_train(Experiment::Syn2)),
            ..Self::syn1(20.0)
        }
    }

    pub fn theory(instance: PathBuf) -> Self {
        Self {
            experiment: Experiment::Theory,
            e_ad: Vec::new(),
            grid: Vec::new(),
            seeds: Vec::new(),
            methods: Vec::new(),
            eval_domains: Vec::new(),
            train: None,
            theory_instance: Some(instance),
            ..Self::syn1(0.0)
        }
    }

    /// Parses a JSON config. For the synthetic benchmarks, omitted fields
    /// take the benchmark's published values; an omitted Syn1 grid follows
    /// the configured epoch count.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: serde_json::Value = serde_json::from_str(text)?;
        let Some(fields) = given.as_object() else {
            return Ok(serde_json::from_value(given)?);
        };
        let base = match fields.get("experiment").and_then(|v| v.as_str()) {
            Some("syn1") => Self::syn1(fields.get("e_star").and_then(|v| v.as_f64()).unwrap_or(0.0)),
            Some("syn2") => Self::syn2(0.0),
            _ => return Ok(serde_json::from_value(given)?),
        };
        let mut merged = serde_json::to_value(&base)?;
        let target = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in fields {
            target.insert(k.clone(), v.clone());
        }
        let mut config: Self = serde_json::from_value(merged)?;
        if config.experiment == Experiment::Syn1 && !fields.contains_key("grid") {
            let step = config.train_settings().max_epoch / 5;
            config.grid = crate::crossval::grid(&[0, step, 2 * step], &SYN1_LAMBDAS);
        }
        Ok(config)
    }

    /// Reads a JSON config with [`Self::from_json`]; relative manifest and
    /// instance paths are taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.manifest, &mut config.theory_instance].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn default_train(experiment: Experiment) -> TrainSettings {
        match experiment {
            Experiment::Syn2 => TrainSettings {
                learning_rate: 0.05,
                l2_coef: 0.001,
                max_epoch: 500,
                batch_mode: BatchMode::Minibatch { parts: 50 },
            },
            _ => TrainSettings {
                learning_rate: 0.0115,
                l2_coef: 0.01,
                max_epoch: 500,
                batch_mode: BatchMode::Full,
            },
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        self.train
            .clone()
            .unwrap_or_else(|| Self::default_train(self.experiment))
    }

    fn arch_spec(&self) -> ArchSpec {
        self.arch.clone().unwrap_or_else(|| match self.experiment {
            Experiment::Syn2 => ArchSpec {
                hidden: vec![8, 8],
                feature_dim: Some(1),
            },
            _ => ArchSpec {
                hidden: vec![20, 20],
                feature_dim: Some(1),
            },
        })
    }

    fn baseline_spec(&self) -> ArchSpec {
        self.baseline_arch.clone().unwrap_or(ArchSpec {
            hidden: BASELINE_HIDDEN.to_vec(),
            feature_dim: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment == Experiment::Theory {
            if self.theory_instance.is_none() {
                return Err(invalid("theory experiment needs `theory_instance`"));
            }
            return Ok(());
        }
        if self.seeds.is_empty() {
            return Err(invalid("no seeds"));
        }
        let train = self.train_settings();
        train.config(0).validate()?;
        let ours = self.methods.iter().any(|m| m.selector().is_some());
        if ours && self.grid.is_empty() {
            return Err(invalid("hyperparameter grid is empty"));
        }
        if self.methods.iter().any(|m| m.uses_fold_models()) && self.k < 2 {
            return Err(invalid("K must be at least 2"));
        }
        if self.eval_samples == 0 && self.experiment != Experiment::CustomManifest {
            return Err(invalid("eval_samples must be positive"));
        }
        match self.experiment {
            Experiment::Syn1 | Experiment::Syn2 => {
                if self.target_samples == 0 || (self.ad_samples == 0 && !self.e_ad.is_empty()) {
                    return Err(invalid("sample counts must be positive"));
                }
                if self.restrict_grid {
                    self.check_grid(&train)?;
                }
            }
            Experiment::CustomManifest => {
                if self.manifest.is_none() || self.target_domain.is_none() {
                    return Err(invalid(
                        "custom-manifest needs `manifest` and `target_domain`",
                    ));
                }
            }
            Experiment::Theory => {}
        }
        Ok(())
    }

    /// Published candidates: Syn1 uses `t` in `{0, 1/5, 2/5}` of the epoch
    /// budget and `lambda_after` in `{1, ..., 1e4}`; Syn2 uses `t = 0` and
    /// `lambda_after` in `{0, 0.001, 80, 100}`.
    fn check_grid(&self, train: &TrainSettings) -> Result<()> {
        let step = train.max_epoch / 5;
        let (ts, lambdas): (Vec<usize>, &[f64]) = match self.experiment {
            Experiment::Syn1 => (vec![0, step, 2 * step], &SYN1_LAMBDAS),
            _ => (vec![0], &SYN2_LAMBDAS),
        };
        for p in &self.grid {
            if !ts.contains(&p.t_threshold) || !lambdas.contains(&p.lambda_after) {
                return Err(invalid(format!(
                    "grid point {p} is outside the published candidates; set restrict_grid to false to allow it"
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    /// Seconds since the Unix epoch; the only non-deterministic field.
    pub timestamp: Option<u64>,
}

/// Accuracy of one method on one evaluation domain across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub domain: String,
    /// One entry per seed; `None` where that seed failed.
    pub accuracies: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Sample standard deviation over seeds divided by the square root of the
    /// seed count; absent with fewer than two seeds.
    pub se: Option<f64>,
    pub failure: Option<String>,
}

impl Cell {
    fn from_runs(domain: String, runs: Vec<Result<f64, String>>) -> Self {
        let failure = runs.iter().find_map(|r| r.as_ref().err().cloned());
        let accuracies: Vec<Option<f64>> = runs.into_iter().map(Result::ok).collect();
        let (mean, se) = if failure.is_none() {
            let vals: Vec<f64> = accuracies.iter().flatten().copied().collect();
            mean_se(&vals)
        } else {
            (None, None)
        };
        Self {
            domain,
            accuracies,
            mean,
            se,
            failure,
        }
    }

    /// `0.699 (0.101)`, or `FAIL(reason)`.
    pub fn render(&self) -> String {
        match (&self.failure, self.mean) {
            (Some(reason), _) => format!("FAIL({reason})"),
            (None, Some(m)) => match self.se {
                Some(se) => format!("{m:.3} ({se:.3})"),
                None => format!("{m:.3}"),
            },
            (None, None) => "-".to_string(),
        }
    }
}

pub fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt() / (n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: MethodName,
    /// Set for selectors that look at the test domain.
    pub oracle_selection: bool,
    pub cells: Vec<Cell>,
    /// Selected grid point per seed for the invariant learner.
    pub selections: Vec<Option<HyperPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultReport {
    pub experiment: Experiment,
    pub provenance: Provenance,
    pub domains: Vec<String>,
    pub methods: Vec<MethodResult>,
    pub theory: Option<TheoryVerdict>,
    pub warnings: Vec<String>,
}

impl ResultReport {
    /// Pretty JSON without the timestamp; identical configs give identical
    /// bytes.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        copy.provenance.timestamp = None;
        serde_json::to_vec_pretty(&copy).expect("report serializes")
    }

    pub fn method(&self, name: MethodName) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Data of one seed.
struct SeedData {
    target: DomainDataset,
    ad: Vec<DomainDataset>,
    eval: Vec<DomainDataset>,
    /// Separate draw from the first evaluation domain for TDV.
    validation: Option<DomainDataset>,
    hierarchy: HierarchyMap,
}

/// Per-seed stream of data seeds.
fn data_seeds(seed: u64) -> impl FnMut() -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || rng.random()
}

fn generate(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let (gen, hierarchy): (fn(f64, usize, u64) -> Result<DomainDataset>, _) = match config.experiment {
        Experiment::Syn1 => (gen_syn1, syn1_hierarchy()),
        Experiment::Syn2 => (gen_syn2, syn2_hierarchy()),
        _ => return Err(invalid("not a synthetic experiment")),
    };
    let mut next = data_seeds(seed);
    let target = gen(config.e_star, config.target_samples, next())?;
    let ad = config
        .e_ad
        .iter()
        .map(|&e| coarsen_dataset(&gen(e, config.ad_samples, next())?, &hierarchy))
        .collect::<Result<Vec<_>>>()?;
    let eval = config
        .eval_domains
        .iter()
        .map(|&e| gen(e, config.eval_samples, next()))
        .collect::<Result<Vec<_>>>()?;
    let validation = match config.eval_domains.first() {
        Some(&e) if config.methods.contains(&MethodName::OursTdv) => {
            Some(gen(e, config.eval_samples, next())?)
        }
        _ => None,
    };
    Ok(SeedData {
        target,
        ad,
        eval,
        validation,
        hierarchy,
    })
}

/// Target, auxiliary and evaluation domains read from a manifest. The data
/// are the same for every seed; only training seeds change.
fn load_manifest(config: &ExperimentConfig) -> Result<SeedData> {
    let path = config.manifest.as_ref().ok_or_else(|| invalid("no manifest"))?;
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let target_name = config.target_domain.as_deref().unwrap_or_default();
    let mut target = None;
    let mut ad = Vec::new();
    let mut eval = Vec::new();
    for entry in &manifest.domains {
        let ds = load_csv(&base.join(&entry.path))?;
        match entry.level {
            LabelLevel::Coarse => ad.push(ds),
            LabelLevel::Fine if entry.domain == target_name && target.is_none() => target = Some(ds),
            LabelLevel::Fine => eval.push(ds),
        }
    }
    let target = target.ok_or_else(|| invalid(format!("manifest has no fine domain `{target_name}`")))?;
    let validation = eval.first().cloned();
    Ok(SeedData {
        target,
        ad,
        eval,
        validation,
        hierarchy: manifest.hierarchy,
    })
}

fn eval_names(config: &ExperimentConfig) -> Result<Vec<String>> {
    Ok(match config.experiment {
        Experiment::CustomManifest => load_manifest(config)?.eval.iter().map(|d| d.domain.clone()).collect(),
        Experiment::Theory => Vec::new(),
        _ => config.eval_domains.iter().map(|&e| domain_name(e)).collect(),
    })
}

/// Outcome of one method on one seed: accuracy per evaluation domain and
/// the selected grid point.
struct SeedOutcome {
    accuracies: Vec<Result<f64, String>>,
    selection: Option<HyperPoint>,
}

fn evaluate(bundle: &ModelBundle, eval: &[DomainDataset]) -> Vec<Result<f64, String>> {
    eval.iter()
        .map(|d| accuracy(bundle, d).map_err(|e| e.to_string()))
        .collect()
}

fn failed(n: usize, reason: &str) -> SeedOutcome {
    SeedOutcome {
        accuracies: vec![Err(reason.to_string()); n],
        selection: None,
    }
}

fn run_seed(config: &ExperimentConfig, seed: u64, warnings: &mut Vec<String>) -> Vec<SeedOutcome> {
    let n_eval = config.eval_domains.len();
    let data = match config.experiment {
        Experiment::CustomManifest => load_manifest(config),
        _ => generate(config, seed),
    };
    let data = match data {
        Ok(d) => d,
        Err(e) => {
            let reason = format!("data: {e}");
            return config.methods.iter().map(|_| failed(n_eval.max(1), &reason)).collect();
        }
    };
    let n_eval = data.eval.len();
    let settings = config.train_settings();
    let base = settings.config(seed);
    let (fine, coarse) = (data.hierarchy.fine_count(), data.hierarchy.coarse_count());
    let input_dim = data.target.dim();
    let spec = config.arch_spec();
    let arch = Architecture::new(input_dim, spec.hidden, spec.feature_dim, fine, coarse).map_err(|e| e.to_string());
    let bspec = config.baseline_spec();
    let barch = Architecture::new(input_dim, bspec.hidden, bspec.feature_dim, fine, coarse).map_err(|e| e.to_string());
    let cv_data = CvData {
        target: &data.target,
        ad: &data.ad,
        hierarchy: &data.hierarchy,
    };

    let ours = config.methods.iter().any(|m| m.selector().is_some());
    let needs_folds = config.methods.iter().any(|m| m.uses_fold_models());
    let setup = arch.as_ref().ok().map(|a| CvSetup {
        arch: a.clone(),
        base: base.clone(),
        k: config.k,
        fold_seed: seed,
    });
    let full_models = match (&setup, ours) {
        (Some(s), true) => Some(train_full_models(&config.grid, &cv_data, s)),
        _ => None,
    };
    let fold_models = match (&setup, needs_folds) {
        (Some(s), true) => Some(train_fold_models(&config.grid, &cv_data, s)),
        _ => None,
    };

    let ad_refs: Vec<&DomainDataset> = data.ad.iter().collect();
    config
        .methods
        .iter()
        .map(|&method| {
            let mut outcome = || -> Result<SeedOutcome> {
                if let Some(kind) = method.selector() {
                    let setup = setup.as_ref().ok_or_else(|| invalid(arch.clone().unwrap_err()))?;
                    let full = full_models.as_ref().expect("trained when a selector is requested");
                    let report = match kind {
                        SelectorKind::LodCv => lodcv_select(&config.grid, &cv_data, setup)?,
                        SelectorKind::Tdv => {
                            let val = data
                                .validation
                                .as_ref()
                                .ok_or_else(|| invalid("TDV needs an evaluation domain"))?;
                            tdv_select(&config.grid, full, val)?
                        }
                        _ => {
                            let fm = fold_models.as_ref().expect("trained for CV selectors");
                            let fm = fm.as_ref().map_err(|e| invalid(e.to_string()))?;
                            score_fold_models(kind, &config.grid, &cv_data, fm)?
                        }
                    };
                    for w in &report.warnings {
                        warnings.push(format!("seed {seed}, {method}: {w}"));
                    }
                    let bundle = full[report.selected]
                        .as_ref()
                        .map_err(|e| invalid(format!("final training failed: {e}")))?;
                    return Ok(SeedOutcome {
                        accuracies: evaluate(bundle, &data.eval),
                        selection: Some(report.selected_point),
                    });
                }
                let barch = barch.clone().map_err(invalid)?;
                let bundle = match method {
                    MethodName::Erm => train_erm(&data.target, &barch, &base)?,
                    MethodName::Ft => train_finetune(&data.target, &ad_refs, &barch, &base)?,
                    MethodName::Fe => train_frozen(&data.target, &ad_refs, &barch, &base)?,
                    _ => unreachable!("selectors handled above"),
                };
                Ok(SeedOutcome {
                    accuracies: evaluate(&bundle, &data.eval),
                    selection: None,
                })
            };
            outcome().unwrap_or_else(|e| failed(n_eval.max(1), &e.to_string()))
        })
        .collect()
}

/// Runs every seed of `config` on a pool of `jobs` threads (all cores when
/// `None`) and aggregates the accuracies.
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ResultReport> {
    config.validate()?;
    let provenance = Provenance {
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs()),
    };
    if config.experiment == Experiment::Theory {
        let path = config.theory_instance.as_ref().expect("validated");
        let instance: TheoryInstance = serde_json::from_str(&fs::read_to_string(path)?)?;
        return Ok(ResultReport {
            experiment: config.experiment,
            provenance,
            domains: Vec::new(),
            methods: Vec::new(),
            theory: Some(instance.verify()?),
            warnings: Vec::new(),
        });
    }
    let domains = eval_names(config)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| invalid(format!("cannot build worker pool: {e}")))?;
    let per_seed: Vec<(Vec<SeedOutcome>, Vec<String>)> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut warnings = Vec::new();
                let out = run_seed(config, seed, &mut warnings);
                (out, warnings)
            })
            .collect()
    });

    let mut warnings = Vec::new();
    let mut methods = Vec::with_capacity(config.methods.len());
    for (mi, &method) in config.methods.iter().enumerate() {
        let cells = domains
            .iter()
            .enumerate()
            .map(|(di, name)| {
                let runs = per_seed
                    .iter()
                    .map(|(outs, _)| {
                        let acc = &outs[mi].accuracies;
                        acc.get(di).cloned().unwrap_or_else(|| acc[0].clone())
                    })
                    .collect();
                Cell::from_runs(name.clone(), runs)
            })
            .collect();
        methods.push(MethodResult {
            method,
            oracle_selection: method == MethodName::OursTdv,
            cells,
            selections: per_seed.iter().map(|(outs, _)| outs[mi].selection).collect(),
        });
    }
    for (_, w) in &per_seed {
        warnings.extend(w.iter().cloned());
    }
    Ok(ResultReport {
        experiment: config.experiment,
        provenance,
        domains,
        methods,
        theory: None,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(invalid(format!("unknown report format `{other}`"))),
        }
    }
}

/// One row per method and domain: `method,domain,mean,se,seeds,status`.
pub fn render_csv(report: &ResultReport) -> String {
    let mut out = String::from("method,domain,mean,se,seeds,status\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for m in &report.methods {
        for c in &m.cells {
            let status = match &c.failure {
                Some(reason) => format!("\"FAIL({})\"", reason.replace('"', "'")),
                None => "ok".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.method,
                c.domain,
                opt(c.mean),
                opt(c.se),
                c.accuracies.len(),
                status
            );
        }
    }
    out
}

/// Methods as rows and evaluation domains as columns, `mean (se)` per cell.
pub fn render_markdown(report: &ResultReport) -> String {
    let mut out = String::from("| Method |");
    for d in &report.domains {
        let _ = write!(out, " {d} |");
    }
    out.push_str("\n|---|");
    for _ in &report.domains {
        out.push_str("---|");
    }
    out.push('\n');
    for m in &report.methods {
        let name = if m.oracle_selection {
            format!("{} (oracle)", m.method)
        } else {
            m.method.to_string()
        };
        let _ = write!(out, "| {name} |");
        for c in &m.cells {
            let _ = write!(out, " {} |", c.render());
        }
        out.push('\n');
    }
    if let Some(t) = &report.theory {
        let _ = writeln!(out, "\nbeta = {:.6}", t.beta);
        for r in [&t.method_i, &t.method_ii] {
            let _ = writeln!(out, "Method {:?}: {:?}", r.method, r.verdict);
        }
    }
    out
}

pub fn emit_report(report: &ResultReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)?,
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    };
    fs::write(path, text)?;
    Ok(())
}
