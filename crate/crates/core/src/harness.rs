//! Experiment orchestration: data, calibration sampling, teacher
//! preparation, search, training, evaluation and reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{assert_disjoint, load_idx_pair, sample_calibration, CalibrationSet, IdxPair, Sampling, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{build_preset, checkpoint, Mode, Network};
use crate::objective::{DecaySchedule, Objective, StepUnit};
use crate::search::{evolve, SearchConfig, SearchOutcome};
use crate::seed::{derive_seed, stage};
use crate::sparsity::export::export_masks;
use crate::sparsity::{erk_rates, uniform_rates, NmPattern, SparseMask, SparsityDistribution};
use crate::train::{run_layerwise_reconstruction, run_training, train_teacher, MaskPolicy, TeacherConfig, TrainConfig, TrainOutcome};

pub const OUTPUT_ROOT_ENV: &str = "PTSKIT_OUTPUT_ROOT";
pub const METRICS_CSV_HEADER: &str = "method,target_sparsity,realized_sparsity,top1,seed,wall_time_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "unipts")]
    UniPts,
    #[serde(rename = "pot-baseline")]
    PotBaseline,
    #[serde(rename = "erk+dst")]
    ErkDst,
    #[serde(rename = "uniform+dst")]
    UniformDst,
    #[serde(rename = "oneshot")]
    OneShot,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::UniPts, Method::PotBaseline, Method::ErkDst, Method::UniformDst, Method::OneShot];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::UniPts => "unipts",
            Method::PotBaseline => "pot-baseline",
            Method::ErkDst => "erk+dst",
            Method::UniformDst => "uniform+dst",
            Method::OneShot => "oneshot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

/// Flat experiment configuration. Every key is optional in the file; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub synthetic_classes: usize,
    pub synthetic_height: usize,
    pub synthetic_width: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    pub synthetic_noise: f64,
    pub synthetic_jitter: f64,
    pub synthetic_distractors: usize,
    pub synthetic_distractor_amp: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_images_sha256: Option<String>,
    pub train_labels_sha256: Option<String>,
    pub test_images_sha256: Option<String>,
    pub test_labels_sha256: Option<String>,
    pub classes: Option<usize>,

    pub teacher_checkpoint: Option<PathBuf>,
    pub preset: String,
    pub teacher_epochs: usize,
    pub teacher_batch_size: usize,
    pub teacher_lr: f64,
    pub teacher_momentum: f64,
    pub teacher_weight_decay: f64,
    pub teacher_seed: u64,

    pub calibration_size: usize,
    pub sampling: Sampling,
    pub target_sparsity: Option<f64>,
    pub nm: Option<String>,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Prunable-layer indices kept dense.
    pub exclude_layers: Vec<usize>,
    /// Fill the wall_time_s column; off by default so reruns are byte-identical.
    pub record_wall_time: bool,

    pub search_population: usize,
    pub search_generations: usize,
    pub search_tournament: usize,
    pub search_crossover_rate: f64,
    pub search_mutation_std: f64,
    pub search_elites: usize,
    pub search_noise_std: f64,
    pub search_excessive: Option<f64>,

    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub delta_t: usize,
    pub gamma: f64,
    pub decay_unit: StepUnit,
    pub decay_clamp: f64,
    pub objective: Objective,
    pub ste: bool,
    pub bn_momentum: f64,
    pub final_bn_recalibration: bool,
    pub log_every: usize,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        let search = SearchConfig::default();
        let train = TrainConfig::default();
        let teacher = TeacherConfig::default();
        ExperimentConfig {
            dataset: DataSource::Synthetic,
            synthetic_classes: syn.classes,
            synthetic_height: syn.height,
            synthetic_width: syn.width,
            synthetic_train: syn.train,
            synthetic_test: syn.test,
            synthetic_seed: syn.seed,
            synthetic_noise: syn.noise,
            synthetic_jitter: syn.jitter,
            synthetic_distractors: syn.distractors,
            synthetic_distractor_amp: syn.distractor_amp,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_images_sha256: None,
            train_labels_sha256: None,
            test_images_sha256: None,
            test_labels_sha256: None,
            classes: None,
            teacher_checkpoint: None,
            preset: "convnet-small".into(),
            teacher_epochs: teacher.epochs,
            teacher_batch_size: teacher.batch_size,
            teacher_lr: teacher.lr,
            teacher_momentum: teacher.momentum,
            teacher_weight_decay: teacher.weight_decay,
            teacher_seed: 0,
            calibration_size: 1024,
            sampling: Sampling::ClassBalanced,
            target_sparsity: Some(0.9),
            nm: None,
            method: Method::UniPts,
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            exclude_layers: Vec::new(),
            record_wall_time: false,
            search_population: search.population,
            search_generations: search.generations,
            search_tournament: search.tournament,
            search_crossover_rate: search.crossover_rate,
            search_mutation_std: search.mutation_std,
            search_elites: search.elites,
            search_noise_std: search.noise_std,
            search_excessive: search.excessive,
            iterations: 2000,
            batch_size: train.batch_size,
            lr: train.lr,
            alpha: train.alpha,
            weight_decay: train.weight_decay,
            momentum: train.momentum,
            delta_t: train.delta_t,
            gamma: train.decay.gamma,
            decay_unit: train.decay.unit,
            decay_clamp: train.decay.clamp_min_denominator,
            objective: train.objective,
            ste: train.ste,
            bn_momentum: train.bn_momentum,
            final_bn_recalibration: train.final_bn_recalibration,
            log_every: train.log_every,
            eval_batch_size: 256,
        }
    }
}

/// Parses a TOML document, applies `key=value` overrides on top and checks
/// the result. Override values are read as TOML values, falling back to a
/// bare string.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let k = k.trim();
        let v = v.trim();
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.to_string(), value);
    }
    let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sparsity {
    Rate(f64),
    Pattern(NmPattern),
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sparsity()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.calibration_size == 0 {
            return Err(Error::Config("calibration_size must be ≥ 1".into()));
        }
        if self.dataset == DataSource::Idx {
            for (key, p) in [
                ("train_images", &self.train_images),
                ("train_labels", &self.train_labels),
                ("test_images", &self.test_images),
                ("test_labels", &self.test_labels),
            ] {
                match p {
                    None => return Err(Error::Config(format!("idx dataset needs {key}"))),
                    Some(p) if !p.exists() => return Err(Error::Config(format!("{key} {} does not exist", p.display()))),
                    _ => {}
                }
            }
        }
        if let Some(p) = &self.teacher_checkpoint {
            if !p.exists() {
                return Err(Error::Config(format!("teacher_checkpoint {} does not exist", p.display())));
            }
        }
        self.train_config(0).validate()?;
        if let Sparsity::Rate(_) = self.sparsity()? {
            if self.method == Method::UniPts {
                self.search_config(0)?.validate()?;
            }
        }
        Ok(())
    }

    /// Exactly one of `target_sparsity` (in (0, 1)) and `nm` applies; a
    /// pattern wins when both are present in the file.
    pub fn sparsity(&self) -> Result<Sparsity> {
        match (&self.nm, self.target_sparsity) {
            (Some(p), _) => NmPattern::parse(p)
                .map(Sparsity::Pattern)
                .map_err(|e| Error::Config(e.to_string())),
            (None, Some(p)) if p > 0.0 && p < 1.0 => Ok(Sparsity::Rate(p)),
            (None, Some(p)) => Err(Error::Config(format!("target_sparsity {p} outside (0, 1)"))),
            (None, None) => Err(Error::Config("set target_sparsity or nm".into())),
        }
    }

    pub fn target(&self) -> f64 {
        match self.sparsity() {
            Ok(Sparsity::Rate(p)) => p,
            Ok(Sparsity::Pattern(p)) => 1.0 - p.n() as f64 / p.m() as f64,
            Err(_) => f64::NAN,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.synthetic_classes,
            height: self.synthetic_height,
            width: self.synthetic_width,
            train: self.synthetic_train,
            test: self.synthetic_test,
            seed: self.synthetic_seed,
            noise: self.synthetic_noise,
            jitter: self.synthetic_jitter,
            distractors: self.synthetic_distractors,
            distractor_amp: self.synthetic_distractor_amp,
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            epochs: self.teacher_epochs,
            batch_size: self.teacher_batch_size,
            lr: self.teacher_lr,
            momentum: self.teacher_momentum,
            weight_decay: self.teacher_weight_decay,
            seed: self.teacher_seed,
        }
    }

    pub fn search_config(&self, seed: u64) -> Result<SearchConfig> {
        let target = match self.sparsity()? {
            Sparsity::Rate(p) => p,
            Sparsity::Pattern(_) => return Err(Error::Config("N:M patterns are not searched".into())),
        };
        Ok(SearchConfig {
            target,
            excessive: self.search_excessive,
            population: self.search_population,
            generations: self.search_generations,
            tournament: self.search_tournament,
            crossover_rate: self.search_crossover_rate,
            mutation_std: self.search_mutation_std,
            elites: self.search_elites,
            noise_std: self.search_noise_std,
            batch_size: self.batch_size,
            seed,
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            alpha: self.alpha,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            delta_t: self.delta_t,
            decay: DecaySchedule {
                gamma: self.gamma,
                unit: self.decay_unit,
                clamp_min_denominator: self.decay_clamp,
            },
            objective: if self.method == Method::PotBaseline {
                Objective::LayerwiseMse
            } else {
                self.objective
            },
            ste: self.ste,
            bn_momentum: self.bn_momentum,
            final_bn_recalibration: self.final_bn_recalibration,
            log_every: self.log_every,
            seed,
        }
    }

    /// `output_dir`, resolved against the output-root variable when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Pipeline stage that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Teacher,
    Calibration,
    Search,
    Train,
    Eval,
    Output,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Data => "data",
            Stage::Teacher => "teacher",
            Stage::Calibration => "calibration",
            Stage::Search => "search",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Output => "output",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(Error),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: Stage, source: Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Stage { .. } => 2,
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, RunError>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, RunError> {
        self.map_err(|source| match source {
            Error::Config(_) => RunError::Config(source),
            source => RunError::Stage { stage, source },
        })
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

/// Loads the configured splits.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Splits> {
    match cfg.dataset {
        DataSource::Synthetic => cfg.synthetic_spec().generate(),
        DataSource::Idx => {
            let need = |p: &Option<PathBuf>, k: &str| p.clone().ok_or_else(|| Error::Config(format!("idx dataset needs {k}")));
            let train = IdxPair {
                images: need(&cfg.train_images, "train_images")?,
                labels: need(&cfg.train_labels, "train_labels")?,
                images_sha256: cfg.train_images_sha256.clone(),
                labels_sha256: cfg.train_labels_sha256.clone(),
            };
            let test = IdxPair {
                images: need(&cfg.test_images, "test_images")?,
                labels: need(&cfg.test_labels, "test_labels")?,
                images_sha256: cfg.test_images_sha256.clone(),
                labels_sha256: cfg.test_labels_sha256.clone(),
            };
            let train = load_idx_pair(&train, cfg.classes)?;
            let test = load_idx_pair(&test, Some(cfg.classes.unwrap_or(train.classes)))?;
            if train.sample_shape() != test.sample_shape() {
                return Err(Error::Shape(format!(
                    "train samples {:?} vs test samples {:?}",
                    train.sample_shape(),
                    test.sample_shape()
                )));
            }
            Ok(Splits { train, test })
        }
    }
}

/// Loads the teacher checkpoint or trains the preset on the training split.
pub fn prepare_teacher(cfg: &ExperimentConfig, splits: &Splits) -> Result<Network> {
    let mut net = match &cfg.teacher_checkpoint {
        Some(p) => {
            let net = checkpoint::load(p)?;
            if net.input_shape() != splits.train.sample_shape() {
                return Err(Error::Shape(format!(
                    "teacher expects {:?}, data has {:?}",
                    net.input_shape(),
                    splits.train.sample_shape()
                )));
            }
            net
        }
        None => {
            let seed = derive_seed(cfg.teacher_seed, &[stage::TEACHER]);
            let net = build_preset(&cfg.preset, splits.train.sample_shape(), splits.train.classes, seed)?;
            train_teacher(net, &splits.train, &cfg.teacher_config())?
        }
    };
    net.set_mode(Mode::Eval);
    Ok(net)
}

/// Teacher for a single stage command: the configured checkpoint, else the
/// `teacher.ckpt` a previous stage left in the output directory, else a
/// freshly trained preset that is saved there.
pub fn stage_teacher(cfg: &ExperimentConfig, splits: &Splits) -> RunResult<Network> {
    let cached = cfg.resolved_output_dir().join("teacher.ckpt");
    if cfg.teacher_checkpoint.is_none() && cached.exists() {
        let mut c = cfg.clone();
        c.teacher_checkpoint = Some(cached);
        return prepare_teacher(&c, splits).stage(Stage::Teacher);
    }
    let teacher = prepare_teacher(cfg, splits).stage(Stage::Teacher)?;
    if cfg.teacher_checkpoint.is_none() {
        mkdir(&cfg.resolved_output_dir()).stage(Stage::Output)?;
        checkpoint::save(&teacher, &cached).stage(Stage::Output)?;
    }
    Ok(teacher)
}

/// Calibration set of run `seed`, checked disjoint from the test split.
pub fn calibration_for(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<CalibrationSet> {
    let calib = sample_calibration(&splits.train, cfg.calibration_size, cfg.sampling, derive_seed(seed, &[stage::CALIBRATION]))?;
    assert_disjoint(&calib, &splits.test)?;
    Ok(calib)
}

/// Per-layer rates for a rate-based method other than search.
pub fn heuristic_distribution(cfg: &ExperimentConfig, teacher: &Network, target: f64) -> Result<SparsityDistribution> {
    match cfg.method {
        Method::ErkDst => {
            let shapes: Vec<Vec<usize>> = teacher.prunable_weights().iter().map(|w| w.shape().to_vec()).collect();
            erk_rates(&shapes, target, &cfg.exclude_layers)
        }
        _ => uniform_rates(&teacher.prunable_numels(), target, &cfg.exclude_layers),
    }
}

/// Everything one seed of one method produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub method: Method,
    pub target: f64,
    pub distribution: Option<SparsityDistribution>,
    pub search: Option<SearchOutcome>,
    pub student: Network,
    pub masks: SparseMask,
    pub outcome: Option<TrainOutcome>,
    pub top1: f64,
    pub wall_time_s: f64,
}

impl SeedRun {
    pub fn realized_sparsity(&self) -> f64 {
        self.masks.global_sparsity()
    }

    pub fn metrics_row(&self, with_time: bool) -> String {
        let time = if with_time { format!("{:.3}", self.wall_time_s) } else { String::new() };
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.method,
            self.target,
            self.realized_sparsity(),
            self.top1,
            self.seed,
            time
        )
    }
}

/// Top-1 of an eval-mode copy of `net` on `data`, in percent.
pub fn evaluate(net: &Network, data: &crate::data::Dataset, batch: usize) -> Result<f64> {
    let mut n = net.clone();
    n.set_mode(Mode::Eval);
    Ok(100.0 * n.accuracy(&data.inputs, &data.labels, None, batch)?)
}

/// Mask policy and, for the searched method, the search that produced it.
pub fn policy_for(
    cfg: &ExperimentConfig,
    teacher: &Network,
    calib: &CalibrationSet,
    seed: u64,
) -> RunResult<(MaskPolicy, Option<SearchOutcome>)> {
    match cfg.sparsity().stage(Stage::Search)? {
        Sparsity::Pattern(p) => Ok((MaskPolicy::Pattern(p), None)),
        Sparsity::Rate(_) if cfg.method == Method::UniPts => {
            if !cfg.exclude_layers.is_empty() {
                return Err(RunError::Config(Error::Config("exclude_layers is not supported with search".into())));
            }
            let scfg = cfg.search_config(derive_seed(seed, &[stage::SEARCH_INIT])).stage(Stage::Search)?;
            let out = evolve(teacher, calib, &scfg).stage(Stage::Search)?;
            Ok((MaskPolicy::Rates(out.best.distribution.clone()), Some(out)))
        }
        Sparsity::Rate(target) => Ok((
            MaskPolicy::Rates(heuristic_distribution(cfg, teacher, target).stage(Stage::Search)?),
            None,
        )),
    }
}

/// Trains (or one-shot prunes) a student under `policy` and evaluates it.
pub fn train_and_eval(
    cfg: &ExperimentConfig,
    splits: &Splits,
    teacher: &Network,
    calib: &CalibrationSet,
    policy: &MaskPolicy,
    seed: u64,
) -> RunResult<(Network, SparseMask, Option<TrainOutcome>, f64)> {
    let tcfg = cfg.train_config(derive_seed(seed, &[stage::TRAIN_SHUFFLE]));
    let (student, masks, outcome) = match cfg.method {
        Method::OneShot => {
            let masks = policy.build(teacher).stage(Stage::Train)?;
            let mut s = teacher.clone();
            s.hard_mask(&masks).stage(Stage::Train)?;
            (s, masks, None)
        }
        Method::PotBaseline => {
            let o = run_layerwise_reconstruction(teacher, policy, calib, &tcfg).stage(Stage::Train)?;
            (o.student.clone(), o.masks.clone(), Some(o))
        }
        _ => {
            let o = run_training(teacher, policy, calib, &tcfg).stage(Stage::Train)?;
            (o.student.clone(), o.masks.clone(), Some(o))
        }
    };
    let top1 = evaluate(&student, &splits.test, cfg.eval_batch_size).stage(Stage::Eval)?;
    Ok((student, masks, outcome, top1))
}

/// One seed of the configured method, without writing anything.
pub fn run_seed(cfg: &ExperimentConfig, splits: &Splits, teacher: &Network, seed: u64) -> RunResult<SeedRun> {
    let start = Instant::now();
    let calib = calibration_for(cfg, splits, seed).stage(Stage::Calibration)?;
    let (policy, search) = policy_for(cfg, teacher, &calib, seed)?;
    let (student, masks, outcome, top1) = train_and_eval(cfg, splits, teacher, &calib, &policy, seed)?;
    let distribution = match &policy {
        MaskPolicy::Rates(d) => Some(d.clone()),
        MaskPolicy::Pattern(_) => None,
    };
    Ok(SeedRun {
        seed,
        method: cfg.method,
        target: cfg.target(),
        distribution,
        search,
        student,
        masks,
        outcome,
        top1,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the per-seed artifacts under `dir`.
pub fn write_seed_artifacts(run: &SeedRun, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    checkpoint::save(&run.student, &dir.join("student.ckpt"))?;
    let names: Vec<String> = run
        .student
        .prunable_indices()
        .iter()
        .map(|&i| format!("{}{}", run.student.specs()[i].name(), i))
        .collect();
    export_masks(&run.masks, &names, dir)?;
    if let Some(d) = &run.distribution {
        write(&dir.join("distribution.txt"), d.summary(&run.student))?;
    }
    if let Some(s) = &run.search {
        let mut log = String::new();
        for g in &s.history {
            log.push_str(&g.log_line());
            log.push('\n');
        }
        write(&dir.join("search.jsonl"), log)?;
    }
    if let Some(o) = &run.outcome {
        let mut csv = String::from(crate::train::METRICS_HEADER);
        csv.push('\n');
        for r in &o.history {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write(&dir.join("train_metrics.csv"), csv)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub output_dir: PathBuf,
    pub teacher_top1: f64,
    pub runs: Vec<SeedRun>,
}

/// Data → teacher → (search) → train → eval for every seed, writing
/// `metrics.csv`, `config.toml`, the teacher checkpoint and one directory
/// of artifacts per seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> RunResult<ExperimentResult> {
    cfg.validate().map_err(RunError::Config)?;
    let out = cfg.resolved_output_dir();
    mkdir(&out).stage(Stage::Output)?;
    write(&out.join("config.toml"), cfg.to_toml()).stage(Stage::Output)?;
    let splits = load_dataset(cfg).stage(Stage::Data)?;
    let teacher = prepare_teacher(cfg, &splits).stage(Stage::Teacher)?;
    if cfg.teacher_checkpoint.is_none() {
        checkpoint::save(&teacher, &out.join("teacher.ckpt")).stage(Stage::Output)?;
    }
    let teacher_top1 = evaluate(&teacher, &splits.test, cfg.eval_batch_size).stage(Stage::Eval)?;
    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, &splits, &teacher, seed)?;
        write_seed_artifacts(&run, &out.join(format!("seed-{seed}"))).stage(Stage::Output)?;
        csv.push_str(&run.metrics_row(cfg.record_wall_time));
        csv.push('\n');
        runs.push(run);
    }
    write(&out.join("metrics.csv"), &csv).stage(Stage::Output)?;
    Ok(ExperimentResult {
        output_dir: out,
        teacher_top1,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub target_sparsity: f64,
    pub realized_sparsity: f64,
    pub top1: f64,
    pub seed: u64,
    pub wall_time_s: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_CSV_HEADER) {
        return Err(Error::format("metrics csv", "unexpected header"));
    }
    let bad = |l: &str| Error::format("metrics csv", format!("bad row {l:?}"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(MetricsRow {
                method: f[0].to_string(),
                target_sparsity: num(f[1])?,
                realized_sparsity: num(f[2])?,
                top1: num(f[3])?,
                seed: f[4].parse().map_err(|_| bad(l))?,
                wall_time_s: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median top-1 per (method, target) over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub targets: Vec<f64>,
    pub methods: Vec<String>,
    /// `cells[method][target]`.
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn build_report(rows: &[MetricsRow]) -> Report {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !targets.iter().any(|t| t.to_bits() == r.target_sparsity.to_bits()) {
            targets.push(r.target_sparsity);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        groups
            .entry((r.method.clone(), r.target_sparsity.to_bits()))
            .or_default()
            .push(r.top1);
    }
    targets.sort_by(f64::total_cmp);
    let cells = methods
        .iter()
        .map(|m| {
            targets
                .iter()
                .map(|t| groups.get_mut(&(m.clone(), t.to_bits())).map(|v| median(v)))
                .collect()
        })
        .collect();
    Report { targets, methods, cells }
}

impl Report {
    pub fn to_table(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.targets.iter().map(|t| format!("{:.2}%", 100.0 * t)));
        let mut rows = vec![header];
        for (m, cells) in self.methods.iter().zip(&self.cells) {
            let mut row = vec![m.clone()];
            row.extend(cells.iter().map(|c| c.map_or("-".to_string(), |v| format!("{v:.2}"))));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for t in &self.targets {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for (m, cells) in self.methods.iter().zip(&self.cells) {
            out.push_str(m);
            for c in cells {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Reads `metrics.csv` from every run directory and tabulates medians.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    let mut rows = Vec::new();
    for d in dirs {
        let p = d.join("metrics.csv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        rows.extend(parse_metrics_csv(&text)?);
    }
    if rows.is_empty() {
        return Err(Error::Empty("metrics rows"));
    }
    Ok(build_report(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = parse_config("method = \"erk+dst\"\nseeds = [1, 2]\n", &["iterations=5".into(), "nm=2:4".into()]).unwrap();
        assert_eq!(cfg.method, Method::ErkDst);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.sparsity().unwrap(), Sparsity::Pattern(NmPattern::new(2, 4).unwrap()));
        assert!(matches!(parse_config("bogus = 1", &[]), Err(Error::Config(_))));
        assert!(matches!(parse_config("", &["target_sparsity=1.0".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(parse_config(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn report_medians() {
        let csv = format!(
            "{METRICS_CSV_HEADER}\nunipts,0.9,0.9,80,0,\nunipts,0.9,0.9,70,1,\nunipts,0.9,0.9,90,2,\noneshot,0.9,0.9,10,0,1.5\n"
        );
        let rows = parse_metrics_csv(&csv).unwrap();
        let r = build_report(&rows);
        assert_eq!(r.cells[0][0], Some(80.0));
        assert_eq!(r.cells[1][0], Some(10.0));
        assert!(r.to_table().starts_with("method   90.00%"));
    }
}
