//! Experiment configuration and the pipelines behind each `adlab`
//! subcommand: data generation, training, evaluation, transferability
//! audits, adversarial variance and parameter sweeps.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, InnerLoss};
use crate::data::{gen_dataset, DatasetSpec, SplitData};
use crate::diagnostics::{
    entropy_histogram, lemma2_bound, robust_overfitting, tas_ratio, TasReport,
    DEFAULT_HISTOGRAM_BINS, LEMMA2_SLACK,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::{DistillMethod, DistillSpec, Weighting};
use crate::models::{
    load_checkpoint, save_checkpoint, Classifier, ModelParams, Teacher, TeacherEmulation,
};
use crate::rng;
use crate::train::{evaluate, train, EvalResult, MetricsRecord, TrainConfig, TrainOutcome};
use crate::variance::{estimate_avar, SplitPlan, VarianceReport};

pub const CONFIG_HELP: &str = "\
CONFIG FILE (TOML; unknown keys are errors)

  seed = <u64>                      top-level seed; --seed overrides it

  [dataset]
  kind = gaussian-mixture | concentric | idx-image
  dims = 2                          feature dimension (synthetic)
  classes = 2
  samples_per_class = 500
  class_margin = 0.1                min distance between classes (synthetic)
  spread = 0.05                     class std / ring half-width
  label_noise = 0.0                 fraction of training labels flipped
  images = <path>, labels = <path>  IDX files (idx-image)
  normalize_to = [0.0, 1.0]
  seed = 0
  train_fraction = 0.8

  [teacher]                         required by teacher-based methods
  layer_sizes = [2, 128, 128, 2]
  checkpoint = <path>               optional; trained from [teacher.train] otherwise
  emulation = { mode = \"as-trained\" }
            | { mode = \"temperature-sharpened\", temperature = 0.5 }
            | { mode = \"label-interpolated\", alpha = 0.5 }
  [teacher.train]                   same keys as [train]; method defaults to pgd-at

  [student]
  layer_sizes = [2, 32, 2]
  checkpoint = <path>               used by evaluate/tas; default <out>/student.ckpt

  [train]
  method = pgd-at | trades | ard | rslad | adaad | igdm | saad | saad-c
  epochs = 60, batch_size = 64, lr = 0.1, momentum = 0.9, weight_decay = 5e-4
  lr_decay_epochs = [30, 45]        default: 1/2 and 3/4 of epochs
  lr_decay_factor = 10.0
  swa_start_epoch = 28              default: 0.475 * epochs
  epsilon = 0.5                     fraction of class_margin (synthetic) or absolute (idx)
  step_fraction = 0.25              PGD step = step_fraction * epsilon
  train_steps = 10, eval_steps = 20, init_scale = 0.001
  inner_loss = ce-student | kl-student-clean | kl-teacher-clean | kl-teacher-adv
             | fast-first-order     default: the method's own
  alpha_igdm = 1.0, beta = 0.2, trades_lambda = 6.0, lambda_in = 1.0
  weighting = entropy | unit
  tas_every = 10                    0 disables the periodic TAS audit

  [avar]
  splits = 2, repetitions = 2

  [tas]
  bins = 50                         entropy histogram bins

  [sweep]
  param = beta | alpha              alpha sweeps label interpolation of the teacher
  values = [0.0, 0.2, 0.5]
";

fn default_seed() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub teacher: Option<TeacherSection>,
    pub student: StudentSection,
    pub train: TrainSection,
    #[serde(default)]
    pub avar: Option<AvarSection>,
    #[serde(default)]
    pub tas: Option<TasSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub emulation: TeacherEmulation,
    #[serde(default = "TrainSection::teacher_default")]
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvarSection {
    pub splits: usize,
    pub repetitions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    DEFAULT_HISTOGRAM_BINS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Beta,
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

fn pgd_at() -> DistillMethod {
    DistillMethod::PgdAt
}
fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    5e-4
}
fn d_factor() -> f64 {
    10.0
}
fn d_eps() -> f64 {
    0.5
}
fn d_step() -> f64 {
    0.25
}
fn d_train_steps() -> usize {
    10
}
fn d_eval_steps() -> usize {
    20
}
fn d_init() -> f64 {
    0.001
}
fn d_one() -> f64 {
    1.0
}
fn d_beta() -> f64 {
    0.2
}
fn d_trades() -> f64 {
    6.0
}
fn d_tas() -> usize {
    10
}

/// Training hyperparameters as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "pgd_at")]
    pub method: DistillMethod,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[serde(default = "d_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub swa_start_epoch: Option<usize>,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_step")]
    pub step_fraction: f64,
    #[serde(default = "d_train_steps")]
    pub train_steps: usize,
    #[serde(default = "d_eval_steps")]
    pub eval_steps: usize,
    #[serde(default = "d_init")]
    pub init_scale: f64,
    #[serde(default)]
    pub inner_loss: Option<InnerLoss>,
    #[serde(default = "d_one")]
    pub alpha_igdm: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_trades")]
    pub trades_lambda: f64,
    #[serde(default = "d_one")]
    pub lambda_in: f64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "d_tas")]
    pub tas_every: usize,
}

impl TrainSection {
    pub fn new(method: DistillMethod) -> Self {
        TrainSection {
            method,
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            lr_decay_epochs: None,
            lr_decay_factor: d_factor(),
            swa_start_epoch: None,
            epsilon: d_eps(),
            step_fraction: d_step(),
            train_steps: d_train_steps(),
            eval_steps: d_eval_steps(),
            init_scale: d_init(),
            inner_loss: None,
            alpha_igdm: d_one(),
            beta: d_beta(),
            trades_lambda: d_trades(),
            lambda_in: d_one(),
            weighting: Weighting::Entropy,
            tas_every: d_tas(),
        }
    }

    fn teacher_default() -> Self {
        TrainSection::new(DistillMethod::PgdAt)
    }

    /// Resolves to a [`TrainConfig`] with the budget in absolute input units.
    pub fn resolve(&self, epsilon_abs: f64, seed: u64) -> Result<TrainConfig> {
        if !(self.epsilon >= 0.0) || !(self.step_fraction > 0.0) {
            return Err(Error::Config(
                "epsilon must be ≥ 0 and step_fraction > 0".into(),
            ));
        }
        let e = self.epochs;
        let decay = self.lr_decay_epochs.clone().unwrap_or_else(|| {
            let mut v: Vec<usize> = [0.5, 0.75]
                .iter()
                .map(|f| (f * e as f64).round() as usize)
                .filter(|&d| d < e)
                .collect();
            v.dedup();
            v
        });
        let step = self.step_fraction * epsilon_abs;
        let cfg = TrainConfig {
            epochs: e,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay_epochs: decay,
            lr_decay_factor: self.lr_decay_factor,
            swa_start_epoch: self
                .swa_start_epoch
                .unwrap_or((0.475 * e as f64) as usize),
            eval_attack: AttackConfig {
                step_size: step,
                steps: self.eval_steps,
                ..AttackConfig::eval(epsilon_abs, self.eval_steps)
            },
            train_attack: AttackConfig {
                step_size: step,
                steps: self.train_steps,
                init_scale: self.init_scale,
                inner_loss: self.inner_loss,
                ..AttackConfig::train(epsilon_abs)
            },
            distill: DistillSpec {
                method: self.method,
                alpha_igdm: self.alpha_igdm,
                beta: self.beta,
                trades_lambda: self.trades_lambda,
                lambda_in: self.lambda_in,
                weighting: self.weighting,
            },
            seed,
            tas_every: self.tas_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Train,
    Evaluate,
    Tas,
    Avar,
    Sweep,
    GenData,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Train => "train",
            Subcommand::Evaluate => "evaluate",
            Subcommand::Tas => "tas",
            Subcommand::Avar => "avar",
            Subcommand::Sweep => "sweep",
            Subcommand::GenData => "gen-data",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Structured,
}

impl OutputFormat {
    fn ext(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Structured => "json",
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Writes a metrics record as CSV or JSON.
pub fn export_metrics(record: &MetricsRecord, format: OutputFormat, path: &Path) -> Result<()> {
    let body = match format {
        OutputFormat::Csv => record.to_csv(),
        OutputFormat::Structured => json(record)?,
    };
    write_atomic(path, body.as_bytes())
}

/// `(x, y)` series per curve, keyed by curve name.
pub fn plot_data(record: &MetricsRecord) -> serde_json::Value {
    let series = |f: fn(&crate::train::MetricsRow) -> f64| -> Vec<[f64; 2]> {
        record.rows.iter().map(|r| [r.epoch as f64, f(r)]).collect()
    };
    serde_json::json!({
        "clean_train_acc": series(|r| r.clean_train_acc),
        "clean_test_acc": series(|r| r.clean_test_acc),
        "robust_train_acc": series(|r| r.robust_train_acc),
        "robust_test_acc": series(|r| r.robust_test_acc),
        "train_loss": series(|r| r.train_loss),
        "mean_weight": series(|r| r.mean_weight),
    })
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Run(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub checkpoint_format: u32,
    pub epsilon_abs: f64,
    pub teacher_epsilon_abs: Option<f64>,
    pub component_seeds: ComponentSeeds,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSeeds {
    pub dataset: u64,
    pub teacher: u64,
    pub student: u64,
    pub avar: u64,
    pub attack: u64,
}

impl ComponentSeeds {
    pub fn derive(top: u64, dataset_seed: u64) -> Self {
        ComponentSeeds {
            dataset: rng::derive(top, &[1, dataset_seed]),
            teacher: rng::derive(top, &[2]),
            student: rng::derive(top, &[3]),
            avar: rng::derive(top, &[4]),
            attack: rng::derive(top, &[5]),
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub const NAME: &'static str = ".adlab.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::NAME);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Run(format!(
                        "{} is locked by another run (remove {} if stale)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(DirLock { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub format: OutputFormat,
}

/// A resolved configuration ready to run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub seeds: ComponentSeeds,
    pub out: PathBuf,
    pub format: OutputFormat,
    artifacts: Vec<String>,
    notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_clean_test_acc: f64,
    pub final_robust_test_acc: f64,
    pub robust_overfitting: f64,
    pub avar: Option<f64>,
    pub split_robust_overfitting: Option<f64>,
    pub max_abs_residual: Option<f64>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, opts: &RunOptions) -> Result<Self> {
        config.dataset.validate()?;
        let canonical = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
        let hash = Sha256::digest(canonical.as_bytes());
        let seed = opts.seed.unwrap_or(config.seed);
        let seeds = ComponentSeeds::derive(seed, config.dataset.seed);
        Ok(Experiment {
            config_sha256: hex::encode(hash),
            seed,
            seeds,
            config,
            out: opts.out.clone(),
            format: opts.format,
            artifacts: Vec::new(),
            notes: Vec::new(),
        })
    }

    /// Log lines accumulated while running (absolute budgets, dropped
    /// indices, …).
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    fn write(&mut self, name: &str, body: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(name), body)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_metrics(&mut self, stem: &str, record: &MetricsRecord) -> Result<()> {
        let name = format!("{stem}.{}", self.format.ext());
        export_metrics(record, self.format, &self.out.join(&name))?;
        self.artifacts.push(name);
        Ok(())
    }

    fn epsilon_abs(&self, section: &TrainSection) -> f64 {
        if self.config.dataset.is_synthetic() {
            section.epsilon * self.config.dataset.class_margin
        } else {
            section.epsilon
        }
    }

    pub fn data(&self) -> Result<SplitData> {
        gen_dataset(&DatasetSpec {
            seed: self.seeds.dataset,
            ..self.config.dataset.clone()
        })
    }

    pub fn student_config(&self) -> Result<TrainConfig> {
        let s = &self.config.train;
        s.resolve(self.epsilon_abs(s), self.seeds.student)
    }

    fn check_widths(&self, sizes: &[usize], data: &SplitData, who: &str) -> Result<()> {
        let (first, last) = (sizes.first().copied(), sizes.last().copied());
        if first != Some(data.train.dims()) || last != Some(data.train.classes) {
            return Err(Error::Config(format!(
                "{who} layer_sizes {sizes:?} must start with {} inputs and end with {} classes",
                data.train.dims(),
                data.train.classes
            )));
        }
        Ok(())
    }

    fn teacher_params(&mut self, data: &SplitData, save: bool) -> Result<Option<ModelParams>> {
        let Some(section) = self.config.teacher.clone() else {
            return Ok(None);
        };
        self.check_widths(&section.layer_sizes, data, "teacher")?;
        if let Some(path) = &section.checkpoint {
            let p = load_checkpoint(path)?;
            if p.layer_sizes() != section.layer_sizes.as_slice() {
                return Err(Error::Config(format!(
                    "teacher checkpoint has layers {:?}, config says {:?}",
                    p.layer_sizes(),
                    section.layer_sizes
                )));
            }
            return Ok(Some(p));
        }
        let eps = self.epsilon_abs(&section.train);
        let cfg = section.train.resolve(eps, self.seeds.teacher)?;
        let cfg = TrainConfig {
            tas_every: 0,
            ..cfg
        };
        self.note(format!("teacher training epsilon (absolute) = {eps}"));
        let init = ModelParams::init_mlp(&section.layer_sizes, rng::derive(self.seeds.teacher, &[0]))?;
        let out = train(None, &init, &data.train, &data.test, &cfg)?;
        if save {
            save_checkpoint(&out.student, &self.out.join("teacher.ckpt"))?;
            self.artifacts.push("teacher.ckpt".into());
            self.write_metrics("teacher_metrics", &out.metrics)?;
        }
        Ok(Some(out.student))
    }

    fn teacher(&mut self, data: &SplitData, save: bool) -> Result<Option<Teacher>> {
        let emu = self
            .config
            .teacher
            .as_ref()
            .map(|t| t.emulation)
            .unwrap_or_default();
        self.teacher_params(data, save)?
            .map(|p| Teacher::new(p, emu))
            .transpose()
    }

    fn require_teacher(&mut self, data: &SplitData, save: bool) -> Result<Teacher> {
        self.teacher(data, save)?
            .ok_or_else(|| Error::Config("this run needs a [teacher] section".into()))
    }

    fn train_student(
        &self,
        teacher: Option<&Teacher>,
        data: &SplitData,
        cfg: &TrainConfig,
    ) -> Result<TrainOutcome> {
        self.check_widths(&self.config.student.layer_sizes, data, "student")?;
        let init = ModelParams::init_mlp(
            &self.config.student.layer_sizes,
            rng::derive(self.seeds.student, &[0]),
        )?;
        train(teacher, &init, &data.train, &data.test, cfg)
    }

    fn student_checkpoint(&self) -> PathBuf {
        self.config
            .student
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("student.ckpt"))
    }

    fn manifest(&self, cmd: Subcommand) -> Result<Manifest> {
        let teacher_eps = self
            .config
            .teacher
            .as_ref()
            .filter(|t| t.checkpoint.is_none())
            .map(|t| self.epsilon_abs(&t.train));
        Ok(Manifest {
            subcommand: cmd.name().into(),
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: crate::models::CHECKPOINT_VERSION,
            epsilon_abs: self.epsilon_abs(&self.config.train),
            teacher_epsilon_abs: teacher_eps,
            component_seeds: self.seeds,
            artifacts: self.artifacts.clone(),
        })
    }

    /// Runs one subcommand, writing its artifacts and a manifest into the
    /// output directory.
    pub fn run(&mut self, cmd: Subcommand) -> Result<()> {
        let _lock = DirLock::acquire(&self.out)?;
        self.artifacts.clear();
        let eps = self.epsilon_abs(&self.config.train);
        self.note(format!("student epsilon (absolute) = {eps}"));
        match cmd {
            Subcommand::GenData => self.gen_data()?,
            Subcommand::Train => self.train_cmd()?,
            Subcommand::Evaluate => self.evaluate_cmd()?,
            Subcommand::Tas => self.tas_cmd()?,
            Subcommand::Avar => {
                self.avar_cmd()?;
            }
            Subcommand::Sweep => {
                self.sweep_cmd()?;
            }
        }
        let m = json(&self.manifest(cmd)?)?;
        write_atomic(&self.out.join("manifest.json"), m.as_bytes())
    }

    fn gen_data(&mut self) -> Result<()> {
        let data = self.data()?;
        self.write("train.csv", data.train.to_csv().as_bytes())?;
        self.write("test.csv", data.test.to_csv().as_bytes())
    }

    fn train_cmd(&mut self) -> Result<()> {
        let data = self.data()?;
        let cfg = self.student_config()?;
        let teacher = if cfg.distill.method.needs_teacher() {
            Some(self.require_teacher(&data, true)?)
        } else {
            None
        };
        let out = self.train_student(teacher.as_ref(), &data, &cfg)?;
        save_checkpoint(&out.student, &self.out.join("student.ckpt"))?;
        self.artifacts.push("student.ckpt".into());
        if let Some(swa) = &out.swa {
            save_checkpoint(swa, &self.out.join("student_swa.ckpt"))?;
            self.artifacts.push("student_swa.ckpt".into());
        }
        self.write_metrics("metrics", &out.metrics)?;
        self.write("plot.json", json(&plot_data(&out.metrics))?.as_bytes())
    }

    fn evaluate_cmd(&mut self) -> Result<()> {
        let data = self.data()?;
        let cfg = self.student_config()?;
        let path = self.student_checkpoint();
        if !path.exists() {
            return Err(Error::Config(format!(
                "no student checkpoint at {} (run `train` first or set student.checkpoint)",
                path.display()
            )));
        }
        let mut rows = vec![("student", load_checkpoint(&path)?)];
        let swa = path.with_file_name("student_swa.ckpt");
        if self.config.student.checkpoint.is_none() && swa.exists() {
            rows.push(("student_swa", load_checkpoint(&swa)?));
        }
        let mut results: Vec<(String, String, EvalResult)> = Vec::new();
        for (name, model) in &rows {
            for (split, set) in [("train", &data.train), ("test", &data.test)] {
                let r = evaluate(model, set, &cfg.eval_attack)?;
                results.push((name.to_string(), split.to_string(), r));
            }
        }
        let body = match self.format {
            OutputFormat::Csv => {
                let mut s = String::from("model,split,clean_acc,fgsm_acc,pgd_acc\n");
                for (m, sp, r) in &results {
                    s.push_str(&format!(
                        "{m},{sp},{},{},{}\n",
                        r.clean_acc, r.fgsm_acc, r.pgd_acc
                    ));
                }
                s
            }
            OutputFormat::Structured => json(
                &results
                    .iter()
                    .map(|(m, sp, r)| serde_json::json!({"model": m, "split": sp, "result": r}))
                    .collect::<Vec<_>>(),
            )?,
        };
        let name = format!("eval.{}", self.format.ext());
        self.write(&name, body.as_bytes())
    }

    /// Transferability audit of the saved student against the teacher.
    pub fn tas_report(&mut self, student: &ModelParams, teacher: &Teacher, data: &SplitData) -> Result<TasReport> {
        let cfg = self.student_config()?;
        let inner = cfg
            .train_attack
            .inner_loss
            .unwrap_or(cfg.distill.method.default_inner_loss());
        let student_attack = cfg
            .train_attack
            .with_seed(self.seeds.attack)
            .with_inner_loss(inner);
        let teacher_attack = AttackConfig {
            step_size: cfg.train_attack.epsilon / 4.0,
            ..cfg.eval_attack.with_epsilon(cfg.train_attack.epsilon)
        };
        tas_ratio(
            student,
            teacher,
            &data.train.x,
            &data.train.labels,
            &student_attack,
            &teacher_attack,
            cfg.distill.lambda_in,
        )
    }

    fn tas_cmd(&mut self) -> Result<()> {
        let data = self.data()?;
        let teacher = self.require_teacher(&data, false)?;
        let path = self.student_checkpoint();
        if !path.exists() {
            return Err(Error::Config(format!(
                "no student checkpoint at {} (run `train` first or set student.checkpoint)",
                path.display()
            )));
        }
        let student = load_checkpoint(&path)?;
        let report = self.tas_report(&student, &teacher, &data)?;
        let cfg = self.student_config()?;
        let adv = crate::attacks::craft(
            &student,
            Some(&teacher),
            &data.train.x,
            &data.train.labels,
            &cfg.train_attack.with_seed(self.seeds.attack),
            cfg.train_attack
                .inner_loss
                .unwrap_or(cfg.distill.method.default_inner_loss()),
            cfg.distill.lambda_in,
        )?;
        let p = teacher.probs(&adv.x_adv, &data.train.labels)?;
        let dt = crate::attacks::pgd(
            &teacher,
            None,
            &data.train.x,
            &data.train.labels,
            &AttackConfig {
                step_size: cfg.train_attack.epsilon / 4.0,
                ..cfg.eval_attack.with_epsilon(cfg.train_attack.epsilon)
            },
        )?;
        let q = teacher.probs(&dt.x_adv, &data.train.labels)?;
        let bound = lemma2_bound(&p, &q)?;
        let mut csv = String::from("index,score,is_tas,teacher_entropy,lemma2_bound,lemma2_holds\n");
        for (i, (&s, &b)) in report.per_sample_score.iter().zip(&bound).enumerate() {
            csv.push_str(&format!(
                "{i},{s},{},{},{b},{}\n",
                report.is_tas[i],
                report.teacher_adv_entropy[i],
                s >= b - LEMMA2_SLACK
            ));
        }
        self.write("tas_scores.csv", csv.as_bytes())?;
        let bins = self.config.tas.map(|t| t.bins).unwrap_or(DEFAULT_HISTOGRAM_BINS);
        let hist = entropy_histogram(&report.teacher_adv_entropy, teacher.classes(), bins)?;
        self.write("entropy_histogram.json", json(&hist)?.as_bytes())?;
        let summary = serde_json::json!({
            "ratio": report.ratio,
            "samples": report.is_tas.len(),
            "epsilon_abs": cfg.train_attack.epsilon,
        });
        self.write("tas.json", json(&summary)?.as_bytes())
    }

    fn plan(&self) -> Result<SplitPlan> {
        let a = self
            .config
            .avar
            .ok_or_else(|| Error::Config("this run needs an [avar] section".into()))?;
        let plan = SplitPlan {
            splits: a.splits,
            repetitions: a.repetitions,
            seed: self.seeds.avar,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Adversarial variance for the configured method and teacher.
    pub fn avar_report(&mut self, teacher: Option<&Teacher>, data: &SplitData) -> Result<VarianceReport> {
        let plan = self.plan()?;
        let cfg = self.student_config()?;
        self.check_widths(&self.config.student.layer_sizes, data, "student")?;
        let report = estimate_avar(
            &data.train,
            &data.test,
            teacher,
            &self.config.student.layer_sizes,
            &cfg,
            &cfg.eval_attack,
            &plan,
        )?;
        for (k, d) in report.dropped.iter().enumerate() {
            if !d.is_empty() {
                self.note(format!("repetition {k}: dropped training indices {d:?}"));
            }
        }
        Ok(report)
    }

    fn write_avar(&mut self, stem: &str, report: &VarianceReport) -> Result<()> {
        let mut summary = report.clone();
        summary.per_point.clear();
        self.write(&format!("{stem}.json"), json(&summary)?.as_bytes())?;
        let points = match self.format {
            OutputFormat::Csv => report.per_point_csv(),
            OutputFormat::Structured => json(&report.per_point)?,
        };
        self.write(&format!("{stem}_points.{}", self.format.ext()), points.as_bytes())
    }

    fn avar_cmd(&mut self) -> Result<VarianceReport> {
        let data = self.data()?;
        let cfg = self.student_config()?;
        let teacher = if cfg.distill.method.needs_teacher() {
            Some(self.require_teacher(&data, true)?)
        } else {
            None
        };
        let report = self.avar_report(teacher.as_ref(), &data)?;
        self.write_avar("avar", &report)?;
        Ok(report)
    }

    /// Runs the configured sweep, writing per-point metrics and a summary.
    pub fn sweep_cmd(&mut self) -> Result<Vec<SweepRow>> {
        let sweep = self
            .config
            .sweep
            .clone()
            .ok_or_else(|| Error::Config("this run needs a [sweep] section".into()))?;
        let data = self.data()?;
        let base = self.student_config()?;
        if sweep.param == SweepParam::Beta && base.distill.method != DistillMethod::SaadC {
            return Err(Error::Config("a beta sweep needs method = saad-c".into()));
        }
        let teacher_params = if base.distill.method.needs_teacher() {
            Some(
                self.teacher_params(&data, true)?
                    .ok_or_else(|| Error::Config("this run needs a [teacher] section".into()))?,
            )
        } else {
            None
        };
        let base_emu = self
            .config
            .teacher
            .as_ref()
            .map(|t| t.emulation)
            .unwrap_or_default();
        let mut rows = Vec::new();
        for (i, &v) in sweep.values.iter().enumerate() {
            let mut cfg = base.clone();
            let emu = match sweep.param {
                SweepParam::Beta => {
                    cfg.distill.beta = v;
                    base_emu
                }
                SweepParam::Alpha => TeacherEmulation::LabelInterpolated { alpha: v },
            };
            cfg.validate()?;
            let teacher = teacher_params
                .clone()
                .map(|p| Teacher::new(p, emu))
                .transpose()?;
            let out = self.train_student(teacher.as_ref(), &data, &cfg)?;
            self.write_metrics(&format!("metrics_{i}"), &out.metrics)?;
            let last = out.metrics.rows.last();
            let ro = if out.metrics.rows.is_empty() {
                0.0
            } else {
                robust_overfitting(&out.metrics.robust_test_curve())?
            };
            let mut row = SweepRow {
                value: v,
                final_clean_test_acc: last.map_or(0.0, |r| r.clean_test_acc),
                final_robust_test_acc: last.map_or(0.0, |r| r.robust_test_acc),
                robust_overfitting: ro,
                avar: None,
                split_robust_overfitting: None,
                max_abs_residual: None,
            };
            if self.config.avar.is_some() {
                let saved = self.config.train.clone();
                if sweep.param == SweepParam::Beta {
                    self.config.train.beta = v;
                }
                let rep = self.avar_report(teacher.as_ref(), &data);
                self.config.train = saved;
                let rep = rep?;
                self.write_avar(&format!("avar_{i}"), &rep)?;
                row.avar = Some(rep.variance);
                row.split_robust_overfitting = Some(rep.mean_robust_overfitting());
                row.max_abs_residual = Some(rep.max_abs_residual);
            }
            rows.push(row);
        }
        let body = match self.format {
            OutputFormat::Csv => {
                let opt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
                let mut s = String::from("value,final_clean_test_acc,final_robust_test_acc,robust_overfitting,avar,split_robust_overfitting,max_abs_residual\n");
                for r in &rows {
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        r.value,
                        r.final_clean_test_acc,
                        r.final_robust_test_acc,
                        r.robust_overfitting,
                        opt(r.avar),
                        opt(r.split_robust_overfitting),
                        opt(r.max_abs_residual)
                    ));
                }
                s
            }
            OutputFormat::Structured => json(&rows)?,
        };
        let name = format!("sweep.{}", self.format.ext());
        self.write(&name, body.as_bytes())?;
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[dataset]
kind = "gaussian-mixture"
samples_per_class = 20
[student]
layer_sizes = [2, 8, 2]
[train]
method = "pgd-at"
epochs = 2
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch_size, 64);
        assert!(c.teacher.is_none());
        let t = c.train.resolve(0.05, 1).unwrap();
        assert_eq!(t.lr_decay_epochs, vec![1]);
        assert_eq!(t.eval_attack.step_size, 0.0125);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let bad = MINIMAL.replace("epochs = 2", "epochs = 2\nepocs = 3");
        assert!(matches!(parse_config(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("seed = 3", "sed = 3");
        assert!(matches!(parse_config(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn default_schedule_matches_desk_scale() {
        let t = TrainSection::new(DistillMethod::Saad).resolve(0.05, 0).unwrap();
        assert_eq!(t.lr_decay_epochs, vec![30, 45]);
        assert_eq!(t.swa_start_epoch, 28);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let opts = RunOptions {
            out: PathBuf::from("unused"),
            seed: None,
            format: OutputFormat::Csv,
        };
        let a = Experiment::new(parse_config(MINIMAL).unwrap(), &opts).unwrap();
        let b = Experiment::new(parse_config(MINIMAL).unwrap(), &opts).unwrap();
        assert_eq!(a.config_sha256, b.config_sha256);
        let c = Experiment::new(parse_config(&MINIMAL.replace("epochs = 2", "epochs = 3")).unwrap(), &opts).unwrap();
        assert_ne!(a.config_sha256, c.config_sha256);
        let s = Experiment::new(parse_config(MINIMAL).unwrap(), &RunOptions { seed: Some(9), ..opts }).unwrap();
        assert_eq!(s.seed, 9);
        assert_ne!(s.seeds, a.seeds);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let l = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Run(_))));
        drop(l);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn structured_metrics_round_trip() {
        let rec = MetricsRecord {
            rows: vec![crate::train::MetricsRow {
                epoch: 0,
                lr: 0.1,
                train_loss: 1.0 / 3.0,
                clean_train_acc: 50.0,
                clean_test_acc: 49.5,
                robust_train_acc: 10.0,
                robust_test_acc: std::f64::consts::PI,
                mean_weight: 0.123456789012345,
                tas_ratio: Some(0.25),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        export_metrics(&rec, OutputFormat::Structured, &p).unwrap();
        let back: MetricsRecord = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, rec);
        let c = dir.path().join("m.csv");
        export_metrics(&rec, OutputFormat::Csv, &c).unwrap();
        assert_eq!(fs::read_to_string(&c).unwrap().lines().count(), 2);
    }
}
