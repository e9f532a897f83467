//! Experiment configuration: TOML parsing, defaults, validation, and the
//! semantic hash that guards checkpoint resumption.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evolve::{MixConfig, SearlConfig, ShrinkPerturb};
use crate::layers::{Activation, LayerKind};
use crate::optim::OptimSpec;
use crate::schedule::{IterationSchedule, SelectionConfig};
use crate::space::SpaceDef;
use crate::tasks::{gen_regression_task, gen_spirals_task, Task, TaskKind};
use crate::tensor::InitKind;

/// Which replacement rule the run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Mixing-based replacement with shrink-perturb inheritance.
    #[serde(rename = "pbt-nas")]
    PbtNas,
    /// Independent training of N random architectures.
    #[serde(rename = "random")]
    Random,
    /// Random search with shrink-perturb applied at every step boundary.
    #[serde(rename = "random+sp")]
    RandomSp,
    /// Mutation-based replacement.
    #[serde(rename = "searl")]
    Searl,
    /// Replacement by self-mixing: no new architectures are created.
    #[serde(rename = "no-mixing")]
    NoMixing,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::PbtNas => "pbt-nas",
            Algorithm::Random => "random",
            Algorithm::RandomSp => "random+sp",
            Algorithm::Searl => "searl",
            Algorithm::NoMixing => "no-mixing",
        }
    }

    pub fn uses_selection(&self) -> bool {
        matches!(self, Algorithm::PbtNas | Algorithm::Searl | Algorithm::NoMixing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    #[serde(default = "d_task_seed")]
    pub seed: u64,
    /// Spirals: points per class in the training split.
    #[serde(default = "d_n_per_class")]
    pub n_per_class: usize,
    /// Spirals: coordinate jitter.
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    /// Regression split sizes.
    #[serde(default = "d_n_train")]
    pub n_train: usize,
    #[serde(default = "d_n_eval")]
    pub n_val: usize,
    #[serde(default = "d_n_eval")]
    pub n_held: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

fn d_task_seed() -> u64 {
    1
}
fn d_n_per_class() -> usize {
    100
}
fn d_noise_std() -> f64 {
    0.12
}
fn d_n_train() -> usize {
    256
}
fn d_n_eval() -> usize {
    128
}
fn d_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "d_slots")]
    pub slots: usize,
    #[serde(default = "d_layer_options")]
    pub layer_options: Vec<String>,
    #[serde(default = "d_activation_options")]
    pub activation_options: Vec<String>,
    #[serde(default = "d_true")]
    pub norm_toggle: bool,
    #[serde(default)]
    pub width_searchable: bool,
    #[serde(default = "d_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "d_fixed_width")]
    pub fixed_width: usize,
}

fn d_slots() -> usize {
    3
}
fn d_layer_options() -> Vec<String> {
    vec![
        "identity".into(),
        "linear".into(),
        "residual:0.5".into(),
        "residual:2.0".into(),
    ]
}
fn d_activation_options() -> Vec<String> {
    vec!["identity".into(), "tanh".into(), "relu".into(), "swish".into()]
}
fn d_true() -> bool {
    true
}
fn d_widths() -> Vec<usize> {
    vec![16, 32, 64]
}
fn d_fixed_width() -> usize {
    32
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            slots: d_slots(),
            layer_options: d_layer_options(),
            activation_options: d_activation_options(),
            norm_toggle: true,
            width_searchable: false,
            widths: d_widths(),
            fixed_width: d_fixed_width(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "d_e_total")]
    pub e_total: usize,
    #[serde(default)]
    pub e_step: Option<usize>,
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
}

fn d_e_total() -> usize {
    60
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            e_total: d_e_total(),
            e_step: None,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    #[serde(default = "d_tau")]
    pub tau: f64,
}

fn d_tau() -> f64 {
    25.0
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection { tau: d_tau() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    #[serde(default = "d_p")]
    pub p: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
}

fn d_p() -> f64 {
    0.25
}
fn d_lambda() -> f64 {
    0.4
}
fn d_gamma() -> f64 {
    0.1
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection {
            p: d_p(),
            lambda: d_lambda(),
            gamma: d_gamma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "d_optim_kind")]
    pub kind: String,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_optim_kind() -> String {
    "adam".into()
}
fn d_lr() -> f64 {
    3e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            kind: d_optim_kind(),
            lr: d_lr(),
            momentum: d_momentum(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearlSection {
    #[serde(default = "d_noise_scale")]
    pub weight_noise_scale: f64,
    /// Pin the mutation to one branch (ablations and equivalence checks).
    #[serde(default)]
    pub force_branch: Option<crate::evolve::SearlBranch>,
}

fn d_noise_scale() -> f64 {
    0.1
}

impl Default for SearlSection {
    fn default() -> Self {
        SearlSection {
            weight_noise_scale: d_noise_scale(),
            force_branch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default = "d_init_kind")]
    pub kind: InitKind,
}

fn d_init_kind() -> InitKind {
    InitKind::UniformHe
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection { kind: d_init_kind() }
    }
}

/// The raw TOML shape. Unknown keys anywhere are rejected with the key name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub task: TaskSection,
    #[serde(default = "d_population")]
    pub population: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub mix: MixSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub searl: SearlSection,
    #[serde(default)]
    pub init: InitSection,
}

fn d_population() -> usize {
    8
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_workers() -> usize {
    1
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn parse_layer_option(s: &str) -> Result<LayerKind> {
    let s = s.trim();
    if s == "identity" {
        return Ok(LayerKind::Identity);
    }
    if s == "linear" {
        return Ok(LayerKind::Linear);
    }
    if let Some(mult) = s.strip_prefix("residual:") {
        let multiplier: f64 = mult
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("bad residual multiplier {mult:?}: {e}")))?;
        if !multiplier.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "residual multiplier must be finite, got {multiplier}"
            )));
        }
        return Ok(LayerKind::Residual { multiplier });
    }
    Err(Error::InvalidConfig(format!(
        "unknown layer option {s:?} (expected identity | linear | residual:<multiplier>)"
    )))
}

fn parse_activation_option(s: &str) -> Result<Activation> {
    match s.trim() {
        "identity" => Ok(Activation::Identity),
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        "swish" => Ok(Activation::Swish),
        other => Err(Error::InvalidConfig(format!(
            "unknown activation option {other:?}"
        ))),
    }
}

impl ExperimentConfig {
    /// Parse, apply defaults, and validate a TOML config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::ConfigParse(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation; called by the parsers and again before runs.
    pub fn validate(&self) -> Result<()> {
        SelectionConfig::new(self.select.tau)?;
        self.mix_config()?;
        self.resolved_schedule()?;
        self.build_space()?;
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed required".into()));
        }
        if self.optim.lr <= 0.0 || !self.optim.lr.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        match self.optim.kind.as_str() {
            "adam" | "sgd" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown optimizer kind {other:?} (expected adam | sgd)"
                )))
            }
        }
        if self.searl.weight_noise_scale < 0.0 {
            return Err(Error::InvalidConfig(
                "searl weight_noise_scale must be >= 0".into(),
            ));
        }

        let n = self.population;
        match self.algorithm {
            Algorithm::Random | Algorithm::RandomSp => {
                if n < 1 {
                    return Err(Error::InvalidConfig("population must be >= 1".into()));
                }
            }
            Algorithm::PbtNas => {
                let floor_k = ((n as f64) * self.select.tau / 100.0).floor() as usize;
                if floor_k < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "pbt-nas needs a parent pool of >= 2: floor({n} * {tau}%) = {floor_k}; \
                         increase the population or tau",
                        tau = self.select.tau
                    )));
                }
            }
            Algorithm::Searl | Algorithm::NoMixing => {
                if n < 2 {
                    return Err(Error::InvalidConfig(
                        "selection-based algorithms need population >= 2".into(),
                    ));
                }
            }
        }
        // task parameter sanity; builds are cheap at these sizes
        self.build_task()?;
        Ok(())
    }

    pub fn resolved_schedule(&self) -> Result<IterationSchedule> {
        match (&self.schedule.steps, self.schedule.e_step) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "give either schedule.steps or schedule.e_step, not both".into(),
            )),
            (Some(steps), None) => {
                let sched = IterationSchedule::from_steps(steps.clone())?;
                if sched.e_total() != self.schedule.e_total {
                    return Err(Error::InvalidConfig(format!(
                        "schedule.steps sum to {}, but e_total is {}",
                        sched.e_total(),
                        self.schedule.e_total
                    )));
                }
                Ok(sched)
            }
            (None, e_step) => IterationSchedule::uniform(self.schedule.e_total, e_step.unwrap_or(10)),
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig { tau: self.select.tau }
    }

    pub fn mix_config(&self) -> Result<MixConfig> {
        MixConfig::new(self.mix.p, ShrinkPerturb::new(self.mix.lambda, self.mix.gamma)?)
    }

    pub fn searl_config(&self) -> SearlConfig {
        SearlConfig {
            weight_noise_scale: self.searl.weight_noise_scale,
            forced_branch: self.searl.force_branch,
        }
    }

    pub fn optim_spec(&self) -> OptimSpec {
        match self.optim.kind.as_str() {
            "sgd" => OptimSpec::Sgd {
                lr: self.optim.lr,
                momentum: self.optim.momentum,
            },
            _ => OptimSpec::Adam {
                lr: self.optim.lr,
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.eps,
            },
        }
    }

    pub fn build_space(&self) -> Result<SpaceDef> {
        let layers = self
            .search
            .layer_options
            .iter()
            .map(|s| parse_layer_option(s))
            .collect::<Result<Vec<_>>>()?;
        let acts = self
            .search
            .activation_options
            .iter()
            .map(|s| parse_activation_option(s))
            .collect::<Result<Vec<_>>>()?;
        SpaceDef::new(
            self.search.slots,
            layers,
            acts,
            self.search.norm_toggle,
            self.search.width_searchable.then(|| self.search.widths.clone()),
            self.search.fixed_width,
        )
    }

    pub fn build_task(&self) -> Result<Task> {
        match self.task.kind {
            TaskKind::Regression => gen_regression_task(
                self.task.seed,
                self.task.n_train,
                self.task.n_val,
                self.task.n_held,
                self.task.batch_size,
            ),
            TaskKind::Spirals => gen_spirals_task(
                self.task.seed,
                self.task.n_per_class,
                self.task.noise_std,
                self.task.batch_size,
            ),
        }
    }

    /// Hash over the result-affecting fields only (seeds, workers, and output
    /// paths excluded), used to guard checkpoint resumption.
    pub fn semantic_hash(&self) -> String {
        #[derive(Serialize)]
        struct Semantic<'a> {
            algorithm: &'a Algorithm,
            task: &'a TaskSection,
            population: usize,
            search: &'a SearchSection,
            schedule: &'a ScheduleSection,
            select: &'a SelectSection,
            mix: &'a MixSection,
            optim: &'a OptimSection,
            searl: &'a SearlSection,
            init: &'a InitSection,
        }
        let view = Semantic {
            algorithm: &self.algorithm,
            task: &self.task,
            population: self.population,
            search: &self.search,
            schedule: &self.schedule,
            select: &self.select,
            mix: &self.mix,
            optim: &self.optim,
            searl: &self.searl,
            init: &self.init,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(hasher.finalize())
    }
}
