use std::f64::consts::PI;

use serde::{Deserialize, Deserializer, Serialize};

use crate::attacks::{AdversaryBudget, Norm};
use crate::error::{Error, Result};
use crate::models::ArchDescriptor;
use crate::objectives::{KlDirection, RepLossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Sat,
    FastAt,
    FreeAt,
    Rrm,
    Kd,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Erm, Method::Sat, Method::FastAt, Method::FreeAt, Method::Rrm, Method::Kd];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Sat => "sat",
            Method::FastAt => "fast_at",
            Method::FreeAt => "free_at",
            Method::Rrm => "rrm",
            Method::Kd => "kd",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Rrm | Method::Kd)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| {
            let valid: Vec<_> = Method::ALL.iter().map(|m| m.tag()).collect();
            Error::Config(format!("unknown method `{s}`; valid methods: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Constant,
    /// Multiply by `factor` at each milestone epoch.
    StepDecay {
        milestones: Vec<usize>,
        factor: f64,
    },
    /// Triangle from 0 up to `max_lr` at mid-training and back to 0.
    Cyclic {
        max_lr: f64,
    },
    Cosine,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::StepDecay { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!("milestones {milestones:?} must be strictly increasing")));
                }
                if !(*factor > 0.0 && *factor < 1.0) {
                    return Err(Error::Config(format!("decay factor {factor} must lie in (0, 1)")));
                }
            }
            ScheduleSpec::Cyclic { max_lr } if !(*max_lr > 0.0) => {
                return Err(Error::Config(format!("cyclic max_lr {max_lr} must be positive")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Learning rate at (possibly fractional) `epoch` of a `total_epochs` run.
pub fn lr_at(schedule: &ScheduleSpec, base_lr: f64, epoch: f64, total_epochs: usize) -> f64 {
    let total = total_epochs.max(1) as f64;
    match schedule {
        ScheduleSpec::Constant => base_lr,
        ScheduleSpec::StepDecay { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| m as f64 <= epoch).count();
            base_lr * factor.powi(passed as i32)
        }
        ScheduleSpec::Cyclic { max_lr } => {
            let half = total / 2.0;
            max_lr * (1.0 - (epoch - half).abs() / half).max(0.0)
        }
        ScheduleSpec::Cosine => base_lr * (1.0 + (PI * epoch / total).cos()) / 2.0,
    }
}

/// Accepts a number or an exact fraction string such as `"8/255"`.
pub fn parse_real(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::Config(format!("`{s}` is not a number or fraction"));
    match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| bad())?;
            let den: f64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0.0 {
                return Err(bad());
            }
            Ok(num / den)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

fn real_or_fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Int(i64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Int(v) => Ok(v as f64),
        Raw::Text(s) => parse_real(&s).map_err(serde::de::Error::custom),
    }
}

fn opt_real_or_fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    real_or_fraction(d).map(Some)
}

/// Serialized form of an adversary budget. The step size defaults from the
/// norm, epsilon and step count; the box may be `"unbounded"`.
#[derive(Deserialize)]
struct BudgetFile {
    norm: Norm,
    #[serde(deserialize_with = "real_or_fraction")]
    epsilon: f64,
    #[serde(default, deserialize_with = "opt_real_or_fraction")]
    step_size: Option<f64>,
    steps: usize,
    #[serde(default = "one")]
    restarts: usize,
    #[serde(default)]
    pixel_box: Option<BoxFile>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxFile {
    Range([f64; 2]),
    Keyword(String),
}

fn one() -> usize {
    1
}

impl<'de> Deserialize<'de> for AdversaryBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = BudgetFile::deserialize(d)?;
        let pixel_box = match f.pixel_box {
            None => Some([0.0, 1.0]),
            Some(BoxFile::Range(r)) => Some(r),
            Some(BoxFile::Keyword(k)) if k == "unbounded" || k == "none" => None,
            Some(BoxFile::Keyword(k)) => {
                return Err(serde::de::Error::custom(format!("pixel_box must be [lo, hi] or \"unbounded\", got `{k}`")))
            }
        };
        Ok(AdversaryBudget {
            norm: f.norm,
            epsilon: f.epsilon,
            step_size: f.step_size.unwrap_or_else(|| AdversaryBudget::default_step_size(f.norm, f.epsilon, f.steps)),
            steps: f.steps,
            restarts: f.restarts,
            pixel_box,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Cross-entropy weight of the representation-matching objective.
    #[serde(default = "defaults::lambda", deserialize_with = "real_or_fraction")]
    pub lambda: f64,
    /// Distillation weight on the KL term.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
    /// Minibatch replays for free adversarial training.
    #[serde(default = "defaults::replay_m")]
    pub replay_m: usize,
    /// Carry the free-training perturbation over to the next batch instead of
    /// resetting it.
    #[serde(default)]
    pub carry_delta: bool,
    /// Fast AT step as a multiple of epsilon.
    #[serde(default = "defaults::fast_step_factor")]
    pub fast_step_factor: f64,
    pub budget: AdversaryBudget,
    pub schedule: ScheduleSpec,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(deserialize_with = "real_or_fraction")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rep_loss: RepLossKind,
    #[serde(default = "defaults::shuffle")]
    pub shuffle: bool,
    pub model: ArchDescriptor,
}

mod defaults {
    pub fn lambda() -> f64 {
        5e-3
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn temperature() -> f64 {
        30.0
    }
    pub fn replay_m() -> usize {
        8
    }
    pub fn fast_step_factor() -> f64 {
        1.25
    }
    pub fn shuffle() -> bool {
        true
    }
}

pub(crate) const LAMBDA_ZERO_MSG: &str =
    "lambda must be non-zero: it is mandatory because the representation loss does not depend on the final layer, \
     so with lambda = 0 the classifier head receives no gradient";

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.schedule.validate()?;
        self.model.param_shapes()?;
        if self.epochs > 0 && self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        match self.method {
            Method::Rrm if self.lambda == 0.0 => return Err(Error::Config(LAMBDA_ZERO_MSG.into())),
            Method::Rrm if !(self.lambda > 0.0) => {
                return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)))
            }
            Method::Kd if !(self.temperature > 0.0) => {
                return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)))
            }
            Method::Kd if !(0.0..=1.0).contains(&self.alpha) => {
                return Err(Error::Config(format!("alpha {} must lie in [0, 1]", self.alpha)))
            }
            Method::FreeAt if self.replay_m == 0 => return Err(Error::Config("replay_m must be at least 1".into())),
            Method::Sat if self.budget.steps == 0 => {
                return Err(Error::Config("adversarial training needs budget.steps >= 1".into()))
            }
            _ => {}
        }
        Ok(())
    }

    fn base(method: Method, model: ArchDescriptor) -> Self {
        Self {
            method,
            lambda: defaults::lambda(),
            alpha: defaults::alpha(),
            temperature: defaults::temperature(),
            kl_direction: KlDirection::default(),
            replay_m: defaults::replay_m(),
            carry_delta: false,
            fast_step_factor: defaults::fast_step_factor(),
            budget: AdversaryBudget::new(Norm::Linf, 8.0 / 255.0, 7),
            schedule: ScheduleSpec::Constant,
            epochs: 1,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
            rep_loss: RepLossKind::CosineDistance,
            shuffle: true,
            model,
        }
    }
}

/// Hyperparameter rows for CIFAR-10 runs, as executable configs.
pub mod presets {
    use super::*;

    fn cifar_model() -> ArchDescriptor {
        ArchDescriptor::cnn([3, 32, 32], &[16, 32], 128, 10)
    }

    /// SAT: lr 0.1, batch 128, 150 epochs, decay at 50 and 100; 7-step PGD.
    pub fn sat_cifar() -> TrainConfig {
        TrainConfig {
            epochs: 150,
            schedule: ScheduleSpec::StepDecay { milestones: vec![50, 100], factor: 0.1 },
            ..TrainConfig::base(Method::Sat, cifar_model())
        }
    }

    /// Fast AT: cyclic schedule peaking at 0.2 over 40 epochs.
    pub fn fast_at() -> TrainConfig {
        TrainConfig {
            epochs: 40,
            schedule: ScheduleSpec::Cyclic { max_lr: 0.2 },
            learning_rate: 0.2,
            ..TrainConfig::base(Method::FastAt, cifar_model())
        }
    }

    /// Free AT with m = 8: cyclic peaking at 0.04 over 96 epochs.
    pub fn free_at_m8() -> TrainConfig {
        TrainConfig {
            epochs: 96,
            replay_m: 8,
            schedule: ScheduleSpec::Cyclic { max_lr: 0.04 },
            learning_rate: 0.04,
            ..TrainConfig::base(Method::FreeAt, cifar_model())
        }
    }

    /// RRM under the l-inf threat model: lambda 5e-3, cosine loss, 48 epochs.
    pub fn rrm_linf() -> TrainConfig {
        TrainConfig {
            epochs: 48,
            lambda: 5e-3,
            schedule: ScheduleSpec::Cosine,
            ..TrainConfig::base(Method::Rrm, cifar_model())
        }
    }

    /// RRM against an l2 (eps = 1) teacher: lambda 5e-5.
    pub fn rrm_l2() -> TrainConfig {
        TrainConfig { lambda: 5e-5, budget: AdversaryBudget::new(Norm::L2, 1.0, 7), ..rrm_linf() }
    }

    /// Distillation with alpha = 1 and t = 30; 100 epochs, decay at 65 and 90.
    pub fn kd_t30() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            alpha: 1.0,
            temperature: 30.0,
            schedule: ScheduleSpec::StepDecay { milestones: vec![65, 90], factor: 0.1 },
            budget: AdversaryBudget::new(Norm::L2, 1.0, 7),
            ..TrainConfig::base(Method::Kd, cifar_model())
        }
    }

    /// Standard training on a robustified dataset; 100 epochs, decay at 65 and 90.
    pub fn rdt() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            schedule: ScheduleSpec::StepDecay { milestones: vec![65, 90], factor: 0.1 },
            budget: AdversaryBudget::new(Norm::L2, 1.0, 7),
            ..TrainConfig::base(Method::Erm, cifar_model())
        }
    }

    /// Every named preset.
    pub fn all() -> Vec<(&'static str, TrainConfig)> {
        vec![
            ("sat_cifar", sat_cifar()),
            ("fast_at", fast_at()),
            ("free_at_m8", free_at_m8()),
            ("rrm_linf", rrm_linf()),
            ("rrm_l2", rrm_l2()),
            ("kd_t30", kd_t30()),
            ("rdt", rdt()),
        ]
    }

    /// Desk-scale config for the synthetic task: one hidden layer of 32
    /// units, l-inf eps 0.5 on unbounded inputs, cosine-annealed lr 0.2 with
    /// weight decay 0.02, and the l2 representation loss.
    ///
    /// Distillation runs at lr 0.05: its `t^2` weight makes the KL gradient
    /// large enough at t = 30 to diverge at 0.2.
    pub fn synthetic(method: Method, inputs: usize) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: if method == Method::Kd { 0.05 } else { 0.2 },
            weight_decay: 0.02,
            schedule: ScheduleSpec::Cosine,
            lambda: 1e-3,
            rep_loss: RepLossKind::L2Distance,
            budget: AdversaryBudget::new(Norm::Linf, 0.5, 7).with_box(None),
            ..TrainConfig::base(method, ArchDescriptor::mlp(inputs, &[32], 2))
        }
    }
}
