//! Training procedures: ERM, PGD adversarial training (SAT), Fast AT, Free AT,
//! representation matching (RRM) and distillation (KD).

mod config;

pub use config::{lr_at, parse_real, presets, Method, ScheduleSpec, TrainConfig};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{ascent_direction, clamp_box, pgd, project, random_delta, AdversaryBudget, Classifier, Init};
use crate::bench::{LedgerSnapshot, Phase, RunReport};
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, Provenance};
use crate::objectives::{kl_temperature_loss, representation_loss, KlDirection, RepLossKind};
use crate::tensor::{Graph, Tensor, Var};

/// Loss components and cost of one parameter update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub ce: f64,
    /// Representation loss (RRM only).
    pub rep: f64,
    /// Temperature KL (KD only).
    pub kl: f64,
    pub total: f64,
    /// Student plus teacher passes spent on this step, across all phases.
    pub forwards: u64,
    pub backwards: u64,
    pub updated: bool,
}

/// Stochastic gradient descent with optional heavy-ball momentum and L2
/// weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Adds `weight_decay * p` to every parameter's gradient.
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, weight_decay: 0.0, velocity: Vec::new() }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Plain SGD at a fixed learning rate.
    pub fn plain(lr: f64) -> Self {
        Self::new(lr, 0.0)
    }

    pub fn step(&mut self, model: &mut Model, mut grads: Vec<Vec<f64>>) -> Result<()> {
        if model.is_frozen() {
            return Err(Error::Contract("cannot update a frozen model".into()));
        }
        if self.weight_decay != 0.0 {
            for (g, p) in grads.iter_mut().zip(model.params()) {
                g.iter_mut().zip(p.value.data()).for_each(|(g, v)| *g += self.weight_decay * v);
            }
        }
        let dirs = if self.momentum == 0.0 {
            grads
        } else {
            if self.velocity.is_empty() {
                self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            for (v, g) in self.velocity.iter_mut().zip(&grads) {
                v.iter_mut().zip(g).for_each(|(v, g)| *v = self.momentum * *v + g);
            }
            self.velocity.clone()
        };
        model.apply_step(&dirs, self.lr);
        Ok(())
    }
}

fn ensure_trainable(model: &Model) -> Result<()> {
    if model.is_frozen() {
        return Err(Error::Contract("cannot train a frozen model".into()));
    }
    Ok(())
}

fn ensure_teacher(teacher: &Model) -> Result<()> {
    if !teacher.is_frozen() {
        return Err(Error::Contract("the teacher must be frozen before it is used for transfer".into()));
    }
    Ok(())
}

fn param_grads(g: &Graph, params: &[Var]) -> Vec<Vec<f64>> {
    params.iter().map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec)).collect()
}

/// Counts passes on the student and optional teacher around a step.
struct PassMeter<'a> {
    models: Vec<(&'a Model, LedgerSnapshot)>,
}

impl<'a> PassMeter<'a> {
    fn start(student: &'a Model, teacher: Option<&'a Model>) -> Self {
        let models = std::iter::once(student).chain(teacher).map(|m| (m, m.ledger().snapshot())).collect();
        Self { models }
    }

    fn finish(self, mut r: StepResult) -> StepResult {
        for (m, before) in self.models {
            let d = m.ledger().snapshot().since(&before);
            r.forwards += d.total_forwards();
            r.backwards += d.total_backwards();
        }
        r
    }
}

/// One cross-entropy update on `(x, y)`: a forward, a backward and an SGD step.
fn ce_update(model: &mut Model, x: &Tensor, y: &[usize], opt: &mut Sgd) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let fp = model.forward(&mut g, xv, true, Phase::Train)?;
    let loss = g.softmax_cross_entropy(fp.logits, y)?;
    model.backward(&mut g, loss, Phase::Train)?;
    let ce = g.value(loss).item();
    opt.step(model, param_grads(&g, &fp.params))?;
    Ok(ce)
}

/// Empirical risk minimisation on natural inputs.
pub fn erm_step(model: &mut Model, batch: &Batch, opt: &mut Sgd) -> Result<StepResult> {
    ensure_trainable(model)?;
    let before = model.ledger().snapshot();
    let ce = ce_update(model, &batch.x, &batch.y, opt)?;
    let d = model.ledger().snapshot().since(&before);
    Ok(StepResult {
        ce,
        total: ce,
        forwards: d.total_forwards(),
        backwards: d.total_backwards(),
        updated: true,
        ..Default::default()
    })
}

/// PGD adversarial training: a random-start PGD attack, then one update at
/// the adversarial point.
pub fn sat_step<R: Rng + ?Sized>(
    model: &mut Model,
    batch: &Batch,
    budget: &AdversaryBudget,
    opt: &mut Sgd,
    rng: &mut R,
) -> Result<StepResult> {
    ensure_trainable(model)?;
    if budget.steps == 0 {
        return Err(Error::Config("adversarial training needs budget.steps >= 1".into()));
    }
    let before = model.ledger().snapshot();
    let x_adv = pgd(&*model, &batch.x, &batch.y, budget, Init::Random, rng)?;
    let ce = ce_update(model, &x_adv, &batch.y, opt)?;
    let d = model.ledger().snapshot().since(&before);
    Ok(StepResult {
        ce,
        total: ce,
        forwards: d.total_forwards(),
        backwards: d.total_backwards(),
        updated: true,
        ..Default::default()
    })
}

/// FGSM from a uniform random start with step `step_factor * epsilon`,
/// followed by one update at the perturbed point.
pub fn fast_at_step<R: Rng + ?Sized>(
    model: &mut Model,
    batch: &Batch,
    budget: &AdversaryBudget,
    step_factor: f64,
    opt: &mut Sgd,
    rng: &mut R,
) -> Result<StepResult> {
    ensure_trainable(model)?;
    budget.validate()?;
    let before = model.ledger().snapshot();
    let delta0 = random_delta(batch.x.shape(), budget, rng);
    let mut start = batch.x.zip_map(&delta0, |a, b| a + b)?;
    clamp_box(&mut start, budget.pixel_box);
    let probe = model.probe(&start, &batch.y)?;
    let dir = ascent_direction(&probe.input_grad, budget.norm);
    let alpha = step_factor * budget.epsilon;
    let delta = start.zip_map(&batch.x, |s, x| s - x)?.zip_map(&dir, |d, g| d + alpha * g)?;
    let mut x_adv = batch.x.zip_map(&project(&delta, budget), |a, b| a + b)?;
    clamp_box(&mut x_adv, budget.pixel_box);
    let ce = ce_update(model, &x_adv, &batch.y, opt)?;
    let d = model.ledger().snapshot().since(&before);
    Ok(StepResult {
        ce,
        total: ce,
        forwards: d.total_forwards(),
        backwards: d.total_backwards(),
        updated: true,
        ..Default::default()
    })
}

/// Free adversarial training over one sweep of `batches`: each batch is
/// replayed `replay_m` times, and every replay's single backward pass both
/// updates the parameters and moves the perturbation by `epsilon` along the
/// input-gradient ascent direction.
///
/// The perturbation starts at zero for each batch unless `persistent_delta`
/// is set, in which case it carries over whenever the batch shape allows.
pub fn free_at_epoch(
    model: &mut Model,
    batches: &[Batch],
    budget: &AdversaryBudget,
    replay_m: usize,
    persistent_delta: bool,
    opt: &mut Sgd,
) -> Result<Vec<StepResult>> {
    ensure_trainable(model)?;
    budget.validate()?;
    if replay_m == 0 {
        return Err(Error::Config("replay_m must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(batches.len() * replay_m);
    let mut carried: Option<Tensor> = None;
    for batch in batches {
        let mut delta = match carried.take() {
            Some(d) if persistent_delta && d.shape() == batch.x.shape() => d,
            _ => Tensor::zeros(batch.x.shape().to_vec()),
        };
        for _ in 0..replay_m {
            let before = model.ledger().snapshot();
            let mut x_adv = batch.x.zip_map(&delta, |a, b| a + b)?;
            clamp_box(&mut x_adv, budget.pixel_box);
            let mut g = Graph::new();
            let xv = g.param(x_adv)?;
            let fp = model.forward(&mut g, xv, true, Phase::Train)?;
            let loss = g.softmax_cross_entropy(fp.logits, &batch.y)?;
            model.backward(&mut g, loss, Phase::Train)?;
            let ce = g.value(loss).item();
            let input_grad = Tensor::from_parts(
                batch.x.shape().to_vec(),
                g.grad(xv).map_or_else(|| vec![0.0; batch.x.len()], <[f64]>::to_vec),
            );
            opt.step(model, param_grads(&g, &fp.params))?;
            let dir = ascent_direction(&input_grad, budget.norm);
            delta = project(&delta.zip_map(&dir, |d, s| d + budget.epsilon * s)?, budget);
            let d = model.ledger().snapshot().since(&before);
            results.push(StepResult {
                ce,
                total: ce,
                forwards: d.total_forwards(),
                backwards: d.total_backwards(),
                updated: true,
                ..Default::default()
            });
        }
        carried = Some(delta);
    }
    Ok(results)
}

fn check_widths(student: &Model, teacher: &Model) -> Result<()> {
    let (s, t) = (student.feature_dim(), teacher.feature_dim());
    if s != t {
        let fix = if s > t { "student" } else { "teacher" };
        return Err(Error::Dimension(format!(
            "student representation width {s} differs from teacher width {t}; \
             attach an adapter to the {fix} (attach_adapter) to map it to {}",
            s.min(t)
        )));
    }
    Ok(())
}

/// Representation matching on natural inputs: `lambda * CE + rep(g_S(x), g_T(x))`
/// with the teacher branch held constant.
pub fn rrm_step(
    student: &mut Model,
    teacher: &Model,
    batch: &Batch,
    lambda: f64,
    rep_loss: RepLossKind,
    opt: &mut Sgd,
) -> Result<StepResult> {
    if lambda == 0.0 {
        return Err(Error::Config(config::LAMBDA_ZERO_MSG.into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    ensure_trainable(student)?;
    ensure_teacher(teacher)?;
    check_widths(student, teacher)?;
    let meter = PassMeter::start(student, Some(teacher));
    let target = teacher.features(&batch.x, Phase::Train)?;
    let mut g = Graph::new();
    let xv = g.constant(batch.x.clone())?;
    let fp = student.forward(&mut g, xv, true, Phase::Train)?;
    let tv = g.constant(target)?;
    let ce = g.softmax_cross_entropy(fp.logits, &batch.y)?;
    let rep = representation_loss(&mut g, rep_loss, fp.features, tv)?;
    let weighted = g.scale(ce, lambda);
    let total = g.add(weighted, rep)?;
    student.backward(&mut g, total, Phase::Train)?;
    let r = StepResult {
        ce: g.value(ce).item(),
        rep: g.value(rep).item(),
        total: g.value(total).item(),
        updated: true,
        ..Default::default()
    };
    let r = meter.finish(r);
    opt.step(student, param_grads(&g, &fp.params))?;
    Ok(r)
}

/// Distillation on natural inputs: `(1 - alpha) * CE + alpha * t^2 * KL`.
#[allow(clippy::too_many_arguments)]
pub fn kd_step(
    student: &mut Model,
    teacher: &Model,
    batch: &Batch,
    alpha: f64,
    temperature: f64,
    direction: KlDirection,
    opt: &mut Sgd,
) -> Result<StepResult> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} must lie in [0, 1]")));
    }
    ensure_trainable(student)?;
    ensure_teacher(teacher)?;
    let meter = PassMeter::start(student, Some(teacher));
    let teacher_logits = teacher.logits(&batch.x, Phase::Train)?;
    let mut g = Graph::new();
    let xv = g.constant(batch.x.clone())?;
    let fp = student.forward(&mut g, xv, true, Phase::Train)?;
    let tv = g.constant(teacher_logits)?;
    let ce = g.softmax_cross_entropy(fp.logits, &batch.y)?;
    let kl = kl_temperature_loss(&mut g, fp.logits, tv, temperature, direction)?;
    let a = g.scale(ce, 1.0 - alpha);
    let b = g.scale(kl, alpha * temperature * temperature);
    let total = g.add(a, b)?;
    student.backward(&mut g, total, Phase::Train)?;
    let r = StepResult {
        ce: g.value(ce).item(),
        kl: g.value(kl).item(),
        total: g.value(total).item(),
        updated: true,
        ..Default::default()
    };
    let r = meter.finish(r);
    opt.step(student, param_grads(&g, &fp.params))?;
    Ok(r)
}

/// Builds the model from `config.model` with the run's seed, then trains it.
pub fn train(config: &TrainConfig, data: &Dataset, teacher: Option<&Model>) -> Result<(Model, RunReport)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = build_model(&config.model, &mut rng)?;
    train_from(config, model, data, teacher, &mut rng)
}

/// Trains `model` in place of a freshly built one. Per-epoch learning rates
/// follow `config.schedule`; Free AT changes its rate once per epoch, the
/// other methods at every step.
pub fn train_from<R: Rng + ?Sized>(
    config: &TrainConfig,
    mut model: Model,
    data: &Dataset,
    teacher: Option<&Model>,
    rng: &mut R,
) -> Result<(Model, RunReport)> {
    config.validate()?;
    ensure_trainable(&model)?;
    match (config.method.needs_teacher(), teacher) {
        (true, None) => return Err(Error::Config(format!("method {} needs a teacher model", config.method))),
        (false, Some(_)) => {
            return Err(Error::Config(format!("method {} does not take a teacher model", config.method)))
        }
        _ => {}
    }
    if let Some(t) = teacher {
        ensure_teacher(t)?;
        if config.method == Method::Rrm {
            check_widths(&model, t)?;
        }
    }
    if config.epochs > 0 && data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if data.input_shape() != model.descriptor().input_shape.as_slice() {
        return Err(Error::Dimension(format!(
            "dataset inputs {:?} do not match model input {:?}",
            data.input_shape(),
            model.descriptor().input_shape
        )));
    }

    let student_start = model.ledger().snapshot();
    let teacher_start = teacher.map(|t| t.ledger().snapshot());
    let mut opt = Sgd::new(config.learning_rate, config.momentum).with_weight_decay(config.weight_decay);
    let mut epoch_times = Vec::with_capacity(config.epochs);
    let mut updates = 0u64;
    let mut sweeps = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let epoch_batches = batches(data, config.batch_size, config.shuffle, rng)?;
        let nb = epoch_batches.len() as f64;
        if config.method == Method::FreeAt {
            opt.lr = lr_at(&config.schedule, config.learning_rate, epoch as f64 + 0.5, config.epochs);
            let steps = free_at_epoch(
                &mut model,
                &epoch_batches,
                &config.budget,
                config.replay_m,
                config.carry_delta,
                &mut opt,
            )?;
            updates += steps.len() as u64;
            sweeps += config.replay_m;
        } else {
            for (b, batch) in epoch_batches.iter().enumerate() {
                opt.lr = lr_at(&config.schedule, config.learning_rate, epoch as f64 + b as f64 / nb, config.epochs);
                match config.method {
                    Method::Erm => erm_step(&mut model, batch, &mut opt)?,
                    Method::Sat => sat_step(&mut model, batch, &config.budget, &mut opt, rng)?,
                    Method::FastAt => {
                        fast_at_step(&mut model, batch, &config.budget, config.fast_step_factor, &mut opt, rng)?
                    }
                    Method::Rrm => rrm_step(
                        &mut model,
                        teacher.expect("checked above"),
                        batch,
                        config.lambda,
                        config.rep_loss,
                        &mut opt,
                    )?,
                    Method::Kd => kd_step(
                        &mut model,
                        teacher.expect("checked above"),
                        batch,
                        config.alpha,
                        config.temperature,
                        config.kl_direction,
                        &mut opt,
                    )?,
                    Method::FreeAt => unreachable!(),
                };
                updates += 1;
            }
            sweeps += 1;
        }
        epoch_times.push(started.elapsed().as_secs_f64());
    }

    let teacher_time = teacher.map_or(0.0, |t| t.provenance.train_time_s);
    let mut report = RunReport::new(config.method.tag(), config.seed, epoch_times, teacher_time);
    let mut counters = model.ledger().snapshot().since(&student_start);
    if let (Some(t), Some(start)) = (teacher, teacher_start) {
        counters = counters.plus(&t.ledger().snapshot().since(&start));
    }
    report.counters = counters;
    report.updates = updates;
    report.dataset_passes = sweeps as f64;
    report.config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    model.provenance =
        Provenance { method: config.method.tag().to_string(), seed: config.seed, train_time_s: report.total_time_s };
    Ok((model, report))
}
