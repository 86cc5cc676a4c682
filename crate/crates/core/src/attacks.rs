//! First-order evasion attacks: FGSM, PGD under l-inf and l2 budgets, and
//! worst-case evaluation over random restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::Phase;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::par;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm `{other}` (expected linf or l2)"))),
        }
    }
}

/// Deserialization accepts fraction strings (`"8/255"`) for epsilon and the
/// step size, and fills in a missing step size from the norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdversaryBudget {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    /// Valid input range; `None` leaves inputs unbounded.
    #[serde(serialize_with = "serialize_box")]
    pub pixel_box: Option<[f64; 2]>,
}

fn serialize_box<S: serde::Serializer>(b: &Option<[f64; 2]>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match b {
        Some(r) => r.serialize(s),
        None => s.serialize_str("unbounded"),
    }
}

impl AdversaryBudget {
    /// Budget with the default step size, one restart and the `[0, 1]` box.
    pub fn new(norm: Norm, epsilon: f64, steps: usize) -> Self {
        Self {
            norm,
            epsilon,
            step_size: Self::default_step_size(norm, epsilon, steps),
            steps,
            restarts: 1,
            pixel_box: Some([0.0, 1.0]),
        }
    }

    /// `eps/4` for l-inf, `2 eps / steps` for l2.
    pub fn default_step_size(norm: Norm, epsilon: f64, steps: usize) -> f64 {
        match norm {
            Norm::Linf => epsilon / 4.0,
            Norm::L2 => 2.0 * epsilon / steps.max(1) as f64,
        }
    }

    /// 50 iterations, 10 restarts, eps = 8/255 under l-inf.
    pub fn cifar_linf_eval() -> Self {
        Self::new(Norm::Linf, 8.0 / 255.0, 50).with_restarts(10)
    }

    /// l2 adversary with eps = 1.0.
    pub fn cifar_l2_eval() -> Self {
        Self::new(Norm::L2, 1.0, 50).with_restarts(10)
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_box(mut self, pixel_box: Option<[f64; 2]>) -> Self {
        self.pixel_box = pixel_box;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be a non-negative real, got {}", self.epsilon)));
        }
        // A zero budget leaves nothing to step through, so its step may be zero too.
        let step_ok = if self.epsilon > 0.0 { self.step_size > 0.0 } else { self.step_size >= 0.0 };
        if !(step_ok && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if let Some([lo, hi]) = self.pixel_box {
            if !(lo < hi) {
                return Err(Error::Config(format!("pixel box [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    Random,
}

/// Result of one forward+backward probe of a classifier.
#[derive(Clone, Debug)]
pub struct Probe {
    /// Per-sample cross-entropy.
    pub losses: Vec<f64>,
    /// Gradient of the batch-mean cross-entropy wrt the input.
    pub input_grad: Tensor,
    pub predictions: Vec<usize>,
}

/// Something an attack can query.
pub trait Classifier: Sync {
    /// One forward and one backward pass, both charged to the attack phase.
    fn probe(&self, x: &Tensor, y: &[usize]) -> Result<Probe>;

    /// One forward pass returning per-sample losses and predictions.
    fn assess(&self, x: &Tensor, y: &[usize], phase: Phase) -> Result<(Vec<f64>, Vec<usize>)>;
}

/// Views a model through logits divided by `t`, as a temperature-trained
/// network is seen at its training temperature.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureScaled<'a> {
    pub model: &'a Model,
    pub t: f64,
}

fn per_sample_ce(logits: &Tensor, y: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - r[y[i]]
        })
        .collect()
}

fn probe_scaled(model: &Model, x: &Tensor, y: &[usize], t: f64) -> Result<Probe> {
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let fp = model.forward(&mut g, xv, false, Phase::Attack)?;
    let logits = if t == 1.0 { fp.logits } else { g.scale(fp.logits, 1.0 / t) };
    let loss = g.softmax_cross_entropy(logits, y)?;
    model.backward(&mut g, loss, Phase::Attack)?;
    let z = g.value(logits);
    let grad = g.grad(xv).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
    Ok(Probe {
        losses: per_sample_ce(z, y),
        predictions: z.argmax_rows(),
        input_grad: Tensor::from_parts(x.shape().to_vec(), grad),
    })
}

fn assess_scaled(model: &Model, x: &Tensor, y: &[usize], t: f64, phase: Phase) -> Result<(Vec<f64>, Vec<usize>)> {
    let z = model.logits(x, phase)?;
    let z = if t == 1.0 { z } else { z.map(|v| v / t) };
    Ok((per_sample_ce(&z, y), z.argmax_rows()))
}

impl Classifier for Model {
    fn probe(&self, x: &Tensor, y: &[usize]) -> Result<Probe> {
        probe_scaled(self, x, y, 1.0)
    }

    fn assess(&self, x: &Tensor, y: &[usize], phase: Phase) -> Result<(Vec<f64>, Vec<usize>)> {
        assess_scaled(self, x, y, 1.0, phase)
    }
}

impl Classifier for TemperatureScaled<'_> {
    fn probe(&self, x: &Tensor, y: &[usize]) -> Result<Probe> {
        probe_scaled(self.model, x, y, self.t)
    }

    fn assess(&self, x: &Tensor, y: &[usize], phase: Phase) -> Result<(Vec<f64>, Vec<usize>)> {
        assess_scaled(self.model, x, y, self.t, phase)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projects each sample's perturbation onto the budget's epsilon ball.
pub fn project(delta: &Tensor, budget: &AdversaryBudget) -> Tensor {
    let eps = budget.epsilon;
    match budget.norm {
        Norm::Linf => delta.map(|v| v.clamp(-eps, eps)),
        Norm::L2 => {
            let mut out = delta.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let n = l2(row);
                if n > eps {
                    let s = eps / n;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
            out
        }
    }
}

pub(crate) fn clamp_box(x: &mut Tensor, pixel_box: Option<[f64; 2]>) {
    if let Some([lo, hi]) = pixel_box {
        x.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// Unit ascent direction per sample: sign for l-inf, normalised gradient for l2.
pub(crate) fn ascent_direction(grad: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => grad.map(sign),
        Norm::L2 => {
            let mut out = grad.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let n = l2(row);
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                } else {
                    row.fill(0.0);
                }
            }
            out
        }
    }
}

/// Uniform sample from the epsilon ball (cube for l-inf), one per row.
pub fn random_delta<R: Rng + ?Sized>(shape: &[usize], budget: &AdversaryBudget, rng: &mut R) -> Tensor {
    let mut delta = Tensor::zeros(shape.to_vec());
    let eps = budget.epsilon;
    if eps == 0.0 {
        return delta;
    }
    match budget.norm {
        Norm::Linf => delta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-eps..=eps)),
        Norm::L2 => {
            let d = delta.row_len();
            for i in 0..delta.rows() {
                let row = delta.row_mut(i);
                row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
                let n = l2(row);
                let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v *= radius / n);
                }
            }
        }
    }
    delta
}

/// `clamp(x + delta)`, returning the point and the effective perturbation.
fn apply(x: &Tensor, delta: &Tensor, pixel_box: Option<[f64; 2]>) -> (Tensor, Tensor) {
    let mut adv = x.zip_map(delta, |a, b| a + b).expect("same shape");
    clamp_box(&mut adv, pixel_box);
    let eff = adv.zip_map(x, |a, b| a - b).expect("same shape");
    (adv, eff)
}

fn check_batch(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Dimension(format!("{} inputs with {} labels", x.rows(), y.len())));
    }
    Ok(())
}

/// Single full-budget step along the sign (l-inf) or normalised (l2) gradient.
pub fn fgsm<C: Classifier + ?Sized>(model: &C, x: &Tensor, y: &[usize], budget: &AdversaryBudget) -> Result<Tensor> {
    budget.validate()?;
    check_batch(x, y)?;
    let probe = model.probe(x, y)?;
    let dir = ascent_direction(&probe.input_grad, budget.norm);
    // Projecting the step keeps its l2 norm within eps despite rounding.
    let step = project(&dir.map(|d| budget.epsilon * d), budget);
    Ok(apply(x, &step, budget.pixel_box).0)
}

/// Projected gradient ascent on the cross-entropy; returns the last iterate.
/// Costs exactly `budget.steps` forward and backward passes.
pub fn pgd<C: Classifier + ?Sized, R: Rng + ?Sized>(
    model: &C,
    x: &Tensor,
    y: &[usize],
    budget: &AdversaryBudget,
    init: Init,
    rng: &mut R,
) -> Result<Tensor> {
    budget.validate()?;
    check_batch(x, y)?;
    if budget.steps == 0 {
        return Err(Error::Config("pgd needs at least one step".into()));
    }
    let delta0 = match init {
        Init::Zero => Tensor::zeros(x.shape().to_vec()),
        Init::Random => random_delta(x.shape(), budget, rng),
    };
    let (mut adv, mut delta) = apply(x, &delta0, budget.pixel_box);
    for _ in 0..budget.steps {
        let probe = model.probe(&adv, y)?;
        let dir = ascent_direction(&probe.input_grad, budget.norm);
        let stepped = delta.zip_map(&dir, |d, g| d + budget.step_size * g)?;
        (adv, delta) = apply(x, &project(&stepped, budget), budget.pixel_box);
    }
    Ok(adv)
}

#[derive(Clone, Debug)]
pub struct RestartOutcome {
    pub x_adv: Tensor,
    /// Whether any restart changed the sample's prediction away from its label.
    pub success: Vec<bool>,
}

/// Random-init PGD repeated `budget.restarts` times. Per sample the first
/// misclassifying restart is kept, otherwise the highest-loss one.
///
/// Restart `r` is seeded with the `r`-th `u64` drawn from `rng`, so a run
/// with `k + 1` restarts replays the first `k` restarts of a run with `k`.
pub fn multi_restart_attack<C: Classifier + ?Sized, R: Rng + ?Sized>(
    model: &C,
    x: &Tensor,
    y: &[usize],
    budget: &AdversaryBudget,
    rng: &mut R,
) -> Result<RestartOutcome> {
    budget.validate()?;
    check_batch(x, y)?;
    let seeds: Vec<u64> = (0..budget.restarts).map(|_| rng.random()).collect();
    let runs = par::map(&seeds, |&seed| -> Result<(Tensor, Vec<f64>, Vec<usize>)> {
        let adv = pgd(model, x, y, budget, Init::Random, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let (losses, preds) = model.assess(&adv, y, Phase::Attack)?;
        Ok((adv, losses, preds))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let n = x.rows();
    let mut x_adv = runs[0].0.clone();
    let mut success = vec![false; n];
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    for (adv, losses, preds) in &runs {
        for i in 0..n {
            if success[i] {
                continue;
            }
            let flipped = preds[i] != y[i];
            if flipped || losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                success[i] = flipped;
                x_adv.row_mut(i).copy_from_slice(adv.row(i));
            }
        }
    }
    Ok(RestartOutcome { x_adv, success })
}
