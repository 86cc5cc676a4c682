//! Robust dataset construction: move a random starting image until the
//! teacher's penultimate representation of it matches that of the original.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::clamp_box;
use crate::bench::Phase;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::par;
use crate::tensor::{Graph, Tensor};

/// Objective value below which an image is considered matched.
pub const CONVERGED: f64 = 1e-10;

/// Images optimised together in one batched pass.
pub const ROBUSTIFY_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustifyConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Rescale each image's gradient to unit l2 norm before stepping.
    pub normalize_gradient: bool,
    /// Clamp iterates into `[lo, hi]` after each step.
    pub clamp_box: Option<[f64; 2]>,
}

impl Default for RobustifyConfig {
    fn default() -> Self {
        Self { steps: 1000, step_size: 0.1, normalize_gradient: true, clamp_box: None }
    }
}

impl RobustifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("robustification needs at least one step".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if let Some([lo, hi]) = self.clamp_box {
            if !(lo < hi) {
                return Err(Error::Config(format!("clamp box [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RobustifyOutcome {
    pub x_r: Tensor,
    /// Per-image `||g(init) - g(x)||_2`.
    pub initial_objective: Vec<f64>,
    /// Per-image objective at the returned iterate.
    pub final_objective: Vec<f64>,
    /// Gradient steps actually taken (the loop exits once every image has converged).
    pub steps_taken: usize,
}

fn row_norms(diff: &Tensor) -> Vec<f64> {
    (0..diff.rows()).map(|i| diff.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Gradient descent on `||g(x_r) - g(x)||_2` for each image of the batch `x`,
/// starting from `init`.
pub fn robustify_image(teacher: &Model, x: &Tensor, init: &Tensor, cfg: &RobustifyConfig) -> Result<RobustifyOutcome> {
    cfg.validate()?;
    if !teacher.is_frozen() {
        return Err(Error::Contract("robustification needs a frozen teacher".into()));
    }
    if x.shape() != init.shape() {
        return Err(Error::Dimension(format!("init {:?} does not match input {:?}", init.shape(), x.shape())));
    }
    let n = x.rows();
    let target = teacher.features(x, Phase::Train)?;
    let mut x_r = init.clone();
    let mut active = vec![true; n];
    let mut initial = Vec::new();
    let mut steps_taken = 0;
    loop {
        let mut g = Graph::new();
        let xv = g.param(x_r.clone())?;
        let fp = teacher.forward(&mut g, xv, false, Phase::Train)?;
        let tv = g.constant(target.clone())?;
        let diff = g.value(fp.features).zip_map(g.value(tv), |a, b| a - b)?;
        let objective = row_norms(&diff);
        if steps_taken == 0 {
            initial = objective.clone();
        }
        for (a, o) in active.iter_mut().zip(&objective) {
            if *o < CONVERGED {
                *a = false;
            }
        }
        if steps_taken == cfg.steps || !active.iter().any(|&a| a) {
            return Ok(RobustifyOutcome { x_r, initial_objective: initial, final_objective: objective, steps_taken });
        }
        let loss = g.l2_distance(fp.features, tv)?;
        teacher.backward(&mut g, loss, Phase::Train)?;
        let grad = g.grad(xv).map_or_else(|| vec![0.0; x_r.len()], <[f64]>::to_vec);
        let w = x_r.row_len();
        for i in 0..n {
            if !active[i] {
                continue;
            }
            // The batch loss is a mean, so each row's gradient carries a 1/n factor.
            let gi: Vec<f64> = grad[i * w..(i + 1) * w].iter().map(|v| v * n as f64).collect();
            let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                active[i] = false;
                continue;
            }
            let scale = if cfg.normalize_gradient { cfg.step_size / norm } else { cfg.step_size };
            x_r.row_mut(i).iter_mut().zip(&gi).for_each(|(v, d)| *v -= scale * d);
        }
        clamp_box(&mut x_r, cfg.clamp_box);
        steps_taken += 1;
    }
}

/// Seed for image `index` under a run drawn from `base`.
fn image_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Robustifies every image of `data`, each starting from a training image
/// drawn uniformly without regard to labels. Labels and order are kept.
pub fn robustify_dataset<R: Rng + ?Sized>(
    teacher: &Model,
    data: &Dataset,
    cfg: &RobustifyConfig,
    rng: &mut R,
) -> Result<Dataset> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("cannot robustify an empty dataset".into()));
    }
    let n = data.len();
    let base: u64 = rng.random();
    let sources: Vec<usize> =
        (0..n).map(|i| ChaCha8Rng::seed_from_u64(image_seed(base, i)).random_range(0..n)).collect();
    let starts: Vec<usize> = (0..n).step_by(ROBUSTIFY_CHUNK).collect();
    let chunks = par::map(&starts, |&start| -> Result<Tensor> {
        let idx: Vec<usize> = (start..(start + ROBUSTIFY_CHUNK).min(n)).collect();
        let x = data.inputs.select_rows(&idx);
        let init = data.inputs.select_rows(&idx.iter().map(|&i| sources[i]).collect::<Vec<_>>());
        Ok(robustify_image(teacher, &x, &init, cfg)?.x_r)
    });
    let mut values = Vec::with_capacity(data.inputs.len());
    for c in chunks {
        values.extend(c?.into_data());
    }
    let inputs = Tensor::new(data.inputs.shape().to_vec(), values)?;
    let mut out = Dataset::new(inputs, data.labels.clone(), data.classes)?;
    out.meta = data.meta.clone();
    Ok(out)
}
