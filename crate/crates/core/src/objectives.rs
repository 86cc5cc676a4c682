//! Transfer losses: representation distances and temperature-scaled KL.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub use crate::tensor::COSINE_NORM_EPS;

/// Distance used to compare student and teacher representations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepLossKind {
    /// `1 - cos(u, v)`, batch mean.
    #[default]
    CosineDistance,
    /// `||u - v||_2`, batch mean.
    L2Distance,
}

/// Which distribution of the KL term acts as the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher || student)`.
    #[default]
    TeacherToStudent,
    /// `KL(student || teacher)`.
    StudentToTeacher,
}

pub fn cosine_distance_loss(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    g.cosine_distance(u, v)
}

pub fn l2_distance_loss(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    g.l2_distance(u, v)
}

pub fn representation_loss(g: &mut Graph, kind: RepLossKind, u: Var, v: Var) -> Result<Var> {
    match kind {
        RepLossKind::CosineDistance => g.cosine_distance(u, v),
        RepLossKind::L2Distance => g.l2_distance(u, v),
    }
}

/// Batch mean KL divergence between `softmax(logits / t)` distributions.
/// The `t^2` weight used in distillation is applied by the caller.
pub fn kl_temperature_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: Var,
    t: f64,
    direction: KlDirection,
) -> Result<Var> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    match direction {
        KlDirection::TeacherToStudent => g.kl_divergence(teacher_logits, student_logits, t),
        KlDirection::StudentToTeacher => g.kl_divergence(student_logits, teacher_logits, t),
    }
}

fn eval_pair(u: &Tensor, v: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(u.clone())?, g.constant(v.clone())?);
    let out = f(&mut g, a, b)?;
    Ok(g.value(out).item())
}

/// Value-only form of [`cosine_distance_loss`].
pub fn cosine_distance(u: &Tensor, v: &Tensor) -> Result<f64> {
    eval_pair(u, v, |g, a, b| g.cosine_distance(a, b))
}

/// Value-only form of [`l2_distance_loss`].
pub fn l2_distance(u: &Tensor, v: &Tensor) -> Result<f64> {
    eval_pair(u, v, |g, a, b| g.l2_distance(a, b))
}

/// Value-only form of [`kl_temperature_loss`] with teacher as target.
pub fn kl_temperature(student: &Tensor, teacher: &Tensor, t: f64) -> Result<f64> {
    eval_pair(student, teacher, |g, s, te| kl_temperature_loss(g, s, te, t, KlDirection::TeacherToStudent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_cases() {
        // The norm stabiliser leaves about 2 * eps / |u| of self-distance.
        let u = m(&[vec![1.0, 2.0, -0.5]]);
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-11);
        assert!((cosine_distance(&m(&[vec![1.0, 0.0]]), &m(&[vec![0.0, 3.0]])).unwrap() - 1.0).abs() < 1e-15);
        let v = m(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]]);
        let u = m(&[vec![1.0, 2.0, -0.5], vec![-1.0, 0.5, 2.0]]);
        let a = cosine_distance(&u, &v).unwrap();
        let b = cosine_distance(&u.map(|x| 7.3 * x), &v).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - cosine_distance(&v, &u).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_row_is_stabilised() {
        let z = cosine_distance(&m(&[vec![0.0, 0.0]]), &m(&[vec![1.0, 0.0]])).unwrap();
        assert!((z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_cases() {
        let u = m(&[vec![1.0, 2.0]]);
        assert_eq!(l2_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(l2_distance(&m(&[vec![3.0, 4.0]]), &m(&[vec![0.0, 0.0]])).unwrap(), 5.0);
        assert!(matches!(l2_distance(&u, &m(&[vec![1.0, 2.0, 3.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let params = vec![m(&[vec![0.4, -1.3, 2.2], vec![0.1, 0.5, -0.7]])];
        let target = m(&[vec![1.0, 0.0, 1.0], vec![-0.5, 0.2, 0.9]]);
        let err = finite_difference_check(
            |g, p| {
                let v = g.constant(target.clone())?;
                g.l2_distance(p[0], v)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kl_hand_value() {
        let s = m(&[vec![0.0, 0.0]]);
        let te = m(&[vec![4f64.ln(), 0.0]]);
        let expect = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let got = kl_temperature(&s, &te, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.19274).abs() < 1e-5);
    }

    #[test]
    fn kl_identical_and_high_temperature() {
        let z = m(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 0.0]]);
        assert!(kl_temperature(&z, &z, 2.5).unwrap().abs() < 1e-15);
        let other = m(&[vec![-1.0, 2.0, 0.0], vec![0.0, 3.0, 1.0]]);
        assert!(kl_temperature(&z, &other, 1e6).unwrap() < 1e-9);
    }

    #[test]
    fn kl_rejects_non_positive_temperature() {
        let z = m(&[vec![1.0, 0.0]]);
        assert!(matches!(kl_temperature(&z, &z, 0.0), Err(Error::Config(_))));
        assert!(matches!(kl_temperature(&z, &z, -1.0), Err(Error::Config(_))));
    }
}
