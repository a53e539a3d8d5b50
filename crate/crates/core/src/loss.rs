//! Supervised losses `ℓ(ŷ, y)` with their (sub)gradients in `ŷ`.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// A class in `0..k`.
    Class(usize),
    /// A real target (square loss) or a sign `±1` (hinge loss).
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `(ŷ − y)²`, one output.
    Square,
    /// `max(0, 1 − yŷ)`, one output, `y = ±1`.
    Hinge,
    /// `−log softmax(ŷ)_y`.
    Logistic,
    /// `1[ŷ_y ≤ max_{y′≠y} ŷ_{y′}]`.
    ZeroOne,
    /// `1[ŷ_y ≤ γ + max_{y′≠y} ŷ_{y′}]`.
    Margin(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for k = {k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("{loss} loss cannot take target {target:?} with k = {k}")]
    WrongTarget { loss: &'static str, target: Target, k: usize },
    #[error("{0} loss has no gradient")]
    NotDifferentiable(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self { kind }
    }

    pub fn square() -> Self {
        Self::new(LossKind::Square)
    }

    pub fn hinge() -> Self {
        Self::new(LossKind::Hinge)
    }

    pub fn logistic() -> Self {
        Self::new(LossKind::Logistic)
    }

    pub fn zero_one() -> Self {
        Self::new(LossKind::ZeroOne)
    }

    pub fn margin(gamma: f64) -> Self {
        Self::new(LossKind::Margin(gamma))
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LossKind::Square => "square",
            LossKind::Hinge => "hinge",
            LossKind::Logistic => "logistic",
            LossKind::ZeroOne => "zero-one",
            LossKind::Margin(_) => "margin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "square" => Self::square(),
            "hinge" => Self::hinge(),
            "logistic" => Self::logistic(),
            "zero-one" => Self::zero_one(),
            _ => {
                let gamma = name.strip_prefix("margin:")?.parse().ok()?;
                Self::margin(gamma)
            }
        })
    }

    /// Lipschitz constant in `ŷ` (Euclidean norm), where one exists.
    pub fn lipschitz(&self) -> Option<f64> {
        match self.kind {
            LossKind::Logistic => Some(std::f64::consts::SQRT_2),
            LossKind::Hinge => Some(1.0),
            _ => None,
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.kind, LossKind::Square | LossKind::Hinge | LossKind::Logistic)
    }

    pub fn is_differentiable(&self) -> bool {
        self.is_convex()
    }

    fn check(&self, k: usize, y: &Target) -> Result<(), LossError> {
        let wrong = || LossError::WrongTarget {
            loss: self.name(),
            target: *y,
            k,
        };
        match (self.kind, y) {
            (LossKind::Square, Target::Value(_)) if k == 1 => Ok(()),
            (LossKind::Hinge, Target::Value(v)) if k == 1 && v.abs() == 1.0 => Ok(()),
            (LossKind::Logistic | LossKind::ZeroOne | LossKind::Margin(_), Target::Class(c)) => {
                if *c < k {
                    Ok(())
                } else {
                    Err(LossError::LabelOutOfRange { label: *c, k })
                }
            }
            (LossKind::ZeroOne | LossKind::Margin(_), Target::Value(v)) if k == 1 && v.abs() == 1.0 => Ok(()),
            _ => Err(wrong()),
        }
    }

    pub fn eval(&self, yhat: &[f64], y: &Target) -> Result<f64, LossError> {
        self.check(yhat.len(), y)?;
        Ok(match (self.kind, *y) {
            (LossKind::Square, Target::Value(t)) => (yhat[0] - t).powi(2),
            (LossKind::Hinge, Target::Value(t)) => (1.0 - t * yhat[0]).max(0.0),
            (LossKind::Logistic, Target::Class(c)) => log_sum_exp(yhat) - yhat[c],
            (LossKind::ZeroOne, _) => margin_indicator(yhat, y, 0.0),
            (LossKind::Margin(g), _) => margin_indicator(yhat, y, g),
            _ => unreachable!("checked above"),
        })
    }

    /// Gradient in `ŷ`. The hinge kink gets subgradient 0.
    pub fn grad(&self, yhat: &[f64], y: &Target) -> Result<Vec<f64>, LossError> {
        self.check(yhat.len(), y)?;
        match (self.kind, *y) {
            (LossKind::Square, Target::Value(t)) => Ok(vec![2.0 * (yhat[0] - t)]),
            (LossKind::Hinge, Target::Value(t)) => Ok(vec![if t * yhat[0] < 1.0 { -t } else { 0.0 }]),
            (LossKind::Logistic, Target::Class(c)) => {
                let mut p = softmax(yhat);
                p[c] -= 1.0;
                Ok(p)
            }
            _ => Err(LossError::NotDifferentiable(self.name())),
        }
    }
}

fn margin_indicator(yhat: &[f64], y: &Target, gamma: f64) -> f64 {
    let hit = match *y {
        Target::Class(c) => {
            let rival = yhat
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != c)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            yhat[c] <= gamma + rival
        }
        Target::Value(t) => t * yhat[0] <= gamma,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Hessian of the logistic loss in `ŷ`: `diag(p) − p pᵀ`.
pub fn logistic_hessian(yhat: &[f64]) -> DMatrix<f64> {
    let p = softmax(yhat);
    let k = p.len();
    DMatrix::from_fn(k, k, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn logistic_at_zero_is_log_k() {
        let l = LossSpec::logistic();
        for k in [1, 2, 5] {
            let y = Target::Class(k - 1);
            assert_abs_diff_eq!(l.eval(&vec![0.0; k], &y).unwrap(), (k as f64).ln(), epsilon = 1e-15);
            let g = l.grad(&vec![0.0; k], &y).unwrap();
            for (i, gi) in g.iter().enumerate() {
                let expected = 1.0 / k as f64 - if i == k - 1 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(*gi, expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn logistic_gradient_and_hessian_bounds() {
        let l = LossSpec::logistic();
        let mut g = rng::stream(4, 0);
        for _ in 0..10_000 {
            let k = g.random_range(2..12);
            let scale = 10f64.powf(g.random_range(-1.0..2.0));
            let yhat: Vec<f64> = (0..k).map(|_| scale * g.sample::<f64, _>(StandardNormal)).collect();
            let y = Target::Class(g.random_range(0..k));
            let grad = l.grad(&yhat, &y).unwrap();
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= std::f64::consts::SQRT_2 + 1e-12);
            assert!(spectral_norm(&logistic_hessian(&yhat)).unwrap() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn logistic_is_stable_for_large_scores() {
        let l = LossSpec::logistic();
        let v = l.eval(&[1000.0, -1000.0], &Target::Class(1)).unwrap();
        assert_abs_diff_eq!(v, 2000.0, epsilon = 1e-9);
    }

    #[test]
    fn square_loss() {
        let l = LossSpec::square();
        assert_eq!(l.eval(&[3.0], &Target::Value(1.0)).unwrap(), 4.0);
        assert_eq!(l.grad(&[3.0], &Target::Value(1.0)).unwrap(), vec![4.0]);
        assert!(l.lipschitz().is_none());
    }

    #[test]
    fn hinge_subgradient_at_kink_is_zero() {
        let l = LossSpec::hinge();
        assert_eq!(l.grad(&[1.0], &Target::Value(1.0)).unwrap(), vec![0.0]);
        assert_eq!(l.grad(&[0.5], &Target::Value(1.0)).unwrap(), vec![-1.0]);
        assert_eq!(l.eval(&[-0.5], &Target::Value(-1.0)).unwrap(), 0.5);
        assert!(l.eval(&[0.0], &Target::Value(0.3)).is_err());
    }

    #[test]
    fn margin_and_zero_one() {
        let m = LossSpec::margin(1.0);
        assert_eq!(m.eval(&[2.0, 1.5], &Target::Class(0)).unwrap(), 1.0);
        assert_eq!(m.eval(&[3.0, 1.5], &Target::Class(0)).unwrap(), 0.0);
        let z = LossSpec::zero_one();
        assert_eq!(z.eval(&[2.0, 1.5], &Target::Class(0)).unwrap(), 0.0);
        assert_eq!(z.eval(&[1.5, 1.5], &Target::Class(0)).unwrap(), 1.0);
        assert_eq!(z.eval(&[0.2], &Target::Value(-1.0)).unwrap(), 1.0);
        assert!(matches!(z.grad(&[0.2, 0.1], &Target::Class(0)), Err(LossError::NotDifferentiable(_))));
    }

    #[test]
    fn labels_are_checked() {
        let l = LossSpec::logistic();
        assert_eq!(
            l.eval(&[0.0, 0.0], &Target::Class(2)),
            Err(LossError::LabelOutOfRange { label: 2, k: 2 })
        );
        assert!(l.eval(&[0.0], &Target::Value(1.0)).is_err());
        assert!(LossSpec::square().eval(&[0.0, 1.0], &Target::Value(1.0)).is_err());
    }

    #[test]
    fn names_round_trip() {
        for l in [LossSpec::square(), LossSpec::hinge(), LossSpec::logistic(), LossSpec::zero_one()] {
            assert_eq!(LossSpec::from_name(l.name()), Some(l));
        }
        assert_eq!(LossSpec::from_name("margin:0.5"), Some(LossSpec::margin(0.5)));
        assert_eq!(LossSpec::from_name("cross"), None);
    }

    proptest! {
        #[test]
        fn logistic_gradient_matches_differences(v in proptest::collection::vec(-5.0f64..5.0, 2..6), c in 0usize..6) {
            let k = v.len();
            let y = Target::Class(c % k);
            let l = LossSpec::logistic();
            let g = l.grad(&v, &y).unwrap();
            let h = 1e-6;
            for i in 0..k {
                let mut up = v.clone();
                up[i] += h;
                let mut dn = v.clone();
                dn[i] -= h;
                let fd = (l.eval(&up, &y).unwrap() - l.eval(&dn, &y).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-7);
            }
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
