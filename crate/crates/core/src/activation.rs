//! Activation functions, normalized to unit Gaussian second moment.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::OnceLock;

use crate::quadrature::{NormalRule, DEFAULT_ORDER};

/// Tolerance on `E σ(X)² = 1` for an activation to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Identity,
    /// The Gauss error function, a smooth sigmoid.
    Erf,
    Tanh,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Identity,
        ActivationKind::Erf,
        ActivationKind::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Identity => "identity",
            ActivationKind::Erf => "erf",
            ActivationKind::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn raw(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Identity => x,
            ActivationKind::Erf => libm::erf(x),
            ActivationKind::Tanh => x.tanh(),
        }
    }

    // ReLU'(0) is taken to be 0.
    fn raw_d1(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => 1.0,
            ActivationKind::Erf => 2.0 / PI.sqrt() * (-x * x).exp(),
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    fn raw_d2(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu | ActivationKind::Identity => 0.0,
            ActivationKind::Erf => -4.0 * x / PI.sqrt() * (-x * x).exp(),
            ActivationKind::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// Points where the activation is not smooth.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            ActivationKind::Relu => &[0.0],
            _ => &[],
        }
    }

    /// Scale making `E (scale·σ(X))² = 1`. Known analytically for ReLU and
    /// the identity, computed once by 64-node quadrature otherwise.
    pub fn normalization_scale(self) -> f64 {
        match self {
            ActivationKind::Relu => return RELU_SCALE,
            ActivationKind::Identity => return 1.0,
            _ => {}
        }
        self.quadrature_scale()
    }

    /// Normalization scale by 64-node quadrature, for every kind.
    pub fn quadrature_scale(self) -> f64 {
        static SCALES: [OnceLock<f64>; 4] = [
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
        ];
        let idx = Self::ALL.iter().position(|k| *k == self).unwrap();
        *SCALES[idx].get_or_init(|| {
            let rule = if self.kinks().is_empty() {
                NormalRule::gauss_hermite(DEFAULT_ORDER)
            } else {
                NormalRule::split_legendre(DEFAULT_ORDER, self.kinks())
            };
            let second_moment = rule.expect(|x| self.raw(x).powi(2));
            1.0 / second_moment.sqrt()
        })
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An activation `x ↦ scale · raw(x)` with its regularity constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationSpec {
    kind: ActivationKind,
    scale: f64,
    /// Bound on `|σ|`, `|σ′|`, `|σ″|`, when all three are bounded.
    c_bounded: Option<f64>,
    /// Smallest `C` with σ `C`-Lipschitz and `|σ(0)| ≤ C`.
    c_lipschitz: f64,
}

impl ActivationSpec {
    /// The normalized activation of the given kind.
    pub fn new(kind: ActivationKind) -> Self {
        Self::with_scale(kind, kind.normalization_scale())
    }

    /// An activation with an explicit, possibly non-normalizing, scale.
    pub fn with_scale(kind: ActivationKind, scale: f64) -> Self {
        let s = scale.abs();
        let (c_bounded, c_lipschitz) = match kind {
            ActivationKind::Relu => (None, s),
            ActivationKind::Identity => (None, s),
            // sup|erf′| = 2/√π dominates both sup|erf| = 1 and sup|erf″| = 2√2/√(πe).
            ActivationKind::Erf => (Some(s * 2.0 / PI.sqrt()), s * 2.0 / PI.sqrt()),
            // sup|tanh| = sup|tanh′| = 1 > sup|tanh″| = 4/(3√3).
            ActivationKind::Tanh => (Some(s), s),
        };
        Self {
            kind,
            scale,
            c_bounded,
            c_lipschitz,
        }
    }

    pub fn relu() -> Self {
        Self::new(ActivationKind::Relu)
    }

    pub fn identity() -> Self {
        Self::new(ActivationKind::Identity)
    }

    pub fn erf() -> Self {
        Self::new(ActivationKind::Erf)
    }

    pub fn tanh() -> Self {
        Self::new(ActivationKind::Tanh)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ActivationKind::from_name(name).map(Self::new)
    }

    /// Every normalized activation understood by the skeleton file format.
    pub fn registered() -> Vec<Self> {
        ActivationKind::ALL.into_iter().map(Self::new).collect()
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn c_bounded(&self) -> Option<f64> {
        self.c_bounded
    }

    pub fn c_lipschitz(&self) -> f64 {
        self.c_lipschitz
    }

    pub fn kinks(&self) -> &'static [f64] {
        self.kind.kinks()
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.scale * self.kind.raw(x)
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.scale * self.kind.raw_d1(x)
    }

    #[inline]
    pub fn second_derivative(&self, x: f64) -> f64 {
        self.scale * self.kind.raw_d2(x)
    }

    /// `E σ(X)²` for `X ~ N(0, 1)`.
    pub fn second_moment(&self) -> f64 {
        let k = self.kind.normalization_scale();
        (self.scale / k).powi(2)
    }

    pub fn is_normalized(&self) -> bool {
        (self.second_moment() - 1.0).abs() <= NORMALIZATION_TOL
    }
}

/// `√2`, the analytic ReLU normalization (`E max(0, X)² = 1/2`).
pub const RELU_SCALE: f64 = SQRT_2;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn relu_scale_matches_analytic_value() {
        assert_eq!(ActivationKind::Relu.normalization_scale(), RELU_SCALE);
        assert_abs_diff_eq!(ActivationKind::Relu.quadrature_scale(), RELU_SCALE, epsilon = 1e-12);
        assert_abs_diff_eq!(ActivationKind::Identity.quadrature_scale(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn erf_scale_matches_arcsine_formula() {
        // E erf(X)² = (2/π) arcsin(2/3)
        let m = 2.0 / PI * (2.0f64 / 3.0).asin();
        assert_abs_diff_eq!(ActivationKind::Erf.normalization_scale(), 1.0 / m.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn registered_activations_have_unit_second_moment() {
        for act in ActivationSpec::registered() {
            let rule = if act.kinks().is_empty() {
                NormalRule::gauss_hermite(crate::quadrature::VERIFY_ORDER)
            } else {
                NormalRule::split_legendre(crate::quadrature::VERIFY_ORDER, act.kinks())
            };
            let m2 = rule.expect(|x| act.eval(x).powi(2));
            assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-6);
            assert!(act.is_normalized());
        }
    }

    #[test]
    fn unnormalized_scale_is_detected() {
        let act = ActivationSpec::with_scale(ActivationKind::Relu, 1.0);
        assert!(!act.is_normalized());
        assert_abs_diff_eq!(act.second_moment(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let relu = ActivationSpec::relu();
        assert_eq!(relu.derivative(0.0), 0.0);
        assert_eq!(relu.derivative(1e-9), SQRT_2);
        assert!(relu.c_bounded().is_none());
        assert_abs_diff_eq!(relu.c_lipschitz(), SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn smooth_bounds_hold_on_a_grid() {
        for act in [ActivationSpec::erf(), ActivationSpec::tanh()] {
            let c = act.c_bounded().unwrap();
            for i in -4000..=4000 {
                let x = i as f64 * 2e-3;
                assert!(act.eval(x).abs() <= c + 1e-12);
                assert!(act.derivative(x).abs() <= c + 1e-12);
                assert!(act.second_derivative(x).abs() <= c + 1e-12);
                assert!(act.derivative(x).abs() <= act.c_lipschitz() + 1e-12);
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for k in ActivationKind::ALL {
            assert_eq!(ActivationKind::from_name(k.name()), Some(k));
        }
        assert!(ActivationSpec::from_name("sigmoid").is_none());
    }
}
