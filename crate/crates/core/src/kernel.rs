//! Conjugate activations, the compositional kernel of a skeleton, Gram
//! matrices and finite-support kernel-space functions.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::activation::{ActivationKind, ActivationSpec};
use crate::input::{InputError, SphereInput};
use crate::quadrature::{bivariate_expectation, NormalRule, DEFAULT_ORDER, VERIFY_ORDER};
use crate::skeleton::{NodeKind, Skeleton};

/// Largest disagreement tolerated between the default and verification
/// quadrature orders.
pub const QUADRATURE_TOL: f64 = 1e-6;

/// Default truncation of the Hermite-series mode.
pub const HERMITE_SERIES_ORDER: usize = 30;

/// Negative squared norms down to this value are rounding noise.
pub const NEGATIVE_RADICAND_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("activation `{0}` is not normalized")]
    NotNormalized(&'static str),
    #[error("no closed form for the conjugate of `{0}`")]
    NoClosedForm(&'static str),
    #[error("quadrature did not converge at rho={rho}: orders disagree by {diff:e}")]
    QuadratureNotConverged { rho: f64, diff: f64 },
    #[error("beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("Gram matrix needs at least one center")]
    NoCenters,
    #[error("coefficient has length {got}, expected {expected}")]
    CoefficientLength { expected: usize, got: usize },
    #[error("squared RKHS norm is {0:e} < 0")]
    NegativeNormSquared(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConjugateMode {
    ClosedForm,
    /// Bivariate quadrature, checked against a higher-order rule.
    Quadrature,
    /// `Σ_j a_j² ρ^j` over normalized Hermite coefficients `a_j`, `j ≤ order`.
    HermiteSeries(usize),
}

/// `σ̂(ρ) = E σ(X)σ(Y)` for standard normals `X, Y` with correlation `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateActivation {
    act: ActivationSpec,
    mode: ConjugateMode,
    hermite: Vec<f64>,
}

impl ConjugateActivation {
    pub fn new(act: ActivationSpec, mode: ConjugateMode) -> Result<Self, KernelError> {
        if !act.is_normalized() {
            return Err(KernelError::NotNormalized(act.name()));
        }
        let hermite = match mode {
            ConjugateMode::ClosedForm => {
                if !has_closed_form(act.kind()) {
                    return Err(KernelError::NoClosedForm(act.name()));
                }
                Vec::new()
            }
            ConjugateMode::Quadrature => Vec::new(),
            ConjugateMode::HermiteSeries(order) => hermite_coefficients(&act, order),
        };
        Ok(Self { act, mode, hermite })
    }

    /// Closed form where one is known, quadrature otherwise.
    pub fn preferred(act: ActivationSpec) -> Result<Self, KernelError> {
        let mode = if has_closed_form(act.kind()) {
            ConjugateMode::ClosedForm
        } else {
            ConjugateMode::Quadrature
        };
        Self::new(act, mode)
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.act
    }

    pub fn mode(&self) -> ConjugateMode {
        self.mode
    }

    /// `σ̂(ρ)`, with `ρ` clamped to `[−1, 1]`.
    pub fn eval(&self, rho: f64) -> Result<f64, KernelError> {
        let rho = rho.clamp(-1.0, 1.0);
        match self.mode {
            ConjugateMode::ClosedForm => Ok(closed_form(&self.act, rho)),
            ConjugateMode::Quadrature => {
                let f = |x: f64| self.act.eval(x);
                let kinks = self.act.kinks();
                let lo = bivariate_expectation(DEFAULT_ORDER, kinks, rho, f, f);
                let hi = bivariate_expectation(VERIFY_ORDER, kinks, rho, f, f);
                let diff = (lo - hi).abs();
                if diff > QUADRATURE_TOL {
                    return Err(KernelError::QuadratureNotConverged { rho, diff });
                }
                Ok(hi)
            }
            ConjugateMode::HermiteSeries(_) => {
                Ok(self.hermite.iter().rev().fold(0.0, |acc, a| acc * rho + a * a))
            }
        }
    }
}

fn has_closed_form(kind: ActivationKind) -> bool {
    matches!(
        kind,
        ActivationKind::Relu | ActivationKind::Identity | ActivationKind::Erf
    )
}

// Written as second moment times the normalized conjugate so that σ̂(1) is
// exactly 1 for normalized activations.
fn closed_form(act: &ActivationSpec, rho: f64) -> f64 {
    let m2 = act.second_moment();
    match act.kind() {
        // E max(0,X)max(0,Y) = (√(1−ρ²) + ρ(π − arccos ρ)) / 2π
        ActivationKind::Relu => m2 * ((1.0 - rho * rho).max(0.0).sqrt() + rho * (PI - rho.acos())) / PI,
        ActivationKind::Identity => m2 * rho,
        // E erf(X)erf(Y) = (2/π) arcsin(2ρ/3)
        ActivationKind::Erf => m2 * (2.0 * rho / 3.0).asin() / (2.0f64 / 3.0).asin(),
        ActivationKind::Tanh => unreachable!("tanh has no closed-form conjugate"),
    }
}

/// `a_j = E σ(X) h_j(X)` for the orthonormal Hermite polynomials `h_j`.
fn hermite_coefficients(act: &ActivationSpec, order: usize) -> Vec<f64> {
    let rule = if act.kinks().is_empty() {
        NormalRule::gauss_hermite(VERIFY_ORDER)
    } else {
        NormalRule::split_legendre(VERIFY_ORDER, act.kinks())
    };
    let mut coef = vec![0.0; order + 1];
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        let fx = w * act.eval(x);
        let (mut prev, mut cur) = (0.0, 1.0);
        for (j, c) in coef.iter_mut().enumerate() {
            *c += fx * cur;
            let jf = j as f64;
            let next = (x * cur - jf.sqrt() * prev) / (jf + 1.0).sqrt();
            prev = cur;
            cur = next;
        }
    }
    coef
}

/// The compositional kernel `κ^β_S`.
#[derive(Debug, Clone)]
pub struct CompositionalKernel {
    skeleton: Skeleton,
    beta: f64,
    d: usize,
    conjugates: Vec<Option<ConjugateActivation>>,
}

impl CompositionalKernel {
    /// Kernel on inputs with blocks in `ℝ^d`, using the preferred evaluation
    /// mode of each activation.
    pub fn new(skeleton: &Skeleton, beta: f64, d: usize) -> Result<Self, KernelError> {
        Self::with_mode(skeleton, beta, d, None)
    }

    /// As [`CompositionalKernel::new`], forcing `mode` for every node.
    pub fn with_mode(
        skeleton: &Skeleton,
        beta: f64,
        d: usize,
        mode: Option<ConjugateMode>,
    ) -> Result<Self, KernelError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(KernelError::BetaOutOfRange(beta));
        }
        let conjugates = skeleton
            .nodes()
            .iter()
            .map(|node| {
                node.activation()
                    .map(|act| match mode {
                        Some(m) => ConjugateActivation::new(*act, m),
                        None => ConjugateActivation::preferred(*act),
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            skeleton: skeleton.clone(),
            beta,
            d,
            conjugates,
        })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `κ(x, y)`, evaluated node by node in topological order.
    pub fn eval(&self, x: &SphereInput, y: &SphereInput) -> Result<f64, KernelError> {
        let n = self.skeleton.n_inputs();
        x.check_shape(n, self.d)?;
        y.check_shape(n, self.d)?;
        let mut values = vec![0.0; self.skeleton.len()];
        for (v, node) in self.skeleton.nodes().iter().enumerate() {
            values[v] = match &node.kind {
                NodeKind::Input { block } => x.block_dot(y, *block),
                NodeKind::Internal { parents, .. } => {
                    let mean = parents.iter().map(|&p| values[p]).sum::<f64>() / parents.len() as f64;
                    let conj = self.conjugates[v].as_ref().expect("internal node has a conjugate");
                    conj.eval((1.0 - self.beta) * mean + self.beta)?
                }
            };
        }
        Ok(values[self.skeleton.output()])
    }

    pub fn gram(&self, centers: &[SphereInput]) -> Result<GramMatrix, KernelError> {
        if centers.is_empty() {
            return Err(KernelError::NoCenters);
        }
        let m = centers.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = self.eval(&centers[i], &centers[j])?;
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(GramMatrix {
            matrix: g,
            centers: centers.to_vec(),
        })
    }
}

/// `Γ_{ij} = κ(x_i, x_j)` over a list of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    centers: Vec<SphereInput>,
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn centers(&self) -> &[SphereInput] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -NEGATIVE_RADICAND_TOL
    }

    /// Rows as comma-separated text.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.matrix.nrows() {
            let row: Vec<String> = (0..self.matrix.ncols())
                .map(|j| format!("{:?}", self.matrix[(i, j)]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// `√max(0, q)`, treating small negative `q` as rounding noise.
pub fn clamped_sqrt(q: f64) -> Result<f64, KernelError> {
    if q < -NEGATIVE_RADICAND_TOL {
        return Err(KernelError::NegativeNormSquared(q));
    }
    Ok(q.max(0.0).sqrt())
}

/// `f = Σᵢ aᵢ κ^{xᵢ}` with `aᵢ ∈ ℝ^k`.
#[derive(Debug, Clone)]
pub struct KernelFunction {
    kernel: CompositionalKernel,
    k: usize,
    centers: Vec<SphereInput>,
    coefficients: Vec<Vec<f64>>,
}

impl KernelFunction {
    pub fn zero(kernel: CompositionalKernel, k: usize) -> Self {
        Self {
            kernel,
            k,
            centers: Vec::new(),
            coefficients: Vec::new(),
        }
    }

    pub fn push(&mut self, center: SphereInput, coefficient: Vec<f64>) -> Result<(), KernelError> {
        if coefficient.len() != self.k {
            return Err(KernelError::CoefficientLength {
                expected: self.k,
                got: coefficient.len(),
            });
        }
        center.check_shape(self.kernel.skeleton().n_inputs(), self.kernel.d())?;
        self.centers.push(center);
        self.coefficients.push(coefficient);
        Ok(())
    }

    pub fn kernel(&self) -> &CompositionalKernel {
        &self.kernel
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centers(&self) -> &[SphereInput] {
        &self.centers
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    pub fn support_len(&self) -> usize {
        self.centers.len()
    }

    /// Multiplies every coefficient by `c`.
    pub fn scale(&mut self, c: f64) {
        for a in &mut self.coefficients {
            a.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// `Σᵢ aᵢ κ(xᵢ, x)`.
    pub fn eval(&self, x: &SphereInput) -> Result<Vec<f64>, KernelError> {
        let mut out = vec![0.0; self.k];
        for (c, a) in self.centers.iter().zip(&self.coefficients) {
            let kv = self.kernel.eval(c, x)?;
            for (o, ai) in out.iter_mut().zip(a) {
                *o += ai * kv;
            }
        }
        Ok(out)
    }

    /// `Σ_{ij} ⟨aᵢ, aⱼ⟩ Γ_{ij}` for a Gram matrix over this function's centers.
    pub fn norm_squared_with(&self, gram: &DMatrix<f64>) -> f64 {
        let m = self.centers.len();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = self.coefficients[i]
                    .iter()
                    .zip(&self.coefficients[j])
                    .map(|(a, b)| a * b)
                    .sum();
                total += dot * gram[(i, j)];
            }
        }
        total
    }

    /// RKHS norm `√(Σ_{ij} ⟨aᵢ, aⱼ⟩ κ(xᵢ, xⱼ))`.
    pub fn norm(&self) -> Result<f64, KernelError> {
        if self.centers.is_empty() {
            return Ok(0.0);
        }
        let gram = self.kernel.gram(&self.centers)?;
        clamped_sqrt(self.norm_squared_with(gram.matrix()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::skeleton::SkeletonSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn depth1(n: usize, act: ActivationSpec) -> Skeleton {
        let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        let mut spec = SkeletonSpec::new();
        for name in &names {
            spec = spec.input(name.clone());
        }
        spec.node("h", act, &names).output("h").validate().unwrap()
    }

    #[test]
    fn identity_conjugate_is_rho() {
        let c = ConjugateActivation::preferred(ActivationSpec::identity()).unwrap();
        assert_abs_diff_eq!(c.eval(0.37).unwrap(), 0.37, epsilon = 1e-15);
        let q = ConjugateActivation::new(ActivationSpec::identity(), ConjugateMode::Quadrature).unwrap();
        assert_abs_diff_eq!(q.eval(0.37).unwrap(), 0.37, epsilon = 1e-12);
    }

    #[test]
    fn relu_conjugate_special_values() {
        let c = ConjugateActivation::preferred(ActivationSpec::relu()).unwrap();
        assert_abs_diff_eq!(c.eval(1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.eval(0.0).unwrap(), 1.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(c.eval(-1.0).unwrap(), 0.0, epsilon = 1e-15);
        // Clamped just outside the domain.
        assert_abs_diff_eq!(c.eval(1.0 + 1e-12).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn relu_at_zero_matches_monte_carlo() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let relu = ActivationSpec::relu();
        let mut g = rng::stream(3, 0);
        let m = 400_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let x: f64 = g.sample(StandardNormal);
            let y: f64 = g.sample(StandardNormal);
            acc += relu.eval(x) * relu.eval(y);
        }
        // Standard error is about 1.5e-3.
        assert_abs_diff_eq!(acc / m as f64, 1.0 / PI, epsilon = 6e-3);
    }

    #[test]
    fn erf_closed_form_matches_quadrature() {
        let closed = ConjugateActivation::preferred(ActivationSpec::erf()).unwrap();
        let quad = ConjugateActivation::new(ActivationSpec::erf(), ConjugateMode::Quadrature).unwrap();
        for i in 0..=20 {
            let rho = -1.0 + 0.1 * i as f64;
            assert_abs_diff_eq!(closed.eval(rho).unwrap(), quad.eval(rho).unwrap(), epsilon = 1e-9);
        }
    }

    #[test]
    fn tanh_has_no_closed_form() {
        assert_eq!(
            ConjugateActivation::new(ActivationSpec::tanh(), ConjugateMode::ClosedForm),
            Err(KernelError::NoClosedForm("tanh"))
        );
        let q = ConjugateActivation::preferred(ActivationSpec::tanh()).unwrap();
        assert_eq!(q.mode(), ConjugateMode::Quadrature);
        assert_abs_diff_eq!(q.eval(1.0).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn unnormalized_activation_rejected() {
        let raw = ActivationSpec::with_scale(ActivationKind::Relu, 1.0);
        assert_eq!(
            ConjugateActivation::preferred(raw),
            Err(KernelError::NotNormalized("relu"))
        );
    }

    #[test]
    fn hermite_series_tracks_quadrature() {
        // Exact at 0; the truncated tail is largest near |ρ| = 1 for ReLU.
        let series =
            ConjugateActivation::new(ActivationSpec::relu(), ConjugateMode::HermiteSeries(HERMITE_SERIES_ORDER))
                .unwrap();
        let closed = ConjugateActivation::preferred(ActivationSpec::relu()).unwrap();
        assert_abs_diff_eq!(series.eval(0.0).unwrap(), 1.0 / PI, epsilon = 1e-12);
        for rho in [-0.5, 0.3, 0.7] {
            assert_abs_diff_eq!(series.eval(rho).unwrap(), closed.eval(rho).unwrap(), epsilon = 1e-4);
        }
        assert!((series.eval(1.0).unwrap() - 1.0).abs() < 5e-3);
        let tanh = ConjugateActivation::new(ActivationSpec::tanh(), ConjugateMode::HermiteSeries(30)).unwrap();
        let q = ConjugateActivation::preferred(ActivationSpec::tanh()).unwrap();
        assert_abs_diff_eq!(tanh.eval(0.5).unwrap(), q.eval(0.5).unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn relu_conjugate_is_monotone_on_unit_interval() {
        let c = ConjugateActivation::preferred(ActivationSpec::relu()).unwrap();
        let mut prev = c.eval(0.0).unwrap();
        for i in 1..=1000 {
            let v = c.eval(i as f64 / 1000.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn orthogonal_blocks_give_relu_conjugate_at_zero() {
        let s = depth1(2, ActivationSpec::relu());
        let kern = CompositionalKernel::new(&s, 0.0, 2).unwrap();
        let x = SphereInput::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = SphereInput::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let quad = ConjugateActivation::new(ActivationSpec::relu(), ConjugateMode::Quadrature).unwrap();
        assert_abs_diff_eq!(kern.eval(&x, &y).unwrap(), quad.eval(0.0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn identity_depth_two_matches_nested_averages() {
        let id = ActivationSpec::identity();
        let s = SkeletonSpec::new()
            .input("x1")
            .input("x2")
            .input("x3")
            .node("a", id, &["x1", "x2"])
            .node("b", id, &["x2", "x3", "x1"])
            .node("o", id, &["a", "b", "x3"])
            .output("o")
            .validate()
            .unwrap();
        let kern = CompositionalKernel::new(&s, 0.0, 4).unwrap();
        let mut g = rng::stream(11, 0);
        for _ in 0..5 {
            let x = SphereInput::sample(3, 4, &mut g);
            let y = SphereInput::sample(3, 4, &mut g);
            let dot = |i: usize| -> f64 { x.block(i).iter().zip(y.block(i)).map(|(p, q)| p * q).sum() };
            let a = (dot(0) + dot(1)) / 2.0;
            let b = (dot(1) + dot(2) + dot(0)) / 3.0;
            let expected = (a + b + dot(2)) / 3.0;
            assert_abs_diff_eq!(kern.eval(&x, &y).unwrap(), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn kernel_rejects_bad_inputs() {
        let s = depth1(2, ActivationSpec::relu());
        let kern = CompositionalKernel::new(&s, 0.0, 3).unwrap();
        let x = SphereInput::sample(1, 3, &mut rng::stream(1, 0));
        let y = SphereInput::sample(2, 3, &mut rng::stream(1, 1));
        assert!(matches!(kern.eval(&x, &y), Err(KernelError::Input(InputError::Shape { .. }))));
        assert!(matches!(
            CompositionalKernel::new(&s, 1.5, 3),
            Err(KernelError::BetaOutOfRange(_))
        ));
    }

    #[test]
    fn gram_small_cases() {
        let s = depth1(1, ActivationSpec::relu());
        let kern = CompositionalKernel::new(&s, 0.0, 3).unwrap();
        let x = SphereInput::sample(1, 3, &mut rng::stream(2, 0));
        let g1 = kern.gram(std::slice::from_ref(&x)).unwrap();
        assert_abs_diff_eq!(g1.matrix()[(0, 0)], 1.0, epsilon = 1e-14);
        let g2 = kern.gram(&[x.clone(), x]).unwrap();
        assert!((g2.matrix() - DMatrix::from_element(2, 2, 1.0)).amax() < 1e-14);
        assert_abs_diff_eq!(g2.min_eigenvalue(), 0.0, epsilon = 1e-12);
        assert_eq!(kern.gram(&[]), Err(KernelError::NoCenters));
    }

    #[test]
    fn gram_of_depth_two_relu_is_psd() {
        let s = crate::skeleton::layered(4, &[3], ActivationSpec::relu());
        let kern = CompositionalKernel::new(&s, 0.1, 5).unwrap();
        let mut g = rng::stream(5, 0);
        let centers: Vec<_> = (0..8).map(|_| SphereInput::sample(4, 5, &mut g)).collect();
        let gram = kern.gram(&centers).unwrap();
        assert!(gram.min_eigenvalue() >= -1e-8);
        assert!(gram.is_psd());
        for i in 0..8 {
            assert_abs_diff_eq!(gram.matrix()[(i, i)], 1.0, epsilon = 1e-14);
        }
        assert_eq!(gram.to_csv().lines().count(), 8);
    }

    #[test]
    fn kernel_function_norms() {
        let s = depth1(1, ActivationSpec::relu());
        let kern = CompositionalKernel::new(&s, 0.0, 3).unwrap();
        let f = KernelFunction::zero(kern.clone(), 2);
        let x = SphereInput::sample(1, 3, &mut rng::stream(9, 0));
        assert_eq!(f.eval(&x).unwrap(), vec![0.0, 0.0]);
        assert_eq!(f.norm().unwrap(), 0.0);

        let mut f = KernelFunction::zero(kern.clone(), 2);
        f.push(x.clone(), vec![1.0, 0.0]).unwrap();
        let fx = f.eval(&x).unwrap();
        assert_abs_diff_eq!(fx[0], 1.0, epsilon = 1e-14);
        assert_eq!(fx[1], 0.0);
        assert_abs_diff_eq!(f.norm().unwrap(), 1.0, epsilon = 1e-15);

        let y = SphereInput::sample(1, 3, &mut rng::stream(9, 1));
        f.push(y.clone(), vec![-0.5, 2.0]).unwrap();
        let kxy = kern.eval(&x, &y).unwrap();
        // ⟨a1,a1⟩ + ⟨a2,a2⟩ + 2⟨a1,a2⟩κ(x,y)
        let expected = 1.0 + (0.25 + 4.0) + 2.0 * (-0.5) * kxy;
        assert_abs_diff_eq!(f.norm().unwrap(), expected.sqrt(), epsilon = 1e-14);
        assert!(f.push(y, vec![1.0]).is_err());
    }

    #[test]
    fn negative_radicand_is_reported() {
        assert_eq!(clamped_sqrt(-1e-10).unwrap(), 0.0);
        assert!(matches!(clamped_sqrt(-1e-6), Err(KernelError::NegativeNormSquared(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kernel_is_symmetric_and_normalized(seed in any::<u64>(), beta in 0.0f64..=1.0, n in 1usize..4) {
            let s = crate::skeleton::layered(n, &[2], ActivationSpec::relu());
            let kern = CompositionalKernel::new(&s, beta, 3).unwrap();
            let x = SphereInput::sample(n, 3, &mut rng::stream(seed, 0));
            let y = SphereInput::sample(n, 3, &mut rng::stream(seed, 1));
            prop_assert_eq!(kern.eval(&x, &y).unwrap(), kern.eval(&y, &x).unwrap());
            prop_assert!((kern.eval(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn full_bias_gives_constant_kernel(seed in any::<u64>()) {
            let s = crate::skeleton::layered(2, &[2], ActivationSpec::erf());
            let kern = CompositionalKernel::new(&s, 1.0, 3).unwrap();
            let x = SphereInput::sample(2, 3, &mut rng::stream(seed, 0));
            let y = SphereInput::sample(2, 3, &mut rng::stream(seed, 1));
            prop_assert!((kern.eval(&x, &y).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn conjugates_stay_in_range(rho in -1.0f64..=1.0) {
            for act in ActivationSpec::registered() {
                let v = ConjugateActivation::preferred(act).unwrap().eval(rho).unwrap();
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
            }
        }

        #[test]
        fn relu_kernel_monotone_in_block_products(seed in any::<u64>(), t in 0.0f64..1.0) {
            // Moving y towards x blockwise raises every block inner product.
            let s = crate::skeleton::layered(3, &[2], ActivationSpec::relu());
            let kern = CompositionalKernel::new(&s, 0.2, 4).unwrap();
            let x = SphereInput::sample(3, 4, &mut rng::stream(seed, 0));
            let y = SphereInput::sample(3, 4, &mut rng::stream(seed, 1));
            let mix: Vec<f64> = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let z = SphereInput::normalized(3, 4, mix).unwrap();
            let raises = (0..3).all(|i| x.block_dot(&z, i) >= x.block_dot(&y, i) - 1e-12);
            prop_assume!(raises);
            prop_assert!(kern.eval(&x, &z).unwrap() >= kern.eval(&x, &y).unwrap() - 1e-12);
        }
    }
}
