//! Gaussian expectations by quadrature.
//!
//! Two families of rules are provided:
//!
//! * Gauss–Hermite rules rescaled to the standard normal density, used for
//!   smooth integrands. A tensorized rule over `(X, Z)` evaluates bivariate
//!   expectations under the correlated pair `(X, ρX + √(1−ρ²)Z)`.
//! * Gauss–Legendre panels on a truncated line, split at a set of known kink
//!   locations. Gauss–Hermite converges only algebraically on integrands with
//!   a kink (ReLU-type activations), while the split panels stay exponentially
//!   accurate because every panel sees a smooth integrand.

use std::f64::consts::PI;

/// Half-width of the truncated line used by the panel rules. The standard
/// normal tail beyond 12 has mass below 1e-32.
pub const TRUNCATION: f64 = 12.0;

/// Number of nodes used by default.
pub const DEFAULT_ORDER: usize = 64;

/// Number of nodes used when a result is double-checked.
pub const VERIFY_ORDER: usize = 96;

const NEWTON_EPS: f64 = 1e-14;
const NEWTON_MAX_ITER: usize = 100;

/// Quadrature rule for `E f(X)` with `X ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl NormalRule {
    /// Gauss–Hermite rule with `order` nodes, rescaled to the standard normal.
    ///
    /// Nodes are found by Newton iteration on the orthonormal Hermite
    /// recurrence; exact for polynomials of degree `2·order − 1`.
    pub fn gauss_hermite(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        // π^{-1/4}
        let pim4 = 0.751_125_544_464_942_5;
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..NEWTON_MAX_ITER {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= NEWTON_EPS {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let scale = 1.0 / PI.sqrt();
        Self {
            nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|v| v * scale).collect(),
        }
    }

    /// Panel rule: Gauss–Legendre with `order` nodes on each piece of
    /// `[−TRUNCATION, TRUNCATION]` cut at `breaks`, weighted by the normal density.
    pub fn split_legendre(order: usize, breaks: &[f64]) -> Self {
        let base = LegendreRule::new(order);
        let mut cuts = vec![-TRUNCATION, TRUNCATION];
        cuts.extend(breaks.iter().copied().filter(|b| b.abs() < TRUNCATION));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut nodes = Vec::with_capacity(order * (cuts.len() - 1));
        let mut weights = Vec::with_capacity(nodes.capacity());
        for pair in cuts.windows(2) {
            for (z, w) in base.panel(pair[0], pair[1]) {
                nodes.push(z);
                weights.push(w * normal_pdf(z));
            }
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Gauss–Legendre rule on `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LegendreRule {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 1..=n.div_ceil(2) {
            let mut z = (PI * (i as f64 - 0.25) / (nf + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..NEWTON_MAX_ITER {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= NEWTON_EPS {
                    break;
                }
            }
            x[i - 1] = -z;
            x[n - i] = z;
            w[i - 1] = 2.0 / ((1.0 - z * z) * pp * pp);
            w[n - i] = w[i - 1];
        }
        Self { nodes: x, weights: w }
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn panel(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `E f(X) g(Y)` for `(X, Y)` standard normals with correlation `rho`.
///
/// With no kinks a tensorized Gauss–Hermite rule is used. With kinks (points
/// where `f` or `g` are not smooth; both are assumed to share them) the
/// outer variable is split at the kinks and the inner integral at the kinks
/// pulled back through `Y = ρX + √(1−ρ²)Z`.
pub fn bivariate_expectation<F, G>(order: usize, kinks: &[f64], rho: f64, f: F, g: G) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let rho = rho.clamp(-1.0, 1.0);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    if kinks.is_empty() {
        let rule = NormalRule::gauss_hermite(order);
        return rule.expect(|x| {
            let fx = f(x);
            if fx == 0.0 {
                return 0.0;
            }
            if s == 0.0 {
                return fx * g(rho * x);
            }
            fx * rule.expect(|z| g(rho * x + s * z))
        });
    }
    let outer = NormalRule::split_legendre(order, kinks);
    let legendre = LegendreRule::new(order);
    outer.expect(|x| {
        let fx = f(x);
        if fx == 0.0 {
            return 0.0;
        }
        if s < 1e-12 {
            return fx * g(rho * x);
        }
        let mut cuts = vec![-TRUNCATION, TRUNCATION];
        cuts.extend(
            kinks
                .iter()
                .map(|k| (k - rho * x) / s)
                .filter(|z| z.abs() < TRUNCATION),
        );
        cuts.sort_by(f64::total_cmp);
        let mut inner = 0.0;
        for pair in cuts.windows(2) {
            for (z, w) in legendre.panel(pair[0], pair[1]) {
                inner += w * normal_pdf(z) * g(rho * x + s * z);
            }
        }
        fx * inner
    })
}
