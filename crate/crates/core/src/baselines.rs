//! Kernel-space baselines: the multiclass kernel perceptron, projected kernel
//! SGD over a norm ball, and SGD on the prediction layer alone.

use std::collections::HashMap;

use thiserror::Error;

use crate::input::SphereInput;
use crate::kernel::{CompositionalKernel, KernelError, KernelFunction};
use crate::loss::{LossError, LossSpec};
use crate::network::RealizedNetwork;
use crate::training::{sgd_run, DataSource, Example, Monitor, SgdConfig, TrainError, TrainResult, UpdateMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0} loss is not convex")]
    NonConvexLoss(&'static str),
    #[error("invalid baseline configuration: {0}")]
    InvalidConfig(String),
}

/// Memoized kernel values keyed by `(example id, support index)`.
#[derive(Debug, Clone, Default)]
pub struct KernelCache {
    values: HashMap<(usize, usize), f64>,
    hits: u64,
    misses: u64,
}

impl KernelCache {
    pub fn get_or_eval(
        &mut self,
        key: (usize, usize),
        eval: impl FnOnce() -> Result<f64, KernelError>,
    ) -> Result<f64, KernelError> {
        if let Some(v) = self.values.get(&key) {
            self.hits += 1;
            return Ok(*v);
        }
        self.misses += 1;
        let v = eval()?;
        self.values.insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }
}

/// Multiclass kernel perceptron with margin `a`.
///
/// On `(x, y)` it updates when `(Wx)_y < a + max_{y′≠y} (Wx)_{y′}`, adding
/// `(e_y − e_ŷ) ⊗ κ^x` where `ŷ` is the strongest rival label (ties go to
/// the smallest index). `‖W‖` is tracked incrementally.
#[derive(Debug, Clone)]
pub struct KernelPerceptron {
    kernel: CompositionalKernel,
    k: usize,
    margin: f64,
    support: Vec<SphereInput>,
    /// `(y, ŷ)` of each update.
    labels: Vec<(usize, usize)>,
    norm_sq: f64,
    cache: KernelCache,
}

impl KernelPerceptron {
    pub fn new(kernel: CompositionalKernel, k: usize, margin: f64) -> Result<Self, BaselineError> {
        if k < 2 {
            return Err(BaselineError::InvalidConfig(format!("perceptron needs k >= 2, got {k}")));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(BaselineError::InvalidConfig(format!("margin must be >= 0, got {margin}")));
        }
        Ok(Self {
            kernel,
            k,
            margin,
            support: Vec::new(),
            labels: Vec::new(),
            norm_sq: 0.0,
            cache: KernelCache::default(),
        })
    }

    pub fn mistakes(&self) -> usize {
        self.support.len()
    }

    pub fn cache(&self) -> &KernelCache {
        &self.cache
    }

    /// `(Wx)` for an example with stable identifier `id`.
    pub fn scores(&mut self, id: usize, x: &SphereInput) -> Result<Vec<f64>, BaselineError> {
        let mut s = vec![0.0; self.k];
        for (j, (c, &(y, rival))) in self.support.iter().zip(&self.labels).enumerate() {
            let kernel = &self.kernel;
            let kv = self.cache.get_or_eval((id, j), || kernel.eval(c, x))?;
            s[y] += kv;
            s[rival] -= kv;
        }
        Ok(s)
    }

    /// Presents one example; returns whether it triggered an update.
    pub fn present(&mut self, id: usize, x: &SphereInput, y: usize) -> Result<bool, BaselineError> {
        if y >= self.k {
            return Err(LossError::LabelOutOfRange { label: y, k: self.k }.into());
        }
        let s = self.scores(id, x)?;
        let (rival, best_rival) = s
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if s[y] >= self.margin + best_rival {
            return Ok(false);
        }
        let kxx = self.kernel.eval(x, x)?;
        self.norm_sq += 2.0 * kxx + 2.0 * (s[y] - best_rival);
        self.support.push(x.clone());
        self.labels.push((y, rival));
        Ok(true)
    }

    /// `‖W‖`, from the incremental recursion.
    pub fn norm(&self) -> f64 {
        self.norm_sq.max(0.0).sqrt()
    }

    /// `‖W‖` from the Gram quadratic form over the support.
    pub fn direct_norm(&self) -> Result<f64, BaselineError> {
        Ok(self.function()?.norm()?)
    }

    pub fn function(&self) -> Result<KernelFunction, BaselineError> {
        let mut f = KernelFunction::zero(self.kernel.clone(), self.k);
        for (c, &(y, rival)) in self.support.iter().zip(&self.labels) {
            let mut a = vec![0.0; self.k];
            a[y] = 1.0;
            a[rival] = -1.0;
            f.push(c.clone(), a)?;
        }
        Ok(f)
    }
}

/// Outcome of cycling the perceptron over a fixed pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptronRun {
    pub mistakes: usize,
    pub presentations: usize,
    /// A full pass over the pool made no update.
    pub converged: bool,
    pub norm: f64,
}

/// Cycles `pool` until a clean pass or `max_presentations`.
pub fn perceptron_on_pool(
    perceptron: &mut KernelPerceptron,
    pool: &[(SphereInput, usize)],
    max_presentations: usize,
) -> Result<PerceptronRun, BaselineError> {
    let mut presentations = 0;
    let mut since_update = 0;
    let mut converged = false;
    while presentations < max_presentations && !pool.is_empty() {
        let id = presentations % pool.len();
        let (x, y) = &pool[id];
        presentations += 1;
        if perceptron.present(id, x, *y)? {
            since_update = 0;
        } else {
            since_update += 1;
            if since_update == pool.len() {
                converged = true;
                break;
            }
        }
    }
    Ok(PerceptronRun {
        mistakes: perceptron.mistakes(),
        presentations,
        converged,
        norm: perceptron.norm(),
    })
}

/// Projected SGD over `{f : ‖f‖ ≤ M}` with step `η = ε/L²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSgdConfig {
    pub radius: f64,
    pub epsilon: f64,
    /// Lipschitz constant of the loss over the predictions that can occur.
    pub lipschitz: f64,
    /// Overrides `T = M²L²/ε²`.
    pub steps: Option<usize>,
}

impl ProjectedSgdConfig {
    pub fn eta(&self) -> f64 {
        self.epsilon / (self.lipschitz * self.lipschitz)
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| {
            let t = (self.radius * self.lipschitz / self.epsilon).powi(2);
            t.ceil() as usize
        })
    }

    fn validate(&self) -> Result<(), BaselineError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(self.radius.is_finite() && self.radius >= 0.0) || !ok(self.epsilon) || !ok(self.lipschitz) {
            return Err(BaselineError::InvalidConfig(format!(
                "need M >= 0, eps > 0, L > 0; got M={}, eps={}, L={}",
                self.radius, self.epsilon, self.lipschitz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProjectedSgdResult {
    pub last: KernelFunction,
    /// `(1/T) Σ_{t=1..T} f_t`, the iterate the expected-loss guarantee is about.
    pub average: KernelFunction,
    /// `‖f_t‖` after each step.
    pub norms: Vec<f64>,
    /// `ℓ(f_{t−1}(x_t), y_t)`, the online losses.
    pub online_losses: Vec<f64>,
    pub projections: usize,
}

/// Runs projected kernel SGD from `f_0 = 0`.
pub fn projected_kernel_sgd(
    kernel: &CompositionalKernel,
    k: usize,
    loss: &LossSpec,
    config: &ProjectedSgdConfig,
    data: &mut dyn DataSource,
) -> Result<ProjectedSgdResult, BaselineError> {
    if !loss.is_convex() {
        return Err(BaselineError::NonConvexLoss(loss.name()));
    }
    config.validate()?;
    let steps = config.steps();
    let eta = config.eta();
    let mut centers: Vec<SphereInput> = Vec::with_capacity(steps);
    let mut coef: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut avg: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut norm_sq = 0.0;
    let mut norms = Vec::with_capacity(steps);
    let mut online_losses = Vec::with_capacity(steps);
    let mut projections = 0;
    for _ in 0..steps {
        let Example { x, y } = data
            .next_batch(1)?
            .pop()
            .ok_or(TrainError::EmptyBatch)?;
        let mut pred = vec![0.0; k];
        for (c, a) in centers.iter().zip(&coef) {
            let kv = kernel.eval(c, &x)?;
            pred.iter_mut().zip(a).for_each(|(p, ai)| *p += ai * kv);
        }
        online_losses.push(loss.eval(&pred, &y)?);
        let g = loss.grad(&pred, &y)?;
        let b: Vec<f64> = g.iter().map(|gi| -eta * gi).collect();
        let kxx = kernel.eval(&x, &x)?;
        let b_sq: f64 = b.iter().map(|v| v * v).sum();
        let cross: f64 = b.iter().zip(&pred).map(|(bi, pi)| bi * pi).sum();
        norm_sq += 2.0 * cross + b_sq * kxx;
        centers.push(x);
        coef.push(b);
        avg.push(vec![0.0; k]);
        let norm = norm_sq.max(0.0).sqrt();
        if norm > config.radius {
            let c = if norm > 0.0 { config.radius / norm } else { 0.0 };
            coef.iter_mut().flatten().for_each(|v| *v *= c);
            norm_sq = config.radius * config.radius;
            projections += 1;
        }
        norms.push(norm_sq.max(0.0).sqrt());
        for (s, a) in avg.iter_mut().zip(&coef) {
            s.iter_mut().zip(a).for_each(|(si, ai)| *si += ai);
        }
    }
    let mut last = KernelFunction::zero(kernel.clone(), k);
    let mut average = KernelFunction::zero(kernel.clone(), k);
    for ((c, a), s) in centers.into_iter().zip(coef).zip(avg) {
        last.push(c.clone(), a)?;
        average.push(c, s.into_iter().map(|v| v / steps as f64).collect())?;
    }
    Ok(ProjectedSgdResult {
        last,
        average,
        norms,
        online_losses,
        projections,
    })
}

/// Average loss of a kernel function over a sample.
pub fn kernel_function_loss(f: &KernelFunction, sample: &[Example], loss: &LossSpec) -> Result<f64, BaselineError> {
    let mut total = 0.0;
    for e in sample {
        total += loss.eval(&f.eval(&e.x)?, &e.y)?;
    }
    Ok(total / sample.len().max(1) as f64)
}

/// SGD on `W^pred` only, with the representation frozen at its initial value.
///
/// The network must start with a zero prediction layer.
pub fn last_layer_sgd(
    net: &mut RealizedNetwork,
    config: &SgdConfig,
    data: &mut dyn DataSource,
    monitor: &mut Monitor<'_>,
) -> Result<TrainResult, BaselineError> {
    if net.params().pred.iter().any(|v| *v != 0.0) {
        return Err(BaselineError::InvalidConfig(
            "last-layer SGD starts from a zero prediction layer".into(),
        ));
    }
    let mut config = config.clone();
    config.mode = UpdateMode::LastLayerOnly;
    Ok(sgd_run(net, &config, data, monitor)?)
}

/// The argmax of `scores` if it beats every other entry by at least
/// `margin`.
pub fn margin_label(scores: &[f64], margin: f64) -> Option<usize> {
    let (best, top) = scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let rival = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    (top >= margin + rival).then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationSpec;
    use crate::loss::Target;
    use crate::rng;
    use crate::skeleton::{Skeleton, SkeletonSpec};
    use crate::training::FixedSet;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear_skeleton() -> Skeleton {
        SkeletonSpec::new()
            .input("x")
            .node("h", ActivationSpec::identity(), &["x"])
            .output("h")
            .validate()
            .unwrap()
    }

    fn linear_kernel(d: usize) -> CompositionalKernel {
        CompositionalKernel::new(&linear_skeleton(), 0.0, d).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Points of `S^{d-1}` labelled by the row of `w` with the largest score,
    /// kept only when that row wins by at least 1.
    fn separable_pool(w: &[Vec<f64>], d: usize, n: usize, seed: u64) -> Vec<(SphereInput, usize)> {
        let mut g = rng::stream(seed, 0);
        let mut out = Vec::new();
        while out.len() < n {
            let x = SphereInput::sample(1, d, &mut g);
            let scores: Vec<f64> = w.iter().map(|row| dot(row, x.as_slice())).collect();
            if let Some(y) = margin_label(&scores, 1.0) {
                out.push((x, y));
            }
        }
        out
    }

    #[test]
    fn first_example_always_updates() {
        let mut p = KernelPerceptron::new(linear_kernel(3), 3, 1.0).unwrap();
        let x = SphereInput::normalized(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(p.present(0, &x, 2).unwrap());
        assert_abs_diff_eq!(p.norm(), 2f64.sqrt(), epsilon = 1e-12);
        // With rival 0: scores become (-1, 0, 1), so y = 2 now has margin 1.
        assert_eq!(p.scores(0, &x).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(!p.present(0, &x, 2).unwrap());
    }

    #[test]
    fn perceptron_respects_the_mistake_bound_on_a_separable_pool() {
        let d = 4;
        let m = 3.0;
        let mut g = rng::stream(3, 1);
        let mut w: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| g.random::<f64>() - 0.5).collect()).collect();
        let f: f64 = w.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().flatten().for_each(|v| *v *= m / f);
        let pool = separable_pool(&w, d, 500, 4);
        let mut p = KernelPerceptron::new(linear_kernel(d), 2, 1.0).unwrap();
        let run = perceptron_on_pool(&mut p, &pool, 100_000).unwrap();
        assert!(run.converged);
        assert!(run.mistakes as f64 <= 4.0 * m * m, "{} mistakes", run.mistakes);
        assert!(run.norm <= 4.0 * m + 1e-9);
        assert_abs_diff_eq!(run.norm, p.direct_norm().unwrap(), epsilon = 1e-8);
        assert!(p.cache().hits() > 0);
    }

    #[test]
    fn perceptron_rejects_bad_config() {
        assert!(KernelPerceptron::new(linear_kernel(2), 1, 1.0).is_err());
        assert!(KernelPerceptron::new(linear_kernel(2), 2, -1.0).is_err());
        let mut p = KernelPerceptron::new(linear_kernel(2), 2, 1.0).unwrap();
        let x = SphereInput::normalized(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(p.present(0, &x, 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn incremental_norm_matches_gram_form(seed in 0u64..1000, k in 2usize..5, a in 0.0f64..2.0) {
            let d = 3;
            let mut g = rng::stream(seed, 7);
            let mut p = KernelPerceptron::new(linear_kernel(d), k, a).unwrap();
            for id in 0..40 {
                let x = SphereInput::sample(1, d, &mut g);
                let y = g.random_range(0..k);
                p.present(id, &x, y).unwrap();
            }
            prop_assert!((p.norm() - p.direct_norm().unwrap()).abs() <= 1e-8);
        }
    }

    fn hinge_stream(d: usize, n: usize, seed: u64) -> (Vec<f64>, Vec<Example>) {
        let mut g = rng::stream(seed, 2);
        let u = SphereInput::sample(1, d, &mut g).as_slice().to_vec();
        let examples = (0..n)
            .map(|_| {
                let x = SphereInput::sample(1, d, &mut g);
                let s = dot(&u, x.as_slice());
                // Flip a fifth of the labels so the comparator pays some loss.
                let mut y = if s >= 0.0 { 1.0 } else { -1.0 };
                if g.random::<f64>() < 0.2 {
                    y = -y;
                }
                Example { x, y: Target::Value(y) }
            })
            .collect();
        (u, examples)
    }

    #[test]
    fn projected_sgd_stays_in_the_ball_and_meets_the_regret_bound() {
        let d = 3;
        let cfg = ProjectedSgdConfig {
            radius: 2.0,
            epsilon: 0.1,
            lipschitz: 1.0,
            steps: None,
        };
        let steps = cfg.steps();
        assert_eq!(steps, 400);
        let (u, examples) = hinge_stream(d, steps, 11);
        let kernel = linear_kernel(d);
        let res = projected_kernel_sgd(&kernel, 1, &LossSpec::hinge(), &cfg, &mut FixedSet::new(examples.clone()))
            .unwrap();
        assert_eq!(res.norms.len(), steps);
        assert!(res.norms.iter().all(|n| *n <= cfg.radius + 1e-9));
        assert!(res.projections > 0);
        assert_abs_diff_eq!(res.last.norm().unwrap(), *res.norms.last().unwrap(), epsilon = 1e-8);
        assert!(res.average.norm().unwrap() <= cfg.radius + 1e-9);

        // Online regret against every point of the ball is at most εT; check
        // the planted direction scaled to the boundary.
        let comparator: f64 = examples
            .iter()
            .map(|e| {
                let Target::Value(y) = e.y else { unreachable!() };
                (1.0 - y * cfg.radius * dot(&u, e.x.as_slice())).max(0.0)
            })
            .sum();
        let online: f64 = res.online_losses.iter().sum();
        assert!(online - comparator <= cfg.epsilon * steps as f64, "{online} vs {comparator}");
    }

    #[test]
    fn average_iterate_is_the_mean_of_the_iterates() {
        let d = 2;
        let cfg = ProjectedSgdConfig {
            radius: 0.3,
            epsilon: 0.5,
            lipschitz: 1.0,
            steps: Some(6),
        };
        let (_, examples) = hinge_stream(d, 6, 5);
        let kernel = linear_kernel(d);
        let mut iterates = Vec::new();
        for t in 1..=6 {
            let c = ProjectedSgdConfig { steps: Some(t), ..cfg.clone() };
            let r = projected_kernel_sgd(&kernel, 1, &LossSpec::hinge(), &c, &mut FixedSet::new(examples.clone()))
                .unwrap();
            iterates.push(r.last);
        }
        let full = projected_kernel_sgd(&kernel, 1, &LossSpec::hinge(), &cfg, &mut FixedSet::new(examples.clone()))
            .unwrap();
        let probe = SphereInput::normalized(1, d, vec![0.3, -0.8]).unwrap();
        let mean: f64 = iterates.iter().map(|f| f.eval(&probe).unwrap()[0]).sum::<f64>() / 6.0;
        assert_abs_diff_eq!(full.average.eval(&probe).unwrap()[0], mean, epsilon = 1e-12);
    }

    #[test]
    fn projected_sgd_edge_cases() {
        let kernel = linear_kernel(2);
        let (_, examples) = hinge_stream(2, 5, 1);
        let mut cfg = ProjectedSgdConfig {
            radius: 0.0,
            epsilon: 0.1,
            lipschitz: 1.0,
            steps: Some(5),
        };
        let res = projected_kernel_sgd(&kernel, 1, &LossSpec::hinge(), &cfg, &mut FixedSet::new(examples.clone()))
            .unwrap();
        assert!(res.norms.iter().all(|n| *n == 0.0));
        assert_eq!(res.last.norm().unwrap(), 0.0);

        cfg.radius = 1.0;
        cfg.steps = Some(0);
        let res = projected_kernel_sgd(&kernel, 1, &LossSpec::hinge(), &cfg, &mut FixedSet::new(examples.clone()))
            .unwrap();
        assert_eq!(res.last.support_len(), 0);
        assert_eq!(res.average.support_len(), 0);

        assert_eq!(
            projected_kernel_sgd(&kernel, 1, &LossSpec::zero_one(), &cfg, &mut FixedSet::new(examples.clone()))
                .unwrap_err(),
            BaselineError::NonConvexLoss("zero-one")
        );
        cfg.epsilon = 0.0;
        assert!(matches!(
            projected_kernel_sgd(&kernel, 1, &LossSpec::hinge(), &cfg, &mut FixedSet::new(examples)),
            Err(BaselineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn last_layer_sgd_freezes_the_representation() {
        let skel = crate::skeleton::layered(2, &[2], ActivationSpec::relu());
        let mut net = RealizedNetwork::initialized(&skel, 8, 2, 3, 0.0, 4, true).unwrap();
        let before = net.params().clone();
        let mut g = rng::stream(9, 0);
        let examples: Vec<Example> = (0..8)
            .map(|i| Example {
                x: SphereInput::sample(2, 3, &mut g),
                y: Target::Class(i % 2),
            })
            .collect();
        let cfg = SgdConfig::new(1.0, 8, 10, 4, LossSpec::logistic());
        let res = last_layer_sgd(&mut net, &cfg, &mut FixedSet::new(examples.clone()), &mut Monitor::default());
        assert!(res.is_ok());
        assert_eq!(net.params().nodes, before.nodes);
        assert_ne!(net.params().pred, before.pred);

        let mut nonzero = RealizedNetwork::initialized(&skel, 8, 2, 3, 0.0, 4, false).unwrap();
        assert!(matches!(
            last_layer_sgd(&mut nonzero, &cfg, &mut FixedSet::new(examples), &mut Monitor::default()),
            Err(BaselineError::InvalidConfig(_))
        ));
    }
}
