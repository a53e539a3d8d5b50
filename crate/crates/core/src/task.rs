//! Synthetic tasks with a planted target: kernel regression, margin-separable
//! kernel classification, and a degree-2 polynomial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::input::SphereInput;
use crate::kernel::{CompositionalKernel, KernelError, KernelFunction};
use crate::loss::{LossError, LossSpec, Target};
use crate::rng;
use crate::training::{DataSource, Example, TrainError};

/// Cap on rejection-sampling attempts for one example.
pub const MAX_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("no example met the margin in {attempts} attempts")]
    Rejection { attempts: usize },
    #[error("invalid task: {0}")]
    Invalid(String),
}

impl From<TaskError> for TrainError {
    fn from(e: TaskError) -> Self {
        TrainError::Data(e.to_string())
    }
}

#[derive(Debug, Clone)]
enum Planted {
    Kernel(KernelFunction),
    Polynomial { v: Vec<f64>, offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Labels {
    /// `y = h*(x) + U[−noise, noise]`.
    Regression { noise: f64 },
    /// `y = argmax h*(x)`, kept only when it wins by `margin`.
    Classification { margin: f64 },
}

/// A distribution over examples defined by a planted predictor.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    n: usize,
    d: usize,
    target: Planted,
    labels: Labels,
    max_attempts: usize,
}

/// Random centers with Gaussian coefficients, with class-wise and
/// center-wise means removed (the latter kills the constant component that
/// the kernel otherwise puts in every function), rescaled to norm `norm`.
fn random_function(
    kernel: &CompositionalKernel,
    k: usize,
    norm: f64,
    centers: usize,
    center_classes: bool,
    seed: u64,
) -> Result<KernelFunction, TaskError> {
    let n = kernel.skeleton().n_inputs();
    let d = kernel.d();
    let mut g = rng::stream(seed, 0x7a5c);
    let xs: Vec<SphereInput> = (0..centers).map(|_| SphereInput::sample(n, d, &mut g)).collect();
    let mut coef: Vec<Vec<f64>> = (0..centers)
        .map(|_| (0..k).map(|_| g.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    if center_classes && k > 1 {
        for a in &mut coef {
            let mean = a.iter().sum::<f64>() / k as f64;
            a.iter_mut().for_each(|v| *v -= mean);
        }
    }
    if centers > 1 {
        for c in 0..k {
            let mean = coef.iter().map(|a| a[c]).sum::<f64>() / centers as f64;
            coef.iter_mut().for_each(|a| a[c] -= mean);
        }
    }
    let mut f = KernelFunction::zero(kernel.clone(), k);
    for (x, a) in xs.into_iter().zip(coef) {
        f.push(x, a)?;
    }
    let current = f.norm()?;
    if current == 0.0 {
        if norm == 0.0 {
            return Ok(f);
        }
        return Err(TaskError::Invalid("planted function has zero norm".into()));
    }
    f.scale(norm / current);
    Ok(f)
}

impl PlantedTask {
    /// `y = h*(x) + noise` with `h*` built from `centers` random centers,
    /// `‖h*‖ = norm`.
    pub fn kernel_regression(
        kernel: &CompositionalKernel,
        norm: f64,
        centers: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self, TaskError> {
        if !(norm >= 0.0 && norm.is_finite()) || centers == 0 || !(noise >= 0.0) {
            return Err(TaskError::Invalid(format!(
                "need norm >= 0, centers >= 1, noise >= 0; got {norm}, {centers}, {noise}"
            )));
        }
        let f = random_function(kernel, 1, norm, centers, false, seed)?;
        Self::from_function(f, noise)
    }

    /// Regression onto an explicit `h*`.
    pub fn from_function(f: KernelFunction, noise: f64) -> Result<Self, TaskError> {
        if f.k() != 1 {
            return Err(TaskError::Invalid("regression target must have one output".into()));
        }
        Ok(Self {
            n: f.kernel().skeleton().n_inputs(),
            d: f.kernel().d(),
            target: Planted::Kernel(f),
            labels: Labels::Regression { noise },
            max_attempts: MAX_ATTEMPTS,
        })
    }

    /// `y = argmax h*(x)` over inputs where `h*` has margin 1, with
    /// `‖h*‖ = norm` and at most `4 norm²` centers.
    pub fn kernel_classification(
        kernel: &CompositionalKernel,
        k: usize,
        norm: f64,
        centers: usize,
        seed: u64,
    ) -> Result<Self, TaskError> {
        if k < 2 {
            return Err(TaskError::Invalid(format!("classification needs k >= 2, got {k}")));
        }
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(TaskError::Invalid(format!(
                "a margin-1 task needs a target of positive norm, got {norm}"
            )));
        }
        let centers = centers.min((4.0 * norm * norm).floor() as usize).max(1);
        let f = random_function(kernel, k, norm, centers, true, seed)?;
        Ok(Self {
            n: kernel.skeleton().n_inputs(),
            d: kernel.d(),
            target: Planted::Kernel(f),
            labels: Labels::Classification { margin: 1.0 },
            max_attempts: MAX_ATTEMPTS,
        })
    }

    /// `y = ⟨x, v⟩² − offset + noise` on `S^{d−1}`.
    pub fn polynomial(v: Vec<f64>, offset: f64, noise: f64) -> Result<Self, TaskError> {
        if v.is_empty() {
            return Err(TaskError::Invalid("polynomial direction is empty".into()));
        }
        Ok(Self {
            n: 1,
            d: v.len(),
            target: Planted::Polynomial { v, offset },
            labels: Labels::Regression { noise },
            max_attempts: MAX_ATTEMPTS,
        })
    }

    pub fn with_max_attempts(mut self, attempts: usize) -> Self {
        self.max_attempts = attempts;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of outputs of the planted predictor.
    pub fn k(&self) -> usize {
        match &self.target {
            Planted::Kernel(f) => f.k(),
            Planted::Polynomial { .. } => 1,
        }
    }

    pub fn planted(&self) -> Option<&KernelFunction> {
        match &self.target {
            Planted::Kernel(f) => Some(f),
            Planted::Polynomial { .. } => None,
        }
    }

    /// `h*(x)`.
    pub fn target_value(&self, x: &SphereInput) -> Result<Vec<f64>, TaskError> {
        match &self.target {
            Planted::Kernel(f) => Ok(f.eval(x)?),
            Planted::Polynomial { v, offset } => {
                let s: f64 = x.block(0).iter().zip(v).map(|(a, b)| a * b).sum();
                Ok(vec![s * s - offset])
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Example, TaskError> {
        match self.labels {
            Labels::Regression { noise } => {
                let x = SphereInput::sample(self.n, self.d, rng);
                let h = self.target_value(&x)?[0];
                let e = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                Ok(Example {
                    x,
                    y: Target::Value(h + e),
                })
            }
            Labels::Classification { margin } => {
                for _ in 0..self.max_attempts {
                    let x = SphereInput::sample(self.n, self.d, rng);
                    if let Some(y) = crate::baselines::margin_label(&self.target_value(&x)?, margin) {
                        return Ok(Example { x, y: Target::Class(y) });
                    }
                }
                Err(TaskError::Rejection {
                    attempts: self.max_attempts,
                })
            }
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Example>, TaskError> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Fresh i.i.d. examples from the stream `(seed, stream)`.
    pub fn source(&self, seed: u64, stream: u64) -> TaskSource<'_> {
        TaskSource {
            task: self,
            rng: rng::stream(seed, stream),
        }
    }

    /// Average loss of `h*` itself over `sample`.
    pub fn planted_loss(&self, sample: &[Example], loss: &LossSpec) -> Result<f64, TaskError> {
        let mut total = 0.0;
        for e in sample {
            total += loss.eval(&self.target_value(&e.x)?, &e.y)?;
        }
        Ok(total / sample.len().max(1) as f64)
    }
}

/// A [`DataSource`] drawing fresh examples from a task.
pub struct TaskSource<'a> {
    task: &'a PlantedTask,
    rng: ChaCha8Rng,
}

impl DataSource for TaskSource<'_> {
    fn next_batch(&mut self, m: usize) -> Result<Vec<Example>, TrainError> {
        Ok(self.task.sample_n(m, &mut self.rng)?)
    }
}
