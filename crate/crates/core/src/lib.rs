//! Computation skeletons, their random-weight network realizations, the
//! compositional kernels they induce, SGD training, and the kernel-space
//! baselines that training is compared against.

pub mod activation;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod input;
pub mod kernel;
pub mod linalg;
pub mod loss;
pub mod network;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod skeleton;
pub mod task;
pub mod training;

pub use activation::{ActivationKind, ActivationSpec};
pub use input::SphereInput;
pub use kernel::{CompositionalKernel, ConjugateActivation, ConjugateMode, GramMatrix, KernelFunction};
pub use skeleton::{Skeleton, SkeletonMetrics, SkeletonSpec};
