//! The `(r, k)`-fold realization of a skeleton: every internal node becomes
//! `r` neurons, every input node a block of `d` input coordinates, and `k`
//! linear output neurons read the `r` neurons of the output node.
//!
//! Node `v` holds `W^{v,Int}` (`r × r·p_int`), `W^{v,inp}` (`r × d·p_inp`) and
//! a bias `b^v`. Columns of `W^{v,Int}` follow the internal parents of `v` in
//! skeleton order, `r` columns each; columns of `W^{v,inp}` follow its input
//! parents, `d` columns each.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::input::{InputError, SphereInput};
use crate::linalg::{mul_add_cols, spectral_norm, LinalgError};
pub use crate::rng::ParamRole;
use crate::rng::param_stream;
use crate::skeleton::{NodeKind, Skeleton};

/// Default cap on the total number of parameters of a realization.
pub const DEFAULT_PARAM_CAP: usize = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("realization needs {count} parameters, above the cap of {cap}")]
    TooManyParams { count: usize, cap: usize },
    #[error("r, k and d must be at least 1 (got r={r}, k={k}, d={d})")]
    ZeroDimension { r: usize, k: usize, d: usize },
    #[error("beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("non-finite value at node `{0}`")]
    NotFinite(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("parameter shapes do not match the architecture")]
    ShapeMismatch,
}

/// Shapes of a realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    skeleton: Skeleton,
    r: usize,
    k: usize,
    d: usize,
    int_parents: Vec<Vec<usize>>,
    inp_parents: Vec<Vec<usize>>,
}

impl Architecture {
    pub fn new(skeleton: &Skeleton, r: usize, k: usize, d: usize) -> Result<Self, NetworkError> {
        Self::with_cap(skeleton, r, k, d, DEFAULT_PARAM_CAP)
    }

    pub fn with_cap(skeleton: &Skeleton, r: usize, k: usize, d: usize, cap: usize) -> Result<Self, NetworkError> {
        if r == 0 || k == 0 || d == 0 {
            return Err(NetworkError::ZeroDimension { r, k, d });
        }
        let mut int_parents = vec![Vec::new(); skeleton.len()];
        let mut inp_parents = vec![Vec::new(); skeleton.len()];
        for v in skeleton.internal_nodes() {
            for &p in skeleton.node(v).parents() {
                match skeleton.node(p).kind {
                    NodeKind::Input { block } => inp_parents[v].push(block),
                    NodeKind::Internal { .. } => int_parents[v].push(p),
                }
            }
        }
        let arch = Self {
            skeleton: skeleton.clone(),
            r,
            k,
            d,
            int_parents,
            inp_parents,
        };
        let count = arch.param_count_checked().unwrap_or(usize::MAX);
        if count > cap {
            return Err(NetworkError::TooManyParams { count, cap });
        }
        Ok(arch)
    }

    fn param_count_checked(&self) -> Option<usize> {
        let mut total = self.k.checked_mul(self.r)?;
        for v in self.skeleton.internal_nodes() {
            let cols = self
                .r
                .checked_mul(self.int_parents[v].len())?
                .checked_add(self.d.checked_mul(self.inp_parents[v].len())?)?
                .checked_add(1)?;
            total = total.checked_add(self.r.checked_mul(cols)?)?;
        }
        Some(total)
    }

    pub fn param_count(&self) -> usize {
        self.param_count_checked().expect("checked at construction")
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Internal parents of node `v`, in column order.
    pub fn int_parents(&self, v: usize) -> &[usize] {
        &self.int_parents[v]
    }

    /// Input blocks read by node `v`, in column order.
    pub fn inp_parents(&self, v: usize) -> &[usize] {
        &self.inp_parents[v]
    }

    /// Position of internal node `v` in [`Params::nodes`].
    pub fn slot(&self, v: usize) -> usize {
        v - self.skeleton.n_inputs()
    }
}

/// Weights of one internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeWeights {
    pub w_int: DMatrix<f64>,
    pub w_inp: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Identifies a parameter block: a role at a skeleton node, or the
/// prediction matrix (whose node index is the skeleton length).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId {
    pub node: usize,
    pub role: ParamRole,
}

/// All weights of a realization; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Indexed by internal node position (`v − n`).
    pub nodes: Vec<NodeWeights>,
    pub pred: DMatrix<f64>,
}

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        let r = arch.r;
        let nodes = arch
            .skeleton
            .internal_nodes()
            .map(|v| NodeWeights {
                w_int: DMatrix::zeros(r, r * arch.int_parents[v].len()),
                w_inp: DMatrix::zeros(r, arch.d * arch.inp_parents[v].len()),
                bias: DVector::zeros(r),
            })
            .collect();
        Self {
            nodes,
            pred: DMatrix::zeros(arch.k, r),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeWeights {
                    w_int: DMatrix::zeros(n.w_int.nrows(), n.w_int.ncols()),
                    w_inp: DMatrix::zeros(n.w_inp.nrows(), n.w_inp.ncols()),
                    bias: DVector::zeros(n.bias.len()),
                })
                .collect(),
            pred: DMatrix::zeros(self.pred.nrows(), self.pred.ncols()),
        }
    }

    /// Overwrites `self` with `other` without reallocating when the shapes
    /// agree.
    pub fn copy_from(&mut self, other: &Self) {
        if !self.same_shape(other) {
            *self = other.clone();
            return;
        }
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            a.w_int.copy_from(&b.w_int);
            a.w_inp.copy_from(&b.w_inp);
            a.bias.copy_from(&b.bias);
        }
        self.pred.copy_from(&other.pred);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.pred.shape() == other.pred.shape()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                a.w_int.shape() == b.w_int.shape()
                    && a.w_inp.shape() == b.w_inp.shape()
                    && a.bias.len() == b.bias.len()
            })
    }

    /// Blocks in a fixed order: per internal node `Internal, Input, Bias`,
    /// then the prediction matrix. Slices are column-major.
    pub fn blocks(&self, n_inputs: usize) -> Vec<(BlockId, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.nodes.len() + 1);
        for (i, nw) in self.nodes.iter().enumerate() {
            let node = n_inputs + i;
            out.push((BlockId { node, role: ParamRole::Internal }, nw.w_int.as_slice()));
            out.push((BlockId { node, role: ParamRole::Input }, nw.w_inp.as_slice()));
            out.push((BlockId { node, role: ParamRole::Bias }, nw.bias.as_slice()));
        }
        let node = n_inputs + self.nodes.len();
        out.push((BlockId { node, role: ParamRole::Prediction }, self.pred.as_slice()));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.nodes.len() + 1);
        for nw in &mut self.nodes {
            out.push(nw.w_int.as_mut_slice());
            out.push(nw.w_inp.as_mut_slice());
            out.push(nw.bias.as_mut_slice());
        }
        out.push(self.pred.as_mut_slice());
        out
    }

    fn slices(&self) -> Vec<&[f64]> {
        self.blocks(0).into_iter().map(|(_, s)| s).collect()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert!(self.same_shape(other), "parameter shapes differ");
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "parameter shapes differ");
        self.slices()
            .iter()
            .zip(other.slices())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// `‖W‖_F` over all blocks, biases and the prediction matrix included.
    pub fn frob_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Frobenius norm of the internal blocks only.
    pub fn internal_frob_norm(&self) -> f64 {
        let total: f64 = self
            .nodes
            .iter()
            .map(|n| n.w_int.norm_squared() + n.w_inp.norm_squared() + n.bias.norm_squared())
            .sum();
        total.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Coordinate `i` in the order of [`Params::blocks`].
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, value: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("flat index out of range")
    }

    /// Block containing flat coordinate `i`.
    pub fn block_of_flat(&self, n_inputs: usize, mut i: usize) -> BlockId {
        for (id, s) in self.blocks(n_inputs) {
            if i < s.len() {
                return id;
            }
            i -= s.len();
        }
        panic!("flat index out of range")
    }
}

/// `‖W‖₂`, `‖W‖′₂` and `‖W‖_F` of a weight collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNorms {
    /// Including the prediction matrix.
    pub agg2: f64,
    /// Excluding the prediction matrix.
    pub agg2_prime: f64,
    pub frob: f64,
}

/// A batch of inputs stored as one `d × m` matrix per input block.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    n: usize,
    d: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl InputBatch {
    pub fn new(n: usize, d: usize, inputs: &[&SphereInput]) -> Result<Self, InputError> {
        let m = inputs.len();
        let mut blocks = vec![DMatrix::zeros(d, m); n];
        for (j, x) in inputs.iter().enumerate() {
            x.check_shape(n, d)?;
            for (i, block) in blocks.iter_mut().enumerate() {
                block.column_mut(j).copy_from_slice(x.block(i));
            }
        }
        Ok(Self { n, d, blocks })
    }

    pub fn from_inputs(n: usize, d: usize, inputs: &[SphereInput]) -> Result<Self, InputError> {
        let refs: Vec<&SphereInput> = inputs.iter().collect();
        Self::new(n, d, &refs)
    }

    pub fn len(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.ncols())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }
}

/// Every neuron's pre-activation and output for a batch; column `j` belongs
/// to example `j`. Input nodes have empty entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
    output: usize,
    prediction: DMatrix<f64>,
}

impl ForwardTrace {
    /// `R^v_x` for every example (`r × m`).
    pub fn node_output(&self, v: usize) -> &DMatrix<f64> {
        &self.post[v]
    }

    pub fn pre_activation(&self, v: usize) -> &DMatrix<f64> {
        &self.pre[v]
    }

    /// The representation layer `R_x` (`r × m`).
    pub fn representation(&self) -> &DMatrix<f64> {
        &self.post[self.output]
    }

    /// `h_W(x)` (`k × m`).
    pub fn prediction(&self) -> &DMatrix<f64> {
        &self.prediction
    }

    pub fn batch_len(&self) -> usize {
        self.prediction.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizedNetwork {
    arch: Arc<Architecture>,
    params: Params,
}

impl RealizedNetwork {
    /// Realization with all weights zero.
    pub fn realize(skeleton: &Skeleton, r: usize, k: usize, d: usize) -> Result<Self, NetworkError> {
        Ok(Self::from_architecture(Arc::new(Architecture::new(skeleton, r, k, d)?)))
    }

    pub fn from_architecture(arch: Arc<Architecture>) -> Self {
        let params = Params::zeros(&arch);
        Self { arch, params }
    }

    pub fn with_params(arch: Arc<Architecture>, params: Params) -> Result<Self, NetworkError> {
        if !Params::zeros(&arch).same_shape(&params) {
            return Err(NetworkError::ShapeMismatch);
        }
        Ok(Self { arch, params })
    }

    /// β-biased random weights:
    /// `W^{v,inp} ~ N(0, (1−β)/deg v)`, `W^{v,Int} ~ N(0, (1−β)/(r·deg v))`,
    /// `b^v ~ N(0, β)` and `W^pred ~ N(0, 1/r)` or zero.
    ///
    /// Each block draws from its own stream keyed by `(seed, node, role)`,
    /// filling entries row by row.
    pub fn init_beta_biased(mut self, beta: f64, seed: u64, zero_prediction: bool) -> Result<Self, NetworkError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(NetworkError::BetaOutOfRange(beta));
        }
        let arch = Arc::clone(&self.arch);
        let r = arch.r as f64;
        for v in arch.skeleton.internal_nodes() {
            let deg = arch.skeleton.deg(v) as f64;
            let nw = &mut self.params.nodes[arch.slot(v)];
            fill_gaussian(&mut nw.w_int, ((1.0 - beta) / (r * deg)).sqrt(), seed, v, ParamRole::Internal);
            fill_gaussian(&mut nw.w_inp, ((1.0 - beta) / deg).sqrt(), seed, v, ParamRole::Input);
            let mut g = param_stream(seed, v, ParamRole::Bias);
            let sd = beta.sqrt();
            nw.bias.iter_mut().for_each(|b| *b = sd * g.sample::<f64, _>(StandardNormal));
        }
        let pred_sd = if zero_prediction { 0.0 } else { (1.0 / r).sqrt() };
        fill_gaussian(
            &mut self.params.pred,
            pred_sd,
            seed,
            arch.skeleton.len(),
            ParamRole::Prediction,
        );
        Ok(self)
    }

    pub fn initialized(
        skeleton: &Skeleton,
        r: usize,
        k: usize,
        d: usize,
        beta: f64,
        seed: u64,
        zero_prediction: bool,
    ) -> Result<Self, NetworkError> {
        Self::realize(skeleton, r, k, d)?.init_beta_biased(beta, seed, zero_prediction)
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.arch.skeleton
    }

    pub fn r(&self) -> usize {
        self.arch.r
    }

    pub fn k(&self) -> usize {
        self.arch.k
    }

    pub fn d(&self) -> usize {
        self.arch.d
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Params) -> Result<(), NetworkError> {
        if !self.params.same_shape(&params) {
            return Err(NetworkError::ShapeMismatch);
        }
        self.params = params;
        Ok(())
    }

    pub fn node_weights(&self, v: usize) -> &NodeWeights {
        &self.params.nodes[self.arch.slot(v)]
    }

    pub fn batch(&self, inputs: &[SphereInput]) -> Result<InputBatch, InputError> {
        InputBatch::from_inputs(self.skeleton().n_inputs(), self.d(), inputs)
    }

    pub fn forward(&self, x: &SphereInput) -> Result<ForwardTrace, NetworkError> {
        self.forward_batch(&self.batch(std::slice::from_ref(x))?)
    }

    /// Pre-activations and outputs of every neuron on a batch.
    pub fn forward_batch(&self, batch: &InputBatch) -> Result<ForwardTrace, NetworkError> {
        let arch = &*self.arch;
        let skel = &arch.skeleton;
        if batch.n != skel.n_inputs() || batch.d != arch.d {
            return Err(InputError::Shape {
                n: skel.n_inputs(),
                d: arch.d,
                got_n: batch.n,
                got_d: batch.d,
            }
            .into());
        }
        let m = batch.len();
        let r = arch.r;
        let d = arch.d;
        let mut pre = vec![DMatrix::zeros(0, 0); skel.len()];
        let mut post = vec![DMatrix::zeros(0, 0); skel.len()];
        for v in skel.internal_nodes() {
            let nw = self.node_weights(v);
            let mut z = DMatrix::from_fn(r, m, |i, _| nw.bias[i]);
            for (j, &p) in arch.int_parents[v].iter().enumerate() {
                mul_add_cols(&mut z, &nw.w_int, j * r, r, &post[p]);
            }
            for (j, &b) in arch.inp_parents[v].iter().enumerate() {
                z.gemm(1.0, &nw.w_inp.columns(j * d, d), &batch.blocks[b], 1.0);
            }
            let act = skel.node(v).activation().expect("internal node");
            let out = z.map(|t| act.eval(t));
            if out.iter().any(|t| !t.is_finite()) {
                return Err(NetworkError::NotFinite(skel.node(v).name.clone()));
            }
            pre[v] = z;
            post[v] = out;
        }
        let output = skel.output();
        let prediction = &self.params.pred * &post[output];
        if prediction.iter().any(|t| !t.is_finite()) {
            return Err(NetworkError::NotFinite("prediction".into()));
        }
        Ok(ForwardTrace {
            pre,
            post,
            output,
            prediction,
        })
    }

    /// Representation-layer outputs for a batch, processed in chunks of
    /// `chunk` examples to bound memory.
    pub fn representations(&self, inputs: &[SphereInput], chunk: usize) -> Result<DMatrix<f64>, NetworkError> {
        let mut out = DMatrix::zeros(self.r(), inputs.len());
        for (c, part) in inputs.chunks(chunk.max(1)).enumerate() {
            let trace = self.forward_batch(&self.batch(part)?)?;
            out.columns_mut(c * chunk.max(1), part.len())
                .copy_from(trace.representation());
        }
        Ok(out)
    }

    /// `k_W(x, y) = ⟨R_x, R_y⟩ / r`.
    pub fn empirical_kernel(&self, x: &SphereInput, y: &SphereInput) -> Result<f64, NetworkError> {
        let trace = self.forward_batch(&self.batch(&[x.clone(), y.clone()])?)?;
        let rep = trace.representation();
        Ok(rep.column(0).dot(&rep.column(1)) / self.r() as f64)
    }

    /// Spectral norm of every block, in [`Params::blocks`] order. Input and
    /// bias blocks are divided by `√r`, as in the aggregate norms.
    pub fn scaled_block_norms(&self) -> Result<Vec<(BlockId, f64)>, NetworkError> {
        scaled_block_norms(&self.params, self.skeleton().n_inputs(), self.r())
    }

    pub fn weight_norms(&self) -> Result<WeightNorms, NetworkError> {
        let blocks = self.scaled_block_norms()?;
        let agg2_prime = blocks
            .iter()
            .filter(|(id, _)| id.role != ParamRole::Prediction)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        let pred = blocks
            .iter()
            .find(|(id, _)| id.role == ParamRole::Prediction)
            .map_or(0.0, |(_, v)| *v);
        Ok(WeightNorms {
            agg2: agg2_prime.max(pred),
            agg2_prime,
            frob: self.params.frob_norm(),
        })
    }

    /// Whether the weights lie in `W_R` (or `W′_R` without the prediction matrix).
    pub fn in_ball(&self, radius: f64, include_pred: bool) -> Result<bool, NetworkError> {
        let norms = self.weight_norms()?;
        Ok(if include_pred { norms.agg2 } else { norms.agg2_prime } <= radius)
    }
}

fn fill_gaussian(m: &mut DMatrix<f64>, sd: f64, seed: u64, node: usize, role: ParamRole) {
    let mut g = param_stream(seed, node, role);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] = sd * g.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Per-block norms entering `‖W‖₂`: `‖W^{v,Int}‖₂`, `‖W^{v,inp}‖₂/√r`,
/// `‖b^v‖/√r` and `‖W^pred‖₂`.
pub fn scaled_block_norms(params: &Params, n_inputs: usize, r: usize) -> Result<Vec<(BlockId, f64)>, NetworkError> {
    let sqrt_r = (r as f64).sqrt();
    let mut out = Vec::with_capacity(3 * params.nodes.len() + 1);
    for (i, nw) in params.nodes.iter().enumerate() {
        let node = n_inputs + i;
        out.push((BlockId { node, role: ParamRole::Internal }, spectral_norm(&nw.w_int)?));
        out.push((BlockId { node, role: ParamRole::Input }, spectral_norm(&nw.w_inp)? / sqrt_r));
        out.push((BlockId { node, role: ParamRole::Bias }, nw.bias.norm() / sqrt_r));
    }
    out.push((
        BlockId {
            node: n_inputs + params.nodes.len(),
            role: ParamRole::Prediction,
        },
        spectral_norm(&params.pred)?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationSpec;
    use crate::rng;
    use crate::skeleton::{layered, SkeletonSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(act: ActivationSpec, n: usize) -> Skeleton {
        layered(n, &[], act)
    }

    #[test]
    fn shapes_of_a_five_four_realization() {
        let net = RealizedNetwork::realize(&single(ActivationSpec::relu(), 1), 5, 4, 2).unwrap();
        let out = net.skeleton().output();
        assert_eq!(net.node_weights(out).w_inp.shape(), (5, 2));
        assert_eq!(net.node_weights(out).w_int.shape(), (5, 0));
        assert_eq!(net.params().pred.shape(), (4, 5));
        assert!(net.params().pred.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn minimal_shapes() {
        let net = RealizedNetwork::realize(&single(ActivationSpec::relu(), 1), 1, 1, 3).unwrap();
        let out = net.skeleton().output();
        assert_eq!(net.node_weights(out).w_inp.shape(), (1, 3));
        assert_eq!(net.params().pred.shape(), (1, 1));
        assert_eq!(net.arch().param_count(), 3 + 1 + 1);
        assert_eq!(net.params().len(), 5);
    }

    #[test]
    fn internal_block_width_follows_parent_count() {
        let s = layered(2, &[3], ActivationSpec::relu());
        let net = RealizedNetwork::realize(&s, 8, 1, 2).unwrap();
        assert_eq!(net.node_weights(s.output()).w_int.shape(), (8, 24));
    }

    #[test]
    fn parameter_cap_is_enforced() {
        let s = layered(2, &[3], ActivationSpec::relu());
        assert!(matches!(
            Architecture::with_cap(&s, 100, 1, 2, 1000),
            Err(NetworkError::TooManyParams { .. })
        ));
        assert!(matches!(
            RealizedNetwork::realize(&s, usize::MAX / 2, 1, 2),
            Err(NetworkError::TooManyParams { .. })
        ));
        assert!(matches!(
            RealizedNetwork::realize(&s, 0, 1, 2),
            Err(NetworkError::ZeroDimension { .. })
        ));
    }

    #[test]
    fn mixed_parents_split_into_internal_and_input_columns() {
        let relu = ActivationSpec::relu();
        let s = SkeletonSpec::new()
            .input("x1")
            .input("x2")
            .node("h", relu, &["x1"])
            .node("o", relu, &["x2", "h", "x1"])
            .output("o")
            .validate()
            .unwrap();
        let net = RealizedNetwork::realize(&s, 4, 2, 3).unwrap();
        let o = s.index_of("o").unwrap();
        assert_eq!(net.arch().int_parents(o), &[s.index_of("h").unwrap()]);
        assert_eq!(net.arch().inp_parents(o), &[1, 0]);
        assert_eq!(net.node_weights(o).w_inp.shape(), (4, 6));
    }

    #[test]
    fn full_bias_init_zeroes_weights() {
        let s = layered(2, &[3], ActivationSpec::relu());
        let net = RealizedNetwork::initialized(&s, 16, 2, 3, 1.0, 4, false).unwrap();
        for nw in &net.params().nodes {
            assert!(nw.w_int.iter().chain(nw.w_inp.iter()).all(|v| *v == 0.0));
            assert!(nw.bias.iter().any(|v| *v != 0.0));
        }
        assert!(matches!(
            RealizedNetwork::realize(&s, 4, 1, 2).unwrap().init_beta_biased(1.2, 0, false),
            Err(NetworkError::BetaOutOfRange(_))
        ));
    }

    #[test]
    fn input_weight_variance_is_one_over_degree() {
        let s = layered(2, &[], ActivationSpec::relu());
        let net = RealizedNetwork::initialized(&s, 20_000, 1, 3, 0.0, 1, false).unwrap();
        let w = &net.node_weights(s.output()).w_inp;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        // 60000 draws; the standard error of the variance is about 0.003.
        assert_abs_diff_eq!(var, 0.5, epsilon = 0.015);
    }

    #[test]
    fn same_seed_same_weights() {
        let s = layered(3, &[4, 2], ActivationSpec::tanh());
        let a = RealizedNetwork::initialized(&s, 8, 3, 2, 0.3, 99, false).unwrap();
        let b = RealizedNetwork::initialized(&s, 8, 3, 2, 0.3, 99, false).unwrap();
        let c = RealizedNetwork::initialized(&s, 8, 3, 2, 0.3, 100, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_relu_forward_is_zero() {
        let s = layered(2, &[3], ActivationSpec::relu());
        let net = RealizedNetwork::realize(&s, 6, 2, 4).unwrap();
        let x = SphereInput::sample(2, 4, &mut rng::stream(1, 0));
        let trace = net.forward(&x).unwrap();
        assert!(trace.representation().iter().all(|v| *v == 0.0));
        assert!(trace.prediction().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_prediction_layer_predicts_zero() {
        let s = layered(2, &[3], ActivationSpec::relu());
        let net = RealizedNetwork::initialized(&s, 16, 3, 4, 0.1, 5, true).unwrap();
        let mut g = rng::stream(2, 0);
        for _ in 0..10 {
            let x = SphereInput::sample(2, 4, &mut g);
            assert!(net.forward(&x).unwrap().prediction().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identity_network_matches_linear_algebra() {
        let id = ActivationSpec::identity();
        let s = SkeletonSpec::new()
            .input("x1")
            .input("x2")
            .node("a", id, &["x1", "x2"])
            .node("o", id, &["a", "x2"])
            .output("o")
            .validate()
            .unwrap();
        let (r, d) = (5, 3);
        let net = RealizedNetwork::initialized(&s, r, 2, d, 0.0, 8, false).unwrap();
        let x = SphereInput::sample(2, d, &mut rng::stream(8, 1));
        let x1 = DVector::from_column_slice(x.block(0));
        let x2 = DVector::from_column_slice(x.block(1));
        let a = net.node_weights(s.index_of("a").unwrap());
        let o = net.node_weights(s.index_of("o").unwrap());
        let ra = a.w_inp.columns(0, d) * &x1 + a.w_inp.columns(d, d) * &x2 + &a.bias;
        let ro = &o.w_int * &ra + &o.w_inp * &x2 + &o.bias;
        let h = &net.params().pred * &ro;
        let trace = net.forward(&x).unwrap();
        assert!((trace.prediction().column(0) - &h).amax() < 1e-13);
        // Linearity in x for the bias-free part.
        let scaled_a = id.eval(1.0);
        assert_abs_diff_eq!(scaled_a, 1.0);
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let s = layered(2, &[], ActivationSpec::relu());
        let net = RealizedNetwork::realize(&s, 2, 1, 3).unwrap();
        let x = SphereInput::sample(2, 4, &mut rng::stream(1, 0));
        assert!(matches!(net.forward(&x), Err(NetworkError::Input(_))));
    }

    #[test]
    fn empirical_kernel_with_one_neuron() {
        let s = layered(1, &[], ActivationSpec::tanh());
        let net = RealizedNetwork::initialized(&s, 1, 1, 3, 0.2, 3, false).unwrap();
        let mut g = rng::stream(3, 1);
        let x = SphereInput::sample(1, 3, &mut g);
        let y = SphereInput::sample(1, 3, &mut g);
        let rx = net.forward(&x).unwrap().representation()[(0, 0)];
        let ry = net.forward(&y).unwrap().representation()[(0, 0)];
        assert_abs_diff_eq!(net.empirical_kernel(&x, &y).unwrap(), rx * ry, epsilon = 1e-15);
        assert!(net.empirical_kernel(&x, &x).unwrap() >= 0.0);
    }

    #[test]
    fn zero_weights_have_zero_norms() {
        let s = layered(2, &[3], ActivationSpec::relu());
        let net = RealizedNetwork::realize(&s, 8, 2, 3).unwrap();
        let norms = net.weight_norms().unwrap();
        assert_eq!(norms, WeightNorms { agg2: 0.0, agg2_prime: 0.0, frob: 0.0 });
        assert!(net.in_ball(0.0, true).unwrap());
    }

    #[test]
    fn aggregate_norm_uses_scaled_blocks() {
        let s = layered(1, &[], ActivationSpec::relu());
        let mut net = RealizedNetwork::realize(&s, 4, 1, 2).unwrap();
        let out = s.output();
        let slot = net.arch().slot(out);
        net.params_mut().nodes[slot].bias.fill(1.0);
        net.params_mut().pred[(0, 0)] = 3.0;
        let norms = net.weight_norms().unwrap();
        assert_abs_diff_eq!(norms.agg2_prime, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norms.agg2, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norms.frob, (4.0f64 + 9.0).sqrt(), epsilon = 1e-12);
        assert!(net.in_ball(1.0, false).unwrap());
        assert!(!net.in_ball(1.0, true).unwrap());
    }

    #[test]
    fn flat_access_round_trips() {
        let s = layered(2, &[2], ActivationSpec::relu());
        let mut p = RealizedNetwork::initialized(&s, 3, 2, 2, 0.5, 1, false).unwrap().params().clone();
        let n = p.len();
        for i in [0, n / 2, n - 1] {
            let old = p.get_flat(i);
            p.set_flat(i, old + 1.0);
            assert_eq!(p.get_flat(i), old + 1.0);
        }
        assert_eq!(p.block_of_flat(2, n - 1).role, ParamRole::Prediction);
        let q = p.clone();
        p.axpy(-1.0, &q);
        assert_eq!(p.frob_norm(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn random_layered_nets_run(
            seed in any::<u64>(),
            n in 1usize..4,
            widths in proptest::collection::vec(1usize..4, 0..3),
            r in 1usize..6,
            k in 1usize..4,
            d in 1usize..5,
            m in 1usize..5,
        ) {
            let s = layered(n, &widths, ActivationSpec::erf());
            let net = RealizedNetwork::initialized(&s, r, k, d, 0.25, seed, false).unwrap();
            let mut g = rng::stream(seed, 1);
            let xs: Vec<_> = (0..m).map(|_| SphereInput::sample(n, d, &mut g)).collect();
            let trace = net.forward_batch(&net.batch(&xs).unwrap()).unwrap();
            prop_assert_eq!(trace.prediction().shape(), (k, m));
            prop_assert_eq!(trace.representation().shape(), (r, m));
            // Batched and single-example passes agree.
            let single = net.forward(&xs[m - 1]).unwrap();
            let diff = (single.prediction().column(0) - trace.prediction().column(m - 1)).amax();
            prop_assert!(diff < 1e-12);
        }
    }
}
