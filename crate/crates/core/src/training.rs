//! Back-propagation through a realized network and plain mini-batch SGD,
//! with the diagnostics used to check the training guarantees: drift of the
//! representation layer, aggregate weight norms, gradient norms and
//! directional derivatives.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::input::SphereInput;
use crate::linalg::{spectral_norm, tr_mul_add_cols};
use crate::loss::{LossError, LossSpec, Target};
use crate::network::{scaled_block_norms, InputBatch, NetworkError, ParamRole, Params, RealizedNetwork};
use crate::rng;

/// Batch losses above this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Default cap on strided weight snapshots per run.
pub const DEFAULT_MAX_SNAPSHOTS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite gradient")]
    NotFiniteGradient,
    #[error("batch loss {loss} at step {step} exceeds the divergence limit")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid SGD configuration: {0}")]
    InvalidConfig(String),
    #[error("direction matrix must be nonzero with shape {expected:?}")]
    BadDirection { expected: (usize, usize) },
    #[error("empty batch")]
    EmptyBatch,
    #[error("data source failed: {0}")]
    Data(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: SphereInput,
    pub y: Target,
}

/// Supplies mini-batches.
pub trait DataSource {
    fn next_batch(&mut self, m: usize) -> Result<Vec<Example>, TrainError>;
}

/// Cycles a fixed training set in order.
#[derive(Debug, Clone)]
pub struct FixedSet {
    examples: Vec<Example>,
    pos: usize,
}

impl FixedSet {
    pub fn new(examples: Vec<Example>) -> Self {
        assert!(!examples.is_empty(), "fixed set must be nonempty");
        Self { examples, pos: 0 }
    }
}

impl DataSource for FixedSet {
    fn next_batch(&mut self, m: usize) -> Result<Vec<Example>, TrainError> {
        Ok((0..m)
            .map(|_| {
                let e = self.examples[self.pos].clone();
                self.pos = (self.pos + 1) % self.examples.len();
                e
            })
            .collect())
    }
}

/// Draws every example fresh from a sampler.
pub struct FreshSamples<F: FnMut() -> Result<Example, TrainError>>(pub F);

impl<F: FnMut() -> Result<Example, TrainError>> DataSource for FreshSamples<F> {
    fn next_batch(&mut self, m: usize) -> Result<Vec<Example>, TrainError> {
        (0..m).map(|_| (self.0)()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Every weight is trained.
    Full,
    /// Only `W^pred` is trained; internal gradients are never formed.
    LastLayerOnly,
}

/// Which gradients backprop forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMask {
    All,
    PredictionOnly,
}

/// Loss and gradient of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Params,
}

fn targets_and_batch(net: &RealizedNetwork, batch: &[Example]) -> Result<(InputBatch, Vec<Target>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let refs: Vec<&SphereInput> = batch.iter().map(|e| &e.x).collect();
    let inputs = InputBatch::new(net.skeleton().n_inputs(), net.d(), &refs).map_err(NetworkError::from)?;
    Ok((inputs, batch.iter().map(|e| e.y).collect()))
}

/// Average loss of `net` over `batch`.
pub fn batch_loss(net: &RealizedNetwork, batch: &[Example], loss: &LossSpec) -> Result<f64, TrainError> {
    let (inputs, targets) = targets_and_batch(net, batch)?;
    let trace = net.forward_batch(&inputs)?;
    let pred = trace.prediction();
    let mut total = 0.0;
    for (j, y) in targets.iter().enumerate() {
        let col: Vec<f64> = pred.column(j).iter().copied().collect();
        total += loss.eval(&col, y)?;
    }
    Ok(total / targets.len() as f64)
}

/// `∇ L_S(W)`, the batch-averaged gradient, by reverse accumulation in
/// reverse topological order.
pub fn backprop(net: &RealizedNetwork, batch: &[Example], loss: &LossSpec) -> Result<BatchGradient, TrainError> {
    backprop_masked(net, batch, loss, GradMask::All)
}

pub fn backprop_masked(
    net: &RealizedNetwork,
    batch: &[Example],
    loss: &LossSpec,
    mask: GradMask,
) -> Result<BatchGradient, TrainError> {
    let mut grad = net.params().zeros_like();
    let loss = backprop_into(net, batch, loss, mask, &mut grad)?;
    Ok(BatchGradient { loss, grad })
}

/// [`backprop_masked`] writing into `grad`, which must have the shape of the
/// network's parameters. Every block of `grad` is overwritten except those
/// excluded by `mask`, which are left as they are. Returns the batch loss.
pub fn backprop_into(
    net: &RealizedNetwork,
    batch: &[Example],
    loss: &LossSpec,
    mask: GradMask,
    grad: &mut Params,
) -> Result<f64, TrainError> {
    let (inputs, targets) = targets_and_batch(net, batch)?;
    let trace = net.forward_batch(&inputs)?;
    let m = targets.len();
    let k = net.k();
    let pred = trace.prediction();
    let mut g = DMatrix::zeros(k, m);
    let mut total = 0.0;
    for (j, y) in targets.iter().enumerate() {
        let col: Vec<f64> = pred.column(j).iter().copied().collect();
        total += loss.eval(&col, y)?;
        let gj = loss.grad(&col, y)?;
        for (i, v) in gj.into_iter().enumerate() {
            g[(i, j)] = v / m as f64;
        }
    }

    let arch = net.arch().clone();
    let skel = arch.skeleton();
    let params = net.params();
    let rep = trace.representation();
    grad.pred.gemm(1.0, &g, &rep.transpose(), 0.0);

    if mask == GradMask::All {
        let (r, d) = (arch.r(), arch.d());
        let mut upstream: Vec<Option<DMatrix<f64>>> = vec![None; skel.len()];
        upstream[skel.output()] = Some(params.pred.tr_mul(&g));
        for v in skel.internal_nodes().rev() {
            let slot = arch.slot(v);
            let gw = &mut grad.nodes[slot];
            let Some(du) = upstream[v].take() else {
                gw.w_int.fill(0.0);
                gw.w_inp.fill(0.0);
                gw.bias.fill(0.0);
                continue;
            };
            let act = skel.node(v).activation().expect("internal node");
            let pre = trace.pre_activation(v);
            let dz = du.zip_map(pre, |a, z| a * act.derivative(z));
            // Forward outputs are already checked, so a finite `dz` gives
            // finite blocks below.
            if dz.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NotFiniteGradient);
            }
            let w = &params.nodes[slot];
            for i in 0..r {
                gw.bias[i] = dz.row(i).sum();
            }
            for (j, &p) in arch.int_parents(v).iter().enumerate() {
                let rp = trace.node_output(p);
                gw.w_int.columns_mut(j * r, r).gemm(1.0, &dz, &rp.transpose(), 0.0);
                let acc = upstream[p].get_or_insert_with(|| DMatrix::zeros(r, m));
                tr_mul_add_cols(acc, &w.w_int, j * r, r, &dz);
            }
            for (j, &b) in arch.inp_parents(v).iter().enumerate() {
                gw.w_inp
                    .columns_mut(j * d, d)
                    .gemm(1.0, &dz, &inputs.block(b).transpose(), 0.0);
            }
        }
    }
    if grad.pred.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NotFiniteGradient);
    }
    Ok(total / m as f64)
}

/// `⟨∇_{W^pred} L_S, W*/‖W*‖_F⟩`.
pub fn directional_derivative(
    net: &RealizedNetwork,
    w_star: &DMatrix<f64>,
    batch: &[Example],
    loss: &LossSpec,
) -> Result<f64, TrainError> {
    let expected = (net.k(), net.r());
    let norm = w_star.norm();
    if w_star.shape() != expected || norm == 0.0 {
        return Err(TrainError::BadDirection { expected });
    }
    let g = backprop_masked(net, batch, loss, GradMask::PredictionOnly)?;
    Ok(g.grad.pred.dot(w_star) / norm)
}

/// Plain SGD settings. The applied step size is `η = η′/r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub eta_prime: f64,
    pub eta: f64,
    pub steps: usize,
    pub batch: usize,
    pub beta: f64,
    pub zero_prediction_layer: bool,
    pub seed: u64,
    pub loss: LossSpec,
    pub mode: UpdateMode,
    pub max_snapshots: usize,
}

impl SgdConfig {
    pub fn new(eta_prime: f64, r: usize, steps: usize, batch: usize, loss: LossSpec) -> Self {
        Self {
            eta_prime,
            eta: eta_prime / r as f64,
            steps,
            batch,
            beta: 0.0,
            zero_prediction_layer: true,
            seed: 0,
            loss,
            mode: UpdateMode::Full,
            max_snapshots: DEFAULT_MAX_SNAPSHOTS,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if self.batch == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !self.loss.is_differentiable() {
            return bad("loss must be differentiable");
        }
        Ok(())
    }

    /// The network this configuration starts from.
    pub fn init_network(
        &self,
        skeleton: &crate::skeleton::Skeleton,
        r: usize,
        k: usize,
        d: usize,
    ) -> Result<RealizedNetwork, TrainError> {
        Ok(RealizedNetwork::initialized(
            skeleton,
            r,
            k,
            d,
            self.beta,
            self.seed,
            self.zero_prediction_layer,
        )?)
    }

    fn mask(&self) -> GradMask {
        match self.mode {
            UpdateMode::Full => GradMask::All,
            UpdateMode::LastLayerOnly => GradMask::PredictionOnly,
        }
    }
}

/// Population-loss estimator called during training.
pub type PopulationLoss<'a> = dyn FnMut(&RealizedNetwork) -> Result<f64, TrainError> + 'a;

/// What to measure while training.
pub struct Monitor<'a> {
    /// Inputs on which `‖R_x(W_t) − R_x(W₀)‖` is tracked.
    pub probes: Vec<SphereInput>,
    /// Exact aggregate norms every this many steps (0: never).
    pub norm_every: usize,
    /// A certified upper bound on `‖W_t‖₂` at every step.
    pub norm_bound: bool,
    /// Population loss every this many steps (0: never).
    pub pop_every: usize,
    pub pop_loss: Option<Box<PopulationLoss<'a>>>,
    /// Direction for [`directional_derivative`] on every batch.
    pub direction: Option<DMatrix<f64>>,
}

impl Default for Monitor<'_> {
    fn default() -> Self {
        Self {
            probes: Vec::new(),
            norm_every: 0,
            norm_bound: false,
            pop_every: 0,
            pop_loss: None,
            direction: None,
        }
    }
}

/// One SGD step: `batch_loss` and gradient norms are measured at `W_{t−1}`
/// on the batch used for the update; every other field at `W_t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepRecord {
    pub step: usize,
    pub batch_loss: f64,
    pub pop_loss: Option<f64>,
    pub drift_max: Option<f64>,
    pub agg2: Option<f64>,
    pub agg2_prime: Option<f64>,
    /// Upper bound on `‖W_t‖₂`: for each block its initial spectral norm
    /// plus the Frobenius norm of its change.
    pub agg2_upper: Option<f64>,
    pub grad_frob: f64,
    pub dir_deriv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub eta_prime: f64,
    pub eta: f64,
    pub r: usize,
    pub initial_agg2: Option<f64>,
    pub initial_agg2_prime: Option<f64>,
    pub initial_pop_loss: Option<f64>,
    pub records: Vec<StepRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Smallest recorded population loss, counting `t = 0`.
    pub fn min_pop_loss(&self) -> Option<f64> {
        self.initial_pop_loss
            .into_iter()
            .chain(self.records.iter().filter_map(|r| r.pop_loss))
            .reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("step,batch_loss,pop_loss_estimate,drift_max,agg2_prime,grad_frob,dir_deriv\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{:?},{}",
                r.step,
                r.batch_loss,
                opt(r.pop_loss),
                opt(r.drift_max),
                opt(r.agg2_prime),
                r.grad_frob,
                opt(r.dir_deriv)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub trace: TrainTrace,
    /// Strided snapshots of `W_t`, `W₀` first.
    pub snapshots: Vec<Snapshot>,
    /// The weights at which the lowest batch loss was measured.
    pub best: Option<Snapshot>,
}

/// Runs `config.steps` SGD updates `W ← W − η ∇L_{S_t}(W)` on `net`.
pub fn sgd_run(
    net: &mut RealizedNetwork,
    config: &SgdConfig,
    data: &mut dyn DataSource,
    monitor: &mut Monitor<'_>,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    let r = net.r();
    let eta = config.eta;
    let n_inputs = net.skeleton().n_inputs();
    let mut trace = TrainTrace {
        eta_prime: config.eta_prime,
        eta,
        r,
        ..TrainTrace::default()
    };
    let stride = (config.steps / config.max_snapshots.max(1)).max(1);
    let mut snapshots = vec![Snapshot {
        step: 0,
        params: net.params().clone(),
    }];
    let mut best: Option<Snapshot> = None;
    let mut best_loss = f64::INFINITY;

    let probe_batch = if monitor.probes.is_empty() {
        None
    } else {
        Some(net.batch(&monitor.probes).map_err(NetworkError::from)?)
    };
    let probe_base = match &probe_batch {
        Some(b) => Some(net.forward_batch(b)?.representation().clone()),
        None => None,
    };
    let base_params = net.params().clone();
    let base_block_norms = if monitor.norm_bound || monitor.norm_every > 0 {
        let norms = scaled_block_norms(net.params(), n_inputs, r)?;
        let agg2_prime = norms
            .iter()
            .filter(|(id, _)| id.role != ParamRole::Prediction)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        let agg2 = norms.iter().map(|(_, v)| *v).fold(0.0, f64::max);
        trace.initial_agg2 = Some(agg2);
        trace.initial_agg2_prime = Some(agg2_prime);
        Some(norms)
    } else {
        None
    };
    if let Some(f) = monitor.pop_loss.as_mut() {
        if monitor.pop_every > 0 {
            trace.initial_pop_loss = Some(f(net)?);
        }
    }

    let mask = config.mask();
    let mut grad = net.params().zeros_like();
    for t in 1..=config.steps {
        let batch = data.next_batch(config.batch)?;
        let batch_loss = backprop_into(net, &batch, &config.loss, mask, &mut grad)?;
        if !batch_loss.is_finite() || batch_loss > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { step: t, loss: batch_loss });
        }
        let mut rec = StepRecord {
            step: t,
            batch_loss,
            grad_frob: match mask {
                GradMask::All => grad.frob_norm(),
                GradMask::PredictionOnly => grad.pred.norm(),
            },
            ..StepRecord::default()
        };
        if let Some(w) = &monitor.direction {
            rec.dir_deriv = Some(grad.pred.dot(w) / w.norm());
        }
        if batch_loss < best_loss {
            best_loss = batch_loss;
            match &mut best {
                Some(b) => {
                    b.step = t - 1;
                    b.params.copy_from(net.params());
                }
                None => {
                    best = Some(Snapshot {
                        step: t - 1,
                        params: net.params().clone(),
                    })
                }
            }
        }

        if eta != 0.0 {
            match mask {
                GradMask::All => net.params_mut().axpy(-eta, &grad),
                GradMask::PredictionOnly => {
                    let pred = &mut net.params_mut().pred;
                    pred.iter_mut().zip(grad.pred.iter()).for_each(|(w, g)| *w += -eta * g);
                }
            }
        }

        if let (Some(b), Some(base)) = (&probe_batch, &probe_base) {
            let rep = net.forward_batch(b)?.representation().clone();
            let drift = (0..rep.ncols())
                .map(|j| (rep.column(j) - base.column(j)).norm())
                .fold(0.0, f64::max);
            rec.drift_max = Some(drift);
        }
        if monitor.norm_bound {
            let base_norms = base_block_norms.as_ref().expect("computed above");
            rec.agg2_upper = Some(norm_upper_bound(&base_params, net.params(), base_norms, n_inputs, r)?);
        }
        if monitor.norm_every > 0 && t % monitor.norm_every == 0 {
            let norms = net.weight_norms()?;
            rec.agg2 = Some(norms.agg2);
            rec.agg2_prime = Some(norms.agg2_prime);
        }
        if monitor.pop_every > 0 && (t % monitor.pop_every == 0 || t == config.steps) {
            if let Some(f) = monitor.pop_loss.as_mut() {
                rec.pop_loss = Some(f(net)?);
            }
        }
        if t % stride == 0 {
            snapshots.push(Snapshot {
                step: t,
                params: net.params().clone(),
            });
        }
        trace.records.push(rec);
    }
    Ok(TrainResult { trace, snapshots, best })
}

/// `max_B (‖B₀‖₂ + ‖B_t − B₀‖_F)` over blocks, with the input and bias
/// blocks scaled by `1/√r`; the small prediction block is measured exactly.
fn norm_upper_bound(
    base: &Params,
    current: &Params,
    base_norms: &[(crate::network::BlockId, f64)],
    n_inputs: usize,
    r: usize,
) -> Result<f64, TrainError> {
    let sqrt_r = (r as f64).sqrt();
    let mut bound = 0.0f64;
    let cur_blocks = current.blocks(n_inputs);
    let base_blocks = base.blocks(n_inputs);
    for (((id, cur), (_, b0)), (_, n0)) in cur_blocks.iter().zip(&base_blocks).zip(base_norms) {
        let value = if id.role == ParamRole::Prediction {
            spectral_norm(&current.pred).map_err(NetworkError::from)?
        } else {
            let delta = cur.iter().zip(*b0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale = if id.role == ParamRole::Internal { 1.0 } else { sqrt_r };
            n0 + delta / scale
        };
        bound = bound.max(value);
    }
    Ok(bound)
}

/// One row of a [`DriftReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub step: usize,
    pub drift: f64,
    /// `t η′ α²`.
    pub bound: f64,
    pub norm: Option<f64>,
    /// `t ≤ √r / (2 η′ α)` and `W₀ ∈ W_{1.5}`.
    pub in_range: bool,
    pub drift_violation: bool,
    /// `‖W_t‖₂ > 2` by the recorded norm.
    pub norm_violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub alpha: f64,
    pub eta_prime: f64,
    pub t_max: f64,
    pub init_in_ball: bool,
    pub rows: Vec<DriftRow>,
}

impl DriftReport {
    /// Violations at steps where the bounds are claimed to hold.
    pub fn violations(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.in_range && (r.drift_violation || r.norm_violation))
            .count()
    }

    /// Violations at any step, in range or not.
    pub fn violations_anywhere(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.drift_violation || r.norm_violation)
            .count()
    }
}

/// Compares recorded drift with `t η′ α²` and the recorded norm bound with 2.
///
/// `eta_prime` is the unscaled rate; the applied step is `η′/r`. A step is in
/// range when `t ≤ √r / (2 η′ α)` and the initial weights lie in `W_{1.5}`.
pub fn drift_report(trace: &TrainTrace, alpha: f64, eta_prime: f64, r: usize) -> DriftReport {
    let t_max = if eta_prime > 0.0 {
        (r as f64).sqrt() / (2.0 * eta_prime * alpha)
    } else {
        f64::INFINITY
    };
    let init_in_ball = trace.initial_agg2.is_some_and(|n| n <= 1.5);
    let rows = trace
        .records
        .iter()
        .map(|rec| {
            let t = rec.step as f64;
            let bound = t * eta_prime * alpha * alpha;
            let drift = rec.drift_max.unwrap_or(0.0);
            let norm = rec.agg2.or(rec.agg2_upper);
            DriftRow {
                step: rec.step,
                drift,
                bound,
                norm,
                in_range: t <= t_max && init_in_ball,
                drift_violation: drift > bound,
                norm_violation: norm.is_some_and(|n| n > 2.0),
            }
        })
        .collect();
    DriftReport {
        alpha,
        eta_prime,
        t_max,
        init_in_ball,
        rows,
    }
}

/// Backprop compared with central differences on random coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(flat index, backprop, finite difference, relative error)`.
    pub entries: Vec<(usize, f64, f64, f64)>,
    pub max_rel_err: f64,
}

/// Scale below which gradient entries are compared absolutely: the
/// relative error divides by `max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

pub fn gradient_check(
    net: &RealizedNetwork,
    batch: &[Example],
    loss: &LossSpec,
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheck, TrainError> {
    use rand::Rng;
    let analytic = backprop(net, batch, loss)?.grad;
    let total = analytic.len();
    let mut g = rng::stream(seed, 0x67c);
    let mut probe = net.clone();
    let mut entries = Vec::with_capacity(coords);
    let mut max_rel_err = 0.0f64;
    for _ in 0..coords {
        let i = g.random_range(0..total);
        let orig = probe.params().get_flat(i);
        probe.params_mut().set_flat(i, orig + step);
        let up = batch_loss(&probe, batch, loss)?;
        probe.params_mut().set_flat(i, orig - step);
        let down = batch_loss(&probe, batch, loss)?;
        probe.params_mut().set_flat(i, orig);
        let fd = (up - down) / (2.0 * step);
        let a = analytic.get_flat(i);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        max_rel_err = max_rel_err.max(rel);
        entries.push((i, a, fd, rel));
    }
    Ok(GradCheck { entries, max_rel_err })
}
