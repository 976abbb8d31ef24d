//! Alternating search over network weights, architecture logits, and
//! augmentation parameters.
//!
//! One search step is a strict sequence: estimate the augmentation-parameter
//! gradient (lookahead policy gradient), estimate the architecture-logit
//! gradient (straight-through on the validation loss), estimate the weight
//! gradient (expected augmented training loss), then apply all three updates.
//! Every gradient is evaluated at the pre-update values.
//!
//! The augmentation gradient uses a one-step lookahead: for each sampled
//! architecture, a virtual SGD step on the mean augmented training gradient
//! produces lookahead weights, and each policy's score vector is weighted by
//! the dot product between the validation gradient at the lookahead weights
//! and that policy's training gradient, scaled by -eta / (N * M). The virtual
//! step reuses the same M policy draws that the score terms use.
//!
//! Epochs split into two phases: a warmup phase that updates weights and
//! architecture logits while the augmentation parameters stay bit-identical,
//! then a joint phase updating all three. All randomness comes from counter
//! derived streams keyed on (seed, step), so a run is determined by its
//! config and a snapshot of the state resumes exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_policy, normalize_batch, policy_log_prob, sample_policy, AugParams, NormStats, Policy,
};
use crate::error::{Error, Result};
use crate::nn::{grad_dot, Binder, BnMode, GradMap, Overlay, ParamId, ParamStore, ParamView};
use crate::oracle::ToyProblem;
use crate::rng::{self, tag};
use crate::supernet::{ArchGates, ArchParams, ArchSample, Supernet, SupernetConfig};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Monte-Carlo sampling counts per search step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Architecture samples per step.
    pub n_arch: usize,
    /// Policy samples per architecture sample.
    pub m_policies: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_arch: 5,
            m_policies: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_arch == 0 || self.m_policies == 0 {
            return Err(Error::InvalidConfig(
                "sampler counts must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Learning rates and the two-phase epoch schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Virtual-step rate for the lookahead weights; cosine-annealed.
    pub eta: f64,
    /// Weight learning rate (SGD with momentum); cosine-annealed.
    pub eta_theta: f64,
    /// Adam rate for operation logits.
    pub xi_alpha: f64,
    /// Adam rate for edge logits.
    pub xi_beta: f64,
    /// Adam rate for augmentation parameters.
    pub xi_gamma: f64,
    pub momentum: f64,
    /// Weight decay on network weights only.
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    /// Gate temperature, annealed linearly from start to end across all
    /// epochs.
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            eta: 0.025,
            eta_theta: 0.025,
            xi_alpha: 3e-4,
            xi_beta: 3e-4,
            xi_gamma: 3e-3,
            momentum: 0.9,
            weight_decay: 3e-4,
            warmup_epochs: 20,
            joint_epochs: 30,
            tau_start: 5.0,
            tau_end: 0.5,
        }
    }
}

impl OptimConfig {
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.joint_epochs
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("eta_theta", self.eta_theta),
            ("xi_alpha", self.xi_alpha),
            ("xi_beta", self.xi_beta),
            ("xi_gamma", self.xi_gamma),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.total_epochs() == 0 {
            return Err(Error::InvalidConfig(
                "warmup_epochs + joint_epochs must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Full search-phase configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub supernet: SupernetConfig,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    /// Augmentation slots per policy.
    pub slots: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            supernet: SupernetConfig::default(),
            sampler: SamplerConfig::default(),
            optim: OptimConfig::default(),
            slots: 2,
            batch_size: 8,
            steps_per_epoch: 8,
            seed: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.optim.validate()?;
        if self.slots == 0 {
            return Err(Error::InvalidConfig("slots must be at least 1".to_string()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and steps_per_epoch must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at epoch 0 toward 0 at `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * epoch as f64 / total as f64).cos())
}

/// Linear ramp from `start` at epoch 0 to `end` at the final epoch.
pub fn linear_anneal(start: f64, end: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = epoch as f64 / (total - 1) as f64;
    start + (end - start) * frac.min(1.0)
}

/// One plain SGD step away from `store`, materialized as a copy-on-write
/// overlay. Parameters absent from `grads` read through to the base values.
pub fn virtual_step<'a, F: Scalar>(
    store: &'a ParamStore<F>,
    grads: &GradMap<F>,
    eta: f64,
) -> Result<Overlay<'a, F>> {
    let mut overlay = Overlay::new(store);
    if eta == 0.0 {
        return Ok(overlay);
    }
    let step = F::from_f64(eta);
    for (id, g) in grads.iter() {
        let base = store.get(id);
        if base.shape() != g.shape() {
            return Err(Error::shape("virtual_step", base.shape(), g.shape()));
        }
        let mut t = base.clone();
        for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
            *p = *p - step * gv;
        }
        overlay.delta.insert(id, t);
    }
    Ok(overlay)
}

/// A loss landscape the policy-gradient estimator can drive: sampling an
/// architecture, differentiating the augmented training loss at given
/// weights, and differentiating the clean validation loss at given weights.
/// `i`/`j` index the (architecture, policy) lane inside one estimator call so
/// implementations can derive per-lane augmentation streams.
pub trait GammaProblem<F: Scalar> {
    type Arch;
    fn sample_arch(&mut self, rng_: &mut ChaCha8Rng) -> Self::Arch;
    fn train_grad(
        &mut self,
        view: &dyn ParamView<F>,
        arch: &Self::Arch,
        policy: &Policy,
        i: usize,
        j: usize,
    ) -> Result<(f64, GradMap<F>)>;
    fn val_grad(&mut self, view: &dyn ParamView<F>, arch: &Self::Arch)
        -> Result<(f64, GradMap<F>)>;
}

/// Output of the augmentation-parameter gradient estimator.
#[derive(Debug, Clone)]
pub struct GammaEstimate {
    /// Gradient over all augmentation-parameter coordinates.
    pub grad: Vec<f64>,
    /// Per-(architecture, policy) couplings: the dot product of the
    /// lookahead validation gradient with that policy's training gradient.
    pub couplings: Vec<f64>,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
}

/// Policy-gradient estimate of the augmentation-parameter gradient.
///
/// For each of `n_arch` sampled architectures: draw `m_policies` policies,
/// differentiate the training loss under each, take one virtual SGD step on
/// their mean gradient, differentiate the validation loss at the lookahead
/// weights, and weight each policy's score vector by the coupling between
/// the lookahead validation gradient and that policy's training gradient.
/// The result is scaled by -eta / (n_arch * m_policies).
pub fn grad_gamma<F: Scalar, P: GammaProblem<F>>(
    problem: &mut P,
    store: &ParamStore<F>,
    gamma: &AugParams,
    sampler: SamplerConfig,
    eta: f64,
    rng_arch: &mut ChaCha8Rng,
    rng_policy: &mut ChaCha8Rng,
) -> Result<GammaEstimate> {
    sampler.validate()?;
    let (n, m) = (sampler.n_arch, sampler.m_policies);
    let gdim = gamma.dim();
    let mut grad = vec![0.0; gdim];
    let mut couplings = Vec::with_capacity(n * m);
    let mut train_acc = 0.0;
    let mut val_acc = 0.0;

    for i in 0..n {
        let arch = problem.sample_arch(rng_arch);
        let policies: Vec<Policy> = (0..m).map(|_| sample_policy(gamma, rng_policy)).collect();

        let mut mean_grad = GradMap::new(store.len());
        let mut per_policy = Vec::with_capacity(m);
        for (j, pol) in policies.iter().enumerate() {
            let (loss, g) = problem.train_grad(store, &arch, pol, i, j)?;
            train_acc += loss;
            mean_grad.axpy(F::from_f64(1.0 / m as f64), &g)?;
            per_policy.push(g);
        }

        let lookahead = virtual_step(store, &mean_grad, eta)?;
        let (val_loss, val_g) = problem.val_grad(&lookahead, &arch)?;
        val_acc += val_loss;

        for (j, pol) in policies.iter().enumerate() {
            let s = grad_dot(&val_g, &per_policy[j])?;
            couplings.push(s);
            let (_, score) = policy_log_prob(gamma, pol)?;
            for (gk, sk) in grad.iter_mut().zip(&score) {
                *gk += s * sk;
            }
        }
    }

    let scale = -eta / ((n * m) as f64);
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok(GammaEstimate {
        grad,
        couplings,
        mean_train_loss: train_acc / ((n * m) as f64),
        mean_val_loss: val_acc / (n as f64),
    })
}

/// The weight-sharing network as a [`GammaProblem`]: training passes augment
/// the raw batch under the given policy, normalize, and run the sampled
/// subgraph; validation passes run the pre-normalized batch unaugmented.
pub struct SupernetGamma<'a, F: Scalar> {
    pub net: &'a mut Supernet,
    pub arch: &'a ArchParams,
    pub tau: f64,
    /// Magnitude bins of the policy space the sampled policies came from.
    pub bins: usize,
    /// Raw training images in [0, 1], augmented per policy.
    pub train_images: &'a Tensor<F>,
    pub train_labels: &'a [u32],
    /// Pre-normalized validation images.
    pub val_images: &'a Tensor<F>,
    pub val_labels: &'a [u32],
    pub stats: &'a NormStats,
    pub seed: u64,
    pub step: u64,
    /// Lane tag separating this estimator's augmentation streams from other
    /// consumers within the same step.
    pub lane: u64,
}

impl<F: Scalar> SupernetGamma<'_, F> {
    fn pass(
        &mut self,
        view: &dyn ParamView<F>,
        arch: &ArchSample,
        batch: Tensor<F>,
        labels: &[u32],
    ) -> Result<(f64, GradMap<F>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(view, true);
        let gates = ArchGates::bind(&mut tape, self.arch, arch, self.tau)?;
        let x = tape.constant(batch);
        let logits = self
            .net
            .forward(&mut tape, &mut binder, view, &gates, arch, x, BnMode::Train)?;
        let loss = tape.cross_entropy_mean(logits, labels)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).data()[0].to_f64();
        Ok((loss_value, binder.read_grads(&tape)))
    }
}

impl<F: Scalar> GammaProblem<F> for SupernetGamma<'_, F> {
    type Arch = ArchSample;

    fn sample_arch(&mut self, rng_: &mut ChaCha8Rng) -> ArchSample {
        ArchSample::draw(self.arch, rng_)
    }

    fn train_grad(
        &mut self,
        view: &dyn ParamView<F>,
        arch: &ArchSample,
        policy: &Policy,
        i: usize,
        j: usize,
    ) -> Result<(f64, GradMap<F>)> {
        let tags = [tag::AUGMENT, self.step, self.lane, i as u64, j as u64];
        let mut batch = apply_policy(policy, self.train_images, self.bins, self.seed, &tags)?;
        normalize_batch(&mut batch, self.stats)?;
        let labels = self.train_labels.to_vec();
        self.pass(view, arch, batch, &labels)
    }

    fn val_grad(
        &mut self,
        view: &dyn ParamView<F>,
        arch: &ArchSample,
    ) -> Result<(f64, GradMap<F>)> {
        let batch = self.val_images.clone();
        let labels = self.val_labels.to_vec();
        self.pass(view, arch, batch, &labels)
    }
}

/// Closed-form test problem as a [`GammaProblem`]: the single parameter
/// tensor holds the weight vector and the loss closures supply exact
/// gradients. Drives the production estimator against enumeration oracles.
pub struct ToyGamma<'a> {
    pub toy: &'a ToyProblem,
    pub id: ParamId,
}

/// Wrap a weight vector in a one-parameter store for [`ToyGamma`].
pub fn toy_store(theta: &[f64]) -> (ParamStore<f64>, ParamId) {
    let mut store = ParamStore::new();
    let t = Tensor::from_vec(&[theta.len()], theta.to_vec()).expect("theta tensor");
    let id = store.add("theta", t);
    (store, id)
}

impl GammaProblem<f64> for ToyGamma<'_> {
    type Arch = ();

    fn sample_arch(&mut self, _rng: &mut ChaCha8Rng) {}

    fn train_grad(
        &mut self,
        view: &dyn ParamView<f64>,
        _arch: &(),
        policy: &Policy,
        _i: usize,
        _j: usize,
    ) -> Result<(f64, GradMap<f64>)> {
        let theta = view.param(self.id).data().to_vec();
        let (loss, g) = (self.toy.train)(&theta, policy);
        let mut gm = GradMap::new(view.universe());
        gm.insert(self.id, Tensor::from_vec(&[g.len()], g)?);
        Ok((loss, gm))
    }

    fn val_grad(&mut self, view: &dyn ParamView<f64>, _arch: &()) -> Result<(f64, GradMap<f64>)> {
        let theta = view.param(self.id).data().to_vec();
        let (loss, g) = (self.toy.val)(&theta);
        let mut gm = GradMap::new(view.universe());
        gm.insert(self.id, Tensor::from_vec(&[g.len()], g)?);
        Ok((loss, gm))
    }
}

/// Architecture-logit gradient: mean over `n_arch` fresh samples of the
/// straight-through gradient of the clean validation loss, taken at the
/// current weights (bound as constants). Returns the gradient in
/// [`ArchParams::flat`] order plus the mean validation loss.
pub fn grad_arch<F: Scalar>(
    net: &mut Supernet,
    store: &ParamStore<F>,
    arch: &ArchParams,
    tau: f64,
    n_arch: usize,
    val_images: &Tensor<F>,
    val_labels: &[u32],
    rng_: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    use crate::supernet::{CellKind, CELL_EDGES, NUM_ARCH_OPS};
    const ALPHA_LEN: usize = CELL_EDGES * NUM_ARCH_OPS;
    const CELL_DIM: usize = ALPHA_LEN + CELL_EDGES;

    if n_arch == 0 {
        return Err(Error::InvalidConfig(
            "grad_arch needs at least 1 sample".to_string(),
        ));
    }
    let mut flat = vec![0.0; ArchParams::flat_dim()];
    let mut loss_acc = 0.0;
    let w = 1.0 / n_arch as f64;
    for _ in 0..n_arch {
        let sample = ArchSample::draw(arch, rng_);
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let gates = ArchGates::bind(&mut tape, arch, &sample, tau)?;
        let x = tape.constant(val_images.clone());
        let logits = net.forward(&mut tape, &mut binder, store, &gates, &sample, x, BnMode::Train)?;
        let loss = tape.cross_entropy_mean(logits, val_labels)?;
        tape.backward(loss)?;
        loss_acc += tape.value(loss).data()[0].to_f64();
        for (kind, base) in [(CellKind::Normal, 0), (CellKind::Reduction, CELL_DIM)] {
            let (ga, gb) = gates.cell(kind).read_grads(&tape);
            for (k, v) in ga.iter().enumerate() {
                flat[base + k] += w * v;
            }
            for (k, v) in gb.iter().enumerate() {
                flat[base + ALPHA_LEN + k] += w * v;
            }
        }
    }
    Ok((flat, loss_acc * w))
}

/// Output of the weight-gradient estimator.
pub struct ThetaEstimate<F: Scalar> {
    pub grad: GradMap<F>,
    pub mean_loss: f64,
    /// Mean log-probability of the policies drawn for this estimate.
    pub policy_log_prob_mean: f64,
    /// Fraction of slots whose apply flag came up set.
    pub policy_apply_rate: f64,
}

/// Weight gradient: mean over fresh (architecture, policy) pairs of the
/// augmented training-loss gradient at the current weights.
#[allow(clippy::too_many_arguments)]
pub fn grad_theta<F: Scalar>(
    net: &mut Supernet,
    store: &ParamStore<F>,
    arch: &ArchParams,
    gamma: &AugParams,
    tau: f64,
    sampler: SamplerConfig,
    train_images: &Tensor<F>,
    train_labels: &[u32],
    stats: &NormStats,
    seed: u64,
    step: u64,
    rng_arch: &mut ChaCha8Rng,
    rng_policy: &mut ChaCha8Rng,
) -> Result<ThetaEstimate<F>> {
    sampler.validate()?;
    let (n, m) = (sampler.n_arch, sampler.m_policies);
    let mut grad = GradMap::new(store.len());
    let mut loss_acc = 0.0;
    let mut lp_acc = 0.0;
    let mut applied = 0usize;
    let mut slots_seen = 0usize;
    let w = F::from_f64(1.0 / ((n * m) as f64));
    for i in 0..n {
        let sample = ArchSample::draw(arch, rng_arch);
        for j in 0..m {
            let policy = sample_policy(gamma, rng_policy);
            lp_acc += policy_log_prob(gamma, &policy)?.0;
            applied += policy.slots.iter().filter(|s| s.apply).count();
            slots_seen += policy.slots.len();
            let tags = [tag::AUGMENT, step, THETA_LANE, i as u64, j as u64];
            let mut batch = apply_policy(&policy, train_images, gamma.num_bins, seed, &tags)?;
            normalize_batch(&mut batch, stats)?;
            let mut tape = Tape::new();
            let mut binder = Binder::new(store, true);
            let gates = ArchGates::bind(&mut tape, arch, &sample, tau)?;
            let x = tape.constant(batch);
            let logits =
                net.forward(&mut tape, &mut binder, store, &gates, &sample, x, BnMode::Train)?;
            let loss = tape.cross_entropy_mean(logits, train_labels)?;
            tape.backward(loss)?;
            loss_acc += tape.value(loss).data()[0].to_f64();
            let g = binder.read_grads(&tape);
            grad.axpy(w, &g)?;
        }
    }
    Ok(ThetaEstimate {
        grad,
        mean_loss: loss_acc / ((n * m) as f64),
        policy_log_prob_mean: lp_acc / ((n * m) as f64),
        policy_apply_rate: applied as f64 / slots_seen.max(1) as f64,
    })
}

/// Lane tags separating the per-step augmentation streams of the two
/// estimators that augment data.
pub const GAMMA_LANE: u64 = 1;
pub const THETA_LANE: u64 = 3;

/// SGD with classical momentum and decoupled-from-nothing weight decay
/// folded into the gradient. Parameters absent from a step's gradient are
/// skipped entirely; their velocity persists untouched.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradMap<F>, lr: f64) {
        let mu = F::from_f64(self.momentum);
        let wd = F::from_f64(self.weight_decay);
        let lr = F::from_f64(lr);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

/// Adam over a flat f64 vector with a per-coordinate learning rate, so one
/// state can serve coordinate groups with different rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamF64 {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamF64 {
    pub fn new(dim: usize) -> Self {
        AdamF64 {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            params[k] -= lr(k) * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Search-phase dataset: raw images in [0, 1] plus the normalization
/// statistics computed over the training pool.
#[derive(Debug, Clone)]
pub struct SearchData<F: Scalar> {
    pub train_images: Tensor<F>,
    pub train_labels: Vec<u32>,
    pub val_images: Tensor<F>,
    pub val_labels: Vec<u32>,
    pub stats: NormStats,
}

/// Draw `k` distinct indices from `0..pool` (partial Fisher-Yates).
pub fn draw_indices(rng_: &mut ChaCha8Rng, pool: usize, k: usize) -> Vec<usize> {
    assert!(k <= pool, "batch of {k} from pool of {pool}");
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..k {
        let j = i + rng_.gen_range(0..pool - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Gather rows of an [N, C, H, W] tensor and the matching labels.
pub fn take_batch<F: Scalar>(
    images: &Tensor<F>,
    labels: &[u32],
    idx: &[usize],
) -> (Tensor<F>, Vec<u32>) {
    let shape = images.shape();
    let chw: usize = shape[1..].iter().product();
    let mut out = Tensor::zeros(&[idx.len(), shape[1], shape[2], shape[3]]);
    for (row, &i) in idx.iter().enumerate() {
        out.data_mut()[row * chw..(row + 1) * chw]
            .copy_from_slice(&images.data()[i * chw..(i + 1) * chw]);
    }
    let lab = idx.iter().map(|&i| labels[i]).collect();
    (out, lab)
}

/// One line of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
    pub eta_theta: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_arch: f64,
    pub grad_norm_gamma: f64,
    pub policy_log_prob_mean: f64,
    pub policy_apply_rate: f64,
}

/// Everything that evolves during a search run. A clone of this struct is a
/// complete snapshot: continuing from the clone reproduces the uninterrupted
/// run bit for bit.
#[derive(Clone)]
pub struct SearchState<F: Scalar> {
    pub cfg: SearchConfig,
    pub net: Supernet,
    pub store: ParamStore<F>,
    pub arch: ArchParams,
    pub gamma: AugParams,
    pub opt_theta: SgdMomentum<F>,
    pub opt_arch: AdamF64,
    pub opt_gamma: AdamF64,
    pub next_epoch: usize,
}

impl<F: Scalar> SearchState<F> {
    pub fn new(cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, &[tag::INIT]);
        let net = Supernet::build(cfg.supernet.clone(), &mut store, &mut r);
        let arch = ArchParams::new();
        let gamma = AugParams::new_uniform(cfg.slots);
        let opt_theta = SgdMomentum::new(cfg.optim.momentum, cfg.optim.weight_decay);
        let opt_arch = AdamF64::new(ArchParams::flat_dim());
        let opt_gamma = AdamF64::new(gamma.dim());
        Ok(SearchState {
            cfg,
            net,
            store,
            arch,
            gamma,
            opt_theta,
            opt_arch,
            opt_gamma,
            next_epoch: 0,
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.optim.total_epochs()
    }

    pub fn tau_at(&self, epoch: usize) -> f64 {
        linear_anneal(
            self.cfg.optim.tau_start,
            self.cfg.optim.tau_end,
            epoch,
            self.total_epochs(),
        )
    }

    pub fn phase_at(&self, epoch: usize) -> &'static str {
        if epoch < self.cfg.optim.warmup_epochs {
            "warmup"
        } else {
            "joint"
        }
    }
}

fn check_finite_after_update<F: Scalar>(state: &SearchState<F>, step: u64) -> Result<()> {
    let context = format!("search step {step}");
    if let Some(name) = state.store.find_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
            context,
        });
    }
    if !state.arch.all_finite() {
        return Err(Error::NonFinite {
            tensor: "architecture logits".to_string(),
            context,
        });
    }
    if let Some(idx) = state.gamma.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: state.gamma.coord_name(idx),
            context,
        });
    }
    Ok(())
}

fn run_epoch<F: Scalar>(
    state: &mut SearchState<F>,
    data: &SearchData<F>,
    epoch: usize,
) -> Result<EpochMetrics> {
    let cfg = state.cfg.clone();
    let total = cfg.optim.total_epochs();
    let joint = epoch >= cfg.optim.warmup_epochs;
    let tau = state.tau_at(epoch);
    let lr_theta = cosine_lr(cfg.optim.eta_theta, epoch, total);
    let eta = cosine_lr(cfg.optim.eta, epoch, total);

    let n_train = data.train_labels.len();
    let n_val = data.val_labels.len();
    if cfg.batch_size > n_train || cfg.batch_size > n_val {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds pool sizes (train {}, val {})",
            cfg.batch_size, n_train, n_val
        )));
    }

    let steps = cfg.steps_per_epoch;
    let mut acc = EpochMetrics {
        epoch,
        phase: state.phase_at(epoch).to_string(),
        train_loss: 0.0,
        val_loss: 0.0,
        tau,
        eta_theta: lr_theta,
        grad_norm_theta: 0.0,
        grad_norm_arch: 0.0,
        grad_norm_gamma: 0.0,
        policy_log_prob_mean: 0.0,
        policy_apply_rate: 0.0,
    };

    for s in 0..steps {
        let step = (epoch * steps + s) as u64;

        let mut r_batch = rng::stream(cfg.seed, &[tag::SHUFFLE, step]);
        let ti = draw_indices(&mut r_batch, n_train, cfg.batch_size);
        let vi = draw_indices(&mut r_batch, n_val, cfg.batch_size);
        let (train_raw, train_labels) = take_batch(&data.train_images, &data.train_labels, &ti);
        let (mut val_norm, val_labels) = take_batch(&data.val_images, &data.val_labels, &vi);
        normalize_batch(&mut val_norm, &data.stats)?;

        let mut gamma_grad = vec![0.0; state.gamma.dim()];
        if joint {
            let mut ra = rng::stream(cfg.seed, &[tag::ARCH_SAMPLE, step, GAMMA_LANE]);
            let mut rp = rng::stream(cfg.seed, &[tag::POLICY_SAMPLE, step, GAMMA_LANE]);
            let mut problem = SupernetGamma {
                net: &mut state.net,
                arch: &state.arch,
                tau,
                bins: state.gamma.num_bins,
                train_images: &train_raw,
                train_labels: &train_labels,
                val_images: &val_norm,
                val_labels: &val_labels,
                stats: &data.stats,
                seed: cfg.seed,
                step,
                lane: GAMMA_LANE,
            };
            let est = grad_gamma(
                &mut problem,
                &state.store,
                &state.gamma,
                cfg.sampler,
                eta,
                &mut ra,
                &mut rp,
            )?;
            gamma_grad = est.grad;
        }

        let mut ra = rng::stream(cfg.seed, &[tag::ARCH_SAMPLE, step, 2]);
        let (arch_grad, val_loss) = grad_arch(
            &mut state.net,
            &state.store,
            &state.arch,
            tau,
            cfg.sampler.n_arch,
            &val_norm,
            &val_labels,
            &mut ra,
        )?;

        let mut ra = rng::stream(cfg.seed, &[tag::ARCH_SAMPLE, step, THETA_LANE]);
        let mut rp = rng::stream(cfg.seed, &[tag::POLICY_SAMPLE, step, THETA_LANE]);
        let theta_est = grad_theta(
            &mut state.net,
            &state.store,
            &state.arch,
            &state.gamma,
            tau,
            cfg.sampler,
            &train_raw,
            &train_labels,
            &data.stats,
            cfg.seed,
            step,
            &mut ra,
            &mut rp,
        )?;

        state
            .opt_theta
            .step(&mut state.store, &theta_est.grad, lr_theta);
        let mut flat = state.arch.flat();
        let (xa, xb) = (cfg.optim.xi_alpha, cfg.optim.xi_beta);
        state.opt_arch.step(&mut flat, &arch_grad, |k| {
            if ArchParams::coord_is_beta(k) {
                xb
            } else {
                xa
            }
        });
        state.arch.set_flat(&flat);
        if joint {
            let xg = cfg.optim.xi_gamma;
            state
                .opt_gamma
                .step(state.gamma.data_mut(), &gamma_grad, |_| xg);
        }

        check_finite_after_update(state, step)?;
        if !theta_est.mean_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite {
                tensor: "batch loss".to_string(),
                context: format!("search step {step}"),
            });
        }

        let inv = 1.0 / steps as f64;
        acc.train_loss += inv * theta_est.mean_loss;
        acc.val_loss += inv * val_loss;
        acc.grad_norm_theta += inv * theta_est.grad.l2_norm();
        acc.grad_norm_arch += inv * arch_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc.grad_norm_gamma += inv * gamma_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc.policy_log_prob_mean += inv * theta_est.policy_log_prob_mean;
        acc.policy_apply_rate += inv * theta_est.policy_apply_rate;
    }

    Ok(acc)
}

/// Run the remaining epochs of a search. `on_epoch` fires after each epoch
/// with the updated state (for checkpointing); an error from it aborts the
/// loop but leaves the state at the completed epoch boundary, so the caller
/// can continue later.
pub fn search_loop<F: Scalar>(
    state: &mut SearchState<F>,
    data: &SearchData<F>,
    mut on_epoch: impl FnMut(&SearchState<F>, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let total = state.total_epochs();
    let mut out = Vec::new();
    while state.next_epoch < total {
        let epoch = state.next_epoch;
        let metrics = run_epoch(state, data, epoch)?;
        state.next_epoch = epoch + 1;
        on_epoch(state, &metrics)?;
        out.push(metrics);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_hypergradient;

    fn small_store() -> (ParamStore<f64>, ParamId, ParamId) {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = store.add("b", Tensor::from_vec(&[2], vec![4.0, 9.0]).unwrap());
        (store, a, b)
    }

    #[test]
    fn virtual_step_with_zero_rate_is_identity() {
        let (store, a, _) = small_store();
        let mut g = GradMap::new(store.len());
        g.insert(a, Tensor::from_vec(&[3], vec![10.0, 10.0, 10.0]).unwrap());
        let ov = virtual_step(&store, &g, 0.0).unwrap();
        assert!(ov.delta.is_empty());
        assert_eq!(ov.param(a).data(), store.get(a).data());
    }

    #[test]
    fn virtual_step_matches_quadratic_closed_form() {
        // loss 0.5 * theta^2 has gradient theta, so the step lands on
        // (1 - eta) * theta.
        let (store, a, b) = small_store();
        let mut g = GradMap::new(store.len());
        g.insert(a, store.get(a).clone());
        let eta = 0.3;
        let ov = virtual_step(&store, &g, eta).unwrap();
        for (out, base) in ov.param(a).data().iter().zip(store.get(a).data()) {
            assert!((out - (1.0 - eta) * base).abs() < 1e-15);
        }
        // untouched parameter reads through to the base values
        assert!(!ov.delta.contains_key(&b));
        assert_eq!(ov.param(b).data(), store.get(b).data());
    }

    #[test]
    fn gamma_estimate_is_zero_at_zero_rate() {
        let toy = ToyProblem::two_policy();
        let (store, id) = toy_store(&[0.7]);
        let mut problem = ToyGamma { toy: &toy, id };
        let sampler = SamplerConfig {
            n_arch: 1,
            m_policies: 2,
        };
        let mut ra = rng::stream(3, &[tag::ORACLE, 1]);
        let mut rp = rng::stream(3, &[tag::ORACLE, 2]);
        let est = grad_gamma(
            &mut problem,
            &store,
            &toy.params,
            sampler,
            0.0,
            &mut ra,
            &mut rp,
        )
        .unwrap();
        assert!(est.grad.iter().all(|&g| g == 0.0));
        assert_eq!(est.couplings.len(), 2);
    }

    #[test]
    fn gamma_estimate_matches_enumeration_within_three_se() {
        // Monte-Carlo mean of the production estimator against the exact
        // hypergradient from full enumeration. The lookahead couples the
        // virtual step to the scored policies, which introduces an O(eta^2)
        // finite-sample term, so the rate is kept small.
        let mut toy = ToyProblem::two_policy();
        toy.params.set_pi(0, 0, 0.3);
        toy.params.set_prob_logit(0, 0, -0.2);
        toy.params.set_prob_logit(0, 1, 0.4);
        let theta = vec![0.7];
        let eta = 5e-3;
        let exact = exact_hypergradient(&toy, &theta, eta).unwrap().grad;

        let (store, id) = toy_store(&theta);
        let sampler = SamplerConfig {
            n_arch: 1,
            m_policies: 2,
        };
        let rounds = 100_000;
        let dim = toy.params.dim();
        let mut sum = vec![0.0; dim];
        let mut sumsq = vec![0.0; dim];
        let mut ra = rng::stream(11, &[tag::ORACLE, 1]);
        let mut rp = rng::stream(11, &[tag::ORACLE, 2]);
        for _ in 0..rounds {
            let mut problem = ToyGamma { toy: &toy, id };
            let est = grad_gamma(
                &mut problem,
                &store,
                &toy.params,
                sampler,
                eta,
                &mut ra,
                &mut rp,
            )
            .unwrap();
            for k in 0..dim {
                sum[k] += est.grad[k];
                sumsq[k] += est.grad[k] * est.grad[k];
            }
        }
        let r = rounds as f64;
        for k in 0..dim {
            let mean = sum[k] / r;
            let var = (sumsq[k] - r * mean * mean) / (r - 1.0);
            let se = (var / r).sqrt();
            let diff = (mean - exact[k]).abs();
            assert!(
                diff <= 3.0 * se + 1e-12,
                "coord {k} ({}): mean {mean} exact {} se {se}",
                toy.params.coord_name(k),
                exact[k]
            );
        }
    }

    #[test]
    fn sgd_momentum_follows_the_reference_recurrence() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[1], vec![1.0f64]).unwrap());
        let mut opt = SgdMomentum::new(0.9, 0.1);
        let mut g = GradMap::new(store.len());
        g.insert(id, Tensor::from_vec(&[1], vec![0.5]).unwrap());

        // step 1: v = 0.5 + 0.1 * 1.0 = 0.6, p = 1.0 - 0.2 * 0.6 = 0.88
        opt.step(&mut store, &g, 0.2);
        assert!((store.get(id).data()[0] - 0.88).abs() < 1e-15);
        // step 2: v = 0.9 * 0.6 + 0.5 + 0.1 * 0.88 = 1.128, p = 0.88 - 0.2256
        opt.step(&mut store, &g, 0.2);
        assert!((store.get(id).data()[0] - 0.6544).abs() < 1e-12);
    }

    #[test]
    fn adam_with_constant_gradient_moves_by_rate_per_step() {
        // With a constant gradient the bias-corrected moments give
        // mhat / sqrt(vhat) = sign(g) exactly, so each step moves by lr.
        let mut p = vec![0.0, 0.0];
        let g = vec![2.0, -0.5];
        let mut opt = AdamF64::new(2);
        for _ in 0..4 {
            opt.step(&mut p, &g, |k| if k == 0 { 0.1 } else { 0.01 });
        }
        assert!((p[0] - (-0.4)).abs() < 1e-6, "p[0] = {}", p[0]);
        assert!((p[1] - 0.04).abs() < 1e-6, "p[1] = {}", p[1]);
    }

    #[test]
    fn schedules_hit_their_endpoints() {
        assert!((cosine_lr(0.025, 0, 50) - 0.025).abs() < 1e-15);
        assert!((cosine_lr(0.025, 50, 50)).abs() < 1e-15);
        assert!(cosine_lr(0.025, 25, 50) > 0.0124 && cosine_lr(0.025, 25, 50) < 0.0126);
        assert!((linear_anneal(5.0, 0.5, 0, 50) - 5.0).abs() < 1e-15);
        assert!((linear_anneal(5.0, 0.5, 49, 50) - 0.5).abs() < 1e-15);
        assert!((linear_anneal(5.0, 0.5, 1, 1) - 5.0).abs() < 1e-15);
    }

    fn tiny_config(warmup: usize, joint: usize) -> SearchConfig {
        SearchConfig {
            supernet: SupernetConfig {
                cells: 2,
                channels: 4,
                in_channels: 3,
                classes: 4,
                stem_multiplier: 3,
            },
            sampler: SamplerConfig {
                n_arch: 1,
                m_policies: 1,
            },
            optim: OptimConfig {
                warmup_epochs: warmup,
                joint_epochs: joint,
                ..OptimConfig::default()
            },
            slots: 2,
            batch_size: 4,
            steps_per_epoch: 2,
            seed: 7,
        }
    }

    fn tiny_data(seed: u64) -> SearchData<f32> {
        let (n_train, n_val, c, hw) = (16, 8, 3, 8);
        let mut r = rng::stream(seed, &[tag::DATASET]);
        let mut mk = |n: usize| {
            let data: Vec<f32> = (0..n * c * hw * hw).map(|_| r.gen::<f32>()).collect();
            Tensor::from_vec(&[n, c, hw, hw], data).unwrap()
        };
        let train_images = mk(n_train);
        let val_images = mk(n_val);
        let stats = NormStats::from_batch(&train_images).unwrap();
        SearchData {
            train_images,
            train_labels: (0..n_train as u32).map(|i| i % 4).collect(),
            val_images,
            val_labels: (0..n_val as u32).map(|i| i % 4).collect(),
            stats,
        }
    }

    fn assert_states_equal(a: &SearchState<f32>, b: &SearchState<f32>) {
        assert_eq!(a.next_epoch, b.next_epoch);
        assert_eq!(a.arch, b.arch);
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(a.opt_arch, b.opt_arch);
        assert_eq!(a.opt_gamma, b.opt_gamma);
        for (id, entry) in a.store.iter() {
            assert_eq!(
                entry.value.data(),
                b.store.get(id).data(),
                "store mismatch at {}",
                a.store.name(id)
            );
        }
        for (id, v) in &a.opt_theta.velocity {
            assert_eq!(v.data(), b.opt_theta.velocity[id].data());
        }
    }

    #[test]
    fn loop_covers_both_phases_and_logs_schedules() {
        let cfg = tiny_config(1, 1);
        let data = tiny_data(5);
        let mut state = SearchState::<f32>::new(cfg).unwrap();
        let metrics = search_loop(&mut state, &data, |_, _| Ok(())).unwrap();
        assert_eq!(metrics.len(), 2);
        assert_eq!(metrics[0].phase, "warmup");
        assert_eq!(metrics[1].phase, "joint");
        assert!((metrics[0].tau - 5.0).abs() < 1e-12);
        assert!((metrics[1].tau - 0.5).abs() < 1e-12);
        assert!((metrics[0].eta_theta - 0.025).abs() < 1e-12);
        for m in &metrics {
            assert!(m.train_loss.is_finite() && m.val_loss.is_finite());
            assert!(m.grad_norm_theta > 0.0);
            assert!(m.grad_norm_arch > 0.0);
        }
        assert_eq!(metrics[0].grad_norm_gamma, 0.0);
        assert_eq!(state.next_epoch, 2);
    }

    #[test]
    fn warmup_only_run_leaves_gamma_at_initialization() {
        let cfg = tiny_config(2, 0);
        let data = tiny_data(5);
        let mut state = SearchState::<f32>::new(cfg.clone()).unwrap();
        let init = AugParams::new_uniform(cfg.slots);
        search_loop(&mut state, &data, |_, _| Ok(())).unwrap();
        assert_eq!(state.gamma, init);
        assert_eq!(state.opt_gamma.t, 0);
        // the joint phase does move gamma
        let mut joint = SearchState::<f32>::new(tiny_config(0, 2)).unwrap();
        search_loop(&mut joint, &data, |_, _| Ok(())).unwrap();
        assert_ne!(joint.gamma, init);
    }

    #[test]
    fn identical_configs_reproduce_bit_for_bit() {
        let cfg = tiny_config(1, 1);
        let data = tiny_data(9);
        let mut s1 = SearchState::<f32>::new(cfg.clone()).unwrap();
        let m1 = search_loop(&mut s1, &data, |_, _| Ok(())).unwrap();
        let mut s2 = SearchState::<f32>::new(cfg).unwrap();
        let m2 = search_loop(&mut s2, &data, |_, _| Ok(())).unwrap();
        assert_eq!(m1, m2);
        assert_states_equal(&s1, &s2);
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_state() {
        let cfg = tiny_config(1, 2);
        let data = tiny_data(13);
        let mut full = SearchState::<f32>::new(cfg.clone()).unwrap();
        search_loop(&mut full, &data, |_, _| Ok(())).unwrap();

        let mut parts = SearchState::<f32>::new(cfg).unwrap();
        let r = search_loop(&mut parts, &data, |st, _| {
            if st.next_epoch == 2 {
                Err(Error::InvalidConfig("interrupt".to_string()))
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
        assert_eq!(parts.next_epoch, 2);
        let resumed = search_loop(&mut parts, &data, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.len(), 1);
        assert_states_equal(&full, &parts);
    }

    #[test]
    fn non_finite_parameter_aborts_naming_step_and_tensor() {
        let cfg = tiny_config(1, 0);
        let data = tiny_data(5);
        let mut state = SearchState::<f32>::new(cfg).unwrap();
        let stem = state.store.ids().next().unwrap();
        state.store.get_mut(stem).data_mut()[0] = f32::NAN;
        let err = search_loop(&mut state, &data, |_, _| Ok(())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("search step 0"), "message: {msg}");
        assert!(msg.contains("stem"), "message: {msg}");
    }

    #[test]
    fn arch_gradient_is_zero_exactly_on_unsampled_rows() {
        use crate::supernet::{ArchOpKind, CellKind, CELL_EDGES, NUM_ARCH_OPS};
        // 3 cells so both cell kinds appear in the network (cell 0 is the
        // one normal cell, cells 1 and 2 reduce).
        let mut cfg = tiny_config(1, 1);
        cfg.supernet.cells = 3;
        let data = tiny_data(5);
        let mut state = SearchState::<f32>::new(cfg).unwrap();
        let mut norm_val = data.val_images.clone();
        normalize_batch(&mut norm_val, &data.stats).unwrap();
        let mut ra = rng::stream(21, &[tag::ARCH_SAMPLE, 0]);
        let sample_probe = {
            let mut probe = rng::stream(21, &[tag::ARCH_SAMPLE, 0]);
            ArchSample::draw(&state.arch, &mut probe)
        };
        let (flat, loss) = grad_arch(
            &mut state.net,
            &state.store,
            &state.arch,
            1.0,
            1,
            &norm_val,
            &data.val_labels,
            &mut ra,
        )
        .unwrap();
        assert!(loss.is_finite());
        let cell_dim = CELL_EDGES * NUM_ARCH_OPS + CELL_EDGES;
        for (kind, base) in [(CellKind::Normal, 0), (CellKind::Reduction, cell_dim)] {
            let cs = sample_probe.cell(kind);
            for node in 0..4 {
                for local in 0..crate::supernet::group_len(node) {
                    let e = crate::supernet::EDGE_OFFSETS[node] + local;
                    let row = &flat[base + e * NUM_ARCH_OPS..base + (e + 1) * NUM_ARCH_OPS];
                    let nonzero = row.iter().any(|&v| v != 0.0);
                    if !cs.edge_selected(node, local) {
                        assert!(!nonzero, "{kind:?} edge {e} unsampled but nonzero grad");
                    } else if cs.op_choice[e] != ArchOpKind::Zero.id() {
                        // a sampled zero op emits exact zeros, which nulls
                        // its own gate gradient; any other op must not
                        assert!(nonzero, "{kind:?} edge {e} sampled but zero grad");
                    }
                }
            }
            let betas = &flat[base + CELL_EDGES * NUM_ARCH_OPS..base + cell_dim];
            assert!(betas.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn theta_gradient_single_sample_replays_one_backward_pass() {
        let cfg = tiny_config(1, 1);
        let data = tiny_data(5);
        let mut state = SearchState::<f32>::new(cfg.clone()).unwrap();
        let (train_raw, labels) = take_batch(
            &data.train_images,
            &data.train_labels,
            &[0, 1, 2, 3],
        );
        let sampler = SamplerConfig {
            n_arch: 1,
            m_policies: 1,
        };
        let (seed, step, tau) = (cfg.seed, 4u64, 2.0);
        let mut ra = rng::stream(seed, &[tag::ARCH_SAMPLE, step, THETA_LANE]);
        let mut rp = rng::stream(seed, &[tag::POLICY_SAMPLE, step, THETA_LANE]);
        let est = grad_theta(
            &mut state.net,
            &state.store,
            &state.arch,
            &state.gamma,
            tau,
            sampler,
            &train_raw,
            &labels,
            &data.stats,
            seed,
            step,
            &mut ra,
            &mut rp,
        )
        .unwrap();

        // replay the identical streams by hand
        let mut ra = rng::stream(seed, &[tag::ARCH_SAMPLE, step, THETA_LANE]);
        let mut rp = rng::stream(seed, &[tag::POLICY_SAMPLE, step, THETA_LANE]);
        let sample = ArchSample::draw(&state.arch, &mut ra);
        let policy = sample_policy(&state.gamma, &mut rp);
        let tags = [tag::AUGMENT, step, THETA_LANE, 0, 0];
        let mut batch =
            apply_policy(&policy, &train_raw, state.gamma.num_bins, seed, &tags).unwrap();
        normalize_batch(&mut batch, &data.stats).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&state.store, true);
        let gates = ArchGates::bind(&mut tape, &state.arch, &sample, tau).unwrap();
        let x = tape.constant(batch);
        let logits = state
            .net
            .forward(
                &mut tape,
                &mut binder,
                &state.store,
                &gates,
                &sample,
                x,
                BnMode::Train,
            )
            .unwrap();
        let loss = tape.cross_entropy_mean(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        let manual = binder.read_grads(&tape);

        assert_eq!(est.grad.len(), manual.len());
        for (id, g) in est.grad.iter() {
            assert_eq!(
                g.data(),
                manual.get(id).unwrap().data(),
                "grad mismatch at {}",
                state.store.name(id)
            );
        }
        assert!((est.mean_loss - tape.value(loss).data()[0] as f64).abs() < 1e-12);
    }
}
