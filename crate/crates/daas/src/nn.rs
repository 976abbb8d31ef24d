//! Named parameter storage, gradient maps, and the composite conv blocks the
//! cell networks are assembled from.

use crate::error::{Error, Result};
use crate::kernels::Conv2dSpec;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Ordered, named parameter set. Ids are dense indices, so iteration order is
/// stable and gradient reductions are deterministic.
#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar parameter count.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// First parameter with a non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.value.all_finite())
            .map(|e| e.name.as_str())
    }
}

/// Read access to parameter values: either the store itself or an overlay
/// holding a few updated tensors on top of it (virtual steps).
pub trait ParamView<F: Scalar> {
    fn param(&self, id: ParamId) -> &Tensor<F>;
    /// Size of the underlying ordered parameter set.
    fn universe(&self) -> usize;
}

impl<F: Scalar> ParamView<F> for ParamStore<F> {
    fn param(&self, id: ParamId) -> &Tensor<F> {
        self.get(id)
    }
    fn universe(&self) -> usize {
        self.len()
    }
}

/// Detached copy-on-write view: parameters in `delta` shadow the base store.
pub struct Overlay<'a, F: Scalar> {
    pub base: &'a ParamStore<F>,
    pub delta: BTreeMap<ParamId, Tensor<F>>,
}

impl<'a, F: Scalar> Overlay<'a, F> {
    pub fn new(base: &'a ParamStore<F>) -> Self {
        Overlay {
            base,
            delta: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> ParamView<F> for Overlay<'_, F> {
    fn param(&self, id: ParamId) -> &Tensor<F> {
        self.delta.get(&id).unwrap_or_else(|| self.base.get(id))
    }
    fn universe(&self) -> usize {
        self.base.len()
    }
}

/// Sparse gradient over an ordered parameter set. Parameters the loss never
/// reached are absent and count as zero.
#[derive(Clone)]
pub struct GradMap<F: Scalar> {
    universe: usize,
    map: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> GradMap<F> {
    pub fn new(universe: usize) -> Self {
        GradMap {
            universe,
            map: BTreeMap::new(),
        }
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<F>) {
        debug_assert!(id.0 < self.universe);
        self.map.insert(id, grad);
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<F>, scale: F) {
        match self.map.get_mut(&id) {
            Some(t) => t.axpy(scale, grad),
            None => {
                let mut t = Tensor::zeros(grad.shape());
                t.axpy(scale, grad);
                self.map.insert(id, t);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, alpha: F) {
        for t in self.map.values_mut() {
            t.scale(alpha);
        }
    }

    /// self += alpha * other (same universe required).
    pub fn axpy(&mut self, alpha: F, other: &GradMap<F>) -> Result<()> {
        check_universes(self.universe, other.universe)?;
        for (id, g) in other.iter() {
            self.accumulate(id, g, alpha);
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .map(|t| t.dot_f64(t))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

fn check_universes(a: usize, b: usize) -> Result<()> {
    if a == b {
        return Ok(());
    }
    let describe = |lo: usize, hi: usize| {
        if lo >= hi {
            vec![]
        } else {
            vec![format!("params {lo}..{hi}")]
        }
    };
    Err(Error::ParamSetMismatch {
        left_only: describe(b.min(a), a),
        right_only: describe(a.min(b), b),
    })
}

/// Dot product of two gradients over the identical ordered parameter set.
/// Parameters absent from one side contribute zero; differing parameter sets
/// are an error naming the symmetric difference.
pub fn grad_dot<F: Scalar>(a: &GradMap<F>, b: &GradMap<F>) -> Result<f64> {
    check_universes(a.universe, b.universe)?;
    let mut acc = 0.0f64;
    for (id, ga) in a.iter() {
        if let Some(gb) = b.get(id) {
            if ga.shape() != gb.shape() {
                return Err(Error::shape("grad_dot", ga.shape(), gb.shape()));
            }
            acc += ga.dot_f64(gb);
        }
    }
    Ok(acc)
}

/// Binds store parameters into a tape as leaves, one leaf per parameter, and
/// reads their gradients back out after backward.
pub struct Binder<F: Scalar> {
    map: BTreeMap<ParamId, Var>,
    needs_grad: bool,
    universe: usize,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Binder<F> {
    pub fn new(view: &dyn ParamView<F>, needs_grad: bool) -> Self {
        Binder {
            map: BTreeMap::new(),
            needs_grad,
            universe: view.universe(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<F>, view: &dyn ParamView<F>, id: ParamId) -> Var {
        if let Some(&v) = self.map.get(&id) {
            return v;
        }
        let t = view.param(id).clone();
        let v = if self.needs_grad {
            tape.leaf(t)
        } else {
            tape.constant(t)
        };
        self.map.insert(id, v);
        v
    }

    /// Collects the gradients of every bound parameter (zeros omitted).
    pub fn read_grads(&self, tape: &Tape<F>) -> GradMap<F> {
        let mut out = GradMap::new(self.universe);
        for (&id, &v) in self.map.iter() {
            if let Some(g) = tape.grad_ref(v) {
                out.insert(id, g.clone());
            }
        }
        out
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.map.iter().map(|(&k, &v)| (k, v))
    }
}

// ---- initialization ----

/// He-normal init for a conv weight [cout, cin/g, kh, kw].
pub fn init_conv<F: Scalar>(
    store: &mut ParamStore<F>,
    rng_: &mut impl Rng,
    name: String,
    shape: [usize; 4],
) -> ParamId {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| rng::normal(rng_) * std)
        .collect();
    store.add(name, Tensor::from_f64_slice(&shape, &data).unwrap())
}

pub fn init_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    rng_: &mut impl Rng,
    name: &str,
    out_dim: usize,
    in_dim: usize,
) -> (ParamId, ParamId) {
    let std = (1.0 / in_dim as f64).sqrt();
    let data: Vec<f64> = (0..out_dim * in_dim)
        .map(|_| rng::normal(rng_) * std)
        .collect();
    let w = store.add(
        format!("{name}.w"),
        Tensor::from_f64_slice(&[out_dim, in_dim], &data).unwrap(),
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
    (w, b)
}

// ---- batch norm with optional running statistics ----

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Per-batch statistics (search and from-scratch training).
    Train,
    /// Fixed running statistics (falls back to batch stats when none were
    /// recorded yet).
    Eval,
}

#[derive(Clone)]
pub struct Running {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub initialized: bool,
}

impl Running {
    pub fn new(channels: usize) -> Self {
        Running {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            initialized: false,
        }
    }
}

/// One batch-norm layer: optional affine parameters, optional running stats.
#[derive(Clone)]
pub struct BnUnit {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running: Option<Running>,
}

impl BnUnit {
    pub fn affine<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        track_running: bool,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        BnUnit {
            gamma: Some(gamma),
            beta: Some(beta),
            running: track_running.then(|| Running::new(channels)),
        }
    }

    pub fn plain(channels: usize, track_running: bool) -> Self {
        BnUnit {
            gamma: None,
            beta: None,
            running: track_running.then(|| Running::new(channels)),
        }
    }

    pub fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let gamma = self.gamma.map(|id| binder.bind(tape, view, id));
        let beta = self.beta.map(|id| binder.bind(tape, view, id));
        let use_running = matches!(mode, BnMode::Eval)
            && self.running.as_ref().map(|r| r.initialized).unwrap_or(false);
        if use_running {
            let r = self.running.as_ref().unwrap();
            let invstd: Vec<f64> = r.var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
            tape.batch_norm_with_stats(x, gamma, beta, &r.mean, &invstd)
        } else {
            let y = tape.batch_norm(x, gamma, beta, BN_EPS)?;
            if matches!(mode, BnMode::Train) {
                if let Some(r) = self.running.as_mut() {
                    let (mean, invstd) = crate::kernels::batch_stats(tape.value(x), 0.0);
                    for c in 0..mean.len() {
                        let var = 1.0 / (invstd[c] * invstd[c]);
                        if r.initialized {
                            r.mean[c] = (1.0 - r.momentum) * r.mean[c] + r.momentum * mean[c];
                            r.var[c] = (1.0 - r.momentum) * r.var[c] + r.momentum * var;
                        } else {
                            r.mean[c] = mean[c];
                            r.var[c] = var;
                        }
                    }
                    r.initialized = true;
                }
            }
            Ok(y)
        }
    }
}

// ---- composite blocks ----

/// ReLU -> 2d conv -> batch norm (affine).
#[derive(Clone)]
pub struct ReluConvBn {
    pub w: ParamId,
    pub bn: BnUnit,
    pub spec: Conv2dSpec,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        rng_: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        track_running: bool,
    ) -> Self {
        let w = init_conv(store, rng_, format!("{name}.w"), [c_out, c_in, kernel, kernel]);
        let bn = BnUnit::affine(store, &format!("{name}.bn"), c_out, track_running);
        ReluConvBn { w, bn, spec }
    }

    pub fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let r = tape.relu(x);
        let w = binder.bind(tape, view, self.w);
        let c = tape.conv2d(r, w, self.spec)?;
        self.bn.forward(tape, binder, view, c, mode)
    }
}

/// Depthwise-separable conv block, applied twice as in cell search spaces:
/// (ReLU -> depthwise kxk -> pointwise 1x1 -> BN) x 2. The first depthwise
/// conv carries the stride.
#[derive(Clone)]
pub struct SepConv {
    dw1: ParamId,
    pw1: ParamId,
    bn1: BnUnit,
    dw2: ParamId,
    pw2: ParamId,
    bn2: BnUnit,
    kernel: usize,
    stride: usize,
}

impl SepConv {
    pub fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        rng_: &mut impl Rng,
        name: &str,
        c: usize,
        kernel: usize,
        stride: usize,
        track_running: bool,
    ) -> Self {
        let dw1 = init_conv(store, rng_, format!("{name}.dw1"), [c, 1, kernel, kernel]);
        let pw1 = init_conv(store, rng_, format!("{name}.pw1"), [c, c, 1, 1]);
        let bn1 = BnUnit::affine(store, &format!("{name}.bn1"), c, track_running);
        let dw2 = init_conv(store, rng_, format!("{name}.dw2"), [c, 1, kernel, kernel]);
        let pw2 = init_conv(store, rng_, format!("{name}.pw2"), [c, c, 1, 1]);
        let bn2 = BnUnit::affine(store, &format!("{name}.bn2"), c, track_running);
        SepConv {
            dw1,
            pw1,
            bn1,
            dw2,
            pw2,
            bn2,
            kernel,
            stride,
        }
    }

    pub fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let c = tape.value(x).shape()[1];
        let pad = self.kernel / 2;
        let dw_spec = |stride| Conv2dSpec {
            stride,
            padding: pad,
            dilation: 1,
            groups: c,
        };
        let mut h = tape.relu(x);
        let dw1 = binder.bind(tape, view, self.dw1);
        h = tape.conv2d(h, dw1, dw_spec(self.stride))?;
        let pw1 = binder.bind(tape, view, self.pw1);
        h = tape.conv2d(h, pw1, Conv2dSpec::pointwise())?;
        h = self.bn1.forward(tape, binder, view, h, mode)?;
        h = tape.relu(h);
        let dw2 = binder.bind(tape, view, self.dw2);
        h = tape.conv2d(h, dw2, dw_spec(1))?;
        let pw2 = binder.bind(tape, view, self.pw2);
        h = tape.conv2d(h, pw2, Conv2dSpec::pointwise())?;
        self.bn2.forward(tape, binder, view, h, mode)
    }
}

/// Dilated depthwise conv block: ReLU -> depthwise kxk (dilation 2) ->
/// pointwise 1x1 -> BN.
#[derive(Clone)]
pub struct DilConv {
    dw: ParamId,
    pw: ParamId,
    bn: BnUnit,
    kernel: usize,
    stride: usize,
}

impl DilConv {
    pub fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        rng_: &mut impl Rng,
        name: &str,
        c: usize,
        kernel: usize,
        stride: usize,
        track_running: bool,
    ) -> Self {
        let dw = init_conv(store, rng_, format!("{name}.dw"), [c, 1, kernel, kernel]);
        let pw = init_conv(store, rng_, format!("{name}.pw"), [c, c, 1, 1]);
        let bn = BnUnit::affine(store, &format!("{name}.bn"), c, track_running);
        DilConv {
            dw,
            pw,
            bn,
            kernel,
            stride,
        }
    }

    pub fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let c = tape.value(x).shape()[1];
        let spec = Conv2dSpec {
            stride: self.stride,
            padding: self.kernel - 1,
            dilation: 2,
            groups: c,
        };
        let mut h = tape.relu(x);
        let dw = binder.bind(tape, view, self.dw);
        h = tape.conv2d(h, dw, spec)?;
        let pw = binder.bind(tape, view, self.pw);
        h = tape.conv2d(h, pw, Conv2dSpec::pointwise())?;
        self.bn.forward(tape, binder, view, h, mode)
    }
}

/// Halves spatial extent while keeping channels: ReLU, two stride-2 1x1 convs
/// over offset pixels, channel concat, BN. Stands in for identity on
/// stride-2 edges.
#[derive(Clone)]
pub struct FactorizedReduce {
    w1: ParamId,
    w2: ParamId,
    bn: BnUnit,
}

impl FactorizedReduce {
    pub fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        rng_: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        track_running: bool,
    ) -> Self {
        let half = c_out / 2;
        let w1 = init_conv(store, rng_, format!("{name}.w1"), [half, c_in, 1, 1]);
        let w2 = init_conv(store, rng_, format!("{name}.w2"), [c_out - half, c_in, 1, 1]);
        let bn = BnUnit::affine(store, &format!("{name}.bn"), c_out, track_running);
        FactorizedReduce { w1, w2, bn }
    }

    pub fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let spec = Conv2dSpec {
            stride: 2,
            padding: 0,
            dilation: 1,
            groups: 1,
        };
        let r = tape.relu(x);
        let w1 = binder.bind(tape, view, self.w1);
        let a = tape.conv2d(r, w1, spec)?;
        let shifted = tape.slice_hw(r, 1, 1)?;
        let w2 = binder.bind(tape, view, self.w2);
        let b = tape.conv2d(shifted, w2, spec)?;
        let cat = tape.concat_channels(&[a, b])?;
        self.bn.forward(tape, binder, view, cat, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_dot_examples() {
        // unit gradients on the same single parameter -> product of entries
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::zeros(&[2]));
        let mut a: GradMap<f64> = GradMap::new(store.len());
        let mut b: GradMap<f64> = GradMap::new(store.len());
        a.insert(p, Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
        b.insert(p, Tensor::from_f64_slice(&[2], &[3.0, -1.0]).unwrap());
        assert_eq!(grad_dot(&a, &b).unwrap(), 1.0);

        // orthogonal: disjoint support contributes zero
        let q = store.add("v", Tensor::zeros(&[2]));
        let mut c: GradMap<f64> = GradMap::new(store.len());
        c.insert(q, Tensor::from_f64_slice(&[2], &[5.0, 5.0]).unwrap());
        let mut a2: GradMap<f64> = GradMap::new(store.len());
        a2.insert(p, Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
        assert_eq!(grad_dot(&a2, &c).unwrap(), 0.0);
    }

    #[test]
    fn grad_dot_rejects_mismatched_sets() {
        let a: GradMap<f64> = GradMap::new(5);
        let b: GradMap<f64> = GradMap::new(7);
        let err = grad_dot(&a, &b).unwrap_err();
        assert!(matches!(err, Error::ParamSetMismatch { .. }));
        assert!(err.to_string().contains("5..7"), "{err}");
    }

    #[test]
    fn overlay_shadows_base() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::from_f64_slice(&[1], &[1.0]).unwrap());
        let q = store.add("v", Tensor::from_f64_slice(&[1], &[2.0]).unwrap());
        let mut ov = Overlay::new(&store);
        ov.delta
            .insert(p, Tensor::from_f64_slice(&[1], &[10.0]).unwrap());
        assert_eq!(ov.param(p).data()[0], 10.0);
        assert_eq!(ov.param(q).data()[0], 2.0);
    }

    #[test]
    fn binder_reuses_leaves_and_reads_grads() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64_slice(&[2], &[2.0, 3.0]).unwrap());
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::new(&store, true);
        let v1 = binder.bind(&mut tape, &store, w);
        let v2 = binder.bind(&mut tape, &store, w);
        assert_eq!(v1, v2);
        let loss = tape.sum_all(v1);
        tape.backward(loss).unwrap();
        let grads = binder.read_grads(&tape);
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn fd_check_composite_blocks() {
        // gradients through sep/dil conv and factorized reduce blocks w.r.t.
        // both the input and every parameter
        use crate::fdcheck::{fd_gradient_check, FdTol};
        let mut rng_ = crate::rng::stream(1234, &[1]);
        let mut store = ParamStore::<f64>::new();
        let mut sep = SepConv::build(&mut store, &mut rng_, "sep", 3, 3, 1, false);
        let mut dil = DilConv::build(&mut store, &mut rng_, "dil", 3, 3, 1, false);
        let mut fr = FactorizedReduce::build(&mut store, &mut rng_, "fr", 3, 4, false);
        let x0 = crate::fdcheck::fd_random(2 * 3 * 6 * 6, 55, 0.7);
        let wsel = crate::fdcheck::fd_random(2 * 4 * 3 * 3, 56, 1.0);

        let flat0: Vec<f64> = {
            let mut v = x0.clone();
            for id in store.ids() {
                v.extend(store.get(id).to_f64_vec());
            }
            v
        };
        let mut run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut store2 = ParamStore::<f64>::new();
            let mut off = x0.len();
            // rebuild the store with perturbed values, same order
            for id in store.ids() {
                let t = store.get(id);
                let n = t.numel();
                store2.add(
                    store.name(id),
                    Tensor::from_f64_slice(t.shape(), &flat[off..off + n]).unwrap(),
                );
                off += n;
            }
            let mut tape = Tape::<f64>::new();
            let mut binder = Binder::new(&store2, true);
            let x = tape.leaf(Tensor::from_f64_slice(&[2, 3, 6, 6], &flat[..x0.len()]).unwrap());
            let a = sep
                .forward(&mut tape, &mut binder, &store2, x, BnMode::Train)
                .unwrap();
            let b = dil
                .forward(&mut tape, &mut binder, &store2, x, BnMode::Train)
                .unwrap();
            let s = tape.add(a, b).unwrap();
            let f = fr
                .forward(&mut tape, &mut binder, &store2, s, BnMode::Train)
                .unwrap();
            let wk = Tensor::from_f64_slice(&[2, 4, 3, 3], &wsel).unwrap();
            let wk = tape.constant(wk);
            let prod = tape.mul(f, wk).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss).unwrap();
            let mut grads = tape.grad(x).to_f64_vec();
            for id in store2.ids() {
                let gm = binder.read_grads(&tape);
                match gm.get(id) {
                    Some(g) => grads.extend(g.to_f64_vec()),
                    None => grads.extend(vec![0.0; store2.get(id).numel()]),
                }
            }
            (tape.value(loss).item(), grads)
        };
        let (_, analytic) = run(&flat0);
        let out = fd_gradient_check(|x| run(x).0, &flat0, &analytic, FdTol::f64_default());
        assert!(out.ok(), "{out}");
    }
}
