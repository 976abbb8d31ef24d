//! Augmentation search space: 15 image operations, learnable sampling
//! parameters, exact policy log-probabilities with closed-form gradients,
//! exhaustive enumeration for small spaces, and the transforms themselves.
//!
//! A policy is K slots of (operation, apply flag, magnitude bin). The
//! learnable parameters are, per slot: sampling logits over operations,
//! an application-probability logit per operation, and magnitude-bin logits
//! per operation. The magnitude bin is sampled whether or not the operation
//! ends up applied; the log-probability of a policy only charges for the
//! magnitude when the apply flag is set, because an unapplied magnitude
//! never influences the loss.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NUM_OPS: usize = 15;
pub const NUM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugOpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
}

use AugOpKind::*;

impl AugOpKind {
    pub const ALL: [AugOpKind; NUM_OPS] = [
        ShearX,
        ShearY,
        TranslateX,
        TranslateY,
        Rotate,
        AutoContrast,
        Invert,
        Equalize,
        Solarize,
        Posterize,
        Contrast,
        Color,
        Brightness,
        Sharpness,
        Cutout,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShearX => "shear-x",
            ShearY => "shear-y",
            TranslateX => "translate-x",
            TranslateY => "translate-y",
            Rotate => "rotate",
            AutoContrast => "auto-contrast",
            Invert => "invert",
            Equalize => "equalize",
            Solarize => "solarize",
            Posterize => "posterize",
            Contrast => "contrast",
            Color => "color",
            Brightness => "brightness",
            Sharpness => "sharpness",
            Cutout => "cutout",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Magnitude range (lo, hi) in the operation's own units. None for
    /// operations that ignore magnitude. Shear and translate are fractions
    /// (translate and cutout of the image width), rotate is degrees,
    /// solarize is a threshold, posterize is bits kept, the enhance group
    /// is a blend factor.
    pub fn magnitude_range(self) -> Option<(f64, f64)> {
        match self {
            ShearX | ShearY => Some((-0.3, 0.3)),
            TranslateX | TranslateY => Some((-0.45, 0.45)),
            Rotate => Some((-30.0, 30.0)),
            AutoContrast | Invert | Equalize => None,
            Solarize => Some((1.0, 0.0)),
            Posterize => Some((8.0, 4.0)),
            Contrast | Color | Brightness | Sharpness => Some((0.1, 1.9)),
            Cutout => Some((0.0, 0.6)),
        }
    }

    pub fn uses_magnitude(self) -> bool {
        self.magnitude_range().is_some()
    }

    /// Linear bin -> magnitude value map over `bins` uniformly spaced values.
    pub fn bin_value(self, bin: usize, bins: usize) -> f64 {
        match self.magnitude_range() {
            Some((lo, hi)) => {
                if bins <= 1 {
                    lo
                } else {
                    lo + (hi - lo) * bin as f64 / (bins - 1) as f64
                }
            }
            None => 0.0,
        }
    }
}

/// Learnable augmentation parameters for K slots, stored flat so the
/// optimizer and the score-gradient see one contiguous vector. Layout:
/// sampling logits [K x ops], probability logits [K x ops], magnitude
/// logits [K x ops x bins].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub slots: usize,
    pub num_ops: usize,
    pub num_bins: usize,
    data: Vec<f64>,
}

impl AugParams {
    /// Uniform start: all logits zero.
    pub fn new_uniform(slots: usize) -> Self {
        Self::with_dims(slots, NUM_OPS, NUM_BINS)
    }

    pub fn with_dims(slots: usize, num_ops: usize, num_bins: usize) -> Self {
        assert!(slots >= 1 && num_ops >= 1 && num_bins >= 1);
        let dim = slots * num_ops * (2 + num_bins);
        AugParams {
            slots,
            num_ops,
            num_bins,
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn idx_pi(&self, k: usize, o: usize) -> usize {
        k * self.num_ops + o
    }

    pub fn idx_prob(&self, k: usize, o: usize) -> usize {
        self.slots * self.num_ops + k * self.num_ops + o
    }

    pub fn idx_delta(&self, k: usize, o: usize, b: usize) -> usize {
        2 * self.slots * self.num_ops + (k * self.num_ops + o) * self.num_bins + b
    }

    pub fn pi_row(&self, k: usize) -> &[f64] {
        let i = self.idx_pi(k, 0);
        &self.data[i..i + self.num_ops]
    }

    pub fn prob_logit(&self, k: usize, o: usize) -> f64 {
        self.data[self.idx_prob(k, o)]
    }

    pub fn delta_block(&self, k: usize, o: usize) -> &[f64] {
        let i = self.idx_delta(k, o, 0);
        &self.data[i..i + self.num_bins]
    }

    pub fn set_pi(&mut self, k: usize, o: usize, v: f64) {
        let i = self.idx_pi(k, o);
        self.data[i] = v;
    }

    pub fn set_prob_logit(&mut self, k: usize, o: usize, v: f64) {
        let i = self.idx_prob(k, o);
        self.data[i] = v;
    }

    pub fn set_delta(&mut self, k: usize, o: usize, b: usize, v: f64) {
        let i = self.idx_delta(k, o, b);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Human-readable name of one flat-vector coordinate, e.g. "pi[1,rotate]"
    /// or "delta[0,shear-x,3]".
    pub fn coord_name(&self, idx: usize) -> String {
        let ko = self.slots * self.num_ops;
        let op_name = |o: usize| {
            if self.num_ops == NUM_OPS {
                AugOpKind::from_id(o)
                    .map(|k| k.name().to_string())
                    .unwrap_or_else(|| o.to_string())
            } else {
                o.to_string()
            }
        };
        if idx < ko {
            format!("pi[{},{}]", idx / self.num_ops, op_name(idx % self.num_ops))
        } else if idx < 2 * ko {
            let i = idx - ko;
            format!(
                "prob[{},{}]",
                i / self.num_ops,
                op_name(i % self.num_ops)
            )
        } else {
            let i = idx - 2 * ko;
            let b = i % self.num_bins;
            let rest = i / self.num_bins;
            format!(
                "delta[{},{},{}]",
                rest / self.num_ops,
                op_name(rest % self.num_ops),
                b
            )
        }
    }

    fn check_slot(&self, slot: &PolicySlot) -> Result<()> {
        if slot.op >= self.num_ops {
            return Err(Error::invalid(
                "policy_log_prob",
                format!(
                    "op id {} out of range (space has {} ops)",
                    slot.op, self.num_ops
                ),
            ));
        }
        if slot.bin >= self.num_bins {
            return Err(Error::invalid(
                "policy_log_prob",
                format!(
                    "magnitude bin {} out of range (space has {} bins)",
                    slot.bin, self.num_bins
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySlot {
    pub op: usize,
    pub apply: bool,
    pub bin: usize,
}

/// One sampled policy: an ordered list of slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub slots: Vec<PolicySlot>,
}

impl Policy {
    /// Human-readable one-liner, e.g. "shear-x@3 skip(rotate@7)".
    pub fn describe(&self) -> String {
        self.slots
            .iter()
            .map(|s| {
                let name = AugOpKind::from_id(s.op).map(|k| k.name()).unwrap_or("?");
                if s.apply {
                    format!("{name}@{}", s.bin)
                } else {
                    format!("skip({name}@{})", s.bin)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(sigmoid(x)), stable for large negative x.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

/// Draw one policy: per slot, operation from softmax(pi), apply flag from
/// the chosen operation's probability, magnitude bin from the chosen
/// operation's bin logits. The bin is drawn even when the flag is off so
/// the stream layout is independent of outcomes.
pub fn sample_policy(params: &AugParams, rng_: &mut impl Rng) -> Policy {
    let mut slots = Vec::with_capacity(params.slots);
    for k in 0..params.slots {
        let probs = softmax_f64(params.pi_row(k));
        let op = rng::categorical(rng_, &probs);
        let p = sigmoid(params.prob_logit(k, op));
        let apply = rng::uniform_open(rng_) < p;
        let bins = softmax_f64(params.delta_block(k, op));
        let bin = rng::categorical(rng_, &bins);
        slots.push(PolicySlot { op, apply, bin });
    }
    Policy { slots }
}

/// Log-probability of a policy and its exact gradient w.r.t. the flat
/// parameter vector. The magnitude term enters only for applied slots;
/// gradients are nonzero only at the sampled slot/op rows and, for the
/// magnitude logits, only in the sampled operation's block.
pub fn policy_log_prob(params: &AugParams, policy: &Policy) -> Result<(f64, Vec<f64>)> {
    if policy.slots.len() != params.slots {
        return Err(Error::invalid(
            "policy_log_prob",
            format!(
                "policy has {} slots, parameters have {}",
                policy.slots.len(),
                params.slots
            ),
        ));
    }
    let mut lp = 0.0;
    let mut grad = vec![0.0; params.dim()];
    for (k, slot) in policy.slots.iter().enumerate() {
        params.check_slot(slot)?;
        let sm = softmax_f64(params.pi_row(k));
        lp += sm[slot.op].ln();
        for o in 0..params.num_ops {
            let ind = if o == slot.op { 1.0 } else { 0.0 };
            grad[params.idx_pi(k, o)] += ind - sm[o];
        }
        let l = params.prob_logit(k, slot.op);
        let p = sigmoid(l);
        let y = if slot.apply { 1.0 } else { 0.0 };
        lp += if slot.apply {
            log_sigmoid(l)
        } else {
            log_sigmoid(-l)
        };
        grad[params.idx_prob(k, slot.op)] += y - p;
        if slot.apply {
            let smd = softmax_f64(params.delta_block(k, slot.op));
            lp += smd[slot.bin].ln();
            for b in 0..params.num_bins {
                let ind = if b == slot.bin { 1.0 } else { 0.0 };
                grad[params.idx_delta(k, slot.op, b)] += ind - smd[b];
            }
        }
    }
    Ok((lp, grad))
}

/// Cap on the enumerated cardinality.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Exhaustively list every (policy, sampling probability) over the first
/// `ops` operations and `bins` magnitude bins. The sampling probability is
/// the full draw density of `sample_policy` restricted (renormalized) to
/// that prefix, including the magnitude factor for unapplied slots, so the
/// list sums to one. With `ops`/`bins` equal to the parameter dimensions the
/// restriction is the identity and the probabilities are the true sampling
/// density.
pub fn enumerate_policy_space(
    params: &AugParams,
    ops: usize,
    bins: usize,
) -> Result<Vec<(Policy, f64)>> {
    if ops == 0 || ops > params.num_ops || bins == 0 || bins > params.num_bins {
        return Err(Error::invalid(
            "enumerate_policy_space",
            format!(
                "restriction ({ops} ops, {bins} bins) outside space ({} ops, {} bins)",
                params.num_ops, params.num_bins
            ),
        ));
    }
    let per_slot = (ops as u128) * 2 * (bins as u128);
    let mut cardinality: u128 = 1;
    for _ in 0..params.slots {
        cardinality = cardinality.saturating_mul(per_slot);
    }
    if cardinality > ENUMERATION_CAP {
        return Err(Error::PolicySpaceTooLarge {
            cardinality,
            cap: ENUMERATION_CAP,
        });
    }

    // per-slot tables over the restricted prefix
    let mut op_probs = Vec::with_capacity(params.slots);
    let mut apply_p = Vec::with_capacity(params.slots);
    let mut bin_probs = Vec::with_capacity(params.slots);
    for k in 0..params.slots {
        op_probs.push(softmax_f64(&params.pi_row(k)[..ops]));
        let mut ap = Vec::with_capacity(ops);
        let mut bp = Vec::with_capacity(ops);
        for o in 0..ops {
            ap.push(sigmoid(params.prob_logit(k, o)));
            bp.push(softmax_f64(&params.delta_block(k, o)[..bins]));
        }
        apply_p.push(ap);
        bin_probs.push(bp);
    }

    let mut out = Vec::with_capacity(cardinality as usize);
    let mut counters = vec![0usize; params.slots];
    let per_slot = per_slot as usize;
    loop {
        let mut prob = 1.0;
        let mut slots = Vec::with_capacity(params.slots);
        for (k, &c) in counters.iter().enumerate() {
            let op = c / (2 * bins);
            let apply = (c / bins) % 2 == 1;
            let bin = c % bins;
            let p = apply_p[k][op];
            prob *= op_probs[k][op] * if apply { p } else { 1.0 - p } * bin_probs[k][op][bin];
            slots.push(PolicySlot { op, apply, bin });
        }
        out.push((Policy { slots }, prob));
        // odometer increment
        let mut k = 0;
        loop {
            if k == counters.len() {
                return Ok(out);
            }
            counters[k] += 1;
            if counters[k] < per_slot {
                break;
            }
            counters[k] = 0;
            k += 1;
        }
    }
}

// ---- image transforms ----

/// Bilinear sample with zero outside the image.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let x0 = fx.floor();
    let y0 = fy.floor();
    let dx = fx - x0;
    let dy = fy - y0;
    let mut acc = 0.0;
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1.0, dy)] {
        if wy == 0.0 || yy < 0.0 || yy >= h as f64 {
            continue;
        }
        let row = yy as usize * w;
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1.0, dx)] {
            if wx == 0.0 || xx < 0.0 || xx >= w as f64 {
                continue;
            }
            acc += wy * wx * plane[row + xx as usize];
        }
    }
    acc
}

/// Inverse-map affine warp about the image center. For output pixel (x, y),
/// the source location is (x, y) plus the given linear map of centered
/// coordinates.
fn warp_affine(img: &[f64], c: usize, h: usize, w: usize, m: [f64; 4], t: [f64; 2]) -> Vec<f64> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let v = y as f64 - cy;
            for x in 0..w {
                let u = x as f64 - cx;
                let sx = m[0] * u + m[1] * v + cx + t[0];
                let sy = m[2] * u + m[3] * v + cy + t[1];
                dst[y * w + x] = sample_bilinear(plane, h, w, sy, sx);
            }
        }
    }
    out
}

fn luminance(img: &[f64], c: usize, hw: usize, i: usize) -> f64 {
    if c == 3 {
        0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i]
    } else {
        // average across whatever channels exist
        (0..c).map(|ch| img[ch * hw + i]).sum::<f64>() / c as f64
    }
}

fn quantize(v: f64) -> usize {
    ((v * 255.0).round().clamp(0.0, 255.0)) as usize
}

/// Histogram equalization per channel, integer-arithmetic LUT over 256
/// levels matching the common imaging-library behavior.
fn equalize_channel(plane: &mut [f64]) {
    let mut hist = [0u64; 256];
    for &v in plane.iter() {
        hist[quantize(v)] += 1;
    }
    let nonzero: Vec<u64> = hist.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.len() <= 1 {
        return;
    }
    let step = (nonzero.iter().sum::<u64>() - nonzero.last().unwrap()) / 255;
    if step == 0 {
        return;
    }
    let mut lut = [0u8; 256];
    let mut n = step / 2;
    for i in 0..256 {
        lut[i] = (n / step).min(255) as u8;
        n += hist[i];
    }
    for v in plane.iter_mut() {
        *v = lut[quantize(*v)] as f64 / 255.0;
    }
}

/// Apply one operation at a concrete magnitude value to one image
/// (channel-first, values in [0,1]). `rng_` is consumed only by cutout.
pub fn apply_op_value(
    kind: AugOpKind,
    value: f64,
    img: &mut Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    rng_: &mut impl Rng,
) {
    let hw = h * w;
    match kind {
        ShearX => {
            *img = warp_affine(img, c, h, w, [1.0, value, 0.0, 1.0], [0.0, 0.0]);
        }
        ShearY => {
            *img = warp_affine(img, c, h, w, [1.0, 0.0, value, 1.0], [0.0, 0.0]);
        }
        TranslateX => {
            let t = value * w as f64;
            *img = warp_affine(img, c, h, w, [1.0, 0.0, 0.0, 1.0], [-t, 0.0]);
        }
        TranslateY => {
            let t = value * h as f64;
            *img = warp_affine(img, c, h, w, [1.0, 0.0, 0.0, 1.0], [0.0, -t]);
        }
        Rotate => {
            let a = value.to_radians();
            let (s, co) = a.sin_cos();
            *img = warp_affine(img, c, h, w, [co, s, -s, co], [0.0, 0.0]);
        }
        AutoContrast => {
            for ch in 0..c {
                let plane = &mut img[ch * hw..(ch + 1) * hw];
                let mn = plane.iter().cloned().fold(f64::INFINITY, f64::min);
                let mx = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if mx > mn {
                    for v in plane.iter_mut() {
                        *v = (*v - mn) / (mx - mn);
                    }
                }
            }
        }
        Invert => {
            for v in img.iter_mut() {
                *v = 1.0 - *v;
            }
        }
        Equalize => {
            for ch in 0..c {
                equalize_channel(&mut img[ch * hw..(ch + 1) * hw]);
            }
        }
        Solarize => {
            for v in img.iter_mut() {
                if *v >= value {
                    *v = 1.0 - *v;
                }
            }
        }
        Posterize => {
            let bits = value.round().clamp(1.0, 8.0) as u32;
            let mask = (0xffu32 << (8 - bits)) & 0xff;
            for v in img.iter_mut() {
                *v = (quantize(*v) as u32 & mask) as f64 / 255.0;
            }
        }
        Contrast => {
            let mean =
                (0..hw).map(|i| luminance(img, c, hw, i)).sum::<f64>() / hw as f64;
            for v in img.iter_mut() {
                *v = mean + value * (*v - mean);
            }
        }
        Color => {
            let lum: Vec<f64> = (0..hw).map(|i| luminance(img, c, hw, i)).collect();
            for ch in 0..c {
                for i in 0..hw {
                    let v = &mut img[ch * hw + i];
                    *v = lum[i] + value * (*v - lum[i]);
                }
            }
        }
        Brightness => {
            for v in img.iter_mut() {
                *v *= value;
            }
        }
        Sharpness => {
            // blend against a 3x3 smoothing (center weight 5, total 13);
            // border pixels keep their original value
            for ch in 0..c {
                let plane = img[ch * hw..(ch + 1) * hw].to_vec();
                let dst = &mut img[ch * hw..(ch + 1) * hw];
                for y in 1..h.saturating_sub(1) {
                    for x in 1..w.saturating_sub(1) {
                        let mut acc = 5.0 * plane[y * w + x];
                        for (dy, dx) in [
                            (-1i64, -1i64),
                            (-1, 0),
                            (-1, 1),
                            (0, -1),
                            (0, 1),
                            (1, -1),
                            (1, 0),
                            (1, 1),
                        ] {
                            acc += plane[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
                        }
                        let smooth = acc / 13.0;
                        dst[y * w + x] = smooth + value * (plane[y * w + x] - smooth);
                    }
                }
            }
        }
        Cutout => {
            let side = (value * w as f64).round() as i64;
            if side > 0 {
                let cy = (rng::uniform_open(rng_) * h as f64) as i64;
                let cx = (rng::uniform_open(rng_) * w as f64) as i64;
                let y0 = (cy - side / 2).max(0) as usize;
                let x0 = (cx - side / 2).max(0) as usize;
                let y1 = ((cy - side / 2 + side).max(0) as usize).min(h);
                let x1 = ((cx - side / 2 + side).max(0) as usize).min(w);
                for ch in 0..c {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            img[ch * hw + y * w + x] = 0.5;
                        }
                    }
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Apply a sampled policy to one image. Slots run in order; a slot with the
/// apply flag off is skipped entirely.
pub fn apply_policy_to_image(
    policy: &Policy,
    bins: usize,
    img: &mut Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    rng_: &mut impl Rng,
) {
    for slot in &policy.slots {
        if !slot.apply {
            continue;
        }
        let kind = AugOpKind::from_id(slot.op).expect("op id in range");
        let value = kind.bin_value(slot.bin, bins);
        apply_op_value(kind, value, img, c, h, w, rng_);
    }
}

/// Apply one policy to a whole [N, C, H, W] batch. Each image uses an rng
/// stream derived from (seed, tags..., image index), so processing order
/// cannot change the result.
pub fn apply_policy<F: Scalar>(
    policy: &Policy,
    batch: &Tensor<F>,
    bins: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Tensor<F>> {
    if batch.rank() != 4 {
        return Err(Error::BadRank {
            op: "apply_policy".to_string(),
            expected: 4,
            shape: batch.shape().to_vec(),
        });
    }
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let mut out = Tensor::zeros(batch.shape());
    let chw = c * h * w;
    let mut path = tags.to_vec();
    for i in 0..n {
        path.push(i as u64);
        let mut r = rng::stream(seed, &path);
        path.pop();
        let mut img: Vec<f64> = batch.data()[i * chw..(i + 1) * chw]
            .iter()
            .map(|&v| v.to_f64())
            .collect();
        apply_policy_to_image(policy, bins, &mut img, c, h, w, &mut r);
        for (dst, &v) in out.data_mut()[i * chw..(i + 1) * chw]
            .iter_mut()
            .zip(img.iter())
        {
            *dst = F::from_f64(v);
        }
    }
    Ok(out)
}

/// Per-channel normalization statistics, computed once over the raw training
/// pool and reused for every batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-channel mean and standard deviation of an [N, C, H, W] batch.
    pub fn from_batch<F: Scalar>(batch: &Tensor<F>) -> Result<Self> {
        if batch.rank() != 4 {
            return Err(Error::BadRank {
                op: "norm_stats".to_string(),
                expected: 4,
                shape: batch.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (
            batch.shape()[0],
            batch.shape()[1],
            batch.shape()[2],
            batch.shape()[3],
        );
        let per = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let hw = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for &v in &batch.data()[base..base + hw] {
                    mean[ch] += v.to_f64();
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= per;
        }
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for &v in &batch.data()[base..base + hw] {
                    let d = v.to_f64() - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let std = var.iter().map(|&v| (v / per).sqrt().max(1e-8)).collect();
        Ok(NormStats { mean, std })
    }
}

/// Normalize an [N, C, H, W] batch in place: (x - mean[c]) / std[c].
pub fn normalize_batch<F: Scalar>(batch: &mut Tensor<F>, stats: &NormStats) -> Result<()> {
    if batch.rank() != 4 {
        return Err(Error::BadRank {
            op: "normalize_batch".to_string(),
            expected: 4,
            shape: batch.shape().to_vec(),
        });
    }
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::InvalidArgument {
            op: "normalize_batch".to_string(),
            msg: format!("stats cover {} channels, batch has {}", stats.mean.len(), c),
        });
    }
    let hw = h * w;
    for i in 0..n {
        for ch in 0..c {
            let m = F::from_f64(stats.mean[ch]);
            let s = F::from_f64(1.0 / stats.std[ch]);
            let base = (i * c + ch) * hw;
            for v in &mut batch.data_mut()[base..base + hw] {
                *v = (*v - m) * s;
            }
        }
    }
    Ok(())
}
