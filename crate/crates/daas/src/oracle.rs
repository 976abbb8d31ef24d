//! Brute-force oracles for the hypergradient machinery.
//!
//! Everything here works on small, exactly enumerable policy spaces so that
//! expectations, mixed partials, and the one-step-unrolled hypergradient can
//! be computed to machine precision and compared against the Monte-Carlo
//! estimator the search uses. Losses are analytic closures (with a second
//! tier that routes a tiny linear model through the autodiff engine), which
//! keeps the enumeration exact.

use crate::augment::{enumerate_policy_space, policy_log_prob, sample_policy, AugParams, Policy};
use crate::error::Result;
use crate::rng::{self, tag};
use std::fmt;

/// Loss with gradient w.r.t. the parameter vector.
pub type LossGrad = (f64, Vec<f64>);

/// A tiny bi-level problem: a parameter vector, an enumerable policy space,
/// a per-policy training loss, and a policy-free validation loss. Both
/// losses must be twice continuously differentiable in the parameters, and
/// the training loss must ignore the magnitude bin of unapplied slots (the
/// real pipeline never reads those either; the mixed-partial identity relies
/// on it).
pub struct ToyProblem {
    pub name: String,
    pub theta_dim: usize,
    pub params: AugParams,
    pub ops: usize,
    pub bins: usize,
    pub train: Box<dyn Fn(&[f64], &Policy) -> LossGrad>,
    pub val: Box<dyn Fn(&[f64]) -> LossGrad>,
}

/// Exact enumeration results for E[L_t(theta, policy)].
pub struct ExactExpectation {
    pub value: f64,
    /// dE/dtheta
    pub grad_theta: Vec<f64>,
    /// dE/dgamma via the density derivative
    pub grad_gamma: Vec<f64>,
    /// d2E/(dtheta dgamma), [theta_dim x gamma_dim] row-major, computed by
    /// differentiating the enumerated density (product rule on the
    /// softmax/logistic factors, magnitude factor present for every slot)
    pub mixed: Vec<f64>,
    /// the same matrix as the enumerated expectation of
    /// grad_theta L_t x grad_gamma log p, using the policy log-probability
    /// whose magnitude factor only appears for applied slots; agreement with
    /// `mixed` is the score-function identity
    pub mixed_score_form: Vec<f64>,
}

/// d(density)/dgamma for one enumerated policy, by direct product-rule
/// differentiation of its probability factors. Every slot contributes its
/// magnitude factor here, applied or not, because the bin is always drawn.
fn density_grad(params: &AugParams, ops: usize, bins: usize, policy: &Policy, q: f64) -> Vec<f64> {
    let mut g = vec![0.0; params.dim()];
    for (k, slot) in policy.slots.iter().enumerate() {
        // softmax over the restricted op prefix
        let row = &params.pi_row(k)[..ops];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for o in 0..ops {
            let sm_o = exps[o] / z;
            let ind = if o == slot.op { 1.0 } else { 0.0 };
            // d sm[op]/d pi_o = sm[op] * (ind - sm_o); q carries sm[op]
            g[params.idx_pi(k, o)] += q * (ind - sm_o);
        }
        let l = params.prob_logit(k, slot.op);
        let p = 1.0 / (1.0 + (-l).exp());
        // d/dl of p is p(1-p); of (1-p) is -p(1-p)
        let dfac = if slot.apply { 1.0 - p } else { -p };
        g[params.idx_prob(k, slot.op)] += q * dfac;
        let block = &params.delta_block(k, slot.op)[..bins];
        let mb = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bexps: Vec<f64> = block.iter().map(|&l| (l - mb).exp()).collect();
        let bz: f64 = bexps.iter().sum();
        for b in 0..bins {
            let sm_b = bexps[b] / bz;
            let ind = if b == slot.bin { 1.0 } else { 0.0 };
            g[params.idx_delta(k, slot.op, b)] += q * (ind - sm_b);
        }
    }
    g
}

/// Enumerate the policy space and reduce the training loss exactly.
pub fn exact_expected_training_loss(toy: &ToyProblem, theta: &[f64]) -> Result<ExactExpectation> {
    assert_eq!(theta.len(), toy.theta_dim);
    let space = enumerate_policy_space(&toy.params, toy.ops, toy.bins)?;
    let gdim = toy.params.dim();
    let tdim = toy.theta_dim;
    let mut value = 0.0;
    let mut grad_theta = vec![0.0; tdim];
    let mut grad_gamma = vec![0.0; gdim];
    let mut mixed = vec![0.0; tdim * gdim];
    let mut mixed_score = vec![0.0; tdim * gdim];
    for (policy, q) in &space {
        let (lt, gt) = (toy.train)(theta, policy);
        let dq = density_grad(&toy.params, toy.ops, toy.bins, policy, *q);
        let (_, score) = policy_log_prob(&toy.params, policy)?;
        value += q * lt;
        for i in 0..tdim {
            grad_theta[i] += q * gt[i];
        }
        for j in 0..gdim {
            grad_gamma[j] += dq[j] * lt;
            for i in 0..tdim {
                mixed[i * gdim + j] += dq[j] * gt[i];
                mixed_score[i * gdim + j] += q * score[j] * gt[i];
            }
        }
    }
    Ok(ExactExpectation {
        value,
        grad_theta,
        grad_gamma,
        mixed,
        mixed_score_form: mixed_score,
    })
}

/// Exact one-step-unrolled hypergradient.
pub struct HyperExact {
    /// theta after the virtual step theta - eta * dE/dtheta
    pub theta_prime: Vec<f64>,
    /// d L_v(theta') / d gamma, via the chain rule through the virtual step
    pub grad: Vec<f64>,
    /// the enumerated expectation used for the step
    pub expectation: ExactExpectation,
}

/// Differentiate L_v(theta - eta * dE/dtheta) w.r.t. gamma exactly:
/// the only gamma-dependence is the mixed partial of E.
pub fn exact_hypergradient(toy: &ToyProblem, theta: &[f64], eta: f64) -> Result<HyperExact> {
    let exp = exact_expected_training_loss(toy, theta)?;
    let theta_prime: Vec<f64> = theta
        .iter()
        .zip(&exp.grad_theta)
        .map(|(&t, &g)| t - eta * g)
        .collect();
    let (_, val_grad) = (toy.val)(&theta_prime);
    let gdim = toy.params.dim();
    let mut grad = vec![0.0; gdim];
    for j in 0..gdim {
        let mut acc = 0.0;
        for i in 0..toy.theta_dim {
            acc += val_grad[i] * exp.mixed[i * gdim + j];
        }
        grad[j] = -eta * acc;
    }
    Ok(HyperExact {
        theta_prime,
        grad,
        expectation: exp,
    })
}

/// Which score gradient the Monte-Carlo estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreAblation {
    /// the exact gradient of the policy log-probability
    None,
    /// replace the magnitude-bin block of the score with a constant one at
    /// the sampled (slot, op) — the shortcut of treating the discrete
    /// magnitude as if it were differentiable; the bias report must flag it
    FlatMagnitude,
}

#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    /// policies per virtual step and per score term (M)
    pub m_policy: usize,
    /// independent estimator evaluations to average
    pub rounds: u64,
    pub seed: u64,
}

/// One per-coordinate line of the bias report.
#[derive(Debug, Clone)]
pub struct CoordReport {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    pub exact: f64,
    pub z: f64,
}

pub struct BiasReport {
    pub coords: Vec<CoordReport>,
    pub rounds: u64,
    pub policy_draws: u64,
    pub max_abs_z: f64,
    pub pass: bool,
    pub label: String,
}

pub const Z_LIMIT: f64 = 4.0;

impl fmt::Display for BiasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "bias report [{}]: {} rounds, {} policy draws, max |z| = {:.2} -> {}",
            self.label,
            self.rounds,
            self.policy_draws,
            self.max_abs_z,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        let mut worst: Vec<&CoordReport> = self.coords.iter().collect();
        worst.sort_by(|a, b| b.z.abs().total_cmp(&a.z.abs()));
        writeln!(
            f,
            "  {:<22} {:>12} {:>12} {:>12} {:>8}",
            "coordinate", "mc mean", "exact", "std err", "z"
        )?;
        for c in worst.iter().take(8) {
            writeln!(
                f,
                "  {:<22} {:>12.3e} {:>12.3e} {:>12.3e} {:>8.2}",
                c.name, c.mean, c.exact, c.std_error, c.z
            )?;
        }
        Ok(())
    }
}

/// Run the Monte-Carlo hypergradient estimator `rounds` times and compare
/// its mean against the exact enumerated hypergradient, coordinate by
/// coordinate. Each round draws `m_policy` policies, takes the virtual step
/// along their mean training gradient, and reuses the same policies for the
/// score terms — exactly the search-time estimator. Sharing the draws leaves
/// a finite-sample bias of order eta^2 / m, second-order in the virtual
/// step size, which the z-test absorbs at the small step sizes under test.
pub fn estimator_bias_report(
    toy: &ToyProblem,
    theta: &[f64],
    eta: f64,
    cfg: &McConfig,
    ablation: ScoreAblation,
) -> Result<BiasReport> {
    let exact = exact_hypergradient(toy, theta, eta)?;
    let gdim = toy.params.dim();
    let mut sum = vec![0.0; gdim];
    let mut sumsq = vec![0.0; gdim];
    let m = cfg.m_policy;
    for round in 0..cfg.rounds {
        let mut r = rng::stream(cfg.seed, &[tag::ORACLE, round]);
        let policies: Vec<Policy> = (0..m).map(|_| sample_policy(&toy.params, &mut r)).collect();
        let grads: Vec<Vec<f64>> = policies
            .iter()
            .map(|pol| (toy.train)(theta, pol).1)
            .collect();
        let mut step = vec![0.0; toy.theta_dim];
        for gt in &grads {
            for (s, g) in step.iter_mut().zip(gt) {
                *s += g / m as f64;
            }
        }
        let theta_prime: Vec<f64> = theta
            .iter()
            .zip(&step)
            .map(|(&t, &g)| t - eta * g)
            .collect();
        let (_, val_grad) = (toy.val)(&theta_prime);
        let mut est = vec![0.0; gdim];
        for (pol, gt) in policies.iter().zip(&grads) {
            let s: f64 = val_grad.iter().zip(gt).map(|(a, b)| a * b).sum();
            let (_, mut score) = policy_log_prob(&toy.params, pol)?;
            if ablation == ScoreAblation::FlatMagnitude {
                for (k, slot) in pol.slots.iter().enumerate() {
                    if slot.apply {
                        for b in 0..toy.params.num_bins {
                            score[toy.params.idx_delta(k, slot.op, b)] = 1.0;
                        }
                    }
                }
            }
            for j in 0..gdim {
                est[j] += (-eta) * s * score[j] / m as f64;
            }
        }
        for j in 0..gdim {
            sum[j] += est[j];
            sumsq[j] += est[j] * est[j];
        }
    }
    let nf = cfg.rounds as f64;
    let mut coords = Vec::with_capacity(gdim);
    let mut max_abs_z = 0.0f64;
    for j in 0..gdim {
        let mean = sum[j] / nf;
        let var = (sumsq[j] / nf - mean * mean).max(0.0);
        let se = (var / nf).sqrt();
        let diff = mean - exact.grad[j];
        let z = if se > 0.0 {
            diff / se
        } else if diff.abs() < 1e-14 {
            0.0
        } else {
            f64::INFINITY
        };
        max_abs_z = max_abs_z.max(z.abs());
        coords.push(CoordReport {
            name: toy.params.coord_name(j),
            mean,
            std_error: se,
            exact: exact.grad[j],
            z,
        });
    }
    Ok(BiasReport {
        coords,
        rounds: cfg.rounds,
        policy_draws: cfg.rounds * m as u64,
        max_abs_z,
        pass: max_abs_z <= Z_LIMIT,
        label: match ablation {
            ScoreAblation::None => "exact score".to_string(),
            ScoreAblation::FlatMagnitude => "flat magnitude score".to_string(),
        },
    })
}

// ---- toy families ----

fn random_table(r: &mut impl rand::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng::normal(r) * scale).collect()
}

impl ToyProblem {
    /// Quadratic family: L_t = 0.5 * |theta - t(policy)|^2 + c(policy) . theta
    /// with per-policy targets assembled from random per-(slot, op) tables;
    /// the magnitude table only contributes for applied slots. Validation is
    /// a plain quadratic around a random target.
    pub fn quadratic(seed: u64, theta_dim: usize, slots: usize, ops: usize, bins: usize) -> Self {
        let mut r = rng::stream(seed, &[tag::ORACLE, 1]);
        let mut params = AugParams::with_dims(slots, ops, bins);
        for v in params.data_mut() {
            *v = rng::normal(&mut r) * 0.6;
        }
        let d = theta_dim;
        // tables[slot][op]: applied base, skipped base, per-bin offsets
        let t_on: Vec<Vec<f64>> = (0..slots * ops)
            .map(|_| random_table(&mut r, d, 0.5))
            .collect();
        let t_off: Vec<Vec<f64>> = (0..slots * ops)
            .map(|_| random_table(&mut r, d, 0.5))
            .collect();
        let t_bin: Vec<Vec<f64>> = (0..slots * ops * bins)
            .map(|_| random_table(&mut r, d, 0.4))
            .collect();
        let c_on: Vec<Vec<f64>> = (0..slots * ops)
            .map(|_| random_table(&mut r, d, 0.3))
            .collect();
        let c_bin: Vec<Vec<f64>> = (0..slots * ops * bins)
            .map(|_| random_table(&mut r, d, 0.3))
            .collect();
        let val_target = random_table(&mut r, d, 1.0);
        let train = move |theta: &[f64], policy: &Policy| -> LossGrad {
            let mut t = vec![0.0; d];
            let mut c = vec![0.0; d];
            for (k, slot) in policy.slots.iter().enumerate() {
                let ko = k * ops + slot.op;
                if slot.apply {
                    let kb = ko * bins + slot.bin;
                    for i in 0..d {
                        t[i] += t_on[ko][i] + t_bin[kb][i];
                        c[i] += c_on[ko][i] + c_bin[kb][i];
                    }
                } else {
                    for i in 0..d {
                        t[i] += t_off[ko][i];
                    }
                }
            }
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            for i in 0..d {
                let e = theta[i] - t[i];
                loss += 0.5 * e * e + c[i] * theta[i];
                grad[i] = e + c[i];
            }
            (loss, grad)
        };
        let val = move |theta: &[f64]| -> LossGrad {
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            for i in 0..d {
                let e = theta[i] - val_target[i];
                loss += 0.5 * e * e;
                grad[i] = e;
            }
            (loss, grad)
        };
        ToyProblem {
            name: format!("quadratic(seed {seed}, {theta_dim} coords, {slots}x{ops}x{bins})"),
            theta_dim,
            params,
            ops,
            bins,
            train: Box::new(train),
            val: Box::new(val),
        }
    }

    /// Linear-in-theta expected training loss (t = 0), so the virtual step
    /// is gamma-affine and the hypergradient has a closed form.
    pub fn linear(seed: u64, theta_dim: usize, slots: usize, ops: usize, bins: usize) -> Self {
        let mut toy = Self::quadratic(seed, theta_dim, slots, ops, bins);
        let d = theta_dim;
        let mut r = rng::stream(seed, &[tag::ORACLE, 2]);
        let c_on: Vec<Vec<f64>> = (0..slots * ops)
            .map(|_| random_table(&mut r, d, 0.5))
            .collect();
        let c_off: Vec<Vec<f64>> = (0..slots * ops)
            .map(|_| random_table(&mut r, d, 0.5))
            .collect();
        let c_bin: Vec<Vec<f64>> = (0..slots * ops * bins)
            .map(|_| random_table(&mut r, d, 0.4))
            .collect();
        toy.name = format!("linear(seed {seed}, {theta_dim} coords, {slots}x{ops}x{bins})");
        toy.train = Box::new(move |theta: &[f64], policy: &Policy| -> LossGrad {
            let mut c = vec![0.0; d];
            for (k, slot) in policy.slots.iter().enumerate() {
                let ko = k * ops + slot.op;
                if slot.apply {
                    let kb = ko * bins + slot.bin;
                    for i in 0..d {
                        c[i] += c_on[ko][i] + c_bin[kb][i];
                    }
                } else {
                    for i in 0..d {
                        c[i] += c_off[ko][i];
                    }
                }
            }
            let loss = c.iter().zip(theta).map(|(a, b)| a * b).sum();
            (loss, c)
        });
        toy
    }

    /// The two-outcome space with hand-derived expectations: one slot, two
    /// operations, one magnitude bin, loss independent of the apply flag.
    /// L_t(op 0) = theta^2, L_t(op 1) = 2 theta.
    pub fn two_policy() -> Self {
        let params = AugParams::with_dims(1, 2, 1);
        ToyProblem {
            name: "two-policy closed form".to_string(),
            theta_dim: 1,
            params,
            ops: 2,
            bins: 1,
            train: Box::new(|theta: &[f64], policy: &Policy| -> LossGrad {
                let t = theta[0];
                if policy.slots[0].op == 0 {
                    (t * t, vec![2.0 * t])
                } else {
                    (2.0 * t, vec![2.0])
                }
            }),
            val: Box::new(|theta: &[f64]| -> LossGrad {
                let t = theta[0];
                (0.5 * t * t, vec![t])
            }),
        }
    }

    /// Degenerate space: one op, one bin, apply logit saturated, so a single
    /// policy carries all but a vanishing sliver of the mass.
    pub fn single_policy() -> Self {
        let mut params = AugParams::with_dims(1, 1, 1);
        params.set_prob_logit(0, 0, 40.0);
        ToyProblem {
            name: "single policy".to_string(),
            theta_dim: 2,
            params,
            ops: 1,
            bins: 1,
            train: Box::new(|theta: &[f64], _policy: &Policy| -> LossGrad {
                let l = 3.0 * theta[0] + theta[1] * theta[1];
                (l, vec![3.0, 2.0 * theta[1]])
            }),
            val: Box::new(|theta: &[f64]| -> LossGrad {
                (theta[0], vec![1.0, 0.0])
            }),
        }
    }
}
