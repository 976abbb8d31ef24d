//! Central finite-difference gradient checking.
//!
//! The reference everything differentiable is held against: central
//! differences of a scalar function, compared coordinate-by-coordinate with
//! the analytic gradient under `|a - fd| <= atol + rtol * max(|a|, |fd|)`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tolerances for a gradient comparison. `rtol` 1e-6 / `atol` 1e-9 is the
/// 64-bit contract; 1e-3 / 1e-5 the 32-bit one.
#[derive(Debug, Clone, Copy)]
pub struct FdTol {
    pub rtol: f64,
    pub atol: f64,
    pub step: f64,
}

impl FdTol {
    pub fn f64_default() -> Self {
        FdTol {
            rtol: 1e-6,
            atol: 1e-9,
            step: 1e-5,
        }
    }

    pub fn f32_default() -> Self {
        FdTol {
            rtol: 1e-3,
            atol: 1e-5,
            step: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdOutcome {
    pub checked: usize,
    pub failures: usize,
    /// max |a - fd| / (atol + rtol * max(|a|,|fd|)); <= 1 passes
    pub worst_ratio: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
}

impl FdOutcome {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for FdOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{} coords ok, worst ratio {:.3e} at coord {} (analytic {:.6e}, fd {:.6e})",
            self.checked - self.failures,
            self.checked,
            self.worst_ratio,
            self.worst_coord,
            self.worst_analytic,
            self.worst_fd
        )
    }
}

/// Checks an analytic gradient of `f` at `x` against central differences.
pub fn fd_gradient_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tol: FdTol,
) -> FdOutcome {
    assert_eq!(x.len(), analytic.len());
    let mut out = FdOutcome {
        checked: x.len(),
        failures: 0,
        worst_ratio: 0.0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
    };
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = tol.step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = tol.atol + tol.rtol * a.abs().max(fd.abs());
        let ratio = (a - fd).abs() / denom;
        if ratio > out.worst_ratio {
            out.worst_ratio = ratio;
            out.worst_coord = i;
            out.worst_analytic = a;
            out.worst_fd = fd;
        }
        if ratio > 1.0 {
            out.failures += 1;
        }
    }
    out
}

/// Checks every input of a tape-built scalar loss against central differences.
///
/// `build` receives leaves with the given shapes (filled from `inputs`) and
/// returns the scalar loss variable.
pub fn fd_check_tape(
    shapes: &[&[usize]],
    inputs: &[Vec<f64>],
    tol: FdTol,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<FdOutcome> {
    let offsets: Vec<usize> = {
        let mut acc = 0;
        let mut v = vec![0];
        for inp in inputs {
            acc += inp.len();
            v.push(acc);
        }
        v
    };
    let total = *offsets.last().unwrap();

    let run = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::<f64>::new();
        let mut vars = Vec::new();
        for (i, shape) in shapes.iter().enumerate() {
            let t = Tensor::from_f64_slice(shape, &flat[offsets[i]..offsets[i + 1]])?;
            vars.push(tape.leaf(t));
        }
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let mut grads = Vec::with_capacity(total);
        for &v in &vars {
            grads.extend(tape.grad(v).to_f64_vec());
        }
        Ok((value, grads))
    };

    let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
    let (_, analytic) = run(&flat)?;
    let mut err: Option<crate::error::Error> = None;
    let outcome = fd_gradient_check(
        |x| match run(x) {
            Ok((v, _)) => v,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        },
        &flat,
        &analytic,
        tol,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

/// Fills a buffer with small random values for gradient-check inputs.
pub fn fd_random(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, &[0xfd]);
    (0..n).map(|_| crate::rng::normal(&mut rng) * scale).collect()
}
