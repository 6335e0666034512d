//! Central finite-difference gradient verification.
//!
//! The checker evaluates the caller's forward function twice per input
//! coordinate (at `x ± eps`) and compares the numeric derivative against
//! the reverse-mode gradient. It is an independent oracle: only forward
//! values are consumed, never the backward path under test.

use crate::error::Result;
use crate::numeric::tensor::{no_grad, Tensor};
use crate::numeric::{backward, Float};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Coordinates checked across all inputs.
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor: `|a - b| / max(|a|, |b|, 1e-2)`.
///
/// The floor makes tiny gradients compare absolutely (tolerance
/// `tol * 1e-2`). Central differences at eps = 1e-3 carry ~1e-7 of
/// truncation noise in f64, which would otherwise swamp the ratio for
/// gradients below ~1e-3 while saying nothing about correctness; a
/// genuinely wrong backward term still moves a small gradient by its own
/// magnitude and fails loudly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Verifies reverse-mode gradients of `f` with central differences.
///
/// `inputs` must be trainable leaves that `f` closes over (the slice is
/// only used to know what to perturb and read gradients from). Gradients
/// are zeroed, one backward pass runs, and every coordinate of every
/// input is then perturbed by `±eps`.
pub fn check_gradients<T: Float>(
    mut f: impl FnMut() -> Result<Tensor<T>>,
    inputs: &[Tensor<T>],
    eps: f64,
) -> Result<GradCheckReport> {
    for input in inputs {
        assert!(input.requires_grad(), "gradcheck inputs must be trainable leaves");
        input.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|x| x.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
    };
    for (ti, input) in inputs.iter().enumerate() {
        let orig = input.to_vec();
        for i in 0..orig.len() {
            let x = orig[i].to_f64();

            let mut bumped = orig.clone();
            bumped[i] = T::from_f64(x + eps);
            input.set_data(&bumped);
            let up = no_grad(&mut f)?.item().to_f64();

            bumped[i] = T::from_f64(x - eps);
            input.set_data(&bumped);
            let down = no_grad(&mut f)?.item().to_f64();

            input.set_data(&orig);

            let fd = (up - down) / (2.0 * eps);
            let err = rel_err(fd, analytic[ti][i]);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
            }
        }
    }
    Ok(report)
}

/// Asserts that gradients match finite differences within `tol`.
pub fn assert_gradients<T: Float>(
    f: impl FnMut() -> Result<Tensor<T>>,
    inputs: &[Tensor<T>],
    eps: f64,
    tol: f64,
) {
    let report = check_gradients(f, inputs, eps).expect("gradcheck forward failed");
    assert!(
        report.max_rel_err < tol,
        "gradient check failed: max rel err {:.3e} over {} coordinates (tol {:.1e})",
        report.max_rel_err,
        report.checked,
        tol
    );
}
