//! Dense-tensor numeric core with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, explicitly shaped, and carry an optional
//! backprop record (the producing operation plus parent handles).
//! Calling [`backward`] on a scalar loss accumulates gradients into every
//! trainable ancestor; repeated calls without [`Tensor::zero_grad`]
//! accumulate. There is no implicit broadcasting beyond scalar-tensor
//! ops; the explicit broadcast ops name their own semantics.
//!
//! The element type is generic so the identical graph code can run at
//! `f64` for finite-difference verification; the artifact itself stores
//! and trains in `f32`, accumulating reductions in 64-bit.

mod autograd;
mod checkpoint;
pub mod gradcheck;
mod ops;
mod param;
mod tensor;


pub use autograd::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamInfo, CHECKPOINT_MAGIC};
pub use ops::cross_entropy;
pub use param::{clip_gradients, ClipMode, Parameter};
pub use tensor::{no_grad, Tensor};

/// Element type of a tensor: `f32` for the artifact, `f64` for
/// verification. Reductions accumulate through `f64` regardless.
pub trait Float: Copy + PartialOrd + std::fmt::Debug + std::fmt::Display + 'static {
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_nan(self) -> bool;

    fn clamp(self, lo: Self, hi: Self) -> Self;

    /// `c = alpha * a @ b + beta * c` over row-major buffers.
    ///
    /// `trans_a` means the `a` buffer is stored `[k, m]` and used as its
    /// transpose; likewise `trans_b` for a `[n, k]` buffer.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_nan(self) -> bool {
                self.is_nan()
            }
            fn clamp(self, lo: Self, hi: Self) -> Self {
                self.clamp(lo, hi)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm lhs buffer size");
                assert_eq!(b.len(), k * n, "gemm rhs buffer size");
                assert_eq!(c.len(), m * n, "gemm out buffer size");
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                if m == 0 || k == 0 || n == 0 {
                    if beta == 0.0 {
                        c.fill(0.0);
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);
