//! Scalar abstraction: the numeric element type of all tensors.
//!
//! Everything numerical in this crate is generic over [`Scalar`], which is
//! implemented for `f32` (fast training) and `f64` (finite-difference
//! gradient verification). The only operation that cannot come straight from
//! `num_traits` is the dense matrix multiply, which dispatches to
//! `matrixmultiply`'s `sgemm`/`dgemm`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Dtype tag stored in checkpoints so a file cannot be loaded at the wrong
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar: Float + NumAssign + Sum + Send + Sync + Debug + Display + 'static {
    const DTYPE: Dtype;

    /// Strided GEMM kernel: `c = alpha * a @ b + beta * c` with explicit
    /// row/column strides per operand (`a` is `m x k`, `b` is `k x n`,
    /// `c` is `m x n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// Row-major GEMM: `c = alpha * a @ b + beta * c` where `a` is `m x k`,
    /// `b` is `k x n` and `c` is `m x n`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(
            m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
        );
    }

    /// `c = alpha * a @ b^T + beta * c`; `a` is `m x k` row-major, `b` is
    /// `n x k` row-major (used transposed), `c` is `m x n`.
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(
            m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1,
        );
    }

    /// `c = alpha * a^T @ b + beta * c`; `a` is `k x m` row-major (used
    /// transposed), `b` is `k x n` row-major, `c` is `m x n`.
    fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(
            m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1,
        );
    }

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("f64 conversion")
    }

    fn to_f64_(self) -> f64 {
        num_traits::cast(self).expect("f64 conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
