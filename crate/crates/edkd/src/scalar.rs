//! Scalar abstraction over `f32` (training) and `f64` (high-precision
//! verification). Matrix products dispatch to `matrixmultiply`; the
//! elementwise ops in the tape do their arithmetic in `f64` and round
//! back to the storage type.

/// Storage scalar for tensors and parameters.
pub trait Scalar: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` where `op` transposes when
    /// the corresponding flag is set. Matrices are row-major; a transposed
    /// input is passed in its stored (un-transposed) layout.
    ///
    /// Logical dims: `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: f64,
        c: &mut [Self],
    );
}

fn strides(_rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // stored row-major [rows x cols]; when `transposed` the logical matrix
    // is the stored one flipped, i.e. logical (i, j) = stored (j, i), so
    // the logical column stride is the stored row width.
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: f64,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if ta { strides(k, m, true) } else { strides(m, k, false) };
        let (rsb, csb) = if tb { strides(n, k, true) } else { strides(k, n, false) };
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha as f32,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta as f32,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: f64,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if ta { strides(k, m, true) } else { strides(m, k, false) };
        let (rsb, csb) = if tb { strides(n, k, true) } else { strides(k, n, false) };
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
                n as isize,
                1,
            );
        }
    }
}
