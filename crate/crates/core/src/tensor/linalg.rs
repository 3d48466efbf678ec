use num_traits::Float;

use super::tape::record;
use super::{invalid, Result, Tensor, TensorError};

/// Real scalar types with a GEMM kernel.
pub trait Scalar: Float + Send + Sync + Default + std::fmt::Debug + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: $t,
                a: &[$t],
                a_trans: bool,
                b: &[$t],
                b_trans: bool,
                beta: $t,
                c: &mut [$t],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // a is stored m x k (or k x m when transposed), row-major
                let (rsa, csa) = if a_trans {
                    (1, m as isize)
                } else {
                    (k as isize, 1)
                };
                let (rsb, csb) = if b_trans {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                // SAFETY: bounds asserted above; strides describe in-bounds
                // row-major layouts of the given dimensions.
                unsafe {
                    $kernel(
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

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `op(a) * op(b)` for row-major buffers, returned as a new `m x n` buffer.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm_raw(m, k, n, T::one(), a, a_trans, b, b_trans, T::zero(), &mut c);
    c
}

impl Tensor {
    /// `[m, k] x [k, n] -> [m, n]`. Rank-2 operands only.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return invalid(
                "matmul",
                format!(
                    "rank-2 operands required, got {:?} and {:?}",
                    self.shape, other.shape
                ),
            );
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = gemm(m, k, n, self.data(), false, other.data(), false);
        let (a, b) = (self.shared_data(), other.shared_data());
        record(
            "matmul",
            &[self, other],
            vec![m, n],
            data,
            move |g, needs| {
                // dA = G B^T, dB = A^T G
                let ga = needs[0].then(|| gemm(m, n, k, g, false, &b, true));
                let gb = needs[1].then(|| gemm(k, m, n, &a, true, g, false));
                vec![ga, gb]
            },
        )
    }
}
