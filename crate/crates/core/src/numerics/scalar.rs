//! Floating point scalar abstraction. Everything numeric in the crate is
//! generic over [`Scalar`]; `f32` is the training default and `f64` backs the
//! gradient-check suites.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

/// A strided mutable matrix view into a flat buffer.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }

    /// Row-major contiguous view with `cols` columns.
    pub fn rm(data: &'a [T], cols: usize) -> Self {
        Self::new(data, 0, cols, 1)
    }

    /// Transposed view of a row-major contiguous matrix with `cols` columns.
    pub fn rm_t(data: &'a [T], cols: usize) -> Self {
        Self::new(data, 0, 1, cols)
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }

    pub fn rm(data: &'a mut [T], cols: usize) -> Self {
        Self::new(data, 0, cols, 1)
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint tensor indices.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// Finite-difference step suited to this precision.
    const FD_STEP: f64;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a * b + beta * c` where `a` is m×k and `b` is k×n.
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: MatMut<'_, Self>,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

/// Bounds-checked strided matrix multiply-accumulate.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    c.check(m, n);
    T::gemm_raw(m, k, n, alpha, a, b, beta, c);
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $fd:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();
            const FD_STEP: f64 = $fd;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: MatMut<'_, Self>,
            ) {
                // SAFETY: `gemm` verified that the last element addressed by
                // each strided view lies inside its backing slice, and the
                // output slice is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr().add(a.offset),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr().add(b.offset),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.data.as_mut_ptr().add(c.offset),
                        c.rs as isize,
                        c.cs as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, "f32", 1e-3, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", 1e-5, matrixmultiply::dgemm);

/// Run-level precision switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}
