use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type code stored in tensor files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "real-32",
            DType::F64 => "real-64",
        }
    }
}

/// Floating point element usable in tensors, kernels and the tape.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// Like [`Real::gemm`] but `b` is given transposed (`n×k`, row-major).
    fn gemm_bt(m: usize, k: usize, n: usize, a: &[Self], bt: &[Self], c: &mut [Self]);
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_bt(m: usize, k: usize, n: usize, a: &[Self], bt: &[Self], c: &mut [Self]) {
        assert!(a.len() >= m * k && bt.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, bt.as_ptr(), 1, k as isize, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_bt(m: usize, k: usize, n: usize, a: &[Self], bt: &[Self], c: &mut [Self]) {
        assert!(a.len() >= m * k && bt.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, bt.as_ptr(), 1, k as isize, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}
