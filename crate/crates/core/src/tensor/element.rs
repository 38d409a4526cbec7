use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumCast, ToPrimitive};

/// Storage tag used by the weight archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
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
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Layout of one GEMM operand: a row-major `rows x cols` matrix, optionally
/// read transposed.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatView {
    /// Logical (rows, cols) after the optional transpose.
    pub fn logical(self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// Scalar type a [`Tensor`](super::Tensor) can hold.
pub trait Element: Float + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    const DTYPE: DType;

    /// `c = beta * c + op(a) * op(b)` with `op` given by each view.
    fn gemm_raw(a: &[Self], av: MatView, b: &[Self], bv: MatView, c: &mut [Self], beta: Self);

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm(alen: usize, av: MatView, blen: usize, bv: MatView, clen: usize) -> (usize, usize, usize) {
    let (m, k) = av.logical();
    let (k2, n) = bv.logical();
    assert_eq!(k, k2, "gemm inner extents");
    assert!(alen >= av.rows * av.cols && blen >= bv.rows * bv.cols && clen >= m * n);
    (m, k, n)
}

/// Below this many multiply-adds the packing done by the blocked kernel
/// costs more than it saves.
const SMALL_GEMM: usize = 4096;

/// Direct i-k-j loop for tiny products (same contract as `gemm_raw`).
#[allow(clippy::too_many_arguments)]
fn small_gemm<E: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    (rsa, csa): (isize, isize),
    b: &[E],
    (rsb, csb): (isize, isize),
    c: &mut [E],
    beta: E,
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == E::zero() {
            row.iter_mut().for_each(|v| *v = E::zero());
        } else {
            row.iter_mut().for_each(|v| *v = *v * beta);
        }
        for p in 0..k {
            let aip = a[(i as isize * rsa + p as isize * csa) as usize];
            if csb == 1 {
                let brow = &b[(p as isize * rsb) as usize..][..n];
                row.iter_mut().zip(brow).for_each(|(cv, &bv)| *cv = *cv + aip * bv);
            } else {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv = *cv + aip * b[(p as isize * rsb + j as isize * csb) as usize];
                }
            }
        }
    }
}

macro_rules! impl_element {
    ($ty:ty, $tag:expr, $gemm:path) => {
        impl Element for $ty {
            const DTYPE: DType = $tag;

            fn gemm_raw(a: &[Self], av: MatView, b: &[Self], bv: MatView, c: &mut [Self], beta: Self) {
                let (m, k, n) = check_gemm(a.len(), av, b.len(), bv, c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                let (rsa, csa) = av.strides();
                let (rsb, csb) = bv.strides();
                if m * k * n <= SMALL_GEMM {
                    small_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), c, beta);
                    return;
                }
                // SAFETY: extents were checked against the slice lengths above and
                // the strides address only elements inside each operand.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);
