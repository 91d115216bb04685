//! Dense row-major f64 matrices and the packed GEMM kernel behind every
//! product in the library.
//!
//! Samples are stored one per column throughout the crate, so per-feature
//! rows are contiguous. The multiply routines never materialize transposes;
//! the packing step reads either orientation directly.

use crate::error::{Result, UcaError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(UcaError::dim(
                "Matrix::new",
                format!("{} values for {}x{}", rows * cols, rows, cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy column `j` into `out` (length = rows).
    pub fn col_into(&self, j: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            out[i] = self.data[i * self.cols + j];
        }
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.col_into(j, &mut out);
        out
    }

    /// New matrix holding the listed columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.rows, idx.len());
        for (dst, &src) in idx.iter().enumerate() {
            for i in 0..self.rows {
                m.data[i * idx.len() + dst] = self.data[i * self.cols + src];
            }
        }
        m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Columns of `self` followed by columns of `other`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols]
                .copy_from_slice(&self.data[i * self.cols..(i + 1) * self.cols]);
            out.data[i * cols + self.cols..(i + 1) * cols]
                .copy_from_slice(&other.data[i * other.cols..(i + 1) * other.cols]);
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Orientation under which a buffer is read during packing.
#[derive(Clone, Copy)]
enum Op<'a> {
    /// (buffer, leading dimension): element (i, j) = buf[i * ld + j]
    N(&'a [f64], usize),
    /// transposed view: element (i, j) = buf[j * ld + i]
    T(&'a [f64], usize),
}

impl<'a> Op<'a> {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        match *self {
            Op::N(b, ld) => b[i * ld + j],
            Op::T(b, ld) => b[j * ld + i],
        }
    }
}

/// c (m x n) = a (m x k) * b (k x n); fresh allocation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(UcaError::dim(
            "matmul",
            format!("inner {} == {}", a.cols, b.rows),
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        Op::N(&a.data, a.cols),
        Op::N(&b.data, b.cols),
        &mut c.data,
    );
    Ok(c)
}

/// a^T * b without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(UcaError::dim(
            "matmul_tn",
            format!("inner {} == {}", a.rows, b.rows),
            format!("{}x{}^T * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(
        a.cols,
        a.rows,
        b.cols,
        Op::T(&a.data, a.cols),
        Op::N(&b.data, b.cols),
        &mut c.data,
    );
    Ok(c)
}

/// a * b^T without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(UcaError::dim(
            "matmul_nt",
            format!("inner {} == {}", a.cols, b.cols),
            format!("{}x{} * {}x{}^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(
        a.rows,
        a.cols,
        b.rows,
        Op::N(&a.data, a.cols),
        Op::T(&b.data, b.cols),
        &mut c.data,
    );
    Ok(c)
}

/// c += a * b^T (gradient accumulation shape: dW += dC * X^T).
pub fn acc_mul_nt(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.cols, b.cols, "acc_mul_nt inner dim");
    assert_eq!((c.rows, c.cols), (a.rows, b.rows), "acc_mul_nt output dim");
    gemm(
        a.rows,
        a.cols,
        b.rows,
        Op::N(&a.data, a.cols),
        Op::T(&b.data, b.cols),
        &mut c.data,
    );
}

// ---------------------------------------------------------------------------
// Packed GEMM. One driver, three microkernels chosen once per process by
// runtime CPU feature detection. Every kernel accumulates C += A*B over
// zero-padded MR x NR tiles, so results do not depend on block boundaries.
// ---------------------------------------------------------------------------

const KC: usize = 512;
const MC: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kernel {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Portable,
}

fn kernel() -> Kernel {
    use std::sync::OnceLock;
    static CHOICE: OnceLock<Kernel> = OnceLock::new();
    *CHOICE.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return Kernel::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Kernel::Avx2;
            }
        }
        Kernel::Portable
    })
}

impl Kernel {
    fn tile(self) -> (usize, usize) {
        match self {
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx512 => (16, 8),
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => (8, 6),
            Kernel::Portable => (8, 4),
        }
    }
}

thread_local! {
    static PACK_BUFS: std::cell::RefCell<(Vec<f64>, Vec<f64>)> =
        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Training allocates and frees multi-megabyte activations every step; with
/// glibc's default mmap threshold each one page-faults afresh. Raising the
/// thresholds keeps those buffers on the retained heap. Idempotent, called
/// once per process from the hot entry points.
pub fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(target_os = "linux")]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}

fn gemm(m: usize, k: usize, n: usize, a: Op, b: Op, c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    PACK_BUFS.with(|bufs| {
        let mut bufs = bufs.borrow_mut();
        let (apack, bpack) = &mut *bufs;
        gemm_with(m, k, n, a, b, c, apack, bpack);
    });
}

fn gemm_with(
    m: usize,
    k: usize,
    n: usize,
    a: Op,
    b: Op,
    c: &mut [f64],
    apack: &mut Vec<f64>,
    bpack: &mut Vec<f64>,
) {
    let kr = kernel();
    let (mr, nr) = kr.tile();
    let nstrips = n.div_ceil(nr);
    // every position is overwritten before use; resize only grows
    bpack.resize(KC * nstrips * nr, 0.0);
    apack.resize((MC + mr) * KC, 0.0);

    let mut kk = 0;
    while kk < k {
        let kc = KC.min(k - kk);
        // pack B panel: NR-wide column strips, row-major inside a strip
        for s in 0..nstrips {
            let j0 = s * nr;
            let jw = nr.min(n - j0);
            let dst = &mut bpack[s * kc * nr..(s + 1) * kc * nr];
            for p in 0..kc {
                for j in 0..jw {
                    dst[p * nr + j] = b.at(kk + p, j0 + j);
                }
                for j in jw..nr {
                    dst[p * nr + j] = 0.0;
                }
            }
        }
        let mut ii = 0;
        while ii < m {
            let mc = MC.min(m - ii);
            let mstrips = mc.div_ceil(mr);
            // pack A block: MR-tall row strips, column-major inside a strip
            for s in 0..mstrips {
                let i0 = ii + s * mr;
                let ih = mr.min(m - i0);
                let dst = &mut apack[s * kc * mr..(s + 1) * kc * mr];
                for p in 0..kc {
                    for i in 0..ih {
                        dst[p * mr + i] = a.at(i0 + i, kk + p);
                    }
                    for i in ih..mr {
                        dst[p * mr + i] = 0.0;
                    }
                }
            }
            for s in 0..mstrips {
                let i0 = ii + s * mr;
                let ih = mr.min(m - i0);
                let ap = &apack[s * kc * mr..(s + 1) * kc * mr];
                for t in 0..nstrips {
                    let j0 = t * nr;
                    let jw = nr.min(n - j0);
                    let bp = &bpack[t * kc * nr..(t + 1) * kc * nr];
                    unsafe {
                        match kr {
                            #[cfg(target_arch = "x86_64")]
                            Kernel::Avx512 => kernel_avx512(kc, ap, bp, c, n, i0, j0, ih, jw),
                            #[cfg(target_arch = "x86_64")]
                            Kernel::Avx2 => kernel_avx2(kc, ap, bp, c, n, i0, j0, ih, jw),
                            Kernel::Portable => kernel_portable(kc, ap, bp, c, n, i0, j0, ih, jw),
                        }
                    }
                }
            }
            ii += mc;
        }
        kk += kc;
    }
}

/// 16x8 tile: 16 zmm accumulators, FMA-bound.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn kernel_avx512(
    kc: usize,
    ap: &[f64],
    bp: &[f64],
    c: &mut [f64],
    ldc: usize,
    i0: usize,
    j0: usize,
    ih: usize,
    jw: usize,
) {
    use std::arch::x86_64::*;
    const MR: usize = 16;
    const NR: usize = 8;
    let mut acc = [[_mm512_setzero_pd(); NR]; 2];
    let apx = ap.as_ptr();
    let bpx = bp.as_ptr();
    for p in 0..kc {
        let a0 = _mm512_loadu_pd(apx.add(p * MR));
        let a1 = _mm512_loadu_pd(apx.add(p * MR + 8));
        for j in 0..NR {
            let bv = _mm512_set1_pd(*bpx.add(p * NR + j));
            acc[0][j] = _mm512_fmadd_pd(a0, bv, acc[0][j]);
            acc[1][j] = _mm512_fmadd_pd(a1, bv, acc[1][j]);
        }
    }
    // stage the tile column-major, then stream C row-segments
    let mut tile = [[0.0f64; MR]; NR];
    for j in 0..NR {
        _mm512_storeu_pd(tile[j].as_mut_ptr(), acc[0][j]);
        _mm512_storeu_pd(tile[j].as_mut_ptr().add(8), acc[1][j]);
    }
    for i in 0..ih {
        let row = c.as_mut_ptr().add((i0 + i) * ldc + j0);
        for j in 0..jw {
            *row.add(j) += tile[j][i];
        }
    }
}

/// 8x6 tile for AVX2+FMA.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn kernel_avx2(
    kc: usize,
    ap: &[f64],
    bp: &[f64],
    c: &mut [f64],
    ldc: usize,
    i0: usize,
    j0: usize,
    ih: usize,
    jw: usize,
) {
    use std::arch::x86_64::*;
    const MR: usize = 8;
    const NR: usize = 6;
    let mut acc = [[_mm256_setzero_pd(); NR]; 2];
    let apx = ap.as_ptr();
    let bpx = bp.as_ptr();
    for p in 0..kc {
        let a0 = _mm256_loadu_pd(apx.add(p * MR));
        let a1 = _mm256_loadu_pd(apx.add(p * MR + 4));
        for j in 0..NR {
            let bv = _mm256_set1_pd(*bpx.add(p * NR + j));
            acc[0][j] = _mm256_fmadd_pd(a0, bv, acc[0][j]);
            acc[1][j] = _mm256_fmadd_pd(a1, bv, acc[1][j]);
        }
    }
    let mut tile = [[0.0f64; MR]; NR];
    for j in 0..NR {
        _mm256_storeu_pd(tile[j].as_mut_ptr(), acc[0][j]);
        _mm256_storeu_pd(tile[j].as_mut_ptr().add(4), acc[1][j]);
    }
    for i in 0..ih {
        let row = c.as_mut_ptr().add((i0 + i) * ldc + j0);
        for j in 0..jw {
            *row.add(j) += tile[j][i];
        }
    }
}

/// Scalar fallback; written so LLVM can still vectorize the inner loop.
unsafe fn kernel_portable(
    kc: usize,
    ap: &[f64],
    bp: &[f64],
    c: &mut [f64],
    ldc: usize,
    i0: usize,
    j0: usize,
    ih: usize,
    jw: usize,
) {
    const MR: usize = 8;
    const NR: usize = 4;
    let mut acc = [[0.0f64; NR]; MR];
    for p in 0..kc {
        let arow = &ap[p * MR..(p + 1) * MR];
        let brow = &bp[p * NR..(p + 1) * NR];
        for i in 0..MR {
            let av = arow[i];
            for j in 0..NR {
                acc[i][j] += av * brow[j];
            }
        }
    }
    for i in 0..ih {
        let row = c.as_mut_ptr().add((i0 + i) * ldc + j0);
        for j in 0..jw {
            *row.add(j) += acc[i][j];
        }
    }
}
