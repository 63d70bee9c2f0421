use std::fmt::Debug;

use cblas_sys::{CblasNoTrans, CblasRowMajor, CblasTrans, CBLAS_TRANSPOSE};
use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
///
/// Models run in `f32`; gradient checks replay the same graphs in `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = alpha * a @ b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Row-major CBLAS arguments for a strided product.
struct GemmPlan {
    swapped: bool,
    ta: CBLAS_TRANSPOSE,
    tb: CBLAS_TRANSPOSE,
    m: i32,
    n: i32,
    k: i32,
    lda: i32,
    ldb: i32,
    ldc: i32,
}

/// Transpose flag and leading dimension of a `rows x cols` operand with
/// strides `[rs, cs]`; one of the strides must be 1.
fn operand(rows: usize, cols: usize, [rs, cs]: [isize; 2]) -> (CBLAS_TRANSPOSE, i32) {
    if cs == 1 && (rows <= 1 || rs >= cols as isize) {
        (CblasNoTrans, if rows <= 1 { cols.max(1) } else { rs as usize } as i32)
    } else {
        debug_assert_eq!(rs, 1, "gemm operand needs a unit stride");
        (CblasTrans, if cols <= 1 { rows.max(1) } else { cs as usize } as i32)
    }
}

/// `None` when the product is empty and only `beta` scaling applies.
fn plan(m: usize, k: usize, n: usize, sa: [isize; 2], sb: [isize; 2], sc: [isize; 2]) -> Option<GemmPlan> {
    if m == 0 || n == 0 || k == 0 {
        return None;
    }
    let c_row_major = sc[1] == 1 && (m <= 1 || sc[0] >= n as isize);
    if c_row_major {
        let (ta, lda) = operand(m, k, sa);
        let (tb, ldb) = operand(k, n, sb);
        let ldc = if m <= 1 { n } else { sc[0] as usize } as i32;
        Some(GemmPlan {
            swapped: false,
            ta,
            tb,
            m: m as i32,
            n: n as i32,
            k: k as i32,
            lda,
            ldb,
            ldc,
        })
    } else {
        // C^T = B^T A^T with C^T row-major
        debug_assert_eq!(sc[0], 1, "gemm output needs a unit stride");
        let (ta, lda) = operand(n, k, [sb[1], sb[0]]);
        let (tb, ldb) = operand(k, m, [sa[1], sa[0]]);
        let ldc = if n <= 1 { m } else { sc[1] as usize } as i32;
        Some(GemmPlan {
            swapped: true,
            ta,
            tb,
            m: n as i32,
            n: m as i32,
            k: k as i32,
            lda,
            ldb,
            ldc,
        })
    }
}

unsafe fn scale_only<F: Real>(m: usize, n: usize, beta: F, c: *mut F, rsc: isize, csc: isize) {
    for i in 0..m {
        for j in 0..n {
            let p = c.offset(i as isize * rsc + j as isize * csc);
            *p = if beta == F::zero() { F::zero() } else { *p * beta };
        }
    }
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        let call = plan(m, k, n, [rsa, csa], [rsb, csb], [rsc, csc]);
        match call {
            Some(p) => cblas_sys::cblas_sgemm(
                CblasRowMajor,
                p.ta,
                p.tb,
                p.m,
                p.n,
                p.k,
                alpha,
                if p.swapped { b } else { a },
                p.lda,
                if p.swapped { a } else { b },
                p.ldb,
                beta,
                c,
                p.ldc,
            ),
            None => scale_only(m, n, beta, c, rsc, csc),
        }
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        let call = plan(m, k, n, [rsa, csa], [rsb, csb], [rsc, csc]);
        match call {
            Some(p) => cblas_sys::cblas_dgemm(
                CblasRowMajor,
                p.ta,
                p.tb,
                p.m,
                p.n,
                p.k,
                alpha,
                if p.swapped { b } else { a },
                p.lda,
                if p.swapped { a } else { b },
                p.ldb,
                beta,
                c,
                p.ldc,
            ),
            None => scale_only(m, n, beta, c, rsc, csc),
        }
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors of equal trailing shape along axis 0.
    pub fn stack(parts: &[Tensor<F>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Sub-tensor `i` along axis 0.
    pub fn index0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Concatenation along the first axis of two tensors whose other extents agree.
    pub fn concat0(a: &Self, b: &Self) -> Result<Self> {
        if a.shape[1..] != b.shape[1..] {
            return Err(Error::Shape {
                op: "concat",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Self { shape, data })
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Little-endian `f32` bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out
    }
}

/// Cosine of the angle between two flattened tensors; 0 when either norm is
/// below 1e-12.
pub fn cosine_similarity<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = t(&[1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&t(&[1.0, 1.0]), &t(&[-1.0, -1.0])).unwrap();
        assert!((c + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap(), 0.0);
        assert!(cosine_similarity(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let s = Tensor::<f32>::scalar(2.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.rank(), 0);
    }
}
