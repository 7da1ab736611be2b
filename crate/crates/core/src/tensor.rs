//! Dense row-major tensors and the forward/backward kernels every model is built from.
//!
//! All storage is `f64`. Kernels are pure functions; the autodiff tape in
//! [`crate::tape`] composes them and routes gradients.

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type Real = f64;

/// Probability clamp used by binary cross-entropy.
pub const BCE_CLAMP: Real = 1e-7;

/// Default layer-norm epsilon.
pub const LN_EPS: Real = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
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
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<Real>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: Real, rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gaussian() * std).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: Real) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> Real {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    /// Bit-level equality (distinguishes `-0.0` from `0.0`, treats equal NaN bits as equal).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `op(a) · op(b)` where `op` optionally transposes its argument without copying.
pub fn matmul_t(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = as_matrix(a);
    let (br, bc) = as_matrix(b);
    let (m, k1) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_into(a, trans_a, b, trans_b, m, k1, n, 0.0, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[allow(clippy::too_many_arguments)]
fn gemm_into(
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: Real,
    out: &mut [Real],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (ar, ac) = as_matrix(a);
    let (br, bc) = as_matrix(b);
    debug_assert_eq!(ar * ac, a.data.len());
    debug_assert_eq!(br * bc, b.data.len());
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: strides describe the exact row-major extents of `a`, `b` and `out`,
    // all of which outlive the call; `out` has m*n elements and does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Gradients of `C = op(A)·op(B)` given `dC`; each side is computed only when requested.
pub fn matmul_backward(
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    dc: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let da = if need_a {
        // d op(A) = dC · op(B)ᵀ
        let d_op_a = matmul_t(dc, false, b, !trans_b)?;
        Some(if trans_a { d_op_a.transpose() } else { d_op_a })
    } else {
        None
    };
    let db = if need_b {
        // d op(B) = op(A)ᵀ · dC
        let d_op_b = matmul_t(a, !trans_a, dc, false)?;
        Some(if trans_b { d_op_b.transpose() } else { d_op_b })
    } else {
        None
    };
    Ok((da, db))
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` are treated as
/// masked; a row that is entirely masked yields all zeros.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    if cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(cols) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        if max == Real::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward of [`softmax_rows`] from its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let cols = y.cols();
    let mut dx = Tensor::zeros(&y.shape);
    if cols == 0 {
        return dx;
    }
    for ((yr, dyr), dxr) in y
        .data
        .chunks(cols)
        .zip(dy.data.chunks(cols))
        .zip(dx.data.chunks_mut(cols))
    {
        let dot: Real = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    dx
}

/// Normalised activations and per-row inverse standard deviations kept for backward.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<Real>,
}

/// Layer normalisation over the last axis followed by `gain ⊙ · + bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: Real,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (nrow, orow) in normalized
        .data
        .chunks_mut(d)
        .zip(out.data.chunks_mut(d))
    {
        let mean = nrow.iter().sum::<Real>() / d as Real;
        let var = nrow.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (j, (nv, ov)) in nrow.iter_mut().zip(orow.iter_mut()).enumerate() {
            *nv = (*nv - mean) * is;
            *ov = *nv * gain.data[j] + bias.data[j];
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = dy.cols();
    let mut dx = Tensor::zeros(&dy.shape);
    let mut dgain = Tensor::zeros(&gain.shape);
    let mut dbias = Tensor::zeros(&gain.shape);
    for (r, ((xh, g), dxr)) in cache
        .normalized
        .data
        .chunks(d)
        .zip(dy.data.chunks(d))
        .zip(dx.data.chunks_mut(d))
        .enumerate()
    {
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            dgain.data[j] += g[j] * xh[j];
            dbias.data[j] += g[j];
            let dxh = g[j] * gain.data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let is = cache.inv_std[r];
        let n = d as Real;
        for j in 0..d {
            let dxh = g[j] * gain.data[j];
            dxr[j] = is / n * (n * dxh - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    (dx, dgain, dbias)
}

/// Inverted dropout. Returns the output and the per-entry multiplier applied.
pub fn dropout(
    x: &Tensor,
    rate: Real,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor, Option<Vec<Real>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<Real> = (0..x.len())
        .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
        .collect();
    let mut out = x.clone();
    for (v, m) in out.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, Some(mask)))
}

fn check_label(y: Real) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::Label(y))
    }
}

/// Binary cross-entropy in nats with the prediction clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(prob: Real, label: Real) -> Result<Real> {
    check_label(label)?;
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// d bce / d prob. Zero where the clamp is active.
pub fn bce_grad(prob: Real, label: Real) -> Result<Real> {
    check_label(label)?;
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&prob) {
        return Ok(0.0);
    }
    Ok(-label / prob + (1.0 - label) / (1.0 - prob))
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(i, t) * b.at(t, j);
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&Tensor::scalar(2.0), &Tensor::scalar(7.0)).unwrap();
        assert_eq!(c.data(), &[14.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(11);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let via_t = matmul_t(&a.transpose(), true, &b.transpose(), true).unwrap();
        assert!(via_t.max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 3.0_f64.ln()],
            vec![1000.0, 0.0],
        ])
        .unwrap();
        let y = softmax_rows(&x);
        assert!((y.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((y.at(1, 0) - 0.25).abs() < 1e-12);
        assert!((y.at(1, 1) - 0.75).abs() < 1e-12);
        assert!(y.all_finite());
        assert!((y.at(2, 0) - 1.0).abs() < 1e-12 && y.at(2, 1) < 1e-300);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let x = Tensor::from_rows(&[vec![Real::NEG_INFINITY, Real::NEG_INFINITY]]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::filled(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let (y, _) = layer_norm(&x, &one, &zero, LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), LN_EPS)
            .unwrap();
        // var = 1, so the output is ±1/sqrt(1 + eps)
        let expected = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.at(0, 0) - expected).abs() < 1e-12);
        assert!((y.at(0, 1) + expected).abs() < 1e-12);

        let bias = Tensor::vector(vec![0.3, -0.7]);
        let (y, _) = layer_norm(&x, &Tensor::zeros(&[2]), &bias, LN_EPS).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = RngStream::new(3);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        assert!(dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap().0.bit_eq(&x));
        assert!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0.bit_eq(&x));
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, &mut rng).is_err());

        let ones = Tensor::filled(&[100_000], 1.0);
        let (y, _) = dropout(&ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.sum() / y.len() as Real;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(1.0, 1.0).unwrap() < 1e-6);
        assert!((bce_loss(0.5, 1.0).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
        assert!((bce_loss(0.25, 0.0).unwrap() + 0.75_f64.ln()).abs() < 1e-12);
        assert!(matches!(bce_loss(0.5, 0.5), Err(Error::Label(_))));
        let (p, h) = (0.3, 1e-6);
        let numeric = (bce_loss(p + h, 1.0).unwrap() - bce_loss(p - h, 1.0).unwrap()) / (2.0 * h);
        assert!((bce_grad(p, 1.0).unwrap() - numeric).abs() < 1e-6);
    }
}
