//! Numeric kernels with hand-derived backward passes.
//!
//! Forward functions return whatever the backward pass needs as an explicit
//! cache; there is no autodiff graph. All kernels are deterministic and
//! single-threaded.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use rand_chacha::ChaCha8Rng;

use crate::rng::uniform;
use crate::tensor::{dot, real, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpError {
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    IdOutOfRange { position: usize, id: u32, vocab: usize },
}

impl fmt::Display for OpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            OpError::IdOutOfRange { position, id, vocab } => {
                write!(f, "token id {id} at position {position} outside vocabulary of size {vocab}")
            }
        }
    }
}

impl core::error::Error for OpError {}

/// `a [p,q] · b [q,r] -> [p,r]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(OpError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[p, r]);
    for i in 0..p {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate().take(q) {
            let b_row = b.row(k);
            for j in 0..r {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// `a [p,q] · bᵀ` for `b [r,q] -> [p,r]`. Row-against-row dot products.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(OpError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (p, r) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(&[p, r]);
    for i in 0..p {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..r {
            out_row[j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a [p,q]`, `b [p,r] -> [q,r]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(OpError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[q, r]);
    for i in 0..p {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (k, &aik) in a_row.iter().enumerate().take(q) {
            let out_row = out.row_mut(k);
            for j in 0..r {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Gradients of `y = a·b`: `da = dy·bᵀ`, `db = aᵀ·dy`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), OpError> {
    let da = matmul_nt(dy, b)?;
    let db = matmul_tn(a, dy)?;
    Ok((da, db))
}

/// Element-wise sum; gradient passes through unchanged to both inputs.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::ShapeMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Adds `bias [d]` to every row of `x [s,d]`, in place.
pub fn add_bias<T: Real>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<(), OpError> {
    if bias.len() != x.cols() {
        return Err(OpError::ShapeMismatch {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(())
}

/// Bias gradient: column sums of `dy`, accumulated into `dbias`.
pub fn add_bias_backward<T: Real>(dy: &Tensor<T>, dbias: &mut Tensor<T>) {
    debug_assert_eq!(dy.cols(), dbias.len());
    for i in 0..dy.rows() {
        for (g, &d) in dbias.data_mut().iter_mut().zip(dy.row(i)) {
            *g = *g + d;
        }
    }
}

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

pub struct LayerNormCache<T> {
    /// `(x - μ) / √(σ² + ε)` per row.
    pub normalized: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>), OpError> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(OpError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let s = x.rows();
    let inv_d = real::<T>(1.0 / d as f64);
    let eps = real::<T>(LAYER_NORM_EPS);
    let mut y = Tensor::zeros(&[s, d]);
    let mut normalized = Tensor::zeros(&[s, d]);
    let mut rstd = Vec::with_capacity(s);
    for i in 0..s {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let n_row = normalized.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            n_row[j] = (v - mean) * r;
        }
        let y_row = y.row_mut(i);
        for j in 0..d {
            y_row[j] = normalized.row(i)[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { normalized, rstd }))
}

/// Backward of [`layer_norm`]: returns `dx`; accumulates `dgamma`/`dbeta`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Tensor<T> {
    let s = dy.rows();
    let d = dy.cols();
    let inv_d = real::<T>(1.0 / d as f64);
    let mut dx = Tensor::zeros(&[s, d]);
    for i in 0..s {
        let dy_row = dy.row(i);
        let n_row = cache.normalized.row(i);
        for j in 0..d {
            dgamma.data_mut()[j] = dgamma.data_mut()[j] + dy_row[j] * n_row[j];
            dbeta.data_mut()[j] = dbeta.data_mut()[j] + dy_row[j];
        }
        // dx = rstd * (dŷ - mean(dŷ) - x̂ * mean(dŷ ⊙ x̂)), dŷ = dy ⊙ γ
        let mut mean_dyh = T::zero();
        let mut mean_dyh_n = T::zero();
        for j in 0..d {
            let dyh = dy_row[j] * gamma.data()[j];
            mean_dyh = mean_dyh + dyh;
            mean_dyh_n = mean_dyh_n + dyh * n_row[j];
        }
        mean_dyh = mean_dyh * inv_d;
        mean_dyh_n = mean_dyh_n * inv_d;
        let r = cache.rstd[i];
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            let dyh = dy_row[j] * gamma.data()[j];
            dx_row[j] = r * (dyh - mean_dyh - n_row[j] * mean_dyh_n);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = real::<T>(GELU_C);
    let a = real::<T>(GELU_A);
    let half = real::<T>(0.5);
    let one = T::one();
    let mut y = x.clone();
    for v in y.data_mut() {
        let u = c * (*v + a * *v * *v * *v);
        *v = half * *v * (one + u.tanh());
    }
    y
}

/// Backward of [`gelu`] given the original input.
pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(x.shape(), dy.shape());
    let c = real::<T>(GELU_C);
    let a = real::<T>(GELU_A);
    let three_a = real::<T>(3.0 * GELU_A);
    let half = real::<T>(0.5);
    let one = T::one();
    let mut dx = Tensor::zeros(x.shape());
    for ((g, &v), &d) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (one + three_a * v * v);
        let deriv = half * (one + t) + half * v * (one - t * t) * du;
        *g = d * deriv;
    }
    dx
}

/// Row-wise softmax over the last dimension of a 2-D tensor, with the
/// usual max subtraction. Rows sum to one.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    let cols = y.cols();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut().take(cols) {
            *v = *v * inv;
        }
    }
    y
}

/// Backward of softmax given its output `y`: `dx = y ⊙ (dy - ⟨dy, y⟩)`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(y.shape(), dy.shape());
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let y_row = y.row(i);
        let dy_row = dy.row(i);
        let s = dot(y_row, dy_row);
        let dx_row = dx.row_mut(i);
        for j in 0..y_row.len() {
            dx_row[j] = y_row[j] * (dy_row[j] - s);
        }
    }
    dx
}

/// Gathers rows of `table [V,d]` for each id.
pub fn embedding_lookup<T: Real>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, OpError> {
    let v = table.rows();
    let d = table.cols();
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= v {
            return Err(OpError::IdOutOfRange { position: i, id, vocab: v });
        }
        out.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    Ok(out)
}

/// Scatter-adds `dy` rows into the table gradient.
pub fn embedding_backward<T: Real>(dy: &Tensor<T>, ids: &[u32], dtable: &mut Tensor<T>) {
    debug_assert_eq!(dy.rows(), ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let g_row = dtable.row_mut(id as usize);
        for (g, &d) in g_row.iter_mut().zip(dy.row(i)) {
            *g = *g + d;
        }
    }
}

/// Keep-mask produced by [`dropout`]. Rate 0 produces no mask at all and
/// consumes no randomness.
pub struct DropoutMask {
    keep: Option<Vec<bool>>,
    scale: f64,
}

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask { keep: None, scale: 1.0 }
    }
}

/// Inverted dropout: kept values are scaled by `1/(1-rate)` at train time
/// so evaluation needs no rescaling. `rate = 0` is the identity.
pub fn dropout<T: Real>(x: &mut Tensor<T>, rate: f64, rng: &mut ChaCha8Rng) -> DropoutMask {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return DropoutMask::identity();
    }
    let scale = 1.0 / (1.0 - rate);
    let scale_t = real::<T>(scale);
    let keep: Vec<bool> = (0..x.len()).map(|_| uniform::<f64>(rng) >= rate).collect();
    for (v, &k) in x.data_mut().iter_mut().zip(keep.iter()) {
        *v = if k { *v * scale_t } else { T::zero() };
    }
    DropoutMask { keep: Some(keep), scale }
}

pub fn dropout_backward<T: Real>(mask: &DropoutMask, dy: &mut Tensor<T>) {
    if let Some(keep) = &mask.keep {
        let scale_t = real::<T>(mask.scale);
        for (v, &k) in dy.data_mut().iter_mut().zip(keep.iter()) {
            *v = if k { *v * scale_t } else { T::zero() };
        }
    }
}

/// Log-sum-exp of a slice, max-shifted.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let mut max = xs[0];
    for &v in xs.iter().skip(1) {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in xs {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// Cross entropy of one logit row against a target index. Returns the loss
/// and the logit gradient (`softmax - onehot`), scaled by `scale`.
pub fn cross_entropy<T: Real>(logits: &[T], target: usize, scale: T) -> (T, Vec<T>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad = Vec::with_capacity(logits.len());
    for &v in logits {
        grad.push((v - lse).exp() * scale);
    }
    grad[target] = grad[target] - scale;
    (loss, grad)
}

/// Formats a shape for error messages.
pub fn shape_string(shape: &[usize]) -> String {
    let mut out = String::new();
    for (i, s) in shape.iter().enumerate() {
        if i > 0 {
            out.push('x');
        }
        out.push_str(&alloc::format!("{s}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use alloc::vec;

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]);
        let y = softmax_rows(&x);
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 4], vec![1.0f32, -2.0, 0.5, 3.0, 10.0, 10.0, 10.0, 10.0]);
        let y = softmax_rows(&x);
        for i in 0..2 {
            let s: f32 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let x = Tensor::from_vec(&[1, 4], vec![3.5f64; 4]);
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]);
        let beta = Tensor::from_vec(&[4], vec![0.0; 4]);
        let (y, _) = layer_norm(&x, &gamma, &beta).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-5, "constant row must normalize to zero, got {v}");
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0f64, 2.0, 3.0, 4.0]);
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]);
        let beta = Tensor::from_vec(&[4], vec![0.0; 4]);
        let (y, _) = layer_norm(&x, &gamma, &beta).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_rate_zero_is_identity_without_randomness() {
        let mut rng = rng_from_seed(1);
        let before = rng.clone();
        let mut x = Tensor::from_vec(&[1, 4], vec![1.0f32, 2.0, 3.0, 4.0]);
        let orig = x.clone();
        let mask = dropout(&mut x, 0.0, &mut rng);
        assert_eq!(x, orig);
        assert!(mask.keep.is_none());
        // No randomness consumed.
        assert_eq!(rng, before);
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let mut x1 = Tensor::from_vec(&[1, 100], vec![1.0f32; 100]);
        let mut x2 = x1.clone();
        let mut r1 = rng_from_seed(42);
        let mut r2 = rng_from_seed(42);
        dropout(&mut x1, 0.3, &mut r1);
        dropout(&mut x2, 0.3, &mut r2);
        assert_eq!(x1, x2);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        match err {
            OpError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let table = Tensor::<f32>::zeros(&[10, 4]);
        let err = embedding_lookup(&table, &[3, 12]).unwrap_err();
        assert_eq!(err, OpError::IdOutOfRange { position: 1, id: 12, vocab: 10 });
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_v() {
        let logits = vec![0.0f64; 7];
        let (loss, _) = cross_entropy(&logits, 3, 1.0);
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
    }
}
