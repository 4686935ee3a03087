//! Forward kernels. Every reduction runs in a fixed left-to-right order so
//! results are reproducible bit-for-bit on one platform.

use super::tensor::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `C = A·B` for `A: m×k`, `B: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    // i-t-j order keeps each C[i][j] accumulating over t = 0..k in sequence.
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `C = A·Bᵀ` for `A: m×k`, `B: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `C = Aᵀ·B` for `A: k×m`, `B: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for t in 0..k {
        let brow = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let av = ad[t * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Adds `bias[j]` to every row of a matrix.
pub fn add_row_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = a.rows_cols();
    if bias.len() != n {
        return Err(mismatch("add_row_bias", a, bias));
    }
    let b = bias.data();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// `x·Wᵀ + b` with `W` stored as `out×in`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let y = matmul_nt(x, weight)?;
    match bias {
        Some(b) => add_row_bias(&y, b),
        None => Ok(y),
    }
}

/// Valid 1-D cross-correlation. `signal: C_in×L`, `kernels: C_out×(C_in/groups)×K`.
pub fn conv1d<T: Scalar>(
    signal: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    conv1d_ext(signal, kernels, None, stride, groups, 0, 0)
}

/// Geometry of a grouped, optionally zero-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub c_per_group: usize,
    pub out_per_group: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub padded_len: usize,
    pub out_len: usize,
}

pub(crate) fn conv_geom<T: Scalar>(
    signal: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    groups: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<ConvGeom> {
    let (c_in, len) = signal.dims2("conv1d")?;
    let [c_out, c_per_group, k] = match kernels.shape() {
        &[a, b, c] => [a, b, c],
        _ => return Err(mismatch("conv1d", signal, kernels)),
    };
    if stride == 0 || groups == 0 {
        return Err(TensorError::Invalid("stride and groups must be positive".into()));
    }
    if c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_per_group {
        return Err(mismatch("conv1d", signal, kernels));
    }
    let padded_len = len + pad_left + pad_right;
    if padded_len < k {
        return Err(TensorError::InputTooShort { len: padded_len, kernel: k });
    }
    Ok(ConvGeom {
        c_in,
        len,
        c_out,
        c_per_group,
        out_per_group: c_out / groups,
        k,
        stride,
        pad_left,
        padded_len,
        out_len: (padded_len - k) / stride + 1,
    })
}

pub(crate) fn pad_rows<T: Scalar>(x: &[T], rows: usize, len: usize, left: usize, right: usize) -> Vec<T> {
    if left == 0 && right == 0 {
        return x.to_vec();
    }
    let plen = len + left + right;
    let mut out = vec![T::zero(); rows * plen];
    for r in 0..rows {
        out[r * plen + left..r * plen + left + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
}

/// Grouped convolution with optional bias and zero padding on either side.
pub fn conv1d_ext<T: Scalar>(
    signal: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(signal, kernels, stride, groups, pad_left, pad_right)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(mismatch("conv1d bias", kernels, b));
        }
    }
    let xp = pad_rows(signal.data(), g.c_in, g.len, pad_left, pad_right);
    let w = kernels.data();
    let mut out = Vec::with_capacity(g.c_out * g.out_len);
    for o in 0..g.c_out {
        let group = o / g.out_per_group;
        let b0 = bias.map_or(T::zero(), |b| b.data()[o]);
        for t in 0..g.out_len {
            let start = t * g.stride;
            let mut acc = T::zero();
            for ci in 0..g.c_per_group {
                let c = group * g.c_per_group + ci;
                let xs = &xp[c * g.padded_len + start..c * g.padded_len + start + g.k];
                let ws = &w[(o * g.c_per_group + ci) * g.k..(o * g.c_per_group + ci + 1) * g.k];
                for (&xv, &wv) in xs.iter().zip(ws) {
                    acc += xv * wv;
                }
            }
            out.push(acc + b0);
        }
    }
    Ok(Tensor::from_parts(vec![g.c_out, g.out_len], out))
}

/// Row-wise normalization over the last dimension with per-column affine.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, d) = x.rows_cols();
    if gain.len() != d || bias.len() != d {
        return Err(mismatch("layer_norm", x, gain));
    }
    let (g, b) = (gain.data(), bias.data());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let (mean, inv) = moments(row, eps);
        for j in 0..d {
            out.push(g[j] * (row[j] - mean) * inv + b[j]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Normalizes each row of `C×L` over time with a per-row affine; this is
/// group normalization with one group per channel.
pub fn channel_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, l) = x.dims2("channel_norm")?;
    if gain.len() != c || bias.len() != c {
        return Err(mismatch("channel_norm", x, gain));
    }
    let mut out = Vec::with_capacity(x.len());
    for (r, row) in x.data().chunks(l).enumerate() {
        let (mean, inv) = moments(row, eps);
        let (gr, br) = (gain.data()[r], bias.data()[r]);
        out.extend(row.iter().map(|&v| gr * (v - mean) * inv + br));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Mean and `1/sqrt(var + eps)` with population variance.
pub(crate) fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mut sum = T::zero();
    for &v in row {
        sum += v;
    }
    let mean = sum / n;
    let mut var = T::zero();
    for &v in row {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Softmax over the last dimension, max-subtracted.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (_, d) = x.rows_cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        softmax_into(row, &mut out);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut total = T::zero();
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}

const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + T::of(GELU_C) * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        match err {
            TensorError::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_text(&a).contains("[2, 3]"));
    }

    fn err_text(a: &Tensor<f64>) -> String {
        matmul(a, a).unwrap_err().to_string()
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b = t(&[4, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, -0.8, 0.9, 1.0, 1.1, 1.2]);
        let direct = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), direct);
        let c = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let direct = matmul(&transpose(&a).unwrap(), &c).unwrap();
        assert_eq!(matmul_tn(&a, &c).unwrap(), direct);
    }

    #[test]
    fn conv1d_examples() {
        let s = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2], &[1.0, 0.0]);
        assert_eq!(conv1d(&s, &k, 2, 1).unwrap().data(), &[1.0, 3.0]);

        let s = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let k = t(&[1, 1, 3], &[0.5, -1.0, 2.0]);
        assert_eq!(conv1d(&s, &k, 7, 1).unwrap().shape(), &[1, 1]);

        let s = t(&[1, 2], &[1.0, 2.0]);
        assert!(matches!(
            conv1d(&s, &k, 1, 1),
            Err(TensorError::InputTooShort { len: 2, kernel: 3 })
        ));
    }

    #[test]
    fn conv1d_one_hot_kernel_reproduces_slice() {
        let s = t(&[2, 5], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        // picks channel 1, tap offset 2
        let k = t(&[1, 2, 3], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv1d(&s, &k, 1, 1).unwrap().data(), &[8.0, 9.0, 10.0]);
    }

    #[test]
    fn grouped_conv_keeps_groups_apart() {
        let s = t(&[2, 3], &[1.0, 1.0, 1.0, 10.0, 10.0, 10.0]);
        let k = t(&[2, 1, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = conv1d(&s, &k, 1, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0, 20.0, 20.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[2], &[1.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let c = t(&[1, 2], &[4.0, 4.0]);
        assert_eq!(layer_norm(&c, &one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = t(&[1, 2], &[1.0, 3.0]);
        let y = layer_norm(&x, &one, &zero, 1e-15).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
        let b = t(&[2], &[0.7, -2.0]);
        let y = layer_norm(&x, &zero, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.7, -2.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1f64.ln(), 3f64.ln()]));
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let y = softmax(&t(&[2], &[1000.0, 0.0]));
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // tanh form at 1.0 is 0.8411920; exact erf form is 0.8413447
        assert!((gelu_scalar(1.0f64) - 0.841_192).abs() < 1e-6);
        assert!((gelu_scalar(-3.0f64) + 0.003_637_4).abs() < 1e-6);
    }
}
