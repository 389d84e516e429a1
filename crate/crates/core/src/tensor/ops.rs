//! Forward kernels for the primitive set. Every kernel is pure.
//!
//! Broadcasting is limited to leading-dim batching: in `add`/`mul` the second
//! operand, after dropping leading unit extents, must equal a suffix of the
//! first operand's dims.

use super::NdTensor;
use crate::error::{shape_err, Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn matmul(a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err(format!("matmul expects matrices, got {:?} and {:?}", a.dims(), b.dims()));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return shape_err(format!("matmul inner dims differ: lhs {m}x{k} has {k} columns, rhs {k2}x{n} has {k2} rows"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &bd[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    NdTensor::new(vec![m, n], out)
}

/// Element count of the broadcast operand, validating the suffix rule.
pub(crate) fn broadcast_block(a: &NdTensor, b: &NdTensor) -> Result<usize> {
    let bd: Vec<usize> = {
        let first = b.dims().iter().position(|&d| d != 1).unwrap_or(b.rank() - 1);
        b.dims()[first..].to_vec()
    };
    let ad = a.dims();
    if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != bd[..] {
        if b.len() == 1 {
            return Ok(1);
        }
        return shape_err(format!("cannot batch {:?} over {:?}: rhs must match trailing dims", b.dims(), a.dims()));
    }
    Ok(b.len())
}

fn broadcast_zip(a: &NdTensor, b: &NdTensor, f: impl Fn(f32, f32) -> f32) -> Result<NdTensor> {
    let blk = broadcast_block(a, b)?;
    let bd = b.data();
    let mut data = Vec::with_capacity(a.len());
    for chunk in a.data().chunks(blk) {
        data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    }
    NdTensor::new(a.dims().to_vec(), data)
}

pub fn add(a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
    broadcast_zip(a, b, |x, y| x + y)
}

pub fn mul(a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
    broadcast_zip(a, b, |x, y| x * y)
}

pub fn scale(a: &NdTensor, s: f32) -> NdTensor {
    a.map(|x| x * s)
}

/// Sums `g` (shaped like the broadcast result) down to `b_dims`.
pub(crate) fn reduce_to(g: &NdTensor, b_dims: &[usize]) -> Result<NdTensor> {
    let blk: usize = b_dims.iter().product();
    let mut acc = vec![0f64; blk];
    for chunk in g.data().chunks(blk) {
        for (s, &x) in acc.iter_mut().zip(chunk) {
            *s += x as f64;
        }
    }
    NdTensor::new(b_dims.to_vec(), acc.into_iter().map(|x| x as f32).collect())
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub fn concat(parts: &[&NdTensor], axis: usize) -> Result<NdTensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return shape_err(format!("concat axis {axis} out of range for rank {}", first.rank()));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.dims().iter().zip(first.dims()).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return shape_err(format!("concat along axis {axis}: {:?} incompatible with {:?}", p.dims(), first.dims()));
        }
    }
    let (outer, _, inner) = split_axis(first.dims(), axis);
    let total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.dims()[axis] * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    let mut dims = first.dims().to_vec();
    dims[axis] = total;
    NdTensor::new(dims, data)
}

pub fn slice(a: &NdTensor, axis: usize, start: usize, len: usize) -> Result<NdTensor> {
    if axis >= a.rank() || len == 0 || start + len > a.dims()[axis] {
        return shape_err(format!("slice [{start}, {}) on axis {axis} out of range for {:?}", start + len, a.dims()));
    }
    let (outer, n, inner) = split_axis(a.dims(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        data.extend_from_slice(&a.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut dims = a.dims().to_vec();
    dims[axis] = len;
    NdTensor::new(dims, data)
}

pub fn pad(a: &NdTensor, axis: usize, before: usize, after: usize) -> Result<NdTensor> {
    if axis >= a.rank() {
        return shape_err(format!("pad axis {axis} out of range for {:?}", a.dims()));
    }
    let (outer, n, inner) = split_axis(a.dims(), axis);
    let total = before + n + after;
    let mut data = vec![0f32; outer * total * inner];
    for o in 0..outer {
        let dst = o * total * inner + before * inner;
        data[dst..dst + n * inner].copy_from_slice(&a.data()[o * n * inner..(o + 1) * n * inner]);
    }
    let mut dims = a.dims().to_vec();
    dims[axis] = total;
    NdTensor::new(dims, data)
}

pub fn transpose(a: &NdTensor) -> Result<NdTensor> {
    if a.rank() != 2 {
        return shape_err(format!("transpose expects a matrix, got {:?}", a.dims()));
    }
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let mut data = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data()[i * n + j];
        }
    }
    NdTensor::new(vec![n, m], data)
}

pub fn softmax_rows(x: &NdTensor) -> Result<NdTensor> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let n = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    NdTensor::new(x.dims().to_vec(), out)
}

/// Per-row mean and inverse standard deviation (biased variance).
pub(crate) fn row_moments(x: &NdTensor, eps: f32) -> Vec<(f64, f64)> {
    let d = x.cols();
    x.data()
        .chunks(d)
        .map(|row| {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            (mean, 1.0 / (var + eps as f64).sqrt())
        })
        .collect()
}

pub fn layer_norm(x: &NdTensor, gamma: &NdTensor, beta: &NdTensor, eps: f32) -> Result<NdTensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return shape_err(format!(
            "layer_norm over last dim {d} but gamma has {} and beta has {}",
            gamma.len(),
            beta.len()
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for (row, (mean, inv)) in x.data().chunks(d).zip(row_moments(x, eps)) {
        for (j, &v) in row.iter().enumerate() {
            let xhat = ((v as f64 - mean) * inv) as f32;
            out.push(xhat * gamma.data()[j] + beta.data()[j]);
        }
    }
    NdTensor::new(x.dims().to_vec(), out)
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &NdTensor) -> NdTensor {
    x.map(gelu_scalar)
}

pub fn sum(x: &NdTensor) -> NdTensor {
    NdTensor::scalar(x.sum_all() as f32)
}

pub fn mean(x: &NdTensor) -> NdTensor {
    NdTensor::scalar((x.sum_all() / x.len() as f64) as f32)
}

pub fn mse(a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
    if a.dims() != b.dims() {
        return shape_err(format!("mse shape mismatch {:?} vs {:?}", a.dims(), b.dims()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(NdTensor::scalar((s / a.len() as f64) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> NdTensor {
        NdTensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        let i2 = NdTensor::identity(2).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let b = m(&[&[5., 6.], &[7., 8.]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[19., 22.], &[43., 50.]]));
        let z = matmul(&NdTensor::zeros(&[2, 3]).unwrap(), &NdTensor::ones(&[3, 2]).unwrap()).unwrap();
        assert_eq!(z, NdTensor::zeros(&[2, 2]).unwrap());
    }

    #[test]
    fn matmul_mismatch_names_both_dims() {
        let err =
            matmul(&NdTensor::zeros(&[2, 3]).unwrap(), &NdTensor::zeros(&[4, 2]).unwrap()).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&m(&[&[7., 7., 7.]])).unwrap();
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&m(&[&[0., std::f32::consts::LN_2]])).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-6);
        let x = m(&[&[0.3, -1.2, 4.0]]);
        let shifted = x.map(|v| v + 123.0);
        assert!(softmax_rows(&x).unwrap().max_abs_diff(&softmax_rows(&shifted).unwrap()).unwrap() < 1e-6);
        assert!(matches!(softmax_rows(&m(&[&[f32::NAN, 0.]])), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let one = NdTensor::ones(&[2]).unwrap();
        let zero = NdTensor::zeros(&[2]).unwrap();
        let c = layer_norm(&m(&[&[5., 5.]]), &one, &zero, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let y = layer_norm(&m(&[&[1., 3.]]), &one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);
        let b = NdTensor::from_vec(vec![0.5, -2.0]).unwrap();
        let y = layer_norm(&m(&[&[1., 3.], &[-4., 9.]]), &zero, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0, 0.5, -2.0]);
        assert!(layer_norm(&m(&[&[1., 3.]]), &NdTensor::ones(&[3]).unwrap(), &zero, 1e-5).is_err());
    }

    #[test]
    fn batching_rules() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        let b = NdTensor::from_vec(vec![10., 20.]).unwrap();
        assert_eq!(add(&a, &b).unwrap(), m(&[&[11., 22.], &[13., 24.]]));
        let b1 = b.reshape(&[1, 2]).unwrap();
        assert_eq!(mul(&a, &b1).unwrap(), m(&[&[10., 40.], &[30., 80.]]));
        assert!(add(&a, &NdTensor::from_vec(vec![1., 2., 3.]).unwrap()).is_err());
    }

    #[test]
    fn concat_slice_pad_are_consistent() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        let b = m(&[&[5.], &[6.]]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c, m(&[&[1., 2., 5.], &[3., 4., 6.]]));
        assert_eq!(slice(&c, 1, 2, 1).unwrap(), b);
        assert_eq!(slice(&c, 0, 1, 1).unwrap(), m(&[&[3., 4., 6.]]));
        let p = pad(&b, 1, 2, 0).unwrap();
        assert_eq!(p, m(&[&[0., 0., 5.], &[0., 0., 6.]]));
        assert_eq!(transpose(&a).unwrap(), m(&[&[1., 3.], &[2., 4.]]));
    }
}
