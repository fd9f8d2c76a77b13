//! Dense f64 kernels used by attention and training.
//!
//! Everything here is a pure function over borrowed inputs. The slice-level
//! helpers (`matmul_acc`, `softmax_in_place`, `rope_rotate`) are the hot paths
//! used by the transformer; the [`Tensor`]-level functions wrap them with
//! shape checking.

use std::fmt;

use thiserror::Error;

/// Default rotary frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("rotary encoding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
}

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(NumericsError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NumericsError::ShapeMismatch {
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Result<Self, NumericsError> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(NumericsError::Rank {
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().expect("nonempty shape");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    fn check_finite(&self) -> Result<(), NumericsError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(NumericsError::NonFinite { index }),
            None => Ok(()),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a[p * m..(p + 1) * m].iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (_, n) = x.dims2()?;
    x.check_finite()?;
    let mut data = x.data.clone();
    for row in data.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), data)
}

/// Reciprocal RMS of `x`: `1 / sqrt(mean(x²) + eps)`.
pub fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (mean_sq + eps).sqrt()
}

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(NumericsError::ShapeMismatch {
            left: vec![x.len()],
            right: vec![gain.len()],
        });
    }
    let r = inv_rms(x, eps);
    Ok(x.iter().zip(gain).map(|(v, g)| g * v * r).collect())
}

/// Rotation frequency of pair `i` in a head of width `d_head`.
pub fn rope_frequency(i: usize, d_head: usize, base: f64) -> f64 {
    base.powf(-2.0 * i as f64 / d_head as f64)
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` by `position · freq_i`.
///
/// `sign = -1.0` applies the inverse rotation.
pub fn rope_rotate(v: &mut [f64], position: f64, base: f64, sign: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let theta = sign * position * rope_frequency(i, d, base);
        let (s, c) = theta.sin_cos();
        let (x0, x1) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = x0 * c - x1 * s;
        v[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// Rotary position encoding of one head vector.
pub fn rope_apply(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>, NumericsError> {
    if v.len() % 2 != 0 {
        return Err(NumericsError::OddHeadDim(v.len()));
    }
    let mut out = v.to_vec();
    rope_rotate(&mut out, position as f64, base, 1.0);
    Ok(out)
}

/// Precomputed `cos`/`sin` rows for positions `0..len`.
///
/// Grows on demand; the values are bit-identical to what [`rope_rotate`]
/// computes for the same position.
#[derive(Debug, Clone)]
pub struct RopeTable {
    d_head: usize,
    base: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(d_head: usize, base: f64) -> Result<Self, NumericsError> {
        if d_head % 2 != 0 {
            return Err(NumericsError::OddHeadDim(d_head));
        }
        Ok(Self {
            d_head,
            base,
            cos: Vec::new(),
            sin: Vec::new(),
        })
    }

    pub fn positions(&self) -> usize {
        if self.d_head == 0 {
            0
        } else {
            self.cos.len() / (self.d_head / 2)
        }
    }

    pub fn ensure(&mut self, positions: usize) {
        let half = self.d_head / 2;
        for p in self.positions()..positions {
            for i in 0..half {
                let theta = p as f64 * rope_frequency(i, self.d_head, self.base);
                let (s, c) = theta.sin_cos();
                self.cos.push(c);
                self.sin.push(s);
            }
        }
    }

    /// Rotates `src` to `position` into `dst`. The table must cover `position`.
    pub fn rotate_into(&self, src: &[f64], position: usize, dst: &mut [f64]) {
        let half = self.d_head / 2;
        let cos = &self.cos[position * half..(position + 1) * half];
        let sin = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let (x0, x1) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = x0 * cos[i] - x1 * sin[i];
            dst[2 * i + 1] = x0 * sin[i] + x1 * cos[i];
        }
    }

    /// Applies the inverse rotation at `position` in place.
    pub fn unrotate(&self, v: &mut [f64], position: usize) {
        let half = self.d_head / 2;
        let cos = &self.cos[position * half..(position + 1) * half];
        let sin = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let (x0, x1) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = x0 * cos[i] + x1 * sin[i];
            v[2 * i + 1] = -x0 * sin[i] + x1 * cos[i];
        }
    }
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    cross_entropy_with_grad(logits, target).map(|(loss, _)| loss)
}

/// Cross-entropy and its gradient with respect to the logits
/// (`softmax(logits) - onehot(target)`).
pub fn cross_entropy_with_grad(
    logits: &[f64],
    target: usize,
) -> Result<(f64, Vec<f64>), NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::TargetOutOfRange {
            target,
            vocab: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - log_z).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, 3, 3);
        let i3 = Tensor::identity(3).unwrap();
        assert_eq!(matmul(&i3, &a).unwrap(), a);

        let two = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let three = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 7, 5);
        let b = random_tensor(&mut rng, 5, 4);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![4, 2]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                left: vec![2, 3],
                right: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 6, 4);
        let b = random_tensor(&mut rng, 6, 3);
        let mut at_b = vec![0.0; 12];
        matmul_at_b_acc(a.data(), b.data(), &mut at_b, 6, 4, 3);
        let mut at = vec![0.0; 24];
        for i in 0..6 {
            for j in 0..4 {
                at[j * 6 + i] = a.get(i, j);
            }
        }
        let at = Tensor::new(vec![4, 6], at).unwrap();
        for (x, y) in at_b.iter().zip(naive_matmul(&at, &b)) {
            assert!((x - y).abs() < 1e-12);
        }

        let c = random_tensor(&mut rng, 5, 4);
        let mut a_ct = vec![0.0; 30];
        matmul_a_bt_acc(a.data(), c.data(), &mut a_ct, 6, 4, 5);
        for i in 0..6 {
            for j in 0..5 {
                assert!((a_ct[i * 5 + j] - dot(a.row(i), c.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_known_rows() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 3f64.ln()]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15 && (s.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15 && (s.get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 5, 9);
        let shifted = Tensor::new(vec![5, 9], x.data().iter().map(|v| v + 1e3).collect()).unwrap();
        let (a, b) = (softmax_rows(&x).unwrap(), softmax_rows(&shifted).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new(vec![1, 3], vec![0.0, f64::NAN, 1.0]).unwrap();
        assert_eq!(softmax_rows(&x), Err(NumericsError::NonFinite { index: 1 }));
    }

    #[test]
    fn rmsnorm_cases() {
        let y = rmsnorm(&[3.0; 8], &[1.0; 8], 1e-300).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(rmsnorm(&[0.0; 4], &[2.0; 4], 1e-5).unwrap(), vec![0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
        let eps = 1e-5;
        let ms = x.iter().map(|v| v * v).sum::<f64>() / 16.0;
        let y = rmsnorm(&x, &g, eps).unwrap();
        for i in 0..16 {
            assert!((y[i] - g[i] * x[i] / (ms + eps).sqrt()).abs() < 1e-12);
        }
        assert!(rmsnorm(&x, &g[..3], eps).is_err());
    }

    #[test]
    fn rope_basics() {
        let v = vec![0.3, -1.2, 0.5, 2.0];
        assert_eq!(rope_apply(&v, 0, ROPE_BASE).unwrap(), v);
        assert_eq!(
            rope_apply(&[1.0, 2.0, 3.0], 1, ROPE_BASE),
            Err(NumericsError::OddHeadDim(3))
        );
    }

    #[test]
    fn rope_relative_position_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = rng.random_range(0..500);
            let n = rng.random_range(0..500);
            let s = rng.random_range(0..500);
            let lhs = dot(
                &rope_apply(&q, m, ROPE_BASE).unwrap(),
                &rope_apply(&k, n, ROPE_BASE).unwrap(),
            );
            let rhs = dot(
                &rope_apply(&q, m + s, ROPE_BASE).unwrap(),
                &rope_apply(&k, n + s, ROPE_BASE).unwrap(),
            );
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rope_table_matches_direct_rotation() {
        let mut table = RopeTable::new(6, ROPE_BASE).unwrap();
        table.ensure(40);
        let v = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        for p in [0, 1, 17, 39] {
            let mut out = [0.0; 6];
            table.rotate_into(&v, p, &mut out);
            assert_eq!(out.to_vec(), rope_apply(&v, p, ROPE_BASE).unwrap());
            table.unrotate(&mut out, p);
            for (a, b) in out.iter().zip(v) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 17;
        for t in [0, 5, 16] {
            assert!((cross_entropy(&vec![0.0; v], t).unwrap() - (v as f64).ln()).abs() < 1e-12);
        }
        let mut logits = vec![0.0; 10];
        logits[3] = 50.0;
        assert!(cross_entropy(&logits, 3).unwrap() < 1e-9);
        assert_eq!(
            cross_entropy(&logits, 10),
            Err(NumericsError::TargetOutOfRange {
                target: 10,
                vocab: 10
            })
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = cross_entropy_with_grad(&logits, 4).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (cross_entropy(&up, 4).unwrap() - cross_entropy(&down, 4).unwrap()) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-12);
            assert!(rel < 1e-6, "i={i} fd={fd} analytic={}", grad[i]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
                let s = softmax_rows(&Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
                for r in 0..rows {
                    let row = s.row(r);
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn rope_preserves_norm(pos in 0usize..=1_000_000, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let r = rope_apply(&v, pos, ROPE_BASE).unwrap();
                prop_assert!((dot(&v, &v).sqrt() - dot(&r, &r).sqrt()).abs() < 1e-12);
            }

            #[test]
            fn matmul_matches_naive_oracle(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_tensor(&mut rng, m, k);
                let b = random_tensor(&mut rng, k, n);
                let got = matmul(&a, &b).unwrap();
                for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
                    prop_assert!((g - e).abs() <= 1e-10 * e.abs().max(1.0));
                }
            }
        }
    }
}
