use super::{gemm, MatRef, Scalar, Tensor4};
use crate::error::{Error, Result};

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    b.expect_dims(a.dims(), "add operand")?;
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect();
    Tensor4::new(a.dims(), data)
}

pub fn scale<T: Scalar>(a: &Tensor4<T>, s: T) -> Tensor4<T> {
    a.map(|v| v * s)
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `grad` through where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad.expect_dims(x.dims(), "relu grad")?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::new(x.dims(), data)
}

/// Spatial mean per channel: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor4 { dims: [n, c, 1, 1], data }
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor4<T>, input_dims: [usize; 4]) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input_dims;
    grad.expect_dims([n, c, 1, 1], "global pool grad")?;
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in grad.data() {
        data.extend(std::iter::repeat(g * inv).take(plane));
    }
    Tensor4::new(input_dims, data)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_w: Tensor4<T>,
    pub grad_bias: Vec<T>,
}

fn linear_dims<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>) -> Result<(usize, usize, usize)> {
    let [out, inp, kh, kw] = w.dims();
    if kh != 1 || kw != 1 {
        return Err(Error::Shape(format!("linear weight must be (out, in, 1, 1), got {:?}", w.dims())));
    }
    if x.sample_len() != inp {
        return Err(Error::Shape(format!("linear expects {inp} features per sample, got {}", x.sample_len())));
    }
    Ok((x.dims()[0], inp, out))
}

/// `y = x W^T + b` with each sample flattened; output is `(n, out, 1, 1)`.
pub fn linear_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let (n, inp, out) = linear_dims(x, w)?;
    if bias.len() != out {
        return Err(Error::Shape(format!("linear bias has {} entries, expected {out}", bias.len())));
    }
    let mut y = vec![T::zero(); n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias);
    }
    gemm(
        MatRef::row_major(x.data(), n, inp),
        MatRef::row_major(w.data(), out, inp).t(),
        T::one(),
        &mut y,
    );
    let y = Tensor4::new([n, out, 1, 1], y)?;
    y.ensure_finite("linear_forward output")?;
    Ok(y)
}

pub fn linear_backward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, grad: &Tensor4<T>) -> Result<LinearGrads<T>> {
    let (n, inp, out) = linear_dims(x, w)?;
    grad.expect_dims([n, out, 1, 1], "linear grad")?;
    let g = MatRef::row_major(grad.data(), n, out);
    let mut gx = vec![T::zero(); n * inp];
    gemm(g, MatRef::row_major(w.data(), out, inp), T::zero(), &mut gx);
    let mut gw = vec![T::zero(); out * inp];
    gemm(g.t(), MatRef::row_major(x.data(), n, inp), T::zero(), &mut gw);
    let mut gb = vec![T::zero(); out];
    for row in grad.data().chunks(out) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(LinearGrads {
        grad_x: Tensor4::new(x.dims(), gx)?,
        grad_w: Tensor4::new(w.dims(), gw)?,
        grad_bias: gb,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_crossentropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(T, Tensor4<T>)> {
    let n = logits.dims()[0];
    let classes = logits.sample_len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cross-entropy of an empty batch".into()));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Vec::with_capacity(n * classes);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::InvalidArgument(format!("label {label} outside {classes} classes")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += z.ln() - (row[label] - max);
        for (j, e) in exps.into_iter().enumerate() {
            let p = e / z;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_crossentropy loss".into()));
    }
    Ok((loss, Tensor4::new(logits.dims(), grad)?))
}

/// Per-channel batch normalization with running statistics.
///
/// Running statistics follow `r <- (1 - momentum) r + momentum * batch_stat`,
/// with the unbiased batch variance feeding `running_var`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

/// Saved state from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(0.1),
            eps: T::of(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.dims()[1] != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.dims()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        self.check(x)?;
        let [n, c, h, w] = x.dims();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("batchnorm training needs batch size >= 2, got {n}")));
        }
        let plane = h * w;
        let m = n * plane;
        let mf = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += x.data()[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for b in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += x.data()[(b * c + ch) * plane..][..plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / mf + self.eps).sqrt()).collect();

        let mut x_hat = Tensor4::zeros(x.dims());
        let mut y = Tensor4::zeros(x.dims());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    x_hat.data_mut()[i] = xh;
                    y.data_mut()[i] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
        }
        let keep = T::one() - self.momentum;
        let unbias = mf / T::of((m - 1).max(1) as f64);
        for ch in 0..c {
            self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + self.momentum * var[ch] / mf * unbias;
        }
        y.ensure_finite("batchnorm_forward output")?;
        Ok((y, BatchNormCache { x_hat, inv_std }))
    }

    /// Affine map with the running statistics: `gamma (x - mean) / sqrt(var + eps) + beta`.
    pub fn forward_inference(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut y = x.clone();
        self.apply_inference(&mut y)?;
        Ok(y)
    }

    /// [`BatchNorm::forward_inference`] in place.
    pub fn apply_inference(&self, x: &mut Tensor4<T>) -> Result<()> {
        self.check(x)?;
        let [_, c, h, w] = x.dims();
        let scale: Vec<T> = (0..c).map(|ch| self.gamma[ch] / (self.running_var[ch] + self.eps).sqrt()).collect();
        for (i, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let (s, mu, be) = (scale[ch], self.running_mean[ch], self.beta[ch]);
            plane.iter_mut().for_each(|v| *v = s * (*v - mu) + be);
        }
        x.ensure_finite("batchnorm_inference output")
    }

    /// Returns `(grad_x, grad_gamma, grad_beta)` for a training-mode forward.
    pub fn backward(&self, cache: &BatchNormCache<T>, grad: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        grad.expect_dims(cache.x_hat.dims(), "batchnorm grad")?;
        let [n, c, h, w] = grad.dims();
        let plane = h * w;
        let mf = T::of((n * plane) as f64);
        let mut g_gamma = vec![T::zero(); c];
        let mut g_beta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let g = grad.data()[i];
                    g_beta[ch] += g;
                    g_gamma[ch] += g * cache.x_hat.data()[i];
                }
            }
        }
        let mut gx = Tensor4::zeros(grad.dims());
        for b in 0..n {
            for ch in 0..c {
                let k = self.gamma[ch] * cache.inv_std[ch] / mf;
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    gx.data_mut()[i] =
                        k * (mf * grad.data()[i] - g_beta[ch] - cache.x_hat.data()[i] * g_gamma[ch]);
                }
            }
        }
        gx.ensure_finite("batchnorm_backward grad_x")?;
        Ok((gx, g_gamma, g_beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor4::<f32>::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor4::filled([1, 1, 1, 3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_and_scale() {
        let a = Tensor4::<f32>::filled([1, 2, 1, 1], 1.5);
        let b = Tensor4::<f32>::filled([1, 2, 1, 1], 0.5);
        assert_eq!(add(&a, &b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(scale(&a, 2.0).data(), &[3.0, 3.0]);
        assert!(add(&a, &Tensor4::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor4::<f64>::filled([4, 10, 1, 1], 0.3);
        let (loss, grad) = softmax_crossentropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
        assert!((grad.at(0, 0, 0, 0) - (0.1 - 1.0) / 4.0).abs() < 1e-12);
        assert!(softmax_crossentropy(&logits, &[0, 1, 2, 10]).is_err());
    }

    #[test]
    fn crossentropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor4::<f64>::uniform([3, 5, 1, 1], -2.0, 2.0, &mut rng);
        let labels = [1, 4, 0];
        let (_, grad) = softmax_crossentropy(&logits, &labels).unwrap();
        let fd = finite_diff_grad(|t| softmax_crossentropy(t, &labels).unwrap().0, &logits, 1e-3).unwrap();
        assert!(max_relative_error(&grad, &fd, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn pooling_round_trip() {
        let x = Tensor4::<f64>::from_fn([2, 3, 2, 2], |[n, c, h, w]| (n + c + h * w) as f64);
        let p = global_avg_pool(&x);
        assert_eq!(p.dims(), [2, 3, 1, 1]);
        assert_eq!(p.at(1, 2, 0, 0), (3.0 + 3.0 + 3.0 + 4.0) / 4.0);
        let g = global_avg_pool_backward(&Tensor4::filled([2, 3, 1, 1], 4.0), x.dims()).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::<f64>::uniform([3, 2, 2, 1], -1.0, 1.0, &mut rng);
        let w = Tensor4::<f64>::uniform([5, 4, 1, 1], -1.0, 1.0, &mut rng);
        let b = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let target = Tensor4::<f64>::uniform([3, 5, 1, 1], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor4<f64>, w: &Tensor4<f64>| {
            let y = linear_forward(x, w, &b).unwrap();
            y.data().iter().zip(target.data()).map(|(p, q)| p * q).sum::<f64>()
        };
        let g = linear_backward(&x, &w, &target).unwrap();
        let fdx = finite_diff_grad(|t| loss(t, &w), &x, 1e-3).unwrap();
        let fdw = finite_diff_grad(|t| loss(&x, t), &w, 1e-3).unwrap();
        assert!(max_relative_error(&g.grad_x, &fdx, 1e-6).unwrap() < 1e-4);
        assert!(max_relative_error(&g.grad_w, &fdw, 1e-6).unwrap() < 1e-4);
        let colsum: Vec<f64> = (0..5).map(|j| (0..3).map(|i| target.at(i, j, 0, 0)).sum()).collect();
        for (a, e) in g.grad_bias.iter().zip(colsum) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_inference_is_the_affine_formula() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![1.5, -0.5];
        bn.beta = vec![0.25, 2.0];
        bn.running_mean = vec![0.7, -1.0];
        bn.running_var = vec![2.0, 0.5];
        let x = Tensor4::<f64>::from_fn([2, 2, 2, 2], |[_, c, _, _]| if c == 0 { 3.0 } else { -4.0 });
        let y = bn.forward_inference(&x).unwrap();
        let direct = |v: f64, c: usize| bn.gamma[c] * (v - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.beta[c];
        assert!((y.at(1, 0, 1, 0) - direct(3.0, 0)).abs() < 1e-12);
        assert!((y.at(0, 1, 0, 1) - direct(-4.0, 1)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::<f64>::uniform([4, 3, 2, 2], 1.0, 3.0, &mut rng);
        let mut bn = BatchNorm::<f64>::new(3);
        let (y, _) = bn.forward_train(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| y.at(n, c, i / 2, i % 2)).collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!(bn.running_mean[c] > 0.1 && bn.running_mean[c] < 0.3);
        }
        assert!(bn.forward_train(&Tensor4::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::<f64>::uniform([3, 2, 2, 2], -1.0, 1.0, &mut rng);
        let weights = Tensor4::<f64>::uniform(x.dims(), -1.0, 1.0, &mut rng);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.1, -0.4];
        let objective = |bn: &BatchNorm<f64>, x: &Tensor4<f64>| {
            let (y, _) = bn.clone().forward_train(x).unwrap();
            y.data().iter().zip(weights.data()).map(|(p, q)| p * q).sum::<f64>()
        };
        let (_, cache) = bn.clone().forward_train(&x).unwrap();
        let (gx, gg, gb) = bn.backward(&cache, &weights).unwrap();
        let fd = finite_diff_grad(|t| objective(&bn, t), &x, 1e-3).unwrap();
        assert!(max_relative_error(&gx, &fd, 1e-6).unwrap() < 1e-4);
        let gamma = Tensor4::new([1, 2, 1, 1], bn.gamma.clone()).unwrap();
        let fdg = finite_diff_grad(
            |t| {
                let mut b = bn.clone();
                b.gamma = t.data().to_vec();
                objective(&b, &x)
            },
            &gamma,
            1e-3,
        )
        .unwrap();
        assert!(max_relative_error(&Tensor4::new([1, 2, 1, 1], gg).unwrap(), &fdg, 1e-6).unwrap() < 1e-4);
        let wsum: Vec<f64> = (0..2)
            .map(|c| (0..3).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| weights.at(n, c, i / 2, i % 2)).sum())
            .collect();
        assert!((gb[0] - wsum[0]).abs() < 1e-12 && (gb[1] - wsum[1]).abs() < 1e-12);
    }
}
