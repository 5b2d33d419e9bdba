use super::{join, missing_cache, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<NormCache<T>>,
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::trainable(vec![channels], vec![T::one(); channels]),
            beta: Param::trainable(vec![channels], vec![T::zero(); channels]),
            running_mean: Param::buffer(vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(vec![channels], vec![T::one(); channels]),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let [n, c, h, w] = x.shape();
        let eps = T::lit(EPS);
        let mut out = Tensor::zeros(x.shape());
        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let inv = T::one() / (self.running_var.value[ch] + eps).sqrt();
                    let scale = self.gamma.value[ch] * inv;
                    let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                    for b in 0..n {
                        let src = x.plane(b, ch);
                        for (o, &v) in out.plane_mut(b, ch).iter_mut().zip(src) {
                            *o = v * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let count = n * h * w;
                let m = T::lit(count as f64);
                let mut normalized = Tensor::zeros(x.shape());
                let mut inv_std = Vec::with_capacity(c);
                let momentum = T::lit(MOMENTUM);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for b in 0..n {
                        sum = x.plane(b, ch).iter().fold(sum, |a, &v| a + v);
                    }
                    let mean = sum / m;
                    let mut sq = T::zero();
                    for b in 0..n {
                        sq = x.plane(b, ch).iter().fold(sq, |a, &v| a + (v - mean) * (v - mean));
                    }
                    let var = sq / m;
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std.push(inv);
                    let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                    for b in 0..n {
                        let src = x.plane(b, ch);
                        let nrm = normalized.plane_mut(b, ch);
                        let dst = out.plane_mut(b, ch);
                        for ((z, o), &v) in nrm.iter_mut().zip(dst.iter_mut()).zip(src) {
                            *z = (v - mean) * inv;
                            *o = *z * g + be;
                        }
                    }
                    let unbiased = if count > 1 {
                        sq / T::lit((count - 1) as f64)
                    } else {
                        var
                    };
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (T::one() - momentum) * *rm + momentum * mean;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (T::one() - momentum) * *rv + momentum * unbiased;
                }
                self.cache = Some(NormCache {
                    normalized,
                    inv_std,
                });
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch norm"))?;
        let [n, c, h, w] = grad.shape();
        if cache.normalized.shape() != grad.shape() {
            return Err(Error::Shape("batch norm backward shape mismatch".into()));
        }
        let m = T::lit((n * h * w) as f64);
        let mut grad_in = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut dgamma = T::zero();
            let mut dbeta = T::zero();
            for b in 0..n {
                for (&dy, &z) in grad.plane(b, ch).iter().zip(cache.normalized.plane(b, ch)) {
                    dgamma = dgamma + dy * z;
                    dbeta = dbeta + dy;
                }
            }
            self.gamma.grad[ch] = self.gamma.grad[ch] + dgamma;
            self.beta.grad[ch] = self.beta.grad[ch] + dbeta;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / m;
            for b in 0..n {
                let dy = grad.plane(b, ch);
                let z = cache.normalized.plane(b, ch);
                for ((o, &d), &zz) in grad_in.plane_mut(b, ch).iter_mut().zip(dy).zip(z) {
                    *o = k * (m * d - dbeta - zz * dgamma);
                }
            }
        }
        Ok(grad_in)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn([3, 2, 4, 4], |_| rng.random_range(-3.0..5.0));
        let mut bn = BatchNorm2d::new(2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_mode_leaves_buffers_untouched() {
        let x = Tensor::<f64>::full([2, 3, 2, 2], 4.0);
        let mut bn = BatchNorm2d::new(3);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean.value, vec![0.0; 3]);
        let expected = 4.0 / (1.0 + EPS).sqrt();
        assert!(y.data().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn([2, 3, 3, 2], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::<f64>::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0));
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            let y = bn.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        loss(&mut bn, &x);
        let gx = bn.backward(&probe).unwrap();
        let eps = 1e-6;
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + eps;
            let lp = loss(&mut bn, &xp);
            xp.data_mut()[i] = orig - eps;
            let lm = loss(&mut bn, &xp);
            xp.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "x[{i}] fd={fd} an={}", gx.data()[i]);
        }
    }
}
