use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{join, missing_cache, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Static description of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvConfig {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        (oh, ow)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulate count for one output map of size `oh x ow`.
    pub fn macs(&self, oh: usize, ow: usize) -> u64 {
        (oh * ow * self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel)
            as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide in={} and out={}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(
                "kernel, stride and dilation must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub config: ConvConfig,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialization scaled by the per-group fan-in.
    pub fn new(config: ConvConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let fan_in = (config.in_channels / config.groups) * config.kernel * config.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let value = (0..config.weight_count())
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Ok(Self::from_parts(config, value, config.bias.then(|| vec![T::zero(); config.out_channels])))
    }

    pub fn from_parts(config: ConvConfig, weight: Vec<T>, bias: Option<Vec<T>>) -> Self {
        Self {
            config,
            weight: Param::trainable(config.weight_shape().to_vec(), weight),
            bias: bias.map(|b| Param::trainable(vec![config.out_channels], b)),
            cached_input: None,
        }
    }

    fn is_pointwise(&self) -> bool {
        let c = &self.config;
        c.kernel == 1 && c.stride == 1 && c.padding == 0
    }

    /// Unfolds group `g` of one sample into a `(cin_g * k * k) x (oh * ow)` matrix.
    fn im2col(&self, sample: &[T], h: usize, w: usize, g: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let c = &self.config;
        let cin_g = c.in_channels / c.groups;
        let k = c.kernel;
        let hw_out = oh * ow;
        for ci in 0..cin_g {
            let plane = &sample[(g * cin_g + ci) * h * w..(g * cin_g + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky * c.dilation) as isize - c.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * c.stride + kx * c.dilation) as isize - c.padding as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, g: usize, oh: usize, ow: usize, grad_sample: &mut [T]) {
        let c = &self.config;
        let cin_g = c.in_channels / c.groups;
        let k = c.kernel;
        let hw_out = oh * ow;
        for ci in 0..cin_g {
            let plane = &mut grad_sample[(g * cin_g + ci) * h * w..(g * cin_g + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky * c.dilation) as isize - c.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * c.stride + kx * c.dilation) as isize - c.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }
}

fn view<T>(rows: usize, cols: usize, data: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn view_mut<T>(rows: usize, cols: usize, data: &mut [T]) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let c = self.config;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = c.output_size(h, w);
        let mut out = Tensor::zeros([n, c.out_channels, oh, ow]);
        let cin_g = c.in_channels / c.groups;
        let cout_g = c.out_channels / c.groups;
        let krows = cin_g * c.kernel * c.kernel;
        let hw_out = oh * ow;
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); krows * hw_out] };
        for b in 0..n {
            let sample = x.sample(b);
            let out_sample = out.sample_mut(b);
            for g in 0..c.groups {
                let wg = &self.weight.value[g * cout_g * krows..(g + 1) * cout_g * krows];
                let rhs = if pointwise {
                    &sample[g * cin_g * hw_out..(g + 1) * cin_g * hw_out]
                } else {
                    self.im2col(sample, h, w, g, oh, ow, &mut cols);
                    &cols[..]
                };
                let dst = &mut out_sample[g * cout_g * hw_out..(g + 1) * cout_g * hw_out];
                general_mat_mul(
                    T::one(),
                    &view(cout_g, krows, wg),
                    &view(krows, hw_out, rhs),
                    T::zero(),
                    &mut view_mut(cout_g, hw_out, dst),
                );
            }
            if let Some(bias) = &self.bias {
                for (co, &bv) in bias.value.iter().enumerate() {
                    out_sample[co * hw_out..(co + 1) * hw_out]
                        .iter_mut()
                        .for_each(|v| *v = *v + bv);
                }
            }
        }
        self.cached_input = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cached_input.take().ok_or_else(|| missing_cache("conv"))?;
        let c = self.config;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = c.output_size(h, w);
        if grad.shape() != [n, c.out_channels, oh, ow] {
            return Err(Error::Shape(format!(
                "conv backward: grad {:?} vs output {:?}",
                grad.shape(),
                [n, c.out_channels, oh, ow]
            )));
        }
        let cin_g = c.in_channels / c.groups;
        let cout_g = c.out_channels / c.groups;
        let krows = cin_g * c.kernel * c.kernel;
        let hw_out = oh * ow;
        let pointwise = self.is_pointwise();
        let mut grad_in = Tensor::zeros(x.shape());
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); krows * hw_out] };
        let mut dcols = vec![T::zero(); krows * hw_out];
        for b in 0..n {
            let sample = x.sample(b);
            let gsample = grad.sample(b);
            for g in 0..c.groups {
                let gy = &gsample[g * cout_g * hw_out..(g + 1) * cout_g * hw_out];
                let rhs = if pointwise {
                    &sample[g * cin_g * hw_out..(g + 1) * cin_g * hw_out]
                } else {
                    self.im2col(sample, h, w, g, oh, ow, &mut cols);
                    &cols[..]
                };
                let wgrad = &mut self.weight.grad[g * cout_g * krows..(g + 1) * cout_g * krows];
                general_mat_mul(
                    T::one(),
                    &view(cout_g, hw_out, gy),
                    &view(krows, hw_out, rhs).t(),
                    T::one(),
                    &mut view_mut(cout_g, krows, wgrad),
                );
                let wg = &self.weight.value[g * cout_g * krows..(g + 1) * cout_g * krows];
                if pointwise {
                    let dst = &mut grad_in.sample_mut(b)[g * cin_g * hw_out..(g + 1) * cin_g * hw_out];
                    general_mat_mul(
                        T::one(),
                        &view(cout_g, krows, wg).t(),
                        &view(cout_g, hw_out, gy),
                        T::one(),
                        &mut view_mut(krows, hw_out, dst),
                    );
                } else {
                    general_mat_mul(
                        T::one(),
                        &view(cout_g, krows, wg).t(),
                        &view(cout_g, hw_out, gy),
                        T::zero(),
                        &mut view_mut(krows, hw_out, &mut dcols),
                    );
                    self.col2im(&dcols, h, w, g, oh, ow, grad_in.sample_mut(b));
                }
            }
            if let Some(bias) = &mut self.bias {
                for co in 0..c.out_channels {
                    let s = gsample[co * hw_out..(co + 1) * hw_out]
                        .iter()
                        .fold(T::zero(), |a, &v| a + v);
                    bias.grad[co] = bias.grad[co] + s;
                }
            }
        }
        Ok(grad_in)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution, independent of im2col/gemm.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let c = conv.config;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = c.output_size(h, w);
        let cin_g = c.in_channels / c.groups;
        let cout_g = c.out_channels / c.groups;
        Tensor::from_fn([n, c.out_channels, oh, ow], |[b, co, oy, ox]| {
            let g = co / cout_g;
            let mut acc = conv.bias.as_ref().map_or(0.0, |bb| bb.value[co]);
            for ci in 0..cin_g {
                for ky in 0..c.kernel {
                    for kx in 0..c.kernel {
                        let iy = (oy * c.stride + ky * c.dilation) as isize - c.padding as isize;
                        let ix = (ox * c.stride + kx * c.dilation) as isize - c.padding as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let wv = conv.weight.value[((co * cin_g + ci) * c.kernel + ky) * c.kernel + kx];
                        acc += wv * x.at([b, g * cin_g + ci, iy as usize, ix as usize]);
                    }
                }
            }
            acc
        })
    }

    fn random_input(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_loop_across_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let configs = [
            (4, 6, 3, 1, 1, 1, 2, true),
            (4, 4, 3, 2, 1, 1, 4, false),
            (3, 8, 7, 2, 3, 1, 1, false),
            (6, 6, 3, 1, 2, 2, 3, false),
            (8, 4, 1, 1, 0, 1, 4, true),
            (4, 8, 1, 2, 0, 1, 1, false),
        ];
        for (cin, cout, k, s, p, d, g, bias) in configs {
            let cfg = ConvConfig {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                padding: p,
                dilation: d,
                groups: g,
                bias,
            };
            let mut conv = Conv2d::<f64>::new(cfg, &mut rng).unwrap();
            if let Some(b) = &mut conv.bias {
                b.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
            let x = random_input([2, cin, 9, 8], &mut rng);
            let fast = conv.forward(&x, Mode::Eval).unwrap();
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{cfg:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ConvConfig {
            in_channels: 4,
            out_channels: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
            groups: 2,
            bias: true,
        };
        let mut conv = Conv2d::<f64>::new(cfg, &mut rng).unwrap();
        let x = random_input([2, 4, 5, 6], &mut rng);
        let probe = {
            let out = conv.forward(&x, Mode::Eval).unwrap();
            random_input(out.shape(), &mut rng)
        };
        let loss = |conv: &mut Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            let out = conv.forward(x, Mode::Eval).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        conv.forward(&x, Mode::Train).unwrap();
        let gx = conv.backward(&probe).unwrap();
        let eps = 1e-6;
        for i in (0..conv.weight.len()).step_by(5) {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + eps;
            let lp = loss(&mut conv, &x);
            conv.weight.value[i] = orig - eps;
            let lm = loss(&mut conv, &x);
            conv.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-6, "w[{i}]");
        }
        let mut xp = x.clone();
        for i in (0..x.len()).step_by(7) {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + eps;
            let lp = loss(&mut conv, &xp);
            xp.data_mut()[i] = orig - eps;
            let lm = loss(&mut conv, &xp);
            xp.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "x[{i}]");
        }
        let bias_grad = conv.bias.as_ref().unwrap().grad.clone();
        for (co, &g) in bias_grad.iter().enumerate() {
            let expected: f64 = (0..2).map(|b| probe.plane(b, co).iter().sum::<f64>()).sum();
            assert!((g - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_param_count() {
        let cfg = ConvConfig {
            in_channels: 4,
            out_channels: 6,
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
            groups: 2,
            bias: true,
        };
        assert_eq!(cfg.weight_count(), 108);
        assert_eq!(cfg.param_count(), 114);
    }
}
