use super::{missing_cache, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Module<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.mask = match mode {
            Mode::Train => Some(x.data().iter().map(|&v| v > T::zero()).collect()),
            Mode::Eval => None,
        };
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        let mut out = grad.clone();
        for (g, keep) in out.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        Ok(out)
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

impl<T: Scalar> Module<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!("max pool kernel {} exceeds {h}x{w}", self.kernel)));
        }
        let (oh, ow) = self.output_size(h, w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for b in 0..n {
            for ch in 0..c {
                let plane = x.plane(b, ch);
                let base = x.index([b, ch, 0, 0]);
                let dst = out.plane_mut(b, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                if plane[idx] > best || best_idx == usize::MAX {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dst[oy * ow + ox] = best;
                        argmax.push(base + best_idx);
                    }
                }
            }
        }
        self.cache = match mode {
            Mode::Train => Some((x.shape(), argmax)),
            Mode::Eval => None,
        };
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| missing_cache("max pool"))?;
        let mut out = Tensor::zeros(shape);
        let data = out.data_mut();
        for (&g, &idx) in grad.data().iter().zip(&argmax) {
            data[idx] = data[idx] + g;
        }
        Ok(out)
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Source taps for half-pixel-centred bilinear sampling along one axis.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of every plane to `out_h x out_w` (half-pixel centres,
/// corners not aligned).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
    }
    out
}

fn bilinear_resize_backward<T: Scalar>(grad: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, c, out_h, out_w] = grad.shape();
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut out = Tensor::zeros([n, c, in_h, in_w]);
    for b in 0..n {
        for ch in 0..c {
            let g = grad.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let v = g[oy * out_w + ox];
                    let top = v * (T::one() - ly);
                    let bot = v * ly;
                    dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + top * (T::one() - lx);
                    dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + top * lx;
                    dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + bot * (T::one() - lx);
                    dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + bot * lx;
                }
            }
        }
    }
    out
}

/// Bilinear upsampling by an integer factor.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub factor: usize,
    input_hw: Option<(usize, usize)>,
}

impl Upsample {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            input_hw: None,
        }
    }
}

impl<T: Scalar> Module<T> for Upsample {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (h, w) = (x.height(), x.width());
        self.input_hw = match mode {
            Mode::Train => Some((h, w)),
            Mode::Eval => None,
        };
        if self.factor == 1 {
            return Ok(x.clone());
        }
        Ok(bilinear_resize(x, h * self.factor, w * self.factor))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.input_hw.take().ok_or_else(|| missing_cache("upsample"))?;
        if self.factor == 1 {
            return Ok(grad.clone());
        }
        Ok(bilinear_resize_backward(grad, h, w))
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}

    fn clear_cache(&mut self) {
        self.input_hw = None;
    }
}
