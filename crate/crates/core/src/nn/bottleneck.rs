use rand::Rng;

use super::conv::ConvConfig;
use super::{join, BatchNorm2d, Conv2d, Mode, Module, Param, Relu};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Residual bottleneck: 1x1 reduce, 3x3 (strided / dilated), 1x1 expand,
/// with an optional projection shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu1: Relu,
    relu2: Relu,
    relu_out: Relu,
}

/// Convolution layouts of one bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub conv1: ConvConfig,
    pub conv2: ConvConfig,
    pub conv3: ConvConfig,
    pub downsample: Option<ConvConfig>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(cfg: BottleneckConfig, rng: &mut impl Rng) -> Result<Self> {
        let downsample = match cfg.downsample {
            Some(d) => Some((Conv2d::new(d, rng)?, BatchNorm2d::new(d.out_channels))),
            None => None,
        };
        Ok(Self {
            conv1: Conv2d::new(cfg.conv1, rng)?,
            bn1: BatchNorm2d::new(cfg.conv1.out_channels),
            conv2: Conv2d::new(cfg.conv2, rng)?,
            bn2: BatchNorm2d::new(cfg.conv2.out_channels),
            conv3: Conv2d::new(cfg.conv3, rng)?,
            bn3: BatchNorm2d::new(cfg.conv3.out_channels),
            downsample,
            relu1: Relu::new(),
            relu2: Relu::new(),
            relu_out: Relu::new(),
        })
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = self.conv1.forward(x, mode)?;
        let out = self.bn1.forward(&out, mode)?;
        let out = Module::<T>::forward(&mut self.relu1, &out, mode)?;
        let out = self.conv2.forward(&out, mode)?;
        let out = self.bn2.forward(&out, mode)?;
        let out = Module::<T>::forward(&mut self.relu2, &out, mode)?;
        let out = self.conv3.forward(&out, mode)?;
        let mut out = self.bn3.forward(&out, mode)?;
        let identity = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        if identity.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "bottleneck residual {:?} vs {:?}",
                identity.shape(),
                out.shape()
            )));
        }
        out.add_assign(&identity);
        Module::<T>::forward(&mut self.relu_out, &out, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Module::<T>::backward(&mut self.relu_out, grad)?;
        let gm = self.bn3.backward(&g)?;
        let gm = self.conv3.backward(&gm)?;
        let gm = Module::<T>::backward(&mut self.relu2, &gm)?;
        let gm = self.bn2.backward(&gm)?;
        let gm = self.conv2.backward(&gm)?;
        let gm = Module::<T>::backward(&mut self.relu1, &gm)?;
        let gm = self.bn1.backward(&gm)?;
        let mut gx = self.conv1.backward(&gm)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let gs = bn.backward(&g)?;
                let gs = conv.backward(&gs)?;
                gx.add_assign(&gs);
            }
            None => gx.add_assign(&g),
        }
        Ok(gx)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.bn3.visit_params(&join(prefix, "bn3"), f);
        if let Some((conv, bn)) = &self.downsample {
            conv.visit_params(&join(prefix, "downsample.0"), f);
            bn.visit_params(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_params_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_params_mut(&join(prefix, "bn3"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params_mut(&join(prefix, "downsample.0"), f);
            bn.visit_params_mut(&join(prefix, "downsample.1"), f);
        }
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        self.conv3.clear_cache();
        self.bn3.clear_cache();
        if let Some((conv, bn)) = &mut self.downsample {
            conv.clear_cache();
            bn.clear_cache();
        }
        Module::<T>::clear_cache(&mut self.relu1);
        Module::<T>::clear_cache(&mut self.relu2);
        Module::<T>::clear_cache(&mut self.relu_out);
    }
}
