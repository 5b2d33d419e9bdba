//! Analytic parameter and FLOP counting.
//!
//! One multiply-accumulate counts as two FLOPs. Element-wise layers are
//! charged per output element: batch norm 2, ReLU 1, residual add 1, max
//! pool `k*k`, bilinear sample 7. Conv bias adds are not counted.

use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, LayerDesc};
use crate::error::{Error, Result};
use crate::nn::ConvConfig;

const BN_FLOPS: u64 = 2;
const RELU_FLOPS: u64 = 1;
const ADD_FLOPS: u64 = 1;
const BILINEAR_FLOPS: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub partition: String,
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub output_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub param_count: u64,
    pub flops: u64,
    pub input_resolution: (usize, usize),
    pub stages: Vec<StageProfile>,
}

impl ModelProfile {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.param_count as f64 / 1e6
    }
}

struct Counter {
    c: usize,
    h: usize,
    w: usize,
    params: u64,
    flops: u64,
}

impl Counter {
    fn elems(&self) -> u64 {
        (self.c * self.h * self.w) as u64
    }

    fn conv(&mut self, cfg: &ConvConfig) {
        let (oh, ow) = cfg.output_size(self.h, self.w);
        self.params += cfg.param_count() as u64;
        self.flops += 2 * cfg.macs(oh, ow);
        self.c = cfg.out_channels;
        self.h = oh;
        self.w = ow;
    }

    fn bn(&mut self, channels: usize) {
        self.params += 2 * channels as u64;
        self.flops += BN_FLOPS * self.elems();
    }

    fn layer(&mut self, desc: &LayerDesc) {
        match desc {
            LayerDesc::Conv(cfg) => self.conv(cfg),
            LayerDesc::BatchNorm(c) => self.bn(*c),
            LayerDesc::Relu => self.flops += RELU_FLOPS * self.elems(),
            LayerDesc::MaxPool { kernel, stride, padding } => {
                self.h = (self.h + 2 * padding - kernel) / stride + 1;
                self.w = (self.w + 2 * padding - kernel) / stride + 1;
                self.flops += (kernel * kernel) as u64 * self.elems();
            }
            LayerDesc::Upsample(f) => {
                self.h *= f;
                self.w *= f;
                if *f != 1 {
                    self.flops += BILINEAR_FLOPS * self.elems();
                }
            }
            LayerDesc::Bottleneck(b) => {
                let (c0, h0, w0) = (self.c, self.h, self.w);
                for (cfg, relu) in [(&b.conv1, true), (&b.conv2, true), (&b.conv3, false)] {
                    self.conv(cfg);
                    self.bn(cfg.out_channels);
                    if relu {
                        self.flops += RELU_FLOPS * self.elems();
                    }
                }
                if let Some(ds) = &b.downsample {
                    let mut side = Counter { c: c0, h: h0, w: w0, params: 0, flops: 0 };
                    side.conv(ds);
                    side.bn(ds.out_channels);
                    self.params += side.params;
                    self.flops += side.flops;
                }
                self.flops += (ADD_FLOPS + RELU_FLOPS) * self.elems();
            }
        }
    }
}

/// Profiles the composition of the given halves at an input of `h x w`
/// without allocating any weights.
pub fn profile_specs(halves: &[(&str, &ArchitectureSpec)], (h, w): (usize, usize)) -> Result<ModelProfile> {
    let stride = halves.iter().map(|(_, s)| s.max_stride()).max().unwrap_or(1);
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Stride { height: h, width: w, stride });
    }
    let first = halves
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to profile".into()))?;
    let mut counter = Counter {
        c: first.1.input_channels,
        h,
        w,
        params: 0,
        flops: 0,
    };
    let mut stages = Vec::new();
    for (partition, spec) in halves {
        for plan in spec.plan()? {
            let (p0, f0) = (counter.params, counter.flops);
            for (_, layer) in &plan.layers {
                counter.layer(layer);
            }
            stages.push(StageProfile {
                partition: partition.to_string(),
                name: plan.name,
                params: counter.params - p0,
                flops: counter.flops - f0,
                output_shape: [counter.c, counter.h, counter.w],
            });
        }
    }
    Ok(ModelProfile {
        param_count: stages.iter().map(|s| s.params).sum(),
        flops: stages.iter().map(|s| s.flops).sum(),
        input_resolution: (h, w),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::*;

    #[test]
    fn single_mac() {
        let spec = ArchitectureSpec {
            name: "unit".into(),
            input_channels: 1,
            input_resolution: 1,
            stages: vec![StageSpec {
                name: "s".into(),
                resolution: 1,
                channels: 1,
                op: StageOp::BilinearClassifier,
                repeat: 1,
            }],
            group_rule: GroupRule::None,
            scale: 1.0,
        };
        let p = profile_specs(&[("head", &spec)], (1, 1)).unwrap();
        // classifier carries a bias: 1 weight + 1 bias, one MAC
        assert_eq!(p.flops, 2);
        assert_eq!(p.param_count, 2);
    }

    #[test]
    fn group_rules_bracket_the_reference_sizes() {
        let head = segmentation_head(2048, 512, 2, GroupRule::Gcd);
        let count = |rule| {
            let fe = resnet50_extractor(rule);
            profile_specs(&[("extractor", &fe), ("head", &head)], (256, 256)).unwrap()
        };
        let (dense, literal, student) = (count(GroupRule::None), count(GroupRule::Gcd), count(GroupRule::GcdDensePointwise));
        assert!((dense.params_millions() - 23.56).abs() < 0.05, "{}", dense.params_millions());
        assert!((student.params_millions() - 9.51).abs() < 0.05, "{}", student.params_millions());
        assert!(literal.params_millions() < 1.0);
        let ratio = student.flops as f64 / dense.flops as f64;
        assert!((ratio - 0.421).abs() < 0.002, "{ratio}");
    }

    #[test]
    fn analytic_params_match_instantiated_network() {
        use crate::model::network::build_student;
        let fe = resnet50_extractor(GroupRule::None).scaled(1.0 / 16.0);
        let head = segmentation_head(2048, 512, 2, GroupRule::Gcd).scaled(1.0 / 16.0);
        let net = build_student::<f32>(&fe, &head, 0).unwrap();
        let p = net.profile((64, 64)).unwrap();
        assert_eq!(p.param_count, net.param_count() as u64);
    }
}
