//! Declarative architecture specs and their expansion into concrete layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BottleneckConfig, ConvConfig};

/// How convolution group counts are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupRule {
    /// Dense convolutions everywhere.
    None,
    /// Every convolution uses `groups = gcd(in, out)`.
    Gcd,
    /// `gcd(in, out)` groups for spatial, shortcut and head convolutions;
    /// the 1x1 reduce/expand convolutions inside bottlenecks stay dense.
    GcdDensePointwise,
}

/// Where a convolution sits, as far as the group rule cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvRole {
    Spatial,
    BottleneckPointwise,
    Shortcut,
    Classifier,
}

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl GroupRule {
    pub fn groups(self, role: ConvRole, in_channels: usize, out_channels: usize) -> usize {
        match (self, role) {
            (GroupRule::None, _) => 1,
            (GroupRule::GcdDensePointwise, ConvRole::BottleneckPointwise) => 1,
            (GroupRule::Gcd | GroupRule::GcdDensePointwise, _) => gcd(in_channels, out_channels),
        }
    }
}

/// Operator of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageOp {
    /// Strided `k x k` conv + BN + ReLU followed by a 3x3/2 max pool.
    ConvBnReluMaxPool { kernel: usize },
    /// `repeat` residual bottlenecks of inner width `width`. Blocks after the
    /// first use `dilation`; the first keeps the incoming dilation.
    Bottleneck { width: usize, dilation: usize },
    /// Bilinear upsample to the stage resolution, then `repeat` x (conv + BN + ReLU).
    BilinearConvBnRelu { kernel: usize },
    /// 1x1 classifier conv to the stage channels, then bilinear upsample.
    BilinearClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Output resolution as a divisor of the network input (8 means 1/8).
    pub resolution: usize,
    pub channels: usize,
    pub op: StageOp,
    pub repeat: usize,
}

/// One half of a network (extractor or head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_channels: usize,
    /// Resolution divisor of this half's input.
    pub input_resolution: usize,
    pub stages: Vec<StageSpec>,
    pub group_rule: GroupRule,
    /// Channel multiplier already applied relative to the full-scale design.
    pub scale: f64,
}

/// A concrete layer, produced by expanding a stage.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Conv(ConvConfig),
    BatchNorm(usize),
    Relu,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Upsample(usize),
    Bottleneck(BottleneckConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub name: String,
    pub layers: Vec<(String, LayerDesc)>,
    pub out_channels: usize,
    pub out_resolution: usize,
}

fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, groups: usize, bias: bool) -> ConvConfig {
    ConvConfig {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding: dilation * (kernel / 2),
        dilation,
        groups,
        bias,
    }
}

impl ArchitectureSpec {
    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.channels)
    }

    pub fn output_resolution(&self) -> usize {
        self.stages.last().map_or(self.input_resolution, |s| s.resolution)
    }

    /// Largest resolution divisor reached anywhere in this half.
    pub fn max_stride(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.resolution)
            .chain(std::iter::once(self.input_resolution))
            .max()
            .unwrap_or(1)
    }

    /// Channel-width multiplier for desk-scale variants. Bottleneck repeats
    /// shrink by the same factor; classifier outputs are left alone.
    pub fn scaled(&self, scale: f64) -> Self {
        let ch = |c: usize| ((c as f64 * scale).round() as usize).max(1);
        let mut out = self.clone();
        if out.input_resolution != 1 {
            out.input_channels = ch(self.input_channels);
        }
        for st in &mut out.stages {
            match &mut st.op {
                StageOp::BilinearClassifier => {}
                StageOp::Bottleneck { width, .. } => {
                    *width = ch(*width);
                    st.channels = ch(st.channels);
                    st.repeat = ((st.repeat as f64 * scale).round() as usize).max(1);
                }
                _ => st.channels = ch(st.channels),
            }
        }
        out.scale = self.scale * scale;
        out.name = format!("{}@{scale}", self.name);
        out
    }

    pub fn with_group_rule(&self, rule: GroupRule) -> Self {
        Self {
            group_rule: rule,
            ..self.clone()
        }
    }

    /// Expands every stage into concrete layers, checking structural rules.
    pub fn plan(&self) -> Result<Vec<StagePlan>> {
        let mut plans = Vec::with_capacity(self.stages.len());
        let mut channels = self.input_channels;
        let mut res = self.input_resolution;
        let mut dilation = 1;
        let rule = self.group_rule;
        for st in &self.stages {
            if st.repeat == 0 || st.channels == 0 || st.resolution == 0 {
                return Err(Error::InvalidArgument(format!("stage {}: zero-sized field", st.name)));
            }
            let mut layers = Vec::new();
            match st.op {
                StageOp::ConvBnReluMaxPool { kernel } => {
                    if st.resolution != res * 4 {
                        return Err(Error::InvalidArgument(format!(
                            "stage {}: conv+maxpool reduces resolution by exactly 4",
                            st.name
                        )));
                    }
                    let g = rule.groups(ConvRole::Spatial, channels, st.channels);
                    layers.push(("conv".into(), LayerDesc::Conv(conv(channels, st.channels, kernel, 2, 1, g, false))));
                    layers.push(("bn".into(), LayerDesc::BatchNorm(st.channels)));
                    layers.push(("relu".into(), LayerDesc::Relu));
                    layers.push(("pool".into(), LayerDesc::MaxPool { kernel: 3, stride: 2, padding: 1 }));
                    channels = st.channels;
                }
                StageOp::Bottleneck { width, dilation: stage_dilation } => {
                    let stride = match st.resolution / res {
                        1 if st.resolution == res => 1,
                        2 if st.resolution == 2 * res => 2,
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "stage {}: bottleneck stages keep or halve resolution",
                                st.name
                            )))
                        }
                    };
                    for b in 0..st.repeat {
                        let (cin, s, d) = if b == 0 {
                            (channels, stride, dilation)
                        } else {
                            (st.channels, 1, stage_dilation)
                        };
                        let pw = ConvRole::BottleneckPointwise;
                        let c1 = conv(cin, width, 1, 1, 1, rule.groups(pw, cin, width), false);
                        let c2 = conv(width, width, 3, s, d, rule.groups(ConvRole::Spatial, width, width), false);
                        let c3 = conv(width, st.channels, 1, 1, 1, rule.groups(pw, width, st.channels), false);
                        let ds = (b == 0 && (s != 1 || cin != st.channels)).then(|| {
                            conv(cin, st.channels, 1, s, 1, rule.groups(ConvRole::Shortcut, cin, st.channels), false)
                        });
                        layers.push((
                            format!("{b}"),
                            LayerDesc::Bottleneck(BottleneckConfig {
                                conv1: c1,
                                conv2: c2,
                                conv3: c3,
                                downsample: ds,
                            }),
                        ));
                    }
                    dilation = stage_dilation;
                    channels = st.channels;
                }
                StageOp::BilinearConvBnRelu { kernel } => {
                    let factor = upsample_factor(res, st)?;
                    layers.push(("up".into(), LayerDesc::Upsample(factor)));
                    for i in 0..st.repeat {
                        let cin = if i == 0 { channels } else { st.channels };
                        let g = rule.groups(ConvRole::Spatial, cin, st.channels);
                        layers.push((format!("conv{i}"), LayerDesc::Conv(conv(cin, st.channels, kernel, 1, 1, g, false))));
                        layers.push((format!("bn{i}"), LayerDesc::BatchNorm(st.channels)));
                        layers.push((format!("relu{i}"), LayerDesc::Relu));
                    }
                    channels = st.channels;
                }
                StageOp::BilinearClassifier => {
                    let factor = upsample_factor(res, st)?;
                    let g = rule.groups(ConvRole::Classifier, channels, st.channels);
                    layers.push(("classifier".into(), LayerDesc::Conv(conv(channels, st.channels, 1, 1, 1, g, true))));
                    layers.push(("up".into(), LayerDesc::Upsample(factor)));
                    channels = st.channels;
                }
            }
            res = st.resolution;
            plans.push(StagePlan {
                name: st.name.clone(),
                layers,
                out_channels: channels,
                out_resolution: res,
            });
        }
        Ok(plans)
    }

    /// Checks monotone resolutions: non-increasing for an extractor,
    /// non-decreasing for a head.
    pub fn validate_monotone(&self, extractor: bool) -> Result<()> {
        let mut prev = self.input_resolution;
        for st in &self.stages {
            let ok = if extractor { st.resolution >= prev } else { st.resolution <= prev };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "{}: stage {} breaks resolution monotonicity",
                    self.name, st.name
                )));
            }
            prev = st.resolution;
        }
        Ok(())
    }
}

fn upsample_factor(res: usize, st: &StageSpec) -> Result<usize> {
    if st.resolution == 0 || res % st.resolution != 0 {
        return Err(Error::InvalidArgument(format!(
            "stage {}: cannot upsample 1/{res} to 1/{}",
            st.name, st.resolution
        )));
    }
    Ok(res / st.resolution)
}

fn stage(name: &str, resolution: usize, channels: usize, op: StageOp, repeat: usize) -> StageSpec {
    StageSpec {
        name: name.into(),
        resolution,
        channels,
        op,
        repeat,
    }
}

/// ResNet-50 backbone with output stride 8 (dilated last two stages).
pub fn resnet50_extractor(rule: GroupRule) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "resnet50-os8".into(),
        input_channels: 3,
        input_resolution: 1,
        stages: vec![
            stage("stage1", 4, 64, StageOp::ConvBnReluMaxPool { kernel: 7 }, 1),
            stage("stage2", 4, 256, StageOp::Bottleneck { width: 64, dilation: 1 }, 3),
            stage("stage3", 8, 512, StageOp::Bottleneck { width: 128, dilation: 1 }, 4),
            stage("stage4", 8, 1024, StageOp::Bottleneck { width: 256, dilation: 2 }, 6),
            stage("stage5", 8, 2048, StageOp::Bottleneck { width: 512, dilation: 4 }, 3),
        ],
        group_rule: rule,
        scale: 1.0,
    }
}

/// Decoder head: 1/8 -> 1/4 (3 convs) -> 1/2 (4 convs) -> classifier -> 1/1.
pub fn segmentation_head(in_channels: usize, width: usize, n_classes: usize, rule: GroupRule) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "bilinear-decoder".into(),
        input_channels: in_channels,
        input_resolution: 8,
        stages: vec![
            stage("stage1", 4, width, StageOp::BilinearConvBnRelu { kernel: 3 }, 3),
            stage("stage2", 2, width, StageOp::BilinearConvBnRelu { kernel: 3 }, 4),
            stage("stage3", 1, n_classes, StageOp::BilinearClassifier, 1),
        ],
        group_rule: rule,
        scale: 1.0,
    }
}

/// Few-hundred-parameter extractor for gradient checks and smoke tests:
/// 4-channel stem to 1/4, one bottleneck to 1/8.
pub fn tiny_extractor(rule: GroupRule) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "tiny".into(),
        input_channels: 3,
        input_resolution: 1,
        stages: vec![
            stage("stage1", 4, 4, StageOp::ConvBnReluMaxPool { kernel: 3 }, 1),
            stage("stage2", 8, 8, StageOp::Bottleneck { width: 2, dilation: 1 }, 1),
        ],
        group_rule: rule,
        scale: 1.0,
    }
}

/// Head matching [`tiny_extractor`].
pub fn tiny_head(in_channels: usize, n_classes: usize, rule: GroupRule) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "tiny-decoder".into(),
        input_channels: in_channels,
        input_resolution: 8,
        stages: vec![
            stage("stage1", 2, 4, StageOp::BilinearConvBnRelu { kernel: 3 }, 1),
            stage("stage2", 1, n_classes, StageOp::BilinearClassifier, 1),
        ],
        group_rule: rule,
        scale: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcd_rule_examples() {
        assert_eq!(GroupRule::Gcd.groups(ConvRole::Spatial, 4, 6), 2);
        assert_eq!(GroupRule::Gcd.groups(ConvRole::Spatial, 64, 64), 64);
        assert_eq!(GroupRule::None.groups(ConvRole::Spatial, 64, 64), 1);
        assert_eq!(GroupRule::GcdDensePointwise.groups(ConvRole::BottleneckPointwise, 256, 64), 1);
        assert_eq!(GroupRule::GcdDensePointwise.groups(ConvRole::Shortcut, 256, 512), 256);
    }

    #[test]
    fn presets_are_monotone() {
        resnet50_extractor(GroupRule::Gcd).validate_monotone(true).unwrap();
        segmentation_head(2048, 512, 2, GroupRule::Gcd).validate_monotone(false).unwrap();
    }

    #[test]
    fn every_conv_respects_the_rule() {
        for rule in [GroupRule::None, GroupRule::Gcd, GroupRule::GcdDensePointwise] {
            for spec in [resnet50_extractor(rule), segmentation_head(2048, 512, 2, rule)] {
                for st in spec.plan().unwrap() {
                    for (_, l) in st.layers {
                        let convs: Vec<ConvConfig> = match l {
                            LayerDesc::Conv(c) => vec![c],
                            LayerDesc::Bottleneck(b) => {
                                let mut v = vec![b.conv1, b.conv2, b.conv3];
                                v.extend(b.downsample);
                                v
                            }
                            _ => vec![],
                        };
                        for c in convs {
                            assert_eq!(c.in_channels % c.groups, 0);
                            assert_eq!(c.out_channels % c.groups, 0);
                            if rule == GroupRule::Gcd {
                                assert_eq!(c.groups, gcd(c.in_channels, c.out_channels));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_shrinks_channels_and_repeats() {
        let s = resnet50_extractor(GroupRule::Gcd).scaled(1.0 / 16.0);
        let ch: Vec<usize> = s.stages.iter().map(|s| s.channels).collect();
        assert_eq!(ch, vec![4, 16, 32, 64, 128]);
        assert!(s.stages.iter().all(|s| s.repeat == 1 || s.op == StageOp::ConvBnReluMaxPool { kernel: 7 }));
        let h = segmentation_head(2048, 512, 2, GroupRule::Gcd).scaled(1.0 / 16.0);
        assert_eq!(h.input_channels, 128);
        assert_eq!(h.output_channels(), 2);
    }
}
