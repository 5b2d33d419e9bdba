//! Networks split into an extractor half and a head half.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, GroupRule, LayerDesc};
use super::profile::{profile_specs, ModelProfile};
use super::weights::{ModelWeights, PartitionLabel, WeightEntry};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Bottleneck, Conv2d, Layer, MaxPool2d, Mode, Module, Param, ParamKind, Relu, Sequential, Upsample};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Group rule applied to student feature extractors by [`build_student`].
pub const STUDENT_GROUP_RULE: GroupRule = GroupRule::GcdDensePointwise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    /// Activation-map generator + teacher head.
    Teacher,
    /// Feature extractor + student head.
    Student,
    /// Teacher activation-map generator + student-style head.
    ConstructedTeacher,
}

/// Extractor output; every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T>(Tensor<T>);

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn shape(&self) -> [usize; 4] {
        self.0.shape()
    }
}

fn build_half<T: Scalar>(spec: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> Result<Sequential<T>> {
    let mut seq = Sequential::new();
    for plan in spec.plan()? {
        for (name, desc) in plan.layers {
            let layer = match desc {
                LayerDesc::Conv(cfg) => Layer::Conv(Conv2d::new(cfg, rng)?),
                LayerDesc::BatchNorm(c) => Layer::BatchNorm(BatchNorm2d::new(c)),
                LayerDesc::Relu => Layer::Relu(Relu::new()),
                LayerDesc::MaxPool { kernel, stride, padding } => Layer::MaxPool(MaxPool2d::new(kernel, stride, padding)),
                LayerDesc::Upsample(f) => Layer::Upsample(Upsample::new(f)),
                LayerDesc::Bottleneck(cfg) => Layer::Bottleneck(Box::new(Bottleneck::new(cfg, rng)?)),
            };
            seq.push(format!("{}.{name}", plan.name), layer);
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone)]
pub struct NetworkPartition<T> {
    role: Role,
    extractor_spec: ArchitectureSpec,
    head_spec: ArchitectureSpec,
    extractor: Sequential<T>,
    head: Sequential<T>,
    frozen: BTreeSet<PartitionLabel>,
}

impl<T: Scalar> NetworkPartition<T> {
    /// Builds a randomly initialized network from two compatible halves.
    pub fn random(role: Role, extractor_spec: &ArchitectureSpec, head_spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        check_compatible(extractor_spec, head_spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = build_half(extractor_spec, &mut rng)?;
        let head = build_half(head_spec, &mut rng)?;
        Ok(Self {
            role,
            extractor_spec: extractor_spec.clone(),
            head_spec: head_spec.clone(),
            extractor,
            head,
            frozen: BTreeSet::new(),
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn extractor_spec(&self) -> &ArchitectureSpec {
        &self.extractor_spec
    }

    pub fn head_spec(&self) -> &ArchitectureSpec {
        &self.head_spec
    }

    pub fn n_classes(&self) -> usize {
        self.head_spec.output_channels()
    }

    /// Spatial divisor every input dimension must be a multiple of.
    pub fn stride(&self) -> usize {
        self.extractor_spec.max_stride().max(self.head_spec.max_stride())
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let stride = self.stride();
        if x.height() % stride != 0 || x.width() % stride != 0 {
            return Err(Error::Stride {
                height: x.height(),
                width: x.width(),
                stride,
            });
        }
        if x.channels() != self.extractor_spec.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.extractor_spec.input_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Extractor output shape `(C, H, W)` for an `h x w` input.
    pub fn feature_shape(&self, h: usize, w: usize) -> [usize; 3] {
        let r = self.extractor_spec.output_resolution();
        [self.extractor_spec.output_channels(), h / r, w / r]
    }

    /// Evaluation-mode extractor forward pass.
    pub fn forward_extractor(&mut self, x: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        FeatureMap::new(self.extractor.forward(x, Mode::Eval)?)
    }

    pub fn forward_head(&mut self, features: &FeatureMap<T>) -> Result<Tensor<T>> {
        self.head.forward(features.tensor(), Mode::Eval)
    }

    /// Evaluation-mode logits, `N x n_classes x H x W`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.forward_extractor(x)?;
        self.forward_head(&f)
    }

    /// Train mode for unfrozen partitions, eval mode for frozen ones.
    pub fn mode_for(&self, label: PartitionLabel) -> Mode {
        if self.frozen.contains(&label) {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    pub fn extractor_mut(&mut self) -> &mut Sequential<T> {
        &mut self.extractor
    }

    pub fn head_mut(&mut self) -> &mut Sequential<T> {
        &mut self.head
    }

    pub fn half_mut(&mut self, label: PartitionLabel) -> &mut Sequential<T> {
        match label {
            PartitionLabel::Extractor => &mut self.extractor,
            PartitionLabel::Head => &mut self.head,
        }
    }

    pub fn freeze(&mut self, label: PartitionLabel) {
        self.frozen.insert(label);
    }

    pub fn unfreeze(&mut self, label: PartitionLabel) {
        self.frozen.remove(&label);
    }

    /// String form accepting `EXTRACTOR`/`FE`/`AMG` and `HEAD`/`SH`/`TH`.
    pub fn freeze_named(&mut self, label: &str) -> Result<()> {
        self.freeze(label.parse()?);
        Ok(())
    }

    pub fn unfreeze_named(&mut self, label: &str) -> Result<()> {
        self.unfreeze(label.parse()?);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen.extend(PartitionLabel::ALL);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, label: PartitionLabel) -> bool {
        self.frozen.contains(&label)
    }

    pub fn frozen_labels(&self) -> Vec<PartitionLabel> {
        self.frozen.iter().copied().collect()
    }

    pub fn clear_caches(&mut self) {
        self.extractor.clear_cache();
        self.head.clear_cache();
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param_mut(|_, _, p| p.zero_grad());
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&str, PartitionLabel, &Param<T>)) {
        for label in PartitionLabel::ALL {
            let half = match label {
                PartitionLabel::Extractor => &self.extractor,
                PartitionLabel::Head => &self.head,
            };
            half.visit_params(label.prefix(), &mut |k, p| f(k, label, p));
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, PartitionLabel, &mut Param<T>)) {
        for label in PartitionLabel::ALL {
            let half = match label {
                PartitionLabel::Extractor => &mut self.extractor,
                PartitionLabel::Head => &mut self.head,
            };
            half.visit_params_mut(label.prefix(), &mut |k, p| f(k, label, p));
        }
    }

    /// Snapshot of every parameter and buffer.
    pub fn weights(&self) -> ModelWeights<T> {
        let mut out = ModelWeights::new();
        self.for_each_param(|key, label, p| {
            out.insert(
                key,
                WeightEntry {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                    label,
                    trainable: p.kind == ParamKind::Trainable,
                },
            );
        });
        out
    }

    pub fn checksum(&self, label: PartitionLabel) -> String {
        self.weights().checksum_of(label)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, p| {
            if p.kind == ParamKind::Trainable {
                n += p.len();
            }
        });
        n
    }

    /// Replaces all values; keys and shapes must match exactly.
    pub fn load_weights(&mut self, weights: &ModelWeights<T>) -> Result<()> {
        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        self.for_each_param(|k, _, p| {
            expected.insert(k.to_string(), p.shape.clone());
        });
        let missing: Vec<String> = expected.keys().filter(|k| weights.get(k).is_none()).cloned().collect();
        let extra: Vec<String> = weights.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::KeyMismatch { missing, extra });
        }
        for (k, shape) in &expected {
            let e = weights.get(k).expect("checked above");
            if &e.shape != shape {
                return Err(Error::Shape(format!("{k}: expected {shape:?}, got {:?}", e.shape)));
            }
        }
        self.for_each_param_mut(|k, _, p| {
            let e = weights.get(k).expect("checked above");
            p.value.copy_from_slice(&e.data);
        });
        Ok(())
    }

    /// Copies the weights of one partition from `other`.
    pub fn load_partition(&mut self, label: PartitionLabel, weights: &ModelWeights<T>) -> Result<()> {
        let mut merged = self.weights();
        let mut missing = Vec::new();
        for (k, e) in self.weights().entries().filter(|(_, e)| e.label == label) {
            match weights.get(k) {
                Some(src) if src.shape == e.shape => merged.get_mut(k).expect("own key").data = src.data.clone(),
                Some(src) => return Err(Error::Shape(format!("{k}: expected {:?}, got {:?}", e.shape, src.shape))),
                None => missing.push(k.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::KeyMismatch { missing, extra: vec![] });
        }
        self.load_weights(&merged)
    }

    pub fn profile(&self, input: (usize, usize)) -> Result<ModelProfile> {
        profile_specs(&[("extractor", &self.extractor_spec), ("head", &self.head_spec)], input)
    }
}

fn check_compatible(extractor: &ArchitectureSpec, head: &ArchitectureSpec) -> Result<()> {
    extractor.validate_monotone(true)?;
    head.validate_monotone(false)?;
    if head.input_channels != extractor.output_channels() {
        return Err(Error::Shape(format!(
            "head `{}` expects {} input channels but extractor `{}` emits {}",
            head.name,
            head.input_channels,
            extractor.name,
            extractor.output_channels()
        )));
    }
    if head.input_resolution != extractor.output_resolution() {
        return Err(Error::Shape(format!(
            "head expects input at 1/{} but extractor emits 1/{}",
            head.input_resolution,
            extractor.output_resolution()
        )));
    }
    if head.output_resolution() != 1 {
        return Err(Error::Shape("head must return to full resolution".into()));
    }
    Ok(())
}

/// Pretrained teacher: every weight loaded from `pretrained` and frozen.
pub fn build_teacher<T: Scalar>(
    amg_spec: &ArchitectureSpec,
    head_spec: &ArchitectureSpec,
    pretrained: &ModelWeights<T>,
) -> Result<NetworkPartition<T>> {
    let mut net = NetworkPartition::random(Role::Teacher, amg_spec, head_spec, 0)?;
    net.load_weights(pretrained)?;
    net.freeze_all();
    Ok(net)
}

/// Trainable teacher used only for desk-scale pretraining on a source domain.
pub fn init_teacher<T: Scalar>(amg_spec: &ArchitectureSpec, head_spec: &ArchitectureSpec, seed: u64) -> Result<NetworkPartition<T>> {
    NetworkPartition::random(Role::Teacher, amg_spec, head_spec, seed)
}

/// Student whose extractor mirrors the teacher's stages under
/// [`STUDENT_GROUP_RULE`].
pub fn build_student<T: Scalar>(teacher_spec: &ArchitectureSpec, head_spec: &ArchitectureSpec, seed: u64) -> Result<NetworkPartition<T>> {
    build_student_with_rule(teacher_spec, head_spec, STUDENT_GROUP_RULE, seed)
}

pub fn build_student_with_rule<T: Scalar>(
    teacher_spec: &ArchitectureSpec,
    head_spec: &ArchitectureSpec,
    rule: GroupRule,
    seed: u64,
) -> Result<NetworkPartition<T>> {
    let mut fe = teacher_spec.with_group_rule(rule);
    fe.name = format!("{}-student", teacher_spec.name);
    NetworkPartition::random(Role::Student, &fe, head_spec, seed)
}

/// Teacher extractor (frozen, weights copied) under a fresh head.
pub fn build_constructed_teacher<T: Scalar>(
    teacher: &NetworkPartition<T>,
    head_spec: &ArchitectureSpec,
    seed: u64,
) -> Result<NetworkPartition<T>> {
    let mut ct = NetworkPartition::random(Role::ConstructedTeacher, teacher.extractor_spec(), head_spec, seed)?;
    ct.load_partition(PartitionLabel::Extractor, &teacher.weights())?;
    ct.freeze(PartitionLabel::Extractor);
    Ok(ct)
}
