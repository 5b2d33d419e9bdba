use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Domain {
    Source,
    Target,
    Proximity,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "SOURCE",
            Domain::Target => "TARGET",
            Domain::Proximity => "PROXIMITY",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SOURCE" => Ok(Domain::Source),
            "TARGET" => Ok(Domain::Target),
            "PROXIMITY" => Ok(Domain::Proximity),
            other => Err(Error::InvalidArgument(format!("unknown domain `{other}`"))),
        }
    }
}

/// Channel-major float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let [_, c, h, w] = t.shape();
        Self {
            channels: c,
            height: h,
            width: w,
            data: t.sample(0).to_vec(),
        }
    }
}

/// Integer class mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask {height}x{width} needs {} values", height * width)));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: Option<Mask>,
    pub domain: Domain,
    /// Free-form markers (the synthetic generator tags shadowed scenes with `shadow`).
    pub tags: Vec<String>,
}

impl Sample {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if let Some(label) = &self.label {
            if (label.height, label.width) != (self.image.height, self.image.width) {
                return Err(Error::Shape(format!(
                    "sample {}: image {}x{} vs label {}x{}",
                    self.id, self.image.height, self.image.width, label.height, label.width
                )));
            }
            if let Some(&bad) = label.data.iter().find(|&&v| v as usize >= n_classes && v != IGNORE_LABEL) {
                return Err(Error::Dataset(format!(
                    "sample {}: label value {bad} outside 0..{n_classes}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

/// Mapping from raw label ids to training classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "table", rename_all = "snake_case")]
pub enum ClassMap {
    /// Raw ids are already class ids.
    #[default]
    Identity,
    /// Listed ids map to the given class; unlisted ids go to background 0,
    /// except [`IGNORE_LABEL`] which is preserved.
    Table(BTreeMap<u8, u8>),
}

impl ClassMap {
    /// Binary road task: the listed raw ids become class 1, everything else 0.
    pub fn binary(positive_ids: &[u8]) -> Self {
        ClassMap::Table(positive_ids.iter().map(|&id| (id, 1)).collect())
    }

    pub fn apply(&self, raw: u8) -> u8 {
        match self {
            ClassMap::Identity => raw,
            ClassMap::Table(_) if raw == IGNORE_LABEL => IGNORE_LABEL,
            ClassMap::Table(t) => t.get(&raw).copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub n_classes: usize,
    pub class_map: ClassMap,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(domain: Domain, n_classes: usize, class_map: ClassMap, samples: Vec<Sample>) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be positive".into()));
        }
        let channels = samples.first().map(|s| s.image.channels);
        for s in &samples {
            if s.domain != domain {
                return Err(Error::Dataset(format!("sample {} is {} in a {domain} dataset", s.id, s.domain)));
            }
            if Some(s.image.channels) != channels {
                return Err(Error::Dataset(format!("sample {} has a different channel count", s.id)));
            }
            s.validate(n_classes)?;
        }
        Ok(Self {
            domain,
            n_classes,
            class_map,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    /// Errors naming every unlabeled sample.
    pub fn require_labels(&self) -> Result<()> {
        let missing: Vec<String> = self.samples.iter().filter(|s| s.label.is_none()).map(|s| s.id.clone()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingLabels(missing))
        }
    }
}

/// Stacks same-sized samples into an `N x C x H x W` batch plus masks.
pub fn collate<T: Scalar>(samples: &[Sample]) -> Result<(Tensor<T>, Vec<Option<Mask>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.image.channels, s.image.height, s.image.width) != (c, h, w) {
            return Err(Error::Shape(format!("sample {} differs in size from {}", s.id, first.id)));
        }
        data.extend(s.image.data.iter().map(|&v| T::lit(v as f64)));
        masks.push(s.label.clone());
    }
    Ok((Tensor::from_vec([samples.len(), c, h, w], data)?, masks))
}
