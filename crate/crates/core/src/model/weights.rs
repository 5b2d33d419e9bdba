//! Keyed parameter storage and checksums.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartitionLabel {
    Extractor,
    Head,
}

impl PartitionLabel {
    pub const ALL: [PartitionLabel; 2] = [PartitionLabel::Extractor, PartitionLabel::Head];

    pub fn prefix(self) -> &'static str {
        match self {
            PartitionLabel::Extractor => "extractor",
            PartitionLabel::Head => "head",
        }
    }

    /// Label owning a parameter key, from its leading path segment.
    pub fn of_key(key: &str) -> Option<Self> {
        match key.split('.').next() {
            Some("extractor") => Some(PartitionLabel::Extractor),
            Some("head") => Some(PartitionLabel::Head),
            _ => None,
        }
    }
}

impl fmt::Display for PartitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionLabel::Extractor => "EXTRACTOR",
            PartitionLabel::Head => "HEAD",
        })
    }
}

impl FromStr for PartitionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EXTRACTOR" | "FE" | "AMG" => Ok(PartitionLabel::Extractor),
            "HEAD" | "SH" | "TH" => Ok(PartitionLabel::Head),
            other => Err(Error::InvalidArgument(format!("unknown partition label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub label: PartitionLabel,
    /// False for running statistics.
    pub trainable: bool,
}

/// Snapshot of every parameter and buffer of a network, keyed by layer path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights<T> {
    entries: BTreeMap<String, WeightEntry<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, entry: WeightEntry<T>) {
        self.entries.insert(key.into(), entry);
    }

    pub fn get(&self, key: &str) -> Option<&WeightEntry<T>> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut WeightEntry<T>> {
        self.entries.get_mut(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<WeightEntry<T>> {
        self.entries.remove(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &WeightEntry<T>)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    /// Only the entries carrying `label`.
    pub fn subset(&self, label: PartitionLabel) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| e.label == label)
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    /// SHA-256 over keys, shapes and little-endian value bytes, in key order.
    pub fn checksum(&self) -> String {
        digest(self.entries.iter())
    }

    pub fn checksum_of(&self, label: PartitionLabel) -> String {
        digest(self.entries.iter().filter(|(_, e)| e.label == label))
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        WeightEntry {
                            shape: e.shape.clone(),
                            data: e.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                            label: e.label,
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

fn digest<'a, T: Scalar + 'a>(entries: impl Iterator<Item = (&'a String, &'a WeightEntry<T>)>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (key, e) in entries {
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key.as_bytes());
        for d in &e.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in &e.data {
            v.extend_le_bytes(&mut buf);
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}
