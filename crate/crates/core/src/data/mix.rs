//! Seeded interleaving of target and proximity images.

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{Domain, DomainDataset, Sample};
use crate::error::{Error, Result};

/// Target-to-proximity ratio. `SdOnly` draws from the target domain alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MixRatio {
    Ratio(f64),
    SdOnly,
}

impl MixRatio {
    /// Probability that a single draw comes from the target domain.
    pub fn target_probability(self) -> f64 {
        match self {
            MixRatio::SdOnly => 1.0,
            MixRatio::Ratio(r) if r.is_infinite() => 1.0,
            MixRatio::Ratio(r) => r / (1.0 + r),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            MixRatio::Ratio(r) if r.is_nan() || r < 0.0 => {
                Err(Error::InvalidArgument(format!("mixing ratio must be nonnegative, got {r}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixRatio::SdOnly => f.write_str("SD_ONLY"),
            MixRatio::Ratio(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("sd_only") || t.eq_ignore_ascii_case("sd") {
            return Ok(MixRatio::SdOnly);
        }
        let r: f64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("invalid mixing ratio {s:?}")))?;
        let ratio = MixRatio::Ratio(r);
        ratio.validate()?;
        Ok(ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub ratio: MixRatio,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(ratio: MixRatio, seed: u64) -> Self {
        Self { ratio, seed }
    }

    pub fn sd_only(seed: u64) -> Self {
        Self::new(MixRatio::SdOnly, seed)
    }
}

/// One draw of the mixed stream: which domain, and which sample inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub domain: Domain,
    pub index: usize,
}

/// Owned, infinite sequence of draws. Only depends on the seed, the ratio
/// and the two dataset sizes.
#[derive(Debug, Clone)]
pub struct MixDraws {
    rng: ChaCha8Rng,
    p_target: f64,
    n_target: usize,
    n_proximity: usize,
}

impl MixDraws {
    pub fn new(mix: &MixSpec, n_target: usize, n_proximity: usize) -> Result<Self> {
        mix.ratio.validate()?;
        let p_target = mix.ratio.target_probability();
        if p_target > 0.0 && n_target == 0 {
            return Err(Error::Dataset(format!("mixing ratio {} needs target images but the target set is empty", mix.ratio)));
        }
        if p_target < 1.0 && n_proximity == 0 {
            return Err(Error::Dataset(format!(
                "mixing ratio {} needs proximity images but the proximity set is empty",
                mix.ratio
            )));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(mix.seed),
            p_target,
            n_target,
            n_proximity,
        })
    }
}

impl Iterator for MixDraws {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let from_target = self.p_target >= 1.0 || (self.p_target > 0.0 && self.rng.random_bool(self.p_target));
        Some(if from_target {
            Draw { domain: Domain::Target, index: self.rng.random_range(0..self.n_target) }
        } else {
            Draw { domain: Domain::Proximity, index: self.rng.random_range(0..self.n_proximity) }
        })
    }
}

/// Stream of samples borrowed from the two datasets.
pub struct MixStream<'a> {
    draws: std::iter::Take<MixDraws>,
    target: &'a DomainDataset,
    proximity: Option<&'a DomainDataset>,
}

impl<'a> Iterator for MixStream<'a> {
    type Item = &'a Sample;

    fn next(&mut self) -> Option<&'a Sample> {
        let d = self.draws.next()?;
        Some(match d.domain {
            Domain::Proximity => &self.proximity.expect("validated at construction").samples[d.index],
            _ => &self.target.samples[d.index],
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.draws.size_hint()
    }
}

/// Emits `count` samples, each from the target set with probability
/// `r/(1+r)` and from the proximity set otherwise, uniformly with
/// replacement inside each set.
pub fn shuffle_select<'a>(
    target: &'a DomainDataset,
    proximity: Option<&'a DomainDataset>,
    mix: &MixSpec,
    count: usize,
) -> Result<MixStream<'a>> {
    let n_p = proximity.map_or(0, DomainDataset::len);
    let draws = MixDraws::new(mix, target.len(), n_p)?;
    Ok(MixStream { draws: draws.take(count), target, proximity })
}

/// Runs `iter` on a worker thread, keeping up to `depth` items ready.
/// Items come out in exactly the order the iterator produces them.
pub struct Prefetch<T> {
    rx: mpsc::Receiver<T>,
    worker: Option<thread::JoinHandle<()>>,
}

impl<T: Send + 'static> Prefetch<T> {
    pub fn new<I>(iter: I, depth: usize) -> Self
    where
        I: Iterator<Item = T> + Send + 'static,
    {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let worker = thread::spawn(move || {
            for item in iter {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        Self { rx, worker: Some(worker) }
    }
}

impl<T> Iterator for Prefetch<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        match self.rx.recv() {
            Ok(v) => Some(v),
            Err(_) => {
                if let Some(w) = self.worker.take() {
                    let _ = w.join();
                }
                None
            }
        }
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        // Unblock the worker before joining it.
        let (_, dead) = mpsc::channel();
        self.rx = dead;
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample::{ClassMap, Image};
    use proptest::prelude::*;

    fn dataset(domain: Domain, n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("{domain}-{i:03}"),
                image: Image::new(3, 2, 2),
                label: None,
                domain,
                tags: vec![],
            })
            .collect();
        DomainDataset { domain, n_classes: 2, class_map: ClassMap::Identity, samples }
    }

    fn target_fraction(ratio: MixRatio, seed: u64, count: usize) -> f64 {
        let t = dataset(Domain::Target, 7);
        let p = dataset(Domain::Proximity, 11);
        let stream = shuffle_select(&t, Some(&p), &MixSpec::new(ratio, seed), count).unwrap();
        stream.filter(|s| s.domain == Domain::Target).count() as f64 / count as f64
    }

    #[test]
    fn ratio_grid_hits_expected_fraction() {
        for r in [0.2, 1.0, 5.0] {
            let f = target_fraction(MixRatio::Ratio(r), 17, 10_000);
            assert!((f - r / (1.0 + r)).abs() <= 0.02, "r={r} fraction={f}");
        }
    }

    #[test]
    fn degenerate_ratios() {
        assert_eq!(target_fraction(MixRatio::Ratio(0.0), 3, 2000), 0.0);
        assert_eq!(target_fraction(MixRatio::SdOnly, 3, 2000), 1.0);
    }

    #[test]
    fn empty_domains_are_rejected() {
        let t = dataset(Domain::Target, 3);
        let empty_p = dataset(Domain::Proximity, 0);
        assert!(shuffle_select(&t, Some(&empty_p), &MixSpec::new(MixRatio::Ratio(0.0), 0), 5).is_err());
        assert!(shuffle_select(&t, None, &MixSpec::new(MixRatio::Ratio(1.0), 0), 5).is_err());
        assert!(shuffle_select(&t, None, &MixSpec::sd_only(0), 5).is_ok());
        let empty_t = dataset(Domain::Target, 0);
        assert!(shuffle_select(&empty_t, None, &MixSpec::sd_only(0), 5).is_err());
        assert!(MixSpec::new(MixRatio::Ratio(-1.0), 0).ratio.validate().is_err());
    }

    #[test]
    fn ratio_parses() {
        assert_eq!("SD_ONLY".parse::<MixRatio>().unwrap(), MixRatio::SdOnly);
        assert_eq!("0.5".parse::<MixRatio>().unwrap(), MixRatio::Ratio(0.5));
        assert!("-2".parse::<MixRatio>().is_err());
    }

    #[test]
    fn prefetch_preserves_order() {
        let mix = MixSpec::new(MixRatio::Ratio(0.5), 99);
        let direct: Vec<Draw> = MixDraws::new(&mix, 5, 9).unwrap().take(500).collect();
        let fetched: Vec<Draw> = Prefetch::new(MixDraws::new(&mix, 5, 9).unwrap().take(500), 4).collect();
        assert_eq!(direct, fetched);
        // dropping early must not hang
        let mut early = Prefetch::new(MixDraws::new(&mix, 5, 9).unwrap(), 2);
        early.next();
    }

    proptest! {
        #[test]
        fn stream_is_pure_function_of_inputs(seed in any::<u64>(), r in 0.0f64..10.0, count in 0usize..200) {
            let t = dataset(Domain::Target, 4);
            let p = dataset(Domain::Proximity, 6);
            let mix = MixSpec::new(MixRatio::Ratio(r), seed);
            let a: Vec<&str> = shuffle_select(&t, Some(&p), &mix, count).unwrap().map(|s| s.id.as_str()).collect();
            let b: Vec<&str> = shuffle_select(&t, Some(&p), &mix, count).unwrap().map(|s| s.id.as_str()).collect();
            prop_assert_eq!(a.len(), count);
            prop_assert_eq!(a, b);
        }
    }
}
