//! Per-image mIOU, its mean and variance, high-precision accuracy and
//! result histograms.

use serde::{Deserialize, Serialize};

use crate::data::{collate, preprocess, DomainDataset, Mask, PreprocessSpec, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{ModelProfile, NetworkPartition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THETA: f64 = 0.75;

/// Intersection-over-union per class, averaged over the classes present in
/// either mask. `include_background` keeps class 0 in the average.
pub fn image_miou(pred: &Mask, gt: &Mask, n_classes: usize, include_background: bool) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= n_classes || g >= n_classes {
            return Err(Error::InvalidArgument(format!("class id outside 0..{n_classes}")));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let first = if include_background { 0 } else { 1 };
    let ious: Vec<f64> = (first..n_classes)
        .filter_map(|k| {
            let union = tp[k] + fp[k] + fn_[k];
            (union > 0).then(|| tp[k] as f64 / union as f64)
        })
        .collect();
    if ious.is_empty() {
        return Err(Error::InvalidArgument("no scored class occurs in either mask".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub miou: f64,
    /// Population variance.
    pub var: f64,
    /// Fraction of images strictly above `theta`.
    pub hp_acc: f64,
}

/// Mean, population variance and thresholded accuracy. Values are summed in
/// sorted order so any permutation of the input gives identical results.
pub fn aggregate(per_image: &[f64], theta: f64) -> Result<Aggregate> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no per-image scores to aggregate".into()));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("theta must lie in (0, 1), got {theta}")));
    }
    let mut sorted = per_image.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let miou = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - miou) * (v - miou)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / n;
    let hp_acc = sorted.iter().filter(|&&v| v > theta).count() as f64 / n;
    Ok(Aggregate { miou, var, hp_acc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values below the first edge.
    pub underflow: usize,
    /// Values above the last edge.
    pub overflow: usize,
}

/// Left-closed bins, the last one closed on both sides.
pub fn histogram(values: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("histogram edges must be strictly increasing with at least two entries".into()));
    }
    let bins = edges.len() - 1;
    let mut h = Histogram { edges: edges.to_vec(), counts: vec![0; bins], underflow: 0, overflow: 0 };
    let last = edges[bins];
    for &v in values {
        if v < edges[0] {
            h.underflow += 1;
        } else if v > last {
            h.overflow += 1;
        } else if v == last {
            h.counts[bins - 1] += 1;
        } else {
            // first edge strictly greater than v, minus one
            let i = edges.partition_point(|&e| e <= v) - 1;
            h.counts[i] += 1;
        }
    }
    Ok(h)
}

/// `bins` equal-width bins over `[0, 1]`.
pub fn unit_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub image_ids: Vec<String>,
    pub per_image_miou: Vec<f64>,
    pub miou: f64,
    pub var: f64,
    pub hp_acc: f64,
    pub theta: f64,
    pub n_images: usize,
    pub include_background: bool,
    pub histogram: Histogram,
    pub profile: Option<ModelProfile>,
}

impl EvaluationReport {
    /// Builds a report from `(id, score)` pairs; pairs are sorted by id.
    pub fn from_scores(mut scores: Vec<(String, f64)>, theta: f64, include_background: bool) -> Result<Self> {
        scores.sort_by(|a, b| a.0.cmp(&b.0));
        let (image_ids, per_image_miou): (Vec<String>, Vec<f64>) = scores.into_iter().unzip();
        let agg = aggregate(&per_image_miou, theta)?;
        Ok(Self {
            n_images: per_image_miou.len(),
            histogram: histogram(&per_image_miou, &unit_edges(10))?,
            image_ids,
            per_image_miou,
            miou: agg.miou,
            var: agg.var,
            hp_acc: agg.hp_acc,
            theta,
            include_background,
            profile: None,
        })
    }
}

/// Class id of the largest logit at every pixel of image `b`.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>, b: usize) -> Mask {
    let [_, c, h, w] = logits.shape();
    let mut out = Mask::new(h, w);
    for p in 0..h * w {
        let mut best = 0;
        let mut best_v = logits.data()[(b * c) * h * w + p];
        for k in 1..c {
            let v = logits.data()[(b * c + k) * h * w + p];
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        out.data[p] = best as u8;
    }
    out
}

/// Runs the model over every labelled image (one at a time, evaluation
/// mode) and scores the argmax predictions.
pub fn evaluate_model<T: Scalar>(
    net: &mut NetworkPartition<T>,
    dataset: &DomainDataset,
    eval_preprocess: &PreprocessSpec,
    theta: f64,
    include_background: bool,
) -> Result<EvaluationReport> {
    dataset.require_labels()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let mut rng = eval_preprocess.rng();
    let mut scores = Vec::with_capacity(dataset.len());
    let mut input_size = None;
    for s in &dataset.samples {
        let ready = preprocess(s, eval_preprocess, &mut rng)?;
        let (x, masks) = collate::<T>(std::slice::from_ref(&ready))?;
        input_size.get_or_insert((x.height(), x.width()));
        let logits = net.forward(&x)?;
        let pred = argmax_mask(&logits, 0);
        let gt = masks[0].as_ref().expect("labels checked");
        scores.push((s.id.clone(), image_miou(&pred, gt, net.n_classes(), include_background)?));
    }
    net.clear_caches();
    let mut report = EvaluationReport::from_scores(scores, theta, include_background)?;
    if let Some(size) = input_size {
        report.profile = Some(net.profile(size)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(h: usize, w: usize, d: &[u8]) -> Mask {
        Mask::from_vec(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn worked_binary_example() {
        let v = image_miou(&m(2, 2, &[1, 1, 0, 0]), &m(2, 2, &[1, 0, 0, 0]), 2, true).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(image_miou(&m(2, 2, &[1, 1, 0, 0]), &m(2, 2, &[1, 0, 0, 0]), 2, false).unwrap(), 0.5);
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = m(2, 2, &[0, 1, 1, 0]);
        assert_eq!(image_miou(&a, &a, 2, true).unwrap(), 1.0);
        assert_eq!(image_miou(&m(1, 2, &[1, 1]), &m(1, 2, &[0, 0]), 2, true).unwrap(), 0.0);
        assert!(image_miou(&m(1, 2, &[1, 1]), &m(2, 1, &[0, 0]), 2, true).is_err());
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let v = image_miou(&m(1, 3, &[1, 0, 1]), &m(1, 3, &[1, 0, IGNORE_LABEL]), 2, true).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn aggregate_example_and_boundary() {
        let a = aggregate(&[0.8, 0.6], 0.75).unwrap();
        assert!((a.miou - 0.7).abs() < 1e-15);
        assert!((a.var - 0.01).abs() < 1e-15);
        assert_eq!(a.hp_acc, 0.5);
        assert_eq!(aggregate(&[0.75, 0.75], 0.75).unwrap().hp_acc, 0.0);
        assert_eq!(aggregate(&[0.75 + 1e-12], 0.75).unwrap().hp_acc, 1.0);
        assert!(aggregate(&[], 0.75).is_err());
        assert!(aggregate(&[0.5], 1.0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.1, 0.5, 0.9], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(histogram(&[], &[0.0, 0.5, 1.0]).unwrap().counts, vec![0, 0]);
        assert_eq!(histogram(&[0.5], &[0.0, 0.5, 1.0]).unwrap().counts, vec![0, 1]);
        assert_eq!(histogram(&[1.0], &[0.0, 0.5, 1.0]).unwrap().counts, vec![0, 1]);
        let out = histogram(&[-0.1, 1.1, 0.2], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((out.underflow, out.overflow, out.counts.clone()), (1, 1, vec![1, 0]));
        assert!(histogram(&[0.1], &[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_properties(mut v in prop::collection::vec(0.0f64..1.0, 1..30), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let a = aggregate(&v, t1).unwrap();
            prop_assert!(a.var >= 0.0);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(aggregate(&v, lo).unwrap().hp_acc >= aggregate(&v, hi).unwrap().hp_acc);
            v.reverse();
            prop_assert_eq!(aggregate(&v, t1).unwrap(), a);
        }

        #[test]
        fn histogram_conserves_count(v in prop::collection::vec(-0.5f64..1.5, 0..50)) {
            let h = histogram(&v, &unit_edges(10)).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>() + h.underflow + h.overflow, v.len());
        }
    }
}
