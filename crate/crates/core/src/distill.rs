//! Feature-mimicking loss and the distillation stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, preprocess, Domain, DomainDataset, MixDraws, MixSpec, Sample};
use crate::error::{Error, Result};
use crate::model::{FeatureMap, NetworkPartition, PartitionLabel};
use crate::nn::Module;
use crate::optim::{OptimizerSpec, Stage};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{run_epochs, Augment, StageResult, StageSchedule, StepOutcome};

/// Normalizer of the squared feature difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillNorm {
    /// Sum over channels, mean over the `N * H * W` positions.
    #[default]
    PerPosition,
    /// Mean over every element.
    Elementwise,
}

impl DistillNorm {
    fn denominator(self, shape: [usize; 4]) -> f64 {
        let [n, c, h, w] = shape;
        match self {
            DistillNorm::PerPosition => (n * h * w) as f64,
            DistillNorm::Elementwise => (n * c * h * w) as f64,
        }
    }
}

fn check_pair<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<()> {
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "teacher features {:?} vs student features {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if teacher.is_empty() {
        return Err(Error::Shape("empty feature maps".into()));
    }
    if !teacher.all_finite() || !student.all_finite() {
        return Err(Error::NonFinite("feature map".into()));
    }
    Ok(())
}

/// Squared distance between teacher and student activations.
pub fn distillation_loss<T: Scalar>(teacher: &FeatureMap<T>, student: &FeatureMap<T>, norm: DistillNorm) -> Result<f64> {
    let (t, s) = (teacher.tensor(), student.tensor());
    check_pair(t, s)?;
    let sum: f64 = t
        .data()
        .iter()
        .zip(s.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / norm.denominator(t.shape()))
}

/// Loss and its gradient with respect to the student features.
pub fn distillation_loss_grad<T: Scalar>(
    teacher: &FeatureMap<T>,
    student: &FeatureMap<T>,
    norm: DistillNorm,
) -> Result<(f64, Tensor<T>)> {
    let loss = distillation_loss(teacher, student, norm)?;
    let (t, s) = (teacher.tensor(), student.tensor());
    let k = T::lit(2.0 / norm.denominator(t.shape()));
    let mut grad = Tensor::zeros(s.shape());
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(t.data()).zip(s.data()) {
        *g = k * (b - a);
    }
    Ok((loss, grad))
}

/// Inputs of the distillation stage.
pub struct DistillData<'a> {
    pub target: &'a DomainDataset,
    pub proximity: Option<&'a DomainDataset>,
    pub mix: MixSpec,
    pub augment: &'a Augment,
    pub norm: DistillNorm,
}

pub(crate) fn prepare_inputs<T: Scalar>(
    samples: &[&Sample],
    augment: &Augment,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, usize, usize)> {
    let mut ready = Vec::with_capacity(samples.len());
    let (mut n_t, mut n_p) = (0, 0);
    for s in samples {
        let spec = match s.domain {
            Domain::Proximity => {
                n_p += 1;
                &augment.proximity
            }
            _ => {
                n_t += 1;
                &augment.target
            }
        };
        let mut out = preprocess(s, spec, rng)?;
        out.label = None;
        ready.push(out);
    }
    let (x, _) = collate(&ready)?;
    Ok((x, n_t, n_p))
}

/// Trains the student extractor to reproduce the teacher extractor's
/// activations. Only extractor weights of `student` move; the head and the
/// teacher are left untouched.
pub fn run_stage1<T: Scalar>(
    teacher: &mut NetworkPartition<T>,
    student: &mut NetworkPartition<T>,
    data: &DistillData<'_>,
    opt: &OptimizerSpec,
    sched: &StageSchedule,
) -> Result<StageResult> {
    if !teacher.is_frozen(PartitionLabel::Extractor) {
        return Err(Error::InvalidArgument("teacher extractor must be frozen during distillation".into()));
    }
    sched.validate()?;
    let n_t = data.target.len();
    let n_p = data.proximity.map_or(0, DomainDataset::len);
    let mut draws = MixDraws::new(&data.mix, n_t, n_p)?;
    let steps = sched.steps_for(n_t);
    let mut rng = stream_rng(data.augment.target.seed, 1);

    let saved = student.frozen_labels();
    student.unfreeze(PartitionLabel::Extractor);
    student.freeze(PartitionLabel::Head);

    let result = run_epochs(Stage::Distill, opt, sched, steps, student, |student, _| {
        let picked: Vec<&Sample> = draws
            .by_ref()
            .take(sched.batch_size)
            .map(|d| match d.domain {
                Domain::Proximity => &data.proximity.expect("checked by the mix").samples[d.index],
                _ => &data.target.samples[d.index],
            })
            .collect();
        let (x, nt, np) = prepare_inputs::<T>(&picked, data.augment, &mut rng)?;
        let target = teacher.forward_extractor(&x)?;
        let mode = student.mode_for(PartitionLabel::Extractor);
        let raw = student.extractor_mut().forward(&x, mode)?;
        let features = FeatureMap::new(raw).map_err(|_| Error::NonFinite("student features".into()))?;
        let (loss, grad) = distillation_loss_grad(&target, &features, data.norm)?;
        student.extractor_mut().backward(&grad)?;
        Ok(StepOutcome { loss, n_target: nt, n_proximity: np })
    });

    student.unfreeze_all();
    for l in saved {
        student.freeze(l);
    }
    teacher.clear_caches();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(shape: [usize; 4], f: impl FnMut([usize; 4]) -> f64) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::from_fn(shape, f)).unwrap()
    }

    #[test]
    fn ones_vs_zeros_gives_two() {
        let t = fm([1, 2, 2, 2], |_| 1.0);
        let s = fm([1, 2, 2, 2], |_| 0.0);
        assert_eq!(distillation_loss(&t, &s, DistillNorm::PerPosition).unwrap(), 2.0);
        assert_eq!(distillation_loss(&t, &s, DistillNorm::Elementwise).unwrap(), 1.0);
        assert_eq!(distillation_loss(&t, &t, DistillNorm::PerPosition).unwrap(), 0.0);
    }

    #[test]
    fn rejects_mismatched_shapes_and_non_finite() {
        let t = fm([1, 2, 2, 2], |_| 1.0);
        let s = fm([1, 2, 2, 1], |_| 1.0);
        assert!(matches!(distillation_loss(&t, &s, DistillNorm::PerPosition), Err(Error::Shape(_))));
        assert!(FeatureMap::new(Tensor::<f64>::full([1, 1, 1, 1], f64::NAN)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = fm([2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let s = Tensor::from_fn([2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let (_, g) = distillation_loss_grad(&t, &FeatureMap::new(s.clone()).unwrap(), DistillNorm::PerPosition).unwrap();
        for i in 0..s.len() {
            let mut p = s.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = s.clone();
            m.data_mut()[i] -= 1e-6;
            let lp = distillation_loss(&t, &FeatureMap::new(p).unwrap(), DistillNorm::PerPosition).unwrap();
            let lm = distillation_loss(&t, &FeatureMap::new(m).unwrap(), DistillNorm::PerPosition).unwrap();
            assert!(((lp - lm) / 2e-6 - g.data()[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_quadratic(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = fm([1, 3, 4, 2], |_| rng.random_range(-2.0..2.0));
            let b = fm([1, 3, 4, 2], |_| rng.random_range(-2.0..2.0));
            let ab = distillation_loss(&a, &b, DistillNorm::PerPosition).unwrap();
            let ba = distillation_loss(&b, &a, DistillNorm::PerPosition).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab > 0.0);
            let sa = FeatureMap::new(a.tensor().scale(alpha)).unwrap();
            let sb = FeatureMap::new(b.tensor().scale(alpha)).unwrap();
            let scaled = distillation_loss(&sa, &sb, DistillNorm::PerPosition).unwrap();
            prop_assert!((scaled - alpha * alpha * ab).abs() <= 1e-9 * ab.max(1.0));
        }
    }
}
