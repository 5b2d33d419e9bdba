use esd_core::model::{build_student, tiny_extractor, tiny_head, GroupRule, PartitionLabel, STUDENT_GROUP_RULE};
use esd_core::{Checkpoint32, Checkpoint64, Network32, Network64, Tensor32, Tensor64};
use esd_core::model::Provenance;

#[test]
fn f32_and_f64_networks_agree() {
    let fe = tiny_extractor(GroupRule::None);
    let head = tiny_head(8, 2, STUDENT_GROUP_RULE);
    let mut n64: Network64 = build_student(&fe, &head, 1).unwrap();
    let mut n32: Network32 = build_student(&fe, &head, 1).unwrap();
    n32.load_weights(&n64.weights().cast()).unwrap();
    let x64 = Tensor64::from_fn([1, 3, 16, 16], |[_, c, h, w]| ((c * 7 + h * 3 + w) % 11) as f64 / 11.0);
    let x32: Tensor32 = x64.cast();
    let y64 = n64.forward(&x64).unwrap();
    let y32 = n32.forward(&x32).unwrap();
    assert_eq!(y64.shape(), y32.shape());
    let worst = y64.data().iter().zip(y32.data()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn checkpoints_cross_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let fe = tiny_extractor(GroupRule::None);
    let head = tiny_head(8, 2, STUDENT_GROUP_RULE);
    let n64: Network64 = build_student(&fe, &head, 2).unwrap();
    let path = dir.path().join("n.ckpt");
    Checkpoint64::from_network(&n64, Provenance::default()).save(&path).unwrap();
    let n32 = Checkpoint32::load(&path).unwrap().to_network().unwrap();
    assert_eq!(n32.param_count(), n64.param_count());
    assert_eq!(n32.extractor_spec(), n64.extractor_spec());
    assert_eq!(n32.frozen_labels(), n64.frozen_labels());
    assert!(!n32.is_frozen(PartitionLabel::Head));
}
