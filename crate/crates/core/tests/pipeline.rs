use std::fs;

use esd_core::data::{generate_domain, Domain, DomainDataset, SceneStyle};
use esd_core::model::{init_teacher, tiny_extractor, tiny_head, GroupRule, NetworkPartition, PartitionLabel, STUDENT_GROUP_RULE};
use esd_core::optim::Stage;
use esd_core::train::{run_pipeline, Method, PipelineConfig, PipelineInputs, StageSchedule};

fn domains() -> (DomainDataset, DomainDataset) {
    let target = generate_domain(Domain::Target, &SceneStyle::target(), 4, 32, true, 21).unwrap();
    let mut style = SceneStyle::proximity();
    style.aspect = 1.0;
    (target, generate_domain(Domain::Proximity, &style, 6, 32, false, 22).unwrap())
}

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig { crop: 16, pool: 1, ..Default::default() };
    for c in [&mut cfg.distill, &mut cfg.frozen, &mut cfg.finetune, &mut cfg.normal] {
        c.schedule = StageSchedule { max_epochs: 2, batch_size: 2, steps_per_epoch: Some(3), ..Default::default() };
    }
    cfg
}

fn teacher() -> NetworkPartition<f64> {
    let mut t = init_teacher::<f64>(&tiny_extractor(GroupRule::None), &tiny_head(8, 2, GroupRule::None), 4).unwrap();
    t.freeze_all();
    t
}

fn run(method: Method, cfg: &PipelineConfig, seed: u64, out: Option<&std::path::Path>) -> esd_core::train::PipelineOutput<f64> {
    let (target, prox) = domains();
    let t = teacher();
    let head = tiny_head(8, 2, STUDENT_GROUP_RULE);
    let inputs = PipelineInputs {
        teacher: &t,
        student_head: &head,
        constructed_head: &head,
        target: &target,
        proximity: Some(&prox),
        seed,
        out_dir: out,
        config_digest: "test".into(),
    };
    run_pipeline(method, &inputs, cfg).unwrap()
}

#[test]
fn stage_sequences_per_method() {
    let cfg = config();
    let stages = |m| run(m, &cfg, 0, None).stages.iter().map(|s| s.stage).collect::<Vec<_>>();
    assert_eq!(stages(Method::Normal), vec![Stage::Normal]);
    assert_eq!(stages(Method::Ftt), vec![Stage::Frozen]);
    assert_eq!(stages(Method::FttFt), vec![Stage::Frozen, Stage::Finetune]);
    assert_eq!(stages(Method::Sd), vec![Stage::Distill, Stage::Frozen, Stage::Finetune]);
    assert_eq!(stages(Method::Esd(1.0)), vec![Stage::Distill, Stage::Frozen, Stage::Finetune]);
}

#[test]
fn ftt_keeps_the_teacher_extractor() {
    let out = run(Method::FttFt, &config(), 1, None);
    let t = teacher();
    let s2 = &out.stages[0];
    assert_eq!(s2.weights_checksum_before[&PartitionLabel::Extractor], t.checksum(PartitionLabel::Extractor));
    assert_eq!(s2.weights_checksum_after[&PartitionLabel::Extractor], t.checksum(PartitionLabel::Extractor));
    assert_ne!(out.stages[1].weights_checksum_after[&PartitionLabel::Extractor], t.checksum(PartitionLabel::Extractor));
}

#[test]
fn zero_epoch_stage_is_a_no_op() {
    let mut cfg = config();
    cfg.frozen.schedule.max_epochs = 0;
    let out = run(Method::Sd, &cfg, 2, None);
    let s2 = &out.stages[1];
    assert_eq!(s2.epochs_run, 0);
    assert_eq!(s2.steps_run, 0);
    assert_eq!(s2.weights_checksum_before, s2.weights_checksum_after);
}

#[test]
fn normal_training_is_deterministic() {
    let cfg = config();
    let a = run(Method::Normal, &cfg, 5, None);
    let b = run(Method::Normal, &cfg, 5, None);
    assert_eq!(a.stages[0].epoch_losses, b.stages[0].epoch_losses);
    assert_eq!(a.network.checksum(PartitionLabel::Head), b.network.checksum(PartitionLabel::Head));
    let c = run(Method::Normal, &cfg, 6, None);
    assert_ne!(a.network.checksum(PartitionLabel::Head), c.network.checksum(PartitionLabel::Head));
}

#[test]
fn step_log_records_domain_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    run(Method::Esd(1.0), &cfg, 3, Some(dir.path()));
    let text = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,n_target,n_proximity,lr"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    // 3 stages x 2 epochs x 3 steps, numbered consecutively
    assert_eq!(rows.len(), 18);
    assert!(rows.iter().enumerate().all(|(i, r)| r[0] as usize == i));
    let distill = &rows[..6];
    assert!(distill.iter().all(|r| r[2] + r[3] == 2.0));
    assert!(distill.iter().map(|r| r[3]).sum::<f64>() > 0.0);
    assert!(rows[6..].iter().all(|r| r[3] == 0.0));
    for name in ["stage1_distill.ckpt", "stage2_frozen.ckpt", "stage3_finetune.ckpt"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }

    run(Method::Sd, &cfg, 3, Some(dir.path()));
    let text = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert_eq!(text.lines().count(), 19, "rerun replaces the log");
}
