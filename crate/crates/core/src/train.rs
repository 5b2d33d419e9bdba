//! Segmentation loss, the supervised stages and complete method pipelines.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, preprocess, proximity_resize, DomainDataset, Mask, MixRatio, MixSpec, PreprocessSpec, Sample, IGNORE_LABEL};
use crate::distill::{run_stage1, DistillData, DistillNorm};
use crate::error::{Error, Result};
use crate::model::{build_constructed_teacher, build_student, init_teacher, ArchitectureSpec, Checkpoint, NetworkPartition, PartitionLabel, Provenance, Role};
use crate::nn::Module;
use crate::optim::{OptimizerSpec, Sgd, Stage};
use crate::rng::{derive_seed, stream_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel-averaged cross-entropy of softmax(`logits`) against `masks`.
/// Pixels labelled [`IGNORE_LABEL`] do not count.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor<T>, masks: &[Mask]) -> Result<f64> {
    segmentation_loss_impl(logits, masks, false).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to the logits.
pub fn segmentation_loss_grad<T: Scalar>(logits: &Tensor<T>, masks: &[Mask]) -> Result<(f64, Tensor<T>)> {
    segmentation_loss_impl(logits, masks, true).map(|(l, g)| (l, g.expect("requested")))
}

fn segmentation_loss_impl<T: Scalar>(logits: &Tensor<T>, masks: &[Mask], want_grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
    let [n, c, h, w] = logits.shape();
    if masks.len() != n {
        return Err(Error::Shape(format!("{n} logit maps but {} masks", masks.len())));
    }
    if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::Shape(format!("logits are {h}x{w} but a mask is {}x{}", m.height, m.width)));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grad = want_grad.then(|| Tensor::zeros(logits.shape()));
    let mut z = vec![0.0f64; c];
    for (b, mask) in masks.iter().enumerate() {
        for p in 0..h * w {
            let label = mask.data[p];
            if label == IGNORE_LABEL {
                continue;
            }
            if label as usize >= c {
                return Err(Error::InvalidArgument(format!("label {label} outside 0..{c}")));
            }
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = logits.data()[(b * c + k) * h * w + p].as_f64();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[label as usize];
            count += 1;
            if let Some(g) = &mut grad {
                for (k, &zk) in z.iter().enumerate() {
                    let soft = (zk - lse).exp();
                    g.data_mut()[(b * c + k) * h * w + p] = T::lit(soft - if k == label as usize { 1.0 } else { 0.0 });
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("every pixel is ignored".into()));
    }
    let inv = 1.0 / count as f64;
    if let Some(g) = &mut grad {
        let k = T::lit(inv);
        g.data_mut().iter_mut().for_each(|v| *v = *v * k);
    }
    Ok((total * inv, grad))
}

/// Epoch budget and early-stopping rule of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub max_epochs: usize,
    /// Window, in epochs, over which improvement is measured.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub batch_size: usize,
    /// Overrides the default epoch length of `ceil(|target| / batch_size)` steps.
    pub steps_per_epoch: Option<usize>,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { max_epochs: 20, patience: 5, min_rel_improvement: 1e-3, batch_size: 8, steps_per_epoch: None }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.min_rel_improvement >= 0.0) {
            return Err(Error::InvalidArgument("min_rel_improvement must be nonnegative".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidArgument("steps_per_epoch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, n_samples: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_samples.div_ceil(self.batch_size))
            .max(1)
    }
}

/// Stops once the best epoch loss of the last `patience` epochs improves on
/// the best loss before them by less than `min_rel` (relative).
#[derive(Debug, Clone)]
pub struct Convergence {
    history: Vec<f64>,
    patience: usize,
    min_rel: f64,
}

impl Convergence {
    pub fn new(patience: usize, min_rel: f64) -> Self {
        Self { history: Vec::new(), patience: patience.max(1), min_rel }
    }

    /// Records an epoch loss and reports whether training has converged.
    pub fn push(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let e = self.history.len();
        if e <= self.patience {
            return false;
        }
        let split = e - self.patience;
        let before = self.history[..split].iter().copied().fold(f64::INFINITY, f64::min);
        let recent = self.history[split..].iter().copied().fold(f64::INFINITY, f64::min);
        if before <= 0.0 {
            return true;
        }
        (before - recent) / before < self.min_rel
    }
}

/// One row of the per-step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub n_target: usize,
    pub n_proximity: usize,
    pub lr: f64,
}

pub const STEP_LOG_HEADER: &str = "step,loss,n_target,n_proximity,lr";

/// Appends rows to a step log, writing the header when the file is new.
pub fn append_step_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(STEP_LOG_HEADER);
        buf.push('\n');
    }
    for r in records {
        buf.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.n_target, r.n_proximity, r.lr));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub type Checksums = BTreeMap<PartitionLabel, String>;

fn checksums<T: Scalar>(net: &NetworkPartition<T>) -> Checksums {
    PartitionLabel::ALL.iter().map(|&l| (l, net.checksum(l))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub epochs_run: usize,
    pub steps_run: usize,
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
    pub converged: bool,
    pub weights_checksum_before: Checksums,
    pub weights_checksum_after: Checksums,
    pub optimizer: OptimizerSpec,
    pub schedule: StageSchedule,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

/// What a single optimization step reports back to the epoch loop.
pub struct StepOutcome {
    pub loss: f64,
    pub n_target: usize,
    pub n_proximity: usize,
}

/// Shared epoch loop. `step` must leave gradients in `net`; the loop zeroes
/// them beforehand and applies the optimizer afterwards.
pub(crate) fn run_epochs<T: Scalar>(
    stage: Stage,
    opt: &OptimizerSpec,
    sched: &StageSchedule,
    steps_per_epoch: usize,
    net: &mut NetworkPartition<T>,
    mut step: impl FnMut(&mut NetworkPartition<T>, usize) -> Result<StepOutcome>,
) -> Result<StageResult> {
    sched.validate()?;
    let mut sgd = Sgd::new(*opt)?;
    let before = checksums(net);
    let mut conv = Convergence::new(sched.patience, sched.min_rel_improvement);
    let mut epoch_losses = Vec::new();
    let mut steps = Vec::new();
    let mut converged = false;
    for epoch in 0..sched.max_epochs {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let idx = steps.len();
            net.zero_grad();
            let out = match step(net, idx) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step: idx, loss: f64::NAN }),
                other => other?,
            };
            if !out.loss.is_finite() {
                return Err(Error::Diverged { step: idx, loss: out.loss });
            }
            sgd.step(net);
            sum += out.loss;
            steps.push(StepRecord {
                step: idx,
                loss: out.loss,
                n_target: out.n_target,
                n_proximity: out.n_proximity,
                lr: opt.learning_rate,
            });
        }
        let mean = sum / steps_per_epoch as f64;
        log::debug!("{stage} epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
        if conv.push(mean) {
            converged = true;
            break;
        }
    }
    net.clear_caches();
    net.zero_grad();
    Ok(StageResult {
        stage,
        epochs_run: epoch_losses.len(),
        steps_run: steps.len(),
        final_loss: epoch_losses.last().copied(),
        epoch_losses,
        converged,
        weights_checksum_before: before,
        weights_checksum_after: checksums(net),
        optimizer: *opt,
        schedule: *sched,
        steps,
    })
}

/// Augmentation chains for target and proximity images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub target: PreprocessSpec,
    pub proximity: PreprocessSpec,
}

impl Augment {
    pub fn new(crop: usize, pool: usize, proximity_size: (usize, usize), seed: u64) -> Self {
        Self {
            target: PreprocessSpec::target(crop, pool, seed),
            proximity: PreprocessSpec::proximity(proximity_size, crop, pool, derive_seed(seed, 1)),
        }
    }
}

fn labeled_batch<T: Scalar>(
    data: &DomainDataset,
    batch: usize,
    spec: &PreprocessSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<Mask>)> {
    let mut ready: Vec<Sample> = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = &data.samples[rng.random_range(0..data.len())];
        ready.push(preprocess(s, spec, rng)?);
    }
    let (x, masks) = collate(&ready)?;
    let masks = masks
        .into_iter()
        .zip(&ready)
        .map(|(m, s)| m.ok_or_else(|| Error::MissingLabels(vec![s.id.clone()])))
        .collect::<Result<Vec<_>>>()?;
    Ok((x, masks))
}

fn require_labeled(data: &DomainDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("target dataset is empty".into()));
    }
    data.require_labels()
}

/// Supervised loop over random target batches. With `through_extractor`
/// false, features come from the extractor in evaluation mode and only the
/// head receives gradients.
fn train_segmentation<T: Scalar>(
    net: &mut NetworkPartition<T>,
    data: &DomainDataset,
    opt: &OptimizerSpec,
    sched: &StageSchedule,
    augment: &PreprocessSpec,
    stage: Stage,
    through_extractor: bool,
) -> Result<StageResult> {
    require_labeled(data)?;
    let mut rng = stream_rng(augment.seed, 100 + stage as u64);
    let steps = sched.steps_for(data.len());
    run_epochs(stage, opt, sched, steps, net, |net, _| {
        let (x, masks) = labeled_batch::<T>(data, sched.batch_size, augment, &mut rng)?;
        net.check_input(&x)?;
        let head_mode = net.mode_for(PartitionLabel::Head);
        let n = masks.len();
        let loss = if through_extractor {
            let fe_mode = net.mode_for(PartitionLabel::Extractor);
            let f = net.extractor_mut().forward(&x, fe_mode)?;
            let logits = net.head_mut().forward(&f, head_mode)?;
            let (loss, g) = segmentation_loss_grad(&logits, &masks)?;
            let gf = net.head_mut().backward(&g)?;
            net.extractor_mut().backward(&gf)?;
            loss
        } else {
            let f = net.forward_extractor(&x)?;
            let logits = net.head_mut().forward(f.tensor(), head_mode)?;
            let (loss, g) = segmentation_loss_grad(&logits, &masks)?;
            net.head_mut().backward(&g)?;
            loss
        };
        Ok(StepOutcome { loss, n_target: n, n_proximity: 0 })
    })
}

/// Head training on the target set with the extractor frozen.
pub fn run_stage2<T: Scalar>(
    student: &mut NetworkPartition<T>,
    data: &DomainDataset,
    opt: &OptimizerSpec,
    sched: &StageSchedule,
    augment: &PreprocessSpec,
) -> Result<StageResult> {
    student.freeze(PartitionLabel::Extractor);
    student.unfreeze(PartitionLabel::Head);
    train_segmentation(student, data, opt, sched, augment, Stage::Frozen, false)
}

/// Whole-network fine-tuning; leaves nothing frozen.
pub fn run_stage3<T: Scalar>(
    student: &mut NetworkPartition<T>,
    data: &DomainDataset,
    opt: &OptimizerSpec,
    sched: &StageSchedule,
    augment: &PreprocessSpec,
) -> Result<StageResult> {
    student.unfreeze_all();
    train_segmentation(student, data, opt, sched, augment, Stage::Finetune, true)
}

/// Single-stage training of every weight from the current initialization.
pub fn run_normal_training<T: Scalar>(
    student: &mut NetworkPartition<T>,
    data: &DomainDataset,
    opt: &OptimizerSpec,
    sched: &StageSchedule,
    augment: &PreprocessSpec,
) -> Result<StageResult> {
    student.unfreeze_all();
    train_segmentation(student, data, opt, sched, augment, Stage::Normal, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub optimizer: OptimizerSpec,
    pub schedule: StageSchedule,
}

impl StageConfig {
    pub fn default_for(stage: Stage) -> Self {
        Self { optimizer: OptimizerSpec::default_for(stage), schedule: StageSchedule::default() }
    }
}

/// Trains a teacher from scratch on a labelled source domain and freezes it.
pub fn pretrain_teacher<T: Scalar>(
    extractor: &ArchitectureSpec,
    head: &ArchitectureSpec,
    source: &DomainDataset,
    config: &StageConfig,
    augment: &PreprocessSpec,
    seed: u64,
) -> Result<(NetworkPartition<T>, StageResult)> {
    let mut teacher = init_teacher::<T>(extractor, head, seed)?;
    let result = run_normal_training(&mut teacher, source, &config.optimizer, &config.schedule, augment)?;
    teacher.freeze_all();
    Ok((teacher, result))
}

/// Head training on a constructed teacher with its extractor frozen, then
/// optionally a fine-tuning pass over every weight.
pub fn run_ftt<T: Scalar>(
    ct: &mut NetworkPartition<T>,
    data: &DomainDataset,
    frozen: &StageConfig,
    fine_tune: Option<&StageConfig>,
    augment: &PreprocessSpec,
) -> Result<Vec<StageResult>> {
    if ct.role() != Role::ConstructedTeacher {
        return Err(Error::InvalidArgument(format!("transfer baseline needs a constructed teacher, got {:?}", ct.role())));
    }
    let mut out = vec![run_stage2(ct, data, &frozen.optimizer, &frozen.schedule, augment)?];
    if let Some(ft) = fine_tune {
        out.push(run_stage3(ct, data, &ft.optimizer, &ft.schedule, augment)?);
    }
    Ok(out)
}

/// Training method of one experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    Normal,
    Ftt,
    FttFt,
    Sd,
    Esd(f64),
}

impl Method {
    pub fn ratio(self) -> Option<f64> {
        match self {
            Method::Esd(r) => Some(r),
            _ => None,
        }
    }

    /// Directory-safe name.
    pub fn dir_name(self) -> String {
        match self {
            Method::Esd(r) => format!("ESD_r{r}"),
            other => other.to_string(),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Method::Esd(r) if !(r >= 0.0) || r.is_infinite() => {
                Err(Error::InvalidArgument(format!("ESD ratio must be finite and nonnegative, got {r}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Normal => f.write_str("NORMAL"),
            Method::Ftt => f.write_str("FTT"),
            Method::FttFt => f.write_str("FTT_FT"),
            Method::Sd => f.write_str("SD"),
            Method::Esd(r) => write!(f, "ESD({r})"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let m = match t.as_str() {
            "NORMAL" => Method::Normal,
            "FTT" => Method::Ftt,
            "FTT_FT" => Method::FttFt,
            "SD" => Method::Sd,
            _ => {
                let r = t
                    .strip_prefix("ESD")
                    .map(|rest| rest.trim_start_matches(['(', ':', '=', '_', 'R']).trim_end_matches(')'))
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))?;
                Method::Esd(r)
            }
        };
        m.validate()?;
        Ok(m)
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Hyperparameters shared by every pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub distill: StageConfig,
    pub frozen: StageConfig,
    pub finetune: StageConfig,
    pub normal: StageConfig,
    pub distill_norm: DistillNorm,
    /// Square crop taken from target images before pooling.
    pub crop: usize,
    /// Max-pool factor applied last.
    pub pool: usize,
    /// Proximity resize target; derived from the image sizes when absent.
    pub proximity_resize: Option<(usize, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            distill: StageConfig::default_for(Stage::Distill),
            frozen: StageConfig::default_for(Stage::Frozen),
            finetune: StageConfig::default_for(Stage::Finetune),
            normal: StageConfig::default_for(Stage::Normal),
            distill_norm: DistillNorm::PerPosition,
            crop: 512,
            pool: 2,
            proximity_resize: None,
        }
    }
}

impl PipelineConfig {
    /// Proximity resize in effect for the given datasets.
    pub fn resolve_proximity_resize(&self, target: &DomainDataset, proximity: Option<&DomainDataset>) -> (usize, usize) {
        if let Some(size) = self.proximity_resize {
            return size;
        }
        let target_w = target.samples.first().map_or(self.crop, |s| s.image.width);
        match proximity.and_then(|p| p.samples.first()) {
            Some(s) => proximity_resize(s.image.height, s.image.width, self.crop, target_w),
            None => (self.crop, self.crop),
        }
    }

    pub fn augment(&self, target: &DomainDataset, proximity: Option<&DomainDataset>, seed: u64) -> Augment {
        Augment::new(self.crop, self.pool, self.resolve_proximity_resize(target, proximity), seed)
    }
}

/// Everything a pipeline reads.
pub struct PipelineInputs<'a, T> {
    /// Pretrained teacher; its extractor is the distillation target and the
    /// constructed teacher's backbone.
    pub teacher: &'a NetworkPartition<T>,
    pub student_head: &'a ArchitectureSpec,
    pub constructed_head: &'a ArchitectureSpec,
    pub target: &'a DomainDataset,
    pub proximity: Option<&'a DomainDataset>,
    pub seed: u64,
    /// Run directory receiving `stage*.ckpt` and `steps.csv`.
    pub out_dir: Option<&'a Path>,
    pub config_digest: String,
}

pub struct PipelineOutput<T> {
    pub stages: Vec<StageResult>,
    pub network: NetworkPartition<T>,
    pub checkpoints: Vec<PathBuf>,
}

/// Seed streams of one cell.
pub mod seeds {
    pub const STUDENT_INIT: u64 = 10;
    pub const MIX: u64 = 11;
    pub const AUGMENT: u64 = 12;
    pub const HEAD_INIT: u64 = 13;
}

struct Recorder<'a> {
    out_dir: Option<&'a Path>,
    method: Method,
    seed: u64,
    digest: String,
    step_offset: usize,
    checkpoints: Vec<PathBuf>,
}

impl Recorder<'_> {
    fn record<T: Scalar>(&mut self, index: usize, net: &NetworkPartition<T>, result: &StageResult) -> Result<()> {
        let Some(dir) = self.out_dir else {
            return Ok(());
        };
        let rows: Vec<StepRecord> = result
            .steps
            .iter()
            .map(|r| StepRecord { step: r.step + self.step_offset, ..*r })
            .collect();
        self.step_offset += result.steps.len();
        append_step_log(&dir.join("steps.csv"), &rows)?;
        let path = dir.join(format!("stage{index}_{}.ckpt", result.stage.as_str().to_ascii_lowercase()));
        let prov = Provenance {
            stage: result.stage.to_string(),
            seed: self.seed,
            config_digest: self.digest.clone(),
            method: self.method.to_string(),
        };
        Checkpoint::from_network(net, prov).save(&path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

/// Runs the stage sequence of `method`, checkpointing after every stage.
/// A failing stage aborts the pipeline; checkpoints already written stay.
pub fn run_pipeline<T: Scalar>(method: Method, inputs: &PipelineInputs<'_, T>, config: &PipelineConfig) -> Result<PipelineOutput<T>> {
    method.validate()?;
    if let Some(dir) = inputs.out_dir {
        let log = dir.join("steps.csv");
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    let augment = config.augment(inputs.target, inputs.proximity, derive_seed(inputs.seed, seeds::AUGMENT));
    let mut rec = Recorder {
        out_dir: inputs.out_dir,
        method,
        seed: inputs.seed,
        digest: inputs.config_digest.clone(),
        step_offset: 0,
        checkpoints: Vec::new(),
    };
    let teacher_fe = inputs.teacher.extractor_spec();
    let mut stages = Vec::new();
    let network = match method {
        Method::Normal => {
            let mut s = build_student::<T>(teacher_fe, inputs.student_head, derive_seed(inputs.seed, seeds::STUDENT_INIT))?;
            let r = run_normal_training(&mut s, inputs.target, &config.normal.optimizer, &config.normal.schedule, &augment.target)?;
            rec.record(1, &s, &r)?;
            stages.push(r);
            s
        }
        Method::Ftt | Method::FttFt => {
            let mut ct = build_constructed_teacher(inputs.teacher, inputs.constructed_head, derive_seed(inputs.seed, seeds::HEAD_INIT))?;
            let frozen = &config.frozen;
            let r = run_stage2(&mut ct, inputs.target, &frozen.optimizer, &frozen.schedule, &augment.target)?;
            rec.record(1, &ct, &r)?;
            stages.push(r);
            if method == Method::FttFt {
                let ft = &config.finetune;
                let r = run_stage3(&mut ct, inputs.target, &ft.optimizer, &ft.schedule, &augment.target)?;
                rec.record(2, &ct, &r)?;
                stages.push(r);
            }
            ct
        }
        Method::Sd | Method::Esd(_) => {
            let ratio = match method {
                Method::Esd(r) => MixRatio::Ratio(r),
                _ => MixRatio::SdOnly,
            };
            if ratio != MixRatio::SdOnly && inputs.proximity.is_none_or(DomainDataset::is_empty) && ratio.target_probability() < 1.0 {
                return Err(Error::Dataset(format!("{method} needs a proximity dataset")));
            }
            let mut teacher = inputs.teacher.clone();
            teacher.freeze_all();
            let mut s = build_student::<T>(teacher_fe, inputs.student_head, derive_seed(inputs.seed, seeds::STUDENT_INIT))?;
            let data = DistillData {
                target: inputs.target,
                proximity: inputs.proximity,
                mix: MixSpec::new(ratio, derive_seed(inputs.seed, seeds::MIX)),
                augment: &augment,
                norm: config.distill_norm,
            };
            let r = run_stage1(&mut teacher, &mut s, &data, &config.distill.optimizer, &config.distill.schedule)?;
            rec.record(1, &s, &r)?;
            stages.push(r);
            let r = run_stage2(&mut s, inputs.target, &config.frozen.optimizer, &config.frozen.schedule, &augment.target)?;
            rec.record(2, &s, &r)?;
            stages.push(r);
            let r = run_stage3(&mut s, inputs.target, &config.finetune.optimizer, &config.finetune.schedule, &augment.target)?;
            rec.record(3, &s, &r)?;
            stages.push(r);
            s
        }
    };
    Ok(PipelineOutput { stages, network, checkpoints: rec.checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, data: &[u8]) -> Mask {
        Mask::from_vec(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let l = segmentation_loss(&logits, &[mask(2, 2, &[0, 1, 1, 0])]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let m = mask(1, 3, &[0, 1, 0]);
        let logits = Tensor::<f64>::from_fn([1, 2, 1, 3], |[_, c, _, x]| if c as u8 == m.get(0, x) { 40.0 } else { -40.0 });
        assert!(segmentation_loss(&logits, &[m]).unwrap() < 1e-30);
    }

    #[test]
    fn ignore_and_range_errors() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 2]);
        assert!(segmentation_loss(&logits, &[mask(1, 2, &[IGNORE_LABEL, IGNORE_LABEL])]).is_err());
        assert!(segmentation_loss(&logits, &[mask(1, 2, &[0, 2])]).is_err());
        assert!(segmentation_loss(&logits, &[mask(1, 3, &[0, 1, 0])]).is_err());
        // ignored pixels are dropped from the average
        let mut l = Tensor::<f64>::zeros([1, 2, 1, 2]);
        l.data_mut()[1] = 100.0; // class 0 logit at pixel 1
        let v = segmentation_loss(&l, &[mask(1, 2, &[1, IGNORE_LABEL])]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::from_fn([2, 3, 2, 2], |_| rng.random_range(-2.0..2.0));
        let masks = vec![mask(2, 2, &[0, 1, 2, IGNORE_LABEL]), mask(2, 2, &[2, 2, 1, 0])];
        let (_, g) = segmentation_loss_grad(&logits, &masks).unwrap();
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = logits.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (segmentation_loss(&p, &masks).unwrap() - segmentation_loss(&m, &masks).unwrap()) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn convergence_rule() {
        let mut c = Convergence::new(2, 0.01);
        assert!(!c.push(1.0));
        assert!(!c.push(0.9));
        assert!(!c.push(0.8));
        assert!(!c.push(0.7));
        assert!(c.push(0.7) || c.push(0.7));
        let mut flat = Convergence::new(1, 0.01);
        flat.push(1.0);
        assert!(flat.push(0.999));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Normal, Method::Ftt, Method::FttFt, Method::Sd, Method::Esd(0.5), Method::Esd(10.0)] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!("esd:0.2".parse::<Method>().unwrap(), Method::Esd(0.2));
        assert_eq!(Method::Esd(0.5).dir_name(), "ESD_r0.5");
        assert!("ESD(-1)".parse::<Method>().is_err());
        assert!("KD".parse::<Method>().is_err());
    }

    #[test]
    fn step_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("steps.csv");
        let r = StepRecord { step: 0, loss: 1.5, n_target: 3, n_proximity: 5, lr: 0.01 };
        append_step_log(&p, &[r]).unwrap();
        append_step_log(&p, &[StepRecord { step: 1, ..r }]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "step,loss,n_target,n_proximity,lr\n0,1.5,3,5,0.01\n1,1.5,3,5,0.01\n");
    }

    proptest! {
        #[test]
        fn matches_per_pixel_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::<f64>::from_fn([1, 2, 4, 4], |_| rng.random_range(-3.0..3.0));
            let m = Mask::from_vec(4, 4, (0..16).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let mut expected = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    let z0 = logits.at([0, 0, y, x]);
                    let z1 = logits.at([0, 1, y, x]);
                    let p = [z0.exp() / (z0.exp() + z1.exp()), z1.exp() / (z0.exp() + z1.exp())];
                    expected -= p[m.get(y, x) as usize].ln();
                }
            }
            expected /= 16.0;
            let got = segmentation_loss(&logits, &[m]).unwrap();
            prop_assert!((got - expected).abs() <= 1e-6 * expected.abs());
        }
    }
}
