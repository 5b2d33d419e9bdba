//! Runs the method x seed matrix and persists one record per cell.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::spec::{DataSpec, ExperimentSpec};
use super::{plot, table};
use crate::data::{load_dataset, make_synthetic_domains, make_synthetic_validation, Domain, DomainDataset, PreprocessSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvaluationReport};
use crate::model::{Checkpoint, NetworkPartition, Provenance};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::train::{pretrain_teacher, run_pipeline, seeds, Method, PipelineInputs, StageResult};

/// Every dataset a matrix needs.
pub struct Domains {
    pub source: Option<DomainDataset>,
    pub target: DomainDataset,
    pub proximity: Option<DomainDataset>,
    pub validation: DomainDataset,
}

pub fn resolve_data(spec: &ExperimentSpec) -> Result<Domains> {
    match &spec.data {
        DataSpec::Synthetic(cfg) => {
            let (source, target, proximity) = make_synthetic_domains(cfg)?;
            Ok(Domains {
                source: Some(source),
                target,
                proximity: Some(proximity),
                validation: make_synthetic_validation(cfg)?,
            })
        }
        DataSpec::Directory { target, validation, proximity, source, class_map } => {
            let n = spec.architecture.n_classes;
            let load = |p: &PathBuf, d: Domain| load_dataset(p, d, n, class_map.clone());
            let target_ds = load(target, Domain::Target)?;
            let mut val = load(validation, Domain::Target)?;
            val.require_labels()?;
            if val.is_empty() {
                return Err(Error::Dataset(format!("no validation images under {}", validation.display())));
            }
            for s in &mut val.samples {
                s.id = format!("val_{}", s.id);
            }
            Ok(Domains {
                source: source.as_ref().map(|p| load(p, Domain::Source)).transpose()?,
                target: target_ds,
                proximity: proximity.as_ref().map(|p| load(p, Domain::Proximity)).transpose()?,
                validation: val,
            })
        }
    }
}

/// Loads the configured teacher checkpoint, reuses a cached pretrained
/// teacher whose digest matches, or pretrains one on the source domain.
pub fn obtain_teacher<T: Scalar>(spec: &ExperimentSpec, domains: &Domains, out: &Path) -> Result<NetworkPartition<T>> {
    if let Some(path) = &spec.teacher.checkpoint {
        let mut net = Checkpoint::<T>::load(path)?.to_network()?;
        net.freeze_all();
        return Ok(net);
    }
    let digest = spec.teacher_digest();
    let cache = out.join("teacher").join("teacher.ckpt");
    if cache.exists() {
        let ckpt = Checkpoint::<T>::load(&cache)?;
        if ckpt.provenance.config_digest == digest {
            log::info!("reusing pretrained teacher {}", cache.display());
            let mut net = ckpt.to_network()?;
            net.freeze_all();
            return Ok(net);
        }
    }
    let source = domains
        .source
        .as_ref()
        .ok_or_else(|| Error::Config("no teacher checkpoint and no source domain to pretrain on".into()))?;
    let arch = &spec.architecture;
    let augment = PreprocessSpec::target(spec.pipeline.crop, spec.pipeline.pool, derive_seed(spec.teacher.seed, seeds::AUGMENT));
    log::info!("pretraining teacher on {} source images", source.len());
    let (net, result) = pretrain_teacher::<T>(
        &arch.teacher_extractor(),
        &arch.teacher_head(),
        source,
        &spec.teacher.pretrain,
        &augment,
        spec.teacher.seed,
    )?;
    log::info!("teacher pretraining: {} epochs, final loss {:?}", result.epochs_run, result.final_loss);
    let prov = Provenance {
        stage: "PRETRAIN".into(),
        seed: spec.teacher.seed,
        config_digest: digest,
        method: "TEACHER".into(),
    };
    Checkpoint::from_network(&net, prov).save(&cache)?;
    Ok(net)
}

/// Files of one cell, relative to the matrix output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub run_dir: PathBuf,
    pub config_echo: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub steps_csv: PathBuf,
    pub report_json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Digest of this cell: spec digest plus method and seed.
    pub digest: String,
    pub spec_digest: String,
    pub method: Method,
    pub r: Option<f64>,
    pub seed: u64,
    pub stages: Vec<StageResult>,
    pub report: EvaluationReport,
    pub proximity_resize: (usize, usize),
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_clock_s: f64,
    pub artifacts: Artifacts,
}

impl RunRecord {
    pub fn gflops(&self) -> f64 {
        self.report.profile.as_ref().map_or(f64::NAN, |p| p.gflops())
    }

    pub fn params_millions(&self) -> f64 {
        self.report.profile.as_ref().map_or(f64::NAN, |p| p.params_millions())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const RECORDS_HEADER: &str =
    "method,r,seed,miou,var,hp_acc,gflops,params,theta,include_background,n_images,started_unix,finished_unix,wall_clock_s,digest";

/// One flat CSV row per record.
pub fn records_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let p = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{}\n",
            r.method,
            r.r.map_or(String::new(), |v| v.to_string()),
            r.seed,
            p.miou,
            p.var,
            p.hp_acc,
            r.gflops(),
            p.profile.as_ref().map_or(0, |pr| pr.param_count),
            p.theta,
            p.include_background,
            p.n_images,
            r.started_unix,
            r.finished_unix,
            r.wall_clock_s,
            r.digest
        ));
    }
    out
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn cell_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.dir_name()).join(seed.to_string())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains and evaluates one cell, writing its run directory.
pub fn run_cell<T: Scalar>(
    spec: &ExperimentSpec,
    method: Method,
    seed: u64,
    teacher: &NetworkPartition<T>,
    domains: &Domains,
    out: &Path,
) -> Result<RunRecord> {
    let started = Instant::now();
    let started_unix = unix_now();
    let dir = cell_dir(out, method, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |p: &Path| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let echo = dir.join("config.echo");
    write(&echo, &spec.to_toml()?)?;
    let arch = &spec.architecture;
    let head = arch.student_head();
    let digest = spec.cell_digest(method, seed);
    let inputs = PipelineInputs {
        teacher,
        student_head: &head,
        constructed_head: &head,
        target: &domains.target,
        proximity: domains.proximity.as_ref(),
        seed,
        out_dir: Some(&dir),
        config_digest: digest.clone(),
    };
    let mut output = run_pipeline(method, &inputs, &spec.pipeline)?;
    let report = evaluate_model(
        &mut output.network,
        &domains.validation,
        &PreprocessSpec::eval(spec.eval_pool),
        spec.theta,
        spec.include_background,
    )?;
    let report_json = dir.join("report.json");
    let record = RunRecord {
        digest,
        spec_digest: spec.digest(),
        method,
        r: method.ratio(),
        seed,
        stages: output.stages,
        report,
        proximity_resize: spec.pipeline.resolve_proximity_resize(&domains.target, domains.proximity.as_ref()),
        started_unix,
        finished_unix: unix_now(),
        wall_clock_s: started.elapsed().as_secs_f64(),
        artifacts: Artifacts {
            run_dir: rel(&dir),
            config_echo: rel(&echo),
            checkpoints: output.checkpoints.iter().map(|p| rel(p)).collect(),
            steps_csv: rel(&dir.join("steps.csv")),
            report_json: rel(&report_json),
        },
    };
    write(&report_json, &serde_json::to_string_pretty(&record)?)?;
    let stale = dir.join("error.txt");
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub method: Method,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
    /// Cells whose existing record matched their digest.
    pub skipped: usize,
    pub trained: usize,
}

fn completed_record(out: &Path, spec: &ExperimentSpec, method: Method, seed: u64) -> Option<RunRecord> {
    let path = cell_dir(out, method, seed).join("report.json");
    let rec = RunRecord::load(&path).ok()?;
    (rec.digest == spec.cell_digest(method, seed)).then_some(rec)
}

/// Executes every `(method, seed)` cell not already completed under `out`,
/// then writes `records.csv`, `tables/` and `plots/`. A failing cell is
/// logged and recorded in `error.txt`; the other cells still run.
pub fn run_matrix(spec: &ExperimentSpec, out: &Path) -> Result<MatrixOutcome> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.echo"), &spec.to_toml()?)?;
    let mut outcome = MatrixOutcome::default();
    let mut pending = Vec::new();
    for &method in &spec.methods {
        for &seed in &spec.seeds {
            match completed_record(out, spec, method, seed) {
                Some(rec) => {
                    log::info!("{method} seed {seed}: already complete, skipping");
                    outcome.skipped += 1;
                    outcome.records.push(rec);
                }
                None => pending.push((method, seed)),
            }
        }
    }
    if !pending.is_empty() {
        let domains = resolve_data(spec)?;
        let teacher = obtain_teacher::<f32>(spec, &domains, out)?;
        for (method, seed) in pending {
            log::info!("{method} seed {seed}: training");
            match run_cell(spec, method, seed, &teacher, &domains, out) {
                Ok(rec) => {
                    log::info!("{method} seed {seed}: mIOU {:.4}, HP-Acc {:.3}", rec.report.miou, rec.report.hp_acc);
                    outcome.trained += 1;
                    outcome.records.push(rec);
                }
                Err(e) => {
                    log::warn!("{method} seed {seed} failed: {e}");
                    let _ = write(&cell_dir(out, method, seed).join("error.txt"), &format!("{e}\n"));
                    outcome.failures.push(CellFailure { method, seed, error: e.to_string() });
                }
            }
        }
    }
    table::sort_records(&mut outcome.records);
    emit_report(&outcome.records, out)?;
    Ok(outcome)
}

/// Writes `records.csv`, `tables/` and `plots/` for a set of records.
pub fn emit_report(records: &[RunRecord], out: &Path) -> Result<()> {
    write(&out.join("records.csv"), &records_csv(records))?;
    if records.is_empty() {
        log::warn!("no records; tables and plots skipped");
        return Ok(());
    }
    let tables = table::emit_table(records)?;
    tables.write(&out.join("tables"))?;
    plot::emit_plots(records, &out.join("plots"))?;
    Ok(())
}

/// Collects every `report.json` under `out`.
pub fn collect_records(out: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let Ok(methods) = fs::read_dir(out) else {
        return Err(Error::Config(format!("{} is not a run directory", out.display())));
    };
    for m in methods.flatten() {
        let Ok(seeds) = fs::read_dir(m.path()) else { continue };
        for s in seeds.flatten() {
            let p = s.path().join("report.json");
            if p.is_file() {
                records.push(RunRecord::load(&p)?);
            }
        }
    }
    table::sort_records(&mut records);
    Ok(records)
}
