use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use esd_core::data::{make_synthetic_domains, make_synthetic_validation, write_dataset, ClassMap, Domain, PreprocessSpec};
use esd_core::harness::{
    collect_records, emit_report, emit_table, obtain_teacher, resolve_data, run_cell, run_matrix, DataSpec,
    ExperimentSpec,
};
use esd_core::metrics::evaluate_model;
use esd_core::model::{profile_specs, Checkpoint};
use esd_core::train::Method;

#[derive(Parser, Debug)]
#[command(name = "esd", version, about = "Feature distillation for compact segmentation networks")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set pipeline.crop=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one (method, seed) cell.
    Train {
        #[arg(long)]
        method: Method,
    },
    /// Run every configured method and seed, then write tables and plots.
    Matrix,
    /// Evaluate a checkpoint on a labelled dataset directory; prints report JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        /// Max-pool factor applied to each image before inference.
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        exclude_background: bool,
    },
    /// Print parameter and FLOP counts of an architecture.
    Profile {
        #[arg(long, value_enum)]
        arch: Arch,
        /// Input height; width equals height unless given.
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long)]
        width: Option<usize>,
        /// Width multiplier. Defaults to 1 without `--config`.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic domains as image/label directories.
    Synth,
    /// Rebuild records.csv, tables and plots from an existing run directory.
    Report,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Arch {
    Student,
    Teacher,
    ConstructedTeacher,
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path, &cli.overrides)
            .with_context(|| format!("invalid config {}", path.display()))?,
        None => {
            let text = ExperimentSpec::default().to_toml()?;
            ExperimentSpec::from_toml_with_overrides(&text, &cli.overrides).context("invalid override")?
        }
    };
    if let Some(out) = &cli.out {
        spec.output_dir = out.clone();
    }
    spec.validate().context("invalid config")?;
    Ok(spec)
}

fn train(cli: &Cli, method: Method) -> Result<()> {
    let mut spec = load_spec(cli)?;
    let seed = cli.seed.unwrap_or(spec.seeds[0]);
    if !spec.methods.contains(&method) {
        spec.methods.push(method);
    }
    let out = spec.output_dir.clone();
    let domains = resolve_data(&spec)?;
    let teacher = obtain_teacher::<f32>(&spec, &domains, &out)?;
    let record = run_cell(&spec, method, seed, &teacher, &domains, &out)?;
    println!(
        "{method} seed {seed}: mIOU {:.4} var {:.5} HP-Acc {:.4} ({:.1}s) -> {}",
        record.report.miou,
        record.report.var,
        record.report.hp_acc,
        record.wall_clock_s,
        out.join(&record.artifacts.run_dir).display()
    );
    Ok(())
}

fn matrix(cli: &Cli) -> Result<bool> {
    let mut spec = load_spec(cli)?;
    if let Some(seed) = cli.seed {
        spec.seeds = vec![seed];
    }
    let out = spec.output_dir.clone();
    let outcome = run_matrix(&spec, &out)?;
    println!(
        "{} cells: {} trained, {} reused, {} failed",
        outcome.records.len() + outcome.failures.len(),
        outcome.trained,
        outcome.skipped,
        outcome.failures.len()
    );
    if !outcome.records.is_empty() {
        let tables = emit_table(&outcome.records)?;
        println!("\n{}\n{}", tables.compute_text(), tables.robustness_text());
    }
    for f in &outcome.failures {
        eprintln!("failed: {} seed {}: {}", f.method, f.seed, f.error);
    }
    Ok(outcome.failures.is_empty())
}

fn evaluate(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    theta: Option<f64>,
    pool: Option<usize>,
    exclude_background: bool,
) -> Result<()> {
    let spec = if cli.config.is_some() { Some(load_spec(cli)?) } else { None };
    let ckpt = Checkpoint::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut net = ckpt.to_network()?;
    let dataset = esd_core::data::load_dataset(data, Domain::Target, net.n_classes(), ClassMap::default())?;
    dataset.require_labels()?;
    let theta = theta.or(spec.as_ref().map(|s| s.theta)).unwrap_or(esd_core::metrics::DEFAULT_THETA);
    let pool = pool.or(spec.as_ref().map(|s| s.eval_pool)).unwrap_or(1);
    let include_background = !exclude_background && spec.as_ref().is_none_or(|s| s.include_background);
    let report = evaluate_model(&mut net, &dataset, &PreprocessSpec::eval(pool), theta, include_background)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn profile(cli: &Cli, arch: Arch, resolution: usize, width: Option<usize>, scale: Option<f64>, json: bool) -> Result<()> {
    let mut cfg = if cli.config.is_some() {
        load_spec(cli)?.architecture
    } else {
        let mut a = ExperimentSpec::default().architecture;
        a.scale = 1.0;
        a
    };
    if let Some(s) = scale {
        cfg.scale = s;
    }
    let teacher_fe = cfg.teacher_extractor();
    let (fe, head) = match arch {
        Arch::Teacher => (teacher_fe, cfg.teacher_head()),
        Arch::ConstructedTeacher => (teacher_fe, cfg.student_head()),
        Arch::Student => (teacher_fe.with_group_rule(cfg.student_rule), cfg.student_head()),
    };
    let size = (resolution, width.unwrap_or(resolution));
    let p = profile_specs(&[("EXTRACTOR", &fe), ("HEAD", &head)], size)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&p)?);
    } else {
        println!("arch: {arch:?} (scale {})", cfg.scale);
        println!("input: {}x{}", size.0, size.1);
        println!("params: {} ({:.2}M)", p.param_count, p.params_millions());
        println!("flops: {} ({:.2} GFLOPs)", p.flops, p.gflops());
    }
    Ok(())
}

fn synth(cli: &Cli) -> Result<()> {
    let spec = load_spec(cli)?;
    let DataSpec::Synthetic(mut cfg) = spec.data else {
        bail!("synth needs a synthetic data config");
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| spec.output_dir.join("synthetic"));
    let (source, target, proximity) = make_synthetic_domains(&cfg)?;
    let validation = make_synthetic_validation(&cfg)?;
    for (name, ds) in [("source", &source), ("target", &target), ("proximity", &proximity), ("validation", &validation)] {
        let dir = out.join(name);
        write_dataset(ds, &dir).with_context(|| format!("writing {}", dir.display()))?;
        println!("{name}: {} images -> {}", ds.len(), dir.display());
    }
    Ok(())
}

fn report(cli: &Cli) -> Result<()> {
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => load_spec(cli)?.output_dir,
    };
    let records = collect_records(&out)?;
    if records.is_empty() {
        bail!("no report.json files under {}", out.display());
    }
    emit_report(&records, &out)?;
    let tables = emit_table(&records)?;
    println!("{}\n{}", tables.compute_text(), tables.robustness_text());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { method } => train(cli, *method)?,
        Command::Matrix => return matrix(cli),
        Command::Evaluate { checkpoint, data, theta, pool, exclude_background } => {
            evaluate(cli, checkpoint, data, *theta, *pool, *exclude_background)?
        }
        Command::Profile { arch, resolution, width, scale, json } => profile(cli, *arch, *resolution, *width, *scale, *json)?,
        Command::Synth => synth(cli)?,
        Command::Report => report(cli)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
