//! The `flowsr` command line.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and file errors, 2
//! for numeric failures (non-finite values, stiffness, oracle disagreement,
//! aborted training, failed checks). Every command that writes a file also
//! writes `<file>.manifest` with the resolved configuration, seeds and the
//! SHA-256 of every input and output.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_container, Container, SAMPLES};
use crate::checks::{run_suite, Suite};
use crate::config::{take_data, take_distill, take_flow, write_data, write_distill, write_flow, ConfigDoc, RunConfig};
use crate::distill::{distill_train, student_one_step, write_distill_trace_csv};
use crate::error::{Error, Result};
use crate::eval::{emit_report, score_estimates, sweep_estimates, write_pgm_grid, SweepMode, SweepResult, SweepSetup};
use crate::flow::{condition_batch, train_teacher, write_trace_csv, FlowConfig, FlowCoupling, TensorPool};
use crate::model::VelocityModel;
use crate::random::seeded;
use crate::solvers::{solve, straightness, NfeStats, SolverKind, SolverSpec};
use crate::tensor::Tensor;

/// Environment variable holding the `env_logger` filter.
pub const LOG_ENV: &str = "FLOWSR_LOG";

#[derive(Parser, Debug)]
#[command(name = "flowsr", version, about = "Conditional flow super-resolution with one-step distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a flow teacher from a run config.
    TrainTeacher(ConfigArg),
    /// Distill a one-step student from a run config.
    Distill(ConfigArg),
    /// Draw samples from a teacher (ODE solve) or a student (one step).
    Sample(SampleArgs),
    /// Sweep the fidelity/realism time and report PSNR and the perceptual proxy.
    Sweep(SweepArgs),
    /// Estimate the straightness of a model's flow.
    Straightness(StraightnessArgs),
    /// Run a self-test battery.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Config with a [data] section and optionally [run] output; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// toy2d-gmm or tiny-textures.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Texture side length.
    #[arg(long)]
    side: Option<usize>,
    /// SR scale the texture side must be divisible by.
    #[arg(long)]
    scale: Option<usize>,
    /// Mixture components (toy2d).
    #[arg(long)]
    components: Option<usize>,
    /// Blobs per texture.
    #[arg(long)]
    blobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    /// euler, midpoint, heun, ralston or rk45.
    #[arg(long, default_value = "rk45")]
    solver: String,
    /// RK45 absolute and relative tolerance.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Steps of the fixed-step solvers.
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

impl SolverArgs {
    fn spec(&self) -> Result<SolverSpec> {
        let kind = SolverKind::parse(&self.solver).map_err(|e| Error::Usage(e.to_string()))?;
        let spec = match kind {
            SolverKind::Rk45 => SolverSpec::rk45(self.tol),
            k => SolverSpec::fixed(k, self.steps),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn record(&self, doc: &mut ConfigDoc, section: &str) {
        doc.set(section, "solver", &self.solver);
        doc.set(section, "tol", self.tol);
        doc.set(section, "steps", self.steps);
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Ground-truth dataset the conditions are built from.
    #[arg(long)]
    data: PathBuf,
    /// Use the first `count` samples (default: all).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Keep every `stride`-th solver step as a trajectory record (0: endpoints only).
    #[arg(long, default_value_t = 0)]
    stride: usize,
    /// Student time dial.
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// student or teacher (default: from the checkpoint).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    t_grid: String,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional PGM strip of (LR, estimate per t, ground truth).
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pgm_rows: usize,
}

#[derive(Args, Debug)]
struct StraightnessArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Quadrature times.
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Couplings.
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional result file (gets a manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// grad, adjoint, solver-order or oracle (default: all).
    #[arg(long)]
    suite: Option<String>,
}

/// Exit code of a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Stiffness { .. } | Error::Oracle(_) | Error::TrainingAborted { .. } => 2,
        _ => 1,
    }
}

/// Installs the logger; the filter comes from [`LOG_ENV`] (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::default().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand) {
                let mut cmd = Cli::command();
                let sub = argv.get(1).and_then(|a| a.to_str()).map(str::to_owned);
                let help = match sub.as_deref().and_then(|s| cmd.find_subcommand_mut(s)) {
                    Some(c) => c.render_help(),
                    None => cmd.render_help(),
                };
                let _ = writeln!(std::io::stderr(), "\n{help}");
            }
            return 1;
        }
    };
    match dispatch(cli.command, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, argv: &[OsString]) -> Result<i32> {
    let name = argv.get(1).map(|a| a.to_string_lossy().into_owned()).unwrap_or_default();
    let mut manifest = Manifest::new(&name, argv);
    match command {
        Command::GenData(a) => gen_data(a, &mut manifest),
        Command::TrainTeacher(a) => train(a, &mut manifest),
        Command::Distill(a) => distill(a, &mut manifest),
        Command::Sample(a) => sample(a, &mut manifest),
        Command::Sweep(a) => sweep(a, &mut manifest),
        Command::Straightness(a) => straight(a, &mut manifest),
        Command::Check(a) => check(a),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Reproduction record written next to an output.
struct Manifest {
    doc: ConfigDoc,
}

impl Manifest {
    fn new(command: &str, argv: &[OsString]) -> Self {
        let mut doc = ConfigDoc::new();
        doc.set("manifest", "command", command);
        let line: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        doc.set("manifest", "argv", line.join(" "));
        doc.set("manifest", "version", env!("CARGO_PKG_VERSION"));
        Self { doc }
    }

    fn config(&mut self, c: &ConfigDoc) {
        self.doc.merge(c);
    }

    fn file(&mut self, kind: &str, role: &str, path: &Path) -> Result<()> {
        let sec = format!("{kind}.{role}");
        self.doc.set(&sec, "path", path.display());
        self.doc.set(&sec, "sha256", sha256_file(path)?);
        Ok(())
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.file("input", role, path)
    }

    fn artifact(&mut self, role: &str, path: &Path) -> Result<()> {
        self.file("artifact", role, path)
    }

    fn write(&self, output: &Path) -> Result<PathBuf> {
        let path = suffixed(output, ".manifest");
        std::fs::write(&path, self.doc.to_text())?;
        Ok(path)
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(a: GenDataArgs, m: &mut Manifest) -> Result<i32> {
    let mut doc = ConfigDoc::new();
    let mut out = a.out.clone();
    if let Some(path) = &a.config {
        doc = ConfigDoc::parse(&std::fs::read_to_string(path)?)?;
        m.input("config", path)?;
        if let Some(o) = doc.take("run", "output") {
            let base = path.parent().unwrap_or(Path::new("."));
            let o = PathBuf::from(o);
            out = out.or(Some(if o.is_absolute() { o } else { base.join(o) }));
        }
    }
    let flags: [(&str, Option<String>); 7] = [
        ("kind", a.kind.clone()),
        ("count", a.count.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("side", a.side.map(|v| v.to_string())),
        ("scale", a.scale.map(|v| v.to_string())),
        ("components", a.components.map(|v| v.to_string())),
        ("blobs", a.blobs.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            doc.take("data", k);
            doc.set("data", k, v);
        }
    }
    if doc.get("data", "kind").is_none() {
        return Err(Error::Usage("gen-data needs --kind or a config with [data] kind".into()));
    }
    let out = out.ok_or_else(|| Error::Usage("gen-data needs --out or [run] output".into()))?;
    let spec = take_data(&mut doc)?;
    doc.finish()?;
    let samples = spec.generate()?;
    let mut meta = ConfigDoc::new();
    write_data(&mut meta, &spec);
    save_dataset(&out, &meta, &samples)?;
    m.config(&meta);
    m.artifact("dataset", &out)?;
    m.write(&out)?;
    println!("wrote {} samples of shape {:?} to {}", spec.count, spec.sample_shape(), out.display());
    Ok(0)
}

fn load_dataset_checked(path: &Path, model: Option<&VelocityModel>) -> Result<Tensor> {
    let (x, _) = load_dataset(path)?;
    if let Some(model) = model {
        let want = model.arch().sample_shape();
        if x.shape()[1..] != want {
            return Err(Error::Dimension(format!(
                "dataset samples {:?} do not match model sample shape {want:?}",
                &x.shape()[1..]
            )));
        }
    }
    Ok(x)
}

fn train(a: ConfigArg, m: &mut Manifest) -> Result<i32> {
    let RunConfig::Teacher { data, output, arch, flow } = RunConfig::load(&a.config)? else {
        return Err(Error::Config("train-teacher needs [run] stage = teacher".into()));
    };
    m.config(&ConfigDoc::parse(&std::fs::read_to_string(&a.config)?)?);
    m.input("config", &a.config)?;
    m.input("data", &data)?;
    let x = load_dataset_checked(&data, None)?;
    let shape = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let spec = arch.build(shape, flow.degradation.is_some())?;
    let model = VelocityModel::init(spec, arch.init_seed)?;
    log::info!("training teacher: {} parameters, {} iterations", model.params().numel(), flow.iterations);
    let mut pool = TensorPool::new(x)?;
    let run = train_teacher(model, &mut pool, &flow)?;
    let mut extra = ConfigDoc::new();
    write_flow(&mut extra, &flow);
    save_checkpoint(&run.model, &extra, &output)?;
    let trace = suffixed(&output, ".trace.csv");
    write_trace_csv(&trace, &run.trace)?;
    m.config(&extra);
    m.artifact("checkpoint", &output)?;
    m.artifact("trace", &trace)?;
    m.write(&output)?;
    if let Some(e) = run.aborted {
        return Err(e);
    }
    let last = run.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("teacher saved to {} (final loss {last:.6})", output.display());
    Ok(0)
}

fn distill(a: ConfigArg, m: &mut Manifest) -> Result<i32> {
    let RunConfig::Distill { data, output, teacher, distill } = RunConfig::load(&a.config)? else {
        return Err(Error::Config("distill needs [run] stage = distill".into()));
    };
    m.config(&ConfigDoc::parse(&std::fs::read_to_string(&a.config)?)?);
    m.input("config", &a.config)?;
    m.input("data", &data)?;
    m.input("teacher", &teacher)?;
    let loaded = load_model(&teacher)?;
    let mut tmodel = loaded.model;
    tmodel.freeze();
    let mut ddoc = distill.clone();
    let cfg = take_distill(&mut ddoc, &loaded.flow)?;
    ddoc.finish()?;
    let x = load_dataset_checked(&data, Some(&tmodel))?;
    log::info!("distilling ({} loss, {} slope), {} iterations", cfg.variant, cfg.slope, cfg.iterations);
    let mut pool = TensorPool::new(x)?;
    let run = distill_train(&tmodel, &mut pool, &cfg)?;
    let mut extra = ConfigDoc::new();
    write_flow(&mut extra, &loaded.flow);
    write_distill(&mut extra, &cfg);
    save_checkpoint(&run.student, &extra, &output)?;
    let trace = suffixed(&output, ".trace.csv");
    write_distill_trace_csv(&trace, &run.trace)?;
    m.config(&extra);
    m.artifact("checkpoint", &output)?;
    m.artifact("trace", &trace)?;
    m.write(&output)?;
    if let Some(e) = run.aborted {
        return Err(e);
    }
    let last = run.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("student saved to {} (final loss {last:.6})", output.display());
    Ok(0)
}

struct LoadedModel {
    model: VelocityModel,
    flow: FlowConfig,
    student: bool,
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let (model, mut doc) = load_checkpoint(path)?;
    if !doc.has_section("flow") {
        return Err(Error::Format(format!("{} has no [flow] settings", path.display())));
    }
    let flow = take_flow(&mut doc)?;
    Ok(LoadedModel { model, flow, student: doc.has_section("distill") })
}

fn first(x: Tensor, count: Option<usize>) -> Result<Tensor> {
    match count {
        None => Ok(x),
        Some(0) => Err(Error::Usage("count must be >= 1".into())),
        Some(n) if n > x.batch() => Err(Error::Usage(format!("count {n} exceeds the {} samples available", x.batch()))),
        Some(n) => Ok(x.gather(&(0..n).collect::<Vec<_>>())),
    }
}

fn sample(a: SampleArgs, m: &mut Manifest) -> Result<i32> {
    let loaded = load_model(&a.model)?;
    let x1 = first(load_dataset_checked(&a.data, Some(&loaded.model))?, a.count)?;
    m.input("model", &a.model)?;
    m.input("data", &a.data)?;
    let n = x1.batch();
    let c = condition_batch(&x1, loaded.flow.degradation.as_ref(), loaded.flow.sigma_p, &mut seeded(a.seed))?;
    let mut records = vec![];
    let mut cfg = ConfigDoc::new();
    let s = "sample";
    cfg.set(s, "seed", a.seed);
    cfg.set(s, "count", n);
    cfg.set(s, "stride", a.stride);
    let (x, nfes) = if loaded.student {
        if !(0.0..=1.0).contains(&a.t) {
            return Err(Error::Range(format!("t = {} outside [0, 1]", a.t)));
        }
        cfg.set(s, "mode", "student");
        cfg.set(s, "t", a.t);
        (student_one_step(&loaded.model, &c.x0, &c.cond, a.t)?, vec![1; n])
    } else {
        let mut spec = a.solver.spec()?;
        spec.record_stride = a.stride.max(1);
        cfg.set(s, "mode", "teacher");
        a.solver.record(&mut cfg, s);
        let mut outs = Vec::with_capacity(n);
        let mut nfes = Vec::with_capacity(n);
        for i in 0..n {
            let o = solve(&loaded.model, &c.x0.select(i), &c.cond.select(i), (0.0, 1.0), &spec)?;
            if a.stride > 0 {
                let times = o.trajectory.points.iter().map(|(t, _)| *t).collect::<Vec<_>>();
                let states = o.trajectory.points.iter().map(|(_, x)| x.clone()).collect::<Vec<_>>();
                records.push((format!("trajectory.{i:05}"), Tensor::stack(&states)?));
                records.push((format!("trajectory_t.{i:05}"), Tensor::new(vec![times.len()], times)?));
            }
            outs.push(o.x);
            nfes.push(o.nfe);
        }
        (Tensor::stack(&outs)?, nfes)
    };
    let mut container_cfg = cfg.clone();
    container_cfg.set(s, "model", a.model.display());
    container_cfg.set(s, "data", a.data.display());
    let mut params = vec![(SAMPLES.to_string(), x), ("x0".to_string(), c.x0)];
    if c.cond.numel() > 0 {
        params.push(("condition".to_string(), c.cond));
    }
    params.extend(records);
    write_container(&a.out, &Container { config: container_cfg.to_text(), params, ema: Vec::new() })?;
    let stats = NfeStats::from_counts(&nfes);
    cfg.set(s, "nfe_mean", stats.mean);
    cfg.set(s, "nfe_max", stats.max);
    m.config(&cfg);
    m.artifact("samples", &a.out)?;
    m.write(&a.out)?;
    println!("nfe_mean={:.4} nfe_max={} n={n} out={}", stats.mean, stats.max, a.out.display());
    Ok(0)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Usage(format!("invalid t grid {s:?}"))))
        .collect()
}

fn sweep(a: SweepArgs, m: &mut Manifest) -> Result<i32> {
    let loaded = load_model(&a.model)?;
    let x1 = first(load_dataset_checked(&a.data, Some(&loaded.model))?, a.count)?;
    m.input("model", &a.model)?;
    m.input("data", &a.data)?;
    let grid = parse_grid(&a.t_grid)?;
    let student = match a.mode.as_deref() {
        None => loaded.student,
        Some("student") => true,
        Some("teacher") => false,
        Some(other) => return Err(Error::Usage(format!("mode must be student or teacher, got {other:?}"))),
    };
    let mode = if student { SweepMode::Student } else { SweepMode::Teacher(a.solver.spec()?) };
    let setup = SweepSetup { sigma_p: loaded.flow.sigma_p, degradation: loaded.flow.degradation, seed: a.seed };
    let est = sweep_estimates(&loaded.model, mode, &x1, &grid, &setup)?;
    let result = SweepResult {
        model_id: sha256_file(&a.model)?,
        dataset_id: sha256_file(&a.data)?,
        rows: score_estimates(&est, &x1, &grid)?,
    };
    emit_report(&result, &a.out)?;
    m.artifact("report", &a.out)?;
    if let Some(pgm) = &a.pgm {
        let c = condition_batch(&x1, setup.degradation.as_ref(), setup.sigma_p, &mut seeded(a.seed))?;
        let lr = if c.cond.numel() > 0 { c.cond } else { c.x0 };
        let rows: Vec<Vec<Tensor>> = (0..a.pgm_rows.min(x1.batch()))
            .map(|i| {
                let mut row = vec![lr.select(i)];
                row.extend(est.iter().map(|e| e.select(i)));
                row.push(x1.select(i));
                row
            })
            .collect();
        write_pgm_grid(pgm, &rows)?;
        m.artifact("pgm", pgm)?;
    }
    let mut cfg = ConfigDoc::new();
    let s = "sweep";
    cfg.set(s, "mode", if student { "student" } else { "teacher" });
    cfg.set(s, "t_grid", &a.t_grid);
    cfg.set(s, "count", x1.batch());
    cfg.set(s, "seed", a.seed);
    if !student {
        a.solver.record(&mut cfg, s);
    }
    m.config(&cfg);
    m.write(&a.out)?;
    let mut text = String::new();
    for r in &result.rows {
        let _ = writeln!(text, "t={:.4} psnr={:.4}±{:.4} proxy={:.6}±{:.6} n={}", r.t, r.psnr_mean, r.psnr_std, r.proxy_mean, r.proxy_std, r.n);
    }
    print!("{text}");
    Ok(0)
}

fn straight(a: StraightnessArgs, m: &mut Manifest) -> Result<i32> {
    let loaded = load_model(&a.model)?;
    let x = load_dataset_checked(&a.data, Some(&loaded.model))?;
    let mut sampler = FlowCoupling {
        source: TensorPool::new(x)?,
        degradation: loaded.flow.degradation,
        sigma_p: loaded.flow.sigma_p,
    };
    let value = straightness(&loaded.model, &mut sampler, a.k, a.n, a.seed)?;
    println!("straightness={value:.8e} k={} n={} seed={}", a.k, a.n, a.seed);
    if let Some(out) = &a.out {
        m.input("model", &a.model)?;
        m.input("data", &a.data)?;
        let mut doc = ConfigDoc::new();
        let s = "straightness";
        doc.set(s, "value", format!("{value:.16e}"));
        doc.set(s, "k", a.k);
        doc.set(s, "n", a.n);
        doc.set(s, "seed", a.seed);
        std::fs::write(out, doc.to_text())?;
        m.config(&doc);
        m.artifact("result", out)?;
        m.write(out)?;
    }
    Ok(0)
}

fn check(a: CheckArgs) -> Result<i32> {
    let suites = match &a.suite {
        Some(s) => vec![Suite::parse(s)?],
        None => Suite::ALL.to_vec(),
    };
    let mut failed = 0;
    for suite in suites {
        let items = run_suite(suite)?;
        for item in &items {
            println!("{item}");
        }
        let bad = items.iter().filter(|i| !i.pass).count();
        println!("suite {}: {}/{} passed", suite.name(), items.len() - bad, items.len());
        failed += bad;
    }
    Ok(if failed == 0 { 0 } else { 2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 1);
        assert_eq!(exit_code(&Error::Corrupt("x".into())), 1);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 2);
        assert_eq!(exit_code(&Error::Stiffness { t: 0.5, min_step: 1e-10 }), 2);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["flowsr", "sample", "--bogus"]), 1);
        assert_eq!(run(["flowsr", "nope"]), 1);
        assert_eq!(run(["flowsr", "--help"]), 0);
        assert_eq!(run(["flowsr", "check", "--suite", "nope"]), 1);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0,x").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
