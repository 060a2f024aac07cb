use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ead_core::asynctime::{pyramid_schedule, AsyncConfig};
use ead_core::config::{ModeName, RunConfig, Weights};
use ead_core::egnn::Checkpoint;
use ead_core::metrics::{write_diagnostics_csv, Evaluator};
use ead_core::molecule::{load_xyz, make_toy_dataset_with_jitter, parse_xyz, write_xyz, Dataset};
use ead_core::sampler::{sample_many, write_trace_csv, SampleRun, SamplingMode};
use ead_core::schedule::NoiseSchedule;
use ead_core::training::{load_model, model_config_of, train, write_log_header, write_log_row, TrainState};
use ead_core::Error;

/// Environment variable naming the directory that holds run directories.
const RUN_ROOT_ENV: &str = "EAD_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "ead", version, about = "Equivariant asynchronous diffusion for small molecules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a loss log into a run directory.
    Train(TrainArgs),
    /// Draw molecules from a checkpoint as multi-frame XYZ.
    Sample(SampleArgs),
    /// Score an XYZ file of molecules.
    Eval(EvalArgs),
    /// Sample with the synchronous, staircase and adaptive schedules and score each.
    Ablate(AblateArgs),
    /// Print the noise schedule as CSV.
    ScheduleDump {
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-5)]
        precision: f64,
    },
    /// Print the staircase schedule matrix, one row per line.
    PyramidDump {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        atoms: usize,
        #[arg(long, default_value_t = 1)]
        u: usize,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on the bundled toy molecules.
    #[arg(long)]
    toy: bool,
    /// Multi-frame XYZ training set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `$EAD_RUN_ROOT/run-<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    u: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Atoms per chain, including those that decode as padding.
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
    /// XYZ output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-chain trajectory CSVs.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Report JSON path; the report is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-molecule CSV path.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Adaptive,
    Sync,
    Manual,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum WeightsArg {
    Ema,
    Raw,
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    fail(2)(error.into())
}

/// Exit code for errors raised by the core library.
fn classify(e: Error) -> Failure {
    let code = match e {
        Error::NonFinite { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 2,
    };
    Failure {
        code,
        error: e.into(),
    }
}

/// Any failure while reading a checkpoint counts as a checkpoint mismatch.
fn checkpoint_failure(e: Error) -> Failure {
    match e {
        Error::Checkpoint(_) => classify(e),
        other => classify(Error::Checkpoint(other.to_string())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ScheduleDump { steps, precision } => cmd_schedule_dump(steps, precision),
        Command::PyramidDump { steps, atoms, u } => cmd_pyramid_dump(steps, atoms, u),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe is not a failure of the command.
        Err(f) if f.error.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| usage(anyhow!(e))),
        None => Ok(RunConfig::default()),
    }
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(usage)
}

fn load_dataset(cfg: &RunConfig) -> Outcome<Dataset> {
    if cfg.data.toy {
        return Ok(make_toy_dataset_with_jitter(cfg.train.seed, cfg.data.toy_size, cfg.data.jitter));
    }
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| usage(anyhow!("no training data: pass --toy or --dataset")))?;
    if !path.exists() {
        return Err(usage(anyhow!("dataset {} does not exist", path.display())));
    }
    let ds = load_xyz(path).map_err(classify)?;
    if ds.is_empty() {
        return Err(usage(anyhow!("dataset {} holds no molecules", path.display())));
    }
    Ok(ds)
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.toy {
        cfg.data.toy = true;
    }
    if let Some(p) = args.dataset {
        cfg.data.toy = false;
        cfg.data.path = Some(p);
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate().map_err(classify)?;
    let dataset = load_dataset(&cfg)?;
    cfg.train = cfg.train.for_dataset(&dataset);

    let mut state = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(checkpoint_failure)?;
            TrainState::from_checkpoint(&ck, &cfg.train).map_err(classify)?
        }
        None => TrainState::new(&cfg.train),
    };
    let dir = args.out.unwrap_or_else(|| {
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(format!("run-{}", cfg.train.seed))
    });
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))
        .map_err(usage)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())
        .context("cannot write config.toml")
        .map_err(usage)?;

    let log_path = dir.join("train_log.csv");
    let mut log = create(&log_path)?;
    write_log_header(&mut log).map_err(|e| usage(anyhow!(e)))?;
    let train_cfg = cfg.train.clone();
    let max_size = dataset.max_size;
    let save = |state: &TrainState, path: &Path| -> ead_core::Result<()> {
        let mut ck = state.to_checkpoint(&train_cfg);
        ck.set("max_size", max_size);
        ck.save(path)
    };
    let remaining = cfg.train.steps.saturating_sub(state.step);
    let every = cfg.train.checkpoint_every;
    let result = train(&mut state, &dataset, &cfg.train, remaining, |st, row| {
        write_log_row(&mut log, row).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if every > 0 && st.step % every == 0 {
            save(st, &dir.join(format!("checkpoint-{:06}.ckpt", st.step)))?;
        }
        Ok(())
    });
    log.flush().map_err(|e| usage(anyhow!(e)))?;
    let rows = result.map_err(classify)?;
    save(&state, &dir.join("checkpoint.ckpt")).map_err(classify)?;
    if let Some(last) = rows.last() {
        eprintln!(
            "trained to step {} (loss {:.4}, smoothed {:.4}); run directory {}",
            last.step,
            last.loss,
            last.smoothed,
            dir.display()
        );
    }
    Ok(())
}

/// Checkpoint, sampling horizon and chain defaults shared by `sample` and `ablate`.
struct Loaded {
    checkpoint: Checkpoint,
    schedule: NoiseSchedule,
    interval: usize,
    max_size: usize,
}

fn load_checkpoint(path: &Path) -> Outcome<Loaded> {
    let fail4 = checkpoint_failure;
    let checkpoint = Checkpoint::load(path).map_err(fail4)?;
    let model = model_config_of(&checkpoint).map_err(fail4)?;
    let precision: f64 = checkpoint.get_parsed("precision").map_err(fail4)?;
    let schedule = NoiseSchedule::polynomial(model.horizon, precision).map_err(fail4)?;
    Ok(Loaded {
        interval: checkpoint.get_parsed("interval").map_err(fail4)?,
        max_size: checkpoint.get_parsed("max_size").unwrap_or(8),
        checkpoint,
        schedule,
    })
}

fn async_config(loaded: &Loaded, cfg: &RunConfig) -> AsyncConfig {
    let steps = loaded.schedule.steps();
    AsyncConfig {
        lambda: cfg.sample.lambda,
        window: cfg.sample.window,
        hard_cap: cfg.sample.cap_factor * steps,
        ..AsyncConfig::for_steps(steps, loaded.interval)
    }
}

fn sampling_mode(cfg: &RunConfig) -> SamplingMode {
    match cfg.sample.mode {
        ModeName::Adaptive => SamplingMode::Adaptive,
        ModeName::Sync => SamplingMode::Sync,
        ModeName::Manual => SamplingMode::Manual { u: cfg.sample.u },
    }
}

fn run_samples(loaded: &Loaded, cfg: &RunConfig, mode: SamplingMode, trace: bool) -> Outcome<Vec<SampleRun>> {
    let model = load_model(&loaded.checkpoint, cfg.sample.weights == Weights::Ema).map_err(classify)?;
    let atoms = cfg.sample.atoms.unwrap_or(loaded.max_size);
    sample_many(
        &model,
        cfg.sample.n,
        atoms,
        mode,
        &async_config(loaded, cfg),
        &loaded.schedule,
        cfg.sample.seed,
        trace,
    )
    .map_err(classify)
}

fn cmd_sample(args: SampleArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    let s = &mut cfg.sample;
    if let Some(n) = args.n {
        s.n = n;
    }
    if let Some(m) = args.mode {
        s.mode = match m {
            ModeArg::Adaptive => ModeName::Adaptive,
            ModeArg::Sync => ModeName::Sync,
            ModeArg::Manual => ModeName::Manual,
        };
    }
    if let Some(l) = args.lambda {
        s.lambda = l;
    }
    if let Some(w) = args.window {
        s.window = w;
    }
    if let Some(u) = args.u {
        s.u = u;
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if let Some(a) = args.atoms {
        if a < 1 {
            return Err(usage(anyhow!("--atoms must be at least 1")));
        }
        s.atoms = Some(a);
    }
    if let Some(w) = args.weights {
        s.weights = weights(w);
    }
    cfg.validate().map_err(classify)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let runs = run_samples(&loaded, &cfg, sampling_mode(&cfg), args.trajectory.is_some())?;
    let diverged: Vec<(usize, usize)> = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.diverged.map(|k| (i, k)))
        .collect();
    if diverged.len() == runs.len() {
        return Err(Failure {
            code: 3,
            error: anyhow!("all {} chains diverged to non-finite values", runs.len()),
        });
    }
    for (i, k) in &diverged {
        eprintln!("chain {i} diverged at iteration {k}; writing its last finite state");
    }

    let mols: Vec<_> = runs.iter().map(|r| r.molecule.clone()).collect();
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            write_xyz(&mut w, &mols).and_then(|_| w.flush()).map_err(|e| usage(anyhow!(e)))?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            write_xyz(&mut w, &mols).map_err(|e| usage(anyhow!(e)))?;
        }
    }
    if let Some(dir) = &args.trajectory {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(usage)?;
        for (i, run) in runs.iter().enumerate() {
            let mut w = create(&dir.join(format!("chain-{i:04}.csv")))?;
            write_trace_csv(&mut w, &run.trace).and_then(|_| w.flush()).map_err(|e| usage(anyhow!(e)))?;
        }
    }
    let empty = runs.iter().filter(|r| r.is_empty()).count();
    if empty > 0 {
        eprintln!("{empty} of {} chains decoded to no atoms", runs.len());
    }
    Ok(())
}

fn weights(w: WeightsArg) -> Weights {
    match w {
        WeightsArg::Ema => Weights::Ema,
        WeightsArg::Raw => Weights::Raw,
    }
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let text = fs::read_to_string(&args.samples)
        .with_context(|| format!("cannot read {}", args.samples.display()))
        .map_err(usage)?;
    let mols = parse_xyz(&text).map_err(|e| usage(anyhow!("{}: {e}", args.samples.display())))?;
    if mols.is_empty() {
        return Err(usage(anyhow!("{} holds no molecules", args.samples.display())));
    }
    let (report, diags) = Evaluator::default().evaluate(&mols);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(io::stdout().lock(), "{json}").map_err(|e| usage(anyhow!(e)))?;
    if let Some(p) = &args.out {
        fs::write(p, format!("{json}\n"))
            .with_context(|| format!("cannot write {}", p.display()))
            .map_err(usage)?;
    }
    if let Some(p) = &args.diagnostics {
        let mut w = create(p)?;
        write_diagnostics_csv(&mut w, &diags)
            .and_then(|_| w.flush())
            .map_err(|e| usage(anyhow!(e)))?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.n {
        cfg.sample.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.sample.seed = seed;
    }
    if let Some(w) = args.weights {
        cfg.sample.weights = weights(w);
    }
    cfg.validate().map_err(classify)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let evaluator = Evaluator::default();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "schedule,atom_stability,mol_stability,validity,uniqueness,v_times_u").map_err(|e| usage(anyhow!(e)))?;
    let modes = [
        ("synchronous", SamplingMode::Sync),
        ("manual", SamplingMode::Manual { u: cfg.sample.u }),
        ("adaptive", SamplingMode::Adaptive),
    ];
    for (name, mode) in modes {
        let runs = run_samples(&loaded, &cfg, mode, false)?;
        let mols: Vec<_> = runs.into_iter().map(|r| r.molecule).collect();
        let (r, _) = evaluator.evaluate(&mols);
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "nan".into());
        writeln!(
            out,
            "{name},{},{},{},{},{}",
            f(r.atom_stability),
            f(r.mol_stability),
            f(r.validity),
            f(r.uniqueness),
            f(r.v_times_u)
        )
        .and_then(|_| out.flush())
        .map_err(|e| usage(anyhow!(e)))?;
    }
    Ok(())
}

fn cmd_schedule_dump(steps: usize, precision: f64) -> Outcome {
    let schedule = NoiseSchedule::polynomial(steps, precision).map_err(classify)?;
    let stdout = io::stdout();
    schedule.write_csv(stdout.lock()).map_err(|e| usage(anyhow!(e)))
}

fn cmd_pyramid_dump(steps: usize, atoms: usize, u: usize) -> Outcome {
    let rows = pyramid_schedule(steps, atoms, u).map_err(classify)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for row in rows {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| usage(anyhow!(e)))?;
    }
    Ok(())
}
