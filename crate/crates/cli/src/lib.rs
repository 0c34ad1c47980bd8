//! Command implementations behind the `wavesf` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wavesf_core::checks::{run_all_suites, run_suite, SuiteResult, GRADCHECK_TOLERANCE};
use wavesf_core::data::{load_split, save_tensor, Split};
use wavesf_core::metrics::{rapsd_csv, rapsd_last_frames, METRICS_CSV_HEADER};
use wavesf_core::model::{count_params_flops, take_frames, VariantInventory};
use wavesf_core::train::{predict_dataset, train_loop, Checkpoint, TrainState};
use wavesf_core::{build_model, MetricReport, RunConfig, Tensor, Variant, Forecaster};

pub const THREADS_ENV: &str = "WAVESF_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.wsfc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "variant,params,mse,mae,ssim";

#[derive(Debug, Parser)]
#[command(name = "wavesf", version, about = "Wavelet-latent spatiotemporal forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ck: CheckpointArgs,
    },
    /// Write predicted frames as WSFT and optionally PGM images.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Forecast horizon; defaults to the configured t_out.
        #[arg(long)]
        t_out: Option<usize>,
        /// Also dump every predicted frame as an 8-bit PGM.
        #[arg(long)]
        pgm: bool,
    },
    /// Train and score every architecture variant on one configuration.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Steps per variant; defaults to the configured schedule length.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Radially averaged power spectra of ground truth and predictions.
    Spectrum {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ck: CheckpointArgs,
    },
    /// Finite-difference checks of every differentiable building block.
    Gradcheck {
        /// Run only this suite.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Print the configuration, parameter census and MAC count.
    Info {
        #[command(flatten)]
        run: RunArgs,
        /// List every parameter tensor.
        #[arg(long)]
        verbose: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Defaults to `<out>/checkpoint.wsfc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Parses `argv`, runs the command and maps the outcome to an exit code.
/// Usage errors exit through clap with status 2.
pub fn main_with<I, A>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(argv);
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Caps the rayon pool from `WAVESF_THREADS` (default 1).
pub fn configure_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?,
        Err(_) => 1,
    };
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { run, resume } => train(&run, resume.as_deref()),
        Command::Eval { run, ck } => eval(&run, &ck),
        Command::Predict { run, ck, t_out, pgm } => predict(&run, &ck, t_out, pgm),
        Command::Ablate { run, steps } => ablate(&run, steps),
        Command::Spectrum { run, ck } => spectrum(&run, &ck),
        Command::Gradcheck { suite } => gradcheck(suite.as_deref()),
        Command::Info { run, verbose } => info(&run, verbose),
    }
}

struct Loaded {
    cfg: RunConfig,
    out: PathBuf,
}

fn load(run: &RunArgs) -> Result<Loaded> {
    let cfg = RunConfig::load(&run.config).with_context(|| format!("reading config {}", run.config.display()))?;
    let out = run.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok(Loaded { cfg, out })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn split_data(cfg: &RunConfig, split: Split) -> Result<Tensor<f32>> {
    load_split(&cfg.data, &cfg.model, split).with_context(|| format!("loading the {} split", split.name()))
}

fn open_csv(path: &Path, header: &str, append: bool) -> Result<File> {
    let fresh = !append || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

fn train(run: &RunArgs, resume: Option<&Path>) -> Result<ExitCode> {
    let Loaded { cfg, out } = load(run)?;
    let train_set = split_data(&cfg, Split::Train)?;
    let val_set = split_data(&cfg, Split::Val)?;
    let (model, params) = build_model::<f32>(cfg.model.clone())?;
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path, &cfg.model).with_context(|| format!("resuming from {}", path.display()))?;
            if ck.schedule != cfg.train.schedule {
                bail!(
                    "checkpoint was trained with the {} schedule, config requests {}",
                    ck.schedule,
                    cfg.train.schedule
                );
            }
            ck.state
        }
        None => TrainState::new(params),
    };
    ensure_dir(&out)?;
    let mut metrics = open_csv(&out.join(METRICS_FILE), METRICS_CSV_HEADER, resume.is_some())?;
    let mut losses = open_csv(&out.join(LOSS_FILE), "step,lr,loss", resume.is_some())?;
    let mut io_error = None;
    let total = cfg.train.total_steps(train_set.shape()[0]);
    eprintln!("training {} for {} steps from step {}", cfg.model.variant, total, state.step);
    let history = train_loop(&model, &mut state, &train_set, Some(&val_set), &cfg.train, |rec, report| {
        let row = format!("{},{},{}\n", rec.step + 1, rec.lr, rec.loss);
        if let Some(r) = report {
            if let Err(e) = writeln!(metrics, "{}", r.csv_row(rec.step + 1)) {
                io_error.get_or_insert(e);
            }
            eprintln!("step {}: loss {:.6} val mse {:.6} ssim {:.4}", rec.step + 1, rec.loss, r.mse, r.ssim);
        }
        if let Err(e) = losses.write_all(row.as_bytes()) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing training logs");
    }
    let ck_path = out.join(CHECKPOINT_FILE);
    Checkpoint {
        model: cfg.model.clone(),
        schedule: cfg.train.schedule,
        state,
    }
    .save(&ck_path)
    .with_context(|| format!("writing {}", ck_path.display()))?;
    match history.steps.last() {
        Some(last) => println!("step {} loss {:.6}", last.step + 1, last.loss),
        None => println!("nothing to do: already at step {total}"),
    }
    if let Some((_, r)) = history.evals.last() {
        println!("val mse {:.6} mae {:.6} ssim {:.4}", r.mse, r.mae, r.ssim);
    }
    println!("checkpoint {}", ck_path.display());
    Ok(ExitCode::SUCCESS)
}

fn restore(cfg: &RunConfig, out: &Path, ck: &CheckpointArgs) -> Result<(Forecaster, Checkpoint<f32>)> {
    let path = ck.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let checkpoint = Checkpoint::<f32>::load(&path, &cfg.model).with_context(|| format!("loading {}", path.display()))?;
    Ok((Forecaster::new(cfg.model.clone())?, checkpoint))
}

fn eval(run: &RunArgs, ck: &CheckpointArgs) -> Result<ExitCode> {
    let Loaded { cfg, out } = load(run)?;
    let (model, checkpoint) = restore(&cfg, &out, ck)?;
    let split = Split::from(ck.split);
    let data = split_data(&cfg, split)?;
    let (pred, truth) = predict_dataset(&model, &checkpoint.state.params, &data, cfg.train.batch_size)?;
    let report = MetricReport::compute(&pred, &truth)?;
    ensure_dir(&out)?;
    let csv = format!("{METRICS_CSV_HEADER}\n{}\n", report.csv_row(checkpoint.state.step));
    let path = out.join(format!("eval_{}.csv", split.name()));
    write_file(&path, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

/// Predicts `t_out` frames for every sequence from its first `t_in` frames.
fn forecast(model: &Forecaster, ck: &Checkpoint<f32>, data: &Tensor<f32>, t_out: usize, batch: usize) -> Result<Tensor<f32>> {
    let t_in = model.config().t_in;
    let inputs = take_frames(data, 0, t_in)?;
    let n = inputs.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(batch.max(1)) {
        let items = (start..(start + batch).min(n))
            .map(|i| inputs.index0(i))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = model.predict(&ck.state.params, &Tensor::stack(&items)?, t_out)?;
        parts.extend((0..pred.shape()[0]).map(|i| pred.index0(i)).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(Tensor::stack(&parts)?)
}

/// Binary PGM of one `h x w` plane; values are clamped to `[0, 1]`.
pub fn encode_pgm(plane: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn predict(run: &RunArgs, ck: &CheckpointArgs, t_out: Option<usize>, pgm: bool) -> Result<ExitCode> {
    let Loaded { cfg, out } = load(run)?;
    let (model, checkpoint) = restore(&cfg, &out, ck)?;
    let split = Split::from(ck.split);
    let data = split_data(&cfg, split)?;
    let horizon = t_out.unwrap_or(cfg.model.t_out);
    if horizon == 0 {
        bail!("--t-out must be >= 1");
    }
    let pred = forecast(&model, &checkpoint, &data, horizon, cfg.train.batch_size)?;
    ensure_dir(&out)?;
    let path = out.join(format!("predictions_{}.wsft", split.name()));
    save_tensor(&path, &pred)?;
    println!("{} {:?}", path.display(), pred.shape());
    if pgm {
        let dir = out.join(format!("frames_{}", split.name()));
        ensure_dir(&dir)?;
        let s = pred.shape().to_vec();
        let (c, h, w) = (s[2], s[3], s[4]);
        for (k, plane) in pred.data().chunks(h * w).enumerate() {
            let (seq, t, ch) = (k / (s[1] * c), (k / c) % s[1], k % c);
            let name = dir.join(format!("seq{seq:04}_t{t:03}_c{ch}.pgm"));
            fs::write(&name, encode_pgm(plane, h, w)).with_context(|| format!("writing {}", name.display()))?;
        }
        println!("{} ({} frames)", dir.display(), pred.len() / (h * w));
    }
    Ok(ExitCode::SUCCESS)
}

fn spectrum(run: &RunArgs, ck: &CheckpointArgs) -> Result<ExitCode> {
    let Loaded { cfg, out } = load(run)?;
    let (model, checkpoint) = restore(&cfg, &out, ck)?;
    let split = Split::from(ck.split);
    let data = split_data(&cfg, split)?;
    let (pred, truth) = predict_dataset(&model, &checkpoint.state.params, &data, cfg.train.batch_size)?;
    ensure_dir(&out)?;
    for (tag, t) in [("truth", &truth), ("pred", &pred)] {
        let path = out.join(format!("spectrum_{tag}_{}.csv", split.name()));
        write_file(&path, &rapsd_csv(&rapsd_last_frames(t)?))?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub report: MetricReport,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant, self.params, self.report.mse, self.report.mae, self.report.ssim
        )
    }
}

/// Trains every variant for `steps` steps and scores it on the validation split.
pub fn ablation_rows(cfg: &RunConfig, steps: usize) -> Result<Vec<AblationRow>> {
    let train_set = split_data(cfg, Split::Train)?;
    let val_set = split_data(cfg, Split::Val)?;
    let mut tc = cfg.train.clone();
    tc.max_steps = Some(steps);
    tc.eval_every = 0;
    Variant::ALL
        .iter()
        .map(|&v| {
            let (model, params) = build_model::<f32>(cfg.model.clone().with_variant(v))?;
            let count = params.num_scalars();
            let mut state = TrainState::new(params);
            train_loop(&model, &mut state, &train_set, None, &tc, |_, _| {}).with_context(|| format!("training {v}"))?;
            let (pred, truth) = predict_dataset(&model, &state.params, &val_set, tc.batch_size)?;
            let report = MetricReport::compute(&pred, &truth)?;
            eprintln!("{v}: {count} params, val mse {:.6}", report.mse);
            Ok(AblationRow {
                variant: v,
                params: count,
                report,
            })
        })
        .collect()
}

fn ablate(run: &RunArgs, steps: Option<usize>) -> Result<ExitCode> {
    let Loaded { cfg, out } = load(run)?;
    let steps = steps.unwrap_or_else(|| cfg.train.total_steps(cfg.data.n_train));
    let rows = ablation_rows(&cfg, steps)?;
    ensure_dir(&out)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let path = out.join(ABLATION_FILE);
    write_file(&path, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn report_suite(r: &SuiteResult) -> bool {
    let ok = r.passed();
    println!(
        "{:<28} max rel err {:.3e} over {} coordinates  {}",
        r.name,
        r.report.max_rel_error,
        r.report.coordinates,
        if ok { "ok" } else { "FAIL" }
    );
    if !ok {
        if let Some((param, idx)) = &r.report.worst {
            eprintln!(
                "gradcheck failed: {} max rel err {:.3e} > {GRADCHECK_TOLERANCE:e} at {param}[{idx}]",
                r.name, r.report.max_rel_error
            );
        }
    }
    ok
}

fn gradcheck(suite: Option<&str>) -> Result<ExitCode> {
    let results = match suite {
        Some(name) => vec![run_suite(name)?],
        None => run_all_suites()?,
    };
    let mut all = true;
    for r in &results {
        all &= report_suite(r);
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// The text printed by `info`.
pub fn info_text(cfg: &RunConfig, verbose: bool) -> Result<String> {
    let m = &cfg.model;
    let (_, params) = build_model::<f32>(m.clone())?;
    let inventory = VariantInventory::of(m.variant, &params);
    let cost = count_params_flops(m)?;
    let mut s = String::new();
    writeln!(s, "variant {}", m.variant)?;
    writeln!(s, "N_s={} N_t={} C_s={} C_t={} C_z={}", m.n_s, m.n_t, m.c_s, m.c_t(), m.c_z)?;
    writeln!(
        s,
        "frames T_in={} T_out={} C={} H={} W={} latent {}x{}",
        m.t_in,
        m.t_out,
        m.channels,
        m.height,
        m.width,
        m.latent_height(),
        m.latent_width()
    )?;
    writeln!(
        s,
        "params {} (complex {}, real {}) in {} tensors",
        cost.params,
        cost.complex_params,
        cost.params - cost.complex_params,
        inventory.entries.len()
    )?;
    writeln!(s, "9x9 kernels {}  tdi gate {}", inventory.kernels_9x9, if inventory.has_tdi_gate { "yes" } else { "no" })?;
    writeln!(s, "MACs per forward {} ({:.3} G)", cost.macs, cost.macs as f64 / 1e9)?;
    writeln!(
        s,
        "train lr {} epochs {} batch {} schedule {}",
        cfg.train.lr, cfg.train.epochs, cfg.train.batch_size, cfg.train.schedule
    )?;
    if verbose {
        for (name, n) in &inventory.entries {
            writeln!(s, "  {name} {n}")?;
        }
    }
    Ok(s)
}

fn info(run: &RunArgs, verbose: bool) -> Result<ExitCode> {
    let Loaded { cfg, .. } = load(run)?;
    print!("{}", info_text(&cfg, verbose)?);
    Ok(ExitCode::SUCCESS)
}
