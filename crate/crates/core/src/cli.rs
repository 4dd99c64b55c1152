//! The `ternary-dit` command line.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 when training diverges.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::data::SyntheticDataset;
use crate::diagnostics::{activation_capture, activation_pilot, checkpoint_size_report, stats_csv, stats_table};
use crate::diffusion::{ddpm_sample, gaussian_image, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{DiT, MODULATION_SITES};
use crate::ppm;
use crate::quant::WEIGHT_TILE_ROWS;
use crate::train::{train_steps, LossLog, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Parser)]
#[command(name = "ternary-dit", version, about = "Ternary-weight diffusion transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic dataset with quantization-aware training.
    Train(TrainArgs),
    /// Draw class-conditional samples as P6 pixmaps.
    Sample(SampleArgs),
    /// Convert a master checkpoint into the packed deployment form.
    Pack(PackArgs),
    /// Print the size report of a checkpoint.
    Inspect(InspectArgs),
    /// Run the activation pilot on a 1024→9216 layer.
    Pilot(PilotArgs),
    /// Print statistics of one adaLN chunk at the first sampling step.
    Capture(CaptureArgs),
    /// Time packed against dense forward passes.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model configuration file (`key=value` lines); the toy model if absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// First step trained at `--lr-after`; no drop if absent.
    #[arg(long)]
    pub lr_drop_step: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_after: f64,
    #[arg(long, value_enum)]
    pub adaln_rms: Option<Switch>,
    #[arg(long, value_enum)]
    pub quantize: Option<Switch>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write a master checkpoint every K steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub ckpt_every: u64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub clip_grad: Switch,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.999)]
    pub ema_decay: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class to sample; repeat for several. Defaults to class 0.
    #[arg(long = "class")]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = 4.0)]
    pub cfg_scale: f64,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Per-tensor rows as CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct PilotArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub block: usize,
    #[arg(long, default_value = "scale_mlp")]
    pub site: String,
    #[arg(long = "class", default_value_t = 0)]
    pub class: usize,
    /// Sampler length whose first step is captured.
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    run_to(args, &mut std::io::stdout().lock())
}

/// [`run`] with the command's report sent to `out`.
pub fn run_to<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

/// Runs one command, writing its report to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Pack(a) => cmd_pack(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::Pilot(a) => cmd_pilot(&a, out),
        Command::Capture(a) => cmd_capture(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
    }
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ModelConfig::from_text(&text)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::toy(),
    };
    if let Some(s) = a.adaln_rms {
        cfg.adaln_rms = s.on();
    }
    if let Some(s) = a.quantize {
        cfg.quantize_blocks = s.on();
    }
    cfg.validate()?;
    if cfg.channels != 3 {
        return Err(Error::Config(format!("the synthetic dataset is RGB; config has {} channels", cfg.channels)));
    }
    let tc = TrainConfig {
        batch_size: a.batch_size,
        total_steps: a.steps,
        lr_initial: a.lr,
        lr_after_drop: a.lr_after,
        lr_drop_step: a.lr_drop_step.unwrap_or(a.steps),
        ema_decay: a.ema_decay,
        clip_grad: a.clip_grad.on().then_some(1.0),
        seed: a.seed,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let data = SyntheticDataset::new(cfg.num_classes, cfg.image_size, a.seed)?;
    create_dir(&a.out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = DiT::<f32>::new(cfg, &mut rng)?;
    let mut state = TrainState::new(model, rng);
    let sched = NoiseSchedule::default();
    let mut log = LossLog::new(BufWriter::new(fs::File::create(a.out.join("loss.tsv"))?));
    let started = Instant::now();
    let result = train_steps(&mut state, &tc, &sched, &data, a.steps, |st, r| {
        log.record(r)?;
        let done = r.step + 1;
        if a.ckpt_every > 0 && done % a.ckpt_every == 0 {
            st.model.to_checkpoint()?.save(a.out.join(format!("step_{done:07}.terd")))?;
        }
        if done % 100 == 0 || done == a.steps {
            writeln!(
                out,
                "step {done:>7}  loss {:.5}  smoothed {:.5}  lr {:.1e}  {:.1}s",
                r.loss,
                r.smoothed,
                r.lr,
                started.elapsed().as_secs_f64()
            )?;
        }
        Ok(())
    });
    log.into_inner().flush()?;
    result?;
    state.model.to_checkpoint()?.save(a.out.join("master.terd"))?;
    state.ema_model().to_checkpoint()?.save(a.out.join("ema.terd"))?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

pub fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let model = DiT::<f32>::from_checkpoint(&load_checkpoint(&a.ckpt)?)?;
    let classes = if a.classes.is_empty() { vec![0] } else { a.classes.clone() };
    create_dir(&a.out)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for (i, &class) in classes.iter().enumerate() {
        let img = ddpm_sample(&model, &sched, class, a.steps, Some(a.cfg_scale), &mut rng)?;
        if !img.is_finite() {
            return Err(Error::Domain(format!("sample for class {class} has non-finite values")));
        }
        let path = a.out.join(format!("sample_{i:03}_class{class}.ppm"));
        ppm::write(&path, &img)?;
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

pub fn cmd_pack(a: &PackArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.input)?;
    if ckpt.has_packed() {
        return Err(Error::Domain(format!("{} is already packed", a.input.display())));
    }
    let packed = DiT::<f32>::from_checkpoint(&ckpt)?.to_packed_checkpoint()?;
    packed.save(&a.out)?;
    writeln!(
        out,
        "packed {} -> {} ({} -> {} payload bytes)",
        a.input.display(),
        a.out.display(),
        ckpt.payload_bytes(),
        packed.payload_bytes()
    )?;
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let report = checkpoint_size_report(&ckpt)?;
    if a.csv {
        write!(out, "{}", report.to_csv())?;
        return Ok(());
    }
    write!(out, "{}", report.to_text())?;
    let file_bytes = fs::metadata(&a.ckpt)?.len();
    writeln!(out, "checkpoint         {}", if ckpt.has_packed() { "packed" } else { "dense" })?;
    writeln!(out, "payload bytes      {}", ckpt.payload_bytes())?;
    writeln!(out, "file bytes         {file_bytes}")?;
    Ok(())
}

pub fn cmd_pilot(a: &PilotArgs, out: &mut dyn Write) -> Result<()> {
    let r = activation_pilot(a.seed)?;
    if a.csv {
        write!(out, "{}", r.to_csv())?;
        return Ok(());
    }
    write!(out, "{}", r.to_text())?;
    let ratio = r.ternary().stats.max_abs() / r.full_precision().stats.max_abs();
    writeln!(out, "max|ternary| / max|full-precision| = {ratio:.2}")?;
    writeln!(out, "rms variant: max |row mean square - 1| = {:.3e}", r.rms_deviation())?;
    Ok(())
}

pub fn cmd_capture(a: &CaptureArgs, out: &mut dyn Write) -> Result<()> {
    if !MODULATION_SITES.contains(&a.site.as_str()) {
        return Err(Error::Config(format!(
            "unknown site {:?}; expected one of {}",
            a.site,
            MODULATION_SITES.join(", ")
        )));
    }
    let model = DiT::<f32>::from_checkpoint(&load_checkpoint(&a.ckpt)?)?;
    let t = *NoiseSchedule::default().strided_timesteps(a.steps)?.last().expect("at least one step");
    let c = activation_capture(&model, a.block, &a.site, t, a.class)?;
    let name = format!("blocks.{}.{}", c.block, c.site);
    let rows = std::iter::once((name.as_str(), &c.stats));
    if a.csv {
        write!(out, "{}", stats_csv(rows))?;
    } else {
        writeln!(out, "t = {t}, class = {}", c.label)?;
        write!(out, "{}", stats_table(rows))?;
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    if a.batch == 0 || a.reps == 0 {
        return Err(Error::Config("batch and reps must be positive".into()));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let packed = if ckpt.has_packed() {
        DiT::<f32>::from_checkpoint(&ckpt)?
    } else {
        DiT::<f32>::from_checkpoint(&DiT::<f32>::from_checkpoint(&ckpt)?.to_packed_checkpoint()?)?
    };
    let dense = packed.dequantized()?;
    let cfg = dense.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x: Vec<_> =
        (0..a.batch).map(|_| gaussian_image(cfg.channels, cfg.image_size, cfg.image_size, &mut rng)).collect();
    let t = vec![dense.num_timesteps() / 2; a.batch];
    let labels: Vec<usize> = (0..a.batch).map(|i| i % cfg.num_classes).collect();
    let drop = vec![false; a.batch];
    let time = |m: &DiT<f32>| -> Result<f64> {
        m.predict(&x, &t, &labels, &drop)?;
        let start = Instant::now();
        for _ in 0..a.reps {
            m.predict(&x, &t, &labels, &drop)?;
        }
        Ok(start.elapsed().as_secs_f64() / a.reps as f64)
    };
    let (td, tp) = (time(&dense)?, time(&packed)?);
    let report = checkpoint_size_report(&ckpt)?;
    let (ws_packed, ws_dense) = report.working_set(WEIGHT_TILE_ROWS);
    writeln!(out, "batch {} x {} reps", a.batch, a.reps)?;
    writeln!(out, "dense forward   {:>10.3} ms", td * 1e3)?;
    writeln!(out, "packed forward  {:>10.3} ms", tp * 1e3)?;
    writeln!(out, "packed / dense  {:>10.3}", tp / td)?;
    writeln!(out, "weight working set: dense {ws_dense} B, packed {ws_packed} B")?;
    Ok(())
}
