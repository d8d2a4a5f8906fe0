//! `fas-canet`: generate datasets, train, evaluate and plot.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fas_canet::checkpoint;
use fas_canet::config::{observed_counts, seed_from_env, Ablation, GridConfig, RunConfig};
use fas_canet::dataset::{generate_dataset, Dataset, SplitSizes};
use fas_canet::eval::{evaluate, summary_json, CaseBuilder, EvalTable, Extrapolator, OracleModel};
use fas_canet::train::{run_dir_name, train, MetricsRecord, BEST_CHECKPOINT, LAST_CHECKPOINT};
use fas_canet::Error;

#[derive(Parser)]
#[command(name = "fas-canet", version, about = "Fluid antenna channel extrapolation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/val/test shards and a manifest.
    Gen(GenArgs),
    /// Train a model; artifacts go to <runs>/<config hash prefix>/.
    Train(TrainArgs),
    /// Sweep NMSE over observed port counts and SNRs.
    Eval(EvalArgs),
    /// Draw an NMSE figure from an evaluation CSV.
    Plot(PlotArgs),
}

/// `AxB` pair such as `32x16`.
#[derive(Clone, Copy, Debug)]
struct Pair<T>(T, T);

impl<T: FromStr> FromStr for Pair<T> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected AxB, got {s:?}"))?;
        let parse = |t: &str| t.trim().parse::<T>().map_err(|_| format!("bad number {t:?} in {s:?}"));
        Ok(Pair(parse(a)?, parse(b)?))
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    train: usize,
    #[arg(long, default_value_t = 512)]
    val: usize,
    #[arg(long, default_value_t = 512)]
    test: usize,
    /// Port grid as NyxNx.
    #[arg(long, default_value = "32x16")]
    grid: Pair<usize>,
    /// Aperture as WxxWy in centimetres.
    #[arg(long, default_value = "2x4")]
    aperture: Pair<f64>,
    #[arg(long, default_value_t = 3.4)]
    freq_ghz: f64,
    /// Transmit antennas.
    #[arg(long, default_value_t = 8)]
    m_t: usize,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; unset fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width_div: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    CanetB,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint; not needed with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Run config; defaults to config.toml beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, value_delimiter = ',')]
    snr: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    observed: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Harness self-test: a model that returns the true channel.
    #[arg(long)]
    oracle: bool,
    /// Replace predictions at observed ports with the measured values.
    #[arg(long)]
    overwrite_observed: bool,
    /// CSV output (stdout when absent).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// SVG figure output.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// JSON summary output.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Label shown in the title.
    #[arg(long, default_value = "CANet")]
    model: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Plot(a) => run_plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = seed_from_env()?.unwrap_or(a.seed);
    cfg.grid = GridConfig {
        n_y: a.grid.0,
        n_x: a.grid.1,
        w_x_cm: a.aperture.0,
        w_y_cm: a.aperture.1,
        freq_ghz: a.freq_ghz,
        m_t: a.m_t,
        delta: a.delta,
    };
    (cfg.data.train, cfg.data.val, cfg.data.test) = (a.train, a.val, a.test);
    let sizes = SplitSizes {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let m = generate_dataset(&a.out, &cfg.grid, sizes, cfg.seed, &cfg.hash(), a.force)?;
    println!("dataset     {}", a.out.display());
    println!("grid        {}x{} ports, M_t {}", m.grid.n_y, m.grid.n_x, m.grid.m_t);
    println!("wavelength  {:.6} m", m.wavelength);
    for s in &m.splits {
        println!("{:<11} {} samples ({})", s.name, s.count, s.file);
    }
    println!("manifest    {}", m.manifest_hash);
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = a.data {
        cfg.data.dir = d;
    }
    if let Some(ab) = a.ablation {
        cfg.train.ablation = match ab {
            AblationArg::Full => Ablation::Full,
            AblationArg::CanetB => Ablation::CanetB,
        };
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.width_div {
        cfg.model.width_div = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.apply_env_seed()?;

    let data = Dataset::load(&cfg.data.dir).with_context(|| format!("loading dataset {}", cfg.data.dir.display()))?;
    if a.config.is_none() {
        // inline runs adopt the dataset's grid and its observation sweep
        cfg.grid = data.grid.clone();
        cfg.eval.observed = observed_counts(cfg.grid.n_ports());
    }
    cfg.validate()?;
    let dir = a.runs.join(run_dir_name(&cfg));
    log::info!("run directory {}", dir.display());
    let out = train(&cfg, &data, Some(&dir), &mut |rec| match rec {
        MetricsRecord::Step { step, loss_total, .. } if step % 16 == 0 => {
            log::info!("step {step:>6}  loss {loss_total:.5}");
        }
        MetricsRecord::Epoch {
            epoch,
            train_loss_mean,
            val_mean_nmse,
            ..
        } => log::info!("epoch {epoch:>3}  train {train_loss_mean:.5}  val nmse {val_mean_nmse:.5}"),
        _ => {}
    })?;
    println!("run         {}", dir.display());
    println!("steps       {}", out.steps);
    if let Some(b) = out.best_val_nmse {
        println!("best val    {b:.6}");
    }
    println!("checkpoint  {}", dir.join(LAST_CHECKPOINT).display());
    if dir.join(BEST_CHECKPOINT).exists() {
        println!("best        {}", dir.join(BEST_CHECKPOINT).display());
    }
    Ok(())
}

fn config_mismatch(message: String) -> Error {
    Error::Config {
        path: "checkpoint".into(),
        message,
    }
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ckpt = a.checkpoint.as_deref().map(checkpoint::load).transpose()?;
    let config_path = a.config.clone().or_else(|| {
        a.checkpoint
            .as_deref()
            .and_then(Path::parent)
            .map(|d| d.join("config.toml"))
            .filter(|p| p.exists())
    });
    let mut cfg = match &config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some((_, meta)) = &ckpt {
        if config_path.is_none() {
            return Err(config_mismatch("no config.toml beside the checkpoint; pass --config".into()).into());
        }
        if cfg.hash() != meta.config_hash {
            return Err(config_mismatch(format!(
                "config hash {} does not match the checkpoint's {}",
                &cfg.hash()[..12],
                &meta.config_hash[..meta.config_hash.len().min(12)]
            ))
            .into());
        }
        if cfg.arch() != meta.arch {
            return Err(config_mismatch("architecture differs from the checkpoint".into()).into());
        }
    }

    let data_dir = a.data.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let data = Dataset::load(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    if ckpt.is_none() && config_path.is_none() {
        cfg.grid = data.grid.clone();
        cfg.eval.observed = observed_counts(cfg.grid.n_ports());
    }
    if data.grid != cfg.grid {
        return Err(Error::Data("dataset grid does not match the model".into()).into());
    }
    let samples = match a.split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    };
    let observed = a.observed.unwrap_or_else(|| cfg.eval.observed.clone());
    let snrs = a.snr.unwrap_or_else(|| cfg.eval.snr_db.clone());
    let seed = seed_from_env()?.or(a.seed).unwrap_or(cfg.seed);
    let builder = CaseBuilder::from_config(&cfg);
    let overwrite = a.overwrite_observed || cfg.eval.overwrite_observed;
    let model: Box<dyn Extrapolator> = match ckpt {
        Some((net, _)) if !a.oracle => Box::new(net),
        _ => Box::new(OracleModel),
    };
    let table = evaluate(model.as_ref(), samples, &builder, &observed, &snrs, seed, overwrite)?;

    eprint!("{}", table.render());
    match &a.csv {
        Some(p) => table.write_csv(p)?,
        None => print!("{}", table.to_csv_string()?),
    }
    if let Some(p) = &a.summary {
        let text = serde_json::to_string_pretty(&summary_json(&table))?;
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.plot {
        plot::nmse_figure(&table, p)?;
    }
    Ok(())
}

fn run_plot(a: PlotArgs) -> Result<()> {
    let table = EvalTable::read_csv(&a.csv, &a.model)?;
    plot::nmse_figure(&table, &a.out)
}
