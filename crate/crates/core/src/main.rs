use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nerfcc::cli::{self, LightingSource, TrainArgs};
use nerfcc::imaging::Vec3;
use nerfcc::trainer::TrainMode;

#[derive(Parser)]
#[command(name = "nerfcc", version, about = "Relightable radiance fields for color-consistent image sets")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mlp,
    Fused,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic posed dataset from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Override the ring's view count.
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the field and lighting table to a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
        #[arg(long, value_enum, default_value_t = Mode::Mlp)]
        mode: Mode,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        n_depth: Option<usize>,
        #[arg(long)]
        checkpoint_interval: Option<u64>,
        #[arg(long)]
        field_width: Option<usize>,
        #[arg(long)]
        field_depth: Option<usize>,
        #[arg(long)]
        n_freq: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        density_bias: Option<f64>,
        /// Fusion grid resolution per axis.
        #[arg(long)]
        resolution: Option<usize>,
        /// Scene box as `x0,y0,z0,x1,y1,z1` (default: derived from cameras).
        #[arg(long, allow_hyphen_values = true)]
        bounds: Option<String>,
    },
    /// Render one manifest camera from a checkpoint under a chosen lighting.
    Relight {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// mean | image:<k> | file:<path> | values:<27 numbers>
        #[arg(long = "reference-l", default_value = "mean")]
        reference_l: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render every input view under one shared reference lighting.
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "reference-l", default_value = "mean")]
        reference_l: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// CD / GL / T(s) report for inputs, the gain/bias baseline and a correction.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `correct`.
        #[arg(long)]
        corrected: PathBuf,
        #[arg(long)]
        nb_bins: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_bounds(s: &str) -> nerfcc::Result<(Vec3, Vec3)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| nerfcc::Error::InvalidArgument(format!("bad bounds value {t:?}"))))
        .collect::<nerfcc::Result<_>>()?;
    if v.len() != 6 || (0..3).any(|i| v[i] >= v[i + 3]) {
        return Err(nerfcc::Error::InvalidArgument("bounds need x0,y0,z0,x1,y1,z1 with min < max".into()));
    }
    Ok((Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])))
}

fn run(cli: Cli) -> nerfcc::Result<()> {
    match cli.command {
        Command::Synth { spec, views, out } => {
            let m = cli::cmd_synth(&spec, views, &out)?;
            println!("wrote {}", m.display());
        }
        Command::Train {
            manifest,
            out,
            seed,
            steps,
            mode,
            batch_size,
            lr,
            n_depth,
            checkpoint_interval,
            field_width,
            field_depth,
            n_freq,
            density_bias,
            resolution,
            bounds,
        } => {
            let args = TrainArgs {
                steps,
                mode: Some(match mode {
                    Mode::Mlp => TrainMode::MlpOnly,
                    Mode::Fused => TrainMode::Fused,
                }),
                seed,
                batch_size,
                lr,
                n_depth,
                checkpoint_interval,
                field_width,
                field_depth,
                n_freq,
                density_bias,
                resolution,
                bounds: bounds.as_deref().map(parse_bounds).transpose()?,
            };
            let state = cli::cmd_train(&manifest, &args, &out)?;
            if let Some(last) = state.history.last() {
                println!("step {} loss {:.6e}", last.step, last.total());
            }
            println!("wrote {}", cli::final_checkpoint(&out).display());
        }
        Command::Relight {
            checkpoint,
            manifest,
            camera,
            reference_l,
            out,
        } => {
            let src: LightingSource = reference_l.parse()?;
            cli::cmd_relight(&checkpoint, &manifest, camera, &src, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Correct {
            checkpoint,
            manifest,
            reference_l,
            out,
        } => {
            let src: LightingSource = reference_l.parse()?;
            let c = cli::cmd_correct(&checkpoint, &manifest, &src, &out)?;
            println!("corrected {} images in {:.3}s", c.images.len(), c.seconds);
        }
        Command::Evaluate {
            manifest,
            corrected,
            nb_bins,
            out,
        } => {
            let rows = cli::cmd_evaluate(&manifest, &corrected, nb_bins, &out)?;
            print!("{}", nerfcc::metrics::format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: could not start {n} worker threads");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
