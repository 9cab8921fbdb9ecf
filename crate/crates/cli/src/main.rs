use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use rzsr::config::SrConfig;
use rzsr::eval::{DegradationMode, DegradationSpec};
use rzsr::patchdb::DescriptorBackend;
use rzsr::pipeline::{
    ablate_command, build_db_command, degrade_command, eval_command, kernel_gen_command, run_sr_command, DbLevel,
};
use rzsr::scales::{MissingDepth, Retrieval};
use rzsr::srnet::Mode;
use rzsr::Error;

/// Parses a kebab-case enum value through its serde name.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown value `{s}`"))
}

#[derive(Parser)]
#[command(name = "rzsr", version, about = "Zero-shot super-resolution with depth-guided internal exemplars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Super-resolve one image.
    Sr(SrArgs),
    /// Build an LR set from a folder of HR images.
    Degrade(DegradeArgs),
    /// Score SR images against ground truth.
    Eval(EvalArgs),
    /// Build and save the patch database of one image.
    BuildDb(BuildDbArgs),
    /// Compare the four model and retrieval variants on a folder.
    Ablate(AblateArgs),
    /// Write random anisotropic Gaussian kernels.
    KernelGen(KernelGenArgs),
}

/// Settings shared by every command that runs the model. Flags override
/// values read from `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// Number of depth bins.
    #[arg(long)]
    depth_bins: Option<usize>,
    /// Retrieval distance threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    patch_side: Option<usize>,
    /// Inference tile stride.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    k_divisor: Option<usize>,
    /// Network width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = kebab::<Mode>)]
    mode: Option<Mode>,
    #[arg(long, value_parser = kebab::<Retrieval>)]
    retrieval: Option<Retrieval>,
    #[arg(long, value_parser = kebab::<MissingDepth>)]
    missing_depth: Option<MissingDepth>,
    #[arg(long, value_parser = kebab::<DescriptorBackend>)]
    descriptor: Option<DescriptorBackend>,
    /// Directory of precomputed feature maps.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    ensemble: bool,
    #[arg(long)]
    bp_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> rzsr::Result<SrConfig> {
        let mut c = match &self.config {
            Some(p) => SrConfig::load(p)?,
            None => SrConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v.into(); })*
            };
        }
        set!(scale => scale, depth_bins => depth_bins, threshold => threshold, patch_side => patch_side,
             stride => stride, k_divisor => k_divisor, width => width, iters => max_iters, lr => lr,
             mode => mode, retrieval => retrieval, missing_depth => missing_depth, descriptor => descriptor,
             bp_iters => bp_iters, seed => seed);
        if let Some(d) = &self.depth {
            c.depth = Some(d.clone());
        }
        if let Some(f) = &self.features {
            c.features = Some(f.clone());
        }
        c.ensemble |= self.ensemble;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    /// Blur kernel of the LR formation, used by back-projection.
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write per-tile retrieval logs.
    #[arg(long)]
    audit: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DegradeArgs {
    /// Folder of HR PNG images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_parser = kebab::<DegradationMode>, default_value = "bicubic")]
    mode: DegradationMode,
    #[arg(long)]
    kernel: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    sr: PathBuf,
    #[arg(long)]
    hr: PathBuf,
    /// Border pixels excluded from the metrics.
    #[arg(long, default_value_t = 2)]
    shave: usize,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildDbArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_parser = kebab::<DbLevel>, default_value = "down2")]
    level: DbLevel,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Folder of HR PNG images.
    #[arg(long)]
    input: PathBuf,
    /// Folder of `<stem>.dpt` or `<stem>.pgm` depth maps.
    #[arg(long)]
    depth_dir: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct KernelGenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, short)]
    output: PathBuf,
}

fn run(cli: Cli) -> rzsr::Result<()> {
    match cli.command {
        Command::Sr(a) => {
            let mut cfg = a.config.resolve()?;
            if a.image.is_some() {
                cfg.image = a.image;
            }
            if a.kernel.is_some() {
                cfg.kernel = a.kernel;
            }
            if a.output.is_some() {
                cfg.output = a.output;
            }
            cfg.audit |= a.audit;
            let out = run_sr_command(&cfg)?;
            println!("{} (fallback rate {:.3})", out.image.display(), out.fallback_rate);
        }
        Command::Degrade(a) => {
            let spec = DegradationSpec {
                mode: a.mode,
                factor: a.factor,
                seed: a.seed,
                noise_sigma: a.noise,
                kernel_file: a.kernel,
            };
            let n = degrade_command(&a.input, &a.output, &spec)?;
            println!("degraded {n} images into {}", a.output.display());
        }
        Command::Eval(a) => {
            let report = eval_command(&a.sr, &a.hr, a.shave, &a.output)?;
            print!("{}", report.to_csv());
        }
        Command::BuildDb(a) => {
            let mut cfg = a.config.resolve()?;
            cfg.image = Some(a.image);
            let db = build_db_command(&cfg, a.level, &a.output)?;
            println!("{} entries -> {}", db.entries.len(), a.output.display());
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            let rows = ablate_command(&cfg, &a.input, a.depth_dir.as_deref(), &a.output)?;
            println!("variant,psnr_db,ssim,seconds");
            for r in rows {
                println!("{},{:.4},{:.6},{:.3}", r.variant, r.psnr_db, r.ssim, r.seconds);
            }
        }
        Command::KernelGen(a) => {
            for p in kernel_gen_command(a.seed, a.count, &a.output)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
