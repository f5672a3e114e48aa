//! `hyperseg` command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hyperseg::accounting::{count_model, CostReport};
use hyperseg::bench::run_bench;
use hyperseg::decoder::argmax_classes;
use hyperseg::io::{
    decode_ppm, decode_tensor, encode_pgm, encode_tensor, weights_dtype, write_atomic, DynTensor,
};
use hyperseg::model::load_weights;
use hyperseg::par::with_workers;
use hyperseg::{Error, Model, ModelConfig, Scalar, Shape, Tensor};
use hyperseg_verify::{run_named, SUITES};

#[derive(Parser, Debug)]
#[command(
    name = "hyperseg",
    version,
    about = "Patch-wise hypernetwork segmentation inference"
)]
struct Cli {
    /// Worker threads for the compute pool (defaults to all cores)
    #[arg(long, global = true, env = "HYPERSEG_WORKERS", value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Initialise a model from a config and write its weights
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        precision: PrecisionArg,
    },
    /// Segment one image
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// HSEGT1 tensor of shape (1, 3, H, W) or binary P6 PPM
        #[arg(long = "in")]
        input: PathBuf,
        /// P5 PGM of class indices
        #[arg(long)]
        out: PathBuf,
        /// Also write the logits as an HSEGT1 tensor
        #[arg(long)]
        logits: Option<PathBuf>,
        #[command(flatten)]
        precision: PrecisionArg,
    },
    /// Run verification suites
    Verify {
        #[arg(default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suite: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Time naive against tiled dynamic convolutions
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Weights to time; without it a model is initialised from the config seed
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input image; without it a seeded random image is used
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        iters: u64,
        /// Print JSON instead of text
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this file
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        precision: PrecisionArg,
    },
    /// Fold every batch norm into the preceding convolution or mapper
    Fuse {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic parameter and flop counts
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Count the fused model
        #[arg(long)]
        fused: bool,
        /// Report the config with all mapper group counts halved, as given, and doubled
        #[arg(long)]
        sweep_groups: bool,
        #[arg(long)]
        json: bool,
    },
    /// Describe a config and/or weight file
    Inspect {
        #[arg(long, required_unless_present = "weights")]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Copy)]
struct PrecisionArg {
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Lib(#[from] Error),
    #[error("verification failed")]
    Verify,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Lib(Error::Io(_)) => 3,
            CliError::Lib(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    write_atomic(path, bytes).map_err(|e| match e {
        Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

fn load_config(path: &Path) -> CliResult<ModelConfig> {
    let text = String::from_utf8(read(path)?)
        .map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
    let config = ModelConfig::from_json(&text)?;
    for warning in config.lint()? {
        eprintln!("warning: {warning}");
    }
    Ok(config)
}

fn load_model<T: Scalar>(config: &ModelConfig, path: &Path) -> CliResult<Model<T>> {
    if !path.exists() {
        read(path)?;
    }
    load_weights(config, path).map_err(|e| match e {
        Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

/// Reads a PPM or HSEGT1 image and checks it against the config's input size.
fn load_image<T: Scalar>(config: &ModelConfig, path: &Path) -> CliResult<Tensor<T>> {
    let bytes = read(path)?;
    let image: Tensor<T> = if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(Error::from)?
    } else {
        match decode_tensor(&bytes).map_err(Error::from)? {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    };
    let want = Shape::new(1, 3, config.input[0], config.input[1]);
    if image.shape() != want {
        return Err(CliError::Usage(format!(
            "input {}: expected dims {want} (3 x {} x {}), got {}",
            path.display(),
            config.input[0],
            config.input[1],
            image.shape()
        )));
    }
    Ok(image)
}

fn cmd_build<T: Scalar>(config: &ModelConfig, seed: Option<u64>, out: &Path) -> CliResult {
    let model = Model::<T>::build_with_seed(config, seed.unwrap_or(config.seed))?;
    write(out, &model.encode())?;
    println!(
        "wrote {}: {} tensors, {} parameters ({:?})",
        out.display(),
        model.tensor_count(),
        model.param_count(),
        T::DTYPE
    );
    Ok(())
}

fn cmd_run<T: Scalar>(
    config: &ModelConfig,
    weights: &Path,
    input: &Path,
    out: &Path,
    logits_out: Option<&Path>,
) -> CliResult {
    let model = load_model::<T>(config, weights)?;
    let image = load_image::<T>(config, input)?;
    let logits = model.forward(&image)?;
    let s = logits.shape();
    if s.c > 256 {
        return Err(CliError::Usage(format!(
            "{} classes do not fit in an 8-bit PGM",
            s.c
        )));
    }
    let labels: Vec<u8> = argmax_classes(&logits)
        .into_iter()
        .map(|c| c as u8)
        .collect();
    let pgm = encode_pgm(s.w, s.h, &labels);
    // write the optional logits first so a failure leaves neither output behind
    if let Some(path) = logits_out {
        write(path, &encode_tensor(&logits))?;
    }
    write(out, &pgm)?;
    println!("wrote {} ({}x{}, {} classes)", out.display(), s.w, s.h, s.c);
    Ok(())
}

fn cmd_bench<T: Scalar>(
    config: &ModelConfig,
    weights: Option<&Path>,
    input: Option<&Path>,
    iters: usize,
    json: bool,
    out: Option<&Path>,
) -> CliResult {
    let model = match weights {
        Some(p) => load_model::<T>(config, p)?,
        None => Model::<T>::build(config)?,
    };
    let image = match input {
        Some(p) => load_image::<T>(config, p)?,
        None => seeded_image(config),
    };
    let report = run_bench(&model, &image, iters)?;
    if let Some(path) = out {
        write(path, report.to_json().as_bytes())?;
    }
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn seeded_image<T: Scalar>(config: &ModelConfig) -> Tensor<T> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    Tensor::from_fn(
        Shape::new(1, 3, config.input[0], config.input[1]),
        |_, _, _, _| T::of(r.gen_range(0.0..1.0)),
    )
}

fn cmd_fuse<T: Scalar>(config: &ModelConfig, weights: &Path, out: &Path) -> CliResult {
    let model = load_model::<T>(config, weights)?;
    let fused = model.fuse()?;
    write(out, &fused.encode())?;
    println!(
        "wrote {}: {} -> {} tensors, {} -> {} parameters",
        out.display(),
        model.tensor_count(),
        fused.tensor_count(),
        model.param_count(),
        fused.param_count()
    );
    Ok(())
}

#[derive(Serialize)]
struct Sweep {
    model: String,
    /// Signal channels per block, held fixed across the sweep.
    partition: Vec<usize>,
    reports: Vec<SweepEntry>,
}

#[derive(Serialize)]
struct SweepEntry {
    groups: Vec<usize>,
    report: CostReport,
}

fn cmd_flops(config: &ModelConfig, fused: bool, sweep: bool, json: bool) -> CliResult {
    if !sweep {
        let report = count_model(&config.validate()?, &config.name, fused, None);
        if json {
            println!("{}", report.to_json());
        } else {
            print!("{}", report.to_text());
        }
        return Ok(());
    }
    let configs = [
        config.scale_groups(1, 2)?,
        config.clone(),
        config.scale_groups(2, 1)?,
    ];
    // the coarsest allocation unit is valid at every step
    let partition = configs[2].validate()?.partition;
    let mut reports = Vec::new();
    for c in &configs {
        reports.push(SweepEntry {
            groups: c.groups.clone(),
            report: count_model(&c.validate()?, &c.name, fused, Some(&partition)),
        });
    }
    let sweep = Sweep {
        model: config.name.clone(),
        partition,
        reports,
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&sweep).expect("sweep serializes")
        );
        return Ok(());
    }
    println!(
        "model {}  signal partition {:?}",
        sweep.model, sweep.partition
    );
    println!(
        "{:<24} {:>14} {:>16} {:>14} {:>16}",
        "mapper groups", "mapper params", "mapper flops", "total params", "total flops"
    );
    for e in &sweep.reports {
        let t = &e.report.totals;
        println!(
            "{:<24} {:>14} {:>16} {:>14} {:>16}",
            format!("{:?}", e.groups),
            t.mapper_params,
            t.mapper_flops,
            t.params,
            t.flops
        );
    }
    for w in sweep.reports.windows(2) {
        let (a, b) = (&w[0].report.totals, &w[1].report.totals);
        println!(
            "doubling groups: mapper params ratio {:.3}, mapper flops ratio {:.3}",
            a.mapper_params as f64 / b.mapper_params as f64,
            a.mapper_flops as f64 / b.mapper_flops as f64
        );
    }
    Ok(())
}

fn cmd_inspect(config: Option<&Path>, weights: Option<&Path>) -> CliResult {
    let config = config.map(load_config).transpose()?;
    if let Some(c) = &config {
        let plan = c.validate()?;
        println!(
            "config {}: {} classes, input {}x{}",
            c.name, c.classes, plan.height, plan.width
        );
        println!(
            "  backbone channels {:?}, reduced {:?}",
            plan.stage_channels, plan.reduced_channels
        );
        println!(
            "  signal {} channels at {:?}, grid {:?}, context depth {:?}",
            plan.signal_channels, plan.signal_hw, plan.grid, plan.context_depth
        );
        for (spec, phi) in plan.blocks.iter().zip(&plan.partition) {
            println!(
                "  block{}: {} -> {:?} -> {} channels, {} params per patch, mapper {} groups over {} signal channels",
                spec.level,
                spec.in_channels,
                spec.hidden,
                spec.out_channels,
                spec.param_count(),
                spec.mapper_groups,
                phi
            );
        }
    }
    if let Some(path) = weights {
        let bytes = read(path)?;
        let dtype = weights_dtype(&bytes).map_err(Error::from)?;
        let file = hyperseg::io::decode_weights::<f64>(&bytes).map_err(Error::from)?;
        let scalars: usize = file.tensors.values().map(|a| a.data.len()).sum();
        println!(
            "weights {}: {} tensors, {} scalars, {}, {}",
            path.display(),
            file.tensors.len(),
            scalars,
            dtype.map_or("empty".to_string(), |d| format!("{d:?}")),
            if file.fused { "fused" } else { "unfused" }
        );
        for (name, arr) in &file.tensors {
            println!("  {name} {:?}", arr.dims);
        }
        if let Some(c) = &config {
            Model::<f64>::from_weight_file(c, &file)?;
            println!("weights match config {}", c.name);
        }
    }
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64) -> CliResult {
    let report =
        run_named(suite, seed).ok_or_else(|| CliError::Usage(format!("unknown suite {suite}")))?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        if let Some(s) = report.first_failure_seed {
            eprintln!("first counterexample seed: {s}");
        }
        Err(CliError::Verify)
    }
}

fn dispatch(command: Command) -> CliResult {
    macro_rules! typed {
        ($p:expr, $f:ident ( $($arg:expr),* )) => {
            match $p.precision {
                Precision::F32 => $f::<f32>($($arg),*),
                Precision::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match command {
        Command::Build {
            config,
            out,
            seed,
            precision,
        } => {
            let c = load_config(&config)?;
            typed!(precision, cmd_build(&c, seed, &out))
        }
        Command::Run {
            config,
            weights,
            input,
            out,
            logits,
            precision,
        } => {
            let c = load_config(&config)?;
            typed!(
                precision,
                cmd_run(&c, &weights, &input, &out, logits.as_deref())
            )
        }
        Command::Verify { suite, seed } => cmd_verify(&suite, seed),
        Command::Bench {
            config,
            weights,
            input,
            iters,
            json,
            out,
            precision,
        } => {
            let c = load_config(&config)?;
            typed!(
                precision,
                cmd_bench(
                    &c,
                    weights.as_deref(),
                    input.as_deref(),
                    iters as usize,
                    json,
                    out.as_deref()
                )
            )
        }
        Command::Fuse {
            config,
            weights,
            out,
        } => {
            let c = load_config(&config)?;
            let bytes = read(&weights)?;
            match weights_dtype(&bytes).map_err(Error::from)? {
                Some(hyperseg::DType::F64) => cmd_fuse::<f64>(&c, &weights, &out),
                _ => cmd_fuse::<f32>(&c, &weights, &out),
            }
        }
        Command::Flops {
            config,
            fused,
            sweep_groups,
            json,
        } => cmd_flops(&load_config(&config)?, fused, sweep_groups, json),
        Command::Inspect { config, weights } => cmd_inspect(config.as_deref(), weights.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let workers = cli.workers.map(usize::from);
    match with_workers(workers, || dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
