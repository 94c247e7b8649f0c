use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use sunet::harness::dataset::Manifest;
use sunet::harness::synth::{synth_dataset, SynthConfig};
use sunet::harness::trainer::{
    emit_activation_histogram, run_crossval, train_single, write_crossval_outputs, TrainConfig,
};
use sunet::network::{grad_check_suite, Activation, LossConfig, NetworkConfig};
use sunet::snn::{selfnorm_probe, ProbeActivation};
use sunet::stats::{read_metric_csv, write_tables, MetricRow};
use sunet::Tensor;

#[derive(Parser)]
#[command(name = "sunet", version, about = "Self-normalising U-Net segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    /// SELU activations, no dropout
    Sunet,
    /// SELU activations with alpha-dropout 0.5
    SunetDropout,
    /// batch-norm + ReLU baseline
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 16 channels and short training budgets; runs in minutes on a laptop
    Desk,
}

#[derive(clap::Args)]
struct RunArgs {
    /// dataset root containing manifest.json
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional "network", "loss" and "train" sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Arch::Sunet)]
    arch: Arch,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        patients: usize,
        #[arg(long, default_value_t = 3)]
        images_per_patient: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Train a single split (the first leave-one-patient-out fold)
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// iterations at which to checkpoint and emit activation histograms
        #[arg(long, value_delimiter = ',')]
        hist_iterations: Vec<usize>,
    },
    /// Full leave-one-patient-out cross-validation
    Crossval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build the report tables from crossval output directories
    Report {
        /// crossval output dir, optionally as name=path; repeatable
        #[arg(long, required = true)]
        input: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Activation-moment probe of deep SELU vs ReLU chains
    SelfnormCheck {
        #[arg(long, default_value_t = 20)]
        depth: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference validation of every differentiable building block
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    network: Option<NetworkConfig>,
    loss: Option<LossConfig>,
    train: Option<TrainConfig>,
}

fn resolve_configs(
    run: &RunArgs,
) -> Result<(NetworkConfig, LossConfig, TrainConfig), Box<dyn std::error::Error>> {
    let mut net = NetworkConfig::default();
    let mut loss = LossConfig::default();
    let mut train = TrainConfig::default();
    if run.preset == Some(Preset::Desk) {
        (net, train) = sunet::harness::trainer::desk_preset();
    }
    if let Some(path) = &run.config {
        let file: FileConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(n) = file.network {
            net = n;
        }
        if let Some(l) = file.loss {
            loss = l;
        }
        if let Some(t) = file.train {
            train = t;
        }
    }
    // the architecture flag always wins on activation/dropout so that the
    // three variants differ in nothing else
    match run.arch {
        Arch::Sunet => {
            net.activation = Activation::Selu;
            net.dropout_rate = 0.0;
        }
        Arch::SunetDropout => {
            net.activation = Activation::Selu;
            net.dropout_rate = 0.5;
        }
        Arch::Unet => {
            net.activation = Activation::BatchnormRelu;
            net.dropout_rate = 0.0;
        }
    }
    train.seed = run.seed;
    Ok((net, loss, train))
}

fn read_run_dir(spec: &str) -> Result<(String, Vec<MetricRow>), Box<dyn std::error::Error>> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let n = p
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("run")
                .to_string();
            (n, p)
        }
    };
    let mut rows = read_metric_csv(&path.join("metrics.csv"))?;
    let inter_path = path.join("interobserver.csv");
    if inter_path.is_file() {
        rows.extend(read_metric_csv(&inter_path)?);
    }
    Ok((name, rows))
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Synth { out_dir, seed, patients, images_per_patient, height, width } => {
            let cfg = SynthConfig {
                n_patients: patients,
                images_per_patient,
                height,
                width,
                seed,
            };
            let manifest = synth_dataset(&out_dir, &cfg)?;
            println!(
                "wrote {} images for {} patients under {}",
                manifest.entries.len(),
                patients,
                out_dir.display()
            );
        }
        Cmd::Train { run: args, hist_iterations } => {
            let manifest = Manifest::load(&args.manifest)?;
            let (net, loss, mut train) = resolve_configs(&args)?;
            train.checkpoint_iterations = hist_iterations.clone();
            let out = train_single(&args.manifest, &manifest, &net, &loss, &train, &args.out_dir)?;
            if !hist_iterations.is_empty() {
                // fixed standard-normal probe input, deterministic in the seed
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                let mut probe = Tensor::zeros(&[1, 1, 32, 32]);
                use rand_distr::Distribution;
                let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
                for v in probe.data_mut() {
                    *v = normal.sample(&mut rng);
                }
                let checkpoints: Vec<(usize, PathBuf)> = hist_iterations
                    .iter()
                    .map(|&it| {
                        (it, args.out_dir.join(format!("checkpoints/ckpt_{it:05}.bin")))
                    })
                    .collect();
                emit_activation_histogram(
                    &checkpoints,
                    &probe,
                    &args.out_dir.join("activation_histogram.csv"),
                )?;
            }
            println!(
                "trained one fold: {} test rows, outputs in {}",
                out.metrics.len(),
                args.out_dir.display()
            );
        }
        Cmd::Crossval { run: args } => {
            let manifest = Manifest::load(&args.manifest)?;
            let (net, loss, mut train) = resolve_configs(&args)?;
            train.eval_curve = true;
            let out = run_crossval(&args.manifest, &manifest, &net, &loss, &train)?;
            write_crossval_outputs(&args.out_dir, &out)?;
            println!(
                "crossval complete: {} computer-to-operator rows in {}",
                out.metrics.len(),
                args.out_dir.display()
            );
        }
        Cmd::Report { input, out_dir } => {
            let methods = input
                .iter()
                .map(|s| read_run_dir(s))
                .collect::<Result<Vec<_>, _>>()?;
            write_tables(&out_dir, &methods)?;
            println!("wrote report tables to {}", out_dir.display());
        }
        Cmd::SelfnormCheck { depth, width, samples, seed } => {
            for (label, act) in [("selu", ProbeActivation::Selu), ("relu", ProbeActivation::Relu)]
            {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                println!("{label} chain, depth {depth}, width {width}, {samples} samples:");
                for p in selfnorm_probe(depth, width, samples, act, &mut rng) {
                    println!(
                        "  layer {:>2}: mean {:+.4}  variance {:.4}",
                        p.layer, p.mean, p.variance
                    );
                }
            }
        }
        Cmd::GradCheck { seed } => {
            let mut worst = 0.0f64;
            for (name, err) in grad_check_suite(seed)? {
                println!("{name:<24} max relative error {err:.3e}");
                worst = worst.max(err);
            }
            if worst >= 1e-5 {
                return Err(format!("gradient check failed: worst error {worst:.3e}").into());
            }
            println!("all gradients within 1e-5");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
