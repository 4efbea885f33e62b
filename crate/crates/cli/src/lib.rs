//! Command implementations behind the `dcn` binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};

use dcn_core::bench::{run_bench, to_csv, BenchConfig};
use dcn_core::config::NetworkConfig;
use dcn_core::data::{load_cifar10, synth_shapes, LabeledDataset};
use dcn_core::gradcheck::{check_network, run_all, GradCheckOptions};
use dcn_core::model_file::ModelFile;
use dcn_core::network::Network;
use dcn_core::optim::{train_with, TrainConfig};
use dcn_core::prune::{prune_network, PruneReport, DEFAULT_DISCARD_FRACTION, DEFAULT_MERGE_TAU};
use dcn_core::tensor::Tensor4;
use dcn_core::viz::visualize_feature;

#[derive(Parser, Debug)]
#[command(
    name = "dcn",
    version,
    about = "Compositional Gaussian-filter networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write the model file and history CSV.
    Train(TrainArgs),
    /// Report test loss and accuracy of a saved model.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Time direct against separable inference.
    Bench(BenchArgs),
    /// Merge overlapping and drop small components of a saved model.
    Prune(PruneArgs),
    /// Render mean-reconstruction images for features of a saved model.
    Viz(VizArgs),
    /// Write a synthetic shape dataset as PGM files plus labels.csv.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Cifar,
    Synth,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset to use; defaults to cifar when a data directory is given.
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "DCN_CIFAR10_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Synthetic training samples.
    #[arg(long, default_value_t = 2000)]
    pub synth_train: usize,
    /// Synthetic test samples.
    #[arg(long, default_value_t = 400)]
    pub synth_test: usize,
    /// Seed of the synthetic training split; the test split uses seed + 1.
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; defaults to the model path with a `.history.csv` suffix.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Seeds parameter initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training is always single-threaded and reproducible; the flag is
    /// accepted for scripts that request it explicitly.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 500)]
    pub eval_interval: usize,
    /// Evaluate on at most this many test samples.
    #[arg(long)]
    pub eval_samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Also check the whole network described by this config end to end.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random compositional layer cases.
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Scale analytic gradients by 1 + this value (negative control).
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Square kernel sides.
    #[arg(long, value_delimiter = ',', default_values_t = [5, 7, 9, 11, 13, 15])]
    pub kernels: Vec<usize>,
    /// Components per (feature, channel) group.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pruned model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DISCARD_FRACTION)]
    pub prune_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_MERGE_TAU)]
    pub merge_tau: f64,
    /// Compositional layers to prune (1-based, repeatable); all by default.
    #[arg(long)]
    pub layer: Vec<usize>,
    /// Write the report as CSV here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Data for the test-loss comparison; skipped when no dataset is given.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Compositional layer (1-based).
    #[arg(long)]
    pub layer: usize,
    /// Features to render (repeatable); all features of the layer by default.
    #[arg(long)]
    pub feature: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(&a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Bench(a) => cmd_bench(&a).map(|_| ExitCode::SUCCESS),
        Command::Prune(a) => cmd_prune(&a).map(|_| ExitCode::SUCCESS),
        Command::Viz(a) => cmd_viz(&a).map(|_| ExitCode::SUCCESS),
        Command::Synth(a) => cmd_synth(&a).map(|_| ExitCode::SUCCESS),
    }
}

/// Loads train and test splits matching `config`'s input, both centered
/// with the training means. `None` when no dataset was requested.
pub fn load_data(
    args: &DataArgs,
    config: &NetworkConfig,
) -> Result<Option<(LabeledDataset, LabeledDataset)>> {
    let kind = match (args.dataset, &args.data_dir) {
        (Some(k), _) => k,
        (None, Some(_)) => DatasetKind::Cifar,
        (None, None) => return Ok(None),
    };
    let (train, test) = match kind {
        DatasetKind::Cifar => {
            let Some(dir) = &args.data_dir else {
                bail!("the cifar dataset needs --data-dir (or DCN_CIFAR10_DIR)");
            };
            load_cifar10(dir)?
        }
        DatasetKind::Synth => {
            let input = config.input;
            if input.channels != 1 {
                bail!(
                    "synthetic shapes are single-channel, config expects {} channels",
                    input.channels
                );
            }
            let classes = config.classes();
            let mut train = synth_shapes(
                args.synth_seed,
                args.synth_train,
                classes,
                input.width,
                input.height,
            )?;
            let mut test = synth_shapes(
                args.synth_seed + 1,
                args.synth_test,
                classes,
                input.width,
                input.height,
            )?;
            LabeledDataset::center_pair(&mut train, &mut test)?;
            (train, test)
        }
    };
    let input = config.input;
    let dims = [input.channels, input.height, input.width];
    if train.images.dims()[1..] != dims {
        bail!(
            "dataset images are {:?}, config expects {:?}",
            &train.images.dims()[1..],
            dims
        );
    }
    Ok(Some((train, test)))
}

fn require_data(
    args: &DataArgs,
    config: &NetworkConfig,
) -> Result<(LabeledDataset, LabeledDataset)> {
    load_data(args, config)?.context("no dataset: pass --data-dir for CIFAR-10 or --dataset synth")
}

fn default_history_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    out.with_file_name(name)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = NetworkConfig::load(&args.config)?;
    let (train_set, test_set) = require_data(&args.data, &config)?;
    let mut net = Network::new(config, args.seed)?;
    let tc = TrainConfig {
        batch_size: args.batch_size,
        iterations: args.iterations,
        seed: args.seed,
        eval_interval: args.eval_interval,
        eval_samples: args.eval_samples,
        ..Default::default()
    };
    eprintln!(
        "training {} parameters on {} samples for {} iterations",
        net.param_count(),
        train_set.len(),
        args.iterations
    );
    let start = Instant::now();
    let history = train_with(&mut net, &train_set, &test_set, &tc, |r| {
        eprintln!(
            "iter {:>6}  train loss {:.4}  test loss {:.4}  test acc {:.4}  ({:.0}s)",
            r.iteration,
            r.train_loss,
            r.test_loss.unwrap_or(f64::NAN),
            r.test_accuracy.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    })?;
    let model = ModelFile::new(net, args.seed, args.iterations as u64);
    write(&args.out, model.to_bytes())?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| default_history_path(&args.out));
    write(&history_path, history.to_csv())?;
    let acc = history
        .last_eval()
        .and_then(|r| r.test_accuracy)
        .unwrap_or(f64::NAN);
    println!("final test accuracy {:.4}", acc);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(f64, f64)> {
    let model = ModelFile::load(&args.model)?;
    let (_, test) = require_data(&args.data, model.network.config())?;
    let (loss, acc) = model
        .network
        .evaluate(&test.images, &test.labels, args.batch_size)?;
    println!("test loss {:.6}", loss);
    println!("test accuracy {:.4}", acc);
    Ok((loss, acc))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let opts = GradCheckOptions {
        perturb: args.perturb,
        ..Default::default()
    };
    let mut report = run_all(args.seed, args.cases, &opts)?;
    if let Some(path) = &args.config {
        let net = Network::new(NetworkConfig::load(path)?, args.seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
        let shape = net.config().input;
        let input = Tensor4::from_fn(
            2,
            shape.channels,
            shape.height,
            shape.width,
            |_, _, _, _| rng.random_range(-1.0..1.0),
        );
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..net.classes())).collect();
        report.merge(&check_network(&net, &input, &labels, 200, &opts)?);
    }
    print!("{}", report);
    if report.passed() {
        println!("PASS (tolerance {:e})", report.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAIL (tolerance {:e}, worst {:e})",
            report.tol,
            report.worst()
        );
        Ok(ExitCode::FAILURE)
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<String> {
    let cfg = BenchConfig {
        kernels: args.kernels.clone(),
        components: args.components,
        features: args.features,
        channels: args.channels,
        height: args.height,
        width: args.width,
        batch: 1,
        repeats: args.repeats,
        seed: args.seed,
    };
    if let Some(&k) = cfg.kernels.iter().find(|&&k| k < 4) {
        bail!("kernel side {} is below the minimum of 4", k);
    }
    let csv = to_csv(&run_bench(&cfg)?);
    print!("{}", csv);
    if let Some(out) = &args.out {
        write(out, &csv)?;
    }
    Ok(csv)
}

pub fn cmd_prune(args: &PruneArgs) -> Result<Vec<PruneReport>> {
    let model = ModelFile::load(&args.model)?;
    let data = load_data(&args.data, model.network.config())?;
    let score = |net: &Network| -> Result<Option<(f64, f64)>> {
        match &data {
            Some((_, test)) => Ok(Some(net.evaluate(
                &test.images,
                &test.labels,
                args.batch_size,
            )?)),
            None => Ok(None),
        }
    };
    let first = score(&model.network)?;
    let mut net = model.network.clone();
    let layers: Vec<usize> = if args.layer.is_empty() {
        (1..=net.comp_layer_indices().len()).collect()
    } else {
        args.layer.clone()
    };
    // one layer at a time so every report carries its own loss change
    let mut reports = Vec::new();
    let mut current = first;
    for l in layers {
        let mut r = prune_network(&mut net, &[l], args.merge_tau, args.prune_fraction)?;
        let next = score(&net)?;
        for r in &mut r {
            r.loss_before = current.map(|s| s.0);
            r.loss_after = next.map(|s| s.0);
            print!("{}", r.to_text());
        }
        reports.extend(r);
        current = next;
    }
    if let (Some(b), Some(a)) = (first, current) {
        println!("test loss {:.6} -> {:.6}", b.0, a.0);
        println!("test accuracy {:.4} -> {:.4}", b.1, a.1);
    }
    if let Some(path) = &args.report {
        let mut csv = String::from(PruneReport::CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.to_csv_row());
            csv.push('\n');
        }
        write(path, csv)?;
    }
    write(
        &args.out,
        ModelFile::new(net, model.seed, model.iterations).to_bytes(),
    )?;
    Ok(reports)
}

pub fn cmd_viz(args: &VizArgs) -> Result<Vec<PathBuf>> {
    let model = ModelFile::load(&args.model)?;
    let net = &model.network;
    let features = if args.feature.is_empty() {
        let comps = net.comp_layer_indices();
        let Some(&idx) = args.layer.checked_sub(1).and_then(|i| comps.get(i)) else {
            bail!(
                "compositional layer {} requested, network has {}",
                args.layer,
                comps.len()
            );
        };
        let dcn_core::network::Layer::CompConv(bank) = &net.layers()[idx] else {
            unreachable!("index of a compositional layer")
        };
        (0..bank.features()).collect()
    } else {
        args.feature.clone()
    };
    let mut files = Vec::new();
    for f in features {
        let out = visualize_feature(net, args.layer, f, &args.out)?;
        let max_var = out.recons.iter().map(|r| r.var).fold(0.0, f64::max);
        println!(
            "layer {} feature {}: {} leaf Gaussians, max variance {:.3}",
            args.layer,
            f,
            out.recons.len(),
            max_var
        );
        println!("  {}", out.blobs.display());
        println!("  {}", out.boundary.display());
        files.push(out.blobs);
        files.push(out.boundary);
    }
    Ok(files)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let set = synth_shapes(args.seed, args.count, args.classes, args.width, args.height)?;
    dcn_core::data::export_pgm(&set, &args.out)?;
    println!("wrote {} images to {}", set.len(), args.out.display());
    Ok(())
}
