//! `fernnet` command line: train, evaluate, report costs, check gradients
//! and generate synthetic data.
//!
//! Exit codes: 0 success, 1 verification failure (or a non-finite training
//! loss), 2 usage, I/O or format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fernnet::costmodel::{
    count_model_params, count_ops, count_params, estimate_energy, EnergyTable,
};
use fernnet::fern::WeightMode;
use fernnet::io::{read_dataset, read_idx_pair, synthesize, write_dataset, Checkpoint, RunConfig};
use fernnet::train::gradcheck::{check_fragment_trials, Fragment};
use fernnet::train::{build_model, evaluate, train_epochs, Backbone, Dataset};
use fernnet::{DType, Element, Error};

#[derive(Parser)]
#[command(
    name = "fernnet",
    version,
    about = "Differentiable random-fern networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint; prints one metrics line per epoch.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Parameter counts, per-layer operation counts and energy estimates.
    Report(ReportArgs),
    /// Finite-difference check of every layer kind's gradients.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic two-class texture datasets.
    Synth(SynthArgs),
    /// Convert a two-class subset of an IDX image/label pair to a dataset file.
    ImportIdx(ImportIdxArgs),
}

/// Settings that patch a loaded configuration.
#[derive(Args, Default)]
struct Overrides {
    /// Seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    #[arg(long, value_parser = ["literal_l2", "normalized_proximity", "mean_l1"])]
    weight_mode: Option<String>,
    /// Replace every block's backbone.
    #[arg(long, value_parser = ["fern", "conv", "binconv"])]
    backbone: Option<String>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) -> fernnet::Result<()> {
        if let Some(seed) = self.seed {
            config.model.seed = seed;
            config.train.seed = seed;
        }
        if let Some(d) = &self.dtype {
            config.model.dtype = DType::parse(d).expect("validated by clap");
        }
        if let Some(m) = &self.weight_mode {
            config.model.fern.weight_mode = WeightMode::parse(m)?;
        }
        if let Some(b) = &self.backbone {
            let backbone = Backbone::parse(b)?;
            config.model.set_backbone(backbone);
            config.model.name = backbone.name().to_string();
        }
        config.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training set (FDS1 file).
    #[arg(long)]
    data: PathBuf,
    /// Held-out set evaluated after every epoch; defaults to the training set.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Model configuration; repeat to compare several models.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Trained checkpoint; repeatable, reported after the configs.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Per-operation energies (`kind = joules` lines); defaults to the shipped table.
    #[arg(long)]
    energy_table: Option<PathBuf>,
    /// Input shape `C,H,W` (one image); defaults to each model's nominal input.
    #[arg(long, value_parser = parse_shape)]
    input: Option<[usize; 3]>,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Configuration whose fern weight mode is used for the network fragment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Minimum distance of every sampled kink input from its kink.
    #[arg(long, default_value_t = 1e-3)]
    margin: f64,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient checks always run in f64.
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    /// Only check fern fragments with this weight mode.
    #[arg(long, value_parser = ["literal_l2", "normalized_proximity", "mean_l1"])]
    weight_mode: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4096)]
    n_train: usize,
    #[arg(long, default_value_t = 1024)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training set output.
    #[arg(long)]
    out: PathBuf,
    /// Test set output (generated from a seed derived from `--seed`).
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct ImportIdxArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// The two digit classes to keep, `A,B`; A becomes label 0.
    #[arg(long, value_parser = parse_classes)]
    classes: (u8, u8),
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|_| format!("`{d}` is not a size")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| "expected C,H,W".to_string())
}

fn parse_classes(s: &str) -> Result<(u8, u8), String> {
    let (a, b) = s.split_once(',').ok_or("expected A,B")?;
    let parse = |v: &str| {
        v.trim()
            .parse::<u8>()
            .map_err(|_| format!("`{v}` is not a class"))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if a == b {
        return Err("the two classes must differ".into());
    }
    Ok((a, b))
}

/// Ways a command can fail, mapped to exit codes.
enum Failure {
    /// Checks ran and did not pass (exit 1).
    Verification(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::ImportIdx(a) => import_idx(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("fernnet: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e @ Error::NonFinite(_))) => {
            eprintln!("fernnet: training aborted: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("fernnet: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_data<T: Element>(path: &Path) -> fernnet::Result<Dataset<T>> {
    let d = read_dataset(path)?;
    Dataset::new(d.images().cast(), d.labels().to_vec())
}

fn train(args: TrainArgs) -> Outcome {
    let mut config = RunConfig::load(&args.config)?;
    args.overrides.apply(&mut config)?;
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    match config.model.dtype {
        DType::F32 => train_as::<f32>(&args, &config),
        DType::F64 => train_as::<f64>(&args, &config),
    }
}

fn train_as<T: Element>(args: &TrainArgs, config: &RunConfig) -> Outcome {
    let train_set = load_data::<T>(&args.data)?;
    let test_set = match &args.test_data {
        Some(p) => load_data::<T>(p)?,
        None => train_set.clone(),
    };
    if train_set.sample_shape() != config.model.input {
        return Err(Error::Config(format!(
            "{} holds {:?} samples but the model expects {:?}",
            args.data.display(),
            train_set.sample_shape(),
            config.model.input
        ))
        .into());
    }
    let mut model = build_model::<T>(&config.model)?;
    let start = Instant::now();
    train_epochs(&mut model, &train_set, &test_set, &config.train, |r| {
        println!(
            "epoch={} train_loss={:.6} test_acc={:.4} wall_seconds={:.2}",
            r.epoch,
            r.train_loss,
            r.test_accuracy,
            start.elapsed().as_secs_f64()
        );
    })?;
    Checkpoint::from_model(&model, config).save(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let accuracy = match ckpt.config.model.dtype {
        DType::F32 => evaluate(&mut ckpt.to_model::<f32>()?, &load_data(&args.data)?)?,
        DType::F64 => evaluate(&mut ckpt.to_model::<f64>()?, &load_data(&args.data)?)?,
    };
    println!("accuracy={accuracy:.4}");
    Ok(())
}

fn report(args: ReportArgs) -> Outcome {
    if args.config.is_empty() && args.checkpoint.is_empty() {
        return Err(
            Error::Config("report needs at least one --config or --checkpoint".into()).into(),
        );
    }
    let table = match &args.energy_table {
        Some(p) => EnergyTable::load(p)?,
        None => EnergyTable::default(),
    };
    let mut models = Vec::new();
    for path in &args.config {
        let mut cfg = RunConfig::load(path)?;
        args.overrides.apply(&mut cfg)?;
        let params = (
            count_params(&cfg.model, false),
            count_params(&cfg.model, true),
        );
        models.push((cfg, params));
    }
    for path in &args.checkpoint {
        let mut ckpt = Checkpoint::load(path)?;
        args.overrides.apply(&mut ckpt.config)?;
        // count the tensors actually stored, not just the declared shapes
        let model = ckpt.to_model::<f32>()?;
        let params = (
            count_model_params(&model, false),
            count_model_params(&model, true),
        );
        let file = path.file_name().map_or_else(
            || path.display().to_string(),
            |f| f.to_string_lossy().into_owned(),
        );
        ckpt.config.model.name = format!("{}@{file}", ckpt.config.model.name);
        models.push((ckpt.config, params));
    }

    let mut rows = Vec::new();
    let mut json_models = Vec::new();
    for (cfg, (trainable, total)) in &models {
        let input = args.input.unwrap_or(cfg.model.input);
        let ops = count_ops(&cfg.model, &input)?;
        let energy = estimate_energy(&ops.total, &table)?;
        rows.push((cfg.model.name.clone(), energy));
        if args.json {
            json_models.push(json!({
                "name": cfg.model.name,
                "params": { "trainable": trainable, "total": total },
                "input": ops.input_shape,
                "layers": ops.layers,
                "total_ops": ops.total,
                "energy_joules": energy,
            }));
            continue;
        }
        println!("model {}", cfg.model.name);
        println!("  params trainable={trainable} including_frozen={total}");
        let [n, c, h, w] = ops.input_shape;
        println!("  input {n}x{c}x{h}x{w}");
        for layer in &ops.layers {
            println!(
                "  {:<10} outputs={:<8} {}",
                layer.name, layer.output_elements, layer.counts
            );
        }
        println!("  total      {}", ops.total);
        println!("  energy_joules={energy:.6e} energy_uj={:.4}", energy * 1e6);
    }
    let mut ordered = rows.clone();
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1));
    if args.json {
        let ordering: Vec<&str> = ordered.iter().map(|(n, _)| n.as_str()).collect();
        let out = json!({ "models": json_models, "energy_ordering": ordering });
        println!(
            "{}",
            serde_json::to_string_pretty(&out).expect("serializable")
        );
    } else if ordered.len() > 1 {
        let line: Vec<String> = ordered
            .iter()
            .map(|(n, e)| format!("{n} ({:.4} uJ)", e * 1e6))
            .collect();
        println!("energy ordering: {}", line.join(" < "));
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Outcome {
    if args.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()).into());
    }
    if args.dtype.as_deref() == Some("f32") {
        return Err(Error::Config("gradient checks run in f64 only".into()).into());
    }
    if !(args.epsilon > 0.0) || !(args.margin >= 0.0) {
        return Err(
            Error::Config("--epsilon must be positive and --margin non-negative".into()).into(),
        );
    }
    let net_mode = match &args.config {
        Some(p) => RunConfig::load(p)?.model.fern.weight_mode,
        None => WeightMode::NormalizedProximity,
    };
    let only = args
        .weight_mode
        .as_deref()
        .map(WeightMode::parse)
        .transpose()?;
    let fragments: Vec<Fragment> = Fragment::all()
        .into_iter()
        .map(|f| match f {
            Fragment::FernNet(_) => Fragment::FernNet(only.unwrap_or(net_mode)),
            other => other,
        })
        .filter(|f| match (only, f) {
            (Some(m), Fragment::Fern(x) | Fragment::FernConv(x)) => *x == m,
            _ => true,
        })
        .collect();
    let mut failures = Vec::new();
    for (i, fragment) in fragments.iter().enumerate() {
        let seed = args.seed.wrapping_add(i as u64);
        let name = fragment.name();
        match check_fragment_trials(*fragment, seed, args.trials, args.margin, args.epsilon) {
            Ok(r) => {
                let pass = r.max_rel_error < fragment.tolerance();
                println!(
                    "{name:<32} max_rel_error={:.3e} tolerance={:.0e} coords={} {}",
                    r.max_rel_error,
                    fragment.tolerance(),
                    r.checked,
                    if pass { "PASS" } else { "FAIL" }
                );
                if !pass {
                    failures.push(name);
                }
            }
            Err(e @ Error::Sampling { .. }) => {
                println!("{name:<32} FAIL ({e})");
                failures.push(name);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        if args.margin == 0.0 {
            eprintln!("note: margin 0 allows samples on a fern or relu kink, where finite differences are not expected to match");
        }
        Err(Failure::Verification(format!(
            "gradient check failed for {}",
            failures.join(", ")
        )))
    }
}

/// Offset mixed into the seed of the test split so it never repeats the training samples.
const TEST_SEED_OFFSET: u64 = 0x7E57_5EED;

fn synth(args: SynthArgs) -> Outcome {
    if args.n_train < 2 || (args.test_out.is_some() && args.n_test < 2) {
        return Err(Error::Config("synthetic datasets need at least 2 samples".into()).into());
    }
    write_dataset(&args.out, &synthesize(args.n_train, args.seed)?)?;
    println!("wrote {} ({} samples)", args.out.display(), args.n_train);
    if let Some(path) = &args.test_out {
        let test = synthesize(args.n_test, args.seed ^ TEST_SEED_OFFSET)?;
        write_dataset(path, &test)?;
        println!("wrote {} ({} samples)", path.display(), args.n_test);
    }
    Ok(())
}

fn import_idx(args: ImportIdxArgs) -> Outcome {
    let data = read_idx_pair(&args.images, &args.labels, args.classes)?;
    write_dataset(&args.out, &data)?;
    let [c, h, w] = data.sample_shape();
    println!(
        "wrote {} ({} samples of {c}x{h}x{w})",
        args.out.display(),
        data.len()
    );
    Ok(())
}
