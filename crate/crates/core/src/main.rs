use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use protodiv::bagdata::{load_corpus, load_manifest, manifest_path, FeatureBag};
use protodiv::divider::{write_assignments_csv, DividerConfig, Scheme};
use protodiv::metrics::make_folds;
use protodiv::mil::checkpoint;
use protodiv::prototype::{attention_prototype, mean_prototype, write_prototypes_csv, PrototypeModule, PrototypeRow};
use protodiv::rng;
use protodiv::synthgen::{self, SynthConfig};
use protodiv::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "protodiv", version, about = "Prototype-guided pseudo-bag division for MIL")]
struct Cli {
    /// Diagnostic verbosity on stderr (off, error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest + binary bags).
    Gen(GenArgs),
    /// Divide every bag and write the per-instance assignment CSV.
    Divide(DivideArgs),
    /// Cross-validated training and evaluation.
    Train(TrainArgs),
    /// (n, l) grid of mean test AUC.
    Sweep(SweepArgs),
    /// Time each division scheme on up to 100 bags.
    Bench(BenchArgs),
    /// Write one prototype per bag.
    ExportPrototypes(ExportArgs),
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected an integer >= 1, got {s:?}")),
    }
}

fn unit_fraction(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        _ => Err(format!("expected a value in (0, 1], got {s:?}")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite value >= 0, got {s:?}")),
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60, value_parser = positive)]
    bags: usize,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    k_min: usize,
    #[arg(long, default_value_t = 400, value_parser = positive)]
    k_max: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    dim: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    phenotypes: usize,
    #[arg(long, default_value_t = 0.1, value_parser = unit_fraction)]
    witness: f64,
    #[arg(long, default_value_t = 0.3, value_parser = non_negative)]
    sigma: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Clone)]
struct DivisionArgs {
    /// Corpus directory (holding manifest.csv) or manifest path.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "proto_attn")]
    scheme: Scheme,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    n: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    l: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Gated-attention hidden size.
    #[arg(long, default_value_t = 128, value_parser = positive)]
    hidden_dim: usize,
}

#[derive(Args)]
struct DivideArgs {
    #[command(flatten)]
    div: DivisionArgs,
    /// Prototype-module checkpoint for proto_attn (default: untrained module).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 50, value_parser = positive)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    proto_lr: f64,
    #[arg(long, default_value_t = 42)]
    folds_seed: u64,
    /// Train folds concurrently.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    parallel_folds: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    div: DivisionArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Metrics JSON path; wall-clock timings go to `<stem>.timings.json` beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    div: DivisionArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 6, 8, 10, 15, 20, 25, 30])]
    n_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 6, 8, 12, 15])]
    l_values: Vec<usize>,
    /// Do not add the shared n=1 column.
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    div: DivisionArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrototypeChoice {
    Mean,
    Attention,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = PrototypeChoice::Attention)]
    kind: PrototypeChoice,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load(data: &Path) -> anyhow::Result<Vec<FeatureBag>> {
    let path = manifest_path(data);
    let manifest = load_manifest(&path).with_context(|| format!("loading {}", path.display()))?;
    let bags = load_corpus(&manifest)?;
    log::info!("loaded {} bags (d={}) from {}", bags.len(), manifest.dim, path.display());
    Ok(bags)
}

fn prototype_module(checkpoint: Option<&Path>, dim: usize, hidden_dim: usize, seed: u64) -> anyhow::Result<PrototypeModule> {
    match checkpoint {
        Some(p) => {
            let (net, cfg) = checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            if cfg.get("kind").and_then(|k| k.as_str()) != Some("prototype") {
                bail!("{} is not a prototype-module checkpoint", p.display());
            }
            if net.input_dim() != dim {
                bail!("checkpoint expects d={}, corpus has d={dim}", net.input_dim());
            }
            Ok(PrototypeModule::from_net(net))
        }
        None => Ok(PrototypeModule::new(dim, hidden_dim, rng::tagged_seed(seed, "proto-init", 0))),
    }
}

fn divider_config(a: &DivisionArgs) -> DividerConfig {
    DividerConfig {
        scheme: a.scheme,
        n: a.n,
        l: a.l,
        seed: a.seed,
    }
}

fn train_config(a: &DivisionArgs, t: &TrainingArgs) -> TrainConfig {
    TrainConfig {
        epochs: t.epochs,
        lr: t.lr,
        proto_lr: t.proto_lr,
        hidden_dim: a.hidden_dim,
        parallel_folds: t.parallel_folds,
    }
}

fn folds_for(bags: &[FeatureBag], seed: u64) -> anyhow::Result<Vec<protodiv::metrics::FoldSplit>> {
    let ids: Vec<String> = bags.iter().map(|b| b.bag_id.clone()).collect();
    let labels: Vec<_> = bags.iter().map(|b| b.label).collect();
    Ok(make_folds(&ids, &labels, seed)?)
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        num_bags: a.bags,
        k_min: a.k_min,
        k_max: a.k_max,
        dim: a.dim,
        num_phenotypes: a.phenotypes,
        witness_fraction: a.witness,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let entries = synthgen::generate(&cfg, &a.out)?;
    log::info!("wrote {} bags to {}", entries.len(), a.out.display());
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok(())
}

fn cmd_divide(a: DivideArgs) -> anyhow::Result<()> {
    let bags = load(&a.div.data)?;
    let cfg = divider_config(&a.div);
    let module = match cfg.scheme {
        Scheme::ProtoAttn => Some(prototype_module(a.checkpoint.as_deref(), bags[0].dim(), a.div.hidden_dim, a.div.seed)?),
        _ => None,
    };
    let mut assignments = Vec::new();
    let mut kept = Vec::new();
    for bag in &bags {
        if bag.len() < cfg.n {
            eprintln!("warning: skipping {}: K={} < n={}", bag.bag_id, bag.len(), cfg.n);
            continue;
        }
        let seed = rng::bag_epoch_seed(cfg.seed, &bag.bag_id, 0);
        assignments.push(trainer::divide_bag(bag, &cfg.with_seed(seed), module.as_ref())?);
        kept.push(bag);
    }
    if assignments.is_empty() {
        bail!("every bag has fewer than n={} instances", cfg.n);
    }
    let mut out = output(a.out.as_deref())?;
    write_assignments_csv(&mut out, &assignments, &kept)?;
    out.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let bags = load(&a.div.data)?;
    let folds = folds_for(&bags, a.training.folds_seed)?;
    let dcfg = divider_config(&a.div);
    let tcfg = train_config(&a.div, &a.training);
    let out = trainer::run_experiment(&bags, &dcfg, &tcfg, &folds, a.div.seed)?;
    for f in &out.report.folds {
        log::info!(
            "fold {}: best epoch {} val AUC {:.4} | test AUC {:.4} acc {:.4} sen {:.4}",
            f.fold_id, f.best_epoch, f.val_auc, f.auc, f.acc, f.sen
        );
    }
    log::info!("mean test AUC {:.4} ± {:.4}", out.report.auc.mean, out.report.auc.std);

    let config = json!({
        "data": a.div.data,
        "divider": dcfg,
        "training": tcfg,
        "seed": a.div.seed,
        "folds_seed": a.training.folds_seed,
        "folds": folds,
    });
    let doc = json!({ "config": config, "report": out.report });
    fs::write(&a.out, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", a.out.display()))?;

    let timings = json!({
        "total_seconds": out.seconds,
        "fold_seconds": out.folds.iter().map(|f| f.seconds).collect::<Vec<_>>(),
    });
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into());
    let timing_path = a.out.with_file_name(format!("{stem}.timings.json"));
    fs::write(&timing_path, serde_json::to_string_pretty(&timings)? + "\n")?;

    if let Some(dir) = &a.checkpoint_dir {
        fs::create_dir_all(dir)?;
        for f in &out.folds {
            let id = f.metrics.fold_id;
            let echo = json!({"kind": "mil", "fold": id, "best_epoch": f.metrics.best_epoch, "divider": dcfg, "training": tcfg});
            checkpoint::save(&dir.join(format!("fold_{id}_mil.ckpt")), &f.best_model.net, &echo)?;
            if let Some(m) = &f.best_prototype_module {
                let echo = json!({"kind": "prototype", "fold": id, "best_epoch": f.metrics.best_epoch, "divider": dcfg, "training": tcfg});
                checkpoint::save(&dir.join(format!("fold_{id}_prototype.ckpt")), &m.net, &echo)?;
            }
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let bags = load(&a.div.data)?;
    let folds = folds_for(&bags, a.training.folds_seed)?;
    let grid = trainer::run_sweep(
        &bags,
        &a.n_values,
        &a.l_values,
        &divider_config(&a.div),
        &train_config(&a.div, &a.training),
        &folds,
        a.div.seed,
        !a.no_baseline,
    )?;
    let mut out = output(a.out.as_deref())?;
    grid.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let bags = load(&a.div.data)?;
    let sample = trainer::bench_sample(&bags, a.div.seed);
    let module = prototype_module(a.checkpoint.as_deref(), bags[0].dim(), a.div.hidden_dim, a.div.seed)?;
    let cfg = divider_config(&a.div);
    let rows = trainer::bench_division(&sample, &Scheme::ALL, &cfg, Some(&module))?;
    for r in &rows {
        log::info!("{:<11} {:>9.4} s over {} bags", r.scheme.as_str(), r.total_seconds, r.bags);
    }
    let mut out = output(a.out.as_deref())?;
    trainer::write_bench_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn cmd_export(a: ExportArgs) -> anyhow::Result<()> {
    let bags = load(&a.data)?;
    let prototypes = match a.kind {
        PrototypeChoice::Mean => bags.iter().map(mean_prototype).collect::<Vec<_>>(),
        PrototypeChoice::Attention => {
            let m = prototype_module(a.checkpoint.as_deref(), bags[0].dim(), a.hidden_dim, a.seed)?;
            bags.iter()
                .map(|b| attention_prototype(&m, b))
                .collect::<protodiv::Result<Vec<_>>>()?
        }
    };
    let rows: Vec<PrototypeRow<'_>> = bags
        .iter()
        .zip(&prototypes)
        .map(|(bag, prototype)| PrototypeRow { bag, prototype })
        .collect();
    let mut out = output(a.out.as_deref())?;
    write_prototypes_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Divide(a) => cmd_divide(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ExportPrototypes(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
