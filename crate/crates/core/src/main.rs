//! Command-line driver: synthetic data generation, the two training stages,
//! evaluation, the ablation harness and the pretrain-epoch sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ctrgen::error::{Error, Result};
use ctrgen::schema::{
    build_schema, default_benchmark_schema, generate_dataset, read_dataset, write_dataset,
    FieldKind, SyntheticConfig,
};
use ctrgen::train::{
    evaluate, finetune, load_checkpoint, run_experiment, save_checkpoint, user_strata,
    OptimizerKind, TrainConfig, Variant,
};

#[derive(Parser)]
#[command(name = "ctrgen", about = "Difficulty-balanced generative pretraining for tabular CTR data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (TSV + JSON schema sidecar).
    GenData(GenDataArgs),
    /// Pretrain a model and write a checkpoint.
    Pretrain(TrainArgs),
    /// Fine-tune an existing checkpoint with BCE.
    Finetune(StageArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(StageArgs),
    /// Run all four variants end to end and write one report each.
    Ablate(TrainArgs),
    /// Sweep pretraining epochs for one variant.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output TSV path; the schema sidecar lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_rate: f64,
    /// Per-field entropy override, `name=nats`; repeatable.
    #[arg(long = "entropy", value_parser = parse_override)]
    entropy: Vec<(String, f64)>,
    /// Compact field list, e.g. `id:10000,cat:20,num:100,seq:10000x20`.
    /// Defaults to the mixed benchmark schema.
    #[arg(long)]
    fields: Option<String>,
}

fn parse_override(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or("expected name=value")?;
    let v: f64 = v.parse().map_err(|e| format!("bad value: {e}"))?;
    Ok((name.to_string(), v))
}

fn parse_fields(spec: &str) -> Result<Vec<(FieldKind, usize, usize)>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let (kind, rest) = part
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("bad field spec `{part}`")))?;
        let kind = match kind {
            "id" => FieldKind::Id,
            "cat" => FieldKind::Categorical,
            "num" => FieldKind::Numerical,
            "seq" => FieldKind::Sequence,
            other => return Err(Error::InvalidArgument(format!("unknown field kind `{other}`"))),
        };
        let (card, len) = match rest.split_once('x') {
            Some((c, l)) => (
                c.parse().map_err(|_| Error::InvalidArgument(format!("bad cardinality in `{part}`")))?,
                l.parse().map_err(|_| Error::InvalidArgument(format!("bad seq length in `{part}`")))?,
            ),
            None => (
                rest.parse().map_err(|_| Error::InvalidArgument(format!("bad cardinality in `{part}`")))?,
                0,
            ),
        };
        out.push((kind, card, len));
    }
    Ok(out)
}

/// TrainConfig as CLI flags; unset flags fall back to the config file, then
/// to defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file mirroring the training config; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    log_interval: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    eval_pool: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        take!(
            variant, lr, batch_size, pretrain_epochs, finetune_epochs, t_max, seed, l2,
            log_interval, d_model, layers, optimizer, eval_pool
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset TSV (with its `.schema.json` sidecar).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, trainlog and report.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated pretrain-epoch budgets.
    #[arg(long, default_value = "1,3,5")]
    epochs: String,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let config = SyntheticConfig {
        n_samples: args.n_samples,
        entropy_overrides: args.entropy.into_iter().collect::<BTreeMap<_, _>>(),
        label_noise: args.label_noise,
        latent_dim: args.latent_dim,
        positive_rate: args.positive_rate,
    };
    let schema = match &args.fields {
        Some(spec) => build_schema(&config, &parse_fields(spec)?, args.seed)?,
        None => default_benchmark_schema(&config, args.seed)?,
    };
    let samples = generate_dataset(&schema, &config)?;
    write_dataset(&args.out, &schema, &samples)?;
    println!(
        "wrote {} samples, {} fields to {}",
        samples.len(),
        schema.fields.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let (schema, samples) = read_dataset(&args.data)?;
    let arts = run_experiment(&schema, &samples, &cfg, Some(&args.out))?;
    println!(
        "variant={} auc={:.4} logloss={:.4}",
        cfg.variant.name(),
        arts.report.auc,
        arts.report.logloss
    );
    for s in &arts.omitted_strata {
        eprintln!("warning: stratum `{s}` had a single class and was omitted");
    }
    Ok(())
}

fn cmd_finetune(args: StageArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let (schema, samples) = read_dataset(&args.data)?;
    let mut state = load_checkpoint(&args.checkpoint, Some(&schema))?;
    let (train, _) = ctrgen::train::split_dataset(&samples);
    let losses = finetune(&mut state, train, cfg.finetune_epochs)?;
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&state, &args.out.join("checkpoint.json"))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("finetune bce: {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    Ok(())
}

fn cmd_eval(args: StageArgs) -> Result<()> {
    let (schema, samples) = read_dataset(&args.data)?;
    let state = load_checkpoint(&args.checkpoint, Some(&schema))?;
    let (train, test) = ctrgen::train::split_dataset(&samples);
    let strata = user_strata(&schema, train, test);
    let (report, omitted) = evaluate(&state, test, &strata, None)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("auc={:.4} logloss={:.4}", report.auc, report.logloss);
    for s in &omitted {
        eprintln!("warning: stratum `{s}` had a single class and was omitted");
    }
    Ok(())
}

fn cmd_ablate(args: TrainArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let (schema, samples) = read_dataset(&args.data)?;
    for variant in [Variant::Full, Variant::Fix, Variant::Std, Variant::Uniform] {
        let cfg = TrainConfig { variant, ..base.clone() };
        let out = args.out.join(variant.name());
        let arts = run_experiment(&schema, &samples, &cfg, Some(&out))?;
        println!(
            "variant={} auc={:.4} logloss={:.4}",
            variant.name(),
            arts.report.auc,
            arts.report.logloss
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let (schema, samples) = read_dataset(&args.data)?;
    for part in args.epochs.split(',') {
        let epochs: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad epoch count `{part}`")))?;
        let cfg = TrainConfig { pretrain_epochs: epochs, ..base.clone() };
        let out = args.out.join(format!("epochs_{epochs}"));
        let arts = run_experiment(&schema, &samples, &cfg, Some(&out))?;
        println!("pretrain_epochs={epochs} auc={:.4} logloss={:.4}", arts.report.auc, arts.report.logloss);
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
