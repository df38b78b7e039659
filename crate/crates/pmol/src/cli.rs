//! Command-line entry point: dataset generation, training, evaluation,
//! benchmarking, and run inspection, with reproducible run directories.
//!
//! Exit codes: 0 success, 2 usage/config/data errors, 3 numerical failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapter::ExpertGroupTable;
use crate::backbone::{init_backbone, pretrain_backbone, BackboneConfig};
use crate::data::{self, SyntheticSpec};
use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::telemetry::{self, BenchShape};
use crate::trainengine::{
    self, config_hash, fnv1a, Adam, Algorithm, Checkpoint, LossVariant, PmolModel, TrainConfig,
};

#[derive(Parser)]
#[command(name = "pmol", about = "Preference mixing with grouped LoRA experts", version)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic preference dataset (JSONL + spec echo).
    Gen(GenArgs),
    /// Train adapters on a preference dataset; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(EvalArgs),
    /// Time parallel vs sequential adapter paths.
    Bench(BenchArgs),
    /// Print the per-layer expert group-mass table of a run.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 3)]
    preferences: usize,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 0.8)]
    gap: f64,
    #[arg(long, default_value_t = 0.2)]
    conflict: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta_egs: Option<f64>,
    #[arg(long)]
    beta_dpo: Option<f64>,
    /// soft | hard | switch | balance | none
    #[arg(long)]
    loss_variant: Option<String>,
    /// dpo | orpo
    #[arg(long)]
    algorithm: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory containing checkpoint.json.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV path (default: <run>/eval.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Semicolon-separated shapes "K,rank,in_dim,out_dim,tokens".
    #[arg(long, default_value = "16,8,64,64,4096")]
    shapes: String,
    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    reps: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    run: PathBuf,
    /// Re-record router weights on this dataset instead of reading the
    /// run's telemetry.csv.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Model-construction settings that accompany [`TrainConfig`] in run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rank: usize,
    pub experts_per_group: usize,
    pub model_seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            rank: 8,
            experts_per_group: 2,
            model_seed: 0,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
        }
    }
}

/// Full run configuration: optimizer/loss settings, model shape, soft
/// constraint coefficients, and the train/held-out split.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Per-preference sc overrides; empty means 0.8 for every preference.
    pub sc: Vec<f64>,
    pub train_fraction: OrDefaultFraction,
}

/// Newtype so serde(default) yields 0.9 rather than 0.0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrDefaultFraction(pub f64);

impl Default for OrDefaultFraction {
    fn default() -> Self {
        OrDefaultFraction(0.9)
    }
}

/// Everything needed to rerun: resolved config, input fingerprint, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub dataset_hash: u64,
    pub source_rev: String,
    pub seed: u64,
    pub out_dir: String,
}

fn source_rev() -> String {
    std::env::var("SOURCE_REV").unwrap_or_else(|_| "unknown".into())
}

fn parse_variant(s: &str) -> Result<LossVariant> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown loss variant {s:?}")))
}

fn parse_algorithm(s: &str) -> Result<Algorithm> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown algorithm {s:?}")))
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.beta_egs {
        cfg.train.beta_egs = v;
    }
    if let Some(v) = args.beta_dpo {
        cfg.train.beta_dpo = v;
    }
    if let Some(v) = &args.loss_variant {
        cfg.train.loss_variant = parse_variant(v)?;
    }
    if let Some(v) = &args.algorithm {
        cfg.train.algorithm = parse_algorithm(v)?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// Builds group table + model per config for `n_prefs` preferences.
pub fn build_model(cfg: &RunConfig, n_prefs: usize) -> Result<PmolModel> {
    if !cfg.sc.is_empty() && cfg.sc.len() != n_prefs {
        return Err(Error::Config(format!(
            "{} sc values for {n_prefs} preferences",
            cfg.sc.len()
        )));
    }
    let mut groups = ExpertGroupTable::even(n_prefs, cfg.model.experts_per_group, 0.8)?;
    for (pref, &sc) in cfg.sc.iter().enumerate() {
        groups.set_sc(pref, sc)?;
    }
    let bcfg = BackboneConfig {
        vocab_size: data::VOCAB_SIZE,
        d_model: cfg.model.d_model,
        n_layers: cfg.model.n_layers,
        n_heads: cfg.model.n_heads,
        d_ff: cfg.model.d_ff,
        max_seq_len: cfg.model.max_seq_len,
        seed: cfg.model.model_seed,
    };
    let mut rng = Rng::new(cfg.model.model_seed);
    let backbone = init_backbone(&bcfg, &mut rng)?;
    PmolModel::new(backbone, groups, cfg.model.rank, &mut rng)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_preferences: a.preferences,
        pairs_per_preference: a.pairs,
        gap: a.gap,
        conflict: a.conflict,
        seed: a.seed,
    };
    let pairs = data::generate_synthetic_dataset(&spec)?;
    data::save_jsonl(&a.out, &pairs)?;
    let echo = a.out.with_extension("spec.json");
    std::fs::write(&echo, serde_json::to_string_pretty(&spec)?)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn loss_csv(records: &[trainengine::StepRecord]) -> String {
    let mut s = String::from("step,epoch,preference_loss,routing_loss,total\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.12},{:.12},{:.12}\n",
            r.step, r.epoch, r.loss.preference_loss, r.loss.routing_loss, r.loss.total
        ));
    }
    s
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(a)?;
    let raw_data = std::fs::read(&a.data)?;
    let pairs = data::load_jsonl(&a.data)?;
    if pairs.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let n_prefs = pairs.iter().map(|p| p.preference_id).max().unwrap() + 1;
    data::check_preference_ids(&pairs, n_prefs)?;

    std::fs::create_dir_all(&a.out)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_hash: fnv1a(&raw_data),
        source_rev: source_rev(),
        seed: cfg.train.seed,
        out_dir: a.out.display().to_string(),
    };
    std::fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let (mut model, mut opt, start_step) = match &a.resume {
        Some(path) => {
            let ck = trainengine::load_checkpoint(path)?;
            (ck.model, ck.opt, ck.step)
        }
        None => {
            let mut model = build_model(&cfg, n_prefs)?;
            if cfg.model.pretrain_steps > 0 {
                let corpus: Vec<Vec<usize>> = pairs
                    .iter()
                    .map(|p| {
                        let mut t = p.prompt.clone();
                        t.extend_from_slice(&p.chosen);
                        t
                    })
                    .collect();
                model.backbone.frozen = false;
                pretrain_backbone(
                    &mut model.backbone,
                    &corpus,
                    cfg.model.pretrain_steps,
                    cfg.model.pretrain_lr,
                )?;
            }
            (model, Adam::new(cfg.train.lr), 0)
        }
    };
    data::check_preference_ids(&pairs, model.groups().entries().len())?;

    let mut split_rng = Rng::new(cfg.train.seed).fork(0xd474);
    let (train_pairs, held_out) = data::split(&pairs, cfg.train_fraction.0, &mut split_rng)?;
    let refs = trainengine::reference_log_probs(&model.backbone, &train_pairs)?;

    let initial = telemetry::record_expert_weights(&model, &held_out, start_step)?;
    let initial_score = telemetry::specialization_score(&initial, model.groups())?;

    let records =
        trainengine::run_training(&mut model, &mut opt, &train_pairs, &refs, &cfg.train, start_step)?;
    std::fs::write(a.out.join("loss.csv"), loss_csv(&records))?;

    let final_step = records.last().map_or(start_step, |r| r.step + 1);
    let final_records = telemetry::record_expert_weights(&model, &held_out, final_step)?;
    let final_score = telemetry::specialization_score(&final_records, model.groups())?;
    let mut tele = initial;
    tele.extend(final_records);
    std::fs::write(a.out.join("telemetry.csv"), telemetry::telemetry_csv(&tele))?;

    let ck = Checkpoint {
        model,
        opt,
        step: final_step,
        cfg: cfg.train.clone(),
        config_hash: config_hash(&cfg.train),
    };
    trainengine::save_checkpoint(a.out.join("checkpoint.json"), &ck)?;

    println!(
        "trained {} steps; specialization {initial_score:.4} -> {final_score:.4}",
        records.len()
    );
    Ok(())
}

fn eval_csv(metrics: &[trainengine::PrefMetrics]) -> String {
    let mut s = String::from("preference,n_pairs,mean_margin,accuracy,own_group_mass,empty_mass\n");
    for (gi, m) in metrics.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{:.12},{:.12},{:.12},{:.12}\n",
            m.preference_id, m.n_pairs, m.mean_margin, m.accuracy, m.group_mass[gi], m.empty_mass
        ));
    }
    s
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = trainengine::load_checkpoint(a.run.join("checkpoint.json"))?;
    let pairs = data::load_jsonl(&a.data)?;
    let n_groups = ck.model.groups().entries().len();
    data::check_preference_ids(&pairs, n_groups)?;
    let metrics = trainengine::evaluate(&ck.model, &pairs)?;
    println!("preference  pairs  margin      accuracy  own-mass  empty-mass");
    for m in &metrics {
        let own = ck
            .model
            .groups()
            .entries()
            .iter()
            .position(|e| e.preference_id == m.preference_id)
            .unwrap();
        println!(
            "{:>10}  {:>5}  {:>10.4}  {:>8.3}  {:>8.4}  {:>10.4}",
            m.preference_id, m.n_pairs, m.mean_margin, m.accuracy, m.group_mass[own], m.empty_mass
        );
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval.csv"));
    std::fs::write(out, eval_csv(&metrics))?;
    Ok(())
}

fn parse_shapes(s: &str) -> Result<Vec<BenchShape>> {
    s.split(';')
        .map(|part| {
            let nums: Vec<usize> = part
                .split(',')
                .map(|n| {
                    n.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad shape component {n:?}")))
                })
                .collect::<Result<_>>()?;
            if nums.len() != 5 {
                return Err(Error::Config(format!(
                    "shape {part:?} needs 5 components K,rank,in_dim,out_dim,tokens"
                )));
            }
            Ok(BenchShape {
                k: nums[0],
                rank: nums[1],
                in_dim: nums[2],
                out_dim: nums[3],
                tokens: nums[4],
            })
        })
        .collect()
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let shapes = parse_shapes(&a.shapes)?;
    let results = telemetry::bench_forward(&shapes, a.reps)?;
    let csv = telemetry::bench_csv(&results);
    match &a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ck = trainengine::load_checkpoint(a.run.join("checkpoint.json"))?;
    let groups = ck.model.groups().clone();
    let records = match &a.data {
        Some(path) => {
            let pairs = data::load_jsonl(path)?;
            data::check_preference_ids(&pairs, groups.entries().len())?;
            telemetry::record_expert_weights(&ck.model, &pairs, ck.step)?
        }
        None => {
            let raw = std::fs::read_to_string(a.run.join("telemetry.csv"))?;
            parse_telemetry_csv(&raw)?
        }
    };
    println!("layer  preference  step  group masses (incl. empty)");
    for r in &records {
        let mut masses = r.group_masses(&groups);
        masses.push(*r.mean_weights.last().unwrap());
        let cells: Vec<String> = masses.iter().map(|m| format!("{m:.4}")).collect();
        println!(
            "{:>5}  {:>10}  {:>4}  {}",
            r.layer_index,
            r.preference_id,
            r.step,
            cells.join("  ")
        );
    }
    let score = telemetry::specialization_score(&records, &groups)?;
    println!("specialization score: {score:.4}");
    Ok(())
}

fn parse_telemetry_csv(raw: &str) -> Result<Vec<telemetry::TelemetryRecord>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Parse { line: i + 1, msg: "short telemetry row".into() });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad number {s:?}") })
        };
        out.push(telemetry::TelemetryRecord {
            layer_index: fields[0]
                .parse()
                .map_err(|_| Error::Parse { line: i + 1, msg: "bad layer".into() })?,
            preference_id: fields[1]
                .parse()
                .map_err(|_| Error::Parse { line: i + 1, msg: "bad preference".into() })?,
            step: fields[2]
                .parse()
                .map_err(|_| Error::Parse { line: i + 1, msg: "bad step".into() })?,
            mean_weights: fields[3..].iter().map(|s| parse(s)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
