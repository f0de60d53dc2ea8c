use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use gauss_kgc::config::{Config, ConfigError};
use gauss_kgc::eval::{evaluate, EvalError};
use gauss_kgc::experiments::{lr_grid, lr_values, run_ablation, VARIANTS};
use gauss_kgc::gradcheck::{run_gradcheck, ComponentReport, GradcheckError, ProbeSize, STEP, TOLERANCE};
use gauss_kgc::kg::{generate_synthetic_kg, DataError, Dataset, Split, SynthConfig};
use gauss_kgc::model::Dims;
use gauss_kgc::train::{Checkpoint, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "gauss-kgc", version, about = "Few-shot knowledge graph completion with uncertainty-aware Gaussian embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.bin, train.jsonl and resolved.cfg.
    Train(TrainArgs),
    /// Score a checkpoint on a split and print JSON plus a table.
    Eval(EvalArgs),
    /// Write a planted-pattern synthetic dataset.
    Synth(SynthArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Train the full model and each module removal under shared seeds.
    Ablate(AblateArgs),
    /// Train once per learning rate on a fixed-step grid.
    LrGrid(LrGridArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    /// Defaults to the checkpoint's setting.
    #[arg(long)]
    filtered: Option<bool>,
    /// Score the last parameters instead of the best-dev ones.
    #[arg(long)]
    last: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 2)]
    background_relations: usize,
    #[arg(long, default_value_t = 6)]
    task_relations: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 40)]
    q: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    pool: usize,
    #[arg(long, default_value_t = 1)]
    dev_relations: usize,
    #[arg(long, default_value_t = 2)]
    test_relations: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "tiny")]
    size: ProbeSize,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct LrGridArgs {
    #[arg(long, default_value_t = 1e-4)]
    from: f64,
    #[arg(long, default_value_t = 5e-4)]
    to: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (train, dev, test)")),
    }
}

/// Exit status 1 for invalid input or failed checks, 2 for usage and I/O.
enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => Failure::Io(e.to_string()),
            TrainError::Config(c) => c.into(),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<GradcheckError> for Failure {
    fn from(e: GradcheckError) -> Self {
        match e {
            GradcheckError::Data(d) => d.into(),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

/// `--key value` pairs; dashes in keys become underscores.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    if raw.len() % 2 != 0 {
        return Err(Failure::Io(format!("override '{}' has no value", raw[raw.len() - 1])));
    }
    raw.chunks(2)
        .map(|kv| {
            let key = kv[0]
                .strip_prefix("--")
                .ok_or_else(|| Failure::Io(format!("expected --key before '{}'", kv[0])))?;
            Ok((key.replace('-', "_"), kv[1].clone()))
        })
        .collect()
}

fn resolve_config(run: &RunArgs) -> Result<Config, Failure> {
    let overrides = parse_overrides(&run.overrides)?;
    Ok(Config::load(run.config.as_deref(), &overrides)?)
}

fn load_data(dir: &Path, cfg: &Config) -> Result<Dataset, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Io(format!("data directory not found: {}", dir.display())));
    }
    Ok(Dataset::load(dir, cfg.graph_options(), cfg.dim)?)
}

/// SHA-256 over every file in `dir`, in name order, with names included.
fn hash_dir(dir: &Path) -> Result<String, Failure> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in &names {
        h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        h.update([0]);
        h.update(fs::read(p).map_err(io(p))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    data: String,
    data_sha256: String,
    config_diff: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_dev_mrr: Option<f64>,
}

fn manifest<'a>(command: &'a str, cfg: &Config, data: &Path) -> Result<Manifest<'a>, Failure> {
    Ok(Manifest {
        command,
        seed: cfg.seed,
        data: data.display().to_string(),
        data_sha256: hash_dir(data)?,
        config_diff: cfg.diff(&Config::for_profile(cfg.profile)),
        steps: None,
        best_dev_mrr: None,
    })
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let run = &args.run;
    let cfg = resolve_config(run)?;
    let data = load_data(&run.data, &cfg)?;
    prepare_out(&run.out)?;
    fs::write(run.out.join("resolved.cfg"), cfg.render()).map_err(io(&run.out))?;

    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, cfg.clone(), &data)?,
        None => Trainer::new(cfg.clone(), &data)?,
    };
    let log_path = run.out.join("train.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(io(&log_path))?;
    let mut log = BufWriter::new(file);
    trainer.run(|rec| {
        writeln!(log, "{}", rec.to_json()).map_err(|source| TrainError::Io {
            path: log_path.display().to_string(),
            source,
        })?;
        if let Some(mrr) = rec.dev_mrr {
            eprintln!("step {:>6}  loss {:>10.4}  dev MRR {:.4}", rec.step, rec.loss, mrr);
        }
        Ok(())
    })?;
    log.flush().map_err(io(&log_path))?;
    trainer.checkpoint().save(&run.out.join("checkpoint.bin"))?;

    let mut m = manifest("train", &cfg, &run.data)?;
    m.steps = Some(trainer.step);
    m.best_dev_mrr = trainer.best_dev_mrr;
    write_json(&run.out.join("manifest.json"), &m)?;
    eprintln!("finished after {} steps; wrote {}", trainer.step, run.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(f) = args.filtered {
        cfg.filtered = f;
    }
    let data = load_data(&args.data, &cfg)?;
    ckpt.check_dims(&Dims {
        dim: cfg.dim,
        layers: cfg.layers,
        n_entities: data.vocab.n_entities(),
        n_relations: data.vocab.n_relations(),
    })?;
    let model = if args.last { ckpt.model() } else { ckpt.best_model() };
    let report = evaluate(&model, &cfg, &data, &data.known_triples(), args.split)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Invalid(e.to_string()))?;
    println!("{json}");
    println!();
    print!("{}", report.table());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let synth = SynthConfig {
        n_entities: args.entities,
        n_background_relations: args.background_relations,
        n_task_relations: args.task_relations,
        k: args.k,
        q: args.q,
        noise_rate: args.noise,
        seed: args.seed,
        candidate_pool: args.pool,
        dev_relations: args.dev_relations,
        test_relations: args.test_relations,
    };
    let cfg = Config::default();
    let data = Dataset::from_synthetic(generate_synthetic_kg(&synth)?, cfg.graph_options())?;
    data.write(&args.out)?;
    eprintln!(
        "wrote {} entities, {} background triples to {}",
        data.vocab.n_entities(),
        data.graph.triples().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let reports = run_gradcheck(args.seed, args.size, STEP)?;
    println!("{:<22}  {:>12}  {:>6}  status", "component", "max rel err", "coords");
    let passed = |r: &ComponentReport| r.max_rel_error < args.tolerance;
    for r in &reports {
        let status = if passed(r) { "ok" } else { "FAIL" };
        println!("{:<22}  {:>12.3e}  {:>6}  {status}", r.component, r.max_rel_error, r.coordinates);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !passed(r)).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("above tolerance {:e}: {}", args.tolerance, failed.join(", "))))
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Failure> {
    let run = &args.run;
    let cfg = resolve_config(run)?;
    let data = load_data(&run.data, &cfg)?;
    prepare_out(&run.out)?;
    fs::write(run.out.join("resolved.cfg"), cfg.render()).map_err(io(&run.out))?;
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() };
    let table = run_ablation(&cfg, &seeds, |_| &data, &VARIANTS, |name, r| {
        eprintln!("{name:<28} seed {:>4}  test MRR {:.4}", r.seed, r.trained.overall.mrr);
    })?;
    let text = table.render();
    print!("{text}");
    fs::write(run.out.join("ablation.txt"), &text).map_err(io(&run.out))?;
    write_json(&run.out.join("ablation.json"), &table)?;
    write_json(&run.out.join("manifest.json"), &manifest("ablate", &cfg, &run.data)?)?;
    Ok(())
}

fn cmd_lr_grid(args: LrGridArgs) -> Result<(), Failure> {
    let run = &args.run;
    let cfg = resolve_config(run)?;
    let lrs = lr_values(args.from, args.to, args.step);
    if lrs.is_empty() {
        return Err(Failure::Invalid(format!(
            "empty grid: from {} to {} step {}",
            args.from, args.to, args.step
        )));
    }
    let data = load_data(&run.data, &cfg)?;
    prepare_out(&run.out)?;
    let points = lr_grid(&cfg, &data, &lrs, |p| {
        let mrr = p.best_dev_mrr.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("lr {:.1e}  best dev MRR {mrr}  steps {}", p.lr, p.steps);
    })?;
    write_json(&run.out.join("lr_grid.json"), &points)?;
    write_json(&run.out.join("manifest.json"), &manifest("lr-grid", &cfg, &run.data)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::LrGrid(a) => cmd_lr_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
