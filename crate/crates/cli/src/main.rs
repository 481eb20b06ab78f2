//! `dualda` command-line driver.
//!
//! Exit codes: 0 success, 1 internal failure, 2 configuration error,
//! 3 data or checkpoint error, 4 non-finite values during training.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualda::checkpoint;
use dualda::data::{load_features, save_features, Dataset, Domain, Format, ShiftTask};
use dualda::gradcheck;
use dualda::metrics::{evaluate, project_domains, write_projection_csv};
use dualda::trainer::{validate_inputs, LogRecord, TrainState};
use dualda::{Error, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const MANIFEST: &str = "manifest.json";
const RUN_LOG: &str = "run_log.ndjson";
const PRETRAIN_CKPT: &str = "pretrain.ckpt";
const FINAL_CKPT: &str = "final.ckpt";
const REPORT: &str = "report.toml";
const PROJECTION: &str = "projection.csv";

#[derive(Parser, Debug)]
#[command(name = "dualda", version, about = "Unsupervised domain adaptation for feature vectors")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file (`key = value` TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and adapt on a source/target pair.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled target set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Write a synthetic shifted-Gaussian task as source.csv and target.csv.
    Synth(SynthArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required_unless_present = "manifest")]
    source: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    target: Option<PathBuf>,
    /// Replay the config and inputs of an earlier run.
    #[arg(long, conflicts_with_all = ["source", "target"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Remove a component; repeatable.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Ablate>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablate {
    Dis,
    M,
    Em,
    Same,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n_per_class: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    shift_x: f64,
    #[arg(long, default_value_t = 0.5)]
    shift_y: f64,
    #[arg(long, default_value_t = 30.0)]
    rotation: f64,
    #[arg(long, default_value_t = 0.35)]
    noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InputFile {
    path: PathBuf,
    sha256: String,
}

/// Everything needed to replay a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    version: String,
    seed: u64,
    config: TrainConfig,
    source: InputFile,
    target: InputFile,
    out_dir: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Internal(String),
    Config(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Internal(m) | Failure::Config(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::Numerical { .. } => Failure::Numerical(msg),
            Error::Contract(_) => Failure::Internal(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn sha256_file(path: &Path) -> CmdResult<String> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load(path: &Path, domain: Domain) -> CmdResult<Dataset> {
    Ok(load_features(path, Format::from_path(path), domain)?)
}

fn require_out(out: Option<&Path>) -> CmdResult<&Path> {
    out.ok_or_else(|| Failure::Config("--out is required for this command".into()))
}

fn base_config(path: Option<&Path>) -> CmdResult<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            TrainConfig::from_toml_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_overrides(cfg: &mut TrainConfig, seed: Option<u64>, args: &TrainArgs) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = args.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.iters {
        cfg.train_iters = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    for a in &args.ablate {
        match a {
            Ablate::Dis => cfg.ablation.disable_dis = true,
            Ablate::M => cfg.ablation.disable_m = true,
            Ablate::Em => cfg.ablation.disable_em = true,
            Ablate::Same => cfg.ablation.same_classifier_variant = true,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult<()> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CmdResult<()> {
    let out = require_out(cli.out.as_deref())?;

    let (cfg, source_path, target_path, hashes) = match &args.manifest {
        Some(mpath) => {
            let text = fs::read_to_string(mpath).map_err(|e| io_failure(mpath, e))?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", mpath.display())))?;
            let mut cfg = m.config;
            apply_overrides(&mut cfg, cli.seed, args);
            (cfg, m.source.path, m.target.path, Some((m.source.sha256, m.target.sha256)))
        }
        None => {
            let mut cfg = base_config(cli.config.as_deref())?;
            apply_overrides(&mut cfg, cli.seed, args);
            let s = args.source.clone().expect("clap enforces --source");
            let t = args.target.clone().expect("clap enforces --target");
            (cfg, s, t, None)
        }
    };
    cfg.validate()?;

    // Inputs are read and checked before anything is written.
    let source = load(&source_path, Domain::Source)?;
    let target = load(&target_path, Domain::Target)?;
    validate_inputs(&source, &target, &cfg).map_err(|e| Failure::Data(e.to_string()))?;
    let source_hash = sha256_file(&source_path)?;
    let target_hash = sha256_file(&target_path)?;
    if let Some((s, t)) = hashes {
        if s != source_hash || t != target_hash {
            return Err(Failure::Data("input files changed since the manifest was written".into()));
        }
    }

    let source_path = fs::canonicalize(&source_path).map_err(|e| io_failure(&source_path, e))?;
    let target_path = fs::canonicalize(&target_path).map_err(|e| io_failure(&target_path, e))?;

    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        source: InputFile {
            path: source_path,
            sha256: source_hash,
        },
        target: InputFile {
            path: target_path,
            sha256: target_hash,
        },
        out_dir: out.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Internal(e.to_string()))?;
    write_file(&out.join(MANIFEST), &(json + "\n"))?;

    let log_path = out.join(RUN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?);
    let mut state = TrainState::new(&source, &target, &cfg)?;
    state.pretrain(&source)?;
    checkpoint::save(&state, &out.join(PRETRAIN_CKPT))?;
    eprintln!("pretrained for {} iterations", cfg.pretrain_iters);

    let mut sink = |rec: &LogRecord| -> dualda::Result<()> {
        writeln!(log, "{}", rec.to_json()).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if let LogRecord::Eval { iter, acc_cn, acc_cp } = rec {
            eprintln!("iter {iter}: acc_cn {acc_cn:.4} acc_cp {acc_cp:.4}");
        }
        Ok(())
    };
    let result = state.run(&source, &target, &mut sink);
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    result?;

    checkpoint::save(&state, &out.join(FINAL_CKPT))?;
    if target.is_labeled() {
        let report = evaluate(&state, &target)?;
        write_file(&out.join(REPORT), &report.to_text())?;
        println!("acc_cn = {}\nacc_cp = {}", report.acc_cn, report.acc_cp);
    }
    let (points, degenerate) = project_domains(&state, &source, &target)?;
    if degenerate {
        eprintln!("warning: embeddings have no spread; projection is all zeros");
    }
    write_projection_csv(&points, &out.join(PROJECTION))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, checkpoint_path: &Path, target_path: &Path) -> CmdResult<()> {
    let state = checkpoint::load(checkpoint_path)?;
    let target = load(target_path, Domain::Target)?;
    if target.dim() != state.dims.input {
        return Err(Failure::Data(format!(
            "target has {} features, model expects {}",
            target.dim(),
            state.dims.input
        )));
    }
    let report = evaluate(&state, &target)?;
    let text = report.to_text();
    if let Some(out) = cli.out.as_deref() {
        fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
        write_file(&out.join(REPORT), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> CmdResult<()> {
    let out = require_out(cli.out.as_deref())?;
    let task = ShiftTask {
        n_per_class: args.n_per_class,
        classes: args.classes,
        dim: args.dim,
        shift: (args.shift_x, args.shift_y),
        rotation_deg: args.rotation,
        noise_sigma: args.noise,
        seed: cli.seed.unwrap_or(0),
    };
    let (source, target) = task.generate()?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for (ds, name) in [(&source, "source.csv"), (&target, "target.csv")] {
        save_features(ds, &out.join(name), Format::Csv)?;
    }
    println!("wrote {} source and {} target rows to {}", source.len(), target.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, instances: usize) -> CmdResult<()> {
    let checks = gradcheck::run_suite(cli.seed.unwrap_or(0), instances)?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>3} cases  max rel err {:.3e}  {verdict}", c.name, c.instances, c.max_rel_err);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Internal(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(&cli, args),
        Command::Eval { checkpoint, target } => cmd_eval(&cli, checkpoint, target),
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Gradcheck { instances } => cmd_gradcheck(&cli, *instances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
