//! Command-line surface: deterministic experiment recipes over the library
//! modules. Exit codes are a stable contract: 0 success, 1 usage/config
//! error, 2 incompatibility between artifacts, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use asymnet::checkpoint::{hex, ModelCheckpoint};
use asymnet::data::{load_idx_dataset, parse_idx_images, parse_idx_labels, Dataset};
use asymnet::interp;
use asymnet::nn::{build_model, AsymMode, ModelConfig};
use asymnet::rebasin;
use asymnet::symmetry::{self, SymmetryError};
use asymnet::train::{self, TrainConfig, TrainError};
use asymnet::universal;

const EXIT_USAGE: u8 = 1;
const EXIT_INCOMPAT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

struct CliError {
    code: u8,
    msg: String,
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, msg: msg.into() }
}

fn incompat(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_INCOMPAT, msg: msg.into() }
}

fn numeric(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_NUMERIC, msg: msg.into() }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        usage(format!("io error: {e}"))
    }
}

impl From<asymnet::checkpoint::CheckpointError> for CliError {
    fn from(e: asymnet::checkpoint::CheckpointError) -> Self {
        use asymnet::checkpoint::CheckpointError::*;
        match e {
            HashMismatch { .. } | LengthMismatch { .. } => incompat(e.to_string()),
            _ => usage(e.to_string()),
        }
    }
}

impl From<asymnet::nn::NnError> for CliError {
    fn from(e: asymnet::nn::NnError) -> Self {
        usage(e.to_string())
    }
}

impl From<asymnet::data::DataError> for CliError {
    fn from(e: asymnet::data::DataError) -> Self {
        usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => numeric(e.to_string()),
            TrainError::AsymMismatch { .. } => incompat(e.to_string()),
            _ => usage(e.to_string()),
        }
    }
}

impl From<interp::InterpError> for CliError {
    fn from(e: interp::InterpError) -> Self {
        match e {
            interp::InterpError::HashMismatch { .. } | interp::InterpError::ArchMismatch { .. } => {
                incompat(e.to_string())
            }
            _ => usage(e.to_string()),
        }
    }
}

impl From<rebasin::RebasinError> for CliError {
    fn from(e: rebasin::RebasinError) -> Self {
        match e {
            rebasin::RebasinError::NotStandard(_) | rebasin::RebasinError::ArchMismatch { .. } => {
                incompat(e.to_string())
            }
            _ => usage(e.to_string()),
        }
    }
}

impl From<universal::UniversalError> for CliError {
    fn from(e: universal::UniversalError) -> Self {
        use universal::UniversalError::*;
        match e {
            FullyFixed | NInadmissible { .. } | MInadmissible { .. } | RetriesExhausted { .. } => {
                incompat(e.to_string())
            }
            EtaIdentity => numeric(e.to_string()),
            _ => usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "asymnet", about = "Train, align, and analyze asymmetric MLPs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config; writes a checkpoint and a
    /// JSON-lines report alongside.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed offsets; each trains an independent model
        /// with init and shuffle seeds offset by the value, written to
        /// `<out>.<offset>`. Omit for a single run written to `<out>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Worker threads when fanning out over seeds.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Interpolate between two compatible checkpoints; writes a CSV curve
    /// and a JSON monotonicity report, prints the barrier.
    Interp {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// JSON data section describing the evaluation set.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25)]
        n_points: usize,
        /// Output prefix: writes `<prefix>.csv` and `<prefix>.mli.json`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Align checkpoint B onto A by weight matching; writes the permuted B
    /// (probe-verified to be function-equivalent first) and the alignment.
    Rebasin {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_sweeps: usize,
    },
    /// Report the automorphism count of a model config (and nonlinearity
    /// falsifier residuals for gated models).
    Symcheck {
        /// JSON model config.
        #[arg(long, conflicts_with = "ckpt")]
        config: Option<PathBuf>,
        /// Checkpoint whose embedded config is checked.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Search budget (explored assignments / analytic count ceiling).
        #[arg(long, default_value_t = 1_000_000)]
        limit: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a two-layer masked network exactly to a linear map read from a
    /// file of n*n little-endian 64-bit reals.
    Uafit {
        #[arg(long)]
        w: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        n_fix: usize,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        retries: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Install an IDX file into the data directory, verifying its SHA-256
    /// and that it parses. Sources are local paths or file:// URLs.
    DataFetch {
        #[arg(long)]
        src: String,
        #[arg(long)]
        sha256: String,
        /// Destination file name inside the data directory.
        #[arg(long)]
        name: String,
        /// Override the data directory (default: $ASYMNET_DATA_DIR or `.`).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

/// One experiment = model + training recipe + data source (+ analysis
/// knobs). Unknown keys are schema errors, never silently ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: DataSection,
    #[serde(default)]
    analysis: AnalysisSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
enum DataSection {
    /// IDX image/label files; relative paths resolve against the data
    /// directory ($ASYMNET_DATA_DIR, default `.`).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        val_fraction: f64,
    },
    /// Synthetic Gaussian blobs, fully seeded.
    Blobs {
        num_classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
        #[serde(default)]
        val_fraction: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisSection {
    #[serde(default = "default_n_points")]
    n_points: usize,
    #[serde(default = "default_limit")]
    automorphism_limit: u64,
}

fn default_n_points() -> usize {
    25
}

fn default_limit() -> u64 {
    1_000_000
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { n_points: default_n_points(), automorphism_limit: default_limit() }
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("ASYMNET_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        data_dir().join(path)
    }
}

impl DataSection {
    fn load(&self) -> Result<(Dataset, Option<Dataset>)> {
        let (full, val_fraction) = match self {
            DataSection::Idx { images, labels, val_fraction } => {
                (load_idx_dataset(&resolve(images), &resolve(labels))?, *val_fraction)
            }
            DataSection::Blobs { num_classes, n_per_class, dim, separation, seed, val_fraction } => (
                asymnet::data::gaussian_blobs(*num_classes, *n_per_class, *dim, *separation, *seed),
                *val_fraction,
            ),
        };
        if val_fraction > 0.0 {
            let (train, val) = full.split_validation(val_fraction);
            Ok((train, Some(val)))
        } else {
            Ok((full, None))
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn train_one(config: &ExperimentConfig, offset: u64, out: &Path) -> Result<()> {
    let mut model_config = config.model.clone();
    model_config.init_seed = model_config.init_seed.wrapping_add(offset);
    let mut train_config = config.train.clone();
    train_config.shuffle_seed = train_config.shuffle_seed.wrapping_add(offset);
    let (train_set, val_set) = config.data.load()?;
    let mut model = build_model(&model_config)?;
    let (ckpt, report) = train::train(&mut model, &train_set, val_set.as_ref(), &train_config)?;
    ckpt.save(out)?;
    let report_path = sibling(out, "report.jsonl");
    std::fs::write(&report_path, report.to_json_lines())?;
    println!(
        "trained seed-offset {offset}: final loss {:.6}, checkpoint {}",
        report.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// `<path>` with its extension replaced by `suffix` (appended if none).
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn cmd_train(config: &Path, out: &Path, seeds: &[u64], jobs: usize) -> Result<()> {
    let cfg: ExperimentConfig = read_json(config)?;
    if seeds.is_empty() {
        return train_one(&cfg, 0, out);
    }
    let jobs = jobs.max(1);
    let mut first_err = None;
    for chunk in seeds.chunks(jobs) {
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&offset| {
                    let cfg = &cfg;
                    let out = PathBuf::from(format!("{}.{offset}", out.display()));
                    scope.spawn(move || train_one(cfg, offset, &out))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            if let Err(e) = r {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_interp(a: &Path, b: &Path, data: &Path, n_points: usize, out_prefix: &Path) -> Result<()> {
    let ckpt_a = ModelCheckpoint::load(a)?;
    let ckpt_b = ModelCheckpoint::load(b)?;
    let section: DataSection = read_json(data)?;
    let (eval_set, _) = section.load()?;
    let curve = interp::curve(&ckpt_a, &ckpt_b, &eval_set, n_points)?;
    let mli = interp::mli_metrics(&curve)?;
    let barrier = interp::barrier(&ckpt_a, &ckpt_b, &eval_set)?;
    let csv_path = PathBuf::from(format!("{}.csv", out_prefix.display()));
    std::fs::write(&csv_path, curve.to_csv())?;
    let report = serde_json::json!({
        "barrier": barrier,
        "mli": mli,
        "distance_per_parameter": interp::distance_per_parameter(&ckpt_a, &ckpt_b)?,
    });
    let json_path = PathBuf::from(format!("{}.mli.json", out_prefix.display()));
    std::fs::write(&json_path, serde_json::to_string_pretty(&report).expect("serializable"))?;
    println!("barrier {barrier:.6}");
    Ok(())
}

fn probe_equivalent(a: &ModelCheckpoint, b: &ModelCheckpoint, num_probes: usize) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let model_a = a.to_model()?;
    let model_b = b.to_model()?;
    let dim = model_a.config.widths[0];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xa11e);
    let mut worst = 0.0f64;
    for _ in 0..num_probes {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ya = model_a.logits(&x, 1).map_err(|e| numeric(e.to_string()))?;
        let yb = model_b.logits(&x, 1).map_err(|e| numeric(e.to_string()))?;
        for (p, q) in ya.iter().zip(&yb) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

fn cmd_rebasin(a: &Path, b: &Path, out: &Path, max_sweeps: usize) -> Result<()> {
    let ckpt_a = ModelCheckpoint::load(a)?;
    let ckpt_b = ModelCheckpoint::load(b)?;
    let alignment = rebasin::weight_match(&ckpt_a, &ckpt_b, max_sweeps)?;
    let aligned = rebasin::apply_permutation(&ckpt_b, &alignment.perms)?;
    let worst = probe_equivalent(&ckpt_b, &aligned, 100)?;
    if worst > 1e-10 {
        return Err(numeric(format!(
            "aligned checkpoint deviates from the original by {worst:.3e} on probes; not written"
        )));
    }
    aligned.save(out)?;
    let alignment_path = sibling(out, "alignment.json");
    std::fs::write(&alignment_path, serde_json::to_string_pretty(&alignment).expect("serializable"))?;
    println!(
        "aligned {} onto {}: objective {:.6}, converged {}",
        b.display(),
        a.display(),
        alignment.objective_trace.last().copied().unwrap_or(f64::NAN),
        alignment.converged
    );
    Ok(())
}

fn cmd_symcheck(config: Option<&Path>, ckpt: Option<&Path>, limit: u64, out: Option<&Path>) -> Result<()> {
    let model_config: ModelConfig = match (config, ckpt) {
        (Some(path), None) => read_json(path)?,
        (None, Some(path)) => ModelCheckpoint::load(path)?.config,
        _ => return Err(usage("exactly one of --config or --ckpt is required")),
    };
    let model = build_model(&model_config)?;
    let mut report = serde_json::Map::new();
    match model_config.asym_mode {
        AsymMode::SigmaAsym => {
            // automorphism search over gated graphs is out of scope; the
            // falsifier sweeps are the executable check for this mode
            let mut falsifiers = Vec::new();
            for figlu in &model.figlu {
                if figlu.dim > 5 {
                    falsifiers.push(serde_json::json!({
                        "dim": figlu.dim,
                        "status": "skipped (dim > 5 exceeds the exhaustive sweep budget)",
                    }));
                    continue;
                }
                let perm = symmetry::figlu_perm_falsifier(figlu, 64, 7);
                let diag = symmetry::figlu_diag_falsifier(figlu, &[-1.0, -0.5, 1.0, 0.5, 2.0], 64, 7)
                    .map_err(|e| usage(e.to_string()))?;
                falsifiers.push(serde_json::json!({ "perm": perm, "diag": diag }));
            }
            report.insert("status".into(), "ok".into());
            report.insert("falsifiers".into(), serde_json::Value::Array(falsifiers));
        }
        _ => {
            let dag = symmetry::build_dag(&model).map_err(|e| usage(e.to_string()))?;
            match symmetry::find_automorphisms(&dag, limit) {
                Ok(auto) => {
                    report.insert("status".into(), "ok".into());
                    report.insert("count".into(), serde_json::json!(auto.count));
                    report.insert("exhaustive".into(), serde_json::json!(auto.exhaustive));
                }
                Err(SymmetryError::BudgetExceeded { limit }) => {
                    report.insert("status".into(), "inconclusive".into());
                    report.insert("reason".into(), format!("search budget {limit} exceeded").into());
                }
                Err(e) => return Err(usage(e.to_string())),
            }
        }
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report)).expect("serializable");
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_uafit(w_path: &Path, n: usize, n_fix: usize, kappa: f64, seed: u64, retries: usize, out: &Path) -> Result<()> {
    let bytes = std::fs::read(w_path)?;
    if n == 0 || bytes.len() != n * n * 8 {
        return Err(usage(format!(
            "{} has {} bytes; expected {} (n*n = {} little-endian 64-bit reals)",
            w_path.display(),
            bytes.len(),
            n * n * 8,
            n * n
        )));
    }
    let w: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (model, fit) = universal::fit_outer_masked_model(&w, n, n_fix, kappa, seed, retries)?;
    let ckpt = ModelCheckpoint::from_model(&model, Default::default());
    ckpt.save(out)?;
    let fit_path = sibling(out, "fit.json");
    std::fs::write(&fit_path, serde_json::to_string_pretty(&fit).expect("serializable"))?;
    let tolerance = universal::residual_tolerance(&w);
    println!("residual {:.3e} (tolerance {tolerance:.3e})", fit.residual_bound);
    if fit.residual_bound > tolerance {
        return Err(numeric(format!(
            "residual {:.3e} exceeds tolerance {tolerance:.3e}",
            fit.residual_bound
        )));
    }
    Ok(())
}

fn cmd_data_fetch(src: &str, sha256: &str, name: &str, data_dir_override: Option<&Path>) -> Result<()> {
    let src_path = match src.strip_prefix("file://") {
        Some(rest) => PathBuf::from(rest),
        None if src.contains("://") => {
            return Err(usage(format!(
                "unsupported URL scheme in {src}: only local paths and file:// are available"
            )))
        }
        None => PathBuf::from(src),
    };
    let bytes = std::fs::read(&src_path)
        .map_err(|e| usage(format!("cannot read {}: {e}", src_path.display())))?;
    let digest = hex(&Sha256::digest(&bytes));
    if !digest.eq_ignore_ascii_case(sha256) {
        return Err(incompat(format!("sha256 mismatch: expected {sha256}, got {digest}")));
    }
    // must parse as IDX (images or labels) before installing
    if parse_idx_images(&bytes).is_err() && parse_idx_labels(&bytes).is_err() {
        return Err(incompat("payload is not a valid IDX image or label file"));
    }
    let dir = data_dir_override.map(Path::to_path_buf).unwrap_or_else(data_dir);
    std::fs::create_dir_all(&dir)?;
    let dest = dir.join(name);
    std::fs::write(&dest, &bytes)?;
    println!("installed {} ({} bytes, sha256 {digest})", dest.display(), bytes.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seeds, jobs } => cmd_train(&config, &out, &seeds, jobs),
        Command::Interp { a, b, data, n_points, out_prefix } => {
            cmd_interp(&a, &b, &data, n_points, &out_prefix)
        }
        Command::Rebasin { a, b, out, max_sweeps } => cmd_rebasin(&a, &b, &out, max_sweeps),
        Command::Symcheck { config, ckpt, limit, out } => {
            cmd_symcheck(config.as_deref(), ckpt.as_deref(), limit, out.as_deref())
        }
        Command::Uafit { w, n, n_fix, kappa, seed, retries, out } => {
            cmd_uafit(&w, n, n_fix, kappa, seed, retries, &out)
        }
        Command::DataFetch { src, sha256, name, data_dir } => {
            cmd_data_fetch(&src, &sha256, &name, data_dir.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
