//! The `molfusion` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 provider error. A missing API key counts as a configuration error. Failures end with one machine-readable line on stderr:
//! `error kind=<usage|data|provider> exit=<code> message="..."`.

use crate::archive::{self, ArchiveError};
use crate::chem::{morgan_fingerprint, sample_demos, PoolEntry, SamplingStrategy};
use crate::config::{ConfigError, RunConfig};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::llm::{LlmClient, LlmError};
use crate::molgraph::parse_smiles;
use crate::pipeline::{self, load_csv, split_dataset, LabeledDataset, PipelineError, Split};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "molfusion", version, about = "Multi-modal molecular property prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Components to switch off: any of seg, peg, moe (comma-separated) or none.
    #[arg(long, value_name = "LIST")]
    pub ablate: Option<String>,
    /// Demonstrations per few-shot prompt.
    #[arg(long = "icl-k", value_name = "K")]
    pub icl_k: Option<usize>,
    /// mock or http.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long = "cache-dir", value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch the 14 descriptions of every molecule into the response cache.
    Describe {
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and write a model archive and a training log.
    Train {
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// Archive path.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Log path; defaults to the archive path with `.log` appended.
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score an archive on one split of a dataset (train, valid, test or all).
    Eval {
        #[arg(long, value_name = "FILE")]
        archive: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Predict the property vector of one molecule.
    Predict {
        #[arg(long, value_name = "FILE")]
        archive: Option<PathBuf>,
        #[arg(long)]
        smiles: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print the Morgan fingerprint of one molecule.
    Fp {
        #[arg(long)]
        smiles: String,
        #[arg(long, default_value_t = crate::chem::DEFAULT_RADIUS)]
        radius: u32,
        #[arg(long, default_value_t = crate::chem::DEFAULT_NBITS)]
        nbits: usize,
    },
    /// List the demonstrations sampled for a query molecule.
    Demos {
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        #[arg(long)]
        smiles: String,
        #[arg(long)]
        k: Option<usize>,
        /// random, scaffold or balanced.
        #[arg(long)]
        strategy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients for every parameter family.
    Gradcheck {
        #[arg(long, default_value_t = GradcheckOptions::default().trials)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the effective configuration (all defaults when given no overrides).
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Provider(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Provider(_) => "provider",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Provider(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Provider {
                source: LlmError::Config(_) | LlmError::AuthMissing { .. },
                ..
            }
            | PipelineError::Config(_) => {
                CliError::Usage(e.to_string())
            }
            PipelineError::Provider { .. } => CliError::Provider(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = &common.ablate {
        cfg.set("ablations", a)?;
    }
    if let Some(k) = common.icl_k {
        cfg.train.icl_k = k;
    }
    if let Some(p) = &common.provider {
        cfg.set("provider", p)?;
    }
    if let Some(d) = &common.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn dataset_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| CliError::Usage("no dataset given (--data or `dataset` in the config)".into()))
}

fn archive_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.archive.clone())
        .or_else(|| cfg.output_dir.as_ref().map(|d| d.join("model.mfa")))
        .ok_or_else(|| CliError::Usage("no archive path given (--out/--archive, `archive` or `output_dir`)".into()))
}

fn client(cfg: &RunConfig) -> LlmClient {
    LlmClient::new(cfg.provider.clone(), cfg.cache_dir.clone())
}

/// Lines go to stderr and, when a file is open, to the file.
struct Logger {
    file: Option<std::fs::File>,
    path: Option<PathBuf>,
    failed: Option<std::io::Error>,
}

impl Logger {
    fn new(path: Option<PathBuf>) -> Result<Self, CliError> {
        let file = match &path {
            Some(p) => Some(std::fs::File::create(p).map_err(|e| io_error(p, e))?),
            None => None,
        };
        Ok(Self { file, path, failed: None })
    }

    fn line(&mut self, l: &str) {
        eprintln!("{l}");
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{l}") {
                self.failed.get_or_insert(e);
            }
        }
    }

    fn finish(self) -> Result<(), CliError> {
        match (self.failed, &self.path) {
            (Some(e), Some(p)) => Err(io_error(p, e)),
            _ => Ok(()),
        }
    }
}

fn cmd_describe(data: &Option<PathBuf>, common: &Common, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let ds = load_csv(&dataset_path(data, &cfg)?, cfg.task)?;
    let client = client(&cfg);
    for (i, r) in client.describe_all(&ds.smiles(), cfg.train.max_in_flight).into_iter().enumerate() {
        r.map_err(|source| PipelineError::Provider { index: i, source })?;
    }
    let s = client.stats();
    let total = s.cache_hits + s.provider_calls;
    let rate = if total == 0 { 1.0 } else { s.cache_hits as f64 / total as f64 };
    writeln!(
        out,
        "describe molecules={} dropped={} cache_hits={} provider_calls={} hit_rate={rate:.6}",
        ds.len(),
        ds.dropped,
        s.cache_hits,
        s.provider_calls
    )
    .map_err(|e| CliError::Data(e.to_string()))
}

fn describe_dataset(ds: &LabeledDataset, log: &mut Logger) {
    log.line(&format!(
        "dataset molecules={} dropped={} targets={} task={}",
        ds.len(),
        ds.dropped,
        ds.target_names.join(","),
        ds.task
    ));
}

fn cmd_train(
    data: &Option<PathBuf>,
    out_path: &Option<PathBuf>,
    log_path: &Option<PathBuf>,
    common: &Common,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    cfg.train.validate()?;
    let archive_file = archive_path(out_path, &cfg)?;
    let log_file = log_path.clone().unwrap_or_else(|| {
        let mut p = archive_file.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut ds = load_csv(&dataset_path(data, &cfg)?, cfg.task)?;
    let mut log = Logger::new(Some(log_file.clone()))?;
    describe_dataset(&ds, &mut log);
    let splits = split_dataset(&ds, cfg.train.split, cfg.train.fractions, cfg.train.seed)?;
    log.line(&format!(
        "split method={} seed={} train={} valid={} test={}",
        cfg.train.split,
        cfg.train.seed,
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    ));
    let client = client(&cfg);
    pipeline::enrich(&mut ds, &splits, &cfg.train, &client, &mut |l| log.line(l))?;
    let (model, _) = pipeline::train(&ds, &splits, &cfg.train, &mut |l| log.line(l))?;
    archive::save(&model, &archive_file)?;
    let report = if splits.test.is_empty() {
        None
    } else {
        Some(model.evaluate(&ds, &splits.test, "test")?)
    };
    if let Some(r) = &report {
        log.line(&r.summary_line());
    }
    log.finish()?;
    let s = client.stats();
    eprintln!("provider cache_hits={} provider_calls={}", s.cache_hits, s.provider_calls);
    let w = |e: std::io::Error| CliError::Data(e.to_string());
    if let Some(r) = report {
        writeln!(out, "{r}").map_err(w)?;
    }
    writeln!(out, "archive={} log={}", archive_file.display(), log_file.display()).map_err(w)
}

fn cmd_eval(
    archive_flag: &Option<PathBuf>,
    data: &Option<PathBuf>,
    split: &str,
    common: &Common,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let model = archive::load(&archive_path(archive_flag, &cfg)?)?;
    let mut ds = load_csv(&dataset_path(data, &cfg)?, Some(model.task))?;
    if ds.target_names != model.target_names {
        return Err(CliError::Data(format!(
            "dataset targets {:?} differ from the archive's {:?}",
            ds.target_names, model.target_names
        )));
    }
    let (name, indices): (&'static str, Vec<usize>) = if split == "all" {
        ("all", (0..ds.len()).collect())
    } else {
        let which: Split = split.parse().map_err(CliError::Usage)?;
        let splits = split_dataset(&ds, model.config.split, model.config.fractions, model.config.seed)?;
        let name = match which {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        (name, splits.get(which).to_vec())
    };
    let client = client(&cfg);
    model.enrich(&mut ds, &client, &mut |l| eprintln!("{l}"))?;
    let report = model.evaluate(&ds, &indices, name)?;
    writeln!(out, "{report}").map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_predict(archive_flag: &Option<PathBuf>, smiles: &str, common: &Common, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let model = archive::load(&archive_path(archive_flag, &cfg)?)?;
    let y = model.predict_smiles(smiles, &client(&cfg))?;
    let values: Vec<String> = model.target_names.iter().zip(&y).map(|(n, v)| format!("{n}={v}")).collect();
    writeln!(out, "prediction smiles={smiles} {}", values.join(" ")).map_err(|e| CliError::Data(e.to_string()))
}

fn parse_molecule(smiles: &str) -> Result<crate::molgraph::MoleculeGraph, CliError> {
    parse_smiles(smiles).map_err(|e| CliError::Data(format!("invalid SMILES {smiles:?}: {e}")))
}

fn cmd_fp(smiles: &str, radius: u32, nbits: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let g = parse_molecule(smiles)?;
    let fp = morgan_fingerprint(&g, radius, nbits).map_err(|e| CliError::Usage(e.to_string()))?;
    let bits: Vec<String> = fp.set_bits().iter().map(usize::to_string).collect();
    writeln!(out, "smiles={smiles} radius={radius} nbits={nbits} popcount={}", fp.popcount())
        .and_then(|_| writeln!(out, "bits={}", bits.join(",")))
        .map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_demos(
    data: &Option<PathBuf>,
    smiles: &str,
    k: Option<usize>,
    strategy: &Option<String>,
    common: &Common,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let strategy: SamplingStrategy = match strategy {
        Some(s) => s.parse().map_err(CliError::Usage)?,
        None => cfg.train.icl_strategy,
    };
    let k = k.unwrap_or(cfg.train.icl_k);
    let query = parse_molecule(smiles)?;
    let ds = load_csv(&dataset_path(data, &cfg)?, cfg.task)?;
    let pool: Vec<PoolEntry> = ds
        .records
        .iter()
        .map(|r| {
            let g = parse_smiles(&r.smiles).expect("dataset records parse");
            PoolEntry {
                smiles: r.smiles.clone(),
                targets: r.targets.clone(),
                fingerprint: morgan_fingerprint(&g, crate::chem::DEFAULT_RADIUS, crate::chem::DEFAULT_NBITS)
                    .expect("default fingerprint size"),
            }
        })
        .collect();
    let fp = morgan_fingerprint(&query, crate::chem::DEFAULT_RADIUS, crate::chem::DEFAULT_NBITS)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let demos = sample_demos(smiles, &fp, &pool, k, strategy, pipeline::molecule_seed(cfg.train.seed, smiles))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let w = |e: std::io::Error| CliError::Data(e.to_string());
    writeln!(out, "# query={smiles} strategy={strategy} k={k} seed={}", cfg.train.seed).map_err(w)?;
    writeln!(out, "rank\tindex\tsimilarity\tsmiles\ttargets").map_err(w)?;
    for (rank, d) in demos.iter().enumerate() {
        let t: Vec<String> = d.targets.iter().map(f64::to_string).collect();
        writeln!(out, "{}\t{}\t{:.6}\t{}\t{}", rank + 1, d.pool_index, d.similarity, d.smiles, t.join(",")).map_err(w)?;
    }
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64, tolerance: f64, out: &mut dyn Write) -> Result<(), CliError> {
    let opts = GradcheckOptions { trials, seed, ..GradcheckOptions::default() };
    let report = run_gradcheck(&opts);
    let w = |e: std::io::Error| CliError::Data(e.to_string());
    for f in &report.families {
        writeln!(out, "{:<28} {:>12.4e}  ({} entries)", f.family, f.max_rel_error, f.entries).map_err(w)?;
    }
    let pass = report.passes(tolerance);
    writeln!(
        out,
        "gradcheck families={} molecules={} max_rel_error={:.4e} tolerance={tolerance:e} elapsed_s={:.3} result={}",
        report.families.len(),
        report.molecules.len(),
        report.max_error(),
        report.elapsed.as_secs_f64(),
        if pass { "pass" } else { "fail" }
    )
    .map_err(w)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Data(format!("max relative error {:.4e} exceeds {tolerance:e}", report.max_error())))
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Describe { data, common } => cmd_describe(data, common, out),
        Command::Train { data, out: archive, log, common } => cmd_train(data, archive, log, common, out),
        Command::Eval { archive, data, split, common } => cmd_eval(archive, data, split, common, out),
        Command::Predict { archive, smiles, common } => cmd_predict(archive, smiles, common, out),
        Command::Fp { smiles, radius, nbits } => cmd_fp(smiles, *radius, *nbits, out),
        Command::Demos { data, smiles, k, strategy, common } => cmd_demos(data, smiles, *k, strategy, common, out),
        Command::Gradcheck { trials, seed, tolerance } => cmd_gradcheck(*trials, *seed, *tolerance, out),
        Command::Config { common } => {
            let cfg = resolve(common)?;
            write!(out, "{}", cfg.to_text()).map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
                let _ = writeln!(err, "error kind=usage exit=1 message={:?}", e.kind().to_string());
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error kind={} exit={} message={:?}", e.kind(), e.exit_code(), e.message());
            e.exit_code()
        }
    }
}
