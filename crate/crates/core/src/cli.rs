//! The `vblink` command line: `synth`, `fit`, `eval`, `oracle-check`.
//!
//! Every run writes `manifest.txt` into its output directory. The manifest
//! uses the same `key=value` format as `--config`, so
//! `vblink <command> --config <out>/manifest.txt` repeats a run. Flags given
//! on the command line override config values.
//!
//! Exit codes: 0 success, 2 usage, 3 numerical failure, 4 no convergence
//! within `--max-sweeps`, 5 variational bound violated (`oracle-check`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, LineWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::corpus::{load_databases, Corpus, Schema, SchemaPolicy};
use crate::engine::{self, FitOptions, HyperParams};
use crate::error::Error;
use crate::eval::{self, RecordLabels};
use crate::genmodel::{self, GenConfig, Layout, NoiseModel};
use crate::oracle;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;
pub const EXIT_BOUND_VIOLATED: u8 = 5;

/// Slack allowed when checking ELBO ≤ log evidence.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "vblink", version, about = "Variational entity resolution for categorical databases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample synthetic databases with ground truth.
    Synth(SynthArgs),
    /// Fit the variational model and write the linkage.
    Fit(FitArgs),
    /// Score a linkage file against a truth file.
    Eval(EvalArgs),
    /// Compare the variational fit with exact enumeration on a tiny instance.
    OracleCheck(FitArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of latent entities (standard mode only).
    #[arg(long)]
    pub k: Option<usize>,
    /// Records per database, comma separated.
    #[arg(long)]
    pub db_sizes: Option<String>,
    /// Number of fields per record.
    #[arg(long)]
    pub fields: Option<usize>,
    /// Values per field.
    #[arg(long)]
    pub cardinality: Option<usize>,
    /// Peaked noise: probability that a field is recorded wrongly.
    #[arg(long)]
    pub distortion: Option<f64>,
    /// Dirichlet noise concentration, used when --distortion is absent.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Small-cluster mode: every entity gets between 1 and this many records.
    #[arg(long)]
    pub small_cluster_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// One CSV per database.
    pub inputs: Vec<PathBuf>,
    /// Number of latent entities; defaults to the number of records.
    #[arg(long)]
    pub k: Option<usize>,
    /// Symmetric Dirichlet concentration.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Per-field concentrations: `field<TAB>a` or `field<TAB>a1,a2,...`.
    #[arg(long)]
    pub alpha_file: Option<PathBuf>,
    /// Upper limit on coordinate-ascent sweeps.
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Relative ELBO change that counts as converged.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Explicit schema file fixing the attribute codes.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Linkage CSV (`db,record,entity,max_prob`).
    pub linkage: Option<PathBuf>,
    /// Truth CSV (`db,record,entity`).
    pub truth: Option<PathBuf>,
}

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalFailure { .. } => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<u8, Failure>;

/// Parses `std::env::args` and runs; the bin's entire body.
pub fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("vblink: {}", f.message);
            f.code
        }
    }
}

/// `key=value` settings from `--config`, overridden by flags.
struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<&'static str, String>,
}

impl Settings {
    fn load(command: &'static str, config: Option<&Path>) -> std::result::Result<Self, Failure> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Failure::usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
            if let Some(c) = file.get("command") {
                if c != command {
                    return Err(Failure::usage(format!("config is for `{c}`, not `{command}`")));
                }
            }
        }
        let mut resolved = BTreeMap::new();
        resolved.insert("command", command.to_string());
        Ok(Settings { file, resolved })
    }

    /// Flag value if given, else the config value, recorded for the manifest.
    fn get<T: FromStr + ToString>(&mut self, key: &'static str, flag: Option<T>) -> std::result::Result<Option<T>, Failure> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|_| Failure::usage(format!("config value `{raw}` is not valid for {key}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key, v.to_string());
        }
        Ok(value)
    }

    fn record(&mut self, key: &'static str, value: impl ToString) {
        self.resolved.insert(key, value.to_string());
    }

    fn write_manifest(&self, dir: &Path) -> std::result::Result<(), Failure> {
        let mut text = String::new();
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k}={v}\n"));
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e).into())
    }
}

fn list_to_string<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> std::result::Result<Vec<T>, Failure> {
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Failure::usage(format!("bad {what} entry `{s}`"))))
        .collect()
}

fn prepare_out(settings: &mut Settings, flag: Option<PathBuf>, required: bool) -> std::result::Result<Option<PathBuf>, Failure> {
    let out = settings.get::<String>("out", flag.map(|p| p.display().to_string()))?.map(PathBuf::from);
    match &out {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?,
        None if required => return Err(Failure::usage("--out is required")),
        None => {}
    }
    Ok(out)
}

fn workers(settings: &mut Settings, flag: Option<usize>) -> std::result::Result<usize, Failure> {
    let w = settings.get("workers", flag)?.unwrap_or(1);
    if w == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    Ok(w)
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let mut s = Settings::load("synth", args.common.config.as_deref())?;
    let out = prepare_out(&mut s, args.common.out, true)?.expect("required");
    let seed = s.get("seed", args.common.seed)?.unwrap_or(0);
    s.record("seed", seed);
    let db_sizes: Vec<usize> = match s.get::<String>("db-sizes", args.db_sizes)? {
        Some(raw) => parse_list(&raw, "--db-sizes")?,
        None => return Err(Failure::usage("--db-sizes is required")),
    };
    let fields = s.get("fields", args.fields)?.ok_or_else(|| Failure::usage("--fields is required"))?;
    let cardinality = s
        .get("cardinality", args.cardinality)?
        .ok_or_else(|| Failure::usage("--cardinality is required"))?;
    if cardinality == 0 {
        return Err(Failure::usage("--cardinality must be at least 1"));
    }
    let cards = vec![cardinality; fields];
    let k = s.get("k", args.k)?;
    let small = s.get("small-cluster-max", args.small_cluster_max)?;
    let distortion = s.get("distortion", args.distortion)?;
    let alpha = s.get("alpha", args.alpha)?;

    let layout = match (small, k) {
        (Some(_), Some(_)) => return Err(Failure::usage("--k is derived in small-cluster mode; drop one of the flags")),
        (Some(m), None) => Layout::SmallCluster {
            records_per_db: db_sizes,
            max_per_entity: m,
        },
        (None, Some(k)) => Layout::Standard {
            entities: k,
            records_per_db: db_sizes,
        },
        (None, None) => return Err(Failure::usage("--k is required unless --small-cluster-max is given")),
    };
    let noise = match (distortion, alpha) {
        (Some(_), Some(_)) => return Err(Failure::usage("give either --distortion or --alpha, not both")),
        (Some(eps), None) => NoiseModel::Peaked { distortion: eps },
        (None, Some(a)) => NoiseModel::symmetric_dirichlet(a, &cards),
        (None, None) => return Err(Failure::usage("one of --distortion or --alpha is required")),
    };
    let config = GenConfig {
        layout,
        cardinalities: cards,
        noise,
        seed,
    };
    let (corpus, truth) = genmodel::sample_dataset(&config)?;
    let paths = corpus.write_databases(&out)?;
    corpus.schema().write(out.join("schema.tsv"))?;
    genmodel::write_ground_truth(&truth, corpus.schema(), &out)?;
    s.record("entities", truth.entity_count());
    s.write_manifest(&out)?;
    println!(
        "wrote {} databases ({} records, {} entities) to {}",
        paths.len(),
        corpus.total_records(),
        truth.entity_count(),
        out.display()
    );
    Ok(EXIT_OK)
}

struct Problem {
    corpus: Corpus,
    hp: HyperParams,
    options: FitOptions,
}

fn load_problem(s: &mut Settings, args: FitArgs) -> std::result::Result<Problem, Failure> {
    let inputs: Vec<PathBuf> = if args.inputs.is_empty() {
        match s.file.get("inputs") {
            Some(raw) => raw.split(',').map(PathBuf::from).collect(),
            None => return Err(Failure::usage("no input CSV files given")),
        }
    } else {
        args.inputs
    };
    s.record("inputs", list_to_string(&inputs.iter().map(|p| p.display()).collect::<Vec<_>>()));

    let policy = match s.get::<String>("schema", args.schema.map(|p| p.display().to_string()))? {
        Some(path) => SchemaPolicy::Explicit(Schema::read(path)?),
        None => SchemaPolicy::UnionOfObserved,
    };
    let corpus = load_databases(&inputs, policy)?;
    let cards = corpus.cardinalities();
    if cards.contains(&0) {
        return Err(Failure::usage("a field has no observed values; supply --schema"));
    }

    let k = match s.get("k", args.k)? {
        Some(0) => return Err(Failure::usage("--k must be at least 1")),
        Some(k) => k,
        None => corpus.total_records().max(1),
    };
    s.record("k", k);

    let alpha_file = s.get::<String>("alpha-file", args.alpha_file.map(|p| p.display().to_string()))?;
    let alpha = s.get("alpha", args.alpha)?;
    let hp = match (alpha_file, alpha) {
        (Some(_), Some(_)) => return Err(Failure::usage("give either --alpha or --alpha-file, not both")),
        (Some(path), None) => HyperParams::new(k, read_alpha_file(Path::new(&path), corpus.schema())?)?,
        (None, a) => {
            let a = a.unwrap_or(DEFAULT_ALPHA);
            if !(a > 0.0) {
                return Err(Failure::usage("--alpha must be positive"));
            }
            s.record("alpha", a);
            HyperParams::symmetric(k, a, &cards)?
        }
    };

    let defaults = FitOptions::default();
    let options = FitOptions {
        max_sweeps: s.get("max-sweeps", args.max_sweeps)?.unwrap_or(defaults.max_sweeps),
        rel_tol: s.get("tol", args.tol)?.unwrap_or(defaults.rel_tol),
        seed: s.get("seed", args.common.seed)?.unwrap_or(defaults.seed),
        workers: workers(s, args.common.workers)?,
    };
    if options.max_sweeps == 0 || !(options.rel_tol > 0.0) {
        return Err(Failure::usage("--max-sweeps must be ≥ 1 and --tol positive"));
    }
    s.record("max-sweeps", options.max_sweeps);
    s.record("tol", options.rel_tol);
    s.record("seed", options.seed);
    s.record("workers", options.workers);
    Ok(Problem { corpus, hp, options })
}

/// Per-field concentrations; a single number is broadcast over the field.
pub fn read_alpha_file(path: &Path, schema: &Schema) -> crate::error::Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_field: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("alpha file", path, format!("line {} has no tab separator", i + 1)))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format("alpha file", path, format!("line {} has a non-numeric value", i + 1)))?;
        by_field.insert(name.to_string(), values);
    }
    schema
        .fields()
        .iter()
        .map(|field| {
            let values = by_field
                .get(&field.name)
                .ok_or_else(|| Error::format("alpha file", path, format!("no entry for field `{}`", field.name)))?;
            match values.len() {
                1 => Ok(vec![values[0]; field.cardinality()]),
                n if n == field.cardinality() => Ok(values.clone()),
                n => Err(Error::format(
                    "alpha file",
                    path,
                    format!("field `{}` has {} values but {n} concentrations", field.name, field.cardinality()),
                )),
            }
        })
        .collect()
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    let mut s = Settings::load("fit", args.common.config.as_deref())?;
    let out = prepare_out(&mut s, args.common.out.clone(), true)?.expect("required");
    let Problem { corpus, hp, options } = load_problem(&mut s, args)?;
    s.write_manifest(&out)?;

    let trace_path = out.join("elbo_trace.csv");
    let file = File::create(&trace_path).map_err(|e| Failure::from(Error::io(&trace_path, e)))?;
    let mut trace = LineWriter::new(file);
    writeln!(trace, "sweep,elbo").map_err(|e| Failure::from(Error::io(&trace_path, e)))?;
    let mut trace_error = None;

    let mut state = engine::init_state(&corpus, &hp, options.seed)?;
    let fitted = engine::fit_from(&mut state, &corpus, &hp, &options, |event| {
        if trace_error.is_none() {
            if let Err(e) = writeln!(trace, "{},{}", event.sweep, event.elbo) {
                trace_error = Some(e);
            }
        }
    });
    if let Some(e) = trace_error {
        return Err(Error::io(&trace_path, e).into());
    }
    let report = match fitted {
        Ok(r) => r,
        Err(e @ Error::NumericalFailure { .. }) => {
            let path = out.join("failure.txt");
            let _ = std::fs::write(&path, format!("{e}\n"));
            let _ = engine::write_checkpoint(out.join("failure.ckpt"), corpus.records_per_db(), &hp, &state);
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    let linkage = eval::map_linkage(&state);
    let link_path = out.join("linkage.csv");
    let file = File::create(&link_path).map_err(|e| Failure::from(Error::io(&link_path, e)))?;
    eval::write_linkage_csv(file, &corpus, &linkage).map_err(|e| Failure::from(Error::io(&link_path, e)))?;
    engine::write_lambda_csv(out.join("lambda.csv"), corpus.schema(), &state)?;
    engine::write_checkpoint(out.join("state.ckpt"), corpus.records_per_db(), &hp, &state)?;

    println!("records: {}", corpus.total_records());
    println!("entities (K): {}", hp.entities());
    println!("sweeps: {}", report.sweeps_run);
    println!("converged: {}", report.converged);
    println!("final elbo: {}", report.final_elbo());
    println!("estimated entities: {}", linkage.entity_count_estimate);
    println!("wall time: {:.3}s", report.wall_time);
    Ok(if report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let mut s = Settings::load("eval", args.common.config.as_deref())?;
    let out = prepare_out(&mut s, args.common.out, false)?;
    let linkage = s
        .get::<String>("linkage", args.linkage.map(|p| p.display().to_string()))?
        .ok_or_else(|| Failure::usage("a linkage file is required"))?;
    let truth = s
        .get::<String>("truth", args.truth.map(|p| p.display().to_string()))?
        .ok_or_else(|| Failure::usage("a truth file is required"))?;
    let predicted = RecordLabels::read(&linkage)?;
    let truth = RecordLabels::read(&truth)?;
    let (p, t) = RecordLabels::align(&predicted, &truth)?;
    let score = eval::pairwise_metrics(&p, &t)?;
    if let Some(dir) = &out {
        eval::write_score_json(dir.join("score.json"), &score)?;
        s.write_manifest(dir)?;
    }
    println!("pairwise_precision: {}", score.pairwise_precision);
    println!("pairwise_recall: {}", score.pairwise_recall);
    println!("pairwise_f1: {}", score.pairwise_f1);
    println!("true_entity_count: {}", score.true_entity_count);
    println!("estimated_entity_count: {}", score.estimated_entity_count);
    Ok(EXIT_OK)
}

/// Outcome of comparing a variational fit with exact enumeration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OracleReport {
    pub log_evidence: f64,
    pub final_elbo: f64,
    /// `log_evidence − final_elbo`; negative beyond the slack is a violation.
    pub gap: f64,
    pub max_cocluster_discrepancy: f64,
    pub bound_holds: bool,
}

pub fn oracle_report(corpus: &Corpus, hp: &HyperParams, options: &FitOptions) -> crate::error::Result<OracleReport> {
    let exact = oracle::exact_posterior(corpus, hp, oracle::DEFAULT_BUDGET)?;
    let (state, report) = engine::fit(corpus, hp, options)?;
    let n = corpus.total_records();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let estimates = eval::posterior_cocluster_estimate(&state, &pairs)?;
    let max_cocluster_discrepancy = pairs
        .iter()
        .zip(&estimates)
        .map(|(&(i, j), e)| (exact.cocluster(i, j) - e).abs())
        .fold(0.0, f64::max);
    let final_elbo = report.final_elbo();
    let gap = exact.log_evidence - final_elbo;
    Ok(OracleReport {
        log_evidence: exact.log_evidence,
        final_elbo,
        gap,
        max_cocluster_discrepancy,
        bound_holds: gap >= -BOUND_SLACK,
    })
}

fn cmd_oracle_check(args: FitArgs) -> CmdResult {
    let mut s = Settings::load("oracle-check", args.common.config.as_deref())?;
    let out = prepare_out(&mut s, args.common.out.clone(), false)?;
    let Problem { corpus, hp, options } = load_problem(&mut s, args)?;
    let report = match oracle_report(&corpus, &hp, &options) {
        Err(e @ Error::BudgetExceeded { .. }) => return Err(Failure::usage(format!("size error: {e}"))),
        other => other?,
    };
    if let Some(dir) = &out {
        let path = dir.join("oracle_report.json");
        let file = File::create(&path).map_err(|e| Failure::from(Error::io(&path, e)))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report).map_err(|e| Failure::usage(e.to_string()))?;
        s.write_manifest(dir)?;
    }
    println!("log evidence: {}", report.log_evidence);
    println!("final elbo: {}", report.final_elbo);
    println!("gap: {}", report.gap);
    println!("max cocluster discrepancy: {}", report.max_cocluster_discrepancy);
    if report.bound_holds {
        Ok(EXIT_OK)
    } else {
        eprintln!("vblink: ELBO exceeds the exact log evidence by more than {BOUND_SLACK}");
        Ok(EXIT_BOUND_VIOLATED)
    }
}
