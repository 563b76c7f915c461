//! The `hsr` command line: run experiments, gate-report classifiers, replay
//! vote logs.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ensemble::MachineOutputs;
use crate::error::{Error, Result};
use crate::experiment::{replay_replicate, run_experiment, run_replicate, ExperimentConfig, Replicate, Strategy};
use crate::gate::{profile_classifier, select_classifiers, GoldSet};
use crate::prob::{beta_prob_better_than_random, BetaPosterior};
use crate::report::RunReport;
use crate::{chart, io};

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  runtime failure (engine error, cannot write outputs)
  2  invalid input (malformed or schema-violating config, unreadable or malformed CSV, bad flags)

Errors are printed to stderr as a single JSON object.";

#[derive(Debug, Parser)]
#[command(name = "hsr", version, about = "Hybrid crowd and machine multi-predicate screening", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a configured experiment and write results.csv, charts and a manifest.
    #[command(after_help = EXIT_CODES)]
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config, default `results`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads across repetitions (0 = all available cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Add the gold-set cost to the price ratio.
        #[arg(long)]
        include_gold_cost: bool,
        /// Also write the world, pool, gold set, vote logs and per-run reports
        /// of repetition 0 at the first sweep point.
        #[arg(long)]
        record_votes: bool,
    },
    /// Test classifiers against a gold set and show which would be retained.
    #[command(after_help = EXIT_CODES)]
    GateReport {
        gold: PathBuf,
        outputs: PathBuf,
        /// Selection threshold on P(accuracy > 0.5).
        #[arg(long, default_value_t = 0.95)]
        sc: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run a strategy with crowd votes answered from a recorded log.
    #[command(after_help = EXIT_CODES)]
    Replay {
        votes: PathBuf,
        config: PathBuf,
        #[arg(long, default_value = "HSR-NB")]
        strategy: Strategy,
        /// Base seed override, as given to `run`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// Write the full run report here instead of a summary on stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: Error,
}

impl CliError {
    fn input(error: Error) -> Self {
        CliError { code: 2, error }
    }

    fn runtime(error: Error) -> Self {
        CliError { code: 1, error }
    }

    pub fn to_json(&self) -> String {
        let kind = match &self.error {
            Error::Domain { .. } => "domain",
            Error::DegenerateEvidence(_) => "degenerate_evidence",
            Error::Empty(_) => "empty",
            Error::Coverage(_) => "coverage",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::BudgetExhausted { .. } => "budget_exhausted",
            Error::VoteSourceExhausted { .. } => "vote_source_exhausted",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        };
        let mut v = serde_json::json!({
            "error": kind,
            "message": self.error.to_string(),
            "exit_code": self.code,
        });
        if let Error::Parse { path, line, .. } = &self.error {
            v["path"] = path.display().to_string().into();
            v["line"] = (*line).into();
        }
        v.to_string()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Phase<T> {
    fn input(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T> Phase<T> for Result<T> {
    fn input(self) -> CliResult<T> {
        self.map_err(CliError::input)
    }
    fn runtime(self) -> CliResult<T> {
        self.map_err(CliError::runtime)
    }
}

/// Config file: an experiment config plus output settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: Option<PathBuf>,
    pub charts: bool,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let output_dir = match obj.remove("output_dir") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(Error::Config("output_dir must be a string".into())),
        };
        let charts = match obj.remove("charts") {
            None => true,
            Some(serde_json::Value::Bool(b)) => b,
            Some(_) => return Err(Error::Config("charts must be a boolean".into())),
        };
        let experiment: ExperimentConfig = serde_json::from_value(value)?;
        experiment.validate()?;
        Ok(CliConfig {
            experiment,
            output_dir,
            charts,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// SHA-256 of the canonical JSON form of `cfg`; insensitive to formatting and
/// key order of the source file.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(cfg)?;
    Ok(Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub seed_override: Option<u64>,
    pub jobs: usize,
    pub include_gold_cost: bool,
    pub repetitions: usize,
    pub strategies: Vec<Strategy>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Parses the arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.code
        }
    }
}

pub fn execute(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            jobs,
            include_gold_cost,
            record_votes,
        } => cmd_run(&config, out, seed, jobs, include_gold_cost, record_votes, stdout),
        Command::GateReport { gold, outputs, sc, csv } => cmd_gate_report(&gold, &outputs, sc, csv.as_deref(), stdout, stderr),
        Command::Replay {
            votes,
            config,
            strategy,
            seed,
            repetition,
            report,
        } => cmd_replay(&votes, &config, strategy, seed, repetition, report.as_deref(), stdout),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: usize,
    include_gold_cost: bool,
    record_votes: bool,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let file = CliConfig::load(config_path).input()?;
    let hash = config_hash(&file.experiment).input()?;
    let mut cfg = file.experiment.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.include_gold_cost |= include_gold_cost;
    let out_dir = out.or(file.output_dir).unwrap_or_else(|| PathBuf::from("results"));

    let report = run_experiment(&cfg, jobs).runtime()?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e)).runtime()?;
    let mut files = Vec::new();

    let csv = report.to_csv_string().runtime()?;
    write_file(&out_dir.join("results.csv"), csv.as_bytes()).runtime()?;
    files.push("results.csv".to_string());

    write_runs_csv(&out_dir.join("runs.csv"), &report).runtime()?;
    files.push("runs.csv".to_string());

    if file.charts {
        for (name, svg) in chart::standard_charts(&report) {
            write_file(&out_dir.join(name), svg.as_bytes()).runtime()?;
            files.push(name.to_string());
        }
    }

    if record_votes {
        files.extend(record_first_replicate(&cfg, &out_dir).runtime()?);
    }

    let manifest = Manifest {
        tool: "hsr",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: hash,
        seed: cfg.seed,
        seed_override: seed,
        jobs,
        include_gold_cost: cfg.include_gold_cost,
        repetitions: cfg.repetitions,
        strategies: cfg.strategies.clone(),
        files,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from).runtime()?;
    write_file(&out_dir.join("manifest.json"), json.as_bytes()).runtime()?;

    let failed: usize = report.runs.iter().filter(|r| r.error.is_some()).count();
    let _ = writeln!(
        stdout,
        "wrote {} ({} runs, {failed} failed)",
        out_dir.display(),
        report.runs.len()
    );
    Ok(())
}

fn write_runs_csv(path: &Path, report: &crate::experiment::ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Config(format!("csv output: {e}"));
    let mut header = vec!["sweep_value", "repetition", "strategy"];
    header.extend(crate::metrics::METRIC_NAMES);
    header.push("error");
    w.write_record(&header).map_err(wrap)?;
    for r in &report.runs {
        let mut row = vec![
            r.sweep_value.map(|v| v.to_string()).unwrap_or_default(),
            r.repetition.to_string(),
            r.strategy.name().to_string(),
        ];
        match &r.metrics {
            Some(m) => row.extend(m.named().iter().map(|(_, v)| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), crate::metrics::METRIC_NAMES.len())),
        }
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv output: {e}")))?;
    write_file(path, &bytes)
}

fn record_first_replicate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<String>> {
    let point = cfg.points()[0];
    let at = cfg.at(point)?;
    let rep = Replicate::draw(&at, 0)?;
    let dir = out_dir.join("rep0");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    io::write_world(&dir.join("world.csv"), &rep.world)?;
    io::write_pool(&dir.join("pool.csv"), &rep.pool)?;
    io::write_gold(&dir.join("gold.csv"), &rep.gold)?;
    files.extend(["rep0/world.csv", "rep0/pool.csv", "rep0/gold.csv"].map(String::from));
    for (strategy, run) in run_replicate(&at, &rep, &at.strategies) {
        let Ok(run) = run else { continue };
        if strategy.uses_crowd() {
            let name = format!("rep0/votes_{}.csv", strategy.name());
            io::write_votes(&out_dir.join(&name), run.votes())?;
            files.push(name);
        }
        let name = format!("rep0/report_{}.json", strategy.name());
        write_file(&out_dir.join(&name), RunReport::new(&run, point, 0).to_json()?.as_bytes())?;
        files.push(name);
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub classifier_id: usize,
    pub filter_id: usize,
    pub correct: u64,
    pub failed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub prob_better_than_random: f64,
    pub retained: bool,
}

/// One row per (classifier, filter) seen in the outputs or the gold set.
pub fn gate_rows(gold: &GoldSet, outputs: &crate::ensemble::OutputTable, sc: f64) -> Result<Vec<GateRow>> {
    let mut filters: BTreeSet<usize> = gold.filters();
    filters.extend(outputs.iter().map(|((_, _, f), _)| *f));
    let profiles = (0..outputs.n_classifiers())
        .map(|c| {
            profile_classifier(
                c,
                |i, f| outputs.label(c, i, f),
                gold,
                filters.iter().copied(),
                BetaPosterior::uniform(),
                0.0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let profiles = select_classifiers(&profiles, sc)?;
    let mut rows = Vec::new();
    for p in &profiles {
        for (&f, post) in &p.per_filter_posterior {
            let (correct, failed) = p.per_filter_counts[&f];
            rows.push(GateRow {
                classifier_id: p.classifier_id,
                filter_id: f,
                correct,
                failed,
                alpha: post.alpha,
                beta: post.beta,
                prob_better_than_random: beta_prob_better_than_random(post),
                retained: p.is_retained(f),
            });
        }
    }
    Ok(rows)
}

pub fn cmd_gate_report(
    gold_path: &Path,
    outputs_path: &Path,
    sc: f64,
    csv_path: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<()> {
    if !(sc > 0.0 && sc < 1.0) {
        return Err(CliError::input(Error::Domain {
            name: "sc",
            value: sc,
            domain: "(0, 1)",
        }));
    }
    let text = std::fs::read(gold_path).map_err(|e| Error::io(gold_path, e)).input()?;
    let gold_rows = io::parse_gold_rows(gold_path, text.as_slice()).input()?;
    let outputs = io::read_outputs(outputs_path).input()?;
    for c in 0..outputs.n_classifiers() {
        for (e, line) in &gold_rows {
            if outputs.label(c, e.item_id, e.filter_id).is_none() {
                return Err(CliError::input(Error::Parse {
                    path: gold_path.to_path_buf(),
                    line: *line,
                    message: format!(
                        "classifier {c} has no output for item {}, filter {} in {}",
                        e.item_id,
                        e.filter_id,
                        outputs_path.display()
                    ),
                }));
            }
        }
    }
    if gold_rows.is_empty() {
        let _ = writeln!(
            stderr,
            "warning: gold set {} is empty; no classifier can be retained",
            gold_path.display()
        );
    }
    let gold = GoldSet::new(gold_rows.into_iter().map(|(e, _)| e).collect(), 0.0).input()?;
    let rows = gate_rows(&gold, &outputs, sc).input()?;

    let _ = writeln!(stdout, "selection threshold sc = {sc}");
    let _ = writeln!(
        stdout,
        "{:>10} {:>6} {:>8} {:>7} {:>14} {:>10} {:>8}",
        "classifier", "filter", "correct", "failed", "posterior", "P(>0.5)", "retained"
    );
    for r in &rows {
        let _ = writeln!(
            stdout,
            "{:>10} {:>6} {:>8} {:>7} {:>14} {:>10.6} {:>8}",
            r.classifier_id,
            r.filter_id,
            r.correct,
            r.failed,
            format!("Beta({},{})", r.alpha, r.beta),
            r.prob_better_than_random,
            if r.retained { "yes" } else { "no" }
        );
    }
    let retained = rows.iter().filter(|r| r.retained).count();
    let _ = writeln!(stdout, "{retained} of {} (classifier, filter) pairs retained", rows.len());

    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::Config(format!("csv output: {e}"));
        for r in &rows {
            w.serialize(r).map_err(wrap).runtime()?;
        }
        if rows.is_empty() {
            w.write_record([
                "classifier_id",
                "filter_id",
                "correct",
                "failed",
                "alpha",
                "beta",
                "prob_better_than_random",
                "retained",
            ])
            .map_err(wrap)
            .runtime()?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Config(format!("csv output: {e}")))
            .runtime()?;
        write_file(path, &bytes).runtime()?;
    }
    Ok(())
}

pub fn cmd_replay(
    votes_path: &Path,
    config_path: &Path,
    strategy: Strategy,
    seed: Option<u64>,
    repetition: usize,
    report_path: Option<&Path>,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let mut cfg = CliConfig::load(config_path).input()?.experiment;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let votes = io::read_votes(votes_path).input()?;
    let point = cfg.points()[0];
    let at = cfg.at(point).input()?;
    let rep = Replicate::draw(&at, repetition).runtime()?;
    let (_, run) = replay_replicate(&at, &rep, &[strategy], &votes)
        .pop()
        .expect("one strategy requested");
    let run = run.runtime()?;
    let report = RunReport::new(&run, point, repetition);
    let json = report.to_json().runtime()?;
    match report_path {
        Some(p) => {
            write_file(p, json.as_bytes()).runtime()?;
            let _ = writeln!(stdout, "{}", serde_json::to_string(&run.metrics).unwrap_or_default());
        }
        None => {
            let _ = writeln!(stdout, "{json}");
        }
    }
    Ok(())
}
