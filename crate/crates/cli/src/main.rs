use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fipbo::batch::{AcquisitionKind, ProposedBatch};
use fipbo::bench::{default_pi_grid, pi_sweep, run_monte_carlo, timing_probe, write_outputs, RunConfig};
use fipbo::campaign::{
    aps_config, aps_initial_dataset, fdm_config, fdm_pi_switch_study, load_session, save_session, simulate_aps,
    with_session, CampaignConfig, InitData, SessionState,
};
use fipbo::problems::{find_grid_optimum, make_grid, BenchmarkProblem, ProblemName};

#[derive(Parser)]
#[command(name = "fipbo", version, about = "Constrained batch Bayesian optimization with a known cost")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark harness on the analytic test problems.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Human-in-the-loop experiment campaigns.
    #[command(subcommand)]
    Campaign(CampaignCmd),
    /// Analytic test problems.
    #[command(subcommand)]
    Problems(ProblemsCmd),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value = "p1")]
    problem: ProblemName,
    /// Confidence threshold of the switching acquisition.
    #[arg(long, default_value_t = 0.6)]
    pi: f64,
    /// Measurement noise standard deviation; 0 runs the noiseless protocol.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    /// Repetitions (noiseless mode).
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Random initializations (noisy mode).
    #[arg(long, default_value_t = 20)]
    inits: usize,
    /// Noise realizations per initialization (noisy mode).
    #[arg(long, default_value_t = 5)]
    noise_reals: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 20_000)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, acquisition: AcquisitionKind) -> RunConfig {
        RunConfig {
            pi: self.pi,
            tau: self.tau,
            repetitions: self.reps,
            initializations: self.inits,
            noise_realizations: self.noise_reals,
            max_iterations: self.max_iter,
            grid_count: self.grid,
            seed: self.seed,
            ..RunConfig::new(self.problem, acquisition)
        }
    }
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Monte Carlo repetitions of one or both acquisition strategies.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Acquisition strategy; repeat to compare several (default: alg1 and eic).
        #[arg(long = "acq")]
        acquisitions: Vec<AcquisitionKind>,
    },
    /// Required iterations and feasible fraction across a grid of pi values.
    SweepPi {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        pis: Option<Vec<f64>>,
    },
    /// Wall clock of one full iteration (fit, score, select).
    Timing {
        #[arg(long, default_value = "p1")]
        problem: ProblemName,
        #[arg(long, default_value_t = 20_000)]
        grid: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum ProblemsCmd {
    /// Write each problem's definition and grid optimum as JSON.
    Export {
        #[arg(long)]
        problem: Option<ProblemName>,
        #[arg(long, default_value_t = 20_000)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Aps,
    Fdm,
}

#[derive(Subcommand)]
enum CampaignCmd {
    /// Create a session file from a campaign config.
    Init {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing session.
        #[arg(long)]
        force: bool,
    },
    /// Write a ready-to-run config for one of the synthetic processes.
    Example {
        kind: Synthetic,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Store the session offset from a baseline experiment.
    Calibrate {
        #[arg(long)]
        session: PathBuf,
        /// Controllable settings of the baseline experiment.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        baseline: Vec<f64>,
        /// Measured status value of the baseline experiment.
        #[arg(long, allow_hyphen_values = true)]
        measured: f64,
        /// Constraint measurements of the baseline experiment, stored as data.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        constraints: Option<Vec<f64>>,
        /// Accept a baseline that is not an initialization setting.
        #[arg(long)]
        allow_outside: bool,
    },
    /// Propose the next batch.
    Suggest {
        #[arg(long)]
        session: PathBuf,
        /// Batch size for this and later suggestions.
        #[arg(long)]
        n: Option<usize>,
        /// Confidence threshold for this and later suggestions.
        #[arg(long)]
        pi: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Record measurements for the pending batch, in batch order.
    Record {
        #[arg(long)]
        session: PathBuf,
        /// One row of constraint values per experiment, comma separated.
        #[arg(long = "row", action = clap::ArgAction::Append, allow_hyphen_values = true)]
        rows: Vec<String>,
        /// CSV file with one row per experiment; a header line is optional.
        #[arg(long, conflicts_with = "rows")]
        csv: Option<PathBuf>,
        /// Measured status values, one per experiment.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        status: Option<Vec<f64>>,
        #[arg(long)]
        json: bool,
    },
    /// Discard the pending batch (failed experiments).
    Abandon {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        reason: Option<String>,
    },
    /// Summary of the session; never modifies it.
    Status {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Closed-loop runs against the synthetic processes.
    Simulate {
        kind: Synthetic,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// APS: largest number of batches.
        #[arg(long, default_value_t = 50)]
        max_batches: usize,
        /// FDM: number of seeded runs.
        #[arg(long, default_value_t = 20)]
        runs: u64,
        /// FDM: experiments (including initialization) before the pi change.
        #[arg(long, default_value_t = 10)]
        switch_after: usize,
        /// FDM: experiments after the pi change.
        #[arg(long, default_value_t = 6)]
        extra: usize,
        #[arg(long, default_value_t = 0.4)]
        pi_before: f64,
        #[arg(long, default_value_t = 0.1)]
        pi_after: f64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("FIPBO_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let result = match Cli::parse().command {
        Command::Bench(cmd) => bench(cmd),
        Command::Campaign(cmd) => campaign(cmd),
        Command::Problems(ProblemsCmd::Export { problem, grid, out }) => export_problems(problem, grid, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn bench(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Run { run, mut acquisitions } => {
            if acquisitions.is_empty() {
                acquisitions = vec![AcquisitionKind::Switching, AcquisitionKind::ConstrainedEi];
            }
            let mut results = Vec::new();
            for acq in acquisitions {
                let cfg = run.config(acq);
                let (m, traces) = run_monte_carlo(&cfg)?;
                println!(
                    "{} {}: required iterations {:.2}, feasible {:.1}% ({:.1}% with init), optimum found {}/{}",
                    run.problem,
                    m.label,
                    m.mean_required_iterations,
                    100.0 * m.feasible_fraction,
                    100.0 * m.feasible_fraction_with_init,
                    m.optimum_found,
                    m.repetitions
                );
                results.push((m, traces));
            }
            if let Some(dir) = run.out {
                write_outputs(&dir, &results)?;
                println!("wrote {}", dir.display());
            }
        }
        BenchCmd::SweepPi { run, pis } => {
            let pis = pis.unwrap_or_else(default_pi_grid);
            let sweep = pi_sweep(&run.config(AcquisitionKind::Switching), &pis)?;
            println!("{:>6} {:>10} {:>10}", "pi", "req.iter", "feasible");
            for (m, _) in &sweep.points {
                println!("{:>6} {:>10.2} {:>9.1}%", m.pi, m.mean_required_iterations, 100.0 * m.feasible_fraction);
            }
            let (e, _) = &sweep.eic;
            println!("{:>6} {:>10.2} {:>9.1}%", "eic", e.mean_required_iterations, 100.0 * e.feasible_fraction);
            if let Some(dir) = run.out {
                let mut all = sweep.points;
                all.push(sweep.eic);
                write_outputs(&dir, &all)?;
                println!("wrote {}", dir.display());
            }
        }
        BenchCmd::Timing { problem, grid, sizes, repeats, json } => {
            let samples = timing_probe(problem, grid, &sizes, repeats)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&samples)?);
            } else {
                for s in samples {
                    println!(
                        "{problem}: {} points, {} candidates: median {:.1} ms over {} runs",
                        s.dataset_size,
                        s.candidates,
                        s.median_ms,
                        s.samples_ms.len()
                    );
                }
            }
        }
    }
    Ok(())
}

fn export_problems(problem: Option<ProblemName>, grid: usize, out: Option<PathBuf>) -> Result<()> {
    let names = problem.map_or_else(|| ProblemName::ALL.to_vec(), |p| vec![p]);
    let mut docs = Vec::new();
    for name in names {
        let p = BenchmarkProblem::new(name);
        let set = make_grid(&p.bounds, grid)?;
        let oracle = find_grid_optimum(&p, &set)?;
        let feasible = set.points().iter().filter(|x| p.is_feasible(x)).count();
        let mut doc = p.to_json();
        doc["grid"] = serde_json::json!({
            "count": set.len(),
            "feasible_fraction": feasible as f64 / set.len() as f64,
            "optimum": oracle,
        });
        docs.push(doc);
    }
    let text = serde_json::to_string_pretty(&docs)?;
    match out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn campaign(cmd: CampaignCmd) -> Result<()> {
    match cmd {
        CampaignCmd::Init { session, config, force } => {
            if session.exists() && !force {
                bail!("{} already exists; pass --force to overwrite it", session.display());
            }
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: CampaignConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let dataset = cfg.initial_dataset(config.parent())?;
            let state = SessionState::init(cfg, dataset)?;
            save_session(&session, &state)?;
            println!("{}", state.status());
        }
        CampaignCmd::Example { kind, seed, out } => {
            let cfg = match kind {
                Synthetic::Aps => {
                    let d = aps_initial_dataset(seed)?;
                    aps_config(Some(InitData { inputs: d.inputs().to_vec(), measurements: rows(&d) }))
                }
                Synthetic::Fdm => fdm_config(None),
            };
            fs::write(&out, serde_json::to_string_pretty(&cfg)?)?;
            println!("wrote {}", out.display());
        }
        CampaignCmd::Calibrate { session, baseline, measured, constraints, allow_outside } => {
            let offset = with_session(&session, |s| s.calibrate(&baseline, measured, constraints, allow_outside).cloned())?;
            println!(
                "offset {} (measured {}, model {})",
                offset.delta, offset.baseline_measured, offset.predicted
            );
        }
        CampaignCmd::Suggest { session, n, pi, json } => {
            let batch = with_session(&session, |s| s.suggest(n, pi).cloned())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&batch)?);
            } else {
                print_batch(&batch);
            }
        }
        CampaignCmd::Record { session, rows, csv, status, json } => {
            let measurements = match csv {
                Some(path) => read_measurements(&path)?,
                None => parse_rows(&rows)?,
            };
            if measurements.is_empty() {
                bail!("no measurements given; use --row or --csv");
            }
            let outcome = with_session(&session, |s| s.record(measurements, status))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&outcome)?);
            } else {
                println!("{} feasible in this batch", outcome.feasible_in_batch);
                match &outcome.incumbent {
                    Some(i) => println!("incumbent: cost {} at {:?}", i.cost, i.input),
                    None => println!("incumbent: none"),
                }
                if outcome.termination_recommended {
                    println!("termination recommended: most of this batch had little chance of improving");
                }
            }
        }
        CampaignCmd::Abandon { session, reason } => {
            with_session(&session, |s| s.abandon(reason))?;
            println!("pending batch discarded");
        }
        CampaignCmd::Status { session, json } => {
            let status = load_session(&session)?.status();
            if json {
                println!("{}", serde_json::to_string_pretty(&status)?);
            } else {
                println!("{status}");
            }
        }
        CampaignCmd::Simulate { kind, seed, max_batches, runs, switch_after, extra, pi_before, pi_after, json } => {
            match kind {
                Synthetic::Aps => {
                    let report = simulate_aps(seed, max_batches)?;
                    if json {
                        println!("{}", serde_json::to_string_pretty(&report)?);
                        return Ok(());
                    }
                    for s in &report.sessions {
                        println!(
                            "session {}: drift {:+.2}, offset {:+.3}, {}/{} feasible, incumbent {}, FIP {:?}",
                            s.session + 1,
                            s.drift,
                            s.offset,
                            s.feasible,
                            s.candidates.len(),
                            s.incumbent.map_or("none".into(), |c| format!("{c:.2}")),
                            s.selection_fips
                        );
                    }
                    println!(
                        "{} after {} batches, {} feasible samples",
                        if report.terminated { "terminated" } else { "stopped" },
                        report.sessions.len(),
                        report.feasible_samples
                    );
                }
                Synthetic::Fdm => {
                    let seeds: Vec<u64> = (seed..seed + runs).collect();
                    let study = fdm_pi_switch_study(&seeds, switch_after, extra, pi_before, pi_after)?;
                    if json {
                        println!("{}", serde_json::to_string_pretty(&study)?);
                        return Ok(());
                    }
                    let count = |f: fn(&fipbo::campaign::FdmRun) -> usize| study.runs.iter().map(f).sum::<usize>();
                    println!(
                        "pi {} kept: mean selection FP {:.3}, {} feasible",
                        pi_before,
                        study.mean_fp_kept,
                        count(|r| r.kept_feasible)
                    );
                    println!(
                        "pi {} after experiment {}: mean selection FP {:.3}, {} feasible",
                        pi_after,
                        switch_after,
                        study.mean_fp_switched,
                        count(|r| r.switched_feasible)
                    );
                }
            }
        }
    }
    Ok(())
}

fn rows(d: &fipbo::gp::Dataset) -> Vec<Vec<f64>> {
    (0..d.len()).map(|i| d.measurement(i)).collect()
}

fn print_batch(batch: &ProposedBatch) {
    let inputs: Vec<String> = batch
        .records
        .iter()
        .map(|r| r.input.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "))
        .collect();
    let w = inputs.iter().map(String::len).max().unwrap_or(0).max(5);
    println!("{:>3}  {:<w$} {:>10} {:>7} {:>7}  branch", "#", "input", "cost", "FP", "FIP");
    for (i, (r, input)) in batch.records.iter().zip(&inputs).enumerate() {
        println!(
            "{:>3}  {:<w$} {:>10.4} {:>7.3} {:>7.3}  {}",
            i + 1,
            input,
            r.cost,
            r.feasibility,
            r.alpha_fip,
            r.branch.label()
        );
    }
    if batch.exhausted {
        println!("candidate set exhausted before the batch was full");
    }
}

fn parse_rows(rows: &[String]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad measurement {v:?} in row {r:?}")))
                .collect()
        })
        .collect()
}

/// Rows of numbers; a first line that does not parse is taken as a header.
fn read_measurements(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => out.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{}: line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}
