//! `edgemig`: plan, simulate and sweep stateful microservice migrations.
//!
//! Every subcommand reads one JSON scenario file. Exit codes: 0 success,
//! 1 the request cannot be satisfied (domain error), 2 bad usage or an
//! invalid scenario, 3 an input or output file could not be read or written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use edgemig_core::orchestrator::{strategy_distribution, Designer};
use edgemig_core::profiler::{estimate_dirty_rate, fit_params, CalibrationRun};
use edgemig_core::scenario::ScenarioFile;
use edgemig_core::simnet::run_scenario;
use edgemig_core::sweep::{classify, emit_report, evaluate_point, write_csv, SweepRow, SweepSpec};
use edgemig_core::units::{bytes_per_sec_to_mbps, format_sig};
use edgemig_core::{Error, StrategyKind};

#[derive(Parser)]
#[command(name = "edgemig", version, about = "Plan, simulate and sweep stateful microservice migrations between edge hosts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate normalized dirty rates from the scenario's dirty-page samples
    Profile(Common),
    /// Fit model parameters to the scenario's calibration runs
    Fit(Common),
    /// Design the migration for the scenario's task
    Plan(Common),
    /// Design the migration and run it in the simulator
    Simulate(Common),
    /// Design and simulate every target of the scenario's sweep
    Sweep(Common),
    /// Strategy probabilities under uncertain bandwidth across the sweep targets
    Dist(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file
    #[arg(long)]
    scenario: PathBuf,
    /// Directory for output files
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples per target (dist)
    #[arg(long, default_value_t = 10_000)]
    samples: u64,
    /// Worker threads for sweep and dist; 0 picks one per core
    #[arg(long, default_value_t = 0)]
    parallel: usize,
}

impl Common {
    fn load(&self) -> Result<ScenarioFile, Error> {
        let mut file = ScenarioFile::load(&self.scenario)?;
        if let Some(seed) = self.seed {
            file.seed = seed;
        }
        Ok(file)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, Error> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallel)
            .build()
            .map_err(|e| Error::Io(format!("thread pool: {e}")))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Scenario(_) => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile(c) => profile(c),
        Command::Fit(c) => fit(c),
        Command::Plan(c) => plan(c),
        Command::Simulate(c) => simulate(c),
        Command::Sweep(c) => sweep(c),
        Command::Dist(c) => dist(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edgemig: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn print(text: &str) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn profile(c: &Common) -> Result<(), Error> {
    let file = c.load()?;
    if file.dirty_samples.is_empty() {
        return Err(Error::Scenario("scenario has no dirty_samples".into()));
    }
    let mut csv = String::from("profile,window_s,rate_pages_per_s,mean_rate_pages_per_s,dirty_rate_norm\n");
    for (id, samples) in &file.dirty_samples {
        let p = file.profile(id)?;
        let est = estimate_dirty_rate(samples, p.state_size_bytes, p.page_size_bytes)?;
        csv.push_str(&format!(
            "{id},{},{},{},{}\n",
            format_sig(est.window_s, 6),
            format_sig(est.rate_pages_per_s, 6),
            format_sig(est.mean_rate_pages_per_s, 6),
            format_sig(est.normalized, 6)
        ));
    }
    write_file(&c.out, "profiles.csv", csv.as_bytes())?;
    print(&csv)
}

fn fit(c: &Common) -> Result<(), Error> {
    let file = c.load()?;
    let runs: Vec<CalibrationRun> = file.calibration_runs.iter().map(|r| r.run()).collect();
    let calibration = fit_params(&runs)?;
    let text = serde_json::to_string_pretty(&calibration).expect("calibration serializes") + "\n";
    write_file(&c.out, "model_params.json", text.as_bytes())?;
    print(&text)
}

fn plan(c: &Common) -> Result<(), Error> {
    let file = c.load()?;
    let metrics = file.metrics_for(&file.task.container_id)?;
    let config = Designer::default().design(&file.task, &metrics)?;
    let text = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
    write_file(&c.out, "plan.json", text.as_bytes())?;
    print(&text)
}

fn simulate(c: &Common) -> Result<(), Error> {
    let file = c.load()?;
    let id = file.task.container_id.clone();
    let config = Designer::default().design(&file.task, &file.metrics_for(&id)?)?;
    let outcome = run_scenario(&file.scenario_for(&id)?, &config)?;
    let mut log = Vec::new();
    outcome.write_event_log(&mut log)?;
    write_file(&c.out, "events.jsonl", &log)?;
    let measured = outcome.measured()?;
    let row = SweepRow {
        target_s: file.task.target_s().expect("validated task has a target"),
        profile: id,
        strategy: config.strategy.kind(),
        iterations: config.strategy.iterations(),
        bandwidth_mbps: bytes_per_sec_to_mbps(config.bandwidth),
        pred_downtime_s: config.predicted.downtime_s,
        pred_total_s: config.predicted.total_s,
        sim_downtime_s: measured.downtime_s,
        sim_total_s: measured.total_s,
        bytes_transferred: measured.bytes_transferred,
        target_met: config.target_met,
        region: edgemig_core::sweep::Region::Red,
    };
    let mut csv = Vec::new();
    write_csv(&classify(vec![row]), &mut csv)?;
    write_file(&c.out, "simulate.csv", &csv)?;
    print(std::str::from_utf8(&csv).expect("csv is utf-8"))
}

fn sweep_spec(file: &ScenarioFile) -> Result<SweepSpec, Error> {
    let spec = file.sweep.clone().ok_or_else(|| Error::Scenario("scenario has no sweep section".into()))?;
    spec.validate()?;
    Ok(spec)
}

fn sweep(c: &Common) -> Result<(), Error> {
    let file = c.load()?;
    let spec = sweep_spec(&file)?;
    let designer = Designer::default();
    let rows = c.pool()?.install(|| {
        spec.points()
            .par_iter()
            .map(|(t, p)| evaluate_point(&file, &spec, &designer, *t, p))
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let rows = classify(rows);
    emit_report(&rows, &c.out)?;
    print(&edgemig_core::sweep::summary(&rows))
}

fn dist(c: &Common) -> Result<(), Error> {
    let file = c.load()?;
    let spec = sweep_spec(&file)?;
    let bandwidth = file
        .bandwidth_distribution
        .as_ref()
        .ok_or_else(|| Error::Scenario("scenario has no bandwidth_distribution".into()))?
        .distribution();
    let id = file.task.container_id.clone();
    let metrics = file.metrics_for(&id)?;
    let designer = Designer::default();
    let seed = file.seed;
    let targets = spec.targets();
    // One seed for every target: all targets see the same bandwidth draws.
    let results = c.pool()?.install(|| {
        targets
            .par_iter()
            .map(|t| {
                let task = spec.task(&file.task, &id, *t);
                strategy_distribution(&designer, &task, &metrics, &bandwidth, c.samples, seed)
            })
            .collect::<Result<Vec<_>, Error>>()
    })?;

    let mut probs = String::from("target_s,profile,p_cold,p_precopy,p_iterative_precopy\n");
    let mut pmf = String::from("target_s,profile,iterations,probability\n");
    for (t, d) in targets.iter().zip(&results) {
        let t = format_sig(*t, 6);
        let p = |k| format_sig(d.probability(k), 6);
        probs.push_str(&format!(
            "{t},{id},{},{},{}\n",
            p(StrategyKind::Cold),
            p(StrategyKind::PreCopy),
            p(StrategyKind::IterativePreCopy)
        ));
        for (i, mass) in &d.iteration_pmf {
            pmf.push_str(&format!("{t},{id},{i},{}\n", format_sig(*mass, 6)));
        }
    }
    write_file(&c.out, "strategy_probabilities.csv", probs.as_bytes())?;
    write_file(&c.out, "iteration_pmf.csv", pmf.as_bytes())?;
    print(&probs)
}
