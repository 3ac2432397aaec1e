//! Command line front end for the edge-host simulator: run a scenario
//! and collect its artifacts, compare the isolated-inspection layout
//! against inline inspection, or fit a learned detector baseline from a
//! clean run's feature dump.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mecsim::detector;
use mecsim::flowpipe::FeatureVector;
use mecsim::metrics::MetricsReport;
use mecsim::scenario::Scenario;
use mecsim::sim::{Mode, RunArtifacts, Simulation};

#[derive(Parser)]
#[command(name = "mecsim", version, about = "Edge-host attack-response simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one scenario and write events.log and metrics.json.
    Run(RunArgs),
    /// Execute a scenario in both layouts and print a comparison table.
    Compare(CompareArgs),
    /// Fit a learned baseline model from a clean feature dump.
    Train(TrainArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file to execute.
    scenario: PathBuf,
    /// Override the seed declared in the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Inspect inline on the service machine instead of provisioning a
    /// separate inspection machine.
    #[arg(long)]
    baseline: bool,
    /// Output directory. Defaults to <name>-<mode> under $MECSIM_OUT
    /// (or ./runs when unset).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write flows.txt and features.txt.
    #[arg(long)]
    dump_flows: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario file to execute in both layouts.
    scenario: PathBuf,
    /// Override the seed declared in the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the two run directories; defaults like `run`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature dump from a clean run (features.txt of `run --dump-flows`).
    features: PathBuf,
    /// Where to write the model file.
    #[arg(short, long)]
    out: PathBuf,
    /// Flagging threshold in standard deviations.
    #[arg(long, default_value_t = 10.0)]
    z_threshold: f64,
    /// Version stamp; must exceed the model it replaces.
    #[arg(long, default_value_t = 2)]
    version: u32,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Train(args) => train(args),
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut scenario = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn out_dir(requested: Option<PathBuf>, name: &str, mode: Mode) -> PathBuf {
    requested.unwrap_or_else(|| {
        let base = std::env::var_os("MECSIM_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        base.join(format!("{name}-{}", mode.as_str()))
    })
}

fn write_artifacts(dir: &Path, art: &RunArtifacts, dump_flows: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("events.log"), &art.log_text)?;
    fs::write(dir.join("metrics.json"), art.metrics.to_json())?;
    if dump_flows {
        fs::write(dir.join("flows.txt"), &art.flows_text)?;
        fs::write(dir.join("features.txt"), &art.features_text)?;
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario, args.seed)?;
    let mode = if args.baseline { Mode::Baseline } else { Mode::Proposed };
    let name = scenario.name.clone();
    let seed = scenario.seed;
    let art = Simulation::run(scenario, mode)?;
    let dir = out_dir(args.out, &name, mode);
    write_artifacts(&dir, &art, args.dump_flows)?;

    println!("scenario  {name} (seed {seed}, {})", mode.as_str());
    println!(
        "events    {} processed over {:.3} s",
        art.summary.events_processed,
        art.summary.end_clock.as_secs_f64()
    );
    println!("digest    {}", art.digest);
    print_metrics(&art.metrics);
    println!("artifacts {}", dir.display());
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    match m.legit.availability {
        Some(a) => println!(
            "service   availability {:.6} ({} of {} legitimate packets)",
            a, m.legit.served_packets, m.legit.total_packets
        ),
        None => println!("service   no legitimate traffic"),
    }
    if let Some(lat) = m.detection.detection_latency_s {
        println!("detection latency {lat:.3} s, {} device(s) flagged", m.detection.flagged_devices);
    }
    for (vm, v) in &m.vms {
        if v.crashes > 0 {
            println!(
                "machine   {vm}: {} crash(es), {} restore(s), {:.3} s down",
                v.crashes, v.restores, v.outage_s
            );
        }
    }
    if m.runs.started > 0 {
        println!(
            "runs      {} started, {} completed, {} failed",
            m.runs.started, m.runs.completed, m.runs.failed
        );
    }
}

fn compare(args: CompareArgs) -> Result<()> {
    let proposed_sc = load_scenario(&args.scenario, args.seed)?;
    let baseline_sc = proposed_sc.clone();
    let name = proposed_sc.name.clone();
    let seed = proposed_sc.seed;

    // The two runs are independent; give each its own thread.
    let (proposed, baseline) = std::thread::scope(|s| {
        let p = s.spawn(|| Simulation::run(proposed_sc, Mode::Proposed));
        let b = s.spawn(|| Simulation::run(baseline_sc, Mode::Baseline));
        (p.join().expect("run thread"), b.join().expect("run thread"))
    });
    let proposed = proposed?;
    let baseline = baseline?;

    for (mode, art) in [(Mode::Proposed, &proposed), (Mode::Baseline, &baseline)] {
        // Unlike `run`, --out names the parent here: the two runs get
        // sibling directories under it.
        let dir = match &args.out {
            Some(base) => base.join(format!("{name}-{}", mode.as_str())),
            None => out_dir(None, &name, mode),
        };
        write_artifacts(&dir, art, false)?;
    }

    let fmt_avail = |m: &MetricsReport| match m.legit.availability {
        Some(a) => format!("{a:.6}"),
        None => "n/a".to_string(),
    };
    let vm1_crashes = |m: &MetricsReport| m.vms.get("VM1").map_or(0, |v| v.crashes);
    let vm1_outage = |m: &MetricsReport| m.vms.get("VM1").map_or(0.0, |v| v.outage_s);
    let inspection_crashes = |m: &MetricsReport| -> u64 {
        m.vms
            .iter()
            .filter(|(name, _)| name.starts_with("VM4"))
            .map(|(_, v)| v.crashes)
            .sum()
    };

    println!("scenario {name} (seed {seed})");
    println!("{:<28} {:>14} {:>14}", "metric", "isolated", "inline");
    let rows: [(&str, String, String); 6] = [
        ("legit availability", fmt_avail(&proposed.metrics), fmt_avail(&baseline.metrics)),
        (
            "legit packets lost",
            (proposed.metrics.legit.loss_packets + proposed.metrics.legit.degraded_packets)
                .to_string(),
            (baseline.metrics.legit.loss_packets + baseline.metrics.legit.degraded_packets)
                .to_string(),
        ),
        (
            "service machine crashes",
            vm1_crashes(&proposed.metrics).to_string(),
            vm1_crashes(&baseline.metrics).to_string(),
        ),
        (
            "service machine downtime",
            format!("{:.3} s", vm1_outage(&proposed.metrics)),
            format!("{:.3} s", vm1_outage(&baseline.metrics)),
        ),
        (
            "inspection machine crashes",
            inspection_crashes(&proposed.metrics).to_string(),
            inspection_crashes(&baseline.metrics).to_string(),
        ),
        (
            "management runs completed",
            proposed.metrics.runs.completed.to_string(),
            baseline.metrics.runs.completed.to_string(),
        ),
    ];
    for (label, left, right) in rows {
        println!("{label:<28} {left:>14} {right:>14}");
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.features)
        .with_context(|| format!("reading {}", args.features.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = FeatureVector::parse_numeric(line)
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", args.features.display(), i + 1))?;
        rows.push(row);
    }
    let model = detector::train_baseline(&rows, args.z_threshold, args.version)?;
    fs::write(&args.out, detector::render_model(&model))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "trained version {} from {} windows, z threshold {}",
        args.version,
        rows.len(),
        args.z_threshold
    );
    println!("model     {}", args.out.display());
    Ok(())
}
