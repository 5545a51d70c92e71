use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;
use zonegate_core::{
    compare_policies, generate_horizon, grid_search, mean_arrival_rate, run, ControlAction,
    DemandProcessSpec, ObjectiveWeights, PolicyVariant, Scenario, SearchSpace, METRIC_NAMES,
};
use zonegate_service::{read_log, replay, verify, ServiceConfig};

#[derive(Parser)]
#[command(name = "zonegate", version, about = "Pre-booked access control for a road zone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Demand stream generation.
    #[command(subcommand)]
    Demand(DemandCmd),
    /// Policy simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Policy parameter search.
    #[command(subcommand)]
    Opt(OptCmd),
    /// Run the reservation service.
    Serve {
        #[arg(long, env = "ZONEGATE_CONFIG")]
        config: PathBuf,
        /// Overrides `listen` from the config file.
        #[arg(long, env = "ZONEGATE_LISTEN")]
        listen: Option<String>,
    },
    /// Rebuild the zone state from an event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Re-evaluate every decision and compare against the snapshot.
        #[arg(long)]
        verify: bool,
        /// Defaults to `<log>.snapshot` when that file exists.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Write the rebuilt state as canonical JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DemandCmd {
    /// Write one demand event per line.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Horizon in seconds.
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the control action in the spec.
        #[arg(long)]
        rate_multiplier: Option<f64>,
        #[arg(long)]
        batch_shift: Option<u32>,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulate one scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate policy variants on shared demand streams.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        variants: PathBuf,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OptCmd {
    /// Exhaustive search over slot length, threshold and slack.
    Grid {
        #[arg(long)]
        space: PathBuf,
        /// Defaults to (1, 0.25, 1, 0.5).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        best: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn demand_gen(
    spec_path: &Path,
    horizon: f64,
    seed: u64,
    out: &Path,
    rate_multiplier: Option<f64>,
    batch_shift: Option<u32>,
) -> Result<()> {
    let spec: DemandProcessSpec = read_json(spec_path)?;
    spec.validate()?;
    let action = ControlAction::new(
        rate_multiplier.unwrap_or(spec.control.rate_multiplier),
        batch_shift.unwrap_or(spec.control.batch_shift),
    )?;
    let events = generate_horizon(&spec, &action, horizon, seed)?;
    let mut w = create(out)?;
    let mut requests = 0;
    for e in &events {
        requests += e.requests.len();
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let summary = json!({
        "events": events.len(),
        "requests": requests,
        "horizon_s": horizon,
        "empirical_rate": if horizon > 0.0 { requests as f64 / horizon } else { 0.0 },
        "mean_arrival_rate": mean_arrival_rate(&spec, &action)?,
    });
    println!("{summary}");
    Ok(())
}

fn sim_run(scenario_path: &Path, seed: Option<u64>, metrics: &Path, trace_path: Option<&Path>) -> Result<()> {
    let mut scenario: Scenario = read_json(scenario_path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let (m, trace) = run(&scenario)?;
    let mut w = create(metrics)?;
    serde_json::to_writer_pretty(&mut w, &m)?;
    w.write_all(b"\n")?;
    w.flush()?;
    if let Some(p) = trace_path {
        let mut w = create(p)?;
        w.write_all(trace.to_jsonl().as_bytes())?;
        w.flush()?;
    }
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn sim_compare(scenario_path: &Path, variants_path: &Path, reps: usize, out: &Path) -> Result<()> {
    let scenario: Scenario = read_json(scenario_path)?;
    let variants: Vec<PolicyVariant> = read_json(variants_path)?;
    if variants.is_empty() {
        bail!("{} lists no variants", variants_path.display());
    }
    let table = compare_policies(&scenario, &variants, reps)?;
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["variant".to_string(), "replications".to_string()];
    for name in METRIC_NAMES {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_se"));
    }
    w.write_record(&header)?;
    for row in &table {
        let mut rec = vec![row.name.clone(), row.replications.to_string()];
        for (m, s) in row.mean.iter().zip(&row.se) {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("{}", json!({"variants": table.len(), "replications": reps}));
    Ok(())
}

fn opt_grid(space_path: &Path, weights_path: Option<&Path>, out: &Path, best: &Path) -> Result<()> {
    let space: SearchSpace = read_json(space_path)?;
    let weights: ObjectiveWeights = match weights_path {
        Some(p) => read_json(p)?,
        None => ObjectiveWeights::default(),
    };
    let result = grid_search(&space, &weights)?;
    let mut w = csv::Writer::from_path(out)?;
    let mut header: Vec<String> = ["delta_s", "rho_free", "slack", "mean_objective", "se"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for row in &result.table {
        let c = row.combination;
        let mut rec = vec![
            c.delta_s.to_string(),
            c.rho_free.to_string(),
            c.slack.to_string(),
            row.mean_objective.to_string(),
            row.se.to_string(),
        ];
        rec.extend(row.metric_means.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let chosen = space.scenario_for(&result.best)?;
    let summary = json!({
        "delta_s": result.best.delta_s,
        "rho_free": result.best.rho_free,
        "slack": result.best.slack,
        "rho_hard": chosen.policy.rho_hard,
        "mean_objective": result.best_objective,
        "weights": weights,
        "combinations": result.table.len(),
    });
    let mut f = create(best)?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    f.flush()?;
    println!("{summary}");
    Ok(())
}

fn replay_cmd(log: &Path, check: bool, snapshot: Option<PathBuf>, out: Option<&Path>) -> Result<()> {
    let records = read_log(log)?;
    let state = if check {
        let snap_path = snapshot.unwrap_or_else(|| zonegate_service::config::snapshot_path_for(log));
        let snap = zonegate_service::state::read_snapshot(&snap_path)?;
        let (state, report) = verify(&records, snap.as_ref())?;
        println!("{}", json!({"status": "ok", "report": report}));
        state
    } else {
        let state = replay(&records)?;
        println!(
            "{}",
            json!({"status": "ok", "records": records.len(), "ledger_version": state.ledger.version()})
        );
        state
    };
    if let Some(p) = out {
        std::fs::write(p, state.canonical_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn serve_cmd(config_path: &Path, listen: Option<String>) -> Result<()> {
    let mut config = ServiceConfig::load(config_path)?;
    if let Some(addr) = listen {
        config.listen = addr;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        zonegate_service::serve(&config, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Demand(DemandCmd::Gen {
            spec,
            horizon,
            seed,
            out,
            rate_multiplier,
            batch_shift,
        }) => demand_gen(&spec, horizon, seed, &out, rate_multiplier, batch_shift),
        Command::Sim(SimCmd::Run {
            scenario,
            seed,
            metrics,
            trace,
        }) => sim_run(&scenario, seed, &metrics, trace.as_deref()),
        Command::Sim(SimCmd::Compare {
            scenario,
            variants,
            reps,
            out,
        }) => sim_compare(&scenario, &variants, reps, &out),
        Command::Opt(OptCmd::Grid {
            space,
            weights,
            out,
            best,
        }) => opt_grid(&space, weights.as_deref(), &out, &best),
        Command::Serve { config, listen } => serve_cmd(&config, listen),
        Command::Replay {
            log,
            verify,
            snapshot,
            out,
        } => replay_cmd(&log, verify, snapshot, out.as_deref()),
    }
}
