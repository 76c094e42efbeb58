use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cssasim_core::sim::CommandQueue;
use cssasim_gateway::Gateway;
use cssasim_harness::config::ScenarioName;
use cssasim_harness::{scenario, DriverOptions, MetricsReport, ScenarioConfig};
use tracing::info;

#[derive(Parser)]
#[command(name = "cssasim", version, about = "Run security scenarios and benchmarks on the simulated SDN")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and score it.
    Run(RunArgs),
    /// Run a benchmark.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: ScenarioName,
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    policies: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Scenario parameter, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_kv)]
    params: Vec<(String, String)>,
    #[command(flatten)]
    out: Output,
    /// Serve the operator API on this address while the scenario runs.
    #[arg(long)]
    serve: Option<SocketAddr>,
    /// Isolate alerted hosts without waiting for an operator. Always on when not serving.
    #[arg(long)]
    auto_operator: bool,
    /// Start traffic at once instead of waiting for a start request.
    #[arg(long)]
    autostart: bool,
    /// Simulated seconds per wall-clock second while serving.
    #[arg(long, default_value_t = 1.0)]
    pace: f64,
}

#[derive(Args)]
struct Output {
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the NDJSON event log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Worst-case payload inspection latency against ruleset size.
    Dpi {
        #[arg(long, default_value = "10,50,100")]
        rules: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Packet-in handling rate with and without the security application.
    Throughput {
        #[arg(long, default_value = "100,200,300,400")]
        rules: String,
        #[arg(long, default_value_t = 2000)]
        packet_ins: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// End-to-end transfer delay with and without flow encryption.
    Crypto {
        #[arg(long, default_value = "1k,10k,100k,1m")]
        sizes: String,
        /// Add the curves measured under benign cross traffic.
        #[arg(long)]
        cross_traffic: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match real_main(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Run(args) => run(args),
        Cmd::Bench(b) => {
            let (cfg, out) = match b {
                BenchCmd::Dpi { rules, trials, out } => (
                    ScenarioConfig::new(ScenarioName::DpiBench, 0).param("rule_counts", rules).param("trials", trials),
                    out,
                ),
                BenchCmd::Throughput { rules, packet_ins, repeats, seed, out } => (
                    ScenarioConfig::new(ScenarioName::ThroughputBench, seed)
                        .param("rule_counts", rules)
                        .param("packet_ins", packet_ins)
                        .param("repeats", repeats),
                    out,
                ),
                BenchCmd::Crypto { sizes, cross_traffic, seed, out } => (
                    ScenarioConfig::new(ScenarioName::LegacyEncrypt, seed)
                        .param("sizes", sizes)
                        .param("cross_traffic", cross_traffic),
                    out,
                ),
            };
            let outcome = scenario::run(&cfg, DriverOptions::default())?;
            finish(&outcome, &out)
        }
    }
}

fn run(args: RunArgs) -> Result<bool> {
    if !(args.pace.is_finite() && args.pace > 0.0) {
        bail!("--pace must be positive");
    }
    let cfg = ScenarioConfig {
        name: args.scenario,
        topology_file: args.topology,
        policy_file: args.policies,
        params: args.params.into_iter().collect::<BTreeMap<_, _>>(),
        seed: args.seed,
        duration_s: args.duration,
        auto_operator: args.auto_operator || args.serve.is_none(),
    };
    let Some(addr) = args.serve else {
        let outcome = scenario::run(&cfg, DriverOptions { auto_operator: cfg.auto_operator, ..DriverOptions::default() })?;
        return finish(&outcome, &args.out);
    };

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    let names = ScenarioName::ALL.iter().map(|n| n.to_string()).collect();
    let gw = Gateway::new(CommandQueue::new(), names);
    let running = rt.block_on(cssasim_gateway::serve(gw.clone(), addr))?;
    info!(addr = %running.local_addr(), "gateway listening");
    if !args.autostart {
        info!("waiting for POST /api/scenario/{}/start", cfg.name);
    }
    let opts = DriverOptions {
        auto_operator: cfg.auto_operator,
        gateway: Some(gw),
        wait_for_start: (!args.autostart).then(|| cfg.name.to_string()),
        pace: Some(args.pace),
    };
    let result = scenario::run(&cfg, opts);
    rt.block_on(running.shutdown()).context("stopping gateway")?;
    finish(&result?, &args.out)
}

fn finish(outcome: &scenario::Outcome, out: &Output) -> Result<bool> {
    let report: &MetricsReport = &outcome.report;
    if let Some(p) = &out.report {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &out.log {
        std::fs::write(p, &outcome.log).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}: seed {} config {}", report.scenario, report.environment.seed, &report.environment.config_hash[..12]);
    for c in &report.checks {
        println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.passed())
}
