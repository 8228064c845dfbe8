//! The `bwbroker` command line: `run`, `alloc`, `bound` and `bench`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bwbroker::allocator::{compute_runtime_policy, water_fill, DemandVector, LeafRuntime};
use bwbroker::latency::{fct_bound, mm1_fct_quantile, sigma_from_convergence, ArrivalEnvelope, Mm1Model};
use bwbroker::policy::{PolicyTree, ServiceId};
use bwbroker::units::{self, format_rate, Bps, Limit, GBPS};

use crate::scenario::Scenario;
use crate::sim::Simulator;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bwbroker", version, about = "Hierarchical bandwidth brokers: simulator and calculators")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario file and write CSV traces plus summary.json.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: bwbroker-out/<scenario name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write util.gp, a gnuplot script for util.csv.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Allocate a policy tree against leaf demands and print the table.
    Alloc {
        policy: PathBuf,
        /// JSON object of leaf id to demand ("4G", bits/s number, or "unlimited"); absent leaves are idle.
        demands: Option<PathBuf>,
        /// Also time N single-level water-fills over random demands.
        #[arg(long)]
        bench: Option<usize>,
    },
    /// Worst-case flow completion time for a (sigma, rho) envelope.
    Bound(BoundArgs),
    /// Water-fill wall-clock time across problem sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
}

#[derive(Debug, Clone, Args)]
pub struct BoundArgs {
    /// Link capacity.
    #[arg(long, default_value = "10G", value_parser = units::parse_rate)]
    pub capacity: Bps,
    /// Load fractions; comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.15,0.5,0.7,0.8")]
    pub rho: Vec<f64>,
    /// Burst allowance as a size (bytes, or with a unit suffix).
    #[arg(long, value_parser = units::parse_size, conflicts_with = "conv_iters")]
    pub sigma: Option<u64>,
    /// Derive sigma from rate-control convergence: iterations × interval at line rate.
    #[arg(long)]
    pub conv_iters: Option<u32>,
    #[arg(long, default_value = "500us", value_parser = units::parse_duration)]
    pub interval: u64,
    /// Limiter burst; sigma is never below it.
    #[arg(long, default_value = "0", value_parser = units::parse_size)]
    pub burst: u64,
    /// Flow sizes; comma separated.
    #[arg(long, value_delimiter = ',', default_value = "200kB", value_parser = units::parse_size)]
    pub size: Vec<u64>,
    /// Print the M/M/1 completion-time quantile instead, for this probability.
    #[arg(long)]
    pub quantile: Option<f64>,
    /// M/M/1 service rate in flows per second.
    #[arg(long, default_value_t = 1250.0)]
    pub mu: f64,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let mut out = std::io::stdout().lock();
    match cli.cmd {
        Command::Run { file, seed, out: dir, gnuplot } => cmd_run(&file, seed, dir.as_deref(), gnuplot, &mut out),
        Command::Alloc { policy, demands, bench } => cmd_alloc(&policy, demands.as_deref(), bench, &mut out),
        Command::Bound(a) => cmd_bound(&a, &mut out),
        Command::Bench { sizes, reps } => cmd_bench(&sizes, reps, &mut out),
    }
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("bwbroker: {msg}");
    EXIT_INPUT
}

pub fn cmd_run(file: &Path, seed: Option<u64>, out: Option<&Path>, gnuplot: bool, w: &mut impl Write) -> i32 {
    let mut scn = match Scenario::load(file) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Some(s) = seed {
        scn.seed = s;
    }
    let name = scn.name.clone().unwrap_or_else(|| {
        file.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned())
    });
    let dir = out.map_or_else(|| PathBuf::from("bwbroker-out").join(&name), Path::to_path_buf);
    let assertions = scn.assertions.clone();
    let seed = scn.seed;
    let sim = match Simulator::new(scn) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let started = Instant::now();
    let trace = sim.run();
    let summary = trace.summary(Some(&name), seed, &assertions);
    if let Err(e) = trace.write_csvs(&dir).and_then(|_| trace.write_summary(&dir, &summary)) {
        return fail(format!("cannot write {}: {e}", dir.display()));
    }
    if gnuplot {
        let script = gnuplot_script(&trace.services);
        if let Err(e) = std::fs::write(dir.join("util.gp"), &script) {
            return fail(format!("cannot write util.gp: {e}"));
        }
    }
    let _ = writeln!(
        w,
        "{name}: seed {seed}, {:.1}s simulated, {} events in {:.1?}",
        summary.horizon_s,
        summary.events_processed,
        started.elapsed()
    );
    let _ = writeln!(w, "{:>8} {:>8} {:>9} {:>11} {:>11} {:>14}", "service", "flows", "completed", "mean_fct", "p99_fct", "fabric_bps");
    for (s, v) in &summary.services {
        let ms = |x: Option<f64>| x.map_or("-".into(), |x| format!("{:.3}ms", x * 1e3));
        let _ = writeln!(
            w,
            "{:>8} {:>8} {:>9} {:>11} {:>11} {:>14}",
            s,
            v.flows,
            v.completed,
            ms(v.mean_fct_s),
            ms(v.p99_fct_censored_s),
            format_rate(v.mean_fabric_bits_per_s as Bps)
        );
    }
    for c in &summary.convergence {
        let after = c.converged_after_s.map_or("never".into(), |x| format!("after {x:.0}s"));
        let _ = writeln!(w, "cap {} at {:.0}s for service {}: converged {after}", format_rate(c.cap_bits_per_s), c.at_s, c.service);
    }
    for a in &summary.assertions {
        let v = a.value.map_or("n/a".into(), |v| format!("{v:.6}"));
        let _ = writeln!(w, "{} {}: {v} (min {:?}, max {:?})", if a.pass { "PASS" } else { "FAIL" }, a.label, a.min, a.max);
    }
    let _ = writeln!(w, "traces in {}", dir.display());
    if summary.passed {
        EXIT_OK
    } else {
        EXIT_ASSERTION
    }
}

pub fn gnuplot_script(services: &[ServiceId]) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'time (s)'\nset ylabel 'Gb/s'\n",
    );
    let plots: Vec<String> = services
        .iter()
        .map(|id| {
            format!("'util.csv' using 1:(stringcolumn(2) eq 'fabric' && $3 == {id} ? $4/1e9 : 1/0) with lines title 'service {id}'")
        })
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}

#[derive(Debug, thiserror::Error)]
pub enum DemandError {
    #[error("demands must be a JSON object of leaf id to rate: {0}")]
    Parse(String),
    #[error("leaf {0} is not in the policy")]
    UnknownLeaf(ServiceId),
}

/// Parses `{"11": "4G", "12": 1e9, "21": "unlimited"}`.
pub fn parse_demands(text: &str, tree: &PolicyTree) -> Result<DemandVector, DemandError> {
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| DemandError::Parse(e.to_string()))?;
    let leaves = tree.leaf_ids();
    let mut out: DemandVector = leaves.iter().map(|&l| (l, 0)).collect();
    for (k, v) in raw {
        let id: ServiceId = k.parse().map_err(|_| DemandError::Parse(format!("bad leaf id {k}")))?;
        if !leaves.contains(&id) {
            return Err(DemandError::UnknownLeaf(id));
        }
        let rate = match &v {
            serde_json::Value::String(s) if matches!(s.as_str(), "unlimited" | "inf") => Bps::MAX / 4,
            serde_json::Value::String(s) => units::parse_rate(s).map_err(|e| DemandError::Parse(e.to_string()))?,
            serde_json::Value::Number(n) => n.as_f64().filter(|x| *x >= 0.0).map(|x| x as Bps).ok_or_else(|| DemandError::Parse(format!("bad demand {n}")))?,
            other => return Err(DemandError::Parse(format!("bad demand {other}"))),
        };
        out.insert(id, rate);
    }
    Ok(out)
}

pub fn cmd_alloc(policy: &Path, demands: Option<&Path>, bench: Option<usize>, w: &mut impl Write) -> i32 {
    let tree = match std::fs::read_to_string(policy) {
        Ok(t) => match PolicyTree::from_json(&t) {
            Ok(t) => t,
            Err(e) => return fail(e),
        },
        Err(e) => return fail(format!("cannot read {}: {e}", policy.display())),
    };
    let d = match demands {
        None => tree.leaf_ids().into_iter().map(|l| (l, 0)).collect(),
        Some(p) => match std::fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| parse_demands(&t, &tree).map_err(|e| e.to_string())) {
            Ok(d) => d,
            Err(e) => return fail(e),
        },
    };
    let rp = match compute_runtime_policy(&tree, &d) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let _ = write_alloc_table(&rp.leaves, w);
    if let Some(n) = bench {
        let per = bench_water_fill(n, 5, 1);
        let _ = writeln!(w, "water_fill N={n}: {:.3}ms per invocation", per.as_secs_f64() * 1e3);
    }
    EXIT_OK
}

fn write_alloc_table(leaves: &BTreeMap<ServiceId, LeafRuntime>, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{:>8} {:>12} {:>12} {:>12} {:>8}", "leaf", "demand", "allocation", "enforced", "limited")?;
    for (id, l) in leaves {
        let demand = if l.demand >= Bps::MAX / 8 { "unlimited".into() } else { format_rate(l.demand) };
        writeln!(
            w,
            "{:>8} {:>12} {:>12} {:>12} {:>8}",
            id,
            demand,
            format_rate(l.allocation),
            format_rate(l.capacity),
            if l.limited { "yes" } else { "no" }
        )?;
    }
    Ok(())
}

/// Mean wall-clock time of one flat water-fill over `n` random demands.
pub fn bench_water_fill(n: usize, reps: usize, seed: u64) -> Duration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demands: Vec<Bps> = (0..n).map(|_| rng.gen_range(0..10 * GBPS)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
    let mins = vec![0; n];
    let maxes = vec![Limit::Unlimited; n];
    let capacity = (n as Bps).saturating_mul(GBPS);
    let reps = reps.max(1);
    let start = Instant::now();
    for _ in 0..reps {
        let out = water_fill(&demands, &weights, &mins, &maxes, capacity).expect("well-formed input");
        std::hint::black_box(out);
    }
    start.elapsed() / reps as u32
}

pub fn cmd_bench(sizes: &[usize], reps: usize, w: &mut impl Write) -> i32 {
    let _ = writeln!(w, "{:>8} {:>12} {:>14}", "N", "ms/call", "ns/service");
    for &n in sizes {
        let t = bench_water_fill(n, reps, n as u64);
        let _ = writeln!(w, "{:>8} {:>12.3} {:>14.1}", n, t.as_secs_f64() * 1e3, t.as_nanos() as f64 / n.max(1) as f64);
    }
    EXIT_OK
}

/// Bound in seconds for each (rho, size) pair, rows by size.
pub fn bound_table(a: &BoundArgs) -> Result<Vec<(u64, Vec<(f64, f64)>)>, String> {
    let sigma = match (a.sigma, a.conv_iters) {
        (Some(s), _) => (s * 8) as f64,
        (None, Some(k)) => sigma_from_convergence(a.capacity, k, units::secs(a.interval), (a.burst * 8) as f64),
        (None, None) => return Err("give --sigma or --conv-iters".into()),
    };
    a.size
        .iter()
        .map(|&z| {
            let row = a
                .rho
                .iter()
                .map(|&rho| {
                    let env = ArrivalEnvelope::new(sigma, rho, a.capacity).map_err(|e| format!("rho {rho}: {e}"))?;
                    fct_bound(&env, (z * 8) as f64).map(|b| (rho, b)).map_err(|e| e.to_string())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((z, row))
        })
        .collect()
}

pub fn cmd_bound(a: &BoundArgs, w: &mut impl Write) -> i32 {
    if let Some(p) = a.quantile {
        for &rho in &a.rho {
            match mm1_fct_quantile(&Mm1Model { mu: a.mu, rho }, p) {
                Ok(t) => {
                    let _ = writeln!(w, "M/M/1 mu={}/s rho={rho}: p{} FCT = {:.3}ms", a.mu, p * 100.0, t * 1e3);
                }
                Err(e) => return fail(e),
            }
        }
        return EXIT_OK;
    }
    for &rho in &a.rho {
        if rho >= 0.95 && rho < 1.0 {
            eprintln!("warning: rho {rho} is close to 1; the bound grows as 1/(1-rho) and diverges at 1");
        }
    }
    let rows = match bound_table(a) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let _ = write!(w, "{:>10}", "size");
    for &rho in &a.rho {
        let _ = write!(w, " {:>10}", format!("rho={rho}"));
    }
    let _ = writeln!(w);
    for (z, row) in rows {
        let _ = write!(w, "{:>10}", format!("{z}B"));
        for (_, b) in row {
            let _ = write!(w, " {:>10}", format!("{:.2}ms", b * 1e3));
        }
        let _ = writeln!(w);
    }
    EXIT_OK
}
