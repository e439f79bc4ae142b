//! `lotus`: single runs, sweeps, threshold searches, abstract-model runs and
//! the seed-coverage formula from the command line.
//!
//! Exit status is 0 on success, 1 for a usage error (bad flag or value) and
//! 2 when a run fails or output cannot be written.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lotus_core::graph::Graph;
use lotus_core::harness::{
    analytic_seed_coverage, emit_csv, emit_model_csv, find_threshold, format_sig6, fraction_range,
    model_trajectory, sweep, Scenario, SweepRow, SweepSpec, ThresholdSpec,
};
use lotus_core::model::{AbstractSystem, AttackSchedule};
use lotus_core::rng::{stream_rng, Stream};
use lotus_core::{run, AttackConfig, AttackKind, ConfigError, ProtocolParams, ReportingConfig, SimConfig};

#[derive(Parser, Debug)]
#[command(name = "lotus", version, about = "Lotus-eater attack simulator for gossip dissemination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation and print its summary row.
    Run(RunArgs),
    /// Sweep attacker fractions for one or more attacks.
    Sweep(SweepArgs),
    /// Search for the attacker fraction at which isolated delivery drops
    /// below the target.
    Threshold(ThresholdArgs),
    /// Run the abstract token-collecting model and print its trajectory.
    Model(ModelArgs),
    /// Probability that a coalition receives a fresh update directly from
    /// the broadcaster.
    Coverage(CoverageArgs),
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    /// Attacker fraction of all nodes.
    #[arg(long, default_value_t = 0.0, value_parser = fraction)]
    attacker_frac: f64,
    /// Fraction of nodes (attackers included) the lotus attacker satiates.
    #[arg(long, default_value_t = 0.70, value_parser = fraction)]
    satiate_frac: f64,
    #[arg(long, default_value_t = 250, value_parser = at_least_two)]
    nodes: usize,
    #[arg(long, default_value_t = 10, value_parser = positive_u32)]
    updates_per_round: u32,
    /// Rounds an update stays live after release.
    #[arg(long, default_value_t = 10, value_parser = positive_u32)]
    lifetime: u32,
    /// Nodes the broadcaster sends each new update to.
    #[arg(long, default_value_t = 12, value_parser = positive)]
    copies_seeded: usize,
    /// Updates taken by the responder of an optimistic push.
    #[arg(long, default_value_t = 2, value_parser = positive)]
    push_size: usize,
    /// Obedient nodes give one extra update in balanced exchanges.
    #[arg(long)]
    obedient_bonus: bool,
    /// Fraction of honest nodes that are obedient; the rest are rational.
    #[arg(long, default_value_t = 0.5, value_parser = fraction)]
    obedient_frac: f64,
    /// Largest number of updates one party may give in one interaction
    /// before obedient receivers report it. Setting either reporting flag
    /// turns reporting on.
    #[arg(long, value_parser = positive)]
    reporting_cap: Option<usize>,
    /// Distinct reporters needed to evict a node.
    #[arg(long, value_parser = positive)]
    reporting_threshold: Option<usize>,
    #[arg(long, default_value_t = 500, value_parser = positive_u32)]
    rounds: u32,
    /// Initial rounds whose updates are left out of the metrics.
    #[arg(long, default_value_t = 20)]
    warmup: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SimArgs {
    fn config(&self, attack: AttackKind) -> SimConfig {
        let defaults = ReportingConfig::default();
        SimConfig {
            params: ProtocolParams {
                num_nodes: self.nodes,
                updates_per_round: self.updates_per_round,
                update_lifetime: self.lifetime,
                copies_seeded: self.copies_seeded,
                push_size: self.push_size,
                obedient_bonus: self.obedient_bonus,
                ..ProtocolParams::default()
            },
            attack: AttackConfig {
                satiate_frac: self.satiate_frac,
                ..AttackConfig::new(attack, self.attacker_frac)
            },
            reporting: ReportingConfig {
                enabled: self.reporting_cap.is_some() || self.reporting_threshold.is_some(),
                service_cap: self.reporting_cap.unwrap_or(defaults.service_cap),
                eviction_threshold: self.reporting_threshold.unwrap_or(defaults.eviction_threshold),
            },
            obedient_frac: self.obedient_frac,
            total_rounds: self.rounds,
            warmup_rounds: self.warmup,
            master_seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value = "none", value_parser = attack_kind)]
    attack: AttackKind,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated attack kinds.
    #[arg(long, default_value = "crash,ideal,trade", value_parser = attack_kind, value_delimiter = ',')]
    attack: Vec<AttackKind>,
    /// Attacker fractions as start:end:step, both ends included.
    #[arg(long, default_value = "0:0.5:0.05")]
    fracs: String,
    /// Runs per fraction.
    #[arg(long, default_value_t = 5, value_parser = positive)]
    seeds: usize,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ThresholdArgs {
    #[arg(long, default_value = "crash", value_parser = attack_kind)]
    attack: AttackKind,
    /// Runs averaged per probe.
    #[arg(long, default_value_t = 5, value_parser = positive)]
    seeds: usize,
    /// Isolated delivery level to fall below.
    #[arg(long, default_value_t = 0.93, value_parser = fraction)]
    target: f64,
    #[arg(long, default_value_t = 0.01, value_parser = resolution)]
    resolution: f64,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// path, cycle or complete (sized by --nodes), "grid RxC", "gnp N P",
    /// or "file PATH" with one "u v" edge per line.
    #[arg(long, default_value = "cycle")]
    graph: String,
    /// Node count for path, cycle and complete graphs.
    #[arg(long, default_value_t = 20, value_parser = at_least_two)]
    nodes: usize,
    /// Token count; token t starts at node floor(t * nodes / tokens).
    #[arg(long, default_value_t = 10, value_parser = positive)]
    tokens: usize,
    /// Partners each unsatiated node contacts per round.
    #[arg(long, default_value_t = 1, value_parser = positive)]
    contact: usize,
    /// Probability that a satiated node still answers a request.
    #[arg(long, default_value_t = 0.0, value_parser = fraction)]
    altruism: f64,
    /// Comma-separated node ids satiated by the attacker every round.
    #[arg(long, value_delimiter = ',')]
    attack_nodes: Vec<usize>,
    #[arg(long, default_value_t = 1000, value_parser = positive_u32)]
    max_rounds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[arg(long, default_value_t = 250, value_parser = positive)]
    nodes: usize,
    /// Coalition size.
    #[arg(long, default_value_t = 10)]
    coalition: usize,
    #[arg(long, default_value_t = 12, value_parser = positive)]
    copies_seeded: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn fraction(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1]"))
    }
}

fn resolution(s: &str) -> Result<f64, String> {
    let x = fraction(s)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err("must be positive".into())
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(_) => Err(format!("{s:?} is not a non-negative integer")),
    }
}

fn positive_u32(s: &str) -> Result<u32, String> {
    match s.parse::<u32>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(_) => Err(format!("{s:?} is not a non-negative integer")),
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    match positive(s)? {
        1 => Err("must be at least 2".into()),
        n => Ok(n),
    }
}

fn attack_kind(s: &str) -> Result<AttackKind, String> {
    AttackKind::from_label(s).ok_or_else(|| format!("{s:?} is not one of none, crash, ideal, trade"))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn parse_graph(spec: &str, nodes: usize, seed: u64) -> Result<Graph, Failure> {
    let usage = |msg: String| Failure::Usage(format!("--graph: {msg}"));
    let spec = spec.trim();
    let (kind, rest) = match spec.split_once([' ', ':']) {
        Some((k, r)) => (k, r.trim()),
        None => (spec, ""),
    };
    let no_args = |g: Graph| {
        if rest.is_empty() {
            Ok(g)
        } else {
            Err(usage(format!("{kind} takes no arguments, size comes from --nodes")))
        }
    };
    match kind {
        "path" => no_args(Graph::path(nodes)),
        "cycle" => no_args(Graph::cycle(nodes)),
        "complete" => no_args(Graph::complete(nodes)),
        "grid" => {
            let dims = rest
                .split_once(['x', 'X'])
                .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
                .filter(|&(r, c)| r > 0 && c > 0)
                .ok_or_else(|| usage(format!("expected \"grid RxC\", got {spec:?}")))?;
            Ok(Graph::grid(dims.0, dims.1))
        }
        "gnp" => {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [n, p] => n.parse::<usize>().ok().zip(p.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some((n, p)) if (0.0..=1.0).contains(&p) => {
                    Ok(Graph::gnp(n, p, &mut stream_rng(seed, Stream::Graph, 0)))
                }
                _ => Err(usage(format!("expected \"gnp N P\" with P in [0, 1], got {spec:?}"))),
            }
        }
        "file" if !rest.is_empty() => {
            let text = std::fs::read_to_string(rest).map_err(|e| Failure::Runtime(format!("{rest}: {e}")))?;
            Ok(Graph::parse_edge_list(&text)?)
        }
        _ => Err(usage(format!(
            "unknown graph {spec:?}; expected path, cycle, complete, \"grid RxC\", \"gnp N P\" or \"file PATH\""
        ))),
    }
}

fn dispatch(command: Command, argv: &str) -> Result<(), Failure> {
    let comment = Some(argv);
    match command {
        Command::Run(args) => {
            let cfg = args.sim.config(args.attack);
            cfg.validate()?;
            let report = run(cfg.clone()).map_err(|e| Failure::Runtime(e.to_string()))?;
            let row = SweepRow::from_report(&cfg, &report);
            let mut out = open_out(&args.out)?;
            emit_csv(&[row], comment, &mut out)?;
            out.flush()?;
        }
        Command::Sweep(args) => {
            let fractions = fraction_range(&args.fracs).map_err(|e| Failure::Usage(format!("--fracs: {e}")))?;
            let base = args.sim.config(AttackKind::NoAttack);
            let spec = SweepSpec {
                base,
                attacks: args.attack,
                fractions,
                seeds: args.seeds,
                scenarios: vec![Scenario::baseline()],
            };
            let outcome = sweep(&spec)?;
            for e in &outcome.errors {
                eprintln!(
                    "warning: {} at attacker fraction {} (seed {}): {}",
                    e.attack.label(),
                    e.attacker_frac,
                    e.seed,
                    e.error
                );
            }
            if outcome.rows.is_empty() {
                return Err(Failure::Usage("no sweep point could run".into()));
            }
            let mut out = open_out(&args.out)?;
            emit_csv(&outcome.rows, comment, &mut out)?;
            out.flush()?;
        }
        Command::Threshold(args) => {
            let mut base = args.sim.config(args.attack);
            base.attack.attacker_frac = 0.0;
            let spec = ThresholdSpec {
                target: args.target,
                seeds: args.seeds,
                resolution: args.resolution,
                coarse_step: args.resolution.max(0.05),
                ..ThresholdSpec::new(base)
            };
            let outcome = find_threshold(&spec)?;
            if let Some(w) = &outcome.warning {
                eprintln!("warning: {w}");
            }
            let mut out = open_out(&args.out)?;
            match outcome.fraction {
                Some(f) => writeln!(out, "{}", format_sig6(f))?,
                None => writeln!(out, "none")?,
            }
            out.flush()?;
        }
        Command::Model(args) => {
            let graph = parse_graph(&args.graph, args.nodes, args.seed)?;
            let n = graph.node_count();
            if let Some(&bad) = args.attack_nodes.iter().find(|&&v| v >= n) {
                return Err(Failure::Usage(format!("--attack-nodes: node {bad} outside 0..{n}")));
            }
            let attack = if args.attack_nodes.is_empty() {
                AttackSchedule::none()
            } else {
                AttackSchedule::permanent(args.attack_nodes.iter().copied().collect::<BTreeSet<_>>())
            };
            let system = AbstractSystem::new(
                graph,
                args.tokens,
                AbstractSystem::spread_allocation(n, args.tokens),
                args.contact,
                args.altruism,
                attack,
            )?;
            let rows = model_trajectory(&system, args.max_rounds, args.seed);
            let mut out = open_out(&args.out)?;
            emit_model_csv(&rows, comment, &mut out)?;
            out.flush()?;
        }
        Command::Coverage(args) => {
            let p = analytic_seed_coverage(args.nodes, args.coalition, args.copies_seeded)?;
            let mut out = open_out(&args.out)?;
            writeln!(out, "{}", format_sig6(p))?;
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // the program path varies between installs, so echo a fixed name
    let argv = std::iter::once("lotus".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ");
    match dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
