//! Attacker-fraction sweeps, usability-threshold search, the seed-coverage
//! closed form, and CSV output.
//!
//! # Reproducing the attack curves
//!
//! Sweep rows carry everything needed to plot delivery against attacker
//! fraction: group rows by `(attack, push_size, obedient_bonus)`, average
//! `isolated_mean_delivery` over `seed` for each `attacker_frac`, and draw a
//! horizontal line at the usability threshold (0.93).
//!
//! * all three attacks with the default parameters give the baseline curves;
//! * `push_size = 10` gives the larger-push defense;
//! * `obedient_bonus = true` with every honest node obedient, alone and with
//!   `push_size = 4`, gives the obedient-node defense (trade attack).

use std::io::Write;

use rayon::prelude::*;

use crate::adversary::AttackKind;
use crate::engine::{run, seed_round, SimConfig, SimReport};
use crate::error::ConfigError;
use crate::gossip::{NodeId, ProtocolParams, Round};
use crate::model::{model_step, AbstractSystem, ModelRng, ModelState};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Overrides applied on top of the base configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub label: String,
    pub push_size: Option<usize>,
    pub obedient_bonus: Option<bool>,
    pub obedient_frac: Option<f64>,
}

impl Scenario {
    pub fn baseline() -> Self {
        Self {
            label: "baseline".into(),
            ..Self::default()
        }
    }

    pub fn apply(&self, base: &SimConfig) -> SimConfig {
        let mut cfg = base.clone();
        if let Some(p) = self.push_size {
            cfg.params.push_size = p;
        }
        if let Some(b) = self.obedient_bonus {
            cfg.params.obedient_bonus = b;
        }
        if let Some(f) = self.obedient_frac {
            cfg.obedient_frac = f;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: SimConfig,
    pub attacks: Vec<AttackKind>,
    pub fractions: Vec<f64>,
    pub seeds: usize,
    pub scenarios: Vec<Scenario>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fractions.is_empty() {
            return Err(ConfigError::Sweep("no attacker fractions".into()));
        }
        if self.seeds == 0 {
            return Err(ConfigError::Sweep("seeds must be at least 1".into()));
        }
        if self.attacks.is_empty() {
            return Err(ConfigError::Sweep("no attack kinds".into()));
        }
        if self.scenarios.is_empty() {
            return Err(ConfigError::Sweep("no scenarios".into()));
        }
        Ok(())
    }
}

/// Parses `a:b:step` into the inclusive grid `a, a+step, ..., b`.
pub fn fraction_range(spec: &str) -> Result<Vec<f64>, ConfigError> {
    let bad = || ConfigError::Sweep(format!("expected a:b:step, got {spec:?}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [a, b, step] = parts[..] else {
        return Err(bad());
    };
    if step.is_nan() || step <= 0.0 || b < a {
        return Err(bad());
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| snap(a + i as f64 * step)).collect())
}

/// Drops accumulated binary noise so grid points compare and print cleanly.
fn snap(x: f64) -> f64 {
    format!("{x:.9}").parse().expect("formatted float parses")
}

/// Simulation seed for the `index`-th repetition. The same index gives the
/// same seed at every fraction, so curves compare like with like.
pub fn run_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, Stream::Sweep, index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub attack: AttackKind,
    pub attacker_frac: f64,
    pub push_size: usize,
    pub obedient_bonus: bool,
    pub seed: u64,
    pub isolated_mean_delivery: Option<f64>,
    pub isolated_usable_frac: Option<f64>,
    pub satiated_mean_delivery: Option<f64>,
    pub attacker_upload_per_round: f64,
    pub junk_units: u64,
    pub evictions: usize,
}

impl SweepRow {
    pub const HEADER: [&'static str; 11] = [
        "attack",
        "attacker_frac",
        "push_size",
        "obedient_bonus",
        "seed",
        "isolated_mean_delivery",
        "isolated_usable_frac",
        "satiated_mean_delivery",
        "attacker_upload_per_round",
        "junk_units",
        "evictions",
    ];

    pub fn from_report(config: &SimConfig, report: &SimReport) -> Self {
        let groups = [&report.isolated, &report.satiated, &report.attacker];
        Self {
            attack: config.attack.kind,
            attacker_frac: config.attack.attacker_frac,
            push_size: config.params.push_size,
            obedient_bonus: config.params.obedient_bonus,
            seed: config.master_seed,
            isolated_mean_delivery: report.isolated.mean_delivery,
            isolated_usable_frac: report.isolated.usable_frac,
            satiated_mean_delivery: report.satiated.mean_delivery,
            attacker_upload_per_round: report.attacker.upload_per_node_round,
            junk_units: groups.iter().map(|g| g.junk_units).sum(),
            evictions: groups.iter().map(|g| g.evictions).sum(),
        }
    }

    fn record(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(format_sig6).unwrap_or_default();
        vec![
            self.attack.label().to_string(),
            format_sig6(self.attacker_frac),
            self.push_size.to_string(),
            self.obedient_bonus.to_string(),
            self.seed.to_string(),
            opt(self.isolated_mean_delivery),
            opt(self.isolated_usable_frac),
            opt(self.satiated_mean_delivery),
            format_sig6(self.attacker_upload_per_round),
            self.junk_units.to_string(),
            self.evictions.to_string(),
        ]
    }
}

/// A sweep point that could not run.
#[derive(Debug, Clone, PartialEq)]
pub struct PointError {
    pub scenario: String,
    pub attack: AttackKind,
    pub attacker_frac: f64,
    pub seed: u64,
    pub error: ConfigError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub errors: Vec<PointError>,
}

/// Runs every scenario × attack × fraction × seed. Rows come back in that
/// nesting order whatever order the runs finish in; failing points are
/// collected in `errors` and the rest of the sweep continues.
pub fn sweep(spec: &SweepSpec) -> Result<SweepOutcome, ConfigError> {
    spec.validate()?;
    let mut points = Vec::new();
    for scenario in &spec.scenarios {
        for &attack in &spec.attacks {
            for &frac in &spec.fractions {
                for index in 0..spec.seeds {
                    let mut cfg = scenario.apply(&spec.base);
                    cfg.attack.kind = attack;
                    cfg.attack.attacker_frac = frac;
                    cfg.master_seed = run_seed(spec.base.master_seed, index);
                    points.push((scenario.label.clone(), cfg));
                }
            }
        }
    }
    let results: Vec<_> = points
        .into_par_iter()
        .map(|(label, cfg)| match run(cfg.clone()) {
            Ok(report) => Ok(SweepRow::from_report(&cfg, &report)),
            Err(error) => Err(PointError {
                scenario: label,
                attack: cfg.attack.kind,
                attacker_frac: cfg.attack.attacker_frac,
                seed: cfg.master_seed,
                error,
            }),
        })
        .collect();
    let mut outcome = SweepOutcome::default();
    for r in results {
        match r {
            Ok(row) => outcome.rows.push(row),
            Err(e) => outcome.errors.push(e),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSpec {
    /// Attack kind, protocol parameters and master seed come from here.
    pub base: SimConfig,
    /// Delivery level the isolated group must fall below.
    pub target: f64,
    pub seeds: usize,
    pub resolution: f64,
    /// Spacing of the coarse pre-scan.
    pub coarse_step: f64,
    /// Largest attacker fraction searched.
    pub max_frac: f64,
    /// Largest rise between neighboring pre-scan points still treated as
    /// monotone.
    pub noise_allowance: f64,
}

impl ThresholdSpec {
    pub fn new(base: SimConfig) -> Self {
        let target = base.params.usable_threshold;
        Self {
            base,
            target,
            seeds: 5,
            resolution: 0.01,
            coarse_step: 0.05,
            max_frac: 0.9,
            noise_allowance: 0.01,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.base.validate()?;
        if self.seeds == 0 {
            return Err(ConfigError::Sweep("seeds must be at least 1".into()));
        }
        if !(self.resolution > 0.0 && self.coarse_step >= self.resolution) {
            return Err(ConfigError::Sweep(
                "need 0 < resolution <= coarse_step".into(),
            ));
        }
        if !(self.max_frac > 0.0 && self.max_frac <= 1.0) {
            return Err(ConfigError::Sweep("max_frac must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    /// Smallest attacker fraction, on the resolution grid, whose mean
    /// isolated delivery falls below the target. `None` if none up to
    /// `max_frac` does.
    pub fraction: Option<f64>,
    /// Every probe made, `(attacker_frac, mean isolated delivery)`.
    pub probes: Vec<(f64, f64)>,
    /// Set when the pre-scan was not monotone and a full grid scan was used.
    pub warning: Option<String>,
}

/// Mean isolated delivery at one attacker fraction, over `seeds` runs.
pub fn isolated_delivery(base: &SimConfig, attacker_frac: f64, seeds: usize) -> Result<f64, ConfigError> {
    let reports: Vec<Result<SimReport, ConfigError>> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let mut cfg = base.clone();
            cfg.attack.attacker_frac = attacker_frac;
            cfg.master_seed = run_seed(base.master_seed, i);
            run(cfg)
        })
        .collect();
    let mut total = 0.0;
    for r in reports {
        // a group with nobody in it has nothing delivered
        total += r?.isolated.mean_delivery.unwrap_or(0.0);
    }
    Ok(total / seeds as f64)
}

/// Finds the attacker fraction at which the isolated group's mean delivery
/// drops below `target`: a coarse pre-scan brackets the crossing, then
/// bisection on the resolution grid narrows it. A non-monotone pre-scan
/// falls back to scanning every grid point.
pub fn find_threshold(spec: &ThresholdSpec) -> Result<ThresholdOutcome, ConfigError> {
    search_threshold(spec, |f| isolated_delivery(&spec.base, f, spec.seeds))
}

/// The search behind [`find_threshold`], with `delivery` giving the mean
/// isolated delivery at an attacker fraction. `spec.base` and `spec.seeds`
/// are not used.
pub fn search_threshold<F>(spec: &ThresholdSpec, mut delivery: F) -> Result<ThresholdOutcome, ConfigError>
where
    F: FnMut(f64) -> Result<f64, ConfigError>,
{
    spec.validate()?;
    let res = spec.resolution;
    let grid_max = (spec.max_frac / res + 1e-9).floor() as usize;
    let coarse = ((spec.coarse_step / res).round() as usize).max(1);
    let frac_of = |k: usize| snap(k as f64 * res);

    let mut probes = Vec::new();
    let mut probe = |k: usize, probes: &mut Vec<(f64, f64)>| -> Result<f64, ConfigError> {
        let f = frac_of(k);
        if let Some(&(_, d)) = probes.iter().find(|(x, _)| *x == f) {
            return Ok(d);
        }
        let d = delivery(f)?;
        probes.push((f, d));
        Ok(d)
    };

    // coarse pre-scan up to the first crossing
    let mut scan: Vec<(usize, f64)> = Vec::new();
    let mut k = 0;
    let crossing = loop {
        let d = probe(k, &mut probes)?;
        scan.push((k, d));
        if d < spec.target {
            break Some(k);
        }
        if k == grid_max {
            break None;
        }
        k = (k + coarse).min(grid_max);
    };
    let monotone = scan.windows(2).all(|w| w[1].1 <= w[0].1 + spec.noise_allowance);

    if !monotone {
        let mut found = None;
        for k in 0..=grid_max {
            if probe(k, &mut probes)? < spec.target {
                found = Some(frac_of(k));
                break;
            }
        }
        return Ok(ThresholdOutcome {
            fraction: found,
            probes,
            warning: Some(format!(
                "isolated delivery rose by more than {} between pre-scan points; used a full grid scan",
                spec.noise_allowance
            )),
        });
    }

    let Some(mut hi) = crossing else {
        return Ok(ThresholdOutcome {
            fraction: None,
            probes,
            warning: None,
        });
    };
    let mut lo = match scan.len() {
        1 => {
            // already below target with no attackers at all
            return Ok(ThresholdOutcome {
                fraction: Some(frac_of(hi)),
                probes,
                warning: None,
            });
        }
        n => scan[n - 2].0,
    };
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if probe(mid, &mut probes)? < spec.target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(ThresholdOutcome {
        fraction: Some(frac_of(hi)),
        probes,
        warning: None,
    })
}

/// Probability that a fresh update seeded at `copies_seeded` uniformly chosen
/// distinct nodes reaches at least one of `coalition_size` given nodes:
/// `1 - C(n - k, s) / C(n, s)`, evaluated as a product of ratios.
pub fn analytic_seed_coverage(num_nodes: usize, coalition_size: usize, copies_seeded: usize) -> Result<f64, ConfigError> {
    if num_nodes == 0 {
        return Err(ConfigError::TooSmall {
            name: "num_nodes",
            min: 1,
            value: 0,
        });
    }
    if coalition_size > num_nodes {
        return Err(ConfigError::Sweep(format!(
            "coalition of {coalition_size} exceeds {num_nodes} nodes"
        )));
    }
    if copies_seeded > num_nodes {
        return Err(ConfigError::TooManyCopies {
            copies: copies_seeded,
            nodes: num_nodes,
        });
    }
    let outside = num_nodes - coalition_size;
    if copies_seeded > outside {
        return Ok(1.0);
    }
    let miss: f64 = (0..copies_seeded)
        .map(|i| (outside - i) as f64 / (num_nodes - i) as f64)
        .product();
    Ok(1.0 - miss)
}

/// Monte-Carlo estimate of [`analytic_seed_coverage`] from `rounds` seeded
/// broadcaster rounds: the fraction of fresh updates that reach at least one
/// of nodes `0..coalition_size`. Returns the estimate and its standard error.
pub fn empirical_seed_coverage(params: &ProtocolParams, coalition_size: usize, rounds: u32, seed: u64) -> (f64, f64) {
    let nodes: Vec<NodeId> = (0..params.num_nodes).collect();
    let mut rng = stream_rng(seed, Stream::Seeding, 0);
    let mut hit = 0u64;
    let mut total = 0u64;
    for round in 0..rounds {
        let seeds = seed_round(round, params, &nodes, &mut rng);
        for update in params.updates_of_round(round) {
            total += 1;
            if seeds.iter().any(|&(u, n)| u == update && n < coalition_size) {
                hit += 1;
            }
        }
    }
    let p = hit as f64 / total as f64;
    (p, (p * (1.0 - p) / total as f64).sqrt())
}

/// Formats with 6 significant digits. Rust's float formatting rounds the
/// exact binary value to nearest, ties to even. Magnitudes in
/// `[1e-4, 1e6)` print positionally, anything else in `e` notation.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        // the mantissa already carries the rounding; re-render it positionally
        let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
        let negative = mantissa.starts_with('-');
        let scaled: f64 = format!("{}{}e{}", if negative { "-" } else { "" }, digits, exp - 5)
            .parse()
            .expect("valid float");
        format!("{scaled:.decimals$}")
    } else {
        sci
    }
}

/// Writes the CSV header and one line per row. `comment`, if given, goes
/// first as a `# ` line.
pub fn emit_csv<W: Write>(rows: &[SweepRow], comment: Option<&str>, out: W) -> std::io::Result<()> {
    let mut out = out;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    w.write_record(SweepRow::HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

/// One round of an abstract-model run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRow {
    pub round: Round,
    pub satiated_nodes: usize,
    pub tokens_held: usize,
    pub uploads: u64,
}

impl ModelRow {
    pub const HEADER: [&'static str; 4] = ["round", "satiated_nodes", "tokens_held", "uploads"];

    fn of(state: &ModelState, system: &AbstractSystem) -> Self {
        Self {
            round: state.round,
            satiated_nodes: state.satiated(system).iter().filter(|&&s| s).count(),
            tokens_held: state.tokens.iter().map(|t| t.count_ones(..)).sum(),
            uploads: state.uploads.iter().sum(),
        }
    }
}

/// Steps the model from its initial state until every node is satiated or
/// `max_rounds` rounds have run. Row 0 is the initial state; `uploads` is
/// cumulative.
pub fn model_trajectory(system: &AbstractSystem, max_rounds: Round, seed: u64) -> Vec<ModelRow> {
    let mut rng = ModelRng::new(seed);
    let mut state = ModelState::initial(system);
    let mut rows = vec![ModelRow::of(&state, system)];
    while state.round < max_rounds && !state.all_satiated(system) {
        state = model_step(&state, system, &mut rng);
        rows.push(ModelRow::of(&state, system));
    }
    rows
}

pub fn emit_model_csv<W: Write>(rows: &[ModelRow], comment: Option<&str>, out: W) -> std::io::Result<()> {
    let mut out = out;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ModelRow::HEADER)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.satiated_nodes.to_string(),
            r.tokens_held.to_string(),
            r.uploads.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
