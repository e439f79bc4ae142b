//! Independent replay of a simulation: each round is rebuilt from the
//! previous round's node states and the round's record, and every protocol
//! rule is checked along the way.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lotus_core::adversary::AttackKind;
use lotus_core::engine::{Protocol, Simulation};
use lotus_core::gossip::{is_satiated, should_initiate_push};
use lotus_core::{
    AttackConfig, NodeId, NodeKind, NodeState, ProtocolParams, ReportingConfig, Round, SimConfig, SimReport, UpdateId,
};
use proptest::prelude::*;

/// Small random configurations covering every attack, defense and
/// reporting setting.
pub fn config_strategy() -> impl Strategy<Value = SimConfig> {
    let protocol = (10usize..50, 2u32..6, 4u32..9, 1usize..6, 1usize..5, prop::bool::ANY);
    let attack = (
        prop::sample::select(vec![
            AttackKind::NoAttack,
            AttackKind::Crash,
            AttackKind::IdealLotus,
            AttackKind::TradeLotus,
        ]),
        0.0f64..0.5,
        0.2f64..0.95,
        prop::option::of(3u32..15),
        prop::bool::ANY,
    );
    let rest = (
        prop::option::of((1usize..5, 1usize..4)),
        0.0f64..=1.0,
        20u32..50,
        0u32..8,
        any::<u64>(),
    );
    (protocol, attack, rest).prop_map(
        |(
            (nodes, per_round, lifetime, copies, push, bonus),
            (kind, frac, satiate, rotation, returns),
            (reporting, obedient_frac, extra_rounds, warmup, seed),
        )| {
            SimConfig {
                params: ProtocolParams {
                    num_nodes: nodes,
                    updates_per_round: per_round,
                    update_lifetime: lifetime,
                    copies_seeded: copies.min(nodes),
                    push_size: push,
                    obedient_bonus: bonus,
                    ..ProtocolParams::default()
                },
                attack: AttackConfig {
                    satiate_frac: satiate,
                    rotation_interval: rotation,
                    accept_returns: returns,
                    ..AttackConfig::new(kind, frac)
                },
                reporting: match reporting {
                    Some((cap, threshold)) => ReportingConfig {
                        enabled: true,
                        service_cap: cap,
                        eviction_threshold: threshold,
                    },
                    None => ReportingConfig::default(),
                },
                obedient_frac,
                total_rounds: warmup + lifetime + extra_rounds,
                warmup_rounds: warmup,
                master_seed: seed,
            }
        },
    )
}

fn live(u: UpdateId, round: Round, p: &ProtocolParams) -> bool {
    u.release_round <= round && round < u.release_round + p.update_lifetime
}

fn recent(u: UpdateId, round: Round, p: &ProtocolParams) -> bool {
    live(u, round, p) && round - u.release_round < p.recent_window
}

fn expiring(u: UpdateId, round: Round, p: &ProtocolParams) -> bool {
    live(u, round, p) && (u.release_round + p.update_lifetime - 1) - round < p.expiring_window
}

fn holds_same(a: &NodeState, b: &NodeState, through: Round, p: &ProtocolParams) -> bool {
    (0..=through).all(|r| {
        (0..p.updates_per_round).all(|i| {
            let u = UpdateId::new(r, i);
            a.holdings.contains(u) == b.holdings.contains(u)
        })
    })
}

/// Runs `config` to completion, checking every round. Returns the report or
/// the first violated rule.
pub fn check_run(config: &SimConfig) -> Result<SimReport, String> {
    let p = config.params.clone();
    let kind = config.attack.kind;
    let cap = config.reporting.service_cap;
    let mut sim = Simulation::new(config.clone()).map_err(|e| e.to_string())?;
    let mut tally: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    let mut pool: BTreeSet<UpdateId> = BTreeSet::new();

    while !sim.is_finished() {
        let before: Vec<NodeState> = sim.nodes().to_vec();
        let record = sim.step_round();
        let round = record.round;
        let adv = sim.adversary();
        let mut replay = before.clone();
        let fail = |msg: String| Err(format!("round {round}: {msg}"));

        // broadcaster seeding
        for i in 0..p.updates_per_round {
            let u = UpdateId::new(round, i);
            let holders: BTreeSet<NodeId> =
                record.seeds.iter().filter(|(v, _)| *v == u).map(|&(_, n)| n).collect();
            let placements = record.seeds.iter().filter(|(v, _)| *v == u).count();
            if holders.len() != p.copies_seeded || placements != p.copies_seeded {
                return fail(format!("{u:?} seeded to {placements} slots, {} distinct nodes", holders.len()));
            }
        }
        for &(u, n) in &record.seeds {
            if before[n].evicted {
                return fail(format!("evicted node {n} was seeded"));
            }
            replay[n].holdings.insert(u);
            if adv.is_attacker(n) {
                pool.insert(u);
            }
        }

        if kind == AttackKind::IdealLotus {
            let mut forwarded = 0;
            for &t in &adv.satiated {
                if adv.is_attacker(t) || replay[t].evicted {
                    continue;
                }
                for &u in pool.iter().filter(|u| live(**u, round, &p)) {
                    if replay[t].holdings.insert(u) {
                        forwarded += 1;
                    }
                }
            }
            if forwarded != record.forwarded {
                return fail(format!("forwarded {} but replay forwards {forwarded}", record.forwarded));
            }
        } else if record.forwarded != 0 {
            return fail("forwarding without an ideal attacker".into());
        }

        let mut initiated = BTreeSet::new();
        let mut expected_reports = Vec::new();
        for x in &record.exchanges {
            let (i, r) = (x.initiator, x.responder);
            if !initiated.insert((i, x.protocol)) {
                return fail(format!("node {i} initiated twice ({:?})", x.protocol));
            }
            if i == r {
                return fail(format!("node {i} matched with itself"));
            }
            if replay[i].evicted || replay[r].evicted {
                return fail(format!("evicted node in exchange {i} -> {r}"));
            }
            let (ai, ar) = (adv.is_attacker(i), adv.is_attacker(r));
            let res = &x.result;
            if ai {
                if !(kind == AttackKind::TradeLotus && x.protocol == Protocol::Balanced) {
                    return fail(format!("attacker {i} initiated under {kind:?} {:?}", x.protocol));
                }
            } else {
                let willing = match x.protocol {
                    Protocol::Balanced => !is_satiated(&replay[i], round, &p),
                    Protocol::Push => should_initiate_push(&replay[i], round, &p),
                };
                if !willing {
                    return fail(format!("node {i} initiated {:?} while not wanting to", x.protocol));
                }
            }
            if (ai || ar) && kind != AttackKind::TradeLotus {
                let attacker_gave = if ai { &res.given_by_a } else { &res.given_by_b };
                if !attacker_gave.is_empty() {
                    return fail(format!("{kind:?} attacker uploaded in an exchange"));
                }
            }
            if !ai && !ar {
                let (a, b) = (res.given_by_a.len(), res.given_by_b.len());
                match x.protocol {
                    Protocol::Balanced => {
                        let bonus_ok = |extra_giver: &NodeState, base: usize| {
                            p.obedient_bonus && extra_giver.kind == NodeKind::Obedient && base >= 1
                        };
                        let ok = a == b
                            || (a == b + 1 && bonus_ok(&replay[i], b))
                            || (b == a + 1 && bonus_ok(&replay[r], a));
                        if !ok || res.junk_units != 0 {
                            return fail(format!("balanced {i} -> {r} moved {a} vs {b}"));
                        }
                    }
                    Protocol::Push => {
                        if a > p.push_size || b + res.junk_units as usize != a {
                            return fail(format!(
                                "push {i} -> {r}: took {a}, returned {b} plus {} junk",
                                res.junk_units
                            ));
                        }
                        if !res.given_by_a.iter().all(|&u| recent(u, round, &p))
                            || !res.given_by_b.iter().all(|&u| expiring(u, round, &p))
                        {
                            return fail(format!("push {i} -> {r} moved the wrong updates"));
                        }
                    }
                }
            }
            for (giver, receiver, given) in [(i, r, &res.given_by_a), (r, i, &res.given_by_b)] {
                let distinct: BTreeSet<_> = given.iter().collect();
                if distinct.len() != given.len() {
                    return fail(format!("{giver} gave a duplicate update"));
                }
                for &u in given {
                    if !live(u, round, &p) {
                        return fail(format!("{giver} gave non-live {u:?}"));
                    }
                    if !replay[giver].holdings.contains(u) {
                        return fail(format!("{giver} gave {u:?} it did not hold"));
                    }
                    if !replay[receiver].holdings.insert(u) {
                        return fail(format!("{receiver} was given {u:?} it already held"));
                    }
                }
                if config.reporting.enabled
                    && given.len() > cap
                    && replay[receiver].kind == NodeKind::Obedient
                {
                    expected_reports.push((receiver, giver));
                }
            }
        }

        let mut got: Vec<_> = record.reports.clone();
        got.sort_unstable();
        expected_reports.sort_unstable();
        if got != expected_reports {
            return fail(format!("reports {got:?}, expected {expected_reports:?}"));
        }
        let mut newly = Vec::new();
        for &(reporter, reported) in &record.reports {
            let set = tally.entry(reported).or_default();
            set.insert(reporter);
            if set.len() >= config.reporting.eviction_threshold && !replay[reported].evicted {
                replay[reported].evicted = true;
                newly.push(reported);
            }
        }
        let mut evicted = record.evicted.clone();
        evicted.sort_unstable();
        newly.sort_unstable();
        if evicted != newly {
            return fail(format!("evicted {evicted:?}, expected {newly:?}"));
        }

        for (n, (want, got)) in replay.iter().zip(sim.nodes()).enumerate() {
            if want.evicted != got.evicted {
                return fail(format!("eviction flag of {n} differs"));
            }
            if !holds_same(want, got, round, &p) {
                return fail(format!("holdings of node {n} differ from replay"));
            }
            let lost = (0..round).any(|r| {
                (0..p.updates_per_round).any(|k| {
                    let u = UpdateId::new(r, k);
                    before[n].holdings.contains(u) && !got.holdings.contains(u)
                })
            });
            if lost {
                return fail(format!("node {n} lost an update"));
            }
        }
    }

    let report = sim.report();
    check_report(config, &report)?;
    Ok(report)
}

fn check_report(config: &SimConfig, report: &SimReport) -> Result<(), String> {
    if report.total_receives != report.total_uploads + report.seed_placements {
        return Err(format!(
            "receives {} != uploads {} + seeds {}",
            report.total_receives, report.total_uploads, report.seed_placements
        ));
    }
    let groups = [&report.isolated, &report.satiated, &report.attacker];
    let members: usize = groups.iter().map(|g| g.nodes).sum();
    if members != config.params.num_nodes {
        return Err(format!("groups hold {members} of {} nodes", config.params.num_nodes));
    }
    for g in groups {
        for x in [g.mean_delivery, g.usable_frac].into_iter().flatten() {
            if !(0.0..=1.0).contains(&x) {
                return Err(format!("fraction {x} out of range"));
            }
        }
    }
    for point in &report.series {
        for x in [point.isolated, point.satiated, point.attacker].into_iter().flatten() {
            if !(0.0..=1.0).contains(&x) {
                return Err(format!("series fraction {x} out of range"));
            }
        }
    }
    if config.attack.kind == AttackKind::Crash && report.attacker.nodes > 0 && report.attacker.upload_per_node_round != 0.0 {
        return Err("crash attackers uploaded".into());
    }
    Ok(())
}

/// Satiated honest nodes do at least as well as isolated ones.
pub fn check_group_ordering(report: &SimReport) -> Result<(), String> {
    match (report.satiated.mean_delivery, report.isolated.mean_delivery) {
        (Some(s), Some(i)) if s < i => Err(format!("satiated delivery {s} below isolated {i}")),
        _ => Ok(()),
    }
}

/// Runs `config` twice and compares the reports exactly.
pub fn check_determinism(config: &SimConfig) -> Result<(), String> {
    let a = lotus_core::run(config.clone()).map_err(|e| e.to_string())?;
    let b = lotus_core::run(config.clone()).map_err(|e| e.to_string())?;
    if a == b {
        Ok(())
    } else {
        Err("two runs of one configuration differ".into())
    }
}

pub mod model_oracle {
    //! Brute-force evaluator for one step of the abstract model, written
    //! from the model's prose definition with plain sets.

    use std::collections::BTreeSet;

    pub type Tokens = BTreeSet<usize>;

    /// The attack applies first; every node then not holding all tokens
    /// contacts the partners chosen for it; a contacted partner answers if
    /// it lacks a token, or always when `altruism_one` is set; answering
    /// pairs swap copies of what they held after the attack.
    pub fn step(
        tokens: &[Tokens],
        all: &Tokens,
        attacked: &BTreeSet<usize>,
        chosen: &[Vec<usize>],
        altruism_one: bool,
    ) -> (Vec<Tokens>, Vec<u64>) {
        let start: Vec<Tokens> = tokens
            .iter()
            .enumerate()
            .map(|(v, t)| if attacked.contains(&v) { all.clone() } else { t.clone() })
            .collect();
        let full = |v: usize| &start[v] == all;
        let mut next = start.clone();
        let mut uploads = vec![0u64; tokens.len()];
        for (i, partners) in chosen.iter().enumerate() {
            if full(i) {
                assert!(partners.is_empty(), "a full node picked partners");
                continue;
            }
            for &j in partners {
                if full(j) && !altruism_one {
                    continue;
                }
                uploads[j] += start[j].difference(&start[i]).count() as u64;
                uploads[i] += start[i].difference(&start[j]).count() as u64;
                next[i].extend(start[j].iter().copied());
                next[j].extend(start[i].iter().copied());
            }
        }
        (next, uploads)
    }

    /// All ways to pick `k` of `items`, in lexicographic order.
    pub fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        if items.len() < k {
            return Vec::new();
        }
        let mut out = Vec::new();
        for (idx, &first) in items.iter().enumerate() {
            for mut rest in subsets(&items[idx + 1..], k - 1) {
                rest.insert(0, first);
                out.push(rest);
            }
        }
        out
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Connected simple graphs on `n` nodes, one per isomorphism class, as
    /// edge lists.
    pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
        let perms = permutations(n);
        let mut classes = BTreeSet::new();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        let mut out = Vec::new();
        for mask in 0u32..(1 << pairs.len()) {
            let edges: Vec<_> = (0..pairs.len()).filter(|b| mask >> b & 1 == 1).map(|b| pairs[b]).collect();
            // union-find free reachability from node 0
            let mut seen = vec![false; n];
            seen[0] = true;
            let mut changed = true;
            while changed {
                changed = false;
                for &(u, v) in &edges {
                    if seen[u] != seen[v] {
                        seen[u] = true;
                        seen[v] = true;
                        changed = true;
                    }
                }
            }
            if !seen.iter().all(|&s| s) {
                continue;
            }
            let canonical = perms
                .iter()
                .map(|perm| {
                    let mut e: Vec<(usize, usize)> = edges
                        .iter()
                        .map(|&(u, v)| (perm[u].min(perm[v]), perm[u].max(perm[v])))
                        .collect();
                    e.sort_unstable();
                    e
                })
                .min()
                .expect("at least one permutation");
            if classes.insert(canonical) {
                out.push(edges);
            }
        }
        out
    }

    pub fn neighbors(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Every possible partner assignment: each node lacking a token picks
    /// `min(c, degree)` neighbors, full nodes pick nobody.
    pub fn partner_choices(adj: &[Vec<usize>], full: &[bool], c: usize) -> Vec<Vec<Vec<usize>>> {
        let mut out: Vec<Vec<Vec<usize>>> = vec![Vec::new()];
        for (v, nbrs) in adj.iter().enumerate() {
            let options = if full[v] { vec![Vec::new()] } else { subsets(nbrs, c.min(nbrs.len())) };
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |o| {
                        let mut p = prefix.clone();
                        p.push(o.clone());
                        p
                    })
                })
                .collect();
        }
        out
    }
}

pub mod model_check {
    //! Drives the library's model against the brute-force evaluator.

    use lotus_core::graph::Graph;
    use lotus_core::model::{
        apply_attack, choose_partners, exchange, model_step, AbstractSystem, AttackSchedule, ModelRng, ModelState,
    };

    use super::model_oracle::{self as oracle, Tokens};

    fn as_sets(state: &ModelState) -> Vec<Tokens> {
        state.tokens.iter().map(|t| t.ones().collect()).collect()
    }

    /// Compares one library step (fixed partners) with the oracle.
    fn compare(
        system: &AbstractSystem,
        state: &ModelState,
        partners: &[Vec<usize>],
        altruism_one: bool,
    ) -> Result<ModelState, String> {
        let all: Tokens = (0..system.num_tokens).collect();
        let attacked = system.attack.targets(state.round);
        let (want, want_uploads) = oracle::step(&as_sets(state), &all, &attacked, partners, altruism_one);
        let mut pre = state.clone();
        apply_attack(&mut pre, system);
        // deterministic altruism draws nothing from this generator
        let mut unused = ModelRng::new(0).altruism;
        let got = exchange(&pre, system, partners, &mut unused);
        let got_uploads: Vec<u64> = got.uploads.iter().zip(&state.uploads).map(|(a, b)| a - b).collect();
        if as_sets(&got) != want || got_uploads != want_uploads {
            return Err(format!(
                "partners {partners:?}: library {:?}/{got_uploads:?}, oracle {want:?}/{want_uploads:?}",
                as_sets(&got)
            ));
        }
        // the step never takes a token away
        for (before, after) in state.tokens.iter().zip(&got.tokens) {
            if !before.is_subset(after) {
                return Err("a token set shrank".into());
            }
        }
        Ok(got)
    }

    /// Checks every step of a `rounds`-round run with seed `seed`; the
    /// partners the library draws must be a legal choice and the resulting
    /// state must match the oracle.
    fn check_trajectory(system: &AbstractSystem, rounds: u32, seed: u64, altruism_one: bool) -> Result<(), String> {
        let mut rng = ModelRng::new(seed);
        let mut state = ModelState::initial(system);
        for _ in 0..rounds {
            let mut pre = state.clone();
            apply_attack(&mut pre, system);
            let mut probe = ModelRng::new(0);
            probe.partners = rng.partners.clone();
            let partners = choose_partners(&pre, system, &mut probe.partners);
            let full = pre.satiated(system);
            let adj: Vec<Vec<usize>> = (0..system.graph.node_count())
                .map(|v| system.graph.neighbors(v).to_vec())
                .collect();
            let legal = oracle::partner_choices(&adj, &full, system.contact_budget);
            if !legal.contains(&partners) {
                return Err(format!("illegal partner choice {partners:?}"));
            }
            let expected = compare(system, &state, &partners, altruism_one)?;
            state = model_step(&state, system, &mut rng);
            if state.tokens != expected.tokens {
                return Err(format!("model_step disagrees at round {}", state.round));
            }
        }
        Ok(())
    }

    /// Exhaustive comparison over small systems: every connected graph (up to
    /// isomorphism) on
    /// 2..=`max_nodes` nodes, single-holder allocations of 1..=`max_tokens`
    /// tokens, `c` in {1, 2}, `a` in {0, 1}, and no attack or one node
    /// attacked every round. The first step is checked for every possible
    /// partner choice; `seeds` further runs of `rounds` rounds check the
    /// library's own draws. Returns the number of step comparisons.
    pub fn exhaustive(max_nodes: usize, max_tokens: usize, rounds: u32, seeds: u64) -> Result<u64, String> {
        let mut compared = 0u64;
        for n in 2..=max_nodes {
            for edges in oracle::connected_graphs(n) {
                let graph = Graph::from_edges(n, edges.iter().copied()).expect("valid edges");
                let adj = oracle::neighbors(n, &edges);
                for k in 1..=max_tokens {
                    // token t lives at node holders[t]
                    let allocations = (0..n.pow(k as u32)).map(|code| {
                        let mut alloc = vec![Vec::new(); n];
                        let mut c = code;
                        for t in 0..k {
                            alloc[c % n].push(t);
                            c /= n;
                        }
                        alloc
                    });
                    for alloc in allocations {
                        for attack in std::iter::once(None).chain((0..n).map(Some)) {
                            let schedule = match attack {
                                None => AttackSchedule::none(),
                                Some(v) => AttackSchedule::permanent([v]),
                            };
                            for c in [1, 2] {
                                for a in [0.0, 1.0] {
                                    let system = AbstractSystem::new(
                                        graph.clone(),
                                        k,
                                        alloc.clone(),
                                        c,
                                        a,
                                        schedule.clone(),
                                    )
                                    .map_err(|e| e.to_string())?;
                                    let ctx = |e: String| {
                                        format!("n={n} edges={edges:?} alloc={alloc:?} attack={attack:?} c={c} a={a}: {e}")
                                    };
                                    let state = ModelState::initial(&system);
                                    let mut pre = state.clone();
                                    apply_attack(&mut pre, &system);
                                    let full = pre.satiated(&system);
                                    for partners in oracle::partner_choices(&adj, &full, c) {
                                        compare(&system, &state, &partners, a == 1.0).map_err(ctx)?;
                                        compared += 1;
                                    }
                                    for seed in 0..seeds {
                                        check_trajectory(&system, rounds, seed, a == 1.0).map_err(ctx)?;
                                        compared += rounds as u64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(compared)
    }
}
