//! The round loop: broadcaster seeding, partner matching, exchanges in a
//! fixed order, reporting, and delivery accounting.
//!
//! A round runs these phases in order:
//! 1. the broadcaster seeds each new update at `copies_seeded` random nodes;
//! 2. ideal lotus-eater attackers forward their seeds to the satiated group;
//! 3. balanced-exchange initiations, ascending initiator id;
//! 4. optimistic-push initiations, ascending initiator id;
//! 5. excess-service reports and evictions;
//! 6. delivery accounting for updates expiring this round.
//!
//! Exchanges are sequential: a later exchange sees the transfers of earlier
//! ones in the same round.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::adversary::{
    apply_reports, check_fraction, choose_attackers, choose_satiated_set, crash_exchange,
    file_excess_service_reports, ideal_forward, round_half_up, trade_exchange, AdversaryState,
    AttackConfig, AttackKind, ReportingConfig, Service,
};
use crate::error::ConfigError;
use crate::gossip::{
    balanced_exchange, is_satiated, optimistic_push, should_initiate_push, ExchangeResult, NodeId,
    NodeKind, NodeState, ProtocolParams, Round, UpdateId, UpdateSet,
};
use crate::rng::{hash_words, hashed_below, stream_rng, SimRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub params: ProtocolParams,
    pub attack: AttackConfig,
    pub reporting: ReportingConfig,
    /// Fraction of honest nodes that are obedient; the rest are rational.
    pub obedient_frac: f64,
    pub total_rounds: u32,
    pub warmup_rounds: u32,
    pub master_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            params: ProtocolParams::default(),
            attack: AttackConfig::default(),
            reporting: ReportingConfig::default(),
            obedient_frac: 0.5,
            total_rounds: 500,
            warmup_rounds: 20,
            master_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.validate()?;
        self.attack.validate()?;
        self.reporting.validate()?;
        check_fraction("obedient_frac", self.obedient_frac)?;
        if self.warmup_rounds >= self.total_rounds {
            return Err(ConfigError::WarmupTooLong {
                warmup: self.warmup_rounds,
                total: self.total_rounds,
            });
        }
        if self.last_counted_release().is_none() {
            return Err(ConfigError::NoCountedUpdates {
                warmup: self.warmup_rounds,
                total: self.total_rounds,
            });
        }
        Ok(())
    }

    /// Last release round whose updates expire inside the run and so count
    /// toward the metrics.
    fn last_counted_release(&self) -> Option<Round> {
        let last = self.total_rounds.checked_sub(self.params.update_lifetime)?;
        (last >= self.warmup_rounds).then_some(last)
    }

    fn counts(&self, release_round: Round) -> bool {
        self.last_counted_release()
            .is_some_and(|last| (self.warmup_rounds..=last).contains(&release_round))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    Balanced,
    Push,
}

impl Protocol {
    fn tag(self) -> u64 {
        match self {
            Protocol::Balanced => 1,
            Protocol::Push => 2,
        }
    }
}

/// Partner of `node` for one protocol in one round: a pure function of the
/// seed, round, node, and protocol, uniform over `live` minus `node`.
/// `live` must be sorted. `None` when nobody else is live.
pub fn match_partner(
    master_seed: u64,
    round: Round,
    node: NodeId,
    protocol: Protocol,
    live: &[NodeId],
) -> Option<NodeId> {
    let own = live.binary_search(&node);
    let others = live.len() - usize::from(own.is_ok());
    if others == 0 {
        return None;
    }
    let key = [
        hash_words(&[master_seed, Stream::Matching as u64]),
        round as u64,
        node as u64,
        protocol.tag(),
    ];
    let mut idx = hashed_below(&key, others as u64) as usize;
    if let Ok(pos) = own {
        if idx >= pos {
            idx += 1;
        }
    }
    Some(live[idx])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartnerAssignment {
    pub node: NodeId,
    pub balanced: Option<NodeId>,
    pub push: Option<NodeId>,
}

/// Partners for every live node in `round`.
pub fn match_partners(round: Round, live: &[NodeId], master_seed: u64) -> Vec<PartnerAssignment> {
    live.iter()
        .map(|&node| PartnerAssignment {
            node,
            balanced: match_partner(master_seed, round, node, Protocol::Balanced, live),
            push: match_partner(master_seed, round, node, Protocol::Push, live),
        })
        .collect()
}

/// Broadcaster placements for `round`: each new update goes to
/// `copies_seeded` distinct nodes drawn uniformly from `eligible`.
pub fn seed_round(
    round: Round,
    params: &ProtocolParams,
    eligible: &[NodeId],
    rng: &mut SimRng,
) -> Vec<(UpdateId, NodeId)> {
    let mut placements = Vec::with_capacity(params.updates_per_round as usize * params.copies_seeded);
    for update in params.updates_of_round(round) {
        let mut chosen: Vec<NodeId> = eligible
            .choose_multiple(rng, params.copies_seeded.min(eligible.len()))
            .copied()
            .collect();
        chosen.sort_unstable();
        placements.extend(chosen.into_iter().map(|n| (update, n)));
    }
    placements
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Isolated,
    Satiated,
    Attacker,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Isolated, Group::Satiated, Group::Attacker];

    fn slot(self) -> usize {
        self as usize
    }
}

/// One initiated interaction. `result.given_by_a` is always what the
/// initiator gave.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeRecord {
    pub protocol: Protocol,
    pub initiator: NodeId,
    pub responder: NodeId,
    pub result: ExchangeResult,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundRecord {
    pub round: Round,
    pub seeds: Vec<(UpdateId, NodeId)>,
    /// Updates handed out by the ideal lotus-eater broadcast.
    pub forwarded: u64,
    pub exchanges: Vec<ExchangeRecord>,
    pub reports: Vec<(NodeId, NodeId)>,
    pub evicted: Vec<NodeId>,
}

impl RoundRecord {
    pub fn services(&self) -> Vec<Service> {
        let mut out = Vec::new();
        for x in &self.exchanges {
            if !x.result.given_by_a.is_empty() {
                out.push(Service {
                    giver: x.initiator,
                    receiver: x.responder,
                    updates: x.result.given_by_a.len(),
                });
            }
            if !x.result.given_by_b.is_empty() {
                out.push(Service {
                    giver: x.responder,
                    receiver: x.initiator,
                    updates: x.result.given_by_b.len(),
                });
            }
        }
        out
    }
}

/// Delivery of the updates expiring in one round, per group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundDelivery {
    pub release_round: Round,
    pub isolated: Option<f64>,
    pub satiated: Option<f64>,
    pub attacker: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub nodes: usize,
    /// Mean over nodes of the fraction of counted updates delivered.
    pub mean_delivery: Option<f64>,
    /// Fraction of nodes whose delivery reaches the usability threshold.
    pub usable_frac: Option<f64>,
    pub upload_per_node_round: f64,
    pub junk_units: u64,
    pub reports_filed: u64,
    pub evictions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub isolated: GroupMetrics,
    pub satiated: GroupMetrics,
    pub attacker: GroupMetrics,
    pub series: Vec<RoundDelivery>,
    pub rounds: u32,
    pub counted_updates: u64,
    pub total_uploads: u64,
    pub total_receives: u64,
    pub seed_placements: u64,
}

impl SimReport {
    pub fn group(&self, group: Group) -> &GroupMetrics {
        match group {
            Group::Isolated => &self.isolated,
            Group::Satiated => &self.satiated,
            Group::Attacker => &self.attacker,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    delivered: u64,
    counted: u64,
}

pub struct Simulation {
    config: SimConfig,
    nodes: Vec<NodeState>,
    adversary: AdversaryState,
    round: Round,
    seeding_rng: SimRng,
    /// Group of every node, one snapshot per satiated-set epoch.
    epoch_groups: Vec<Vec<Group>>,
    tallies: Vec<[Tally; 3]>,
    series: Vec<RoundDelivery>,
    seed_placements: u64,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let params = &config.params;
        let n = params.num_nodes;
        let ids: Vec<NodeId> = (0..n).collect();

        let mut sat_rng = stream_rng(config.master_seed, Stream::SatiatedSet, 0);
        let attackers = choose_attackers(&ids, &config.attack, &mut sat_rng);
        let satiated = if config.attack.kind.is_lotus() {
            choose_satiated_set(&ids, &attackers, &config.attack, &mut sat_rng)
        } else {
            attackers.clone()
        };

        let mut honest: Vec<NodeId> = ids.iter().copied().filter(|i| !attackers.contains(i)).collect();
        honest.shuffle(&mut stream_rng(config.master_seed, Stream::NodeKinds, 0));
        let obedient: BTreeSet<NodeId> = honest
            .iter()
            .take(round_half_up(config.obedient_frac * honest.len() as f64))
            .copied()
            .collect();

        let nodes = ids
            .iter()
            .map(|&id| {
                let kind = if attackers.contains(&id) {
                    NodeKind::Attacker
                } else if obedient.contains(&id) {
                    NodeKind::Obedient
                } else {
                    NodeKind::Rational
                };
                NodeState::new(id, kind, params)
            })
            .collect();

        let adversary = AdversaryState::new(config.attack.clone(), attackers, satiated, params);
        let mut sim = Self {
            seeding_rng: stream_rng(config.master_seed, Stream::Seeding, 0),
            nodes,
            adversary,
            round: 0,
            epoch_groups: Vec::new(),
            tallies: vec![[Tally::default(); 3]; n],
            series: Vec::new(),
            seed_placements: 0,
            config,
        };
        sim.epoch_groups.push(sim.current_groups());
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn adversary(&self) -> &AdversaryState {
        &self.adversary
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.total_rounds
    }

    pub fn holdings(&self, id: NodeId) -> &UpdateSet {
        &self.nodes[id].holdings
    }

    pub fn live_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| !n.evicted).map(|n| n.id).collect()
    }

    fn current_groups(&self) -> Vec<Group> {
        (0..self.nodes.len())
            .map(|id| {
                if self.adversary.is_attacker(id) {
                    Group::Attacker
                } else if self.adversary.is_target(id) {
                    Group::Satiated
                } else {
                    Group::Isolated
                }
            })
            .collect()
    }

    fn epoch_of(&self, round: Round) -> usize {
        match self.config.attack.rotation_interval {
            Some(k) if self.config.attack.kind.is_lotus() => (round / k) as usize,
            _ => 0,
        }
    }

    /// Group of `id` for updates released in `round`.
    pub fn group_at(&self, id: NodeId, round: Round) -> Group {
        self.epoch_groups[self.epoch_of(round)][id]
    }

    /// Runs one full round and returns what happened in it.
    pub fn step_round(&mut self) -> RoundRecord {
        assert!(!self.is_finished(), "simulation already ran all rounds");
        let round = self.round;
        let params = self.config.params.clone();
        let mut record = RoundRecord {
            round,
            ..RoundRecord::default()
        };

        let epoch = self.epoch_of(round);
        if epoch >= self.epoch_groups.len() {
            let ids: Vec<NodeId> = (0..self.nodes.len()).collect();
            let mut rng = stream_rng(self.config.master_seed, Stream::SatiatedSet, epoch as u64);
            self.adversary.redraw_targets(&ids, &mut rng);
            self.epoch_groups.push(self.current_groups());
        }

        let live = self.live_nodes();
        record.seeds = seed_round(round, &params, &live, &mut self.seeding_rng);
        for &(update, id) in &record.seeds {
            self.nodes[id].seed(update);
            if self.adversary.is_attacker(id) {
                self.adversary.absorb_seed(id, update);
            }
        }
        self.seed_placements += record.seeds.len() as u64;

        if self.config.attack.kind == AttackKind::IdealLotus {
            record.forwarded = ideal_forward(&self.adversary, &mut self.nodes, round, &params);
        }

        for protocol in [Protocol::Balanced, Protocol::Push] {
            for &id in &live {
                if self.nodes[id].evicted {
                    continue;
                }
                if let Some(x) = self.initiate(id, protocol, round, &live, &params) {
                    record.exchanges.push(x);
                }
            }
        }

        if self.config.reporting.enabled {
            record.reports = file_excess_service_reports(
                &record.services(),
                &self.nodes,
                &self.config.reporting,
            );
            record.evicted = apply_reports(
                &record.reports,
                &mut self.adversary.report_tally,
                &mut self.nodes,
                &self.config.reporting,
            );
        }

        self.account_expiring(round);
        self.round += 1;
        self.adversary
            .prune_before((self.round + 1).saturating_sub(params.update_lifetime));
        record
    }

    fn initiate(
        &mut self,
        id: NodeId,
        protocol: Protocol,
        round: Round,
        live: &[NodeId],
        params: &ProtocolParams,
    ) -> Option<ExchangeRecord> {
        // trade attackers only act in balanced exchanges
        let trade = self.config.attack.kind == AttackKind::TradeLotus && protocol == Protocol::Balanced;
        let initiator_is_attacker = self.adversary.is_attacker(id);
        if !initiator_is_attacker {
            let willing = match protocol {
                Protocol::Balanced => !is_satiated(&self.nodes[id], round, params),
                Protocol::Push => should_initiate_push(&self.nodes[id], round, params),
            };
            if !willing {
                return None;
            }
        } else if !trade {
            // crashed and ideal attackers never open exchanges
            return None;
        }

        let partner = match_partner(self.config.master_seed, round, id, protocol, live)?;
        if self.nodes[partner].evicted {
            return None;
        }
        let responder_is_attacker = self.adversary.is_attacker(partner);
        let (a, b) = pair_mut(&mut self.nodes, id, partner);
        let result = match (initiator_is_attacker, responder_is_attacker) {
            (true, true) => crash_exchange(),
            (true, false) => trade_exchange(&self.adversary, a, b, round, params),
            (false, true) if trade => {
                let r = trade_exchange(&self.adversary, b, a, round, params);
                ExchangeResult {
                    given_by_a: r.given_by_b,
                    given_by_b: r.given_by_a,
                    junk_units: r.junk_units,
                }
            }
            (false, true) => crash_exchange(),
            (false, false) => match protocol {
                Protocol::Balanced => balanced_exchange(a, b, round, params),
                Protocol::Push => optimistic_push(a, b, round, params),
            },
        };
        Some(ExchangeRecord {
            protocol,
            initiator: id,
            responder: partner,
            result,
        })
    }

    fn account_expiring(&mut self, round: Round) {
        let params = &self.config.params;
        let Some(release) = (round + 1).checked_sub(params.update_lifetime) else {
            return;
        };
        let counted = self.config.counts(release);
        let mut totals = [Tally::default(); 3];
        for id in 0..self.nodes.len() {
            let group = self.group_at(id, release);
            let holdings = self.holdings(id);
            let got = params
                .updates_of_round(release)
                .filter(|u| holdings.contains(*u))
                .count() as u64;
            let total = params.updates_per_round as u64;
            let t = &mut totals[group.slot()];
            t.delivered += got;
            t.counted += total;
            if counted {
                let t = &mut self.tallies[id][group.slot()];
                t.delivered += got;
                t.counted += total;
            }
        }
        let frac = |t: Tally| (t.counted > 0).then(|| t.delivered as f64 / t.counted as f64);
        self.series.push(RoundDelivery {
            release_round: release,
            isolated: frac(totals[Group::Isolated.slot()]),
            satiated: frac(totals[Group::Satiated.slot()]),
            attacker: frac(totals[Group::Attacker.slot()]),
        });
    }

    /// Metrics over everything run so far.
    pub fn report(&self) -> SimReport {
        let rounds = self.round.max(1);
        let threshold = self.config.params.usable_threshold;
        let initial = &self.epoch_groups[0];
        let group_metrics = |group: Group| {
            let fractions: Vec<f64> = self
                .tallies
                .iter()
                .map(|t| t[group.slot()])
                .filter(|t| t.counted > 0)
                .map(|t| t.delivered as f64 / t.counted as f64)
                .collect();
            let members: Vec<&NodeState> = self
                .nodes
                .iter()
                .filter(|n| initial[n.id] == group)
                .collect();
            let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            let usable: Vec<f64> = fractions
                .iter()
                .map(|&f| if f >= threshold { 1.0 } else { 0.0 })
                .collect();
            let uploads: u64 = members.iter().map(|n| n.stats.uploaded).sum();
            GroupMetrics {
                nodes: members.len(),
                mean_delivery: mean(&fractions),
                usable_frac: mean(&usable),
                upload_per_node_round: if members.is_empty() {
                    0.0
                } else {
                    uploads as f64 / (members.len() as f64 * rounds as f64)
                },
                junk_units: members.iter().map(|n| n.stats.junk_uploaded).sum(),
                reports_filed: members.iter().map(|n| n.stats.reports_filed).sum(),
                evictions: members.iter().filter(|n| n.evicted).count(),
            }
        };
        let counted_updates = match self.config.last_counted_release() {
            Some(last) => {
                let end = last.min(self.round.saturating_sub(self.config.params.update_lifetime));
                (end + 1).saturating_sub(self.config.warmup_rounds) as u64
                    * self.config.params.updates_per_round as u64
            }
            None => 0,
        };
        SimReport {
            isolated: group_metrics(Group::Isolated),
            satiated: group_metrics(Group::Satiated),
            attacker: group_metrics(Group::Attacker),
            series: self.series.clone(),
            rounds: self.round,
            counted_updates,
            total_uploads: self.nodes.iter().map(|n| n.stats.uploaded).sum(),
            total_receives: self.nodes.iter().map(|n| n.stats.received).sum(),
            seed_placements: self.seed_placements,
        }
    }
}

fn pair_mut(nodes: &mut [NodeState], i: usize, j: usize) -> (&mut NodeState, &mut NodeState) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = nodes.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Runs a whole simulation.
pub fn run(config: SimConfig) -> Result<SimReport, ConfigError> {
    let mut sim = Simulation::new(config)?;
    while !sim.is_finished() {
        sim.step_round();
    }
    Ok(sim.report())
}

/// Like [`run`], handing every round's record to `observe`.
pub fn run_observed<F>(config: SimConfig, mut observe: F) -> Result<SimReport, ConfigError>
where
    F: FnMut(&Simulation, &RoundRecord),
{
    let mut sim = Simulation::new(config)?;
    while !sim.is_finished() {
        let record = sim.step_round();
        observe(&sim, &record);
    }
    Ok(sim.report())
}
