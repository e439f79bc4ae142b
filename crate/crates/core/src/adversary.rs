//! Attack strategies against the gossip protocol and the excess-service
//! reporting defense.
//!
//! The attacker splits honest nodes into a satiated group, fed as many
//! updates as possible, and an isolated group that gets nothing. Ideal
//! lotus-eater attackers pool their broadcaster seeds and hand them to the
//! whole satiated group at once. Trade lotus-eater attackers act one by one,
//! inside the balanced exchanges the protocol matches them into.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::ConfigError;
use crate::gossip::{
    transfer, wanted_from, ExchangeResult, NodeId, NodeKind, NodeState, ProtocolParams, Round, UpdateId,
    UpdateSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    NoAttack,
    Crash,
    IdealLotus,
    TradeLotus,
}

impl AttackKind {
    pub fn label(self) -> &'static str {
        match self {
            AttackKind::NoAttack => "none",
            AttackKind::Crash => "crash",
            AttackKind::IdealLotus => "ideal",
            AttackKind::TradeLotus => "trade",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "none" => Some(AttackKind::NoAttack),
            "crash" => Some(AttackKind::Crash),
            "ideal" => Some(AttackKind::IdealLotus),
            "trade" => Some(AttackKind::TradeLotus),
            _ => None,
        }
    }

    /// Kinds that feed a satiated group.
    pub fn is_lotus(self) -> bool {
        matches!(self, AttackKind::IdealLotus | AttackKind::TradeLotus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub attacker_frac: f64,
    /// Fraction of all nodes, attackers included, the attacker tries to satiate.
    pub satiate_frac: f64,
    /// Redraw the honest part of the satiated group every this many rounds.
    pub rotation_interval: Option<u32>,
    /// Trade attackers also take the updates their satiated partners hold.
    pub accept_returns: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::NoAttack,
            attacker_frac: 0.0,
            satiate_frac: 0.70,
            rotation_interval: None,
            accept_returns: true,
        }
    }
}

impl AttackConfig {
    pub fn new(kind: AttackKind, attacker_frac: f64) -> Self {
        Self {
            kind,
            attacker_frac,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_fraction("attacker_frac", self.attacker_frac)?;
        check_fraction("satiate_frac", self.satiate_frac)?;
        if self.rotation_interval == Some(0) {
            return Err(ConfigError::TooSmall {
                name: "rotation_interval",
                min: 1,
                value: 0,
            });
        }
        Ok(())
    }

    pub fn attacker_count(&self, num_nodes: usize) -> usize {
        if self.kind == AttackKind::NoAttack {
            return 0;
        }
        round_half_up(self.attacker_frac * num_nodes as f64).min(num_nodes)
    }

    pub fn satiated_count(&self, num_nodes: usize) -> usize {
        round_half_up(self.satiate_frac * num_nodes as f64)
            .min(num_nodes)
            .max(self.attacker_count(num_nodes))
    }
}

pub(crate) fn check_fraction(name: &'static str, value: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ConfigError::FractionOutOfRange { name, value })
    }
}

/// Rounds `x ≥ 0` to the nearest integer, halves going up. A tiny slack
/// absorbs products like `0.7 * 250 = 174.99999999999997`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportingConfig {
    pub enabled: bool,
    /// Most updates one party may give in a single interaction without being reported.
    pub service_cap: usize,
    /// Distinct reporters needed to evict a node.
    pub eviction_threshold: usize,
}

impl Default for ReportingConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            service_cap: 3,
            eviction_threshold: 3,
        }
    }
}

impl ReportingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, value) in [
            ("service_cap", self.service_cap),
            ("eviction_threshold", self.eviction_threshold),
        ] {
            if value < 1 {
                return Err(ConfigError::TooSmall { name, min: 1, value: 0 });
            }
        }
        Ok(())
    }
}

/// Uniformly picks the attacker-controlled nodes.
pub fn choose_attackers<R: Rng>(
    node_ids: &[NodeId],
    config: &AttackConfig,
    rng: &mut R,
) -> BTreeSet<NodeId> {
    let count = config.attacker_count(node_ids.len());
    node_ids.choose_multiple(rng, count).copied().collect()
}

/// The satiated group: every attacker plus uniformly drawn honest nodes up to
/// `satiate_frac` of the system.
pub fn choose_satiated_set<R: Rng>(
    node_ids: &[NodeId],
    attackers: &BTreeSet<NodeId>,
    config: &AttackConfig,
    rng: &mut R,
) -> BTreeSet<NodeId> {
    let target = config.satiated_count(node_ids.len()).max(attackers.len());
    let honest: Vec<NodeId> = node_ids
        .iter()
        .copied()
        .filter(|id| !attackers.contains(id))
        .collect();
    let extra = target - attackers.len();
    let mut set = attackers.clone();
    set.extend(honest.choose_multiple(rng, extra.min(honest.len())).copied());
    set
}

/// State the colluding attacker keeps for one run.
#[derive(Debug, Clone)]
pub struct AdversaryState {
    pub config: AttackConfig,
    pub attackers: BTreeSet<NodeId>,
    /// Satiated group, attackers included.
    pub satiated: BTreeSet<NodeId>,
    /// Broadcaster seeds received by any attacker.
    pub pool: UpdateSet,
    /// First attacker seeded with each update; forwarded uploads are booked to it.
    seed_source: BTreeMap<UpdateId, NodeId>,
    /// Distinct reporters per reported node.
    pub report_tally: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl AdversaryState {
    pub fn new(
        config: AttackConfig,
        attackers: BTreeSet<NodeId>,
        satiated: BTreeSet<NodeId>,
        params: &ProtocolParams,
    ) -> Self {
        Self {
            config,
            attackers,
            satiated,
            pool: UpdateSet::new(params.updates_per_round),
            seed_source: BTreeMap::new(),
            report_tally: BTreeMap::new(),
        }
    }

    pub fn is_attacker(&self, id: NodeId) -> bool {
        self.attackers.contains(&id)
    }

    /// Honest node the attacker is trying to satiate.
    pub fn is_target(&self, id: NodeId) -> bool {
        self.satiated.contains(&id) && !self.attackers.contains(&id)
    }

    /// Records a broadcaster placement at an attacker.
    pub fn absorb_seed(&mut self, attacker: NodeId, update: UpdateId) {
        if self.pool.insert(update) {
            self.seed_source.insert(update, attacker);
        }
    }

    /// Replaces the honest part of the satiated group.
    pub fn redraw_targets<R: Rng>(&mut self, node_ids: &[NodeId], rng: &mut R) {
        self.satiated = choose_satiated_set(node_ids, &self.attackers, &self.config, rng);
    }

    pub fn prune_before(&mut self, round: Round) {
        self.seed_source = self.seed_source.split_off(&UpdateId::new(round, 0));
    }
}

/// Behavior of a crashed attacker, and of lotus attackers toward nodes they
/// are not feeding: nothing moves, but the partner's slot is spent.
pub fn crash_exchange() -> ExchangeResult {
    ExchangeResult::default()
}

/// Ideal lotus-eater broadcast: every broadcaster-seeded update the attackers
/// hold is handed to every satiated target before the round's exchanges.
/// Returns the number of updates delivered.
pub fn ideal_forward(
    adversary: &AdversaryState,
    nodes: &mut [NodeState],
    round: Round,
    params: &ProtocolParams,
) -> u64 {
    let live: Vec<UpdateId> = params
        .live_iter(round)
        .filter(|u| adversary.pool.contains(*u))
        .collect();
    let mut delivered = 0;
    for target in adversary.satiated.iter().copied() {
        if adversary.is_attacker(target) || nodes[target].evicted {
            continue;
        }
        for &u in &live {
            if nodes[target].holdings.contains(u) {
                continue;
            }
            let source = adversary
                .seed_source
                .get(&u)
                .copied()
                .expect("pooled update has a seeding attacker");
            let mut stats = nodes[source].stats;
            transfer(&mut stats, &mut nodes[target], &[u]);
            nodes[source].stats = stats;
            delivered += 1;
        }
    }
    delivered
}

/// Trade lotus-eater balanced exchange between an attacker and the partner
/// the protocol matched it with. A satiated target receives every live
/// update the attacker holds and it lacks; with `accept_returns` the attacker
/// also takes every live update the target has that it lacks. Isolated
/// partners get crash behavior.
pub fn trade_exchange(
    adversary: &AdversaryState,
    attacker: &mut NodeState,
    partner: &mut NodeState,
    round: Round,
    params: &ProtocolParams,
) -> ExchangeResult {
    debug_assert_eq!(attacker.kind, NodeKind::Attacker);
    if !adversary.is_target(partner.id) {
        return crash_exchange();
    }
    let given_by_a = wanted_from(&attacker.holdings, &partner.holdings, round, params);
    let given_by_b = if adversary.config.accept_returns {
        wanted_from(&partner.holdings, &attacker.holdings, round, params)
    } else {
        Vec::new()
    };
    transfer(&mut attacker.stats, partner, &given_by_a);
    transfer(&mut partner.stats, attacker, &given_by_b);
    ExchangeResult {
        given_by_a,
        given_by_b,
        junk_units: 0,
    }
}

/// One directed transfer within an interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Service {
    pub giver: NodeId,
    pub receiver: NodeId,
    pub updates: usize,
}

/// Reports `(reporter, reported)` for every service above the cap whose
/// receiver is obedient. Rational receivers keep quiet.
pub fn file_excess_service_reports(
    services: &[Service],
    nodes: &[NodeState],
    reporting: &ReportingConfig,
) -> Vec<(NodeId, NodeId)> {
    if !reporting.enabled {
        return Vec::new();
    }
    services
        .iter()
        .filter(|s| s.updates > reporting.service_cap)
        .filter(|s| nodes[s.receiver].kind == NodeKind::Obedient)
        .map(|s| (s.receiver, s.giver))
        .collect()
}

/// Tallies reports and evicts every node that has reached the threshold of
/// distinct reporters. Returns the nodes newly evicted, in id order.
pub fn apply_reports(
    reports: &[(NodeId, NodeId)],
    tally: &mut BTreeMap<NodeId, BTreeSet<NodeId>>,
    nodes: &mut [NodeState],
    reporting: &ReportingConfig,
) -> Vec<NodeId> {
    for &(reporter, reported) in reports {
        nodes[reporter].stats.reports_filed += 1;
        tally.entry(reported).or_default().insert(reporter);
    }
    let mut evicted = Vec::new();
    for (&id, reporters) in tally.iter() {
        if !nodes[id].evicted && reporters.len() >= reporting.eviction_threshold {
            nodes[id].evicted = true;
            evicted.push(id);
        }
    }
    evicted
}
