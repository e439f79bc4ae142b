//! Protocol semantics for the broadcast stream: update lifetimes, the
//! satiation predicate, balanced exchanges and optimistic pushes.
//!
//! Everything here is a pure function over explicit [`NodeState`] values.
//! Transfers always pick the earliest-expiring candidates first, ties broken
//! by update index, which is exactly ascending [`UpdateId`] order.

use std::collections::BTreeSet;
use std::ops::Range;

use fixedbitset::FixedBitSet;

use crate::error::ConfigError;

pub type Round = u32;
pub type NodeId = usize;

/// A broadcast update, identified by the round it was released in and its
/// position within that round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UpdateId {
    pub release_round: Round,
    pub index: u32,
}

impl UpdateId {
    pub fn new(release_round: Round, index: u32) -> Self {
        Self { release_round, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Obedient,
    Rational,
    Attacker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub num_nodes: usize,
    pub updates_per_round: u32,
    pub update_lifetime: u32,
    pub copies_seeded: usize,
    pub push_size: usize,
    /// An update is "recently released" while `round - release_round < recent_window`.
    pub recent_window: u32,
    /// An update is "expiring soon" while `expiry_round - round < expiring_window`.
    pub expiring_window: u32,
    /// Obedient nodes give one extra update in balanced exchanges.
    pub obedient_bonus: bool,
    pub usable_threshold: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            num_nodes: 250,
            updates_per_round: 10,
            update_lifetime: 10,
            copies_seeded: 12,
            push_size: 2,
            recent_window: 2,
            expiring_window: 3,
            obedient_bonus: false,
            usable_threshold: 0.93,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let at_least_one = [
            ("num_nodes", self.num_nodes as u64),
            ("updates_per_round", self.updates_per_round as u64),
            ("update_lifetime", self.update_lifetime as u64),
            ("push_size", self.push_size as u64),
            ("recent_window", self.recent_window as u64),
            ("expiring_window", self.expiring_window as u64),
        ];
        for (name, value) in at_least_one {
            if value < 1 {
                return Err(ConfigError::TooSmall { name, min: 1, value });
            }
        }
        if self.copies_seeded > self.num_nodes {
            return Err(ConfigError::TooManyCopies {
                copies: self.copies_seeded,
                nodes: self.num_nodes,
            });
        }
        if !(self.usable_threshold > 0.0 && self.usable_threshold <= 1.0) {
            return Err(ConfigError::BadThreshold(self.usable_threshold));
        }
        Ok(())
    }

    pub fn expiry_round(&self, update: UpdateId) -> Round {
        update.release_round + self.update_lifetime - 1
    }

    pub fn is_live(&self, update: UpdateId, round: Round) -> bool {
        update.release_round <= round && round <= self.expiry_round(update)
    }

    /// Release rounds whose updates are live at `round`.
    pub fn live_rounds(&self, round: Round) -> Range<Round> {
        let first = (round + 1).saturating_sub(self.update_lifetime);
        first..round + 1
    }

    /// Live updates at `round` in earliest-expiry-first order.
    pub fn live_iter(&self, round: Round) -> impl Iterator<Item = UpdateId> + '_ {
        self.live_rounds(round)
            .flat_map(move |r| (0..self.updates_per_round).map(move |i| UpdateId::new(r, i)))
    }

    pub fn updates_of_round(&self, round: Round) -> impl Iterator<Item = UpdateId> {
        (0..self.updates_per_round).map(move |i| UpdateId::new(round, i))
    }

    /// Dense slots of the updates released in `rounds`.
    fn slots(&self, rounds: Range<Round>) -> Range<usize> {
        let per = self.updates_per_round as usize;
        rounds.start as usize * per..rounds.end as usize * per
    }
}

const BLOCK_BITS: usize = usize::BITS as usize;

/// Updates in `slots`, ascending, whose bit is set in `pick(block_index)`.
fn select(
    per_round: u32,
    slots: Range<usize>,
    pick: impl Fn(usize) -> usize,
) -> impl Iterator<Item = UpdateId> {
    let per = per_round as usize;
    let blocks = if slots.is_empty() {
        0..0
    } else {
        slots.start / BLOCK_BITS..(slots.end - 1) / BLOCK_BITS + 1
    };
    blocks.flat_map(move |b| {
        let mut word = pick(b);
        let base = b * BLOCK_BITS;
        if slots.start > base {
            word &= usize::MAX << (slots.start - base);
        }
        if slots.end < base + BLOCK_BITS {
            word &= (1usize << (slots.end - base)) - 1;
        }
        std::iter::from_fn(move || {
            if word == 0 {
                return None;
            }
            let bit = word.trailing_zeros() as usize;
            word &= word - 1;
            let slot = base + bit;
            Some(UpdateId::new((slot / per) as Round, (slot % per) as u32))
        })
    })
}

/// All updates live at `round`.
pub fn live_updates(round: Round, params: &ProtocolParams) -> BTreeSet<UpdateId> {
    params.live_iter(round).collect()
}

/// Dense set of updates, indexed by `release_round * updates_per_round + index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateSet {
    per_round: u32,
    bits: FixedBitSet,
}

impl UpdateSet {
    pub fn new(updates_per_round: u32) -> Self {
        Self {
            per_round: updates_per_round,
            bits: FixedBitSet::new(),
        }
    }

    fn slot(&self, update: UpdateId) -> usize {
        debug_assert!(update.index < self.per_round);
        update.release_round as usize * self.per_round as usize + update.index as usize
    }

    /// Returns `true` when the update was not already present.
    pub fn insert(&mut self, update: UpdateId) -> bool {
        let slot = self.slot(update);
        if slot >= self.bits.len() {
            self.bits.grow((slot + 1).next_power_of_two().max(64));
        }
        !self.bits.put(slot)
    }

    pub fn contains(&self, update: UpdateId) -> bool {
        self.bits.contains(self.slot(update))
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = UpdateId> + '_ {
        let per_round = self.per_round as usize;
        self.bits
            .ones()
            .map(move |slot| UpdateId::new((slot / per_round) as Round, (slot % per_round) as u32))
    }

    fn block(&self, i: usize) -> usize {
        self.bits.as_slice().get(i).copied().unwrap_or(0)
    }

    /// Updates released in `rounds` that are in `self` but not in `other`.
    pub fn difference_in<'a>(
        &'a self,
        other: &'a UpdateSet,
        rounds: Range<Round>,
        params: &ProtocolParams,
    ) -> impl Iterator<Item = UpdateId> + 'a {
        select(self.per_round, params.slots(rounds), move |b| {
            self.block(b) & !other.block(b)
        })
    }

    /// Updates released in `rounds` that are not in `self`.
    pub fn absent_in<'a>(
        &'a self,
        rounds: Range<Round>,
        params: &ProtocolParams,
    ) -> impl Iterator<Item = UpdateId> + 'a {
        select(self.per_round, params.slots(rounds), move |b| !self.block(b))
    }

    pub fn union_with(&mut self, other: &UpdateSet) {
        debug_assert_eq!(self.per_round, other.per_round);
        self.bits.union_with(&other.bits);
    }
}

impl Extend<UpdateId> for UpdateSet {
    fn extend<I: IntoIterator<Item = UpdateId>>(&mut self, iter: I) {
        for update in iter {
            self.insert(update);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    /// Updates given to other nodes.
    pub uploaded: u64,
    /// Updates that entered this node's holdings, from peers or the broadcaster.
    pub received: u64,
    /// Subset of `received` placed directly by the broadcaster.
    pub seeded: u64,
    pub junk_uploaded: u64,
    pub reports_filed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub kind: NodeKind,
    pub holdings: UpdateSet,
    pub evicted: bool,
    pub stats: NodeStats,
}

impl NodeState {
    pub fn new(id: NodeId, kind: NodeKind, params: &ProtocolParams) -> Self {
        Self {
            id,
            kind,
            holdings: UpdateSet::new(params.updates_per_round),
            evicted: false,
            stats: NodeStats::default(),
        }
    }

    pub fn with_holdings(
        id: NodeId,
        kind: NodeKind,
        params: &ProtocolParams,
        holdings: impl IntoIterator<Item = UpdateId>,
    ) -> Self {
        let mut node = Self::new(id, kind, params);
        node.holdings.extend(holdings);
        node
    }

    /// Live updates this node does not hold, earliest expiry first.
    pub fn missing_live(&self, round: Round, params: &ProtocolParams) -> Vec<UpdateId> {
        self.holdings.absent_in(params.live_rounds(round), params).collect()
    }

    /// Adds a broadcaster placement. Returns `false` if already held.
    pub fn seed(&mut self, update: UpdateId) -> bool {
        let fresh = self.holdings.insert(update);
        if fresh {
            self.stats.received += 1;
            self.stats.seeded += 1;
        }
        fresh
    }
}

/// Outcome of one pairwise interaction. `a` is the initiator (or the
/// attacker, for adversary interactions) and `b` its counterparty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExchangeResult {
    pub given_by_a: Vec<UpdateId>,
    pub given_by_b: Vec<UpdateId>,
    /// Junk units uploaded by `b` to pad an optimistic push.
    pub junk_units: u64,
}

impl ExchangeResult {
    pub fn is_empty(&self) -> bool {
        self.given_by_a.is_empty() && self.given_by_b.is_empty() && self.junk_units == 0
    }
}

/// Moves `updates` from `from` into `to`'s holdings and books the transfer.
pub(crate) fn transfer(from: &mut NodeStats, to: &mut NodeState, updates: &[UpdateId]) {
    for &u in updates {
        let fresh = to.holdings.insert(u);
        debug_assert!(fresh, "transferred an update the receiver already held");
        to.stats.received += 1;
    }
    from.uploaded += updates.len() as u64;
}

pub fn is_satiated(node: &NodeState, round: Round, params: &ProtocolParams) -> bool {
    node.holdings
        .absent_in(params.live_rounds(round), params)
        .next()
        .is_none()
}

/// Live updates held by `from` and missing at `to`, earliest expiry first.
pub(crate) fn wanted_from(
    from: &UpdateSet,
    to: &UpdateSet,
    round: Round,
    params: &ProtocolParams,
) -> Vec<UpdateId> {
    from.difference_in(to, params.live_rounds(round), params)
        .collect()
}

/// One-for-one swap of missing live updates. With `obedient_bonus` set, an
/// obedient side that has more to give adds one extra update, provided the
/// swap moved at least one update in each direction.
pub fn balanced_exchange(
    a: &mut NodeState,
    b: &mut NodeState,
    round: Round,
    params: &ProtocolParams,
) -> ExchangeResult {
    debug_assert!(!a.evicted && !b.evicted);
    let wants_a = wanted_from(&b.holdings, &a.holdings, round, params);
    let wants_b = wanted_from(&a.holdings, &b.holdings, round, params);
    let n = wants_a.len().min(wants_b.len());

    let quota = |giver: &NodeState, wants_of_other: &[UpdateId]| {
        let bonus = params.obedient_bonus
            && giver.kind == NodeKind::Obedient
            && n >= 1
            && wants_of_other.len() > n;
        n + usize::from(bonus)
    };
    let given_by_a = wants_b[..quota(a, &wants_b)].to_vec();
    let given_by_b = wants_a[..quota(b, &wants_a)].to_vec();

    transfer(&mut a.stats, b, &given_by_a);
    transfer(&mut b.stats, a, &given_by_b);
    ExchangeResult {
        given_by_a,
        given_by_b,
        junk_units: 0,
    }
}

/// Whether an honest node opens an optimistic push this round. Rational
/// nodes only push when they miss an update released before `round`;
/// obedient nodes push whenever anything live is missing. Attackers never
/// push through this gate; their behavior lives in the adversary module.
pub fn should_initiate_push(node: &NodeState, round: Round, params: &ProtocolParams) -> bool {
    match node.kind {
        NodeKind::Attacker => false,
        NodeKind::Obedient => !is_satiated(node, round, params),
        NodeKind::Rational => {
            let older = params.live_rounds(round).start..round;
            node.holdings.absent_in(older, params).next().is_some()
        }
    }
}

/// The initiator offers its recent updates and asks for soon-expiring ones.
/// The responder takes up to `push_size` offered updates and pays back the
/// same number of items, using needed updates first and junk for the rest.
pub fn optimistic_push(
    initiator: &mut NodeState,
    responder: &mut NodeState,
    round: Round,
    params: &ProtocolParams,
) -> ExchangeResult {
    debug_assert!(!initiator.evicted && !responder.evicted);
    let live = params.live_rounds(round);
    let recent = live.start.max((round + 1).saturating_sub(params.recent_window))..live.end;
    let taken: Vec<UpdateId> = initiator
        .holdings
        .difference_in(&responder.holdings, recent, params)
        .take(params.push_size)
        .collect();
    if taken.is_empty() {
        return ExchangeResult::default();
    }
    // expiry_round - round < expiring_window  <=>  release_round < round + expiring_window + 1 - lifetime
    let expiring_end = (round + params.expiring_window + 1)
        .saturating_sub(params.update_lifetime)
        .min(live.end);
    let expiring = live.start..expiring_end.max(live.start);
    let returned: Vec<UpdateId> = responder
        .holdings
        .difference_in(&initiator.holdings, expiring, params)
        .take(taken.len())
        .collect();
    let junk_units = (taken.len() - returned.len()) as u64;

    transfer(&mut initiator.stats, responder, &taken);
    transfer(&mut responder.stats, initiator, &returned);
    responder.stats.junk_uploaded += junk_units;
    ExchangeResult {
        given_by_a: taken,
        given_by_b: returned,
        junk_units,
    }
}
