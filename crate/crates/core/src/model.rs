//! Abstract token-collecting system.
//!
//! Nodes of a connected graph collect a fixed token set. Each round every
//! unsatiated node contacts up to `contact_budget` neighbors and the pair
//! swap copies of everything they hold, all pairs at once. A satiated node
//! (one holding every token) never initiates and answers a request only with
//! probability `altruism`. At the start of each round the attacker may hand
//! a chosen set of nodes every token.

use std::collections::{BTreeMap, BTreeSet};

use fixedbitset::FixedBitSet;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::adversary::check_fraction;
use crate::error::ConfigError;
use crate::gossip::{NodeId, Round};
use crate::graph::Graph;
use crate::rng::{stream_rng, SimRng, Stream};

pub type TokenId = usize;
pub type TokenSet = FixedBitSet;

/// Which nodes the attacker satiates at the start of each round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttackSchedule {
    /// Satiated at the start of every round.
    pub permanent: BTreeSet<NodeId>,
    pub by_round: BTreeMap<Round, BTreeSet<NodeId>>,
}

impl AttackSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn permanent(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            permanent: nodes.into_iter().collect(),
            by_round: BTreeMap::new(),
        }
    }

    pub fn targets(&self, round: Round) -> BTreeSet<NodeId> {
        let mut out = self.permanent.clone();
        if let Some(extra) = self.by_round.get(&round) {
            out.extend(extra);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AbstractSystem {
    pub graph: Graph,
    pub num_tokens: usize,
    /// Initial tokens of every node.
    pub allocation: Vec<TokenSet>,
    pub contact_budget: usize,
    /// Probability a satiated node answers a request.
    pub altruism: f64,
    pub attack: AttackSchedule,
}

impl AbstractSystem {
    pub fn new(
        graph: Graph,
        num_tokens: usize,
        allocation: Vec<Vec<TokenId>>,
        contact_budget: usize,
        altruism: f64,
        attack: AttackSchedule,
    ) -> Result<Self, ConfigError> {
        let allocation = allocation
            .into_iter()
            .map(|tokens| {
                let mut set = TokenSet::with_capacity(num_tokens);
                for t in tokens {
                    if t >= num_tokens {
                        return Err(ConfigError::Model(format!("token {t} outside 0..{num_tokens}")));
                    }
                    set.insert(t);
                }
                Ok(set)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let system = Self {
            graph,
            num_tokens,
            allocation,
            contact_budget,
            altruism,
            attack,
        };
        system.validate()?;
        Ok(system)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.graph.node_count();
        if n == 0 {
            return Err(ConfigError::Model("graph has no nodes".into()));
        }
        if !self.graph.is_connected() {
            return Err(ConfigError::Model("graph is not connected".into()));
        }
        if self.allocation.len() != n {
            return Err(ConfigError::Model(format!(
                "allocation covers {} nodes, graph has {n}",
                self.allocation.len()
            )));
        }
        if self.contact_budget == 0 {
            return Err(ConfigError::TooSmall {
                name: "contact_budget",
                min: 1,
                value: 0,
            });
        }
        check_fraction("altruism", self.altruism)?;
        let mut all = TokenSet::with_capacity(self.num_tokens);
        for set in &self.allocation {
            all.union_with(set);
        }
        if all.count_ones(..) != self.num_tokens {
            return Err(ConfigError::Model("some token is in no node's initial allocation".into()));
        }
        let bad = self
            .attack
            .permanent
            .iter()
            .chain(self.attack.by_round.values().flatten())
            .find(|&&v| v >= n);
        if let Some(v) = bad {
            return Err(ConfigError::Model(format!("attack target {v} outside 0..{n}")));
        }
        Ok(())
    }

    /// Spreads tokens evenly: token `t` starts at node `t * n / num_tokens`.
    pub fn spread_allocation(num_nodes: usize, num_tokens: usize) -> Vec<Vec<TokenId>> {
        let mut alloc = vec![Vec::new(); num_nodes];
        for t in 0..num_tokens {
            alloc[t * num_nodes / num_tokens].push(t);
        }
        alloc
    }

    fn full(&self) -> TokenSet {
        let mut set = TokenSet::with_capacity(self.num_tokens);
        set.insert_range(..);
        set
    }
}

pub fn model_is_satiated(holdings: &TokenSet, num_tokens: usize) -> bool {
    holdings.count_ones(..) == num_tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelState {
    pub round: Round,
    pub tokens: Vec<TokenSet>,
    /// Token copies each node handed to a partner that lacked them.
    pub uploads: Vec<u64>,
    /// Exchanges each node took part in, either side.
    pub exchanges: Vec<u64>,
}

impl ModelState {
    pub fn initial(system: &AbstractSystem) -> Self {
        let n = system.graph.node_count();
        Self {
            round: 0,
            tokens: system.allocation.clone(),
            uploads: vec![0; n],
            exchanges: vec![0; n],
        }
    }

    pub fn satiated(&self, system: &AbstractSystem) -> Vec<bool> {
        self.tokens
            .iter()
            .map(|t| model_is_satiated(t, system.num_tokens))
            .collect()
    }

    pub fn all_satiated(&self, system: &AbstractSystem) -> bool {
        self.tokens.iter().all(|t| model_is_satiated(t, system.num_tokens))
    }
}

/// Random sources for the model, one per mechanism.
pub struct ModelRng {
    pub partners: SimRng,
    pub altruism: SimRng,
}

impl ModelRng {
    pub fn new(seed: u64) -> Self {
        Self {
            partners: stream_rng(seed, Stream::ModelPartners, 0),
            altruism: stream_rng(seed, Stream::Altruism, 0),
        }
    }
}

/// Applies the round's attack: targets receive every token.
pub fn apply_attack(state: &mut ModelState, system: &AbstractSystem) {
    let full = system.full();
    for v in system.attack.targets(state.round) {
        state.tokens[v].union_with(&full);
    }
}

/// Each unsatiated node picks `min(c, degree)` distinct neighbors uniformly.
/// Satiated nodes pick nobody.
pub fn choose_partners<R: Rng>(state: &ModelState, system: &AbstractSystem, rng: &mut R) -> Vec<Vec<NodeId>> {
    (0..system.graph.node_count())
        .map(|i| {
            if model_is_satiated(&state.tokens[i], system.num_tokens) {
                return Vec::new();
            }
            let nbrs = system.graph.neighbors(i);
            let k = system.contact_budget.min(nbrs.len());
            let mut picked: Vec<NodeId> = nbrs.choose_multiple(rng, k).copied().collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// Runs the exchanges for the chosen partners. All pairs read the token sets
/// as they stood when the exchanges began. A satiated partner answers each
/// request independently with probability `altruism`.
pub fn exchange<R: Rng>(
    state: &ModelState,
    system: &AbstractSystem,
    partners: &[Vec<NodeId>],
    altruism_rng: &mut R,
) -> ModelState {
    let snapshot = &state.tokens;
    let satiated = state.satiated(system);
    let mut next = state.clone();
    for (i, chosen) in partners.iter().enumerate() {
        for &p in chosen {
            let answers = !satiated[p] || responds(system.altruism, altruism_rng);
            if !answers {
                continue;
            }
            next.tokens[i].union_with(&snapshot[p]);
            next.tokens[p].union_with(&snapshot[i]);
            next.uploads[p] += snapshot[p].difference(&snapshot[i]).count() as u64;
            next.uploads[i] += snapshot[i].difference(&snapshot[p]).count() as u64;
            next.exchanges[i] += 1;
            next.exchanges[p] += 1;
        }
    }
    next.round += 1;
    next
}

/// Probability-0 and probability-1 altruism consume no randomness.
fn responds<R: Rng>(altruism: f64, rng: &mut R) -> bool {
    if altruism <= 0.0 {
        false
    } else if altruism >= 1.0 {
        true
    } else {
        rng.gen_bool(altruism)
    }
}

/// One full round: attack, partner choice, simultaneous exchanges.
pub fn model_step(state: &ModelState, system: &AbstractSystem, rng: &mut ModelRng) -> ModelState {
    let mut attacked = state.clone();
    apply_attack(&mut attacked, system);
    let partners = choose_partners(&attacked, system, &mut rng.partners);
    exchange(&attacked, system, &partners, &mut rng.altruism)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    /// Number of rounds after which every node first held every token.
    AllSatiated(Round),
    NotConverged { rounds: Round },
}

pub fn run_until_all_satiated(system: &AbstractSystem, max_rounds: Round, seed: u64) -> Convergence {
    let mut rng = ModelRng::new(seed);
    let mut state = ModelState::initial(system);
    if state.all_satiated(system) {
        return Convergence::AllSatiated(0);
    }
    while state.round < max_rounds {
        state = model_step(&state, system, &mut rng);
        if state.all_satiated(system) {
            return Convergence::AllSatiated(state.round);
        }
    }
    Convergence::NotConverged { rounds: max_rounds }
}

/// A connected piece of the graph left after removing the satiated nodes,
/// and the tokens none of its members starts with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnreachableTokens {
    pub component: Vec<NodeId>,
    pub missing: BTreeSet<TokenId>,
}

/// With no altruism and `satiated` kept satiated forever, a component can
/// only ever see the tokens its own members start with.
pub fn find_unreachable_tokens(system: &AbstractSystem, satiated: &BTreeSet<NodeId>) -> Vec<UnreachableTokens> {
    system
        .graph
        .components_without(satiated)
        .into_iter()
        .map(|component| {
            let mut present = TokenSet::with_capacity(system.num_tokens);
            for &v in &component {
                present.union_with(&system.allocation[v]);
            }
            let missing = (0..system.num_tokens).filter(|t| !present.contains(*t)).collect();
            UnreachableTokens { component, missing }
        })
        .collect()
}
