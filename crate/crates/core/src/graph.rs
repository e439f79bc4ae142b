//! Undirected graphs for the abstract token model: generators, an edge-list
//! reader, and component queries.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;

use crate::error::ConfigError;
use crate::gossip::NodeId;

/// Simple undirected graph with sorted, duplicate-free adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adj: Vec<Vec<NodeId>>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Self { adj: vec![Vec::new(); n] }
    }

    /// Self-loops are dropped and duplicate edges collapse.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self, ConfigError> {
        let mut sets = vec![BTreeSet::new(); n];
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(ConfigError::Graph(format!("edge ({u}, {v}) outside 0..{n}")));
            }
            if u != v {
                sets[u].insert(v);
                sets[v].insert(u);
            }
        }
        Ok(Self {
            adj: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn path(n: usize) -> Self {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i))).expect("valid path")
    }

    pub fn cycle(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            edges.push((n - 1, 0));
        }
        Self::from_edges(n, edges).expect("valid cycle")
    }

    /// `rows × cols` lattice; node `(r, c)` has id `r * cols + c`.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let id = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push((id(r, c), id(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.push((id(r, c), id(r + 1, c)));
                }
            }
        }
        Self::from_edges(rows * cols, edges).expect("valid grid")
    }

    pub fn complete(n: usize) -> Self {
        Self::from_edges(n, (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v)))).expect("valid complete graph")
    }

    /// Erdős–Rényi G(n, p).
    pub fn gnp<R: Rng>(n: usize, p: f64, rng: &mut R) -> Self {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(p.clamp(0.0, 1.0)) {
                    edges.push((u, v));
                }
            }
        }
        Self::from_edges(n, edges).expect("valid random graph")
    }

    /// Reads one `u v` pair per line, 0-based ids. Blank lines and lines
    /// starting with `#` are skipped. The node count is one more than the
    /// largest id seen.
    pub fn parse_edge_list(text: &str) -> Result<Self, ConfigError> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<NodeId>()
                    .map_err(|_| ConfigError::Graph(format!("line {}: bad node id {s:?}", lineno + 1)))
            };
            match fields.as_slice() {
                [u, v] => edges.push((parse(u)?, parse(v)?)),
                _ => {
                    return Err(ConfigError::Graph(format!(
                        "line {}: expected \"u v\", got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let n = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
        Self::from_edges(n, edges)
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.adj[node]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adj[node].len()
    }

    pub fn is_connected(&self) -> bool {
        self.components_without(&BTreeSet::new()).len() <= 1
    }

    /// Connected components of the graph with `removed` deleted, each sorted,
    /// listed by smallest member.
    pub fn components_without(&self, removed: &BTreeSet<NodeId>) -> Vec<Vec<NodeId>> {
        let mut seen = vec![false; self.node_count()];
        let mut out = Vec::new();
        for start in 0..self.node_count() {
            if seen[start] || removed.contains(&start) {
                continue;
            }
            seen[start] = true;
            let mut component = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.adj[u] {
                    if !seen[v] && !removed.contains(&v) {
                        seen[v] = true;
                        component.push(v);
                        queue.push_back(v);
                    }
                }
            }
            component.sort_unstable();
            out.push(component);
        }
        out
    }
}
