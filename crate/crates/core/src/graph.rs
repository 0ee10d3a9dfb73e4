//! Communication topology: connectivity matrix, neighborhoods,
//! connectivity classification and block-triangular re-indexing.
//!
//! `gamma[i][j] > 0` means agent `i` receives information from agent `j`,
//! i.e. `j` influences `i`. The same container carries the edge weights
//! used by the stability monitor.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("agent index {index} out of range for {n} agents")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("connectivity entry ({0}, {1}) must be finite and non-negative")]
    InvalidEntry(usize, usize),
    #[error("self loop on agent {0}")]
    SelfLoop(usize),
    #[error("matrix is not square")]
    NotSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    StronglyConnected,
    WeaklyConnected,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl ConnectivityMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(GraphError::NotSquare);
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(GraphError::InvalidEntry(i, j));
                }
                if i == j && v != 0.0 {
                    return Err(GraphError::SelfLoop(i));
                }
                m.entries[i * n + j] = v;
            }
        }
        Ok(m)
    }

    /// Builds the matrix from directed transmission links `(from, to)`
    /// with unit weight.
    pub fn from_links(n: usize, links: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut m = Self::zeros(n);
        for &(from, to) in links {
            for index in [from, to] {
                if index >= n {
                    return Err(GraphError::IndexOutOfRange { index, n });
                }
            }
            if from == to {
                return Err(GraphError::SelfLoop(from));
            }
            m.entries[to * n + from] = 1.0;
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.get(i, j) > 0.0
    }

    /// Agents whose information agent `i` receives.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// Agents that receive information from agent `i`.
    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(j, i)).collect()
    }

    /// Copy with rows and columns re-indexed so that new index `k` is old
    /// index `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut m = Self::zeros(n);
        for (a, &i) in perm.iter().enumerate() {
            for (b, &j) in perm.iter().enumerate() {
                m.entries[a * n + b] = self.get(i, j);
            }
        }
        m
    }
}

/// Neighborhood `{j : gamma_ij > 0 or gamma_ji > 0}` of agent `i`.
pub fn neighborhood(gamma: &ConnectivityMatrix, i: usize) -> Result<BTreeSet<usize>, GraphError> {
    let n = gamma.len();
    if i >= n {
        return Err(GraphError::IndexOutOfRange { index: i, n });
    }
    Ok((0..n)
        .filter(|&j| j != i && (gamma.has_edge(i, j) || gamma.has_edge(j, i)))
        .collect())
}

/// Strongly connected components (Tarjan). Components are returned in
/// reverse topological order of the "i depends on j" relation, i.e. a
/// component appears after every component it reaches.
pub fn strongly_connected_components(gamma: &ConnectivityMatrix) -> Vec<Vec<usize>> {
    struct Tarjan<'a> {
        g: &'a ConnectivityMatrix,
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }

    impl Tarjan<'_> {
        fn visit(&mut self, v: usize) {
            self.index[v] = Some(self.next);
            self.low[v] = self.next;
            self.next += 1;
            self.stack.push(v);
            self.on_stack[v] = true;
            for w in 0..self.g.len() {
                if !self.g.has_edge(v, w) {
                    continue;
                }
                match self.index[w] {
                    None => {
                        self.visit(w);
                        self.low[v] = self.low[v].min(self.low[w]);
                    }
                    Some(iw) if self.on_stack[w] => self.low[v] = self.low[v].min(iw),
                    Some(_) => {}
                }
            }
            if Some(self.low[v]) == self.index[v] {
                let mut comp = Vec::new();
                while let Some(w) = self.stack.pop() {
                    self.on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                self.out.push(comp);
            }
        }
    }

    let n = gamma.len();
    let mut t = Tarjan {
        g: gamma,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if t.index[v].is_none() {
            t.visit(v);
        }
    }
    t.out
}

pub fn classify_connectivity(gamma: &ConnectivityMatrix) -> Connectivity {
    let n = gamma.len();
    if n <= 1 {
        return Connectivity::StronglyConnected;
    }
    if strongly_connected_components(gamma).len() == 1 {
        return Connectivity::StronglyConnected;
    }
    // undirected closure
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for w in 0..n {
            if !seen[w] && (gamma.has_edge(v, w) || gamma.has_edge(w, v)) {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    if seen.iter().all(|&s| s) {
        Connectivity::WeaklyConnected
    } else {
        Connectivity::Disconnected
    }
}

/// Ordering of agents together with the diagonal block boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockOrder {
    /// `perm[k]` is the original index placed at position `k`.
    pub perm: Vec<usize>,
    /// Sizes of consecutive diagonal blocks in `perm`.
    pub blocks: Vec<usize>,
}

/// Re-indexing that renders the matrix upper block-triangular with every
/// diagonal block either zero or irreducible.
pub fn block_triangular_order(gamma: &ConnectivityMatrix) -> BlockOrder {
    // Tarjan emits a component after everything it depends on; upper
    // triangular form needs dependents first.
    let mut comps = strongly_connected_components(gamma);
    comps.reverse();
    BlockOrder {
        perm: comps.iter().flatten().copied().collect(),
        blocks: comps.iter().map(Vec::len).collect(),
    }
}

/// True iff the (square) matrix is irreducible: every index reaches every
/// other along non-zero entries. A 1x1 block counts as irreducible only
/// when its entry is non-zero.
pub fn is_irreducible(gamma: &ConnectivityMatrix) -> bool {
    match gamma.len() {
        0 => false,
        1 => gamma.has_edge(0, 0),
        _ => strongly_connected_components(gamma).len() == 1,
    }
}
