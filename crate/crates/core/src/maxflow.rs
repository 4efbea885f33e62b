//! Maximum flow on sparse graphs with real capacities (Dinic's algorithm).

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
struct Arc {
    to: usize,
    residual: f64,
}

/// Directed graph whose arcs are stored in forward/reverse pairs
/// (`e` and `e ^ 1`).
#[derive(Clone, Debug, Default)]
pub struct FlowGraph {
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
    max_cap: f64,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        FlowGraph {
            arcs: Vec::new(),
            adj: vec![Vec::new(); nodes],
            max_cap: 0.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds an arc `u -> v` with capacity `cap` and the reverse arc with
    /// capacity `rev_cap` (use equal values for an undirected edge).
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        debug_assert!(cap >= 0.0 && rev_cap >= 0.0);
        let e = self.arcs.len();
        self.arcs.push(Arc {
            to: v,
            residual: cap,
        });
        self.arcs.push(Arc {
            to: u,
            residual: rev_cap,
        });
        self.adj[u].push(e);
        self.adj[v].push(e + 1);
        self.max_cap = self.max_cap.max(cap).max(rev_cap);
    }

    fn eps(&self) -> f64 {
        self.max_cap * 1e-12
    }

    fn levels(&self, s: usize) -> Vec<usize> {
        let eps = self.eps();
        let mut level = vec![usize::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let a = self.arcs[e];
                if a.residual > eps && level[a.to] == usize::MAX {
                    level[a.to] = level[u] + 1;
                    queue.push_back(a.to);
                }
            }
        }
        level
    }

    /// Pushes the maximum flow from `s` to `t` and returns its value. The
    /// graph keeps the residual capacities afterwards.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        if s == t {
            return 0.0;
        }
        let eps = self.eps();
        let mut total = 0.0;
        loop {
            let mut level = self.levels(s);
            if level[t] == usize::MAX {
                return total;
            }
            let mut next = vec![0usize; self.adj.len()];
            let mut path: Vec<usize> = Vec::new();
            let mut u = s;
            loop {
                if u == t {
                    let push = path
                        .iter()
                        .map(|&e| self.arcs[e].residual)
                        .fold(f64::INFINITY, f64::min);
                    for &e in &path {
                        self.arcs[e].residual -= push;
                        self.arcs[e ^ 1].residual += push;
                    }
                    total += push;
                    path.clear();
                    u = s;
                    continue;
                }
                let mut advanced = false;
                while next[u] < self.adj[u].len() {
                    let e = self.adj[u][next[u]];
                    let a = self.arcs[e];
                    if a.residual > eps && level[a.to] == level[u] + 1 {
                        path.push(e);
                        u = a.to;
                        advanced = true;
                        break;
                    }
                    next[u] += 1;
                }
                if advanced {
                    continue;
                }
                if u == s {
                    break;
                }
                // dead end: drop the node from this phase and retreat
                level[u] = usize::MAX;
                let e = path.pop().expect("non-source node has an incoming arc");
                u = self.arcs[e ^ 1].to;
                next[u] += 1;
            }
        }
    }

    /// Nodes reachable from `s` in the residual graph: the source side of a
    /// minimum cut once [`FlowGraph::max_flow`] has run.
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        self.levels(s).iter().map(|&l| l != usize::MAX).collect()
    }
}
