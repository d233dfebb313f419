//! Exact Wasserstein-1 distances on small finite spaces.
//!
//! The transport problem `min sum_ij c_ij f_ij` subject to row sums `p` and
//! column sums `q` is solved as a min-cost flow with successive shortest
//! augmenting paths (Bellman-Ford on the residual graph).

use crate::dist::FiniteDistribution;
use crate::error::{Error, Result};

/// Largest support handled by the LP solver.
pub const MAX_LP_SUPPORT: usize = 64;

const EPS: f64 = 1e-15;

/// Symmetric non-negative cost matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: costs.len(),
            });
        }
        let m = Self { n, costs };
        for i in 0..n {
            if m.cost(i, i) != 0.0 {
                return Err(Error::invalid("metric diagonal must be zero"));
            }
            for j in 0..n {
                let c = m.cost(i, j);
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::invalid("metric entries must be finite and >= 0"));
                }
                if (c - m.cost(j, i)).abs() > 1e-12 {
                    return Err(Error::invalid("metric must be symmetric"));
                }
            }
        }
        Ok(m)
    }

    /// `d(i, j) = 1{i != j}`.
    pub fn zero_one(n: usize) -> Self {
        let costs = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 1.0 })
            .collect();
        Self { n, costs }
    }

    /// `d(i, j) = |i - j|`.
    pub fn line(n: usize) -> Self {
        let costs = (0..n * n)
            .map(|k| (k / n).abs_diff(k % n) as f64)
            .collect();
        Self { n, costs }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.n + j]
    }

    pub fn satisfies_triangle_inequality(&self) -> bool {
        let n = self.n;
        (0..n).all(|i| {
            (0..n).all(|j| (0..n).all(|k| self.cost(i, j) <= self.cost(i, k) + self.cost(k, j) + 1e-12))
        })
    }
}

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    }

    /// Returns (flow, cost) of a min-cost flow of value up to `target`.
    fn min_cost_flow(&mut self, source: usize, sink: usize, target: f64) -> (f64, f64) {
        let nodes = self.adj.len();
        let mut flow = 0.0;
        let mut total = 0.0;
        while target - flow > EPS {
            let mut dist = vec![f64::INFINITY; nodes];
            let mut prev = vec![usize::MAX; nodes];
            dist[source] = 0.0;
            // Bellman-Ford; residual costs may be negative but no negative cycles exist
            for _ in 0..nodes {
                let mut changed = false;
                for u in 0..nodes {
                    if !dist[u].is_finite() {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        let edge = &self.edges[e];
                        if edge.cap > EPS && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                            dist[edge.to] = dist[u] + edge.cost;
                            prev[edge.to] = e;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if !dist[sink].is_finite() {
                break;
            }
            let mut push = target - flow;
            let mut v = sink;
            while v != source {
                let e = prev[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let e = prev[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                total += push * self.edges[e].cost;
                v = self.edges[e ^ 1].to;
            }
            flow += push;
        }
        (flow, total)
    }
}

/// `W1(p, q)` under `metric`, solved exactly as a transport LP.
pub fn wasserstein1(
    p: &FiniteDistribution,
    q: &FiniteDistribution,
    metric: &CostMatrix,
) -> Result<f64> {
    let n = p.len();
    if q.len() != n || metric.size() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: if q.len() != n { q.len() } else { metric.size() },
        });
    }
    if n > MAX_LP_SUPPORT {
        return Err(Error::invalid(format!(
            "transport LP supports at most {MAX_LP_SUPPORT} outcomes, got {n}"
        )));
    }
    let source = 2 * n;
    let sink = 2 * n + 1;
    let mut g = FlowGraph::new(2 * n + 2);
    for i in 0..n {
        g.add_edge(source, i, p.get(i), 0.0);
        g.add_edge(n + i, sink, q.get(i), 0.0);
    }
    for i in 0..n {
        for j in 0..n {
            g.add_edge(i, n + j, f64::INFINITY, metric.cost(i, j));
        }
    }
    let target = p.mass().min(q.mass());
    let (_, cost) = g.min_cost_flow(source, sink, target);
    Ok(cost.max(0.0))
}
