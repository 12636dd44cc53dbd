//! Weighted digraph induced by a channel set, its strongly connected
//! components, and the Laplacian objects `L = D - A` with left null vector γ.
//!
//! Edge `(r, q)` means information flows from transmitter `q` to receiver `r`;
//! its weight is the summed path gain of the channel `H_rq(0)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::NetworkModel;
use crate::linalg::{null_space, Matrix, NullSpace};

/// Entries of γ below this fraction of `max |γ|` are set to zero.
pub const GAMMA_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge {receiver}<-{transmitter} is a self-loop")]
    SelfLoop { receiver: usize, transmitter: usize },
    #[error("edge {receiver}<-{transmitter} references a node outside 0..{nodes}")]
    InvalidNode {
        receiver: usize,
        transmitter: usize,
        nodes: usize,
    },
    #[error("edge {receiver}<-{transmitter} has non-finite weight")]
    NonFinite { receiver: usize, transmitter: usize },
    #[error("digraph is not quasi-strongly connected ({} components, no root)", .0.components.len())]
    NotQsc(SccDecomposition),
    #[error("root component Laplacian has nullity {0}, expected 1")]
    Degenerate(usize),
    #[error("left null vector sums to zero; weights are too far from admissible")]
    ZeroGammaSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub receiver: usize,
    pub transmitter: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Digraph {
    nodes: usize,
    edges: Vec<Edge>,
    /// For each node, the receivers it transmits to.
    out: Vec<Vec<usize>>,
}

impl Digraph {
    pub fn from_edges(nodes: usize, mut edges: Vec<Edge>) -> Result<Self, GraphError> {
        for e in &edges {
            if e.receiver == e.transmitter {
                return Err(GraphError::SelfLoop {
                    receiver: e.receiver,
                    transmitter: e.transmitter,
                });
            }
            if e.receiver >= nodes || e.transmitter >= nodes {
                return Err(GraphError::InvalidNode {
                    receiver: e.receiver,
                    transmitter: e.transmitter,
                    nodes,
                });
            }
            if !e.weight.is_finite() {
                return Err(GraphError::NonFinite {
                    receiver: e.receiver,
                    transmitter: e.transmitter,
                });
            }
        }
        edges.sort_by_key(|e| (e.receiver, e.transmitter));
        edges.dedup_by_key(|e| (e.receiver, e.transmitter));
        let mut out = vec![Vec::new(); nodes];
        for e in &edges {
            out[e.transmitter].push(e.receiver);
        }
        Ok(Self { nodes, edges, out })
    }

    /// Unit-weight digraph from `(transmitter, receiver)` arcs.
    pub fn from_arcs(nodes: usize, arcs: &[(usize, usize)]) -> Result<Self, GraphError> {
        Self::from_edges(
            nodes,
            arcs.iter()
                .map(|&(from, to)| Edge {
                    receiver: to,
                    transmitter: from,
                    weight: 1.0,
                })
                .collect(),
        )
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Receivers directly fed by `node`.
    pub fn successors(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    /// Edges with non-positive weight (permitted, but outside the admissible
    /// channel class).
    pub fn nonpositive_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.weight <= 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                weight: e.weight * factor,
                ..*e
            })
            .collect();
        Self {
            nodes: self.nodes,
            edges,
            out: self.out.clone(),
        }
    }
}

/// Adjacency from summed path amplitudes; one edge per channel.
pub fn build_digraph(network: &NetworkModel) -> Digraph {
    let edges = network
        .channels()
        .iter()
        .map(|c| Edge {
            receiver: c.receiver(),
            transmitter: c.transmitter(),
            weight: c.dc_gain(),
        })
        .collect();
    Digraph::from_edges(network.nodes(), edges).expect("network channels are validated on construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SccDecomposition {
    pub component_of: Vec<usize>,
    /// Node sets, numbered in order of their smallest member.
    pub components: Vec<Vec<usize>>,
    /// `(from, to)` component pairs, deduplicated and sorted.
    pub condensation_edges: Vec<(usize, usize)>,
    pub root_component: Option<usize>,
}

impl SccDecomposition {
    pub fn root_nodes(&self) -> Option<&[usize]> {
        self.root_component.map(|c| self.components[c].as_slice())
    }
}

/// Tarjan's algorithm, iterative to avoid deep recursion.
fn tarjan(g: &Digraph) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let n = g.nodes();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0;
    let mut out = Vec::new();
    // (node, next successor position)
    let mut call: Vec<(usize, usize)> = Vec::new();

    for start in 0..n {
        if index[start] != UNVISITED {
            continue;
        }
        call.push((start, 0));
        index[start] = next;
        low[start] = next;
        next += 1;
        stack.push(start);
        on_stack[start] = true;

        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if let Some(&w) = g.successors(v).get(*pos) {
                *pos += 1;
                if index[w] == UNVISITED {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                out.push(comp);
            }
        }
    }
    out
}

pub fn scc_decompose(g: &Digraph) -> SccDecomposition {
    let mut components = tarjan(g);
    components.sort_by_key(|c| c[0]);
    let mut component_of = vec![0; g.nodes()];
    for (id, comp) in components.iter().enumerate() {
        for &v in comp {
            component_of[v] = id;
        }
    }
    let mut condensation_edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .map(|e| (component_of[e.transmitter], component_of[e.receiver]))
        .filter(|(a, b)| a != b)
        .collect();
    condensation_edges.sort_unstable();
    condensation_edges.dedup();

    let k = components.len();
    let mut indeg = vec![0usize; k];
    let mut succ = vec![Vec::new(); k];
    for &(a, b) in &condensation_edges {
        indeg[b] += 1;
        succ[a].push(b);
    }
    let sources: Vec<usize> = (0..k).filter(|&c| indeg[c] == 0).collect();
    let root_component = match sources.as_slice() {
        [only] => {
            let mut seen = vec![false; k];
            let mut todo = vec![*only];
            seen[*only] = true;
            while let Some(c) = todo.pop() {
                for &d in &succ[c] {
                    if !seen[d] {
                        seen[d] = true;
                        todo.push(d);
                    }
                }
            }
            seen.iter().all(|&s| s).then_some(*only)
        }
        _ => None,
    };

    SccDecomposition {
        component_of,
        components,
        condensation_edges,
        root_component,
    }
}

/// Quasi-strongly connected: some node reaches every other node.
pub fn is_qsc(g: &Digraph) -> bool {
    scc_decompose(g).root_component.is_some()
}

pub fn is_sc(g: &Digraph) -> bool {
    scc_decompose(g).components.len() == 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianBundle {
    pub adjacency: Matrix,
    pub in_degree: Vec<f64>,
    pub laplacian: Matrix,
    /// Left null vector of the Laplacian, normalized to unit sum.
    pub gamma: Vec<f64>,
    pub scc: SccDecomposition,
}

impl LaplacianBundle {
    /// `‖γᵀL‖_∞`.
    pub fn gamma_residual(&self) -> f64 {
        self.laplacian
            .left_mul(&self.gamma)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Adjacency, in-degree diagonal and Laplacian, without γ.
pub fn laplacian_matrices(g: &Digraph) -> (Matrix, Vec<f64>, Matrix) {
    let n = g.nodes();
    let mut adjacency = Matrix::zeros(n, n);
    for e in g.edges() {
        adjacency.set(e.receiver, e.transmitter, e.weight);
    }
    let in_degree: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
    let laplacian = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            in_degree[i] - adjacency.get(i, j)
        } else {
            -adjacency.get(i, j)
        }
    });
    (adjacency, in_degree, laplacian)
}

/// Builds the Laplacian bundle. γ is solved on the root SCC only (that block
/// has no inputs from outside) and embedded with zeros elsewhere.
pub fn laplacian(g: &Digraph) -> Result<LaplacianBundle, GraphError> {
    let scc = scc_decompose(g);
    let root: Vec<usize> = match scc.root_nodes() {
        Some(r) => r.to_vec(),
        None => return Err(GraphError::NotQsc(scc)),
    };
    let (adjacency, in_degree, laplacian) = laplacian_matrices(g);

    let m = root.len();
    let restricted_t = Matrix::from_fn(m, m, |i, j| laplacian.get(root[j], root[i]));
    let local = match null_space(&restricted_t) {
        NullSpace::Simple(v) => v,
        NullSpace::Trivial => return Err(GraphError::Degenerate(0)),
        NullSpace::Degenerate(k) => return Err(GraphError::Degenerate(k)),
    };

    let mut gamma = vec![0.0; g.nodes()];
    for (k, &node) in root.iter().enumerate() {
        gamma[node] = local[k];
    }
    let sum: f64 = gamma.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(GraphError::ZeroGammaSum);
    }
    gamma.iter_mut().for_each(|v| *v /= sum);
    let max = gamma.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for v in gamma.iter_mut() {
        if v.abs() < GAMMA_CLAMP * max {
            *v = 0.0;
        }
    }
    let sum: f64 = gamma.iter().sum();
    gamma.iter_mut().for_each(|v| *v /= sum);

    Ok(LaplacianBundle {
        adjacency,
        in_degree,
        laplacian,
        gamma,
        scc,
    })
}
