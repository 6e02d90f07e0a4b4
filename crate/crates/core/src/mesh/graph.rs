use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mesh;

/// Undirected edges of a triangle list, each once as `(min, max)`, sorted.
pub fn derive_edges(faces: &[[usize; 3]], num_vertices: usize) -> Result<Vec<(usize, usize)>> {
    let mut set = BTreeSet::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if a >= num_vertices || b >= num_vertices {
                return Err(Error::Topology(format!(
                    "face {fi} index out of range for {num_vertices} vertices"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Nodes, undirected edges and a per-node feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    node_features: Tensor,
}

impl AttributedGraph {
    /// `edges` may list pairs in either orientation but each pair only once.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)], node_features: Tensor) -> Result<Self> {
        if node_features.rank() != 2 || node_features.shape()[0] != num_nodes {
            return Err(Error::InvalidShape {
                op: "attributed_graph",
                detail: format!(
                    "features {:?} do not have {num_nodes} rows",
                    node_features.shape()
                ),
            });
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Range {
                    index: u.max(v),
                    len: num_nodes,
                });
            }
            if u == v {
                return Err(Error::Topology(format!("self-loop at node {u}")));
            }
            if !set.insert((u.min(v), u.max(v))) {
                return Err(Error::Topology(format!("edge ({u},{v}) listed twice")));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Ok(Self {
            num_nodes,
            edges,
            adjacency,
            node_features,
        })
    }

    /// Graph of a mesh; without features the matrix is `N x 0`.
    pub fn from_mesh(mesh: &Mesh, node_features: Option<Tensor>) -> Result<Self> {
        let features = node_features.unwrap_or_else(|| Tensor::zeros(&[mesh.num_vertices(), 0]));
        Self::new(mesh.num_vertices(), &mesh.edges(), features)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    fn check(&self, v: usize) -> Result<()> {
        if v >= self.num_nodes {
            return Err(Error::Range {
                index: v,
                len: self.num_nodes,
            });
        }
        Ok(())
    }

    /// Sorted neighbors sharing an edge with `v`.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        self.check(v)?;
        Ok(&self.adjacency[v])
    }

    /// Nodes at graph distance `1..=k` from `v`, sorted.
    pub fn k_ring(&self, v: usize, k: usize) -> Result<Vec<usize>> {
        self.check(v)?;
        if k == 0 {
            return Err(Error::Config("k-ring radius must be at least 1".into()));
        }
        let mut dist = vec![usize::MAX; self.num_nodes];
        dist[v] = 0;
        let mut queue = VecDeque::from([v]);
        let mut out = Vec::new();
        while let Some(u) = queue.pop_front() {
            if dist[u] == k {
                continue;
            }
            for &w in &self.adjacency[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    out.push(w);
                    queue.push_back(w);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}
