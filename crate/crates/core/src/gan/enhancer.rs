use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::check_widths;
use crate::autodiff::nn::{normalized_adjacency, BatchNorm, Linear};
use crate::autodiff::{CsrMatrix, ParamStore, Session, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    /// Branch count of each cascade level.
    pub cascade: Vec<usize>,
    pub target_vertices: usize,
    /// Descriptor width `d`; nodes carry `3 + d` features at every level.
    pub feature_dim: usize,
    /// Hidden widths of the per-node coordinate reconstructor.
    pub reconstructor_widths: Vec<usize>,
    /// Replicate nodes when the cascade yields fewer than the target.
    #[serde(default)]
    pub allow_pad: bool,
    /// Batch normalization between the reconstructor layers.
    #[serde(default)]
    pub batch_norm: bool,
}

impl EnhancerConfig {
    /// 224 coarse vertices through 5 then 8 branches, trimmed to 7907.
    pub fn dome() -> Self {
        Self {
            cascade: vec![5, 8],
            target_vertices: 7907,
            feature_dim: 221,
            reconstructor_widths: vec![64, 64, 64, 64],
            allow_pad: false,
            batch_norm: false,
        }
    }

    /// 224 coarse vertices through 3 branches, padded to 778.
    pub fn freihand() -> Self {
        Self {
            cascade: vec![3],
            target_vertices: 778,
            feature_dim: 221,
            reconstructor_widths: vec![64, 64, 64, 64],
            allow_pad: true,
            batch_norm: false,
        }
    }

    pub fn node_width(&self) -> usize {
        3 + self.feature_dim
    }

    /// Node count after the whole cascade, before trimming or padding.
    pub fn expanded(&self, coarse: usize) -> usize {
        self.cascade.iter().fold(coarse, |n, &b| n * b)
    }

    pub fn validate(&self, coarse: usize) -> Result<()> {
        check_widths("cascade", &self.cascade)?;
        check_widths("reconstructor", &self.reconstructor_widths)?;
        if self.target_vertices == 0 || coarse == 0 {
            return Err(Error::Config("enhancer vertex counts must be positive".into()));
        }
        let total = self.expanded(coarse);
        if total < self.target_vertices && !self.allow_pad {
            return Err(Error::Config(format!(
                "cascade {:?} expands {coarse} nodes to {total}, below the target {} (set allow_pad to replicate)",
                self.cascade, self.target_vertices
            )));
        }
        Ok(())
    }
}

/// Node selection that maps the expanded node list onto exactly `target`
/// nodes: a prefix when over, cyclic replication when under.
pub fn count_adapter(expanded: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i % expanded).collect()
}

/// Child `k * N + i` is branch `k`'s copy of parent `i`; children of
/// adjacent parents are adjacent.
pub fn expand_edges(num_nodes: usize, edges: &[(usize, usize)], branches: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(edges.len() * branches * branches);
    for &(u, v) in edges {
        for a in 0..branches {
            for b in 0..branches {
                out.push((a * num_nodes + u, b * num_nodes + v));
            }
        }
    }
    out
}

/// Fixed fine-vertex order for the enhancer outputs: `order[k]` is the fine
/// vertex that output `k` is trained to reach. Minimizes the total distance
/// from each output's coarse ancestor to its assigned fine vertex, so the
/// predicted offsets stay local. Computed once on the template.
pub fn target_order(ancestors: &[usize], coarse: &crate::mesh::Mesh, fine: &crate::mesh::Mesh) -> Result<Vec<usize>> {
    let r = fine.num_vertices();
    if ancestors.len() != r {
        return Err(Error::Topology(format!(
            "enhancer emits {} vertices, fine mesh has {r}",
            ancestors.len()
        )));
    }
    if let Some(&a) = ancestors.iter().find(|&&a| a >= coarse.num_vertices()) {
        return Err(Error::Topology(format!("ancestor {a} outside the coarse mesh")));
    }
    let (cv, fv) = (coarse.vertices(), fine.vertices());
    // Integer micrometres; the solver maximizes, so negate.
    let weights = pathfinding::matrix::Matrix::from_fn(r, r, |(k, j)| {
        -(crate::mesh::norm(crate::mesh::sub(cv[ancestors[k]], fv[j])) * 1e3).round() as i64
    });
    Ok(pathfinding::kuhn_munkres::kuhn_munkres(&weights).1)
}

#[derive(Clone, Debug)]
struct Level {
    adjacency: Rc<CsrMatrix>,
    branches: Vec<Linear>,
}

/// Cascade of multi-branch GCN upsampling modules and a coordinate
/// reconstructor. Every child starts from its parent's features plus a
/// branch-specific graph convolution; final positions are the coarse
/// ancestor's position plus a predicted offset.
#[derive(Clone, Debug)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    coarse_vertices: usize,
    levels: Vec<Level>,
    selection: Rc<[usize]>,
    ancestors: Rc<[usize]>,
    hidden: Vec<(Linear, Option<BatchNorm>)>,
    out: Linear,
}

impl Enhancer {
    pub fn build(
        config: &EnhancerConfig,
        coarse_vertices: usize,
        coarse_edges: &[(usize, usize)],
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        config.validate(coarse_vertices)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let f = config.node_width();
        let mut n = coarse_vertices;
        let mut edges = coarse_edges.to_vec();
        let mut levels = Vec::new();
        for (li, &b) in config.cascade.iter().enumerate() {
            let adjacency = Rc::new(normalized_adjacency(n, &edges));
            let branches = (0..b)
                .map(|k| Linear::new(&mut store, &format!("enh.l{li}.b{k}"), f, f, &mut rng))
                .collect();
            levels.push(Level { adjacency, branches });
            if li + 1 < config.cascade.len() {
                edges = expand_edges(n, &edges, b);
            }
            n *= b;
        }
        let selection: Rc<[usize]> = count_adapter(n, config.target_vertices).into();
        let ancestors: Rc<[usize]> = selection.iter().map(|&i| i % coarse_vertices).collect();
        let mut hidden = Vec::new();
        let mut w_in = f;
        for (i, &w) in config.reconstructor_widths.iter().enumerate() {
            let lin = Linear::new(&mut store, &format!("enh.rec{i}"), w_in, w, &mut rng);
            let bn = config.batch_norm.then(|| BatchNorm::new(&mut store, &format!("enh.rec{i}.bn"), w));
            hidden.push((lin, bn));
            w_in = w;
        }
        let out = Linear::new(&mut store, "enh.rec_out", w_in, 3, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                coarse_vertices,
                levels,
                selection,
                ancestors,
                hidden,
                out,
            },
            store,
        ))
    }

    pub fn output_vertices(&self) -> usize {
        self.selection.len()
    }

    /// Coarse node each output node descends from.
    pub fn ancestors(&self) -> &[usize] {
        &self.ancestors
    }

    /// `[B, N0, 3 + d]` node features (positions first) to `[B, R, 3]`.
    pub fn forward(&self, s: &Session, store: &ParamStore, nodes: Var) -> Result<Var> {
        let g = s.graph();
        let shape = g.shape(nodes);
        let f = self.config.node_width();
        if shape.len() != 3 || shape[1..] != [self.coarse_vertices, f] {
            return Err(Error::Shape {
                op: "enhancer",
                lhs: shape,
                rhs: vec![self.coarse_vertices, f],
            });
        }
        let b = shape[0];
        let positions = g.slice(nodes, 2, 0, 3)?;
        let mut h = nodes;
        for level in &self.levels {
            let children = level
                .branches
                .iter()
                .map(|lin| {
                    let hw = g.matmul(h, s.param(lin.weight))?;
                    let prop = g.add(g.spmm(level.adjacency.clone(), hw)?, s.param(lin.bias))?;
                    g.add(h, prop)
                })
                .collect::<Result<Vec<_>>>()?;
            h = g.concat(&children, 1)?;
        }
        let h = g.gather_rows(h, self.selection.clone())?;
        let r = self.selection.len();
        let mut z = g.reshape(h, &[b * r, f])?;
        for (lin, bn) in &self.hidden {
            z = lin.forward(s, z)?;
            if let Some(bn) = bn {
                z = bn.forward(s, z, store)?;
            }
            z = g.relu(z);
        }
        let offset = g.reshape(self.out.forward(s, z)?, &[b, r, 3])?;
        let base = g.gather_rows(positions, self.ancestors.clone())?;
        g.add(base, offset)
    }
}
