//! The composite mesh loss: position, descriptor, normal, Laplacian and
//! quadric terms, all differentiable through [`Graph`].

mod quadric;

pub use quadric::{quadric_of_vertex, vertex_quadrics, QuadricForm};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CsrMatrix, Graph, Var};
use crate::error::{Error, Result};
use crate::mesh::{AttributedGraph, KeypointMap, Mesh};
use crate::tensor::Tensor;

/// Relative weights of the loss terms and of reconstruction against the
/// adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub theta: f64,
    pub gamma: f64,
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 1.0,
            theta: 1.0,
            gamma: 1.0,
            phi: 1.0,
            alpha: 1.0,
            beta: 1.0,
            delta: 10.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        lambda: 0.0,
        mu: 0.0,
        theta: 0.0,
        gamma: 0.0,
        phi: 0.0,
        alpha: 0.0,
        beta: 0.0,
        delta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("theta", self.theta),
            ("gamma", self.gamma),
            ("phi", self.phi),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta", self.delta),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalVariant {
    /// `sum(1 - dot^2)`: zero when corresponding normals are parallel.
    #[default]
    Parallel,
    /// `sum(dot^2)`, the literal formula.
    AsWritten,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub normal_variant: NormalVariant,
    /// Ring radius of keypoint neighborhoods.
    pub keypoint_ring: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            normal_variant: NormalVariant::Parallel,
            keypoint_ring: 3,
        }
    }
}

/// Row `r` of the operator is `e_i - mean(e_k, k in N_i)` for the `r`-th
/// `(i, N_i)`; an empty `N_i` leaves just `e_i`.
pub fn laplacian_operator(num_nodes: usize, rows: &[(usize, Vec<usize>)]) -> Result<CsrMatrix> {
    let mut triplets = Vec::new();
    for (r, (i, hood)) in rows.iter().enumerate() {
        if let Some(&bad) = hood.iter().chain(std::iter::once(i)).find(|&&k| k >= num_nodes) {
            return Err(Error::Range {
                index: bad,
                len: num_nodes,
            });
        }
        triplets.push((r, *i, 1.0));
        let w = 1.0 / hood.len().max(1) as f64;
        triplets.extend(hood.iter().map(|&k| (r, k, -w)));
    }
    Ok(CsrMatrix::from_triplets(rows.len(), num_nodes, &triplets))
}

/// Everything the loss needs that depends only on the shared topology.
#[derive(Clone, Debug)]
pub struct LossTopology {
    num_vertices: usize,
    faces: Vec<[usize; 3]>,
    corners: [Rc<[usize]>; 3],
    vertex_laplacian: Rc<CsrMatrix>,
    keypoint_laplacian: Rc<CsrMatrix>,
    pub config: LossConfig,
}

impl LossTopology {
    pub fn new(template: &Mesh, keypoints: &KeypointMap, config: LossConfig) -> Result<Self> {
        keypoints.validate_for(template.num_vertices())?;
        let graph = AttributedGraph::from_mesh(template, None)?;
        let n = template.num_vertices();
        let vertex_rows: Vec<_> = (0..n)
            .map(|i| Ok((i, graph.neighbors(i)?.to_vec())))
            .collect::<Result<_>>()?;
        let keypoint_rows: Vec<_> = keypoints
            .indices()
            .iter()
            .map(|&i| Ok((i, graph.k_ring(i, config.keypoint_ring)?)))
            .collect::<Result<_>>()?;
        let faces = template.faces().to_vec();
        let corners = std::array::from_fn(|k| faces.iter().map(|f| f[k]).collect::<Rc<[usize]>>());
        Ok(Self {
            num_vertices: n,
            faces,
            corners,
            vertex_laplacian: Rc::new(laplacian_operator(n, &vertex_rows)?),
            keypoint_laplacian: Rc::new(laplacian_operator(n, &keypoint_rows)?),
            config,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Unit face normals of `[B, N, 3]` positions, `[B, M, 3]`.
    pub fn face_normals(&self, g: &Graph, pos: Var) -> Result<Var> {
        let [a, b, c] = self.corners.clone().map(|idx| g.gather_rows(pos, idx));
        let (a, b, c) = (a?, b?, c?);
        let n = g.cross3(g.sub(b, a)?, g.sub(c, a)?)?;
        g.normalize_rows(n)
    }
}

/// Groundtruth quantities for a batch of `B` samples sharing one topology.
#[derive(Clone, Debug)]
pub struct LossTarget {
    batch: usize,
    positions: Tensor,
    shot: Option<Tensor>,
    normals: Tensor,
    normal_mask: Tensor,
    quadrics: Rc<[QuadricForm]>,
    /// `(sample, vertex)` pairs without a non-degenerate incident face.
    pub isolated: Vec<(usize, usize)>,
}

impl LossTarget {
    pub fn new(gt: &Mesh, shot: Option<&Tensor>) -> Result<Self> {
        Self::batch(&[(gt, shot)])
    }

    pub fn batch(samples: &[(&Mesh, Option<&Tensor>)]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Config("empty loss batch".into()))?.0;
        let (n, m) = (first.num_vertices(), first.num_faces());
        let with_shot = samples[0].1.is_some();
        let mut positions = Vec::with_capacity(samples.len() * n * 3);
        let mut shots: Vec<&Tensor> = Vec::new();
        let mut normals = Vec::with_capacity(samples.len() * m * 3);
        let mut mask = Vec::with_capacity(samples.len() * m);
        let mut quadrics = Vec::with_capacity(samples.len() * n);
        let mut isolated = Vec::new();
        for (si, (mesh, shot)) in samples.iter().enumerate() {
            if mesh.faces() != first.faces() || mesh.num_vertices() != n {
                return Err(Error::Topology(format!("batch sample {si} has a different topology")));
            }
            positions.extend(mesh.positions().into_data());
            match (shot, with_shot) {
                (Some(s), true) => {
                    if s.rank() != 2 || s.shape()[0] != n || s.shape() != samples[0].1.unwrap().shape() {
                        return Err(Error::Shape {
                            op: "loss_target",
                            lhs: s.shape().to_vec(),
                            rhs: vec![n, samples[0].1.unwrap().shape().get(1).copied().unwrap_or(0)],
                        });
                    }
                    shots.push(*s);
                }
                (None, false) => {}
                _ => return Err(Error::Config("descriptor fields must be given for all samples or none".into())),
            }
            let fnorm = mesh.face_normals();
            let mut m_row = vec![1.0; m];
            for &d in &fnorm.degenerate {
                m_row[d] = 0.0;
            }
            normals.extend(fnorm.normals.iter().flatten());
            mask.extend(m_row);
            let (forms, iso) = vertex_quadrics(mesh);
            quadrics.extend(forms);
            isolated.extend(iso.into_iter().map(|v| (si, v)));
        }
        let b = samples.len();
        Ok(Self {
            batch: b,
            positions: Tensor::new(vec![b, n, 3], positions)?,
            shot: if with_shot { Some(Tensor::stack(&shots)?) } else { None },
            normals: Tensor::new(vec![b, m, 3], normals)?,
            normal_mask: Tensor::new(vec![b, m], mask)?,
            quadrics: quadrics.into(),
            isolated,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn shot(&self) -> Option<&Tensor> {
        self.shot.as_ref()
    }
}

/// Unweighted per-sample-mean values of each term, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pos: f64,
    pub shot: f64,
    pub normal: f64,
    pub vertex_laplacian: f64,
    pub keypoint_laplacian: f64,
    pub laplacian: f64,
    pub quadratic: f64,
    pub total: f64,
}

fn as_batched(g: &Graph, v: Var, shape: &[usize], what: &'static str) -> Result<Var> {
    let s = g.shape(v);
    if s == shape {
        return Ok(v);
    }
    if shape[0] == 1 && s == shape[1..] {
        return g.reshape(v, shape);
    }
    Err(Error::Shape {
        op: what,
        lhs: s,
        rhs: shape.to_vec(),
    })
}

/// Sum of absolute coordinate differences.
pub fn position_term(g: &Graph, pred: Var, target: &LossTarget) -> Result<Var> {
    let pred = as_batched(g, pred, target.positions.shape(), "l_pos")?;
    let gt = g.constant(target.positions.clone());
    Ok(g.l1_norm(g.sub(pred, gt)?))
}

/// Sum of absolute descriptor differences.
pub fn shot_term(g: &Graph, pred: Var, target: &LossTarget) -> Result<Var> {
    let gt = target
        .shot
        .as_ref()
        .ok_or_else(|| Error::Config("descriptor term needs groundtruth fields".into()))?;
    let pred = as_batched(g, pred, gt.shape(), "l_shot")?;
    let gt = g.constant(gt.clone());
    Ok(g.l1_norm(g.sub(pred, gt)?))
}

/// Normal agreement over non-degenerate groundtruth faces.
pub fn normal_term(g: &Graph, pred: Var, target: &LossTarget, topo: &LossTopology) -> Result<Var> {
    let pred = as_batched(g, pred, target.positions.shape(), "l_normal")?;
    let n = topo.face_normals(g, pred)?;
    let gt = g.constant(target.normals.clone());
    let d = g.sum_last_axis(g.mul(n, gt)?)?;
    let mask = g.constant(target.normal_mask.clone());
    let masked_sq = g.sum(g.mul(g.mul(d, d)?, mask)?);
    Ok(match topo.config.normal_variant {
        NormalVariant::AsWritten => masked_sq,
        NormalVariant::Parallel => {
            let count: f64 = target.normal_mask.data().iter().sum();
            g.add_scalar(g.neg(masked_sq), count)
        }
    })
}

fn laplacian_with(g: &Graph, pred: Var, target: &LossTarget, op: &Rc<CsrMatrix>) -> Result<Var> {
    let pred = as_batched(g, pred, target.positions.shape(), "l_laplacian")?;
    let gt = g.constant(target.positions.clone());
    let omega = g.sub(pred, gt)?;
    Ok(g.l2_norm_sq(g.spmm(op.clone(), omega)?))
}

/// Laplacian error of the offsets over 1-ring neighborhoods of every vertex.
pub fn vertex_laplacian_term(g: &Graph, pred: Var, target: &LossTarget, topo: &LossTopology) -> Result<Var> {
    laplacian_with(g, pred, target, &topo.vertex_laplacian)
}

/// Laplacian error of the offsets at keypoints over their k-rings.
pub fn keypoint_laplacian_term(g: &Graph, pred: Var, target: &LossTarget, topo: &LossTopology) -> Result<Var> {
    laplacian_with(g, pred, target, &topo.keypoint_laplacian)
}

/// Mean groundtruth-quadric error of the predicted vertices.
pub fn quadratic_term(g: &Graph, pred: Var, target: &LossTarget) -> Result<Var> {
    let pred = as_batched(g, pred, target.positions.shape(), "l_quadratic")?;
    let q = g.quadric_eval(pred, target.quadrics.clone())?;
    let n = target.positions.shape()[1].max(1);
    Ok(g.scale(g.sum(q), 1.0 / n as f64))
}

/// Weighted sum of all terms, averaged over the batch. The descriptor term
/// is skipped (zero) when either field is absent.
pub fn composite_loss(
    g: &Graph,
    pred_pos: Var,
    pred_shot: Option<Var>,
    target: &LossTarget,
    topo: &LossTopology,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    if target.positions.shape()[1] != topo.num_vertices {
        return Err(Error::Topology(format!(
            "target has {} vertices, topology {}",
            target.positions.shape()[1],
            topo.num_vertices
        )));
    }
    let inv_b = 1.0 / target.batch as f64;
    let pos = position_term(g, pred_pos, target)?;
    let shot = match (pred_shot, target.shot.is_some()) {
        (Some(s), true) => Some(shot_term(g, s, target)?),
        _ => None,
    };
    let normal = normal_term(g, pred_pos, target, topo)?;
    let vlap = vertex_laplacian_term(g, pred_pos, target, topo)?;
    let klap = keypoint_laplacian_term(g, pred_pos, target, topo)?;
    let quad = quadratic_term(g, pred_pos, target)?;

    let mut parts = vec![g.scale(pos, w.lambda), g.scale(normal, w.theta)];
    if let Some(s) = shot {
        parts.push(g.scale(s, w.mu));
    }
    parts.push(g.scale(vlap, w.gamma * w.alpha));
    parts.push(g.scale(klap, w.gamma * w.beta));
    parts.push(g.scale(quad, w.phi));
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let total = g.scale(total, inv_b);

    let (vl, kl) = (g.scalar(vlap) * inv_b, g.scalar(klap) * inv_b);
    let terms = LossTerms {
        pos: g.scalar(pos) * inv_b,
        shot: shot.map_or(0.0, |s| g.scalar(s) * inv_b),
        normal: g.scalar(normal) * inv_b,
        vertex_laplacian: vl,
        keypoint_laplacian: kl,
        laplacian: w.alpha * vl + w.beta * kl,
        quadratic: g.scalar(quad) * inv_b,
        total: g.scalar(total),
    };
    Ok((total, terms))
}

fn eval_scalar(f: impl FnOnce(&Graph) -> Result<Var>) -> Result<f64> {
    let g = Graph::new();
    let v = f(&g)?;
    Ok(g.scalar(v))
}

fn check_counts(pred: &Mesh, gt: &Mesh) -> Result<()> {
    if pred.num_vertices() != gt.num_vertices() {
        return Err(Error::Topology(format!(
            "pred has {} vertices, gt {}",
            pred.num_vertices(),
            gt.num_vertices()
        )));
    }
    Ok(())
}

pub fn l_pos(pred: &Mesh, gt: &Mesh) -> Result<f64> {
    check_counts(pred, gt)?;
    let target = LossTarget::new(gt, None)?;
    eval_scalar(|g| position_term(g, g.constant(pred.positions()), &target))
}

pub fn l_shot(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "l_shot",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum())
}

pub fn l_normal(pred: &Mesh, gt: &Mesh, variant: NormalVariant) -> Result<f64> {
    check_counts(pred, gt)?;
    if pred.faces() != gt.faces() {
        return Err(Error::Topology("face lists differ".into()));
    }
    let topo = LossTopology::new(
        gt,
        &KeypointMap::new(vec![])?,
        LossConfig {
            normal_variant: variant,
            ..LossConfig::default()
        },
    )?;
    let target = LossTarget::new(gt, None)?;
    eval_scalar(|g| normal_term(g, g.constant(pred.positions()), &target, &topo))
}

/// `sum_i |w_i - mean(w_k, k in N_i)|^2` for the listed `(i, N_i)`.
pub fn laplacian_error(offsets: &Tensor, neighborhoods: &[(usize, Vec<usize>)]) -> Result<f64> {
    if offsets.rank() != 2 || offsets.shape()[1] != 3 {
        return Err(Error::InvalidShape {
            op: "laplacian_error",
            detail: format!("offsets {:?} are not N x 3", offsets.shape()),
        });
    }
    let op = Rc::new(laplacian_operator(offsets.shape()[0], neighborhoods)?);
    eval_scalar(|g| Ok(g.l2_norm_sq(g.spmm(op, g.constant(offsets.clone()))?)))
}

/// `alpha * vertex term + beta * keypoint term` using the graph's 1-rings
/// and `k_ring`-rings around keypoints.
pub fn l_laplacian(
    pred: &Mesh,
    gt: &Mesh,
    graph: &AttributedGraph,
    keypoints: &KeypointMap,
    k_ring: usize,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_counts(pred, gt)?;
    let n = gt.num_vertices();
    let offsets = Tensor::new(
        vec![n, 3],
        pred.positions().data().iter().zip(gt.positions().data()).map(|(p, q)| p - q).collect(),
    )?;
    let vertex_rows: Vec<_> = (0..n).map(|i| Ok((i, graph.neighbors(i)?.to_vec()))).collect::<Result<_>>()?;
    let key_rows: Vec<_> = keypoints
        .indices()
        .iter()
        .map(|&i| Ok((i, graph.k_ring(i, k_ring)?)))
        .collect::<Result<_>>()?;
    Ok(alpha * laplacian_error(&offsets, &vertex_rows)? + beta * laplacian_error(&offsets, &key_rows)?)
}

pub fn l_quadratic(pred: &Mesh, gt: &Mesh) -> Result<f64> {
    check_counts(pred, gt)?;
    let target = LossTarget::new(gt, None)?;
    eval_scalar(|g| quadratic_term(g, g.constant(pred.positions()), &target))
}

/// Composite loss of one predicted mesh (and optional field) against `gt`.
pub fn composite_loss_value(
    pred: &Mesh,
    pred_shot: Option<&Tensor>,
    gt: &Mesh,
    gt_shot: Option<&Tensor>,
    topo: &LossTopology,
    weights: &LossWeights,
) -> Result<LossTerms> {
    check_counts(pred, gt)?;
    let target = LossTarget::new(gt, gt_shot)?;
    let g = Graph::new();
    let shot = pred_shot.map(|s| g.constant(s.clone()));
    let (_, terms) = composite_loss(&g, g.constant(pred.positions()), shot, &target, topo, weights)?;
    Ok(terms)
}
