//! Parameters, sessions and the layers the networks are assembled from.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::ConvGeometry;
use super::graph::{BatchNormMode, Gradients, Graph, Var};
use super::sparse::CsrMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are not trainable.
    pub trainable: bool,
}

/// Named tensors owned by one network: trainable parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub(crate) fn value_mut_by_index(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Ids of trainable entries, in insertion order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces all values, checking names and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, network expects {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter_mut().zip(values) {
            if e.name != name || e.value.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds one network's parameters into a graph for a single forward pass.
pub struct Session<'g> {
    graph: &'g Graph,
    vars: Vec<Option<Var>>,
    mode: Mode,
    track_stats: bool,
    pending: RefCell<Vec<(ParamId, Vec<f64>)>>,
}

impl<'g> Session<'g> {
    /// Parameters become gradient-receiving leaves; batch-norm running
    /// statistics are updated in train mode.
    pub fn trainable(graph: &'g Graph, store: &ParamStore, mode: Mode) -> Self {
        Self::bind(graph, store, mode, true)
    }

    /// Parameters become constants; running statistics are left untouched.
    pub fn frozen(graph: &'g Graph, store: &ParamStore, mode: Mode) -> Self {
        Self::bind(graph, store, mode, false)
    }

    fn bind(graph: &'g Graph, store: &ParamStore, mode: Mode, trainable: bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| e.trainable.then(|| graph.leaf(e.value.clone(), trainable)))
            .collect();
        Self {
            graph,
            vars,
            mode,
            track_stats: trainable,
            pending: RefCell::default(),
        }
    }

    /// Uses caller-provided vars for the trainable entries (in
    /// [`ParamStore::trainable_ids`] order); never updates running statistics.
    pub fn from_vars(graph: &'g Graph, store: &ParamStore, vars: &[Var], mode: Mode) -> Result<Self> {
        let mut it = vars.iter();
        let mut bound = Vec::with_capacity(store.len());
        for e in &store.entries {
            if e.trainable {
                let v = it.next().ok_or_else(|| {
                    Error::Config(format!("no var supplied for parameter `{}`", e.name))
                })?;
                bound.push(Some(*v));
            } else {
                bound.push(None);
            }
        }
        Ok(Self {
            graph,
            vars: bound,
            mode,
            track_stats: false,
            pending: RefCell::default(),
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound as graph vars")
    }

    /// Writes the running statistics gathered during the forward pass.
    pub fn commit_stats(&self, store: &mut ParamStore) {
        for (id, values) in self.pending.borrow_mut().drain(..) {
            store.value_mut(id).data_mut().copy_from_slice(&values);
        }
    }

    /// Gradients aligned with the store's entries (`None` for buffers and
    /// parameters that did not influence the loss).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Uniform samples in `±sqrt(1/fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Fully connected layer applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[in_dim, out_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, &[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.graph();
        let y = g.matmul(x, s.param(self.weight))?;
        g.add(y, s.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * geom.kernel.0 * geom.kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[out_ch, in_ch, geom.kernel.0, geom.kernel.1], fan_in),
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), uniform_init(rng, &[out_ch], fan_in)));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        s.graph()
            .conv2d(x, s.param(self.weight), self.bias.map(|b| s.param(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * geom.kernel.0 * geom.kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[in_ch, out_ch, geom.kernel.0, geom.kernel.1], fan_in),
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), uniform_init(rng, &[out_ch], fan_in)));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        s.graph()
            .conv_transpose2d(x, s.param(self.weight), self.bias.map(|b| s.param(b)), self.geom)
    }
}

/// Batch normalization over channel axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// In tracking train-mode sessions the updated running statistics are
    /// queued on the session; see [`Session::commit_stats`].
    pub fn forward(&self, s: &Session, x: Var, store: &ParamStore) -> Result<Var> {
        let g = s.graph();
        let (gamma, beta) = (s.param(self.gamma), s.param(self.beta));
        match s.mode() {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: self.eps })?;
                if s.track_stats {
                    let stats = stats.expect("train mode returns stats");
                    let m = self.momentum;
                    let blend = |id: ParamId, batch: &[f64]| -> Vec<f64> {
                        store.value(id).data().iter().zip(batch).map(|(r, b)| (1.0 - m) * r + m * b).collect()
                    };
                    let mut pending = s.pending.borrow_mut();
                    pending.push((self.running_mean, blend(self.running_mean, &stats.mean)));
                    pending.push((self.running_var, blend(self.running_var, &stats.var)));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                let (y, _) = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BatchNormMode::Eval {
                        mean: &mean,
                        var: &var,
                        eps: self.eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Symmetric-normalized adjacency with self loops, `D^-1/2 (A + I) D^-1/2`.
pub fn normalized_adjacency(num_nodes: usize, edges: &[(usize, usize)]) -> CsrMatrix {
    let mut degree = vec![1.0; num_nodes];
    for &(u, v) in edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv: Vec<f64> = degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(num_nodes + 2 * edges.len());
    for (i, w) in inv.iter().enumerate() {
        triplets.push((i, i, w * w));
    }
    for &(u, v) in edges {
        let w = inv[u] * inv[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    CsrMatrix::from_triplets(num_nodes, num_nodes, &triplets)
}

/// Spectral graph convolution `Â · H · W` over a precomputed operator.
pub fn gcn_conv(g: &Graph, adjacency: &Rc<CsrMatrix>, h: Var, w: Var) -> Result<Var> {
    let hw = g.matmul(h, w)?;
    g.spmm(Rc::clone(adjacency), hw)
}

/// GCN layer with bias over a fixed topology.
#[derive(Clone, Debug)]
pub struct GcnConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub adjacency: Rc<CsrMatrix>,
}

impl GcnConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        adjacency: Rc<CsrMatrix>,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[in_dim, out_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, &[out_dim], in_dim));
        Self {
            weight,
            bias,
            adjacency,
        }
    }

    pub fn forward(&self, s: &Session, h: Var) -> Result<Var> {
        let g = s.graph();
        let y = gcn_conv(g, &self.adjacency, h, s.param(self.weight))?;
        g.add(y, s.param(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalized_adjacency_preserves_ones_on_regular_graph() {
        // K4 is 3-regular.
        let edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let a = normalized_adjacency(4, &edges);
        let mut y = vec![0.0; 4];
        a.apply(&[1.0; 4], 1, &mut y);
        for v in y {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn edgeless_gcn_is_plain_linear_map() {
        let adj = Rc::new(normalized_adjacency(3, &[]));
        let g = Graph::new();
        let h = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
        let y = gcn_conv(&g, &adj, h, w).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn batchnorm_updates_running_stats_only_when_tracking() {
        let mut store = ParamStore::default();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        {
            let g = Graph::new();
            let s = Session::frozen(&g, &store, Mode::Train);
            let xv = g.constant(x.clone());
            bn.forward(&s, xv, &store).unwrap();
            s.commit_stats(&mut store);
        }
        assert_eq!(store.value(bn.running_mean).data(), &[0.0]);
        let g = Graph::new();
        let s = Session::trainable(&g, &store, Mode::Train);
        let xv = g.constant(x);
        bn.forward(&s, xv, &store).unwrap();
        s.commit_stats(&mut store);
        assert!((store.value(bn.running_mean).item() - 0.2).abs() < 1e-15);
        // unbiased var of {1,3} = 2 -> 0.9 * 1 + 0.1 * 2
        assert!((store.value(bn.running_var).item() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta = uniform_init(&mut a, &[10, 10], 25);
        assert_eq!(ta, uniform_init(&mut b, &[10, 10], 25));
        assert!(ta.max_abs() <= 0.2);
    }
}
