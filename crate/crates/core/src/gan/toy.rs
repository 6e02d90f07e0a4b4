//! Small stand-in networks: affine generators and critics, and a critic
//! pinned at probability one half.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nets::{ImageCritic, ImageToMesh, MeshCritic, MeshToImage};
use crate::autodiff::nn::Linear;
use crate::autodiff::{ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image shape `(C, H, W)` and mesh shape `(N, d)` of an affine toy pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyShape {
    pub image: (usize, usize, usize),
    pub mesh: (usize, usize),
}

impl ToyShape {
    fn image_len(&self) -> usize {
        self.image.0 * self.image.1 * self.image.2
    }

    fn mesh_len(&self) -> usize {
        self.mesh.0 * (3 + self.mesh.1)
    }
}

fn set_identity(store: &mut ParamStore, lin: &Linear) -> Result<()> {
    if lin.in_dim != lin.out_dim {
        return Err(Error::Config(format!(
            "identity toy needs equal widths, got {} -> {}",
            lin.in_dim, lin.out_dim
        )));
    }
    let n = lin.in_dim;
    let w = store.value_mut(lin.weight);
    w.data_mut().iter_mut().for_each(|x| *x = 0.0);
    for i in 0..n {
        w.data_mut()[i * n + i] = 1.0;
    }
    store.value_mut(lin.bias).data_mut().iter_mut().for_each(|x| *x = 0.0);
    Ok(())
}

/// Flattened image -> affine map -> node matrix.
#[derive(Clone, Debug)]
pub struct AffineImageToMesh {
    pub shape: ToyShape,
    pub linear: Linear,
}

impl AffineImageToMesh {
    pub fn build(shape: ToyShape, seed: u64) -> (Self, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Linear::new(&mut store, "toy.gm", shape.image_len(), shape.mesh_len(), &mut rng);
        (Self { shape, linear }, store)
    }

    pub fn identity(shape: ToyShape) -> Result<(Self, ParamStore)> {
        let (net, mut store) = Self::build(shape, 0);
        set_identity(&mut store, &net.linear)?;
        Ok((net, store))
    }
}

impl ImageToMesh for AffineImageToMesh {
    fn forward(&self, s: &Session, _: &ParamStore, images: Var) -> Result<(Var, Var)> {
        let g = s.graph();
        let b = g.shape(images)[0];
        let flat = g.reshape(images, &[b, self.shape.image_len()])?;
        let (n, d) = self.shape.mesh;
        let nodes = g.reshape(self.linear.forward(s, flat)?, &[b, n, 3 + d])?;
        Ok((g.slice(nodes, 2, 0, 3)?, g.slice(nodes, 2, 3, 3 + d)?))
    }
}

/// Node matrix -> affine map -> image.
#[derive(Clone, Debug)]
pub struct AffineMeshToImage {
    pub shape: ToyShape,
    pub linear: Linear,
}

impl AffineMeshToImage {
    pub fn build(shape: ToyShape, seed: u64) -> (Self, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Linear::new(&mut store, "toy.gi", shape.mesh_len(), shape.image_len(), &mut rng);
        (Self { shape, linear }, store)
    }

    pub fn identity(shape: ToyShape) -> Result<(Self, ParamStore)> {
        let (net, mut store) = Self::build(shape, 0);
        set_identity(&mut store, &net.linear)?;
        Ok((net, store))
    }
}

impl MeshToImage for AffineMeshToImage {
    fn forward(&self, s: &Session, _: &ParamStore, positions: Var, fields: Var) -> Result<Var> {
        let g = s.graph();
        let b = g.shape(positions)[0];
        let nodes = g.concat(&[positions, fields], 2)?;
        let flat = g.reshape(nodes, &[b, self.shape.mesh_len()])?;
        let (c, h, w) = self.shape.image;
        g.reshape(self.linear.forward(s, flat)?, &[b, c, h, w])
    }
}

/// Affine critic over the flattened input.
#[derive(Clone, Debug)]
pub struct AffineCritic {
    pub linear: Linear,
}

impl AffineCritic {
    pub fn build(input_len: usize, seed: u64) -> (Self, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Linear::new(&mut store, "toy.critic", input_len, 1, &mut rng);
        (Self { linear }, store)
    }

    fn score(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.graph();
        let b = g.shape(x)[0];
        let numel: usize = g.shape(x).iter().product();
        self.linear.forward(s, g.reshape(x, &[b, numel / b])?)
    }
}

impl MeshCritic for AffineCritic {
    fn logits(&self, s: &Session, _: &ParamStore, positions: Var, fields: Var) -> Result<Var> {
        let nodes = s.graph().concat(&[positions, fields], 2)?;
        self.score(s, nodes)
    }
}

impl ImageCritic for AffineCritic {
    fn logits(&self, s: &Session, _: &ParamStore, images: Var) -> Result<Var> {
        self.score(s, images)
    }
}

/// Outputs logit 0 (probability one half) for every input.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantCritic;

impl ConstantCritic {
    fn zeros(s: &Session, x: Var) -> Var {
        let b = s.graph().shape(x)[0];
        s.graph().constant(Tensor::zeros(&[b, 1]))
    }
}

impl MeshCritic for ConstantCritic {
    fn logits(&self, s: &Session, _: &ParamStore, positions: Var, _: Var) -> Result<Var> {
        Ok(Self::zeros(s, positions))
    }
}

impl ImageCritic for ConstantCritic {
    fn logits(&self, s: &Session, _: &ParamStore, images: Var) -> Result<Var> {
        Ok(Self::zeros(s, images))
    }
}

