use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{check_spatial, check_widths, ImageCritic, MeshCritic, LEAKY_SLOPE};
use crate::autodiff::nn::{normalized_adjacency, BatchNorm, Conv2d, GcnConv, Linear};
use crate::autodiff::{ConvGeometry, ParamStore, Session, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub num_vertices: usize,
    pub shot_dim: usize,
    /// Channels of the position-branch convolutions along the vertex axis.
    pub position_widths: Vec<usize>,
    /// Filter length along the vertex axis (odd).
    pub position_kernel: usize,
    /// Output widths of the descriptor-branch GCN layers.
    pub gcn_widths: Vec<usize>,
    pub branch_dense: usize,
    pub fusion_dense: usize,
}

impl DiscriminatorConfig {
    pub fn desk(num_vertices: usize, shot_dim: usize) -> Self {
        Self {
            num_vertices,
            shot_dim,
            position_widths: vec![8, 8, 1],
            position_kernel: 5,
            gcn_widths: vec![16, 8],
            branch_dense: 64,
            fusion_dense: 32,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            num_vertices: 224,
            shot_dim: 221,
            position_widths: vec![64, 64, 1],
            position_kernel: 5,
            gcn_widths: vec![100, 50],
            branch_dense: 2048,
            fusion_dense: 1048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("position branch", &self.position_widths)?;
        check_widths("descriptor branch", &self.gcn_widths)?;
        if self.position_widths.is_empty() || self.gcn_widths.is_empty() {
            return Err(Error::Config("both discriminator branches need a layer".into()));
        }
        if self.position_kernel % 2 == 0 {
            return Err(Error::Config(format!("position kernel {} must be odd", self.position_kernel)));
        }
        if self.num_vertices == 0 || self.shot_dim == 0 || self.branch_dense == 0 || self.fusion_dense == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Position and descriptor branches fused into one real/fake logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    convs: Vec<(Conv2d, BatchNorm)>,
    gcns: Vec<GcnConv>,
    pos_dense: Linear,
    shot_dense: Linear,
    fusion: Linear,
    out: Linear,
}

impl Discriminator {
    /// `edges` is the mesh topology the descriptor branch convolves over.
    pub fn build(config: &DiscriminatorConfig, edges: &[(usize, usize)], seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let n = config.num_vertices;
        if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::Config(format!("edge ({u},{v}) outside {n} vertices")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let half = config.position_kernel / 2;
        let mut convs = Vec::new();
        let mut ch = 1;
        for (i, &w) in config.position_widths.iter().enumerate() {
            // The first filter spans the three coordinates; later ones see a
            // single column.
            let kw = if i == 0 { 3 } else { 1 };
            let geom = ConvGeometry::new((config.position_kernel, kw), (1, 1), (half, 0));
            let conv = Conv2d::new(&mut store, &format!("disc.pos{i}"), ch, w, geom, false, &mut rng);
            convs.push((conv, BatchNorm::new(&mut store, &format!("disc.pos{i}.bn"), w)));
            ch = w;
        }
        let pos_dense = Linear::new(&mut store, "disc.pos_dense", ch * n, config.branch_dense, &mut rng);
        let adjacency = Rc::new(normalized_adjacency(n, edges));
        let mut gcns = Vec::new();
        let mut f = config.shot_dim;
        for (i, &w) in config.gcn_widths.iter().enumerate() {
            gcns.push(GcnConv::new(&mut store, &format!("disc.gcn{i}"), adjacency.clone(), f, w, &mut rng));
            f = w;
        }
        let shot_dense = Linear::new(&mut store, "disc.shot_dense", f * n, config.branch_dense, &mut rng);
        let fusion = Linear::new(&mut store, "disc.fusion", 2 * config.branch_dense, config.fusion_dense, &mut rng);
        let out = Linear::new(&mut store, "disc.out", config.fusion_dense, 1, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                convs,
                gcns,
                pos_dense,
                shot_dense,
                fusion,
                out,
            },
            store,
        ))
    }
}

impl MeshCritic for Discriminator {
    fn logits(&self, s: &Session, store: &ParamStore, positions: Var, fields: Var) -> Result<Var> {
        let g = s.graph();
        let c = &self.config;
        let ps = g.shape(positions);
        let fs = g.shape(fields);
        if ps.len() != 3 || ps[1..] != [c.num_vertices, 3] || fs.len() != 3 || fs[..2] != ps[..2] || fs[2] != c.shot_dim {
            return Err(Error::Shape {
                op: "discriminator",
                lhs: ps,
                rhs: fs,
            });
        }
        let b = ps[0];
        let mut h = g.reshape(positions, &[b, 1, c.num_vertices, 3])?;
        for (conv, bn) in &self.convs {
            h = g.relu(bn.forward(s, conv.forward(s, h)?, store)?);
        }
        let last = *c.position_widths.last().expect("validated");
        let h = g.reshape(h, &[b, last * c.num_vertices])?;
        let p = g.relu(self.pos_dense.forward(s, h)?);

        let mut f = fields;
        for gcn in &self.gcns {
            f = g.relu(gcn.forward(s, f)?);
        }
        let width = *c.gcn_widths.last().expect("validated");
        let f = g.reshape(f, &[b, width * c.num_vertices])?;
        let q = g.relu(self.shot_dense.forward(s, f)?);

        let joint = g.concat(&[p, q], 1)?;
        let joint = g.relu(self.fusion.forward(s, joint)?);
        self.out.forward(s, joint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDiscriminatorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl ImageDiscriminatorConfig {
    pub fn desk(image_size: usize, in_channels: usize) -> Self {
        Self {
            image_size,
            in_channels,
            widths: vec![8, 16, 16],
        }
    }
}

/// Strided convolutions followed by one dense logit.
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    pub config: ImageDiscriminatorConfig,
    convs: Vec<(Conv2d, BatchNorm)>,
    out: Linear,
}

impl ImageDiscriminator {
    pub fn build(config: &ImageDiscriminatorConfig, seed: u64) -> Result<(Self, ParamStore)> {
        check_widths("image discriminator", &config.widths)?;
        check_spatial(config.image_size, config.widths.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut ch = config.in_channels;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("imdisc.conv{i}"), ch, w, ConvGeometry::DOWN4, false, &mut rng);
            convs.push((conv, BatchNorm::new(&mut store, &format!("imdisc.conv{i}.bn"), w)));
            ch = w;
        }
        let side = config.image_size >> config.widths.len();
        let out = Linear::new(&mut store, "imdisc.out", ch * side * side, 1, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                convs,
                out,
            },
            store,
        ))
    }
}

impl ImageCritic for ImageDiscriminator {
    fn logits(&self, s: &Session, store: &ParamStore, images: Var) -> Result<Var> {
        let g = s.graph();
        let b = g.shape(images)[0];
        let mut h = images;
        for (conv, bn) in &self.convs {
            h = g.leaky_relu(bn.forward(s, conv.forward(s, h)?, store)?, LEAKY_SLOPE);
        }
        let numel: usize = g.shape(h).iter().product();
        let h = g.reshape(h, &[b, numel / b])?;
        self.out.forward(s, h)
    }
}
