use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{check_spatial, check_widths, EncoderDecoder, ImageToMesh};
use crate::autodiff::nn::Linear;
use crate::autodiff::{ParamId, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// The `H x W` output grid is read directly as `N0 x (3 + d)`.
    Reshape,
    /// A learned linear map from the `H * W` grid to `N0 * (3 + d)` values.
    #[default]
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub coarse_vertices: usize,
    pub shot_dim: usize,
    #[serde(default)]
    pub head: HeadKind,
    /// Add a fixed template to the predicted positions.
    #[serde(default)]
    pub anchored: bool,
}

fn one() -> usize {
    1
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            encoder_widths: vec![8, 16, 32, 32],
            decoder_widths: vec![32, 16, 8],
            coarse_vertices: 42,
            shot_dim: 29,
            head: HeadKind::Dense,
            anchored: true,
        }
    }

    /// 224 px RGB input read out as 224 x (3 + 221) through the reshape
    /// head. Five halvings bring 224 down to 7.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            encoder_widths: vec![64, 128, 256, 512, 512],
            decoder_widths: vec![512, 256, 128, 64],
            coarse_vertices: 224,
            shot_dim: 221,
            head: HeadKind::Reshape,
            anchored: false,
        }
    }

    pub fn node_width(&self) -> usize {
        3 + self.shot_dim
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("encoder", &self.encoder_widths)?;
        check_widths("decoder", &self.decoder_widths)?;
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("generator needs at least one encoder layer".into()));
        }
        if self.decoder_widths.len() + 1 != self.encoder_widths.len() {
            return Err(Error::Config(format!(
                "decoder depth ({} layers + output layer) must equal encoder depth {}",
                self.decoder_widths.len(),
                self.encoder_widths.len()
            )));
        }
        check_spatial(self.image_size, self.encoder_widths.len())?;
        if self.in_channels == 0 || self.coarse_vertices == 0 {
            return Err(Error::Config("channels and coarse vertex count must be positive".into()));
        }
        let grid = self.image_size * self.image_size;
        let head = self.coarse_vertices * self.node_width();
        if self.head == HeadKind::Reshape && grid != head {
            return Err(Error::Config(format!(
                "reshape head needs H*W = N0*(3+d): {grid} != {} * {} = {head}",
                self.coarse_vertices,
                self.node_width()
            )));
        }
        Ok(())
    }
}

/// Image-to-mesh encoder-decoder with a position and a descriptor head.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    body: EncoderDecoder,
    dense: Option<Linear>,
    anchor: Option<ParamId>,
}

impl Generator {
    /// `anchor` (`N0 x 3`) is required exactly when the config is anchored.
    pub fn build(config: &GeneratorConfig, anchor: Option<&Tensor>, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let body = EncoderDecoder::new(
            &mut store,
            "gen",
            config.in_channels,
            &config.encoder_widths,
            &config.decoder_widths,
            1,
            &mut rng,
        );
        let grid = config.image_size * config.image_size;
        let dense = (config.head == HeadKind::Dense)
            .then(|| Linear::new(&mut store, "gen.head", grid, config.coarse_vertices * config.node_width(), &mut rng));
        let anchor = match (config.anchored, anchor) {
            (true, Some(t)) => {
                if t.shape() != [config.coarse_vertices, 3] {
                    return Err(Error::Config(format!(
                        "anchor {:?} must be {} x 3",
                        t.shape(),
                        config.coarse_vertices
                    )));
                }
                Some(store.add_buffer("gen.anchor", t.clone()))
            }
            (true, None) => return Err(Error::Config("anchored generator built without anchor".into())),
            (false, _) => None,
        };
        Ok((
            Self {
                config: config.clone(),
                body,
                dense,
                anchor,
            },
            store,
        ))
    }
}

impl ImageToMesh for Generator {
    fn forward(&self, s: &Session, store: &ParamStore, images: Var) -> Result<(Var, Var)> {
        let g = s.graph();
        let c = &self.config;
        let shape = g.shape(images);
        let expect = [c.in_channels, c.image_size, c.image_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Shape {
                op: "generator",
                lhs: shape,
                rhs: expect.to_vec(),
            });
        }
        let b = shape[0];
        let grid = self.body.forward(s, store, images)?;
        let flat = g.reshape(grid, &[b, c.image_size * c.image_size])?;
        let flat = match &self.dense {
            Some(d) => d.forward(s, flat)?,
            None => flat,
        };
        let nodes = g.reshape(flat, &[b, c.coarse_vertices, c.node_width()])?;
        let mut pos = g.slice(nodes, 2, 0, 3)?;
        let shot = g.slice(nodes, 2, 3, c.node_width())?;
        if let Some(a) = self.anchor {
            pos = g.add(pos, g.constant(store.value(a).clone()))?;
        }
        Ok((pos, shot))
    }
}
