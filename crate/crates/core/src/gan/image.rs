use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{check_spatial, check_widths, EncoderDecoder, MeshToImage};
use crate::autodiff::nn::Linear;
use crate::autodiff::{ParamId, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mesh-to-image generator: the node matrix is mapped densely onto an
/// image-shaped grid, then run through an encoder-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGeneratorConfig {
    pub num_vertices: usize,
    pub shot_dim: usize,
    pub image_size: usize,
    pub out_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Subtract a fixed template from the input positions.
    #[serde(default)]
    pub anchored: bool,
}

impl ImageGeneratorConfig {
    pub fn desk(num_vertices: usize, shot_dim: usize, image_size: usize) -> Self {
        Self {
            num_vertices,
            shot_dim,
            image_size,
            out_channels: 1,
            encoder_widths: vec![8, 16, 32],
            decoder_widths: vec![16, 8],
            anchored: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("image generator encoder", &self.encoder_widths)?;
        check_widths("image generator decoder", &self.decoder_widths)?;
        if self.encoder_widths.is_empty() || self.decoder_widths.len() + 1 != self.encoder_widths.len() {
            return Err(Error::Config(
                "image generator decoder depth + 1 must equal encoder depth".into(),
            ));
        }
        check_spatial(self.image_size, self.encoder_widths.len())?;
        if self.num_vertices == 0 || self.out_channels == 0 {
            return Err(Error::Config("image generator sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImageGenerator {
    pub config: ImageGeneratorConfig,
    adapter: Linear,
    body: EncoderDecoder,
    anchor: Option<ParamId>,
}

impl ImageGenerator {
    pub fn build(config: &ImageGeneratorConfig, anchor: Option<&Tensor>, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let width = config.num_vertices * (3 + config.shot_dim);
        let grid = config.image_size * config.image_size;
        let adapter = Linear::new(&mut store, "imgen.adapter", width, grid, &mut rng);
        let body = EncoderDecoder::new(
            &mut store,
            "imgen",
            1,
            &config.encoder_widths,
            &config.decoder_widths,
            config.out_channels,
            &mut rng,
        );
        let anchor = match (config.anchored, anchor) {
            (true, Some(t)) if t.shape() == [config.num_vertices, 3] => Some(store.add_buffer("imgen.anchor", t.clone())),
            (true, _) => return Err(Error::Config(format!("anchored image generator needs a {} x 3 anchor", config.num_vertices))),
            (false, _) => None,
        };
        Ok((
            Self {
                config: config.clone(),
                adapter,
                body,
                anchor,
            },
            store,
        ))
    }
}

impl MeshToImage for ImageGenerator {
    fn forward(&self, s: &Session, store: &ParamStore, positions: Var, fields: Var) -> Result<Var> {
        let g = s.graph();
        let c = &self.config;
        let b = g.shape(positions)[0];
        let pos = match self.anchor {
            Some(a) => g.sub(positions, g.constant(store.value(a).clone()))?,
            None => positions,
        };
        let nodes = g.concat(&[pos, fields], 2)?;
        let flat = g.reshape(nodes, &[b, c.num_vertices * (3 + c.shot_dim)])?;
        let grid = self.adapter.forward(s, flat)?;
        let grid = g.reshape(grid, &[b, 1, c.image_size, c.image_size])?;
        let out = self.body.forward(s, store, grid)?;
        Ok(g.sigmoid(out))
    }
}
