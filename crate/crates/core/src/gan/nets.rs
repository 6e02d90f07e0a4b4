//! Building blocks and the interfaces the training loops drive.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{BatchNorm, Conv2d, ConvTranspose2d};
use crate::autodiff::{Adam, ConvGeometry, ParamStore, Session, Var};
use crate::error::{Error, Result};

/// Leaky slope of the encoder activations.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Maps image batches `[B, C, H, W]` to `(positions [B, N, 3], fields [B, N, d])`.
pub trait ImageToMesh {
    fn forward(&self, s: &Session, store: &ParamStore, images: Var) -> Result<(Var, Var)>;
}

/// Maps meshes back to image batches.
pub trait MeshToImage {
    fn forward(&self, s: &Session, store: &ParamStore, positions: Var, fields: Var) -> Result<Var>;
}

/// Scores meshes with a real-vs-fake logit `[B, 1]`.
pub trait MeshCritic {
    fn logits(&self, s: &Session, store: &ParamStore, positions: Var, fields: Var) -> Result<Var>;
}

/// Scores images with a real-vs-fake logit `[B, 1]`.
pub trait ImageCritic {
    fn logits(&self, s: &Session, store: &ParamStore, images: Var) -> Result<Var>;
}

/// An architecture with its parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct Net<A> {
    pub arch: A,
    pub store: ParamStore,
    pub adam: Adam,
}

impl<A> Net<A> {
    pub fn new(arch: A, store: ParamStore, lr: f64) -> Self {
        let adam = Adam::new(&store, lr);
        Self { arch, store, adam }
    }
}

pub(crate) fn check_widths(what: &str, widths: &[usize]) -> Result<()> {
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config(format!("{what} widths must be positive, got {widths:?}")));
    }
    Ok(())
}

/// Stride-2 convolutions down, transposed convolutions back up, no skips.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    down: Vec<(Conv2d, BatchNorm)>,
    up: Vec<(ConvTranspose2d, BatchNorm)>,
    last: ConvTranspose2d,
}

impl EncoderDecoder {
    /// `decoder_widths` must hold one entry fewer than `encoder_widths`; the
    /// final transposed convolution produces `out_channels`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        encoder_widths: &[usize],
        decoder_widths: &[usize],
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ConvGeometry::DOWN4;
        let mut ch = in_channels;
        let mut down = Vec::new();
        for (i, &w) in encoder_widths.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("{name}.enc{i}"), ch, w, g, false, rng);
            down.push((conv, BatchNorm::new(store, &format!("{name}.enc{i}.bn"), w)));
            ch = w;
        }
        let mut up = Vec::new();
        for (i, &w) in decoder_widths.iter().enumerate() {
            let conv = ConvTranspose2d::new(store, &format!("{name}.dec{i}"), ch, w, g, false, rng);
            up.push((conv, BatchNorm::new(store, &format!("{name}.dec{i}.bn"), w)));
            ch = w;
        }
        let last = ConvTranspose2d::new(store, &format!("{name}.out"), ch, out_channels, g, true, rng);
        Self { down, up, last }
    }

    pub fn forward(&self, s: &Session, store: &ParamStore, x: Var) -> Result<Var> {
        let g = s.graph();
        let mut h = x;
        for (conv, bn) in &self.down {
            h = g.leaky_relu(bn.forward(s, conv.forward(s, h)?, store)?, LEAKY_SLOPE);
        }
        for (conv, bn) in &self.up {
            h = g.relu(bn.forward(s, conv.forward(s, h)?, store)?);
        }
        self.last.forward(s, h)
    }
}

/// Checks that `size` survives `depth` halvings.
pub(crate) fn check_spatial(size: usize, depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if size == 0 || size % f != 0 {
        return Err(Error::Config(format!(
            "image size {size} cannot be halved {depth} times into integer sizes"
        )));
    }
    Ok(())
}
