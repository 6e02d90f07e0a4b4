//! Networks and adversarial training: image-to-mesh generator, mesh
//! enhancer, dual-branch mesh critic, the image-side networks of the cycle
//! regime, their objectives and training loops.

pub mod checkpoint;
mod discriminator;
mod enhancer;
mod generator;
mod image;
mod nets;
pub mod objectives;
pub mod toy;
pub mod train;

pub use discriminator::{Discriminator, DiscriminatorConfig, ImageDiscriminator, ImageDiscriminatorConfig};
pub use enhancer::{count_adapter, expand_edges, target_order, Enhancer, EnhancerConfig};
pub use generator::{Generator, GeneratorConfig, HeadKind};
pub use image::{ImageGenerator, ImageGeneratorConfig};
pub use nets::{EncoderDecoder, ImageCritic, ImageToMesh, MeshCritic, MeshToImage, Net, LEAKY_SLOPE};
pub use objectives::{cgan_objectives, discriminator_loss, generator_adversarial, generator_loss, CycleTerms};
pub use train::{
    build_conditional, build_cycle, enhance, train_conditional, train_cycle, train_enhancer, ConditionalBundle, ConditionalRecord, CoupledSample,
    CycleBundle, CycleRecord, EnhancerRecord, EnhancerSample, EnhancerTrainConfig, MeshSample, Silent, TrainConfig,
    TrainObserver, TraceWriter,
};

#[cfg(test)]
mod tests;
