//! End-to-end runs: direct mesh fitting and the coupled training experiment
//! on a synthetic dataset.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Mode, ParamStore, Session};
use crate::error::{Error, Result};
use crate::eval::reconstruction_error;
use crate::gan::{
    build_conditional, build_cycle, train_conditional, train_cycle, ConditionalBundle, ConditionalRecord, CoupledSample,
    CycleBundle, CycleRecord, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ImageDiscriminator,
    ImageDiscriminatorConfig, ImageGenerator, ImageGeneratorConfig, MeshSample, TrainConfig, TrainObserver,
};
use crate::losses::{composite_loss, composite_loss_value, LossConfig, LossTarget, LossTerms, LossTopology, LossWeights};
use crate::mesh::{KeypointMap, Mesh, Template};
use crate::synth::{Dataset, Sample, SynthConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub loss: LossConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: Adam::DEFAULT_LR,
            weights: LossWeights::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub initial: LossTerms,
    #[serde(rename = "final")]
    pub final_terms: LossTerms,
    /// Composite loss before each step.
    pub history: Vec<f64>,
    #[serde(skip)]
    pub mesh: Mesh,
}

impl FitReport {
    pub fn reduction(&self) -> f64 {
        if self.initial.total == 0.0 {
            return 0.0;
        }
        1.0 - self.final_terms.total / self.initial.total
    }
}

/// Optimizes the vertex positions of `start` (which shares the topology of
/// `target`) against the composite loss with Adam. No descriptor term.
pub fn fit(start: &Mesh, target: &Mesh, keypoints: &KeypointMap, cfg: &FitConfig) -> Result<FitReport> {
    if start.faces() != target.faces() || start.num_vertices() != target.num_vertices() {
        return Err(Error::Topology("fit needs start and target meshes with one topology".into()));
    }
    cfg.weights.validate()?;
    let topo = LossTopology::new(target, keypoints, cfg.loss)?;
    let goal = LossTarget::new(target, None)?;
    let n = start.num_vertices();
    let mut store = ParamStore::default();
    let id = store.add("positions", start.positions().reshape(&[1, n, 3])?);
    let mut adam = Adam::new(&store, cfg.lr);
    let initial = composite_loss_value(start, None, target, None, &topo, &cfg.weights)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let g = Graph::new();
        let s = Session::trainable(&g, &store, Mode::Train);
        let (loss, _) = composite_loss(&g, s.param(id), None, &goal, &topo, &cfg.weights)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Degenerate(format!("fit loss became non-finite at step {step}")));
        }
        history.push(value);
        let grads = s.gradients(&g.backward(loss)?);
        adam.step(&mut store, &grads)?;
    }
    let positions = store.value(id).clone().reshape(&[n, 3])?;
    let mesh = Mesh::from_positions(&positions, target.faces().to_vec())?;
    let final_terms = composite_loss_value(&mesh, None, target, None, &topo, &cfg.weights)?;
    Ok(FitReport {
        initial,
        final_terms,
        history,
        mesh,
    })
}

/// Training pairs from synthetic samples; invalid descriptor rows are zero.
pub fn coupled_samples(samples: &[&Sample]) -> Vec<CoupledSample> {
    samples
        .iter()
        .map(|s| CoupledSample {
            image: s.image.clone(),
            mesh: s.coarse.clone(),
            shot: s.shot.descriptors.clone(),
        })
        .collect()
}

/// Mean per-vertex reconstruction error of eval-mode predictions.
pub fn mean_reconstruction_error<G, D>(
    bundle: &ConditionalBundle<G, D>,
    samples: &[CoupledSample],
    batch: usize,
) -> Result<f64>
where
    G: crate::gan::ImageToMesh,
    D: crate::gan::MeshCritic,
{
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let images = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let (pos, _) = bundle.predict(&images)?;
        for (k, s) in chunk.iter().enumerate() {
            let pred = Mesh::from_positions(&pos.index_outer(k), s.mesh.faces().to_vec())?;
            total += reconstruction_error(&pred, &s.mesh)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Everything needed to train and score one coupled model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionalExperiment {
    pub synth: SynthConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub train_split: String,
    pub test_split: String,
}

impl Default for ConditionalExperiment {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let shot_dim = synth.shot.output_dim;
        Self {
            generator: GeneratorConfig {
                image_size: synth.image_size,
                shot_dim,
                ..GeneratorConfig::desk()
            },
            discriminator: DiscriminatorConfig::desk(42, shot_dim),
            synth,
            weights: LossWeights::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            train_split: "train".into(),
            test_split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionalReport {
    pub records: Vec<ConditionalRecord>,
    /// Held-out error of the freshly initialized generator.
    pub untrained_error: f64,
    pub trained_error: f64,
}

impl ConditionalExperiment {
    pub fn template(&self) -> &'static Template {
        self.synth.template.template()
    }

    pub fn build(&self, weights: LossWeights) -> Result<ConditionalBundle<Generator, Discriminator>> {
        build_conditional(
            &self.generator,
            &self.discriminator,
            self.template(),
            weights,
            self.loss,
            self.train.lr,
            self.train.seed,
        )
    }

    /// Trains on the train split and scores the test split, before and
    /// after training.
    pub fn run(
        &self,
        data: &Dataset,
        weights: LossWeights,
        observer: &mut dyn TrainObserver,
    ) -> Result<(ConditionalBundle<Generator, Discriminator>, ConditionalReport)> {
        let train = coupled_samples(&data.split(&self.train_split)?);
        let test = coupled_samples(&data.split(&self.test_split)?);
        let mut bundle = self.build(weights)?;
        let untrained_error = mean_reconstruction_error(&bundle, &test, 32)?;
        let records = train_conditional(&mut bundle, &train, &self.train, observer)?;
        let trained_error = mean_reconstruction_error(&bundle, &test, 32)?;
        Ok((
            bundle,
            ConditionalReport {
                records,
                untrained_error,
                trained_error,
            },
        ))
    }
}

/// Unpaired training on an image set and an unrelated mesh set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleExperiment {
    pub synth: SynthConfig,
    pub mesh_generator: GeneratorConfig,
    pub image_generator: ImageGeneratorConfig,
    pub mesh_critic: DiscriminatorConfig,
    pub image_critic: ImageDiscriminatorConfig,
    pub weights: LossWeights,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for CycleExperiment {
    fn default() -> Self {
        let c = ConditionalExperiment::default();
        let (n, d, size) = (42, c.synth.shot.output_dim, c.synth.image_size);
        Self {
            image_generator: ImageGeneratorConfig::desk(n, d, size),
            image_critic: ImageDiscriminatorConfig::desk(size, 1),
            mesh_generator: c.generator,
            mesh_critic: c.discriminator,
            synth: c.synth,
            weights: c.weights,
            loss: c.loss,
            train: c.train,
        }
    }
}

pub type DeskCycleBundle = CycleBundle<Generator, ImageGenerator, Discriminator, ImageDiscriminator>;

impl CycleExperiment {
    pub fn build(&self) -> Result<DeskCycleBundle> {
        build_cycle(
            &self.mesh_generator,
            &self.image_generator,
            &self.mesh_critic,
            &self.image_critic,
            self.synth.template.template(),
            self.weights,
            self.loss,
            self.train.lr,
            self.train.seed,
        )
    }

    /// Trains on every image and every mesh of an unpaired set.
    pub fn run(&self, data: &Dataset, observer: &mut dyn TrainObserver) -> Result<(DeskCycleBundle, Vec<CycleRecord>)> {
        let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.clone()).collect();
        let meshes: Vec<MeshSample> = data
            .samples
            .iter()
            .map(|s| MeshSample {
                mesh: s.coarse.clone(),
                shot: s.shot.descriptors.clone(),
            })
            .collect();
        let mut bundle = self.build()?;
        let records = train_cycle(&mut bundle, &images, &meshes, &self.train, observer)?;
        Ok((bundle, records))
    }
}
