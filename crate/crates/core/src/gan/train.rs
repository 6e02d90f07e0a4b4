//! Training loops for the conditional, cycle and enhancer regimes.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorConfig, ImageDiscriminator, ImageDiscriminatorConfig};
use super::enhancer::Enhancer;
use super::generator::{Generator, GeneratorConfig};
use super::image::{ImageGenerator, ImageGeneratorConfig};
use super::nets::{ImageCritic, ImageToMesh, MeshCritic, MeshToImage, Net};
use super::objectives::{
    cycle_discriminator_losses, cycle_generator_loss, discriminator_loss, generator_adversarial, Bound, CycleBatch,
    CycleTerms,
};
use crate::autodiff::{Graph, Mode, Session, Var};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossConfig, LossTarget, LossTerms, LossTopology, LossWeights};
use crate::mesh::{Mesh, Template};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Save checkpoints every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: crate::autodiff::Adam::DEFAULT_LR,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    fn batches(&self, n: usize) -> Result<usize> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let count = n / self.batch_size;
        if count == 0 {
            return Err(Error::Config(format!(
                "{n} samples cannot fill one batch of {}",
                self.batch_size
            )));
        }
        Ok(count)
    }
}

/// One coupled training pair.
#[derive(Clone, Debug)]
pub struct CoupledSample {
    /// `[C, H, W]`.
    pub image: Tensor,
    pub mesh: Mesh,
    /// `[N, d]` descriptors of `mesh`.
    pub shot: Tensor,
}

/// Per-epoch means over the steps of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub adversarial: f64,
    pub composite: LossTerms,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub epoch: usize,
    pub terms: CycleTerms,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhancerRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_pos: f64,
    pub loss: f64,
}

/// Receives trace records and checkpoints as training proceeds.
pub trait TrainObserver {
    fn epoch_done(&mut self, _epoch: usize, _record: &serde_json::Value) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` epochs.
    fn checkpoint(&mut self, _epoch: usize, _stores: &[(&str, &crate::autodiff::ParamStore)]) -> Result<()> {
        Ok(())
    }

    /// Where the last batch is dumped when a loss turns non-finite.
    fn diagnostics_dir(&self) -> PathBuf {
        std::env::temp_dir().join("meshrecon-diagnostics")
    }
}

/// Discards everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Appends JSON lines to `trace.jsonl` and writes diagnostics under `dir`.
pub struct TraceWriter {
    pub dir: PathBuf,
    file: std::fs::File,
}

impl TraceWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join("trace.jsonl"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            file,
        })
    }
}

impl TrainObserver for TraceWriter {
    fn epoch_done(&mut self, _epoch: usize, record: &serde_json::Value) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    fn diagnostics_dir(&self) -> PathBuf {
        self.dir.join("diagnostics")
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn dump_non_finite(
    observer: &dyn TrainObserver,
    epoch: usize,
    step: usize,
    phase: &str,
    indices: &[usize],
    batch: &[&Tensor],
    values: serde_json::Value,
) -> Error {
    let dir = observer.diagnostics_dir();
    let write = || -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        let report = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "phase": phase,
            "sample_indices": indices,
            "values": values,
        });
        std::fs::write(dir.join("nonfinite.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Tensor::stack(batch)?.save(dir.join("last_batch.imt"))
    };
    // The non-finite error is what matters; a failed dump only loses detail.
    let _ = write();
    Error::NonFinite {
        epoch,
        step,
        dump: dir,
    }
}

fn mean_terms(acc: &[LossTerms]) -> LossTerms {
    let n = acc.len().max(1) as f64;
    let mut m = LossTerms::default();
    for t in acc {
        m.pos += t.pos / n;
        m.shot += t.shot / n;
        m.normal += t.normal / n;
        m.vertex_laplacian += t.vertex_laplacian / n;
        m.keypoint_laplacian += t.keypoint_laplacian / n;
        m.laplacian += t.laplacian / n;
        m.quadratic += t.quadratic / n;
        m.total += t.total / n;
    }
    m
}

/// Generator and critic for the coupled regime, with the loss setup.
pub struct ConditionalBundle<G, D> {
    pub generator: Net<G>,
    pub discriminator: Net<D>,
    pub weights: LossWeights,
    pub topology: LossTopology,
}

fn coupled_batch(data: &[CoupledSample], idx: &[usize]) -> Result<(Tensor, LossTarget)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
    let target = LossTarget::batch(&idx.iter().map(|&i| (&data[i].mesh, Some(&data[i].shot))).collect::<Vec<_>>())?;
    Ok((Tensor::stack(&images)?, target))
}

impl<G: ImageToMesh, D: MeshCritic> ConditionalBundle<G, D> {
    /// Generator output in eval mode (running batch statistics).
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let s = Session::frozen(&g, &self.generator.store, Mode::Eval);
        let (p, f) = self.generator.arch.forward(&s, &self.generator.store, g.constant(images.clone()))?;
        let out = (g.value(p).clone(), g.value(f).clone());
        Ok(out)
    }

    fn d_step(&mut self, images: &Tensor, target: &LossTarget) -> Result<f64> {
        let g = Graph::new();
        let sg = Session::frozen(&g, &self.generator.store, Mode::Train);
        let (fake_p, fake_f) = self.generator.arch.forward(&sg, &self.generator.store, g.constant(images.clone()))?;
        let real_p = g.constant(target.positions().clone());
        let real_f = g.constant(target.shot().expect("coupled targets carry fields").clone());
        let b = target.batch_size();
        let sd = Session::trainable(&g, &self.discriminator.store, Mode::Train);
        let pos = g.concat(&[real_p, fake_p], 0)?;
        let fields = g.concat(&[real_f, fake_f], 0)?;
        let logits = self.discriminator.arch.logits(&sd, &self.discriminator.store, pos, fields)?;
        let loss = discriminator_loss(&g, g.slice(logits, 0, 0, b)?, g.slice(logits, 0, b, 2 * b)?)?;
        let value = g.scalar(loss);
        if value.is_finite() {
            let grads = sd.gradients(&g.backward(loss)?);
            self.discriminator.adam.step(&mut self.discriminator.store, &grads)?;
            sd.commit_stats(&mut self.discriminator.store);
        }
        Ok(value)
    }

    fn g_step(&mut self, images: &Tensor, target: &LossTarget) -> Result<(f64, f64, LossTerms)> {
        let g = Graph::new();
        let sg = Session::trainable(&g, &self.generator.store, Mode::Train);
        let sd = Session::frozen(&g, &self.discriminator.store, Mode::Eval);
        let (pos, shot) = self.generator.arch.forward(&sg, &self.generator.store, g.constant(images.clone()))?;
        let (composite, terms) = composite_loss(&g, pos, Some(shot), target, &self.topology, &self.weights)?;
        let adv = generator_adversarial(&g, self.discriminator.arch.logits(&sd, &self.discriminator.store, pos, shot)?);
        let loss = g.add(adv, g.scale(composite, self.weights.delta))?;
        let value = g.scalar(loss);
        if value.is_finite() {
            let grads = sg.gradients(&g.backward(loss)?);
            self.generator.adam.step(&mut self.generator.store, &grads)?;
            sg.commit_stats(&mut self.generator.store);
        }
        Ok((value, g.scalar(adv), terms))
    }

    /// One composite-plus-adversarial generator update on a fixed batch;
    /// returns the composite value before the update.
    pub fn generator_step(&mut self, data: &[CoupledSample], idx: &[usize]) -> Result<LossTerms> {
        let (images, target) = coupled_batch(data, idx)?;
        Ok(self.g_step(&images, &target)?.2)
    }
}

/// Alternating critic and generator updates; each uses its own shuffle of
/// the data, so the two steps see different batches. Trailing samples that
/// do not fill a batch are skipped.
pub fn train_conditional<G: ImageToMesh, D: MeshCritic>(
    bundle: &mut ConditionalBundle<G, D>,
    data: &[CoupledSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<ConditionalRecord>> {
    bundle.weights.validate()?;
    let steps = cfg.batches(data.len())?;
    bundle.generator.adam.lr = cfg.lr;
    bundle.discriminator.adam.lr = cfg.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order_d = shuffled(data.len(), &mut rng);
        let order_g = shuffled(data.len(), &mut rng);
        let (mut sum_d, mut sum_g, mut sum_adv) = (0.0, 0.0, 0.0);
        let mut terms = Vec::with_capacity(steps);
        for step in 0..steps {
            let range = step * cfg.batch_size..(step + 1) * cfg.batch_size;
            let (idx_d, idx_g) = (&order_d[range.clone()], &order_g[range]);

            let (images, target) = coupled_batch(data, idx_d)?;
            let loss_d = bundle.d_step(&images, &target)?;
            if !loss_d.is_finite() {
                let batch: Vec<&Tensor> = idx_d.iter().map(|&i| &data[i].image).collect();
                return Err(dump_non_finite(observer, epoch, step, "discriminator", idx_d, &batch, serde_json::json!({ "loss_d": loss_d.to_string() })));
            }

            let (images, target) = coupled_batch(data, idx_g)?;
            let (loss_g, adv, t) = bundle.g_step(&images, &target)?;
            if !loss_g.is_finite() {
                let batch: Vec<&Tensor> = idx_g.iter().map(|&i| &data[i].image).collect();
                return Err(dump_non_finite(observer, epoch, step, "generator", idx_g, &batch, serde_json::json!({ "loss_g": loss_g.to_string(), "terms": format!("{t:?}") })));
            }
            sum_d += loss_d;
            sum_g += loss_g;
            sum_adv += adv;
            terms.push(t);
        }
        let n = steps as f64;
        let record = ConditionalRecord {
            epoch,
            loss_d: sum_d / n,
            loss_g: sum_g / n,
            adversarial: sum_adv / n,
            composite: mean_terms(&terms),
        };
        observer.epoch_done(epoch, &serde_json::to_value(&record)?)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            observer.checkpoint(
                epoch,
                &[("generator", &bundle.generator.store), ("discriminator", &bundle.discriminator.store)],
            )?;
        }
        records.push(record);
    }
    Ok(records)
}

/// The four networks of the unpaired regime.
pub struct CycleBundle<GM, GI, DM, DI> {
    pub mesh_generator: Net<GM>,
    pub image_generator: Net<GI>,
    pub mesh_critic: Net<DM>,
    pub image_critic: Net<DI>,
    pub weights: LossWeights,
    pub topology: LossTopology,
}

/// A groundtruth mesh with its descriptors, for the unpaired mesh set.
#[derive(Clone, Debug)]
pub struct MeshSample {
    pub mesh: Mesh,
    pub shot: Tensor,
}

struct CycleData {
    images: Tensor,
    positions: Tensor,
    fields: Tensor,
    target: LossTarget,
}

fn cycle_batch(images: &[Tensor], meshes: &[MeshSample], ii: &[usize], mi: &[usize]) -> Result<CycleData> {
    let ims: Vec<&Tensor> = ii.iter().map(|&i| &images[i]).collect();
    let target = LossTarget::batch(&mi.iter().map(|&i| (&meshes[i].mesh, Some(&meshes[i].shot))).collect::<Vec<_>>())?;
    Ok(CycleData {
        images: Tensor::stack(&ims)?,
        positions: target.positions().clone(),
        fields: target.shot().expect("mesh samples carry fields").clone(),
        target,
    })
}

fn bind<'a, 'g, A: ?Sized>(arch: &'a A, session: &'a Session<'g>, store: &'a crate::autodiff::ParamStore) -> Bound<'a, 'g, A> {
    Bound { arch, session, store }
}

impl<GM, GI, DM, DI> CycleBundle<GM, GI, DM, DI>
where
    GM: ImageToMesh + 'static,
    GI: MeshToImage + 'static,
    DM: MeshCritic + 'static,
    DI: ImageCritic + 'static,
{
    fn batch_vars(g: &Graph, d: &CycleData) -> CycleBatch {
        CycleBatch {
            images: g.constant(d.images.clone()),
            mesh_positions: g.constant(d.positions.clone()),
            mesh_fields: g.constant(d.fields.clone()),
        }
    }

    fn d_step(&mut self, d: &CycleData) -> Result<(f64, f64)> {
        let g = Graph::new();
        let s_gm = Session::frozen(&g, &self.mesh_generator.store, Mode::Train);
        let s_gi = Session::frozen(&g, &self.image_generator.store, Mode::Train);
        let s_dm = Session::trainable(&g, &self.mesh_critic.store, Mode::Train);
        let s_di = Session::trainable(&g, &self.image_critic.store, Mode::Train);
        let batch = Self::batch_vars(&g, d);
        let (lm, li) = cycle_discriminator_losses(
            &g,
            bind(&self.mesh_generator.arch as &dyn ImageToMesh, &s_gm, &self.mesh_generator.store),
            bind(&self.image_generator.arch as &dyn MeshToImage, &s_gi, &self.image_generator.store),
            bind(&self.mesh_critic.arch as &dyn MeshCritic, &s_dm, &self.mesh_critic.store),
            bind(&self.image_critic.arch as &dyn ImageCritic, &s_di, &self.image_critic.store),
            &batch,
        )?;
        let (vm, vi) = (g.scalar(lm), g.scalar(li));
        if vm.is_finite() && vi.is_finite() {
            let grads = g.backward(g.add(lm, li)?)?;
            self.mesh_critic.adam.step(&mut self.mesh_critic.store, &s_dm.gradients(&grads))?;
            self.image_critic.adam.step(&mut self.image_critic.store, &s_di.gradients(&grads))?;
            s_dm.commit_stats(&mut self.mesh_critic.store);
            s_di.commit_stats(&mut self.image_critic.store);
        }
        Ok((vm, vi))
    }

    fn g_step(&mut self, d: &CycleData) -> Result<CycleTerms> {
        let g = Graph::new();
        let s_gm = Session::trainable(&g, &self.mesh_generator.store, Mode::Train);
        let s_gi = Session::trainable(&g, &self.image_generator.store, Mode::Train);
        let s_dm = Session::frozen(&g, &self.mesh_critic.store, Mode::Eval);
        let s_di = Session::frozen(&g, &self.image_critic.store, Mode::Eval);
        let batch = Self::batch_vars(&g, d);
        let out = cycle_generator_loss(
            &g,
            bind(&self.mesh_generator.arch as &dyn ImageToMesh, &s_gm, &self.mesh_generator.store),
            bind(&self.image_generator.arch as &dyn MeshToImage, &s_gi, &self.image_generator.store),
            bind(&self.mesh_critic.arch as &dyn MeshCritic, &s_dm, &self.mesh_critic.store),
            bind(&self.image_critic.arch as &dyn ImageCritic, &s_di, &self.image_critic.store),
            &batch,
            &d.target,
            &self.topology,
            &self.weights,
        )?;
        let terms = CycleTerms {
            g_mesh_adv: g.scalar(out.g_mesh_adv),
            g_image_adv: g.scalar(out.g_image_adv),
            cyc_mesh: g.scalar(out.cyc_mesh),
            cyc_image: g.scalar(out.cyc_image),
            total_g: g.scalar(out.total),
            cyc_mesh_terms: out.cyc_mesh_terms,
            ..CycleTerms::default()
        };
        if terms.total_g.is_finite() {
            let grads = g.backward(out.total)?;
            self.mesh_generator.adam.step(&mut self.mesh_generator.store, &s_gm.gradients(&grads))?;
            self.image_generator.adam.step(&mut self.image_generator.store, &s_gi.gradients(&grads))?;
            s_gm.commit_stats(&mut self.mesh_generator.store);
            s_gi.commit_stats(&mut self.image_generator.store);
        }
        Ok(terms)
    }
}

/// Alternating critic and generator updates on unpaired image and mesh
/// sets, each step drawing fresh, independent batches from both.
pub fn train_cycle<GM, GI, DM, DI>(
    bundle: &mut CycleBundle<GM, GI, DM, DI>,
    images: &[Tensor],
    meshes: &[MeshSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<CycleRecord>>
where
    GM: ImageToMesh + 'static,
    GI: MeshToImage + 'static,
    DM: MeshCritic + 'static,
    DI: ImageCritic + 'static,
{
    bundle.weights.validate()?;
    let steps = cfg.batches(images.len().min(meshes.len()))?;
    for adam in [
        &mut bundle.mesh_generator.adam,
        &mut bundle.image_generator.adam,
        &mut bundle.mesh_critic.adam,
        &mut bundle.image_critic.adam,
    ] {
        adam.lr = cfg.lr;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let orders: [Vec<usize>; 4] = [
            shuffled(images.len(), &mut rng),
            shuffled(meshes.len(), &mut rng),
            shuffled(images.len(), &mut rng),
            shuffled(meshes.len(), &mut rng),
        ];
        let mut acc = CycleTerms::default();
        let mut mesh_terms = Vec::with_capacity(steps);
        for step in 0..steps {
            let r = step * cfg.batch_size..(step + 1) * cfg.batch_size;
            let d = cycle_batch(images, meshes, &orders[0][r.clone()], &orders[1][r.clone()])?;
            let (dm, di) = bundle.d_step(&d)?;
            if !(dm.is_finite() && di.is_finite()) {
                let batch: Vec<&Tensor> = orders[0][r.clone()].iter().map(|&i| &images[i]).collect();
                return Err(dump_non_finite(observer, epoch, step, "critics", &orders[0][r], &batch, serde_json::json!({ "d_mesh": dm.to_string(), "d_image": di.to_string() })));
            }
            let d = cycle_batch(images, meshes, &orders[2][r.clone()], &orders[3][r.clone()])?;
            let t = bundle.g_step(&d)?;
            if !t.total_g.is_finite() {
                let batch: Vec<&Tensor> = orders[2][r.clone()].iter().map(|&i| &images[i]).collect();
                return Err(dump_non_finite(observer, epoch, step, "generators", &orders[2][r], &batch, serde_json::json!({ "terms": format!("{t:?}") })));
            }
            acc.d_mesh += dm;
            acc.d_image += di;
            acc.g_mesh_adv += t.g_mesh_adv;
            acc.g_image_adv += t.g_image_adv;
            acc.cyc_mesh += t.cyc_mesh;
            acc.cyc_image += t.cyc_image;
            acc.total_g += t.total_g;
            mesh_terms.push(t.cyc_mesh_terms);
        }
        let n = steps as f64;
        let terms = CycleTerms {
            d_mesh: acc.d_mesh / n,
            d_image: acc.d_image / n,
            g_mesh_adv: acc.g_mesh_adv / n,
            g_image_adv: acc.g_image_adv / n,
            cyc_mesh: acc.cyc_mesh / n,
            cyc_image: acc.cyc_image / n,
            total_g: acc.total_g / n,
            cyc_mesh_terms: mean_terms(&mesh_terms),
        };
        let record = CycleRecord { epoch, terms };
        observer.epoch_done(epoch, &serde_json::to_value(&record)?)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            observer.checkpoint(
                epoch,
                &[
                    ("mesh_generator", &bundle.mesh_generator.store),
                    ("image_generator", &bundle.image_generator.store),
                    ("mesh_critic", &bundle.mesh_critic.store),
                    ("image_critic", &bundle.image_critic.store),
                ],
            )?;
        }
        records.push(record);
    }
    Ok(records)
}

/// A coarse node matrix and the fine positions it should expand to.
#[derive(Clone, Debug)]
pub struct EnhancerSample {
    /// `[N0, 3 + d]`, positions first.
    pub nodes: Tensor,
    /// `[R, 3]`.
    pub fine: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step (geometric decay).
    pub final_lr: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for EnhancerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 4,
            lr: 0.1,
            final_lr: 1e-7,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Supervised position fitting of the enhancer; with `smoothness` the loss
/// is the composite loss over the fine topology instead of `l_pos` alone.
pub fn train_enhancer(
    net: &mut Net<Enhancer>,
    pairs: &[EnhancerSample],
    cfg: &EnhancerTrainConfig,
    smoothness: Option<(&LossTopology, &Mesh, &LossWeights)>,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EnhancerRecord>> {
    let r = net.arch.output_vertices();
    let n0 = net.arch.ancestors().iter().copied().max().map_or(0, |m| m + 1);
    for (i, p) in pairs.iter().enumerate() {
        if p.fine.shape() != [r, 3] {
            return Err(Error::Topology(format!(
                "pair {i}: fine positions {:?} do not match the enhancer output {r} x 3",
                p.fine.shape()
            )));
        }
        if p.nodes.rank() != 2 || p.nodes.shape()[0] < n0 || p.nodes.shape()[1] != net.arch.config.node_width() {
            return Err(Error::Topology(format!("pair {i}: coarse nodes {:?} do not fit the enhancer", p.nodes.shape())));
        }
    }
    if let Some((topo, _, _)) = smoothness {
        if topo.num_vertices() != r {
            return Err(Error::Topology(format!("fine topology has {} vertices, enhancer emits {r}", topo.num_vertices())));
        }
    }
    let steps = TrainConfig {
        batch_size: cfg.batch_size,
        ..TrainConfig::default()
    }
    .batches(pairs.len())?;
    let total = (cfg.epochs * steps).max(1);
    let ratio = if cfg.lr > 0.0 { cfg.final_lr / cfg.lr } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut t = 0usize;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(pairs.len(), &mut rng);
        let (mut sum_pos, mut sum_loss) = (0.0, 0.0);
        let mut lr = cfg.lr;
        for step in 0..steps {
            let idx = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            lr = cfg.lr * ratio.powf(t as f64 / (total - 1).max(1) as f64);
            net.adam.lr = lr;
            t += 1;
            let nodes = Tensor::stack(&idx.iter().map(|&i| &pairs[i].nodes).collect::<Vec<_>>())?;
            let fine = Tensor::stack(&idx.iter().map(|&i| &pairs[i].fine).collect::<Vec<_>>())?;
            let g = Graph::new();
            let s = Session::trainable(&g, &net.store, Mode::Train);
            let pred = net.arch.forward(&s, &net.store, g.constant(nodes))?;
            let b = idx.len() as f64;
            let l_pos = g.scale(g.l1_norm(g.sub(pred, g.constant(fine.clone()))?), 1.0 / b);
            let loss: Var = match smoothness {
                None => l_pos,
                Some((topo, template, weights)) => {
                    let meshes: Vec<Mesh> = idx
                        .iter()
                        .map(|&i| Mesh::from_positions(&pairs[i].fine, template.faces().to_vec()))
                        .collect::<Result<_>>()?;
                    let target = LossTarget::batch(&meshes.iter().map(|m| (m, None)).collect::<Vec<_>>())?;
                    composite_loss(&g, pred, None, &target, topo, weights)?.0
                }
            };
            let value = g.scalar(loss);
            if !value.is_finite() {
                let batch: Vec<&Tensor> = idx.iter().map(|&i| &pairs[i].nodes).collect();
                return Err(dump_non_finite(observer, epoch, step, "enhancer", idx, &batch, serde_json::json!({ "loss": value.to_string() })));
            }
            let grads = s.gradients(&g.backward(loss)?);
            net.adam.step(&mut net.store, &grads)?;
            s.commit_stats(&mut net.store);
            sum_pos += g.scalar(l_pos);
            sum_loss += value;
        }
        let record = EnhancerRecord {
            epoch,
            lr,
            l_pos: sum_pos / steps as f64,
            loss: sum_loss / steps as f64,
        };
        observer.epoch_done(epoch, &serde_json::to_value(&record)?)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            observer.checkpoint(epoch, &[("enhancer", &net.store)])?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Enhancer output in eval mode for one node matrix `[N0, 3 + d]`.
pub fn enhance(net: &Net<Enhancer>, nodes: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let s = Session::frozen(&g, &net.store, Mode::Eval);
    let n = nodes.shape().to_vec();
    let input = g.constant(nodes.clone().reshape(&[1, n[0], n.get(1).copied().unwrap_or(0)])?);
    let out = net.arch.forward(&s, &net.store, input)?;
    let r = net.arch.output_vertices();
    let value = g.value(out).clone();
    value.reshape(&[r, 3])
}

fn check_pair(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!("{what} mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Generator and mesh critic for `template`, with dimensions cross-checked.
pub fn build_conditional(
    generator: &GeneratorConfig,
    discriminator: &DiscriminatorConfig,
    template: &Template,
    weights: LossWeights,
    loss: LossConfig,
    lr: f64,
    seed: u64,
) -> Result<ConditionalBundle<Generator, Discriminator>> {
    let n = template.coarse.num_vertices();
    check_pair("generator vertices / template vertices", generator.coarse_vertices, n)?;
    check_pair("discriminator vertices / template vertices", discriminator.num_vertices, n)?;
    check_pair("generator / discriminator descriptor width", generator.shot_dim, discriminator.shot_dim)?;
    weights.validate()?;
    let anchor = template.coarse.positions();
    let (g, gs) = Generator::build(generator, generator.anchored.then_some(&anchor), seed)?;
    let (d, ds) = Discriminator::build(discriminator, &template.coarse.edges(), seed.wrapping_add(1))?;
    Ok(ConditionalBundle {
        generator: Net::new(g, gs, lr),
        discriminator: Net::new(d, ds, lr),
        weights,
        topology: LossTopology::new(&template.coarse, &template.keypoints, loss)?,
    })
}

/// The four cycle networks for `template`, with dimensions cross-checked.
#[allow(clippy::too_many_arguments)]
pub fn build_cycle(
    mesh_generator: &GeneratorConfig,
    image_generator: &ImageGeneratorConfig,
    mesh_critic: &DiscriminatorConfig,
    image_critic: &ImageDiscriminatorConfig,
    template: &Template,
    weights: LossWeights,
    loss: LossConfig,
    lr: f64,
    seed: u64,
) -> Result<CycleBundle<Generator, ImageGenerator, Discriminator, ImageDiscriminator>> {
    let n = template.coarse.num_vertices();
    check_pair("mesh generator vertices / template vertices", mesh_generator.coarse_vertices, n)?;
    check_pair("image generator vertices / template vertices", image_generator.num_vertices, n)?;
    check_pair("mesh critic vertices / template vertices", mesh_critic.num_vertices, n)?;
    for (what, d) in [("image generator", image_generator.shot_dim), ("mesh critic", mesh_critic.shot_dim)] {
        check_pair(&format!("mesh generator / {what} descriptor width"), mesh_generator.shot_dim, d)?;
    }
    for (what, s) in [("image generator", image_generator.image_size), ("image critic", image_critic.image_size)] {
        check_pair(&format!("mesh generator / {what} image size"), mesh_generator.image_size, s)?;
    }
    for (what, c) in [("image generator", image_generator.out_channels), ("image critic", image_critic.in_channels)] {
        check_pair(&format!("mesh generator / {what} channels"), mesh_generator.in_channels, c)?;
    }
    weights.validate()?;
    let anchor = template.coarse.positions();
    let (gm, gms) = Generator::build(mesh_generator, mesh_generator.anchored.then_some(&anchor), seed)?;
    let (gi, gis) = ImageGenerator::build(image_generator, image_generator.anchored.then_some(&anchor), seed.wrapping_add(1))?;
    let (dm, dms) = Discriminator::build(mesh_critic, &template.coarse.edges(), seed.wrapping_add(2))?;
    let (di, dis) = ImageDiscriminator::build(image_critic, seed.wrapping_add(3))?;
    Ok(CycleBundle {
        mesh_generator: Net::new(gm, gms, lr),
        image_generator: Net::new(gi, gis, lr),
        mesh_critic: Net::new(dm, dms, lr),
        image_critic: Net::new(di, dis, lr),
        weights,
        topology: LossTopology::new(&template.coarse, &template.keypoints, loss)?,
    })
}
