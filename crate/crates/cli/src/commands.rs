use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use meshrecon::autodiff::ParamStore;
use meshrecon::eval::{self, AblationRow, PckCurve};
use meshrecon::gan::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use meshrecon::gan::{
    enhance, target_order, train_enhancer as fit_enhancer, Enhancer, EnhancerConfig, EnhancerSample, EnhancerTrainConfig, Net, TrainObserver,
    TraceWriter,
};
use meshrecon::gradcheck;
use meshrecon::losses::{composite_loss_value, LossConfig, LossTopology, LossWeights, NormalVariant};
use meshrecon::mesh::{extract_keypoints, load_mesh, save_mesh, KeypointMap, Mesh, TemplateKind};
use meshrecon::pipeline::{
    coupled_samples, fit as fit_mesh, mean_reconstruction_error, ConditionalExperiment, CycleExperiment, FitConfig,
};
use meshrecon::shot::{compute_shot, ShotConfig};
use meshrecon::synth::{deform, generate_sets, Dataset, SetMode, SynthConfig};
use meshrecon::Tensor;

use crate::config::{
    load, out_dir, print_if_asked, require_dir, require_file, summarize, validated, write_json, write_text, Failure,
    Outcome,
};
use crate::Common;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TemplateArg {
    Icosphere,
    CapsuleHand,
}

impl From<TemplateArg> for TemplateKind {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Icosphere => TemplateKind::Icosphere,
            TemplateArg::CapsuleHand => TemplateKind::CapsuleHand,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Coupled,
    Unpaired,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Parallel,
    AsWritten,
}

/// Writes the trace and saves periodic checkpoints under `checkpoints/`.
struct RunObserver<'c, C: Serialize> {
    trace: TraceWriter,
    config: &'c C,
}

impl<C: Serialize> TrainObserver for RunObserver<'_, C> {
    fn epoch_done(&mut self, epoch: usize, record: &serde_json::Value) -> meshrecon::Result<()> {
        self.trace.epoch_done(epoch, record)
    }

    fn checkpoint(&mut self, epoch: usize, stores: &[(&str, &ParamStore)]) -> meshrecon::Result<()> {
        let dir = self.trace.dir.join("checkpoints").join(format!("epoch_{epoch:04}"));
        for (name, store) in stores {
            save_checkpoint(&dir, name, name, self.config, epoch as u64, store)?;
        }
        Ok(())
    }

    fn diagnostics_dir(&self) -> PathBuf {
        self.trace.diagnostics_dir()
    }
}

fn observer<'c, C: Serialize>(dir: &Path, config: &'c C) -> Outcome<RunObserver<'c, C>> {
    Ok(RunObserver {
        trace: TraceWriter::create(dir)?,
        config,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub synth: SynthConfig,
    pub mode: Mode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Coupled,
    Unpaired,
}

impl From<Mode> for SetMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Coupled => SetMode::Coupled,
            Mode::Unpaired => SetMode::Unpaired,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum)]
    template: Option<TemplateArg>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Peak deformation in mm.
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

pub fn synth(a: SynthArgs) -> Outcome {
    let mut cfg: SynthRun = load(&a.common)?;
    let s = &mut cfg.synth;
    s.seed = a.seed.unwrap_or(s.seed);
    s.count = a.count.unwrap_or(s.count);
    s.template = a.template.map_or(s.template, Into::into);
    s.image_size = a.image_size.unwrap_or(s.image_size);
    s.amplitude = a.amplitude.unwrap_or(s.amplitude);
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Coupled => Mode::Coupled,
            ModeArg::Unpaired => Mode::Unpaired,
        };
    }
    validated(cfg.synth.validate())?;
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let dir = out_dir(&a.common)?;
    let data = generate_sets(&cfg.synth, cfg.mode.into())?;
    data.write(&dir)?;
    let splits: Vec<String> = data.meta.splits.iter().map(|s| format!("{} {}", s.name, s.ids.len())).collect();
    summarize(
        Some(&dir),
        &[
            format!("wrote {} {:?} samples to {}", data.meta.count, cfg.mode, dir.display()),
            format!("template {} ({} coarse, {} fine vertices)", cfg.synth.template.name(), data.meta.coarse_vertices, data.meta.fine_vertices),
            format!("splits: {}", splits.join(", ")),
        ],
    )
}

// ---------------------------------------------------------------- shot

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotRun {
    pub shot: ShotConfig,
}

impl Default for ShotRun {
    fn default() -> Self {
        Self { shot: ShotConfig::desk() }
    }
}

#[derive(Args, Debug)]
pub struct ShotArgs {
    #[command(flatten)]
    common: Common,
    /// Input OBJ mesh.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Support radius in mm.
    #[arg(long)]
    radius: Option<f64>,
}

pub fn shot(a: ShotArgs) -> Outcome {
    let mut cfg: ShotRun = load(&a.common)?;
    cfg.shot.radius = a.radius.unwrap_or(cfg.shot.radius);
    validated(cfg.shot.validate())?;
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let path = a.mesh.ok_or_else(|| Failure::usage("--mesh is required"))?;
    require_file(&path)?;
    let dir = out_dir(&a.common)?;
    let mesh = load_mesh(&path)?;
    let field = compute_shot(&mesh, &cfg.shot)?;
    write_text(&dir.join("shot.csv"), &field.to_csv())?;
    field.to_tensor().save(dir.join("shot.shot"))?;
    let valid = field.validity.iter().filter(|&&v| v).count();
    summarize(
        Some(&dir),
        &[
            format!("{} vertices, {} with a valid frame, {} columns", field.len(), valid, field.dim()),
            format!("wrote {}", dir.join("shot.csv").display()),
        ],
    )
}

// ---------------------------------------------------------------- loss

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossRun {
    pub weights: LossWeights,
    pub loss: LossConfig,
    /// Descriptor settings; the descriptor term is skipped when absent.
    pub shot: Option<ShotConfig>,
    /// Keypoint map JSON; farthest-point keypoints of `gt` otherwise.
    pub keypoints: Option<PathBuf>,
}

impl Default for LossRun {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            loss: LossConfig::default(),
            shot: Some(ShotConfig::desk()),
            keypoints: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum)]
    normal_variant: Option<VariantArg>,
    #[arg(long)]
    keypoints: Option<PathBuf>,
}

pub fn loss(a: LossArgs) -> Outcome {
    let mut cfg: LossRun = load(&a.common)?;
    if let Some(v) = a.normal_variant {
        cfg.loss.normal_variant = match v {
            VariantArg::Parallel => NormalVariant::Parallel,
            VariantArg::AsWritten => NormalVariant::AsWritten,
        };
    }
    cfg.keypoints = a.keypoints.or(cfg.keypoints);
    validated(cfg.weights.validate())?;
    if let Some(s) = &cfg.shot {
        validated(s.validate())?;
    }
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let pred_path = a.pred.ok_or_else(|| Failure::usage("--pred is required"))?;
    let gt_path = a.gt.ok_or_else(|| Failure::usage("--gt is required"))?;
    require_file(&pred_path)?;
    require_file(&gt_path)?;
    let (pred, gt) = (load_mesh(&pred_path)?, load_mesh(&gt_path)?);
    let keypoints = match &cfg.keypoints {
        Some(p) => {
            require_file(p)?;
            KeypointMap::from_json(&std::fs::read_to_string(p)?)?
        }
        None => meshrecon::mesh::templates::farthest_point_keypoints(&gt, meshrecon::mesh::templates::NUM_KEYPOINTS),
    };
    let topo = LossTopology::new(&gt, &keypoints, cfg.loss)?;
    let fields = match &cfg.shot {
        Some(s) => Some((compute_shot(&pred, s)?.descriptors, compute_shot(&gt, s)?.descriptors)),
        None => None,
    };
    let terms = composite_loss_value(
        &pred,
        fields.as_ref().map(|f| &f.0),
        &gt,
        fields.as_ref().map(|f| &f.1),
        &topo,
        &cfg.weights,
    )?;
    let dir = match &a.common.out {
        Some(_) => Some(out_dir(&a.common)?),
        None => None,
    };
    if let Some(d) = &dir {
        write_json(&d.join("loss.json"), &terms)?;
    }
    summarize(dir.as_deref(), &[serde_json::to_string_pretty(&terms)?])
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckRun {
    pub seeds: u64,
    pub tolerance: f64,
    /// Only cases whose name contains this string.
    pub filter: Option<String>,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        Self {
            seeds: 10,
            tolerance: 1e-4,
            filter: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    filter: Option<String>,
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut cfg: GradcheckRun = load(&a.common)?;
    cfg.seeds = a.seeds.unwrap_or(cfg.seeds);
    cfg.tolerance = a.tolerance.unwrap_or(cfg.tolerance);
    cfg.filter = a.filter.or(cfg.filter);
    if cfg.seeds == 0 || !(cfg.tolerance > 0.0) {
        return Err(Failure::usage("gradcheck needs at least one seed and a positive tolerance"));
    }
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let cases: Vec<_> = gradcheck::cases()
        .into_iter()
        .filter(|c| cfg.filter.as_ref().is_none_or(|f| c.name.contains(f.as_str())))
        .collect();
    if cases.is_empty() {
        return Err(Failure::usage("no gradient check matches the filter"));
    }
    let seeds: Vec<u64> = (0..cfg.seeds).collect();
    let outcomes = gradcheck::run_suite(&cases, &seeds);
    let ok = |o: &gradcheck::CaseOutcome| o.failure.is_none() && o.max_rel_error <= cfg.tolerance;
    let mut lines: Vec<String> = outcomes
        .iter()
        .map(|o| {
            let status = if ok(o) { "ok" } else { "FAIL" };
            let extra = o.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default();
            format!("{status:4} {:<32} {:.3e}{extra}", o.name, o.max_rel_error)
        })
        .collect();
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let failed = outcomes.iter().filter(|o| !ok(o)).count();
    lines.push(format!("{} checks x {} seeds, max rel err {worst:.3e} (tolerance {:e})", outcomes.len(), cfg.seeds, cfg.tolerance));
    let dir = match &a.common.out {
        Some(_) => Some(out_dir(&a.common)?),
        None => None,
    };
    if let Some(d) = &dir {
        write_json(&d.join("gradcheck.json"), &outcomes)?;
    }
    summarize(dir.as_deref(), &lines)?;
    if failed > 0 {
        return Err(Failure::runtime(anyhow::anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}

// ---------------------------------------------------------------- fit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitRun {
    pub fit: FitConfig,
    /// Template used when no start/target meshes are given.
    pub template: TemplateKind,
    /// Deformation (mm) applied to the template to make the start mesh.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for FitRun {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            template: TemplateKind::Icosphere,
            amplitude: 0.1,
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Starting mesh (defaults to a deformed template).
    #[arg(long)]
    start: Option<PathBuf>,
    /// Target mesh (defaults to the template).
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn fit(a: FitArgs) -> Outcome {
    let mut cfg: FitRun = load(&a.common)?;
    cfg.fit.steps = a.steps.unwrap_or(cfg.fit.steps);
    cfg.fit.lr = a.lr.unwrap_or(cfg.fit.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    validated(cfg.fit.weights.validate())?;
    if !(cfg.fit.lr > 0.0) || !(cfg.amplitude >= 0.0) {
        return Err(Failure::usage("fit needs a positive learning rate and a non-negative amplitude"));
    }
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    for p in a.start.iter().chain(&a.target) {
        require_file(p)?;
    }
    let dir = out_dir(&a.common)?;
    let template = cfg.template.template();
    let target = match &a.target {
        Some(p) => load_mesh(p)?,
        None => template.coarse.clone(),
    };
    let start = match &a.start {
        Some(p) => load_mesh(p)?,
        None => {
            let synth = SynthConfig {
                template: cfg.template,
                amplitude: cfg.amplitude,
                ..SynthConfig::default()
            };
            deform(template, &synth, cfg.seed)?.0
        }
    };
    let keypoints = if a.target.is_none() {
        template.keypoints.clone()
    } else {
        meshrecon::mesh::templates::farthest_point_keypoints(&target, meshrecon::mesh::templates::NUM_KEYPOINTS)
    };
    let report = fit_mesh(&start, &target, &keypoints, &cfg.fit)?;
    save_mesh(&start, dir.join("start.obj"))?;
    save_mesh(&report.mesh, dir.join("fitted.obj"))?;
    write_json(&dir.join("fit.json"), &report)?;
    let trace: String = report.history.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
    write_text(&dir.join("history.csv"), &format!("step,composite\n{trace}"))?;
    summarize(
        Some(&dir),
        &[
            format!("composite loss {} -> {} over {} steps", fmt(report.initial.total), fmt(report.final_terms.total), cfg.fit.steps),
            format!("reduction {:.2}%", 100.0 * report.reduction()),
        ],
    )
}

// ---------------------------------------------------------------- training

fn load_dataset(path: &Path, expect: SetMode) -> Outcome<Dataset> {
    require_dir(path)?;
    let data = Dataset::load(path)?;
    if data.meta.mode != expect {
        return Err(Failure::usage(format!("{} holds a {:?} set, expected {:?}", path.display(), data.meta.mode, expect)));
    }
    Ok(data)
}

fn dataset_for(data: &Option<PathBuf>, synth: &SynthConfig, mode: SetMode) -> Outcome<Dataset> {
    match data {
        Some(p) => load_dataset(p, mode),
        None => Ok(generate_sets(synth, mode)?),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCondRun {
    pub experiment: ConditionalExperiment,
    /// Synthetic dataset directory; generated from `experiment.synth` otherwise.
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl TrainFlags {
    fn apply(&self, t: &mut meshrecon::gan::TrainConfig) {
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.lr = self.lr.unwrap_or(t.lr);
        t.seed = self.seed.unwrap_or(t.seed);
    }
}

#[derive(Args, Debug)]
pub struct TrainCondArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

fn check_experiment(e: &ConditionalExperiment) -> Outcome {
    validated(e.synth.validate())?;
    validated(e.generator.validate())?;
    validated(e.weights.validate())?;
    validated(e.build(e.weights).map(|_| ()))
}

pub fn train_cond(a: TrainCondArgs) -> Outcome {
    let mut cfg: TrainCondRun = load(&a.common)?;
    a.train.apply(&mut cfg.experiment.train);
    cfg.data = a.train.data.clone().or(cfg.data);
    check_experiment(&cfg.experiment)?;
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let dir = out_dir(&a.common)?;
    let data = dataset_for(&cfg.data, &cfg.experiment.synth, SetMode::Coupled)?;
    let exp = &cfg.experiment;
    let mut obs = observer(&dir, &cfg)?;
    let (bundle, report) = exp.run(&data, exp.weights, &mut obs)?;
    let steps = report.records.len() as u64;
    save_checkpoint(&dir, "generator", "generator", &cfg, steps, &bundle.generator.store)?;
    save_checkpoint(&dir, "discriminator", "discriminator", &cfg, steps, &bundle.discriminator.store)?;
    write_json(&dir.join("report.json"), &report)?;
    let first = report.records.first().map_or(0.0, |r| r.composite.total);
    let last = report.records.last().map_or(0.0, |r| r.composite.total);
    summarize(
        Some(&dir),
        &[
            format!("{} epochs on {} train pairs", report.records.len(), data.meta.split(&exp.train_split)?.len()),
            format!("composite loss epoch 1 {} -> epoch {} {}", fmt(first), report.records.len(), fmt(last)),
            format!("held-out reconstruction error {} mm -> {} mm", fmt(report.untrained_error), fmt(report.trained_error)),
        ],
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCycleRun {
    pub experiment: CycleExperiment,
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainCycleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

pub fn train_cycle(a: TrainCycleArgs) -> Outcome {
    let mut cfg: TrainCycleRun = load(&a.common)?;
    a.train.apply(&mut cfg.experiment.train);
    cfg.data = a.train.data.clone().or(cfg.data);
    validated(cfg.experiment.synth.validate())?;
    validated(cfg.experiment.build().map(|_| ()))?;
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let dir = out_dir(&a.common)?;
    let data = dataset_for(&cfg.data, &cfg.experiment.synth, SetMode::Unpaired)?;
    let mut obs = observer(&dir, &cfg)?;
    let (bundle, records) = cfg.experiment.run(&data, &mut obs)?;
    let steps = records.len() as u64;
    for (name, store) in [
        ("mesh_generator", &bundle.mesh_generator.store),
        ("image_generator", &bundle.image_generator.store),
        ("mesh_critic", &bundle.mesh_critic.store),
        ("image_critic", &bundle.image_critic.store),
    ] {
        save_checkpoint(&dir, name, name, &cfg, steps, store)?;
    }
    write_json(&dir.join("report.json"), &records)?;
    let (first, last) = (records.first().map(|r| r.terms), records.last().map(|r| r.terms));
    let mut lines = vec![format!("{} epochs on {} images and {} meshes", records.len(), data.samples.len(), data.samples.len())];
    if let (Some(f), Some(l)) = (first, last) {
        lines.push(format!("mesh cycle loss {} -> {}", fmt(f.cyc_mesh), fmt(l.cyc_mesh)));
        lines.push(format!("image cycle loss {} -> {}", fmt(f.cyc_image), fmt(l.cyc_image)));
    }
    summarize(Some(&dir), &lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainEnhancerRun {
    pub synth: SynthConfig,
    pub enhancer: EnhancerConfig,
    pub train: EnhancerTrainConfig,
    pub data: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainEnhancerRun {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let t = synth.template.template();
        Self {
            enhancer: EnhancerConfig {
                cascade: vec![4],
                target_vertices: t.fine.num_vertices(),
                feature_dim: synth.shot.output_dim,
                reconstructor_widths: vec![64; 4],
                allow_pad: false,
                batch_norm: false,
            },
            synth,
            // Real deformations need a gentler start than the library default.
            train: EnhancerTrainConfig {
                lr: 0.01,
                ..EnhancerTrainConfig::default()
            },
            data: None,
            seed: 0,
        }
    }
}

impl TrainEnhancerRun {
    fn build(&self, coarse: &Mesh) -> meshrecon::Result<Net<Enhancer>> {
        let (net, store) = Enhancer::build(&self.enhancer, coarse.num_vertices(), &coarse.edges(), self.seed)?;
        Ok(Net::new(net, store, self.train.lr))
    }

    /// Fine vertex reached by each enhancer output.
    fn output_order(&self, net: &Net<Enhancer>) -> meshrecon::Result<Vec<usize>> {
        let t = self.synth.template.template();
        target_order(net.arch.ancestors(), &t.coarse, &t.fine)
    }
}

fn node_matrix(mesh: &Mesh, descriptors: &Tensor) -> meshrecon::Result<Tensor> {
    let (n, d) = (mesh.num_vertices(), descriptors.shape()[1]);
    let mut data = Vec::with_capacity(n * (3 + d));
    for (v, row) in mesh.vertices().iter().zip(descriptors.data().chunks(d)) {
        data.extend_from_slice(v);
        data.extend_from_slice(row);
    }
    Tensor::new(vec![n, 3 + d], data)
}

#[derive(Args, Debug)]
pub struct TrainEnhancerArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
}

pub fn train_enhancer(a: TrainEnhancerArgs) -> Outcome {
    let mut cfg: TrainEnhancerRun = load(&a.common)?;
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.train.seed = cfg.seed;
    cfg.data = a.data.or(cfg.data);
    validated(cfg.synth.validate())?;
    let template = cfg.synth.template.template();
    validated(cfg.build(&template.coarse).and_then(|n| cfg.output_order(&n)).map(|_| ()))?;
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let dir = out_dir(&a.common)?;
    let data = dataset_for(&cfg.data, &cfg.synth, SetMode::Coupled)?;
    let mut net = cfg.build(&template.coarse)?;
    let order = cfg.output_order(&net)?;
    let pairs: Vec<EnhancerSample> = data
        .samples
        .iter()
        .map(|s| {
            let fine: Vec<_> = order.iter().map(|&j| s.fine.vertices()[j]).collect();
            Ok(EnhancerSample {
                nodes: node_matrix(&s.coarse, &s.shot.descriptors)?,
                fine: Tensor::new(vec![fine.len(), 3], fine.concat())?,
            })
        })
        .collect::<meshrecon::Result<_>>()?;
    let mut obs = observer(&dir, &cfg)?;
    let records = fit_enhancer(&mut net, &pairs, &cfg.train, None, &mut obs)?;
    save_checkpoint(&dir, "enhancer", "enhancer", &cfg, records.len() as u64, &net.store)?;
    write_json(&dir.join("report.json"), &records)?;
    let (first, last) = (records.first().map_or(0.0, |r| r.l_pos), records.last().map_or(0.0, |r| r.l_pos));
    summarize(
        Some(&dir),
        &[
            format!("{} epochs on {} pairs, {} output vertices", records.len(), pairs.len(), net.arch.output_vertices()),
            format!("position loss {} -> {}", fmt(first), fmt(last)),
        ],
    )
}

#[derive(Args, Debug)]
pub struct UpsampleArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `train-enhancer`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Coarse OBJ mesh.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Descriptor tensor (`.shot`, as written by `shot`); computed when absent.
    #[arg(long)]
    shot: Option<PathBuf>,
}

pub fn upsample(a: UpsampleArgs) -> Outcome {
    let model = a.model.clone().ok_or_else(|| Failure::usage("--model is required"))?;
    require_dir(&model)?;
    require_file(&model.join("enhancer.json"))?;
    let manifest = read_manifest(&model, "enhancer")?;
    let cfg: TrainEnhancerRun = serde_json::from_value(manifest.config)
        .map_err(|e| Failure::usage(format!("{}: {e}", model.join("enhancer.json").display())))?;
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let mesh_path = a.mesh.ok_or_else(|| Failure::usage("--mesh is required"))?;
    require_file(&mesh_path)?;
    if let Some(p) = &a.shot {
        require_file(p)?;
    }
    let dir = out_dir(&a.common)?;
    let coarse = load_mesh(&mesh_path)?;
    let descriptors = match &a.shot {
        Some(p) => meshrecon::shot::ShotField::from_tensor(&Tensor::load(p)?)?.descriptors,
        None => compute_shot(&coarse, &cfg.synth.shot)?.descriptors,
    };
    let mut net = cfg.build(&coarse)?;
    load_checkpoint(&model, "enhancer", &mut net.store)?;
    let fine = enhance(&net, &node_matrix(&coarse, &descriptors)?)?;
    let order = cfg.output_order(&net)?;
    let mut vertices = vec![[0.0; 3]; order.len()];
    for (k, &j) in order.iter().enumerate() {
        vertices[j].copy_from_slice(&fine.data()[3 * k..3 * k + 3]);
    }
    let mesh = Mesh::new(vertices, cfg.synth.template.template().fine.faces().to_vec())?;
    save_mesh(&mesh, dir.join("fine.obj"))?;
    summarize(
        Some(&dir),
        &[format!("{} -> {} vertices, wrote {}", coarse.num_vertices(), mesh.num_vertices(), dir.join("fine.obj").display())],
    )
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub split: String,
    /// PCK radii in mm.
    pub thresholds: Vec<f64>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            split: "test".into(),
            thresholds: eval::default_thresholds(),
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `train-cond`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory; the model's own synthetic set otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
}

pub fn eval(a: EvalArgs) -> Outcome {
    let mut cfg: EvalRun = load(&a.common)?;
    cfg.split = a.split.unwrap_or(cfg.split);
    if cfg.thresholds.is_empty() {
        return Err(Failure::usage("PCK needs at least one threshold"));
    }
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let model = a.model.ok_or_else(|| Failure::usage("--model is required"))?;
    require_dir(&model)?;
    require_file(&model.join("generator.json"))?;
    let manifest = read_manifest(&model, "generator")?;
    let run: TrainCondRun = serde_json::from_value(manifest.config)
        .map_err(|e| Failure::usage(format!("{}: {e}", model.join("generator.json").display())))?;
    let dir = out_dir(&a.common)?;
    let data = dataset_for(&a.data.or(run.data.clone()), &run.experiment.synth, SetMode::Coupled)?;
    let mut bundle = run.experiment.build(run.experiment.weights)?;
    load_checkpoint(&model, "generator", &mut bundle.generator.store)?;
    let samples = coupled_samples(&data.split(&cfg.split)?);
    let mean = mean_reconstruction_error(&bundle, &samples, 32)?;
    let keypoints = &run.experiment.template().keypoints;
    let mut rows = String::from("index,reconstruction_error_mm\n");
    let mut kp_pairs = Vec::with_capacity(samples.len());
    let ids = data.meta.split(&cfg.split)?;
    for (s, id) in samples.iter().zip(ids) {
        let (pos, _) = bundle.predict(&Tensor::stack(&[&s.image])?)?;
        let pred = Mesh::from_positions(&pos.index_outer(0), s.mesh.faces().to_vec())?;
        rows.push_str(&format!("{id},{}\n", eval::reconstruction_error(&pred, &s.mesh)?));
        kp_pairs.push((extract_keypoints(&pred, keypoints)?, extract_keypoints(&s.mesh, keypoints)?));
    }
    let curve = eval::pck_pooled(&kp_pairs, &cfg.thresholds)?;
    write_text(&dir.join("errors.csv"), &rows)?;
    write_text(&dir.join("pck.csv"), &curve.to_csv())?;
    write_text(&dir.join("pck.svg"), &PckCurve::to_svg(&[("model", &curve)]))?;
    write_json(
        &dir.join("eval.json"),
        &serde_json::json!({ "split": cfg.split, "samples": samples.len(), "reconstruction_error_mm": mean, "pck": curve }),
    )?;
    summarize(
        Some(&dir),
        &[
            format!("{} {} samples: mean per-vertex L1 error {} mm", samples.len(), cfg.split, fmt(mean)),
            format!("PCK AUC over {}-{} mm: {:.4}", cfg.thresholds[0], cfg.thresholds[cfg.thresholds.len() - 1], curve.auc),
        ],
    )
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateRun {
    pub experiment: ConditionalExperiment,
    pub data: Option<PathBuf>,
    /// Row keys to run (all rows when absent).
    pub rows: Option<Vec<String>>,
}

impl Default for AblateRun {
    fn default() -> Self {
        let mut experiment = ConditionalExperiment::default();
        experiment.synth.count = 60;
        experiment.train.epochs = 10;
        Self {
            experiment,
            data: None,
            rows: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    /// Comma-separated row keys.
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<String>>,
}

pub fn ablate(a: AblateArgs) -> Outcome {
    let mut cfg: AblateRun = load(&a.common)?;
    a.train.apply(&mut cfg.experiment.train);
    cfg.data = a.train.data.clone().or(cfg.data);
    cfg.rows = a.rows.or(cfg.rows);
    check_experiment(&cfg.experiment)?;
    let grid = eval::ablation_grid();
    let rows: Vec<AblationRow> = match &cfg.rows {
        Some(keys) => validated(eval::select_rows(&grid, keys))?,
        None => grid,
    };
    if print_if_asked(&a.common, &cfg)? {
        return Ok(());
    }
    let dir = out_dir(&a.common)?;
    let data = dataset_for(&cfg.data, &cfg.experiment.synth, SetMode::Coupled)?;
    let exp = &cfg.experiment;
    let results = eval::run_ablation(&rows, |row| {
        let row_dir = dir.join("rows").join(&row.key);
        let mut trace = TraceWriter::create(&row_dir)?;
        Ok(exp.run(&data, row.weights, &mut trace)?.1.trained_error)
    });
    write_text(&dir.join("ablation.csv"), &eval::ablation_csv(&results))?;
    write_text(&dir.join("ablation.json"), &eval::ablation_json(&results)?)?;
    let lines: Vec<String> = results
        .iter()
        .map(|r| match (&r.error_mm, &r.failure) {
            (Some(e), _) => format!("{:<24} {} mm", r.row.key, fmt(*e)),
            (None, f) => format!("{:<24} failed: {}", r.row.key, f.as_deref().unwrap_or("unknown")),
        })
        .collect();
    summarize(Some(&dir), &lines)
}
