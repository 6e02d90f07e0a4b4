//! Fixtures shared by the benchmarks.

use meshrecon::losses::{LossConfig, LossTarget, LossTopology};
use meshrecon::mesh::{Mesh, TemplateKind};
use meshrecon::shot::{compute_shot, ShotConfig};
use meshrecon::synth::{deform, SynthConfig};
use meshrecon::Tensor;

/// Deterministic values in `[-1, 1]`, no RNG needed.
pub fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.618 + phase).sin()).collect()).unwrap()
}

pub fn deformed(kind: TemplateKind, seed: u64) -> Mesh {
    let cfg = SynthConfig {
        template: kind,
        ..SynthConfig::default()
    };
    deform(kind.template(), &cfg, seed).unwrap().0
}

/// A batch of deformed icospheres with their descriptors, and the loss
/// topology of the template.
pub struct LossFixture {
    pub target: LossTarget,
    pub topology: LossTopology,
    pub pred: Tensor,
    pub pred_shot: Tensor,
}

pub fn loss_fixture(batch: usize) -> LossFixture {
    let t = TemplateKind::Icosphere.template();
    let cfg = ShotConfig::desk();
    let gts: Vec<Mesh> = (0..batch as u64).map(|s| deformed(TemplateKind::Icosphere, s)).collect();
    let shots: Vec<Tensor> = gts.iter().map(|m| compute_shot(m, &cfg).unwrap().descriptors).collect();
    let pairs: Vec<_> = gts.iter().zip(&shots).map(|(m, s)| (m, Some(s))).collect();
    let n = t.coarse.num_vertices();
    LossFixture {
        target: LossTarget::batch(&pairs).unwrap(),
        topology: LossTopology::new(&t.coarse, &t.keypoints, LossConfig::default()).unwrap(),
        pred: Tensor::stack(&vec![&t.coarse.positions(); batch]).unwrap().reshape(&[batch, n, 3]).unwrap(),
        pred_shot: filled(&[batch, n, cfg.output_dim], 0.3),
    }
}
