//! Adversarial and cycle-consistency objectives. Critics emit logits; the
//! losses use `log sigmoid` so saturated critics stay finite.

use serde::{Deserialize, Serialize};

use super::nets::{ImageCritic, ImageToMesh, MeshCritic, MeshToImage};
use crate::autodiff::{Graph, ParamStore, Session, Var};
use crate::error::Result;
use crate::losses::{composite_loss, LossTarget, LossTerms, LossTopology, LossWeights};

/// `-E[log D(real)] - E[log(1 - D(fake))]` from logits.
pub fn discriminator_loss(g: &Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let real = g.neg(g.mean(g.log_sigmoid(real_logits)));
    let fake = g.neg(g.mean(g.log_sigmoid(g.neg(fake_logits))));
    g.add(real, fake)
}

/// `-E[log D(fake)]` from logits.
pub fn generator_adversarial(g: &Graph, fake_logits: Var) -> Var {
    g.neg(g.mean(g.log_sigmoid(fake_logits)))
}

/// Adversarial term plus `delta` times the reconstruction loss.
pub fn generator_loss(g: &Graph, fake_logits: Var, reconstruction: Var, delta: f64) -> Result<Var> {
    g.add(generator_adversarial(g, fake_logits), g.scale(reconstruction, delta))
}

/// Closed-form `(loss_D, loss_G)` from critic probabilities in `(0, 1)`.
pub fn cgan_objectives(d_real: &[f64], d_fake: &[f64], composite: f64, delta: f64) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let loss_d = -mean(d_real, &|p| p.ln()) - mean(d_fake, &|p| (1.0 - p).ln());
    let loss_g = -mean(d_fake, &|p| p.ln()) + delta * composite;
    (loss_d, loss_g)
}

/// An architecture bound to a session for one forward pass.
pub struct Bound<'a, 'g, A: ?Sized> {
    pub arch: &'a A,
    pub session: &'a Session<'g>,
    pub store: &'a ParamStore,
}

impl<A: ?Sized> Clone for Bound<'_, '_, A> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<A: ?Sized> Copy for Bound<'_, '_, A> {}

/// The real samples of one unpaired cycle step.
pub struct CycleBatch {
    /// `[B, C, H, W]`.
    pub images: Var,
    /// `[B, N, 3]` and `[B, N, d]` of the (unrelated) real meshes.
    pub mesh_positions: Var,
    pub mesh_fields: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleTerms {
    pub d_mesh: f64,
    pub d_image: f64,
    pub g_mesh_adv: f64,
    pub g_image_adv: f64,
    pub cyc_mesh: f64,
    pub cyc_image: f64,
    pub total_g: f64,
    pub cyc_mesh_terms: LossTerms,
}

pub struct CycleGeneratorLoss {
    pub total: Var,
    pub g_mesh_adv: Var,
    pub g_image_adv: Var,
    pub cyc_mesh: Var,
    pub cyc_image: Var,
    pub cyc_mesh_terms: LossTerms,
}

/// Generator-side losses: two adversarial terms and both cycle terms,
/// `total = adv_M + adv_I + delta * (cyc_mesh + cyc_image)`.
#[allow(clippy::too_many_arguments)]
pub fn cycle_generator_loss(
    g: &Graph,
    gm: Bound<dyn ImageToMesh>,
    gi: Bound<dyn MeshToImage>,
    dm: Bound<dyn MeshCritic>,
    di: Bound<dyn ImageCritic>,
    batch: &CycleBatch,
    mesh_target: &LossTarget,
    topo: &LossTopology,
    weights: &LossWeights,
) -> Result<CycleGeneratorLoss> {
    let (pos, shot) = gm.arch.forward(gm.session, gm.store, batch.images)?;
    let recon_images = gi.arch.forward(gi.session, gi.store, pos, shot)?;
    let diff = g.sub(recon_images, batch.images)?;
    let b = g.shape(batch.images)[0] as f64;
    let cyc_image = g.scale(g.l1_norm(diff), 1.0 / b);

    let fake_images = gi.arch.forward(gi.session, gi.store, batch.mesh_positions, batch.mesh_fields)?;
    let (round_pos, round_shot) = gm.arch.forward(gm.session, gm.store, fake_images)?;
    let (cyc_mesh, cyc_mesh_terms) = composite_loss(g, round_pos, Some(round_shot), mesh_target, topo, weights)?;

    let g_mesh_adv = generator_adversarial(g, dm.arch.logits(dm.session, dm.store, pos, shot)?);
    let g_image_adv = generator_adversarial(g, di.arch.logits(di.session, di.store, fake_images)?);
    let cycles = g.add(cyc_mesh, cyc_image)?;
    let total = g.add(g.add(g_mesh_adv, g_image_adv)?, g.scale(cycles, weights.delta))?;
    Ok(CycleGeneratorLoss {
        total,
        g_mesh_adv,
        g_image_adv,
        cyc_mesh,
        cyc_image,
        cyc_mesh_terms,
    })
}

/// Critic-side losses with generator outputs detached: `(mesh, image)`.
pub fn cycle_discriminator_losses(
    g: &Graph,
    gm: Bound<dyn ImageToMesh>,
    gi: Bound<dyn MeshToImage>,
    dm: Bound<dyn MeshCritic>,
    di: Bound<dyn ImageCritic>,
    batch: &CycleBatch,
) -> Result<(Var, Var)> {
    let (pos, shot) = gm.arch.forward(gm.session, gm.store, batch.images)?;
    let (pos, shot) = (g.detach(pos), g.detach(shot));
    let fake_images = g.detach(gi.arch.forward(gi.session, gi.store, batch.mesh_positions, batch.mesh_fields)?);
    let real_m = dm.arch.logits(dm.session, dm.store, batch.mesh_positions, batch.mesh_fields)?;
    let fake_m = dm.arch.logits(dm.session, dm.store, pos, shot)?;
    let real_i = di.arch.logits(di.session, di.store, batch.images)?;
    let fake_i = di.arch.logits(di.session, di.store, fake_images)?;
    Ok((discriminator_loss(g, real_m, fake_m)?, discriminator_loss(g, real_i, fake_i)?))
}

/// All cycle terms evaluated on one batch.
#[allow(clippy::too_many_arguments)]
pub fn cycle_objectives(
    g: &Graph,
    gm: Bound<dyn ImageToMesh>,
    gi: Bound<dyn MeshToImage>,
    dm: Bound<dyn MeshCritic>,
    di: Bound<dyn ImageCritic>,
    batch: &CycleBatch,
    mesh_target: &LossTarget,
    topo: &LossTopology,
    weights: &LossWeights,
) -> Result<CycleTerms> {
    let (d_mesh, d_image) = cycle_discriminator_losses(g, gm, gi, dm, di, batch)?;
    let gl = cycle_generator_loss(g, gm, gi, dm, di, batch, mesh_target, topo, weights)?;
    Ok(CycleTerms {
        d_mesh: g.scalar(d_mesh),
        d_image: g.scalar(d_image),
        g_mesh_adv: g.scalar(gl.g_mesh_adv),
        g_image_adv: g.scalar(gl.g_image_adv),
        cyc_mesh: g.scalar(gl.cyc_mesh),
        cyc_image: g.scalar(gl.cyc_image),
        total_g: g.scalar(gl.total),
        cyc_mesh_terms: gl.cyc_mesh_terms,
    })
}
