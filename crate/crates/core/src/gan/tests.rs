use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objectives::{cycle_objectives, Bound, CycleBatch};
use super::toy::{AffineCritic, AffineImageToMesh, AffineMeshToImage, ConstantCritic, ToyShape};
use super::*;
use crate::autodiff::{check_gradients, GradCheckOptions, Graph, Mode, ParamStore, Session, Var};
use crate::losses::{composite_loss_value, LossConfig, LossTarget, LossTopology, LossWeights};
use crate::mesh::{KeypointMap, Mesh, TemplateKind};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn desk_generator(n0: usize) -> GeneratorConfig {
    GeneratorConfig {
        coarse_vertices: n0,
        anchored: false,
        ..GeneratorConfig::desk()
    }
}

fn trainables(store: &ParamStore) -> Vec<Tensor> {
    store.trainable_ids().into_iter().map(|id| store.value(id).clone()).collect()
}

/// Gradient check of `sum(w * f(params, inputs))` over the network
/// parameters and the extra inputs, with `coords` sampled per tensor.
fn net_gradcheck<F>(store: &ParamStore, extra: &[Tensor], coords: usize, seed: u64, f: F) -> f64
where
    F: Fn(&Session, &[Var]) -> crate::Result<Var>,
{
    let mut inputs = trainables(store);
    let k = inputs.len();
    inputs.extend_from_slice(extra);
    let weights = std::cell::RefCell::new(None::<Tensor>);
    let report = check_gradients(
        &inputs,
        |g: &Graph, vars: &[Var]| {
            let s = Session::from_vars(g, store, &vars[..k], Mode::Train)?;
            let out = f(&s, &vars[k..])?;
            let shape = g.shape(out);
            let w = weights
                .borrow_mut()
                .get_or_insert_with(|| random(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), 1.0))
                .clone();
            Ok(g.sum(g.mul(out, g.constant(w))?))
        },
        &GradCheckOptions {
            coords_per_input: coords,
            seed,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    report.rel_error
}

#[test]
fn desk_generator_shapes() {
    let cfg = desk_generator(24);
    let (net, store) = Generator::build(&cfg, None, 0).unwrap();
    let g = Graph::new();
    let s = Session::frozen(&g, &store, Mode::Train);
    let images = g.constant(random(&[2, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(1), 1.0));
    let (p, f) = net.forward(&s, &store, images).unwrap();
    assert_eq!(g.shape(p), [2, 24, 3]);
    assert_eq!(g.shape(f), [2, 24, 29]);
}

#[test]
fn eval_forward_with_batch_one() {
    let cfg = desk_generator(42);
    let (net, store) = Generator::build(&cfg, None, 0).unwrap();
    let g = Graph::new();
    let s = Session::frozen(&g, &store, Mode::Eval);
    let images = g.constant(random(&[1, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(2), 1.0));
    let (p, f) = net.forward(&s, &store, images).unwrap();
    assert_eq!(g.shape(p), [1, 42, 3]);
    assert!(g.value(p).is_finite() && g.value(f).is_finite());
}

#[test]
fn full_scale_generator_shapes() {
    let cfg = GeneratorConfig::full_scale();
    let (net, store) = Generator::build(&cfg, None, 0).unwrap();
    let g = Graph::new();
    let s = Session::frozen(&g, &store, Mode::Eval);
    let images = g.constant(random(&[1, 3, 224, 224], &mut ChaCha8Rng::seed_from_u64(3), 1.0));
    let (p, f) = net.forward(&s, &store, images).unwrap();
    assert_eq!(g.shape(p), [1, 224, 3]);
    assert_eq!(g.shape(f), [1, 224, 221]);
}

#[test]
fn generator_config_errors_name_the_constraint() {
    let mut cfg = GeneratorConfig::desk();
    cfg.decoder_widths.pop();
    let err = Generator::build(&cfg, None, 0).unwrap_err().to_string();
    assert!(err.contains("decoder depth"), "{err}");

    let mut cfg = GeneratorConfig::desk();
    cfg.head = HeadKind::Reshape;
    let err = Generator::build(&cfg, None, 0).unwrap_err().to_string();
    assert!(err.contains("H*W"), "{err}");

    let mut cfg = GeneratorConfig::desk();
    cfg.image_size = 20;
    assert!(Generator::build(&cfg, None, 0).is_err());

    let cfg = GeneratorConfig::desk();
    assert!(Generator::build(&cfg, None, 0).is_err(), "anchored config needs an anchor");
}

#[test]
fn anchored_generator_adds_the_template() {
    let cfg = GeneratorConfig::desk();
    let anchor = TemplateKind::Icosphere.template().coarse.positions();
    let (net, store) = Generator::build(&cfg, Some(&anchor), 5).unwrap();
    let (free, free_store) = Generator::build(&GeneratorConfig { anchored: false, ..cfg }, None, 5).unwrap();
    let image = random(&[1, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(4), 1.0);
    let run = |net: &Generator, store: &ParamStore| {
        let g = Graph::new();
        let s = Session::frozen(&g, store, Mode::Eval);
        let (p, _) = net.forward(&s, store, g.constant(image.clone())).unwrap();
        let v = g.value(p).clone();
        v
    };
    let a = run(&net, &store);
    let b = run(&free, &free_store);
    for ((x, y), t) in a.data().iter().zip(b.data()).zip(anchor.data()) {
        assert!((x - y - t).abs() < 1e-12);
    }
}

#[test]
fn generator_gradcheck() {
    let cfg = GeneratorConfig {
        image_size: 16,
        encoder_widths: vec![4, 6, 8],
        decoder_widths: vec![6, 4],
        coarse_vertices: 6,
        shot_dim: 5,
        ..desk_generator(6)
    };
    let (net, store) = Generator::build(&cfg, None, 11).unwrap();
    let image = random(&[2, 1, 16, 16], &mut ChaCha8Rng::seed_from_u64(12), 1.0);
    let err = net_gradcheck(&store, &[image], 12, 13, |s, x| {
        let (p, f) = net.forward(s, &store, x[0])?;
        s.graph().concat(&[p, f], 2)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

fn tetra() -> Mesh {
    Mesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    )
    .unwrap()
}

#[test]
fn discriminator_probabilities_in_unit_interval() {
    let ico = &TemplateKind::Icosphere.template().coarse;
    let cfg = DiscriminatorConfig::desk(42, 29);
    let (net, store) = Discriminator::build(&cfg, &ico.edges(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let s = Session::frozen(&g, &store, Mode::Train);
    let logits = net
        .logits(&s, &store, g.constant(random(&[4, 42, 3], &mut rng, 10.0)), g.constant(random(&[4, 42, 29], &mut rng, 1.0)))
        .unwrap();
    let p = g.sigmoid(logits);
    assert_eq!(g.shape(p), [4, 1]);
    assert!(g.value(p).data().iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn discriminator_gradcheck() {
    let mesh = tetra();
    let cfg = DiscriminatorConfig {
        position_widths: vec![3, 2, 1],
        gcn_widths: vec![4, 3],
        branch_dense: 6,
        fusion_dense: 5,
        ..DiscriminatorConfig::desk(4, 5)
    };
    let (net, store) = Discriminator::build(&cfg, &mesh.edges(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pos = random(&[3, 4, 3], &mut rng, 1.0);
    let fields = random(&[3, 4, 5], &mut rng, 1.0);
    let err = net_gradcheck(&store, &[pos, fields], 16, 9, |s, x| net.logits(s, &store, x[0], x[1]));
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn mismatched_descriptor_width_rejected_at_build() {
    let t = TemplateKind::Icosphere.template();
    let gen = GeneratorConfig::desk();
    let disc = DiscriminatorConfig::desk(42, 28);
    let err = build_conditional(&gen, &disc, t, LossWeights::default(), LossConfig::default(), 2e-4, 0)
        .err()
        .expect("width mismatch must fail")
        .to_string();
    assert!(err.contains("descriptor width"), "{err}");
    assert!(build_conditional(&gen, &DiscriminatorConfig::desk(42, 29), t, LossWeights::default(), LossConfig::default(), 2e-4, 0).is_ok());
}

#[test]
fn image_networks_shapes_and_range() {
    let anchor = TemplateKind::Icosphere.template().coarse.positions();
    let (gi, gis) = ImageGenerator::build(&ImageGeneratorConfig::desk(42, 29, 32), Some(&anchor), 1).unwrap();
    let (di, dis) = ImageDiscriminator::build(&ImageDiscriminatorConfig::desk(32, 1), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::new();
    let s1 = Session::frozen(&g, &gis, Mode::Train);
    let s2 = Session::frozen(&g, &dis, Mode::Train);
    let img = gi
        .forward(&s1, &gis, g.constant(random(&[2, 42, 3], &mut rng, 10.0)), g.constant(random(&[2, 42, 29], &mut rng, 1.0)))
        .unwrap();
    assert_eq!(g.shape(img), [2, 1, 32, 32]);
    assert!(g.value(img).data().iter().all(|&x| x > 0.0 && x < 1.0));
    assert_eq!(g.shape(di.logits(&s2, &dis, img).unwrap()), [2, 1]);
}

#[test]
fn image_networks_gradcheck() {
    let cfg = ImageGeneratorConfig {
        encoder_widths: vec![3, 4],
        decoder_widths: vec![3],
        anchored: false,
        ..ImageGeneratorConfig::desk(4, 2, 8)
    };
    let (gi, store) = ImageGenerator::build(&cfg, None, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, f) = (random(&[2, 4, 3], &mut rng, 1.0), random(&[2, 4, 2], &mut rng, 1.0));
    let err = net_gradcheck(&store, &[p, f], 12, 3, |s, x| gi.forward(s, &store, x[0], x[1]));
    assert!(err <= 1e-4, "image generator rel err {err}");

    let (di, store) = ImageDiscriminator::build(&ImageDiscriminatorConfig { image_size: 8, in_channels: 1, widths: vec![3, 4] }, 4).unwrap();
    let img = random(&[3, 1, 8, 8], &mut rng, 1.0);
    let err = net_gradcheck(&store, &[img], 12, 5, |s, x| di.logits(s, &store, x[0]));
    assert!(err <= 1e-4, "image discriminator rel err {err}");
}

fn square_edges() -> Vec<(usize, usize)> {
    vec![(0, 1), (1, 2), (2, 3), (0, 3)]
}

fn small_enhancer(cascade: Vec<usize>, target: usize, d: usize) -> EnhancerConfig {
    EnhancerConfig {
        cascade,
        target_vertices: target,
        feature_dim: d,
        reconstructor_widths: vec![6, 5],
        allow_pad: false,
        batch_norm: false,
    }
}

#[test]
fn enhancer_doubles_and_children_depend_on_parents() {
    let cfg = small_enhancer(vec![2], 8, 3);
    let (net, store) = Enhancer::build(&cfg, 4, &square_edges(), 1).unwrap();
    assert_eq!(net.output_vertices(), 8);
    let g = Graph::new();
    let s = Session::frozen(&g, &store, Mode::Train);
    let nodes = g.variable(random(&[1, 4, 6], &mut ChaCha8Rng::seed_from_u64(2), 1.0));
    let out = net.forward(&s, &store, nodes).unwrap();
    assert_eq!(g.shape(out), [1, 8, 3]);
    for child in 0..8 {
        let row = g.slice(g.slice(out, 1, child, child + 1).unwrap(), 2, 0, 1).unwrap();
        let grads = g.backward(g.sum(row)).unwrap();
        let grad = grads.get(nodes).unwrap();
        let parent = child % 4;
        assert!(grad.data()[parent * 6..parent * 6 + 6].iter().any(|&x| x != 0.0), "child {child}");
    }
}

#[test]
fn enhancer_gradcheck() {
    for batch_norm in [false, true] {
        let cfg = EnhancerConfig {
            batch_norm,
            ..small_enhancer(vec![2, 2], 14, 2)
        };
        let (net, store) = Enhancer::build(&cfg, 4, &square_edges(), 3).unwrap();
        let nodes = random(&[2, 4, 5], &mut ChaCha8Rng::seed_from_u64(4), 1.0);
        let err = net_gradcheck(&store, &[nodes], 16, 5, |s, x| net.forward(s, &store, x[0]));
        assert!(err <= 1e-4, "batch_norm {batch_norm}: rel err {err}");
    }
}

#[test]
fn enhancer_counts_for_full_scale_presets() {
    let coarse = &TemplateKind::CapsuleHand.template().coarse;
    assert_eq!(coarse.num_vertices(), 224);
    let edges = coarse.edges();
    let dome = EnhancerConfig::dome();
    assert_eq!(dome.expanded(224), 8960);
    let (net, _) = Enhancer::build(&dome, 224, &edges, 0).unwrap();
    assert_eq!(net.output_vertices(), 7907);
    let frei = EnhancerConfig::freihand();
    assert_eq!(frei.expanded(224), 672);
    let (net, _) = Enhancer::build(&frei, 224, &edges, 0).unwrap();
    assert_eq!(net.output_vertices(), 778);
    let strict = EnhancerConfig { allow_pad: false, ..frei };
    assert!(Enhancer::build(&strict, 224, &edges, 0).is_err());
}

#[test]
fn count_adapter_trims_and_pads() {
    assert_eq!(count_adapter(6, 4), vec![0, 1, 2, 3]);
    assert_eq!(count_adapter(3, 7), vec![0, 1, 2, 0, 1, 2, 0]);
}

#[test]
fn expanded_edges_connect_all_child_pairs() {
    let e = expand_edges(3, &[(0, 1)], 2);
    assert_eq!(e, vec![(0, 1), (0, 4), (3, 1), (3, 4)]);
}

#[test]
fn enhancer_permutation_equivariance() {
    let cfg = small_enhancer(vec![3], 12, 2);
    let edges = square_edges();
    let perm = [2usize, 0, 3, 1];
    let inv = {
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    };
    let permuted_edges: Vec<_> = edges.iter().map(|&(u, v)| (inv[u], inv[v])).collect();
    let (net, store) = Enhancer::build(&cfg, 4, &edges, 7).unwrap();
    let (net_p, _) = Enhancer::build(&cfg, 4, &permuted_edges, 7).unwrap();
    let nodes = random(&[4, 5], &mut ChaCha8Rng::seed_from_u64(8), 1.0);
    // Row i of the permuted input is row perm[i] of the original.
    let rows: Vec<Vec<f64>> = (0..4).map(|i| nodes.row(perm[i]).to_vec()).collect();
    let permuted = Tensor::from_rows(&rows).unwrap();
    let a = super::enhance(&Net::new(net, store.clone(), 0.0), &nodes).unwrap();
    let b = super::enhance(&Net::new(net_p, store, 0.0), &permuted).unwrap();
    for k in 0..3 {
        for i in 0..4 {
            let pa = a.row(k * 4 + perm[i]);
            let pb = b.row(k * 4 + i);
            for c in 0..3 {
                assert!((pa[c] - pb[c]).abs() < 1e-10, "branch {k} node {i}");
            }
        }
    }
}

#[test]
fn cgan_closed_forms() {
    let ln2 = std::f64::consts::LN_2;
    let (d, g) = cgan_objectives(&[0.5; 4], &[0.5; 4], 0.0, 10.0);
    assert!((d - 2.0 * ln2).abs() < 1e-12);
    assert!((g - ln2).abs() < 1e-12);
    let (_, g) = cgan_objectives(&[0.3], &[0.5], 0.37, 10.0);
    assert!((g - (ln2 + 3.7)).abs() < 1e-12);
    let (_, g0) = cgan_objectives(&[0.3], &[0.8], 5.0, 0.0);
    assert!((g0 + 0.8f64.ln()).abs() < 1e-12);
}

#[test]
fn graph_objectives_match_closed_forms_at_half() {
    let ln2 = std::f64::consts::LN_2;
    let g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[3, 1]));
    let d = discriminator_loss(&g, zero, zero).unwrap();
    assert!((g.scalar(d) - 2.0 * ln2).abs() < 1e-12);
    let c = g.constant(Tensor::scalar(0.25));
    let l = generator_loss(&g, zero, c, 10.0).unwrap();
    assert!((g.scalar(l) - (ln2 + 2.5)).abs() < 1e-12);
}

#[test]
fn objective_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[4, 1], &mut rng, 3.0), random(&[4, 1], &mut rng, 3.0), Tensor::scalar(0.7)];
    let report = check_gradients(
        &inputs,
        |g, v| {
            let d = discriminator_loss(g, v[0], v[1])?;
            let l = generator_loss(g, v[1], v[2], 10.0)?;
            g.add(d, l)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.rel_error <= 1e-6, "{}", report.rel_error);
}

#[test]
fn large_delta_argmin_follows_composite() {
    // Grid over a scalar offset added to a prediction; critic logit varies
    // with the offset so the adversarial term alone prefers another point.
    let mesh = tetra();
    let topo = LossTopology::new(&mesh, &KeypointMap::new(vec![0, 1]).unwrap(), LossConfig::default()).unwrap();
    let w = LossWeights {
        mu: 0.0,
        ..LossWeights::default()
    };
    let grid: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.05 + 0.013).collect();
    let mut best_c = (f64::INFINITY, 0.0);
    let mut best_g = (f64::INFINITY, 0.0);
    for &t in &grid {
        let pred = mesh.translated([t, 0.5 * t, 0.0]).map_vertices(|v| [v[0] * (1.0 + t), v[1], v[2]]);
        let c = composite_loss_value(&pred, None, &mesh, None, &topo, &w).unwrap().total;
        let fake = 1.0 / (1.0 + (-(3.0 * t)).exp());
        let (_, lg) = cgan_objectives(&[0.5], &[fake], c, 1e6);
        if c < best_c.0 {
            best_c = (c, t);
        }
        if lg < best_g.0 {
            best_g = (lg, t);
        }
    }
    assert_eq!(best_c.1, best_g.1);
}

const TOY: ToyShape = ToyShape {
    image: (1, 4, 7),
    mesh: (4, 4),
};

fn toy_data(rng: &mut ChaCha8Rng, b: usize) -> (Tensor, Vec<Mesh>, Vec<Tensor>) {
    let images = random(&[b, 1, 4, 7], rng, 1.0);
    let base = tetra();
    let meshes: Vec<Mesh> = (0..b)
        .map(|_| {
            let jitter: Vec<[f64; 3]> = base
                .vertices()
                .iter()
                .map(|v| [v[0] + rng.gen_range(-0.1..0.1), v[1] + rng.gen_range(-0.1..0.1), v[2] + rng.gen_range(-0.1..0.1)])
                .collect();
            base.with_vertices(jitter).unwrap()
        })
        .collect();
    let shots = (0..b).map(|_| random(&[4, 4], rng, 1.0)).collect();
    (images, meshes, shots)
}

fn toy_topology() -> LossTopology {
    LossTopology::new(&tetra(), &KeypointMap::new(vec![0, 1]).unwrap(), LossConfig::default()).unwrap()
}

#[test]
fn identity_toys_have_zero_cycle_terms() {
    let (gm, gms) = AffineImageToMesh::identity(TOY).unwrap();
    let (gi, gis) = AffineMeshToImage::identity(TOY).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (images, meshes, shots) = toy_data(&mut rng, 3);
    let target = LossTarget::batch(&meshes.iter().zip(&shots).map(|(m, s)| (m, Some(s))).collect::<Vec<_>>()).unwrap();
    let empty = ParamStore::default();
    let g = Graph::new();
    let (s_gm, s_gi, s_c) = (
        Session::frozen(&g, &gms, Mode::Train),
        Session::frozen(&g, &gis, Mode::Train),
        Session::frozen(&g, &empty, Mode::Train),
    );
    let batch = CycleBatch {
        images: g.constant(images),
        mesh_positions: g.constant(target.positions().clone()),
        mesh_fields: g.constant(target.shot().unwrap().clone()),
    };
    let terms = cycle_objectives(
        &g,
        Bound { arch: &gm as &dyn ImageToMesh, session: &s_gm, store: &gms },
        Bound { arch: &gi as &dyn MeshToImage, session: &s_gi, store: &gis },
        Bound { arch: &ConstantCritic as &dyn MeshCritic, session: &s_c, store: &empty },
        Bound { arch: &ConstantCritic as &dyn ImageCritic, session: &s_c, store: &empty },
        &batch,
        &target,
        &toy_topology(),
        &LossWeights::default(),
    )
    .unwrap();
    assert!(terms.cyc_image.abs() < 1e-12, "{}", terms.cyc_image);
    assert!(terms.cyc_mesh.abs() < 1e-12, "{}", terms.cyc_mesh);
    let ln2 = std::f64::consts::LN_2;
    assert!((terms.total_g - 2.0 * ln2).abs() < 1e-12);
    assert!((terms.d_mesh - 2.0 * ln2).abs() < 1e-12);
}

/// Recomputes each cycle term by hand on plain tensors.
#[test]
fn cycle_terms_match_independent_computation() {
    let (gm, gms) = AffineImageToMesh::build(TOY, 1);
    let (gi, gis) = AffineMeshToImage::build(TOY, 2);
    let (dm, dms) = AffineCritic::build(28, 3);
    let (di, dis) = AffineCritic::build(28, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (images, meshes, shots) = toy_data(&mut rng, 2);
    let target = LossTarget::batch(&meshes.iter().zip(&shots).map(|(m, s)| (m, Some(s))).collect::<Vec<_>>()).unwrap();
    let topo = toy_topology();
    let w = LossWeights::default();

    let affine = |store: &ParamStore, x: &[f64], out: usize| -> Vec<f64> {
        let ids = store.trainable_ids();
        let (wt, b) = (store.value(ids[0]), store.value(ids[1]));
        (0..out)
            .map(|o| b.data()[o] + x.iter().enumerate().map(|(i, xi)| xi * wt.data()[i * out + o]).sum::<f64>())
            .collect()
    };
    let log_sig = |z: f64| -(1.0 + (-z).exp()).ln();
    let mut cyc_image = 0.0;
    let mut adv_m = 0.0;
    let mut adv_i = 0.0;
    let mut cyc_mesh = 0.0;
    for b in 0..2 {
        let img = images.index_outer(b).into_data();
        let nodes = affine(&gms, &img, 28);
        let back = affine(&gis, &nodes, 28);
        cyc_image += back.iter().zip(&img).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        adv_m -= log_sig(affine(&dms, &nodes, 1)[0]) / 2.0;

        let mut real = Vec::new();
        for (v, row) in meshes[b].vertices().iter().enumerate() {
            real.extend_from_slice(row);
            real.extend_from_slice(shots[b].row(v));
        }
        let fake_img = affine(&gis, &real, 28);
        adv_i -= log_sig(affine(&dis, &fake_img, 1)[0]) / 2.0;
        let round = affine(&gms, &fake_img, 28);
        let pos: Vec<[f64; 3]> = (0..4).map(|v| [round[v * 7], round[v * 7 + 1], round[v * 7 + 2]]).collect();
        let shot = Tensor::new(vec![4, 4], (0..4).flat_map(|v| round[v * 7 + 3..v * 7 + 7].to_vec()).collect()).unwrap();
        let pred = meshes[b].with_vertices(pos).unwrap();
        cyc_mesh += composite_loss_value(&pred, Some(&shot), &meshes[b], Some(&shots[b]), &topo, &w).unwrap().total / 2.0;
    }

    let g = Graph::new();
    let sessions = [
        Session::frozen(&g, &gms, Mode::Train),
        Session::frozen(&g, &gis, Mode::Train),
        Session::frozen(&g, &dms, Mode::Train),
        Session::frozen(&g, &dis, Mode::Train),
    ];
    let batch = CycleBatch {
        images: g.constant(images),
        mesh_positions: g.constant(target.positions().clone()),
        mesh_fields: g.constant(target.shot().unwrap().clone()),
    };
    let t = cycle_objectives(
        &g,
        Bound { arch: &gm as &dyn ImageToMesh, session: &sessions[0], store: &gms },
        Bound { arch: &gi as &dyn MeshToImage, session: &sessions[1], store: &gis },
        Bound { arch: &dm as &dyn MeshCritic, session: &sessions[2], store: &dms },
        Bound { arch: &di as &dyn ImageCritic, session: &sessions[3], store: &dis },
        &batch,
        &target,
        &topo,
        &w,
    )
    .unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    assert!(close(t.cyc_image, cyc_image), "{} vs {cyc_image}", t.cyc_image);
    assert!(close(t.cyc_mesh, cyc_mesh), "{} vs {cyc_mesh}", t.cyc_mesh);
    assert!(close(t.g_mesh_adv, adv_m));
    assert!(close(t.g_image_adv, adv_i));
    assert!(close(t.total_g, adv_m + adv_i + 10.0 * (cyc_mesh + cyc_image)));
}

fn toy_cycle_bundle(seed: u64) -> CycleBundle<AffineImageToMesh, AffineMeshToImage, ConstantCritic, ConstantCritic> {
    let (gm, gms) = AffineImageToMesh::build(TOY, seed);
    let (gi, gis) = AffineMeshToImage::build(TOY, seed + 1);
    CycleBundle {
        mesh_generator: Net::new(gm, gms, 2e-4),
        image_generator: Net::new(gi, gis, 2e-4),
        mesh_critic: Net::new(ConstantCritic, ParamStore::default(), 2e-4),
        image_critic: Net::new(ConstantCritic, ParamStore::default(), 2e-4),
        weights: LossWeights::default(),
        topology: toy_topology(),
    }
}

fn toy_cycle_sets(seed: u64, n: usize) -> (Vec<Tensor>, Vec<MeshSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (images, meshes, shots) = toy_data(&mut rng, n);
    let images = (0..n).map(|i| images.index_outer(i)).collect();
    let meshes = meshes.into_iter().zip(shots).map(|(mesh, shot)| MeshSample { mesh, shot }).collect();
    (images, meshes)
}

#[test]
fn cycle_losses_decrease_on_affine_toy() {
    let mut bundle = toy_cycle_bundle(1);
    let (images, meshes) = toy_cycle_sets(2, 8);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let rec = train_cycle(&mut bundle, &images, &meshes, &cfg, &mut Silent).unwrap();
    assert_eq!(rec.len(), 50);
    for w in rec.windows(2) {
        assert!(w[1].terms.cyc_image < w[0].terms.cyc_image, "epoch {}", w[1].epoch);
        assert!(w[1].terms.cyc_mesh < w[0].terms.cyc_mesh, "epoch {}", w[1].epoch);
    }
}

#[test]
fn cycle_smoke_with_real_networks() {
    let t = TemplateKind::Icosphere.template();
    let gen = GeneratorConfig {
        image_size: 16,
        encoder_widths: vec![4, 8, 8],
        decoder_widths: vec![8, 4],
        ..GeneratorConfig::desk()
    };
    let img = ImageGeneratorConfig {
        encoder_widths: vec![4, 8],
        decoder_widths: vec![4],
        ..ImageGeneratorConfig::desk(42, 29, 16)
    };
    let mut bundle = build_cycle(
        &gen,
        &img,
        &DiscriminatorConfig::desk(42, 29),
        &ImageDiscriminatorConfig::desk(16, 1),
        t,
        LossWeights::default(),
        LossConfig::default(),
        2e-4,
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Tensor> = (0..8).map(|_| random(&[1, 16, 16], &mut rng, 1.0)).collect();
    let meshes: Vec<MeshSample> = (0..8)
        .map(|_| MeshSample {
            mesh: t.coarse.clone(),
            shot: random(&[42, 29], &mut rng, 0.3),
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let rec = train_cycle(&mut bundle, &images, &meshes, &cfg, &mut Silent).unwrap();
    assert_eq!(rec.len(), 1);
    assert!(rec[0].terms.total_g.is_finite());
}

fn coupled_toy(n: usize, seed: u64) -> Vec<CoupledSample> {
    let t = TemplateKind::Icosphere.template();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = 1.0 + rng.gen_range(-0.05..0.05);
            let mesh = t.coarse.scaled(s);
            CoupledSample {
                image: random(&[1, 16, 16], &mut rng, 1.0),
                mesh,
                shot: random(&[42, 29], &mut rng, 0.2),
            }
        })
        .collect()
}

fn small_conditional() -> ConditionalBundle<Generator, Discriminator> {
    let gen = GeneratorConfig {
        image_size: 16,
        encoder_widths: vec![4, 8, 8],
        decoder_widths: vec![8, 4],
        ..GeneratorConfig::desk()
    };
    build_conditional(
        &gen,
        &DiscriminatorConfig::desk(42, 29),
        TemplateKind::Icosphere.template(),
        LossWeights::default(),
        LossConfig::default(),
        2e-4,
        0,
    )
    .unwrap()
}

#[test]
fn conditional_smoke_emits_one_record() {
    let mut bundle = small_conditional();
    let data = coupled_toy(4, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut trace = TraceWriter::create(dir.path()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let rec = train_conditional(&mut bundle, &data, &cfg, &mut trace).unwrap();
    assert_eq!(rec.len(), 1);
    drop(trace);
    let text = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["loss_d", "loss_g", "adversarial", "composite"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn conditional_training_is_deterministic() {
    let data = coupled_toy(4, 2);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train_conditional(&mut small_conditional(), &data, &cfg, &mut Silent).unwrap();
    let b = train_conditional(&mut small_conditional(), &data, &cfg, &mut Silent).unwrap();
    assert_eq!(a, b);
}

#[test]
fn frozen_half_critic_generator_steps_cut_composite() {
    let small = small_conditional();
    let mut bundle = ConditionalBundle {
        generator: small.generator,
        discriminator: Net::new(ConstantCritic, ParamStore::default(), 0.0),
        weights: small.weights,
        topology: small.topology,
    };
    let data = coupled_toy(4, 3);
    let idx = [0, 1, 2, 3];
    let first = bundle.generator_step(&data, &idx).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = bundle.generator_step(&data, &idx).unwrap().total;
    }
    assert!(last <= 0.1 * first, "{first} -> {last}");
}

#[test]
fn enhancer_smoke_and_topology_mismatch() {
    let cfg = small_enhancer(vec![2], 8, 2);
    let (arch, store) = Enhancer::build(&cfg, 4, &square_edges(), 0).unwrap();
    let mut net = Net::new(arch, store, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<EnhancerSample> = (0..4)
        .map(|_| EnhancerSample {
            nodes: random(&[4, 5], &mut rng, 1.0),
            fine: random(&[8, 3], &mut rng, 1.0),
        })
        .collect();
    let tc = EnhancerTrainConfig {
        epochs: 2,
        batch_size: 2,
        ..EnhancerTrainConfig::default()
    };
    assert_eq!(train_enhancer(&mut net, &pairs, &tc, None, &mut Silent).unwrap().len(), 2);
    let bad = vec![EnhancerSample {
        nodes: random(&[4, 5], &mut rng, 1.0),
        fine: random(&[7, 3], &mut rng, 1.0),
    }];
    assert!(train_enhancer(&mut net, &bad, &tc, None, &mut Silent).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small_enhancer(vec![2], 8, 2);
    let (_, store) = Enhancer::build(&cfg, 4, &square_edges(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_checkpoint(dir.path(), "enh", "enhancer", &cfg, 17, &store).unwrap();
    let (_, mut other) = Enhancer::build(&cfg, 4, &square_edges(), 1).unwrap();
    let manifest = checkpoint::load_checkpoint(dir.path(), "enh", &mut other).unwrap();
    assert_eq!(manifest.step, 17);
    assert_eq!(manifest.kind, "enhancer");
    for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
        assert_eq!(a.value, b.value);
    }
    let back: EnhancerConfig = serde_json::from_value(manifest.config).unwrap();
    assert_eq!(back, cfg);
}
