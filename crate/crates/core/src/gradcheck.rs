//! Registered finite-difference checks: every differentiable primitive,
//! every loss term and the full network stacks, each runnable per seed.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{
    check_gradients, BatchNormMode, ConvGeometry, CsrMatrix, GradCheckOptions, Graph, Mode, ParamStore, Session, Var,
};
use crate::error::Result;
use crate::gan::{
    Discriminator, DiscriminatorConfig, Enhancer, EnhancerConfig, Generator, GeneratorConfig, HeadKind,
    ImageCritic, ImageDiscriminator, ImageDiscriminatorConfig, ImageGenerator, ImageGeneratorConfig, ImageToMesh,
    MeshCritic, MeshToImage,
};
use crate::losses::{self, LossConfig, LossTarget, LossTopology, LossWeights, NormalVariant, QuadricForm};
use crate::mesh::{Mesh, TemplateKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Primitive,
    Loss,
    Network,
}

/// One check; `run(seed)` returns the relative error.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub group: Group,
    pub run: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub group: Group,
    /// Worst relative error over the seeds that ran.
    pub max_rel_error: f64,
    pub seeds: usize,
    pub failure: Option<String>,
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Entries with magnitude in `[0.1, 1)`, so kinks sit far from every sample.
fn away(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, r, 0.1, 1.0);
    t.data_mut().iter_mut().for_each(|x| {
        if r.gen_bool(0.5) {
            *x = -*x
        }
    });
    t
}

/// Contracts any output with fixed random weights.
fn weighted(g: &Graph, out: Var, seed: u64) -> Result<Var> {
    let w = uniform(&g.shape(out), &mut rng(seed, 0x3e1), -1.0, 1.0);
    g.dot(out, g.constant(w))
}

/// Central-difference step. Small enough that a perturbation rarely
/// straddles a piecewise-linear kink inside a deep stack.
pub const STEP: f64 = 1e-6;

fn check<F>(inputs: &[Tensor], seed: u64, coords: usize, f: F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step: STEP,
        coords_per_input: coords,
        seed,
    };
    Ok(check_gradients(inputs, |g, v| weighted(g, f(g, v)?, seed), &opts)?.rel_error)
}

/// Checks a network over its trainable parameters and `extra` inputs.
fn net_check<F>(store: &ParamStore, extra: &[Tensor], seed: u64, coords: usize, f: F) -> Result<f64>
where
    F: Fn(&Session, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor> = store.trainable_ids().into_iter().map(|id| store.value(id).clone()).collect();
    let k = inputs.len();
    inputs.extend_from_slice(extra);
    check(&inputs, seed, coords, |g, v| {
        let s = Session::from_vars(g, store, &v[..k], Mode::Train)?;
        f(&s, &v[k..])
    })
}

macro_rules! unary {
    ($name:literal, $sample:expr, $f:expr) => {
        GradCase {
            name: $name,
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 1);
                let x = $sample(&[3, 4], &mut r);
                check(&[x], seed, usize::MAX, |g, v| Ok($f(g, v[0])))
            },
        }
    };
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, r, 0.2, 2.0)
}

fn any(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, r, -2.0, 2.0)
}

fn primitives() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add/sub/mul (broadcast)",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 2);
                let (a, b, c) = (any(&[2, 3, 4], &mut r), any(&[3, 4], &mut r), any(&[2, 3, 4], &mut r));
                check(&[a, b, c], seed, usize::MAX, |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let d = g.sub(v[2], v[1])?;
                    g.mul(s, d)
                })
            },
        },
        unary!("neg/scale/add_scalar", any, |g: &Graph, x| g.add_scalar(g.scale(g.neg(x), 1.7), 0.3)),
        unary!("relu", away, |g: &Graph, x| g.relu(x)),
        unary!("leaky_relu", away, |g: &Graph, x| g.leaky_relu(x, 0.2)),
        unary!("sigmoid", any, |g: &Graph, x| g.sigmoid(x)),
        unary!("log_sigmoid", any, |g: &Graph, x| g.log_sigmoid(x)),
        unary!("log", positive, |g: &Graph, x| g.log(x)),
        unary!("abs", away, |g: &Graph, x| g.abs(x)),
        unary!("softmax", any, |g: &Graph, x| g.softmax(x).expect("rank >= 1")),
        unary!("sum", any, |g: &Graph, x| g.sum(x)),
        unary!("mean", any, |g: &Graph, x| g.mean(x)),
        unary!("l1_norm", away, |g: &Graph, x| g.l1_norm(x)),
        unary!("l2_norm_sq", any, |g: &Graph, x| g.l2_norm_sq(x)),
        unary!("sum_last_axis", any, |g: &Graph, x| g.sum_last_axis(x).expect("rank >= 1")),
        GradCase {
            name: "dot",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 3);
                check(&[any(&[4, 3], &mut r), any(&[4, 3], &mut r)], seed, usize::MAX, |g, v| g.dot(v[0], v[1]))
            },
        },
        GradCase {
            name: "matmul (batched)",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 4);
                check(&[any(&[2, 3, 4], &mut r), any(&[4, 5], &mut r)], seed, usize::MAX, |g, v| g.matmul(v[0], v[1]))
            },
        },
        GradCase {
            name: "concat/slice/reshape",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 5);
                check(&[any(&[2, 3, 2], &mut r), any(&[2, 3, 4], &mut r)], seed, usize::MAX, |g, v| {
                    let c = g.concat(&[v[0], v[1]], 2)?;
                    let s = g.slice(c, 2, 1, 5)?;
                    g.reshape(s, &[6, 4])
                })
            },
        },
        GradCase {
            name: "conv2d",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 6);
                let inputs = [any(&[2, 2, 6, 6], &mut r), any(&[3, 2, 4, 4], &mut r), any(&[3], &mut r)];
                check(&inputs, seed, usize::MAX, |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::DOWN4))
            },
        },
        GradCase {
            name: "conv2d (5x3, stride 1)",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 7);
                let geom = ConvGeometry::new((5, 3), (1, 1), (2, 1));
                check(&[any(&[1, 2, 7, 3], &mut r), any(&[2, 2, 5, 3], &mut r)], seed, usize::MAX, |g, v| {
                    g.conv2d(v[0], v[1], None, geom)
                })
            },
        },
        GradCase {
            name: "conv_transpose2d",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 8);
                let inputs = [any(&[2, 3, 3, 3], &mut r), any(&[3, 2, 4, 4], &mut r), any(&[2], &mut r)];
                check(&inputs, seed, usize::MAX, |g, v| {
                    g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeometry::DOWN4)
                })
            },
        },
        GradCase {
            name: "batch_norm (train)",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 9);
                let inputs = [any(&[4, 3, 2, 2], &mut r), positive(&[3], &mut r), any(&[3], &mut r)];
                check(&inputs, seed, usize::MAX, |g, v| {
                    Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?.0)
                })
            },
        },
        GradCase {
            name: "batch_norm (eval)",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 10);
                let inputs = [any(&[3, 3, 4], &mut r), positive(&[3], &mut r), any(&[3], &mut r)];
                let mean = any(&[3], &mut r).into_data();
                let var = positive(&[3], &mut r).into_data();
                check(&inputs, seed, usize::MAX, |g, v| {
                    let mode = BatchNormMode::Eval {
                        mean: &mean,
                        var: &var,
                        eps: 1e-5,
                    };
                    Ok(g.batch_norm(v[0], v[1], v[2], mode)?.0)
                })
            },
        },
        GradCase {
            name: "spmm",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 11);
                let triplets: Vec<(usize, usize, f64)> =
                    (0..10).map(|_| (r.gen_range(0..4), r.gen_range(0..5), r.gen_range(-1.0..1.0))).collect();
                let m = Rc::new(CsrMatrix::from_triplets(4, 5, &triplets));
                check(&[any(&[2, 5, 3], &mut r)], seed, usize::MAX, |g, v| g.spmm(m.clone(), v[0]))
            },
        },
        GradCase {
            name: "gather_rows",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 12);
                let idx: Rc<[usize]> = (0..7).map(|_| r.gen_range(0..4)).collect();
                check(&[any(&[2, 4, 3], &mut r)], seed, usize::MAX, |g, v| g.gather_rows(v[0], idx.clone()))
            },
        },
        GradCase {
            name: "cross3",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 13);
                check(&[any(&[5, 3], &mut r), any(&[5, 3], &mut r)], seed, usize::MAX, |g, v| g.cross3(v[0], v[1]))
            },
        },
        GradCase {
            name: "normalize_rows",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 14);
                check(&[away(&[5, 3], &mut r)], seed, usize::MAX, |g, v| g.normalize_rows(v[0]))
            },
        },
        GradCase {
            name: "quadric_eval",
            group: Group::Primitive,
            run: |seed| {
                let mut r = rng(seed, 15);
                let forms: Rc<[QuadricForm]> = (0..4)
                    .map(|_| {
                        let mut q = QuadricForm::ZERO;
                        for _ in 0..3 {
                            let n = uniform(&[3], &mut r, -1.0, 1.0);
                            let len = n.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                            let n = [n.data()[0] / len, n.data()[1] / len, n.data()[2] / len];
                            q.add(&QuadricForm::plane(n, r.gen_range(-1.0..1.0)));
                        }
                        q
                    })
                    .collect();
                check(&[any(&[2, 4, 3], &mut r)], seed, usize::MAX, |g, v| g.quadric_eval(v[0], forms.clone()))
            },
        },
    ]
}

/// A jittered 42-vertex sphere as groundtruth and a nearby prediction.
fn loss_setup(seed: u64, variant: NormalVariant) -> Result<(LossTarget, LossTopology, Tensor, Tensor)> {
    let t = TemplateKind::Icosphere.template();
    let mut r = rng(seed, 20);
    let jitter = uniform(&[t.coarse.num_vertices(), 3], &mut r, -0.5, 0.5);
    let moved: Vec<[f64; 3]> = t
        .coarse
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| std::array::from_fn(|k| v[k] + jitter.row(i)[k]))
        .collect();
    let gt = t.coarse.with_vertices(moved)?;
    let n = gt.num_vertices();
    let gt_shot = uniform(&[n, 5], &mut r, -1.0, 1.0);
    let target = LossTarget::new(&gt, Some(&gt_shot))?;
    let loss_cfg = LossConfig {
        normal_variant: variant,
        ..LossConfig::default()
    };
    let topo = LossTopology::new(&gt, &t.keypoints, loss_cfg)?;
    let mut pred = gt.positions().into_data();
    let offsets = away(&[pred.len()], &mut r);
    pred.iter_mut().zip(offsets.data()).for_each(|(p, o)| *p += 0.5 * o);
    let mut shot = gt_shot.into_data();
    let noise = away(&[shot.len()], &mut r);
    shot.iter_mut().zip(noise.data()).for_each(|(s, o)| *s += 0.5 * o);
    Ok((target, topo, Tensor::new(vec![1, n, 3], pred)?, Tensor::new(vec![1, n, 5], shot)?))
}

macro_rules! loss_case {
    ($name:literal, $variant:expr, |$g:ident, $p:ident, $s:ident, $t:ident, $topo:ident| $body:expr) => {
        GradCase {
            name: $name,
            group: Group::Loss,
            run: |seed| {
                let (target, topology, pred, shot) = loss_setup(seed, $variant)?;
                check(&[pred, shot], seed, 24, |$g, v| {
                    let ($p, $s, $t, $topo) = (v[0], v[1], &target, &topology);
                    let _ = (&$p, &$s, &$topo);
                    $body
                })
            },
        }
    };
}

fn loss_cases() -> Vec<GradCase> {
    use NormalVariant::{AsWritten, Parallel};
    vec![
        loss_case!("l_pos", Parallel, |g, p, s, t, topo| losses::position_term(g, p, t)),
        loss_case!("l_shot", Parallel, |g, p, s, t, topo| losses::shot_term(g, s, t)),
        loss_case!("l_normal (parallel)", Parallel, |g, p, s, t, topo| losses::normal_term(g, p, t, topo)),
        loss_case!("l_normal (as written)", AsWritten, |g, p, s, t, topo| losses::normal_term(g, p, t, topo)),
        loss_case!("vertex laplacian", Parallel, |g, p, s, t, topo| losses::vertex_laplacian_term(g, p, t, topo)),
        loss_case!("keypoint laplacian", Parallel, |g, p, s, t, topo| losses::keypoint_laplacian_term(g, p, t, topo)),
        loss_case!("l_quadratic", Parallel, |g, p, s, t, topo| losses::quadratic_term(g, p, t)),
        loss_case!("composite", Parallel, |g, p, s, t, topo| {
            Ok(losses::composite_loss(g, p, Some(s), t, topo, &LossWeights::default())?.0)
        }),
        GradCase {
            name: "adversarial objectives",
            group: Group::Loss,
            run: |seed| {
                let mut r = rng(seed, 21);
                let inputs = [any(&[4, 1], &mut r), any(&[4, 1], &mut r), positive(&[1], &mut r)];
                check(&inputs, seed, usize::MAX, |g, v| {
                    let d = crate::gan::discriminator_loss(g, v[0], v[1])?;
                    let rec = g.sum(v[2]);
                    g.add(d, crate::gan::generator_loss(g, v[1], rec, 10.0)?)
                })
            },
        },
    ]
}

fn tetra() -> Mesh {
    Mesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    )
    .expect("valid tetrahedron")
}

fn small_generator(head: HeadKind) -> GeneratorConfig {
    GeneratorConfig {
        image_size: 16,
        in_channels: 1,
        encoder_widths: vec![4, 6, 8],
        decoder_widths: vec![6, 4],
        coarse_vertices: 6,
        shot_dim: 5,
        head,
        anchored: false,
    }
}

fn generator_case(seed: u64, head: HeadKind) -> Result<f64> {
    let cfg = small_generator(head);
    let (net, store) = Generator::build(&cfg, None, seed)?;
    let image = uniform(&[2, 1, 16, 16], &mut rng(seed, 30), -1.0, 1.0);
    net_check(&store, &[image], seed, 12, |s, x| {
        let (p, f) = net.forward(s, &store, x[0])?;
        s.graph().concat(&[p, f], 2)
    })
}

fn network_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "generator (dense head)",
            group: Group::Network,
            run: |seed| generator_case(seed, HeadKind::Dense),
        },
        GradCase {
            name: "generator (reshape head)",
            group: Group::Network,
            run: |seed| {
                let cfg = GeneratorConfig {
                    image_size: 16,
                    encoder_widths: vec![4, 6],
                    decoder_widths: vec![8],
                    coarse_vertices: 16,
                    shot_dim: 13,
                    ..small_generator(HeadKind::Reshape)
                };
                let (net, store) = Generator::build(&cfg, None, seed)?;
                let image = uniform(&[2, 1, 16, 16], &mut rng(seed, 31), -1.0, 1.0);
                net_check(&store, &[image], seed, 12, |s, x| {
                    let (p, f) = net.forward(s, &store, x[0])?;
                    s.graph().concat(&[p, f], 2)
                })
            },
        },
        GradCase {
            name: "mesh discriminator",
            group: Group::Network,
            run: |seed| {
                let cfg = DiscriminatorConfig {
                    position_widths: vec![3, 2, 1],
                    gcn_widths: vec![4, 3],
                    branch_dense: 6,
                    fusion_dense: 5,
                    ..DiscriminatorConfig::desk(4, 5)
                };
                let (net, store) = Discriminator::build(&cfg, &tetra().edges(), seed)?;
                let mut r = rng(seed, 32);
                let (pos, fields) = (any(&[3, 4, 3], &mut r), any(&[3, 4, 5], &mut r));
                net_check(&store, &[pos, fields], seed, 16, |s, x| net.logits(s, &store, x[0], x[1]))
            },
        },
        GradCase {
            name: "image generator",
            group: Group::Network,
            run: |seed| {
                let cfg = ImageGeneratorConfig {
                    encoder_widths: vec![3, 4],
                    decoder_widths: vec![3],
                    anchored: false,
                    ..ImageGeneratorConfig::desk(4, 2, 8)
                };
                let (net, store) = ImageGenerator::build(&cfg, None, seed)?;
                let mut r = rng(seed, 33);
                let (p, f) = (any(&[2, 4, 3], &mut r), any(&[2, 4, 2], &mut r));
                net_check(&store, &[p, f], seed, 12, |s, x| net.forward(s, &store, x[0], x[1]))
            },
        },
        GradCase {
            name: "image discriminator",
            group: Group::Network,
            run: |seed| {
                let cfg = ImageDiscriminatorConfig {
                    image_size: 8,
                    in_channels: 1,
                    widths: vec![3, 4],
                };
                let (net, store) = ImageDiscriminator::build(&cfg, seed)?;
                let img = any(&[3, 1, 8, 8], &mut rng(seed, 34));
                net_check(&store, &[img], seed, 12, |s, x| net.logits(s, &store, x[0]))
            },
        },
        GradCase {
            name: "enhancer",
            group: Group::Network,
            run: |seed| enhancer_case(seed, false),
        },
        GradCase {
            name: "enhancer (batch norm)",
            group: Group::Network,
            run: |seed| enhancer_case(seed, true),
        },
    ]
}

fn enhancer_case(seed: u64, batch_norm: bool) -> Result<f64> {
    let cfg = EnhancerConfig {
        cascade: vec![2, 2],
        target_vertices: 14,
        feature_dim: 2,
        reconstructor_widths: vec![6, 5],
        allow_pad: false,
        batch_norm,
    };
    let edges = [(0, 1), (1, 2), (2, 3), (0, 3)];
    let (net, store) = Enhancer::build(&cfg, 4, &edges, seed)?;
    let nodes = any(&[2, 4, 5], &mut rng(seed, 35));
    net_check(&store, &[nodes], seed, 16, |s, x| net.forward(s, &store, x[0]))
}

/// Every registered check.
pub fn cases() -> Vec<GradCase> {
    let mut all = primitives();
    all.extend(loss_cases());
    all.extend(network_cases());
    all
}

/// Runs each case for every seed (in parallel) and keeps the worst error.
pub fn run_suite(cases: &[GradCase], seeds: &[u64]) -> Vec<CaseOutcome> {
    cases
        .par_iter()
        .map(|case| {
            let results: Vec<Result<f64>> = seeds.par_iter().map(|&s| (case.run)(s)).collect();
            let mut worst = 0.0f64;
            let mut failure = None;
            let mut ran = 0;
            for (r, s) in results.into_iter().zip(seeds) {
                match r {
                    Ok(e) => {
                        ran += 1;
                        // NaN must stick: f64::max would drop it.
                        worst = if e.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(e) };
                    }
                    Err(e) => failure = failure.or(Some(format!("seed {s}: {e}"))),
                }
            }
            CaseOutcome {
                name: case.name,
                group: case.group,
                max_rel_error: worst,
                seeds: ran,
                failure,
            }
        })
        .collect()
}
