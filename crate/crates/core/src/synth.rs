//! Procedural coupled and unpaired datasets: templates deformed by smooth
//! random bumps, rendered by an orthographic z-buffer with flat shading.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{dot, load_mesh, norm, save_mesh, sub, Mesh, Template, TemplateKind, Vec3};
use crate::shot::{compute_shot, ShotConfig, ShotField};
use crate::tensor::Tensor;

/// Resampling attempts before a degenerate deformation is an error.
pub const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub template: TemplateKind,
    /// Peak bump height in mm.
    pub amplitude: f64,
    pub count: usize,
    pub image_size: usize,
    pub splits: Vec<SplitSpec>,
    pub bumps: usize,
    /// Angular width of each bump, in units of unit-direction distance.
    pub bump_width: f64,
    /// A deformed face must keep this fraction of the template's smallest
    /// face area.
    pub min_area_ratio: f64,
    pub shot: ShotConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            template: TemplateKind::Icosphere,
            amplitude: 2.0,
            count: 10,
            image_size: 32,
            splits: vec![
                SplitSpec {
                    name: "train".into(),
                    fraction: 0.8,
                },
                SplitSpec {
                    name: "test".into(),
                    fraction: 0.2,
                },
            ],
            bumps: 6,
            bump_width: 0.5,
            min_area_ratio: 0.1,
            shot: ShotConfig::desk(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("amplitude must be a non-negative number, got {}", self.amplitude)));
        }
        if self.count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.bump_width > 0.0) || !(0.0..1.0).contains(&self.min_area_ratio) {
            return Err(Error::Config("bump width must be positive and min_area_ratio in [0, 1)".into()));
        }
        if self.splits.is_empty() || self.splits.iter().any(|s| !(s.fraction >= 0.0)) {
            return Err(Error::Config("splits must be non-empty with non-negative fractions".into()));
        }
        let total: f64 = self.splits.iter().map(|s| s.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        let mut names: Vec<&str> = self.splits.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("split names must be distinct".into()));
        }
        self.shot.validate()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generation seed of sample `index` in `stream`.
pub fn sample_seed(seed: u64, stream: u64, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index as u64)
}

/// Stream used for coupled samples and for each side of an unpaired set.
pub const COUPLED_STREAM: u64 = 0;
pub const IMAGE_STREAM: u64 = 1;
pub const MESH_STREAM: u64 = 2;

#[derive(Clone, Debug)]
struct Bump {
    center: Vec3,
    height: f64,
}

fn unit(v: Vec3) -> Vec3 {
    let n = norm(v);
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Axis-aligned half extents of the coarse template around the origin.
fn half_extents(mesh: &Mesh) -> Vec3 {
    let mut h = [0.0f64; 3];
    for v in mesh.vertices() {
        for k in 0..3 {
            h[k] = h[k].max(v[k].abs());
        }
    }
    h
}

fn draw_bumps(rng: &mut ChaCha8Rng, count: usize, amplitude: f64) -> Vec<Bump> {
    (0..count)
        .map(|_| {
            // Uniform direction on the sphere.
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            Bump {
                center: [r * phi.cos(), r * phi.sin(), z],
                height: if amplitude > 0.0 { rng.gen_range(-amplitude..amplitude) } else { 0.0 },
            }
        })
        .collect()
}

/// Moves every vertex radially by the bump field evaluated at its
/// extent-normalized direction. The field is a function of position, so a
/// coarse vertex and its copy in the fine mesh move identically.
fn apply_bumps(mesh: &Mesh, bumps: &[Bump], width: f64, extents: Vec3) -> Mesh {
    let w2 = 2.0 * width * width;
    mesh.map_vertices(|v| {
        let u = unit([v[0] / extents[0], v[1] / extents[1], v[2] / extents[2]]);
        let h: f64 = bumps
            .iter()
            .map(|b| {
                let d = sub(u, b.center);
                b.height * (-dot(d, d) / w2).exp()
            })
            .sum();
        let r = unit(v);
        [v[0] + h * r[0], v[1] + h * r[1], v[2] + h * r[2]]
    })
}

/// Deformed coarse and fine meshes for one generation seed.
pub fn deform(template: &Template, cfg: &SynthConfig, seed: u64) -> Result<(Mesh, Mesh)> {
    let extents = half_extents(&template.coarse);
    let floor_c = cfg.min_area_ratio * template.coarse.min_face_area();
    let floor_f = cfg.min_area_ratio * template.fine.min_face_area();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let bumps = draw_bumps(&mut rng, cfg.bumps, cfg.amplitude);
        let coarse = apply_bumps(&template.coarse, &bumps, cfg.bump_width, extents);
        let fine = apply_bumps(&template.fine, &bumps, cfg.bump_width, extents);
        if coarse.min_face_area() > floor_c && fine.min_face_area() > floor_f {
            return Ok((coarse, fine));
        }
    }
    Err(Error::Degenerate(format!(
        "no non-degenerate deformation in {MAX_ATTEMPTS} attempts (seed {seed}, amplitude {})",
        cfg.amplitude
    )))
}

/// Orthographic camera on the +y axis looking down -y; image columns follow
/// +x and rows follow -z over `[-extent, extent]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderView {
    pub image_size: usize,
    pub extent: f64,
}

impl RenderView {
    pub const LIGHT: Vec3 = [0.37139067635410367, 0.7427813527082073, 0.5570860145311556];
    pub const AMBIENT: f64 = 0.15;

    /// A view framing `template` with margin for deformations.
    pub fn for_template(template: &Template, image_size: usize) -> Self {
        let h = half_extents(&template.coarse);
        Self {
            image_size,
            extent: 1.25 * h[0].max(h[2]),
        }
    }
}

/// `[1, H, W]` grayscale in `[0, 1]`: background 0, surfaces
/// `ambient + (1 - ambient) * max(0, n . light)` per face.
pub fn render(mesh: &Mesh, view: &RenderView) -> Tensor {
    let n = view.image_size;
    let mut depth = vec![f64::NEG_INFINITY; n * n];
    let mut image = vec![0.0; n * n];
    let scale = n as f64 / (2.0 * view.extent);
    let px = |v: Vec3| [(v[0] + view.extent) * scale, (view.extent - v[2]) * scale, v[1]];
    let normals = mesh.face_normals();
    for (f, face) in mesh.faces().iter().enumerate() {
        if normals.normals[f] == [0.0; 3] {
            continue;
        }
        let shade = RenderView::AMBIENT + (1.0 - RenderView::AMBIENT) * dot(normals.normals[f], RenderView::LIGHT).max(0.0);
        let [a, b, c] = face.map(|i| px(mesh.vertices()[i]));
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let lo = |k: usize| a[k].min(b[k]).min(c[k]).floor().max(0.0) as usize;
        let hi = |k: usize| (a[k].max(b[k]).max(c[k]).ceil().max(0.0) as usize).min(n);
        for row in lo(1)..hi(1) {
            for col in lo(0)..hi(0) {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let edge = |p: Vec3, q: Vec3| ((q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])) / area;
                let (wa, wb, wc) = (edge(b, c), edge(c, a), edge(a, b));
                if wa < -1e-12 || wb < -1e-12 || wc < -1e-12 {
                    continue;
                }
                let z = wa * a[2] + wb * b[2] + wc * c[2];
                let i = row * n + col;
                if z > depth[i] {
                    depth[i] = z;
                    image[i] = shade;
                }
            }
        }
    }
    Tensor::new(vec![1, n, n], image).expect("sized buffer")
}

/// One generated sample. `image_seed` and `mesh_seed` coincide for
/// coupled samples.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub image_seed: u64,
    pub mesh_seed: u64,
    pub image: Tensor,
    pub coarse: Mesh,
    pub fine: Mesh,
    pub shot: ShotField,
}

fn make_sample(cfg: &SynthConfig, index: usize, image_seed: u64, mesh_seed: u64) -> Result<Sample> {
    let template = cfg.template.template();
    let view = RenderView::for_template(template, cfg.image_size);
    let (coarse, fine) = deform(template, cfg, mesh_seed)?;
    let image = if image_seed == mesh_seed {
        render(&coarse, &view)
    } else {
        render(&deform(template, cfg, image_seed)?.0, &view)
    };
    let shot = compute_shot(&coarse, &cfg.shot)?;
    Ok(Sample {
        index,
        image_seed,
        mesh_seed,
        image,
        coarse,
        fine,
        shot,
    })
}

/// The coupled sample `index`: image rendered from the same deformed mesh.
pub fn generate_pair(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let seed = sample_seed(cfg.seed, COUPLED_STREAM, index);
    make_sample(cfg, index, seed, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetMode {
    Coupled,
    /// Images and meshes come from disjoint seed streams.
    Unpaired,
}

/// Largest-remainder split sizes for `count` samples.
pub fn split_counts(count: usize, splits: &[SplitSpec]) -> Vec<usize> {
    let exact: Vec<f64> = splits.iter().map(|s| s.fraction * count as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..splits.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = count.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        sizes[i] += 1;
        missing -= 1;
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub mode: SetMode,
    pub config: SynthConfig,
    pub count: usize,
    pub coarse_vertices: usize,
    pub fine_vertices: usize,
    pub shot_dim: usize,
    pub files: Vec<String>,
    pub splits: Vec<SplitEntry>,
    pub image_seeds: Vec<u64>,
    pub mesh_seeds: Vec<u64>,
}

impl Meta {
    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.ids.as_slice())
            .ok_or_else(|| Error::Config(format!("dataset has no split `{name}`")))
    }
}

pub const FILE_SCHEMA: [&str; 4] = ["NNNN.obj", "NNNN_fine.obj", "NNNN.img", "NNNN.shot"];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: Meta,
    pub samples: Vec<Sample>,
}

/// All samples of a set, generated in parallel; each depends only on its
/// own seeds.
pub fn generate_sets(cfg: &SynthConfig, mode: SetMode) -> Result<Dataset> {
    cfg.validate()?;
    let seeds: Vec<(u64, u64)> = (0..cfg.count)
        .map(|i| match mode {
            SetMode::Coupled => {
                let s = sample_seed(cfg.seed, COUPLED_STREAM, i);
                (s, s)
            }
            SetMode::Unpaired => (sample_seed(cfg.seed, IMAGE_STREAM, i), sample_seed(cfg.seed, MESH_STREAM, i)),
        })
        .collect();
    if mode == SetMode::Unpaired {
        let images: std::collections::HashSet<u64> = seeds.iter().map(|s| s.0).collect();
        if seeds.iter().any(|s| images.contains(&s.1)) {
            return Err(Error::Config("image and mesh seed streams collide; choose another seed".into()));
        }
    }
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &(a, b))| make_sample(cfg, i, a, b))
        .collect::<Result<Vec<_>>>()?;
    let mut next = 0;
    let splits = cfg
        .splits
        .iter()
        .zip(split_counts(cfg.count, &cfg.splits))
        .map(|(s, k)| {
            let ids = (next..next + k).collect();
            next += k;
            SplitEntry {
                name: s.name.clone(),
                ids,
            }
        })
        .collect();
    let template = cfg.template.template();
    let meta = Meta {
        mode,
        config: cfg.clone(),
        count: cfg.count,
        coarse_vertices: template.coarse.num_vertices(),
        fine_vertices: template.fine.num_vertices(),
        shot_dim: cfg.shot.output_dim,
        files: FILE_SCHEMA.iter().map(|s| s.to_string()).collect(),
        splits,
        image_seeds: seeds.iter().map(|s| s.0).collect(),
        mesh_seeds: seeds.iter().map(|s| s.1).collect(),
    };
    Ok(Dataset { meta, samples })
}

fn stem(index: usize, count: usize) -> String {
    let width = count.saturating_sub(1).to_string().len().max(4);
    format!("{index:0width$}")
}

/// Paths of the four per-sample files.
pub fn sample_paths(dir: &Path, index: usize, count: usize) -> [PathBuf; 4] {
    let s = stem(index, count);
    [
        dir.join(format!("{s}.obj")),
        dir.join(format!("{s}_fine.obj")),
        dir.join(format!("{s}.img")),
        dir.join(format!("{s}.shot")),
    ]
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        self.samples.par_iter().try_for_each(|s| -> Result<()> {
            let [obj, fine, img, shot] = sample_paths(dir, s.index, self.meta.count);
            save_mesh(&s.coarse, &obj)?;
            save_mesh(&s.fine, &fine)?;
            s.image.save(&img)?;
            s.shot.to_tensor().save(&shot)
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io_at(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        let samples = (0..meta.count)
            .into_par_iter()
            .map(|i| -> Result<Sample> {
                let [obj, fine, img, shot] = sample_paths(dir, i, meta.count);
                Ok(Sample {
                    index: i,
                    image_seed: meta.image_seeds[i],
                    mesh_seed: meta.mesh_seeds[i],
                    image: Tensor::load(&img)?,
                    coarse: load_mesh(&obj)?,
                    fine: load_mesh(&fine)?,
                    shot: ShotField::from_tensor(&Tensor::load(&shot)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, samples })
    }

    /// Samples of a named split, in id order.
    pub fn split(&self, name: &str) -> Result<Vec<&Sample>> {
        Ok(self.meta.split(name)?.iter().map(|&i| &self.samples[i]).collect())
    }
}

/// Silhouette pixel count, for render checks.
pub fn coverage(image: &Tensor) -> usize {
    image.data().iter().filter(|&&x| x > 0.0).count()
}
