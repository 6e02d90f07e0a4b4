//! SHOT (signature of histograms of orientations) descriptors on mesh
//! vertices.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, sub, Mesh, Vec3};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Across neighboring histogram bins and azimuth sectors.
    #[default]
    Linear,
    /// Additionally across elevation and radial sectors.
    Quadrilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotConfig {
    /// Support radius, mm.
    pub radius: f64,
    pub bins: usize,
    pub min_neighbors: usize,
    pub azimuth_divisions: usize,
    pub elevation_divisions: usize,
    pub radial_divisions: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl ShotConfig {
    /// 8x2x2 grid with 7 bins (224 raw values) adapted to 221 columns.
    pub fn full_scale() -> Self {
        Self {
            radius: 3.0,
            bins: 7,
            min_neighbors: 3,
            azimuth_divisions: 8,
            elevation_divisions: 2,
            radial_divisions: 2,
            output_dim: 221,
            interpolation: Interpolation::Linear,
        }
    }

    /// Small grid for the 10 mm templates: 32 raw values adapted to 29.
    pub fn desk() -> Self {
        Self {
            radius: 12.0,
            bins: 4,
            min_neighbors: 3,
            azimuth_divisions: 4,
            elevation_divisions: 2,
            radial_divisions: 1,
            output_dim: 29,
            interpolation: Interpolation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("shot: {m}")));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if self.bins == 0 {
            return bad("bins must be at least 1");
        }
        if self.azimuth_divisions == 0 || self.elevation_divisions == 0 || self.radial_divisions == 0 {
            return bad("divisions must be at least 1");
        }
        if self.output_dim == 0 {
            return bad("output_dim must be at least 1");
        }
        Ok(())
    }

    /// Length of the concatenated histogram before adaptation.
    pub fn natural_dim(&self) -> usize {
        self.azimuth_divisions * self.elevation_divisions * self.radial_divisions * self.bins
    }
}

/// Local reference frame with the data that decides how trustworthy it is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lrf {
    /// Rows are the x, y, z axes.
    pub axes: [Vec3; 3],
    /// Descending eigenvalues of the weighted covariance.
    pub eigenvalues: [f64; 3],
    /// `|positive - negative|` neighbor counts behind the x and z signs.
    pub sign_margin: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameError {
    NoFrame { found: usize, required: usize },
    Degenerate,
}

fn orient(axis: Vector3<f64>, offsets: &[Vec3], tol: f64) -> (Vector3<f64>, usize) {
    let a: Vec3 = [axis[0], axis[1], axis[2]];
    let (mut pos, mut neg, mut moment) = (0usize, 0usize, 0.0);
    for q in offsets {
        let s = dot(*q, a);
        moment += s;
        if s > tol {
            pos += 1;
        } else if s < -tol {
            neg += 1;
        }
    }
    let flip = match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Less => true,
        // Ties are common on meshes; the first moment still rotates with the
        // cloud. Only an exactly balanced cloud falls back to coordinates.
        std::cmp::Ordering::Equal if moment.abs() > tol * offsets.len() as f64 * 1e3 => moment < 0.0,
        std::cmp::Ordering::Equal => {
            let lead = a.iter().copied().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
            lead < 0.0
        }
    };
    (if flip { -axis } else { axis }, pos.abs_diff(neg))
}

fn frame_from_offsets(offsets: &[(Vec3, f64)], radius: f64, min_neighbors: usize) -> Result<Lrf, FrameError> {
    if offsets.len() < min_neighbors.max(1) {
        return Err(FrameError::NoFrame {
            found: offsets.len(),
            required: min_neighbors,
        });
    }
    let mut cov = Matrix3::zeros();
    let mut total = 0.0;
    for &(q, d) in offsets {
        let w = radius - d;
        let v = Vector3::new(q[0], q[1], q[2]);
        cov += w * v * v.transpose();
        total += w;
    }
    cov /= total;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.map(|i| eig.eigenvalues[i]);
    if !(values[0] > 0.0) || values[1] <= 1e-12 * values[0] {
        return Err(FrameError::Degenerate);
    }
    let plain: Vec<Vec3> = offsets.iter().map(|o| o.0).collect();
    let tol = 1e-12 * radius;
    let (x, mx) = orient(eig.eigenvectors.column(order[0]).into_owned(), &plain, tol);
    let (z, mz) = orient(eig.eigenvectors.column(order[2]).into_owned(), &plain, tol);
    let x: Vec3 = [x[0], x[1], x[2]];
    let z: Vec3 = [z[0], z[1], z[2]];
    Ok(Lrf {
        axes: [x, cross(z, x), z],
        eigenvalues: values,
        sign_margin: [mx, mz],
    })
}

/// Frame of the points strictly inside `radius` of `center` (points at the
/// center itself are ignored).
pub fn local_reference_frame(points: &[Vec3], center: Vec3, radius: f64, min_neighbors: usize) -> Result<Lrf, FrameError> {
    let offsets: Vec<(Vec3, f64)> = points
        .iter()
        .filter_map(|&p| {
            let q = sub(p, center);
            let d = dot(q, q).sqrt();
            (d > 0.0 && d < radius).then_some((q, d))
        })
        .collect();
    frame_from_offsets(&offsets, radius, min_neighbors)
}

/// Per-vertex descriptors; invalid rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotField {
    pub descriptors: Tensor,
    pub validity: Vec<bool>,
}

/// Splits `u` (in cell units, centers at `k + 0.5`) between two cells.
fn split(u: f64, cells: usize, circular: bool) -> [(usize, f64); 2] {
    let t = u - 0.5;
    let lo = t.floor();
    let frac = t - lo;
    let lo = lo as i64;
    let n = cells as i64;
    if circular {
        let a = lo.rem_euclid(n) as usize;
        let b = (lo + 1).rem_euclid(n) as usize;
        [(a, 1.0 - frac), (b, frac)]
    } else if lo < 0 {
        [(0, 1.0), (0, 0.0)]
    } else if lo + 1 >= n {
        [(cells - 1, 1.0), (cells - 1, 0.0)]
    } else {
        [(lo as usize, 1.0 - frac), (lo as usize + 1, frac)]
    }
}

fn hard(u: f64, cells: usize) -> [(usize, f64); 2] {
    let k = (u.floor().max(0.0) as usize).min(cells - 1);
    [(k, 1.0), (k, 0.0)]
}

fn accumulate(cfg: &ShotConfig, lrf: &Lrf, center_normal: Vec3, neighbors: &[(Vec3, f64, Vec3)]) -> Vec<f64> {
    let (na, ne, nr, nb) = (cfg.azimuth_divisions, cfg.elevation_divisions, cfg.radial_divisions, cfg.bins);
    let mut hist = vec![0.0; cfg.natural_dim()];
    let quad = cfg.interpolation == Interpolation::Quadrilinear;
    for &(q, d, n) in neighbors {
        let l = [dot(lrf.axes[0], q), dot(lrf.axes[1], q), dot(lrf.axes[2], q)];
        let cos = dot(n, center_normal).clamp(-1.0, 1.0);
        let mut az = l[1].atan2(l[0]);
        if az < 0.0 {
            az += 2.0 * PI;
        }
        let el = l[2].atan2(l[0].hypot(l[1])) + PI / 2.0;
        let bin_u = (cos + 1.0) / 2.0 * nb as f64;
        let az_u = az / (2.0 * PI) * na as f64;
        let el_u = el / PI * ne as f64;
        let rad_u = d / cfg.radius * nr as f64;
        let bins = split(bin_u, nb, false);
        let azs = split(az_u, na, true);
        let (els, rads) = if quad {
            (split(el_u, ne, false), split(rad_u, nr, false))
        } else {
            (hard(el_u, ne), hard(rad_u, nr))
        };
        for &(r, wr) in &rads {
            for &(e, we) in &els {
                for &(a, wa) in &azs {
                    for &(b, wb) in &bins {
                        let w = wr * we * wa * wb;
                        if w != 0.0 {
                            hist[((r * ne + e) * na + a) * nb + b] += w;
                        }
                    }
                }
            }
        }
    }
    hist
}

struct Prepared<'a> {
    verts: &'a [Vec3],
    normals: Vec<Vec3>,
}

impl Prepared<'_> {
    fn neighborhood(&self, i: usize, radius: f64) -> Vec<(Vec3, f64, Vec3)> {
        let c = self.verts[i];
        self.verts
            .iter()
            .enumerate()
            .filter_map(|(j, &p)| {
                if j == i {
                    return None;
                }
                let q = sub(p, c);
                let d = dot(q, q).sqrt();
                (d > 0.0 && d < radius).then_some((q, d, self.normals[j]))
            })
            .collect()
    }
}

/// Un-normalized histogram of vertex `v`, or `None` without a frame.
pub fn raw_histogram(mesh: &Mesh, cfg: &ShotConfig, v: usize) -> Result<Option<Vec<f64>>> {
    cfg.validate()?;
    if v >= mesh.num_vertices() {
        return Err(Error::Range {
            index: v,
            len: mesh.num_vertices(),
        });
    }
    let prep = Prepared {
        verts: mesh.vertices(),
        normals: mesh.vertex_normals(),
    };
    Ok(vertex_histogram(&prep, cfg, v))
}

fn vertex_histogram(prep: &Prepared, cfg: &ShotConfig, i: usize) -> Option<Vec<f64>> {
    let hood = prep.neighborhood(i, cfg.radius);
    let offsets: Vec<(Vec3, f64)> = hood.iter().map(|h| (h.0, h.1)).collect();
    let lrf = frame_from_offsets(&offsets, cfg.radius, cfg.min_neighbors).ok()?;
    Some(accumulate(cfg, &lrf, prep.normals[i], &hood))
}

/// Frames of every vertex under `cfg`'s support.
pub fn vertex_frames(mesh: &Mesh, cfg: &ShotConfig) -> Vec<Result<Lrf, FrameError>> {
    let prep = Prepared {
        verts: mesh.vertices(),
        normals: mesh.vertex_normals(),
    };
    (0..mesh.num_vertices())
        .map(|i| {
            let offsets: Vec<(Vec3, f64)> = prep.neighborhood(i, cfg.radius).iter().map(|h| (h.0, h.1)).collect();
            frame_from_offsets(&offsets, cfg.radius, cfg.min_neighbors)
        })
        .collect()
}

fn normalize(row: &mut [f64]) {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn compute_shot(mesh: &Mesh, cfg: &ShotConfig) -> Result<ShotField> {
    cfg.validate()?;
    if mesh.num_vertices() == 0 {
        return Err(Error::Topology("descriptor of an empty mesh".into()));
    }
    let prep = Prepared {
        verts: mesh.vertices(),
        normals: mesh.vertex_normals(),
    };
    let rows: Vec<Option<Vec<f64>>> = (0..mesh.num_vertices())
        .into_par_iter()
        .map(|i| {
            vertex_histogram(&prep, cfg, i).map(|mut h| {
                normalize(&mut h);
                h
            })
        })
        .collect();
    let dim = cfg.natural_dim();
    let validity: Vec<bool> = rows.iter().map(Option::is_some).collect();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        match r {
            Some(h) => data.extend(h),
            None => data.extend(std::iter::repeat(0.0).take(dim)),
        }
    }
    let raw = Tensor::new(vec![mesh.num_vertices(), dim], data)?;
    Ok(ShotField {
        descriptors: fit_to_dim(&raw, cfg.output_dim)?,
        validity,
    })
}

/// Truncates trailing columns and renormalizes non-zero rows, or pads with
/// zero columns.
pub fn fit_to_dim(raw: &Tensor, output_dim: usize) -> Result<Tensor> {
    if raw.rank() != 2 || raw.shape()[1] == 0 {
        return Err(Error::InvalidShape {
            op: "fit_to_dim",
            detail: format!("{:?} is not N x D with D >= 1", raw.shape()),
        });
    }
    let (n, d) = (raw.shape()[0], raw.shape()[1]);
    if d == output_dim {
        return Ok(raw.clone());
    }
    let mut data = Vec::with_capacity(n * output_dim);
    for row in raw.data().chunks(d) {
        if d > output_dim {
            let mut r = row[..output_dim].to_vec();
            normalize(&mut r);
            data.extend(r);
        } else {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(0.0).take(output_dim - d));
        }
    }
    Tensor::new(vec![n, output_dim], data)
}

impl ShotField {
    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape()[1]
    }

    /// One row per vertex with validity as a trailing 0/1 column.
    pub fn to_tensor(&self) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.len() * (d + 1));
        for (row, &v) in self.descriptors.data().chunks(d).zip(&self.validity) {
            data.extend_from_slice(row);
            data.push(if v { 1.0 } else { 0.0 });
        }
        Tensor::new(vec![self.len(), d + 1], data).expect("consistent field")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] < 2 {
            return Err(Error::InvalidShape {
                op: "shot_field",
                detail: format!("{:?} lacks descriptor and validity columns", t.shape()),
            });
        }
        let (n, w) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(n * (w - 1));
        let mut validity = Vec::with_capacity(n);
        for row in t.data().chunks(w) {
            data.extend_from_slice(&row[..w - 1]);
            validity.push(match row[w - 1] {
                x if x == 1.0 => true,
                x if x == 0.0 => false,
                x => return Err(Error::TensorFormat(format!("validity flag {x} is not 0 or 1"))),
            });
        }
        Ok(Self {
            descriptors: Tensor::new(vec![n, w - 1], data)?,
            validity,
        })
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for (row, &v) in self.descriptors.data().chunks(d).zip(&self.validity) {
            for x in row {
                write!(out, "{x},").unwrap();
            }
            writeln!(out, "{}", u8::from(v)).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            rows.push(row);
        }
        Self::from_tensor(&Tensor::from_rows(&rows)?)
    }
}
