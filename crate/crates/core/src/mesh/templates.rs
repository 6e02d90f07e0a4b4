//! Template meshes with fixed topology, and the generators that built the
//! shipped assets.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{dot, norm, KeypointMap, Mesh, Vec3};
use crate::error::Result;

/// Radius of the icosphere template, mm.
pub const ICOSPHERE_RADIUS: f64 = 10.0;
/// Keypoints picked per template.
pub const NUM_KEYPOINTS: usize = 21;

const CAPSULE_RINGS: usize = 14;
const CAPSULE_SEGMENTS: usize = 16;
const CAPSULE_RADIUS: f64 = 9.0;
const CAPSULE_HALF_LENGTH: f64 = 30.0;

fn unit(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn icosahedron() -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let vertices = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    Mesh::new(vertices, faces).expect("static icosahedron")
}

/// Splits every face into four through edge midpoints. Original vertices
/// keep their indices; the midpoint of the `e`-th sorted edge is `N + e`.
pub fn midpoint_subdivide(mesh: &Mesh) -> Mesh {
    let n = mesh.num_vertices();
    let edges = mesh.edges();
    let index: BTreeMap<(usize, usize), usize> =
        edges.iter().enumerate().map(|(e, &p)| (p, n + e)).collect();
    let mid = |a: usize, b: usize| index[&(a.min(b), a.max(b))];
    let mut vertices = mesh.vertices().to_vec();
    for &(a, b) in &edges {
        let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
        vertices.push([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]);
    }
    let mut faces = Vec::with_capacity(mesh.num_faces() * 4);
    for &[a, b, c] in mesh.faces() {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    Mesh::new(vertices, faces).expect("subdivision preserves validity")
}

/// Icosahedron subdivided `levels` times, projected onto a sphere.
pub fn icosphere(levels: usize, radius: f64) -> Mesh {
    let mut m = icosahedron();
    for _ in 0..levels {
        m = midpoint_subdivide(&m).map_vertices(unit);
    }
    m.map_vertices(|v| {
        let u = unit(v);
        [u[0] * radius, u[1] * radius, u[2] * radius]
    })
}

/// Closed elongated tube along z: `rings` rings of `segments` vertices,
/// each end capped by a fan from the ring's first vertex (no pole vertex).
pub fn capsule(rings: usize, segments: usize, radius: f64, half_length: f64) -> Mesh {
    let mut vertices = Vec::with_capacity(rings * segments);
    for r in 0..rings {
        let theta = std::f64::consts::PI * (r as f64 + 0.5) / rings as f64;
        let (rho, z) = (radius * theta.sin(), -half_length * theta.cos());
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push([rho * phi.cos(), rho * phi.sin(), z]);
        }
    }
    let id = |r: usize, s: usize| r * segments + s % segments;
    let mut faces = Vec::new();
    for r in 0..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (id(r, s), id(r, s + 1), id(r + 1, s + 1), id(r + 1, s));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    let top = rings - 1;
    for s in 1..segments - 1 {
        faces.push([id(0, 0), id(0, s + 1), id(0, s)]);
        faces.push([id(top, 0), id(top, s), id(top, s + 1)]);
    }
    Mesh::new(vertices, faces).expect("capsule topology")
}

/// The 224-vertex capsule with five rounded lobes pushed out along the
/// vertex normals near its upper end.
pub fn capsule_hand() -> Mesh {
    let base = capsule(CAPSULE_RINGS, CAPSULE_SEGMENTS, CAPSULE_RADIUS, CAPSULE_HALF_LENGTH);
    let normals = base.vertex_normals();
    let lobes: Vec<Vec3> = [(-60.0f64, 0.55), (-25.0, 0.5), (0.0, 0.45), (25.0, 0.5), (100.0, 1.3)]
        .iter()
        .map(|&(psi, alpha)| {
            let (psi, alpha): (f64, f64) = (psi.to_radians(), alpha);
            [alpha.sin() * psi.cos(), alpha.sin() * psi.sin(), alpha.cos()]
        })
        .collect();
    let vertices = base
        .vertices()
        .iter()
        .zip(&normals)
        .map(|(&v, &n)| {
            let u = unit([v[0] / CAPSULE_RADIUS, v[1] / CAPSULE_RADIUS, v[2] / CAPSULE_HALF_LENGTH]);
            let push: f64 = lobes
                .iter()
                .map(|d| {
                    let diff = [u[0] - d[0], u[1] - d[1], u[2] - d[2]];
                    6.0 * (-dot(diff, diff) / 0.08).exp()
                })
                .sum();
            [v[0] + push * n[0], v[1] + push * n[1], v[2] + push * n[2]]
        })
        .collect();
    base.with_vertices(vertices).expect("same count")
}

/// Farthest-point sampling from the highest vertex; ties break to the
/// lowest index.
pub fn farthest_point_keypoints(mesh: &Mesh, count: usize) -> KeypointMap {
    let v = mesh.vertices();
    let count = count.min(v.len());
    let mut chosen = Vec::with_capacity(count);
    if count == 0 {
        return KeypointMap::new(chosen).expect("empty");
    }
    let first = (0..v.len())
        .fold(0, |best, i| if v[i][2] > v[best][2] { i } else { best });
    chosen.push(first);
    let dist = |a: Vec3, b: Vec3| norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
    let mut nearest: Vec<f64> = v.iter().map(|&p| dist(p, v[first])).collect();
    while chosen.len() < count {
        let next = (0..v.len())
            .fold(0, |best, i| if nearest[i] > nearest[best] { i } else { best });
        chosen.push(next);
        for i in 0..v.len() {
            nearest[i] = nearest[i].min(dist(v[i], v[next]));
        }
    }
    KeypointMap::new(chosen).expect("farthest-point picks are distinct")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Icosphere,
    CapsuleHand,
}

impl std::str::FromStr for TemplateKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icosphere" => Ok(Self::Icosphere),
            "capsule-hand" => Ok(Self::CapsuleHand),
            other => Err(crate::error::Error::Config(format!(
                "unknown template {other:?} (expected icosphere or capsule-hand)"
            ))),
        }
    }
}

/// Coarse and fine meshes of one template plus the keypoint map. Fine
/// meshes are midpoint subdivisions, so the map applies to both.
#[derive(Clone, Debug)]
pub struct Template {
    pub kind: TemplateKind,
    pub coarse: Mesh,
    pub fine: Mesh,
    pub keypoints: KeypointMap,
}

macro_rules! asset {
    ($name:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/", $name))
    };
}

fn parse_template(kind: TemplateKind, coarse: &str, fine: &str, keypoints: &str) -> Template {
    let coarse = super::parse_obj(coarse).expect("shipped coarse asset parses");
    let fine = super::parse_obj(fine).expect("shipped fine asset parses");
    let keypoints = KeypointMap::from_json(keypoints).expect("shipped keypoint map parses");
    keypoints.validate_for(coarse.num_vertices()).expect("keypoints fit the template");
    Template {
        kind,
        coarse,
        fine,
        keypoints,
    }
}

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Icosphere => "icosphere",
            Self::CapsuleHand => "capsule-hand",
        }
    }

    /// The shipped template assets.
    pub fn template(self) -> &'static Template {
        static ICO: OnceLock<Template> = OnceLock::new();
        static HAND: OnceLock<Template> = OnceLock::new();
        match self {
            Self::Icosphere => ICO.get_or_init(|| {
                parse_template(
                    self,
                    asset!("icosphere42.obj"),
                    asset!("icosphere42_fine.obj"),
                    asset!("icosphere42_keypoints.json"),
                )
            }),
            Self::CapsuleHand => HAND.get_or_init(|| {
                parse_template(
                    self,
                    asset!("capsule_hand224.obj"),
                    asset!("capsule_hand224_fine.obj"),
                    asset!("capsule_hand224_keypoints.json"),
                )
            }),
        }
    }

    /// Regenerates the template from its generator.
    pub fn generate(self) -> Template {
        let coarse = match self {
            Self::Icosphere => icosphere(1, ICOSPHERE_RADIUS),
            Self::CapsuleHand => capsule_hand(),
        };
        Template {
            kind: self,
            fine: midpoint_subdivide(&coarse),
            keypoints: farthest_point_keypoints(&coarse, NUM_KEYPOINTS),
            coarse,
        }
    }

    /// File stem of the shipped assets.
    pub fn asset_stem(self) -> &'static str {
        match self {
            Self::Icosphere => "icosphere42",
            Self::CapsuleHand => "capsule_hand224",
        }
    }
}
