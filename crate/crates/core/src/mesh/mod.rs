//! Triangle meshes, their attributed graphs and keypoint maps.
//!
//! Coordinates are millimeters; faces wind counterclockwise when seen from
//! outside the surface.

mod graph;
pub mod obj;
pub mod templates;

pub use graph::{derive_edges, AttributedGraph};
pub use obj::{load_mesh, parse_obj, save_mesh, write_obj};
pub use templates::{Template, TemplateKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Faces with twice-area below this (mm^2) count as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

/// Unit face normals plus the indices of faces too small to have one.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceNormals {
    pub normals: Vec<Vec3>,
    pub degenerate: Vec<usize>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if !faces.is_empty() && n < 3 {
            return Err(Error::Topology(format!("{} faces but only {n} vertices", faces.len())));
        }
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::Topology(format!(
                    "face {fi} references vertex {bad}, mesh has {n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Topology(format!("face {fi} repeats a vertex: {f:?}")));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Same faces, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Topology(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn translated(&self, t: Vec3) -> Self {
        self.map_vertices(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]])
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map_vertices(|v| [v[0] * s, v[1] * s, v[2] * s])
    }

    /// Applies a 3x3 matrix (row-major) to every vertex.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        self.map_vertices(|v| [dot(r[0], v), dot(r[1], v), dot(r[2], v)])
    }

    /// Reverses every face's winding.
    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        }
    }

    fn face_cross(&self, f: &[usize; 3]) -> Vec3 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_areas(&self) -> Vec<f64> {
        self.faces.iter().map(|f| 0.5 * norm(self.face_cross(f))).collect()
    }

    pub fn min_face_area(&self) -> f64 {
        self.face_areas().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Unit normals under counterclockwise winding. Degenerate faces get a
    /// zero normal and are listed in `degenerate`.
    pub fn face_normals(&self) -> FaceNormals {
        let mut degenerate = Vec::new();
        let normals = self
            .faces
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let c = self.face_cross(f);
                let n = norm(c);
                if n < DEGENERATE_AREA {
                    degenerate.push(i);
                    [0.0; 3]
                } else {
                    [c[0] / n, c[1] / n, c[2] / n]
                }
            })
            .collect();
        FaceNormals { normals, degenerate }
    }

    /// Area-weighted averages of incident face normals, unit length
    /// (zero for vertices without non-degenerate incident faces).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for f in &self.faces {
            let c = self.face_cross(f);
            for &i in f {
                for k in 0..3 {
                    acc[i][k] += c[k];
                }
            }
        }
        acc.into_iter()
            .map(|v| {
                let n = norm(v);
                if n < DEGENERATE_AREA {
                    [0.0; 3]
                } else {
                    [v[0] / n, v[1] / n, v[2] / n]
                }
            })
            .collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        derive_edges(&self.faces, self.vertices.len()).expect("faces validated at construction")
    }

    /// Vertex positions as an `N x 3` tensor.
    pub fn positions(&self) -> Tensor {
        let data = self.vertices.iter().flat_map(|v| v.iter().copied()).collect();
        Tensor::new(vec![self.vertices.len(), 3], data).expect("N x 3")
    }

    /// Builds a mesh over `faces` from an `N x 3` (or flat `[N*3]`) position tensor.
    pub fn from_positions(positions: &Tensor, faces: Vec<[usize; 3]>) -> Result<Self> {
        if positions.numel() % 3 != 0 {
            return Err(Error::InvalidShape {
                op: "from_positions",
                detail: format!("{:?} is not N x 3", positions.shape()),
            });
        }
        let vertices = positions.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(vertices, faces)
    }

    /// Signed enclosed volume; positive for outward-wound closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }
}

/// Vertex indices of the keypoints of one mesh resolution. Serialized as a
/// plain JSON integer array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointMap {
    indices: Vec<usize>,
}

impl KeypointMap {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &i in &indices {
            if !seen.insert(i) {
                return Err(Error::Config(format!("keypoint map repeats vertex {i}")));
            }
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate_for(&self, num_vertices: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= num_vertices) {
            Some(&bad) => Err(Error::Range {
                index: bad,
                len: num_vertices,
            }),
            None => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let indices: Vec<usize> = serde_json::from_str(text)?;
        Self::new(indices)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.indices).expect("integers serialize")
    }
}

/// Rows of the mapped vertices, in map order (`K x 3`).
pub fn extract_keypoints(mesh: &Mesh, map: &KeypointMap) -> Result<Tensor> {
    map.validate_for(mesh.num_vertices())?;
    let data = map
        .indices()
        .iter()
        .flat_map(|&i| mesh.vertices()[i].iter().copied())
        .collect();
    Tensor::new(vec![map.len(), 3], data)
}
