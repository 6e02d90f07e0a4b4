use crate::mesh::{dot, Mesh};

/// `Q(v) = v^T A v + 2 b^T v + c`, a sum of squared point-plane distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadricForm {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub c: f64,
}

impl QuadricForm {
    pub const ZERO: Self = Self {
        a: [[0.0; 3]; 3],
        b: [0.0; 3],
        c: 0.0,
    };

    /// Squared distance to the plane `n . x + d = 0` (unit `n`).
    pub fn plane(n: [f64; 3], d: f64) -> Self {
        let mut a = [[0.0; 3]; 3];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = n[i] * n[j];
            }
        }
        Self {
            a,
            b: [d * n[0], d * n[1], d * n[2]],
            c: d * d,
        }
    }

    pub fn add(&mut self, other: &Self) {
        for i in 0..3 {
            for j in 0..3 {
                self.a[i][j] += other.a[i][j];
            }
            self.b[i] += other.b[i];
        }
        self.c += other.c;
    }

    pub fn eval(&self, v: [f64; 3]) -> f64 {
        let av = [dot(self.a[0], v), dot(self.a[1], v), dot(self.a[2], v)];
        dot(v, av) + 2.0 * dot(self.b, v) + self.c
    }

    /// `dQ/dv = 2 (A v + b)`; `A` is symmetric.
    pub fn gradient(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| 2.0 * (dot(self.a[i], v) + self.b[i]))
    }
}

/// Plane quadric of `v` summed over its non-degenerate incident faces.
/// The flag is false when no such face exists (the form is then zero).
pub fn quadric_of_vertex(gt: &Mesh, v: usize) -> crate::Result<(QuadricForm, bool)> {
    if v >= gt.num_vertices() {
        return Err(crate::Error::Range {
            index: v,
            len: gt.num_vertices(),
        });
    }
    let normals = gt.face_normals();
    let mut q = QuadricForm::ZERO;
    let mut any = false;
    for (fi, f) in gt.faces().iter().enumerate() {
        if !f.contains(&v) || normals.degenerate.binary_search(&fi).is_ok() {
            continue;
        }
        let n = normals.normals[fi];
        q.add(&QuadricForm::plane(n, -dot(n, gt.vertices()[f[0]])));
        any = true;
    }
    Ok((q, any))
}

/// Quadrics of every vertex, plus the vertices without incident faces.
pub fn vertex_quadrics(gt: &Mesh) -> (Vec<QuadricForm>, Vec<usize>) {
    let normals = gt.face_normals();
    let mut forms = vec![QuadricForm::ZERO; gt.num_vertices()];
    let mut touched = vec![false; gt.num_vertices()];
    let degenerate: std::collections::BTreeSet<usize> = normals.degenerate.iter().copied().collect();
    for (fi, f) in gt.faces().iter().enumerate() {
        if degenerate.contains(&fi) {
            continue;
        }
        let n = normals.normals[fi];
        let plane = QuadricForm::plane(n, -dot(n, gt.vertices()[f[0]]));
        for &i in f {
            forms[i].add(&plane);
            touched[i] = true;
        }
    }
    let isolated = (0..touched.len()).filter(|&i| !touched[i]).collect();
    (forms, isolated)
}
