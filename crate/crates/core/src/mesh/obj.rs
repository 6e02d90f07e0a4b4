//! Wavefront OBJ triangle meshes: `v x y z` and `f i j k` records, 1-based.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::Mesh;

fn parse_index(token: &str, num_vertices: usize, line: usize) -> Result<usize> {
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad face index {token:?}"),
    })?;
    let n = num_vertices as i64;
    let idx = match raw {
        0 => {
            return Err(Error::Parse {
                line,
                message: "face index 0 (OBJ indices are 1-based)".into(),
            })
        }
        r if r > 0 => r - 1,
        r => n + r,
    };
    if idx < 0 || idx >= n {
        return Err(Error::Parse {
            line,
            message: format!("face index {raw} out of range for {num_vertices} vertices so far"),
        });
    }
    Ok(idx as usize)
}

pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<&str> = tokens.collect();
                if coords.len() < 3 || coords.len() > 4 {
                    return Err(Error::Parse {
                        line,
                        message: format!("vertex needs 3 coordinates, found {}", coords.len()),
                    });
                }
                let mut v = [0.0; 3];
                for (k, c) in coords.iter().take(3).enumerate() {
                    v[k] = c.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad coordinate {c:?}"),
                    })?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(Error::Unsupported(format!(
                        "line {line}: face with {} vertices (only triangles are supported)",
                        refs.len()
                    )));
                }
                let mut f = [0; 3];
                for (k, r) in refs.iter().enumerate() {
                    f[k] = parse_index(r, vertices.len(), line)?;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    out
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    parse_obj(&std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_obj(mesh)).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}
