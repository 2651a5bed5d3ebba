//! Triangle-mesh type and ASCII OBJ import/export (v / vt / f records).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Mesh {
    /// N x 3 vertex positions.
    pub vertices: Array2<f64>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Array2<f64>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.nrows();
        if vertices.ncols() != 3 {
            return Err(Error::shape("mesh vertices", "N x 3", format!("N x {}", vertices.ncols())));
        }
        for t in &triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::Data(format!(
                    "triangle {t:?} references a vertex >= {n}"
                )));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.nrows()
    }
}

/// Write an ASCII OBJ file. `texcoords`, when given, must be N x 2 and is
/// emitted as `vt` records with faces referencing `v/vt` pairs.
pub fn save_obj(
    path: &Path,
    vertices: &Array2<f64>,
    triangles: &[[usize; 3]],
    texcoords: Option<&Array2<f64>>,
) -> Result<()> {
    if let Some(vt) = texcoords {
        if vt.nrows() != vertices.nrows() || vt.ncols() != 2 {
            return Err(Error::shape(
                "texcoords",
                format!("{} x 2", vertices.nrows()),
                format!("{} x {}", vt.nrows(), vt.ncols()),
            ));
        }
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for row in vertices.rows() {
        writeln!(out, "v {} {} {}", row[0], row[1], row[2])?;
    }
    if let Some(vt) = texcoords {
        for row in vt.rows() {
            writeln!(out, "vt {} {}", row[0], row[1])?;
        }
    }
    for t in triangles {
        if texcoords.is_some() {
            writeln!(out, "f {}/{} {}/{} {}/{}", t[0] + 1, t[0] + 1, t[1] + 1, t[1] + 1, t[2] + 1, t[2] + 1)?;
        } else {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
    }
    Ok(())
}

/// Parse an ASCII OBJ file, keeping `v` and `f` records. Faces with more
/// than three vertices are fan-triangulated; `vt`/`vn` indices are ignored.
pub fn load_obj(path: &Path) -> Result<Mesh> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut vertices: Vec<f64> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| {
                            Error::Data(format!("bad vertex at line {}: {line}", lineno + 1))
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Data(format!(
                        "vertex with {} coords at line {}",
                        coords.len(),
                        lineno + 1
                    )));
                }
                vertices.extend(coords);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|tok| parse_face_index(tok, lineno + 1))
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Data(format!(
                        "face with {} vertices at line {}",
                        idx.len(),
                        lineno + 1
                    )));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // vt, vn, comments, groups: ignored
        }
    }

    let n = vertices.len() / 3;
    let vertices = Array2::from_shape_vec((n, 3), vertices)
        .map_err(|e| Error::Data(format!("vertex table: {e}")))?;
    Mesh::new(vertices, triangles)
}

/// Unit icosphere: an icosahedron subdivided `level` times, vertices
/// projected to the unit sphere. Vertex counts: 12, 42, 162, 642, ...
/// Triangles are wound so the geometric normal points outward.
pub fn icosphere(level: usize) -> (Array2<f64>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in verts.iter_mut() {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        *v = [v[0] / n, v[1] / n, v[2] / n];
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];

    use std::collections::HashMap;
    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let va = verts[a];
                    let vb = verts[b];
                    let mut m = [
                        (va[0] + vb[0]) / 2.0,
                        (va[1] + vb[1]) / 2.0,
                        (va[2] + vb[2]) / 2.0,
                    ];
                    let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    m = [m[0] / n, m[1] / n, m[2] / n];
                    verts.push(m);
                    verts.len() - 1
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }

    // enforce outward winding
    for f in faces.iter_mut() {
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * w[2] - u[2] * w[1],
            u[2] * w[0] - u[0] * w[2],
            u[0] * w[1] - u[1] * w[0],
        ];
        let centroid = [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ];
        if n[0] * centroid[0] + n[1] * centroid[1] + n[2] * centroid[2] < 0.0 {
            f.swap(1, 2);
        }
    }

    let flat: Vec<f64> = verts.iter().flat_map(|v| v.iter().copied()).collect();
    let vertices = Array2::from_shape_vec((verts.len(), 3), flat).unwrap();
    (vertices, faces)
}

fn parse_face_index(token: &str, lineno: usize) -> Result<usize> {
    let first = token.split('/').next().unwrap_or("");
    let idx: i64 = first
        .parse()
        .map_err(|_| Error::Data(format!("bad face index `{token}` at line {lineno}")))?;
    if idx < 1 {
        return Err(Error::Data(format!(
            "unsupported face index {idx} at line {lineno} (1-based positive only)"
        )));
    }
    Ok((idx - 1) as usize)
}
