//! Statistical face model: mean shape/texture plus identity, expression and
//! texture PCA bases. Decoding is linear:
//!
//! ```text
//! S(alpha, beta) = mean_shape + basis_id * alpha + basis_exp * beta
//! T(gamma)       = mean_texture + basis_tex * gamma
//! ```
//!
//! Texture decode is deliberately unclamped; the renderer clamps after
//! shading so the decode stays linear and differentiable.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, TensorId};
use crate::coeffs::{N_EXP, N_ID, N_TEX};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::illumination::sh_basis_single;
use crate::mesh::icosphere;

pub const N_LANDMARKS: usize = 68;

#[derive(Debug, Clone)]
pub struct MorphableModel {
    /// 3N mean shape, millimetres, (x0,y0,z0,x1,...) layout.
    pub mean_shape: Array1<f64>,
    /// 3N mean texture, RGB in [0,1], (r0,g0,b0,r1,...) layout.
    pub mean_texture: Array1<f64>,
    pub basis_id: Array2<f64>,
    pub basis_exp: Array2<f64>,
    pub basis_tex: Array2<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub landmark_indices: Vec<usize>,
    pub nose_tip_index: usize,
    /// Per-vertex face-region mask (1 = inside the modelled face region);
    /// identity mask for synthetic models.
    pub region_mask: Array1<f64>,
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn validate(&self) -> Result<()> {
        let n3 = self.mean_shape.len();
        if n3 % 3 != 0 || n3 == 0 {
            return Err(Error::shape("mean shape length", "multiple of 3", n3));
        }
        let n = n3 / 3;
        if self.mean_texture.len() != n3 {
            return Err(Error::shape("mean texture length", n3, self.mean_texture.len()));
        }
        if self.mean_texture.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Data("mean texture entries must lie in [0,1]".into()));
        }
        for (name, basis, cols) in [
            ("identity basis", &self.basis_id, N_ID),
            ("expression basis", &self.basis_exp, N_EXP),
            ("texture basis", &self.basis_tex, N_TEX),
        ] {
            if basis.nrows() != n3 || basis.ncols() != cols {
                return Err(Error::shape(
                    "basis dimensions",
                    format!("{name}: {n3} x {cols}"),
                    format!("{} x {}", basis.nrows(), basis.ncols()),
                ));
            }
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::Data(format!("triangle {t:?} out of range (N = {n})")));
            }
        }
        if self.landmark_indices.len() != N_LANDMARKS {
            return Err(Error::shape("landmark count", N_LANDMARKS, self.landmark_indices.len()));
        }
        if self.landmark_indices.iter().any(|&i| i >= n) {
            return Err(Error::Data(format!("landmark index out of range (N = {n})")));
        }
        if self.nose_tip_index >= n {
            return Err(Error::Data(format!("nose tip index out of range (N = {n})")));
        }
        if self.region_mask.len() != n {
            return Err(Error::shape("region mask length", n, self.region_mask.len()));
        }
        Ok(())
    }

    pub fn mean_shape_vertices(&self) -> Array2<f64> {
        self.mean_shape
            .clone()
            .into_shape((self.n_vertices(), 3))
            .unwrap()
    }

    pub fn mean_texture_vertices(&self) -> Array2<f64> {
        self.mean_texture
            .clone()
            .into_shape((self.n_vertices(), 3))
            .unwrap()
    }

    /// Decode vertex positions from identity + expression coefficients.
    pub fn decode_shape(&self, alpha: &Array1<f64>, beta: &Array1<f64>) -> Result<Array2<f64>> {
        if alpha.len() != N_ID {
            return Err(Error::shape("identity coefficients", N_ID, alpha.len()));
        }
        if beta.len() != N_EXP {
            return Err(Error::shape("expression coefficients", N_EXP, beta.len()));
        }
        let flat = &self.mean_shape + &self.basis_id.dot(alpha) + &self.basis_exp.dot(beta);
        Ok(flat.into_shape((self.n_vertices(), 3)).unwrap())
    }

    /// Decode per-vertex RGB from texture coefficients (not clamped).
    pub fn decode_texture(&self, gamma: &Array1<f64>) -> Result<Array2<f64>> {
        if gamma.len() != N_TEX {
            return Err(Error::shape("texture coefficients", N_TEX, gamma.len()));
        }
        let flat = &self.mean_texture + &self.basis_tex.dot(gamma);
        Ok(flat.into_shape((self.n_vertices(), 3)).unwrap())
    }

    /// Gather the 68 landmark rows from a decoded vertex array.
    pub fn select_landmarks(&self, vertices: &Array2<f64>) -> Result<Array2<f64>> {
        if vertices.nrows() != self.n_vertices() {
            return Err(Error::shape("vertex count", self.n_vertices(), vertices.nrows()));
        }
        for &i in &self.landmark_indices {
            if i >= vertices.nrows() {
                return Err(Error::Data(format!(
                    "landmark index {i} out of range (N = {})",
                    vertices.nrows()
                )));
            }
        }
        Ok(vertices.select(Axis(0), &self.landmark_indices))
    }

    // ---- persistence ----

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new();
        c.metadata = r#"{"kind":"morphable_model","format_version":1}"#.to_string();
        c.insert_f64("mean_shape", self.mean_shape.clone().into_dyn())?;
        c.insert_f64("mean_texture", self.mean_texture.clone().into_dyn())?;
        c.insert_f64("basis_id", self.basis_id.clone().into_dyn())?;
        c.insert_f64("basis_exp", self.basis_exp.clone().into_dyn())?;
        c.insert_f64("basis_tex", self.basis_tex.clone().into_dyn())?;
        let tri_flat: Vec<i64> = self
            .triangles
            .iter()
            .flat_map(|t| t.iter().map(|&i| i as i64))
            .collect();
        c.insert_i64(
            "triangles",
            ArrayD::from_shape_vec(IxDyn(&[self.triangles.len(), 3]), tri_flat).unwrap(),
        )?;
        let lm: Vec<i64> = self.landmark_indices.iter().map(|&i| i as i64).collect();
        c.insert_i64("landmark_indices", ArrayD::from_shape_vec(IxDyn(&[lm.len()]), lm).unwrap())?;
        c.insert_i64(
            "nose_tip_index",
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![self.nose_tip_index as i64]).unwrap(),
        )?;
        c.insert_f64("region_mask", self.region_mask.clone().into_dyn())?;
        c.write_to(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::read_from(path)?;
        let meta: serde_json::Value = serde_json::from_str(&c.metadata)
            .map_err(|e| Error::Data(format!("model metadata: {e}")))?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("morphable_model") {
            return Err(Error::Data(format!(
                "{} is not a morphable model container",
                path.display()
            )));
        }
        let to1 = |a: &ArrayD<f64>| -> Array1<f64> {
            a.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
        };
        let to2 = |a: &ArrayD<f64>| -> Array2<f64> {
            a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned()
        };
        let tri_arr = c.get_i64("triangles")?;
        let triangles: Vec<[usize; 3]> = tri_arr
            .rows()
            .into_iter()
            .map(|r| [r[0] as usize, r[1] as usize, r[2] as usize])
            .collect();
        let model = MorphableModel {
            mean_shape: to1(c.get_f64("mean_shape")?),
            mean_texture: to1(c.get_f64("mean_texture")?),
            basis_id: to2(c.get_f64("basis_id")?),
            basis_exp: to2(c.get_f64("basis_exp")?),
            basis_tex: to2(c.get_f64("basis_tex")?),
            triangles,
            landmark_indices: c
                .get_i64("landmark_indices")?
                .iter()
                .map(|&i| i as usize)
                .collect(),
            nose_tip_index: c.get_i64("nose_tip_index")?[[0]] as usize,
            region_mask: to1(c.get_f64("region_mask")?),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Differentiable shape decode (graph op): returns an N x 3 tensor.
pub fn decode_shape_op(
    g: &mut Graph,
    model: &MorphableModel,
    alpha: TensorId,
    beta: TensorId,
) -> TensorId {
    let mean = g.constant(model.mean_shape.clone().into_dyn());
    let bid = g.constant(model.basis_id.clone().into_dyn());
    let bexp = g.constant(model.basis_exp.clone().into_dyn());
    let id_term = g.matvec(bid, alpha);
    let exp_term = g.matvec(bexp, beta);
    let s = g.add(mean, id_term);
    let flat = g.add(s, exp_term);
    g.reshape(flat, &[model.n_vertices(), 3])
}

/// Differentiable texture decode (graph op): returns an N x 3 tensor.
pub fn decode_texture_op(g: &mut Graph, model: &MorphableModel, gamma: TensorId) -> TensorId {
    let mean = g.constant(model.mean_texture.clone().into_dyn());
    let btex = g.constant(model.basis_tex.clone().into_dyn());
    let term = g.matvec(btex, gamma);
    let flat = g.add(mean, term);
    g.reshape(flat, &[model.n_vertices(), 3])
}

/// Deterministic desk-scale substitute for licensed face models: a radially
/// deformed icosphere (~80 mm radius) with random orthonormalized bases.
/// Produces the smallest icosphere with at least `n_vertices` vertices.
pub fn synthesize_toy_model(seed: u64, n_vertices: usize) -> MorphableModel {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let counts = [12usize, 42, 162, 642, 2562];
    let level = counts.iter().position(|&c| c >= n_vertices).unwrap_or(4);
    let (unit, triangles) = icosphere(level);
    let n = unit.nrows();

    // smooth radial deformation driven by random low-order SH weights
    let radial: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let base_radius = 80.0;
    let mut vertices = Array2::<f64>::zeros((n, 3));
    for (i, dir) in unit.rows().into_iter().enumerate() {
        let basis = sh_basis_single([dir[0], dir[1], dir[2]]);
        let bump: f64 = radial.iter().zip(basis.iter().skip(1)).map(|(c, b)| c * b).sum();
        let r = base_radius * (1.0 + bump);
        for k in 0..3 {
            // + 0.0 normalizes negative zeros so zero-coefficient decode
            // reproduces the mean bitwise
            vertices[[i, k]] = dir[k] * r + 0.0;
        }
    }

    let mut mean_texture = Array1::<f64>::zeros(3 * n);
    let tex_weights: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.045..0.045)).collect();
    let base_rgb = [0.78, 0.62, 0.54];
    for (i, dir) in unit.rows().into_iter().enumerate() {
        let basis = sh_basis_single([dir[0], dir[1], dir[2]]);
        let bump: f64 = tex_weights.iter().zip(basis.iter().skip(1)).map(|(c, b)| c * b).sum();
        for c in 0..3 {
            mean_texture[3 * i + c] = (base_rgb[c] + bump).clamp(0.05, 0.95);
        }
    }

    let basis_id = random_orthonormal_columns(3 * n, N_ID, &mut rng);
    let basis_exp = random_orthonormal_columns(3 * n, N_EXP, &mut rng);
    let basis_tex = random_orthonormal_columns(3 * n, N_TEX, &mut rng);

    // landmarks live on the front (+z) hemisphere
    let mut front: Vec<usize> = (0..n).filter(|&i| vertices[[i, 2]] > 0.0).collect();
    let landmark_indices: Vec<usize> = if front.len() >= N_LANDMARKS {
        front.shuffle(&mut rng);
        front[..N_LANDMARKS].to_vec()
    } else {
        (0..N_LANDMARKS).map(|_| front[rng.gen_range(0..front.len())]).collect()
    };

    let nose_tip_index = (0..n)
        .max_by(|&a, &b| vertices[[a, 2]].partial_cmp(&vertices[[b, 2]]).unwrap())
        .unwrap();

    let mean_shape = Array1::from_iter(vertices.iter().copied());

    let model = MorphableModel {
        mean_shape,
        mean_texture,
        basis_id,
        basis_exp,
        basis_tex,
        triangles,
        landmark_indices,
        nose_tip_index,
        region_mask: Array1::ones(n),
    };
    debug_assert!(model.validate().is_ok());
    model
}

/// Random matrix with orthonormalized columns (modified Gram-Schmidt).
/// When the column count exceeds the rank, the surplus columns are zero.
fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let qi = m.column(i).to_owned();
                let proj = qi.dot(&m.column(j));
                let mut col = m.column_mut(j);
                col.scaled_add(-proj, &qi);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        let mut col = m.column_mut(j);
        if norm > 1e-8 {
            col.mapv_inplace(|x| x / norm);
        } else {
            col.fill(0.0);
        }
    }
    m
}
