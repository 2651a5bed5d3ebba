//! Spherical-harmonics shading of per-vertex texture.
//!
//! Real SH, bands 0-2 (9 basis functions), standard normalization
//! constants. Basis ordering: `Y00, Y1-1(y), Y10(z), Y11(x), Y2-2(xy),
//! Y2-1(yz), Y20(3z^2-1), Y21(xz), Y22(x^2-y^2)`. Lighting coefficients
//! are 27 reals laid out channel-major: R's 9 weights, then G's, then B's.

use ndarray::{Array1, Array2};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2A: f64 = 1.092_548_430_592_079_2; // xy, yz, xz
pub const SH_C20: f64 = 0.315_391_565_252_520_05; // 3z^2 - 1
pub const SH_C22: f64 = 0.546_274_215_296_039_6; // x^2 - y^2

pub const N_SH: usize = 9;
pub const N_LIGHT_COEFFS: usize = 27;

/// SH basis values for one direction (not required to be unit length;
/// callers are expected to pass unit normals).
pub fn sh_basis_single(n: [f64; 3]) -> [f64; N_SH] {
    let (x, y, z) = (n[0], n[1], n[2]);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2A * x * y,
        SH_C2A * y * z,
        SH_C20 * (3.0 * z * z - 1.0),
        SH_C2A * x * z,
        SH_C22 * (x * x - y * y),
    ]
}

/// Jacobian of the 9 basis functions w.r.t. the direction.
pub fn sh_basis_jacobian(n: [f64; 3]) -> [[f64; 3]; N_SH] {
    let (x, y, z) = (n[0], n[1], n[2]);
    [
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2A * y, SH_C2A * x, 0.0],
        [0.0, SH_C2A * z, SH_C2A * y],
        [0.0, 0.0, 6.0 * SH_C20 * z],
        [SH_C2A * z, 0.0, SH_C2A * x],
        [2.0 * SH_C22 * x, -2.0 * SH_C22 * y, 0.0],
    ]
}

/// Evaluate the SH basis for every normal: N x 3 -> N x 9.
pub fn sh_basis(normals: &Array2<f64>) -> Array2<f64> {
    let n = normals.nrows();
    let mut out = Array2::zeros((n, N_SH));
    for (i, row) in normals.rows().into_iter().enumerate() {
        let vals = sh_basis_single([row[0], row[1], row[2]]);
        for (k, v) in vals.iter().enumerate() {
            out[[i, k]] = *v;
        }
    }
    out
}

/// Area-weighted vertex normals. Each face contributes its (unnormalized)
/// cross product, so larger faces weigh more and degenerate faces
/// contribute nothing; vertices with no area end up with a zero normal.
pub fn compute_vertex_normals(vertices: &Array2<f64>, triangles: &[[usize; 3]]) -> Array2<f64> {
    let n = vertices.nrows();
    let mut acc = Array2::<f64>::zeros((n, 3));
    for t in triangles {
        let a = [vertices[[t[0], 0]], vertices[[t[0], 1]], vertices[[t[0], 2]]];
        let b = [vertices[[t[1], 0]], vertices[[t[1], 1]], vertices[[t[1], 2]]];
        let c = [vertices[[t[2], 0]], vertices[[t[2], 1]], vertices[[t[2], 2]]];
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = cross(u, w);
        for &v in t {
            acc[[v, 0]] += cr[0];
            acc[[v, 1]] += cr[1];
            acc[[v, 2]] += cr[2];
        }
    }
    for mut row in acc.rows_mut() {
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if norm > 1e-12 {
            row[0] /= norm;
            row[1] /= norm;
            row[2] /= norm;
        } else {
            row.fill(0.0);
        }
    }
    acc
}

/// Shade per-vertex texture: `out[v][c] = texture[v][c] * sum_k
/// delta[c*9+k] * Psi_k(n_v)`.
pub fn shade_texture(
    texture: &Array2<f64>,
    normals: &Array2<f64>,
    delta: &Array1<f64>,
) -> Result<Array2<f64>> {
    if delta.len() != N_LIGHT_COEFFS {
        return Err(Error::shape("lighting coefficients", N_LIGHT_COEFFS, delta.len()));
    }
    if texture.nrows() != normals.nrows() {
        return Err(Error::shape("shading normals", texture.nrows(), normals.nrows()));
    }
    let basis = sh_basis(normals); // N x 9
    let delta_mat = delta
        .clone()
        .into_shape((3, N_SH))
        .expect("27 = 3 x 9");
    let irradiance = basis.dot(&delta_mat.t()); // N x 3
    Ok(texture * &irradiance)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

// ---- graph operations ----

/// Differentiable area-weighted vertex normals (graph op).
pub fn vertex_normals_op(g: &mut Graph, vertices: TensorId, triangles: &[[usize; 3]]) -> TensorId {
    let verts_val = g.value(vertices).clone();
    let verts2 = verts_val
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("vertices must be N x 3")
        .to_owned();
    let tris = triangles.to_vec();
    let normals = compute_vertex_normals(&verts2, triangles);
    let n = verts2.nrows();

    // pre-normalization accumulators, needed for the backward pass
    let mut acc = Array2::<f64>::zeros((n, 3));
    for t in &tris {
        let a = [verts2[[t[0], 0]], verts2[[t[0], 1]], verts2[[t[0], 2]]];
        let b = [verts2[[t[1], 0]], verts2[[t[1], 1]], verts2[[t[1], 2]]];
        let c = [verts2[[t[2], 0]], verts2[[t[2], 1]], verts2[[t[2], 2]]];
        let cr = cross(
            [b[0] - a[0], b[1] - a[1], b[2] - a[2]],
            [c[0] - a[0], c[1] - a[1], c[2] - a[2]],
        );
        for &v in t {
            acc[[v, 0]] += cr[0];
            acc[[v, 1]] += cr[1];
            acc[[v, 2]] += cr[2];
        }
    }

    g.custom(
        &[vertices],
        normals.clone().into_dyn(),
        Box::new(move |graph, grad| {
            let grad2 = grad
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let verts = graph
                .value(vertices)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();

            // d(loss)/d(accumulated normal) through n = m / |m|
            let mut dacc = Array2::<f64>::zeros((n, 3));
            for v in 0..n {
                let m = [acc[[v, 0]], acc[[v, 1]], acc[[v, 2]]];
                let norm = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                if norm <= 1e-12 {
                    continue;
                }
                let nh = [m[0] / norm, m[1] / norm, m[2] / norm];
                let gv = [grad2[[v, 0]], grad2[[v, 1]], grad2[[v, 2]]];
                let dot = nh[0] * gv[0] + nh[1] * gv[1] + nh[2] * gv[2];
                for k in 0..3 {
                    dacc[[v, k]] = (gv[k] - nh[k] * dot) / norm;
                }
            }

            // back through the per-face cross products
            let mut dverts = Array2::<f64>::zeros((n, 3));
            for t in &tris {
                let a = [verts[[t[0], 0]], verts[[t[0], 1]], verts[[t[0], 2]]];
                let b = [verts[[t[1], 0]], verts[[t[1], 1]], verts[[t[1], 2]]];
                let c = [verts[[t[2], 0]], verts[[t[2], 1]], verts[[t[2], 2]]];
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                // each face's cross product feeds all three of its vertices
                let mut dcf = [0.0; 3];
                for &v in t {
                    dcf[0] += dacc[[v, 0]];
                    dcf[1] += dacc[[v, 1]];
                    dcf[2] += dacc[[v, 2]];
                }
                let du = cross(w, dcf); // ([w]x)^T = -[w]x, so dL/du = w x dL/dy
                let dw = cross(dcf, u);
                for k in 0..3 {
                    dverts[[t[0], k]] -= du[k] + dw[k];
                    dverts[[t[1], k]] += du[k];
                    dverts[[t[2], k]] += dw[k];
                }
            }
            vec![(vertices, dverts.into_dyn())]
        }),
    )
}

/// Differentiable SH basis evaluation (graph op): N x 3 -> N x 9.
pub fn sh_basis_op(g: &mut Graph, normals: TensorId) -> TensorId {
    let nv = g
        .value(normals)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("normals must be N x 3")
        .to_owned();
    let basis = sh_basis(&nv);
    g.custom(
        &[normals],
        basis.into_dyn(),
        Box::new(move |graph, grad| {
            let g2 = grad
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let nv = graph
                .value(normals)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let n = nv.nrows();
            let mut dn = Array2::<f64>::zeros((n, 3));
            for v in 0..n {
                let jac = sh_basis_jacobian([nv[[v, 0]], nv[[v, 1]], nv[[v, 2]]]);
                for k in 0..N_SH {
                    for d in 0..3 {
                        dn[[v, d]] += g2[[v, k]] * jac[k][d];
                    }
                }
            }
            vec![(normals, dn.into_dyn())]
        }),
    )
}

/// Differentiable shading: texture (N x 3), normals (N x 3), delta (27).
pub fn shade_texture_op(
    g: &mut Graph,
    texture: TensorId,
    normals: TensorId,
    delta: TensorId,
) -> Result<TensorId> {
    let dlen = g.value(delta).len();
    if dlen != N_LIGHT_COEFFS {
        return Err(Error::shape("lighting coefficients", N_LIGHT_COEFFS, dlen));
    }
    let basis = sh_basis_op(g, normals); // N x 9
    let delta_mat = g.reshape(delta, &[3, N_SH]);
    let delta_t = g.transpose2(delta_mat); // 9 x 3
    let irradiance = g.matmul(basis, delta_t); // N x 3
    Ok(g.mul(texture, irradiance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use crate::mesh::icosphere;
    use ndarray::{array, ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_normals_match_vertex_directions() {
        // deviation halves per subdivision level; level 4 sits at ~5.4e-3
        let (verts, faces) = icosphere(4);
        let normals = compute_vertex_normals(&verts, &faces);
        for (v, n) in verts.rows().into_iter().zip(normals.rows()) {
            for k in 0..3 {
                assert!((v[k] - n[k]).abs() < 1e-2, "normal off: {} vs {}", v[k], n[k]);
            }
        }
    }

    #[test]
    fn flat_quad_normals_are_face_normal() {
        let verts = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let faces = vec![[0usize, 1, 2], [0, 2, 3]];
        let normals = compute_vertex_normals(&verts, &faces);
        for n in normals.rows() {
            assert!((n[0]).abs() < 1e-15 && (n[1]).abs() < 1e-15 && (n[2] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_triangle_contributes_nothing() {
        let verts = array![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [2.0, 2.0, 2.0],
            [2.0, 2.0, 2.0]
        ];
        // one proper face and one zero-area face touching vertex 0
        let faces = vec![[0usize, 1, 2], [0, 3, 4]];
        let normals = compute_vertex_normals(&verts, &faces);
        assert!((normals[[0, 2]] - 1.0).abs() < 1e-15);
        // vertices with only the degenerate face have zero normals
        assert_eq!(normals[[3, 0]], 0.0);
        assert_eq!(normals[[4, 2]], 0.0);
    }

    #[test]
    fn sh_band0_column_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dirs = Array2::from_shape_fn((50, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let basis = sh_basis(&dirs);
        for i in 0..dirs.nrows() {
            assert_eq!(basis[[i, 0]], SH_C0);
        }
    }

    #[test]
    fn sh_at_north_pole_matches_closed_forms() {
        let vals = sh_basis_single([0.0, 0.0, 1.0]);
        let expected = [
            SH_C0,
            0.0,
            SH_C1,
            0.0,
            0.0,
            0.0,
            SH_C20 * 2.0,
            0.0,
            0.0,
        ];
        for (v, e) in vals.iter().zip(expected.iter()) {
            assert!((v - e).abs() < 1e-15, "{v} vs {e}");
        }
    }

    #[test]
    fn band1_averages_vanish_on_uniform_sphere() {
        // Monte-Carlo oracle: E[Psi_k] = 0 over the uniform sphere for k >= 1
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let mut sums = [0.0f64; 3];
        for _ in 0..n {
            // uniform direction via normalized Gaussian triple
            let v: [f64; 3] = [
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let b = sh_basis_single([v[0] / norm, v[1] / norm, v[2] / norm]);
            sums[0] += b[1];
            sums[1] += b[2];
            sums[2] += b[3];
        }
        for s in sums {
            assert!((s / n as f64).abs() < 1e-2);
        }
    }

    #[test]
    fn band0_only_lighting_scales_texture_uniformly() {
        let (verts, faces) = icosphere(1);
        let normals = compute_vertex_normals(&verts, &faces);
        let texture = Array2::from_shape_fn((verts.nrows(), 3), |(i, c)| {
            0.1 + 0.01 * i as f64 + 0.2 * c as f64
        });
        let c = 1.7;
        let mut delta = Array1::zeros(27);
        delta[0] = c;
        delta[9] = c;
        delta[18] = c;
        let shaded = shade_texture(&texture, &normals, &delta).unwrap();
        let scale = c * SH_C0;
        for (s, t) in shaded.iter().zip(texture.iter()) {
            assert!((s - t * scale).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_lighting_gives_black() {
        let (verts, faces) = icosphere(0);
        let normals = compute_vertex_normals(&verts, &faces);
        let texture = Array2::from_elem((verts.nrows(), 3), 0.5);
        let shaded = shade_texture(&texture, &normals, &Array1::zeros(27)).unwrap();
        assert!(shaded.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shading_matches_per_vertex_loop_oracle() {
        let (verts, faces) = icosphere(1);
        let normals = compute_vertex_normals(&verts, &faces);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let texture = Array2::from_shape_fn((verts.nrows(), 3), |_| rng.gen::<f64>());
        let delta = Array1::from_shape_fn(27, |_| rng.gen::<f64>() * 2.0 - 1.0);
        let shaded = shade_texture(&texture, &normals, &delta).unwrap();

        for v in 0..verts.nrows() {
            let basis = sh_basis_single([normals[[v, 0]], normals[[v, 1]], normals[[v, 2]]]);
            for c in 0..3 {
                let mut irr = 0.0;
                for k in 0..9 {
                    irr += delta[c * 9 + k] * basis[k];
                }
                let expected = texture[[v, c]] * irr;
                assert!(
                    (shaded[[v, c]] - expected).abs() < 1e-12,
                    "{} vs {}",
                    shaded[[v, c]],
                    expected
                );
            }
        }
    }

    #[test]
    fn wrong_delta_length_rejected() {
        let (verts, faces) = icosphere(0);
        let normals = compute_vertex_normals(&verts, &faces);
        let texture = Array2::zeros((verts.nrows(), 3));
        assert!(shade_texture(&texture, &normals, &Array1::zeros(9)).is_err());
    }

    #[test]
    fn shading_invariant_to_renormalizing_unit_normals() {
        let (verts, faces) = icosphere(1);
        let normals = compute_vertex_normals(&verts, &faces);
        let mut renorm = normals.clone();
        for mut row in renorm.rows_mut() {
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            row[0] /= n;
            row[1] /= n;
            row[2] /= n;
        }
        let texture = Array2::from_elem((verts.nrows(), 3), 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let delta = Array1::from_shape_fn(27, |_| rng.gen::<f64>());
        let a = shade_texture(&texture, &normals, &delta).unwrap();
        let b = shade_texture(&texture, &renorm, &delta).unwrap();
        assert!(max_rel_error(&a.into_dyn(), &b.into_dyn(), 1e-9) < 1e-12);
    }

    /// Gradient checks on a 12-vertex mesh against central differences.
    #[test]
    fn shading_gradients_match_finite_differences() {
        let (verts, faces) = icosphere(0);
        let n = verts.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let texture0 = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
        let delta0 = Array1::from_shape_fn(27, |_| rng.gen::<f64>() - 0.5);
        let weights = ndarray::ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.gen::<f64>() - 0.5);

        let faces_c = faces.clone();
        let loss_of = |verts_in: &ArrayD<f64>, tex_in: &ArrayD<f64>, delta_in: &ArrayD<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(verts_in.clone());
            let t = g.leaf(tex_in.clone());
            let d = g.leaf(delta_in.clone());
            let nrm = vertex_normals_op(&mut g, v, &faces_c);
            let shaded = shade_texture_op(&mut g, t, nrm, d).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(shaded, w);
            let l = g.sum(p);
            (g, v, t, d, l)
        };

        let vd = verts.clone().into_dyn();
        let td = texture0.clone().into_dyn();
        let dd = delta0.clone().into_dyn();
        let (mut g, v, t, d, l) = loss_of(&vd, &td, &dd);
        let grads = g.backward(l);
        let (gv, gt, gd) = (grads.wrt(v).clone(), grads.wrt(t).clone(), grads.wrt(d).clone());

        let fd_v = central_diff(&vd, 1e-6, |x| {
            let (mut g, _, _, _, l) = loss_of(x, &td, &dd);
            let val = g.scalar(l);
            let _ = &mut g;
            val
        });
        let fd_t = central_diff(&td, 1e-6, |x| {
            let (mut g, _, _, _, l) = loss_of(&vd, x, &dd);
            let val = g.scalar(l);
            let _ = &mut g;
            val
        });
        let fd_d = central_diff(&dd, 1e-6, |x| {
            let (mut g, _, _, _, l) = loss_of(&vd, &td, x);
            let val = g.scalar(l);
            let _ = &mut g;
            val
        });

        assert!(max_rel_error(&gv, &fd_v, 1e-6) < 1e-6, "vertex grads");
        assert!(max_rel_error(&gt, &fd_t, 1e-6) < 1e-6, "texture grads");
        assert!(max_rel_error(&gd, &fd_d, 1e-6) < 1e-6, "delta grads");
    }

    #[test]
    fn shading_linear_in_delta_and_texture() {
        let (verts, faces) = icosphere(1);
        let normals = compute_vertex_normals(&verts, &faces);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let tex = Array2::from_shape_fn((verts.nrows(), 3), |_| rng.gen::<f64>());
        let d1 = Array1::from_shape_fn(27, |_| rng.gen::<f64>());
        let d2 = Array1::from_shape_fn(27, |_| rng.gen::<f64>());
        let s1 = shade_texture(&tex, &normals, &d1).unwrap();
        let s2 = shade_texture(&tex, &normals, &d2).unwrap();
        let sboth = shade_texture(&tex, &normals, &(&d1 + &d2)).unwrap();
        let sum = &s1 + &s2;
        assert!(max_rel_error(&sboth.into_dyn(), &sum.into_dyn(), 1e-9) < 1e-12);
    }
}
