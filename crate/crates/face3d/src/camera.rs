//! Pose parameterization and perspective projection.
//!
//! Conventions, fixed across the crate:
//! - camera frame: x right, y down, z forward (points in front of the
//!   camera have z > 0); pixel (row, col) has centre (col + 0.5, row + 0.5)
//!   in (u, v) coordinates, v growing downward;
//! - Euler angles are intrinsic pitch-yaw-roll: `R = Rx(pitch) * Ry(yaw) *
//!   Rz(roll)`, applied to column vectors, so (0, pi/2, 0) maps +z to +x;
//! - angles are radians internally; reports convert to degrees.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::coeffs::CoefficientVector;
use crate::error::{Error, Result};
use crate::morphable_model::MorphableModel;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Pose {
    /// Pitch, yaw, roll in radians.
    pub euler_angles: [f64; 3],
    /// Translation in model units (millimetres).
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            euler_angles: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// Pose encoded in a coefficient vector, with the scene's nominal
    /// camera distance added to the regressed z-translation.
    pub fn from_coefficients(coeffs: &CoefficientVector, z_offset: f64) -> Self {
        Pose {
            euler_angles: coeffs.rotation,
            translation: [
                coeffs.translation[0],
                coeffs.translation[1],
                coeffs.translation[2] + z_offset,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal_length: f64,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// (cx, cy) in pixels; defaults to the image centre.
    pub principal_point: (f64, f64),
}

impl CameraModel {
    pub fn new(focal_length: f64, height: usize, width: usize) -> Result<Self> {
        let cam = CameraModel {
            focal_length,
            image_size: (height, width),
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length > 0.0) {
            return Err(Error::Config(format!(
                "focal length must be positive, got {}",
                self.focal_length
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config(format!(
                "image size must be positive, got {:?}",
                self.image_size
            )));
        }
        Ok(())
    }
}

fn rx(a: f64) -> Array2<f64> {
    let (s, c) = a.sin_cos();
    ndarray::array![[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn ry(a: f64) -> Array2<f64> {
    let (s, c) = a.sin_cos();
    ndarray::array![[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rz(a: f64) -> Array2<f64> {
    let (s, c) = a.sin_cos();
    ndarray::array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn drx(a: f64) -> Array2<f64> {
    let (s, c) = a.sin_cos();
    ndarray::array![[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn dry(a: f64) -> Array2<f64> {
    let (s, c) = a.sin_cos();
    ndarray::array![[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn drz(a: f64) -> Array2<f64> {
    let (s, c) = a.sin_cos();
    ndarray::array![[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

/// Rotation matrix from intrinsic pitch-yaw-roll Euler angles.
pub fn euler_to_rotation(angles: &[f64; 3]) -> Array2<f64> {
    rx(angles[0]).dot(&ry(angles[1])).dot(&rz(angles[2]))
}

/// Rotation matrix and its derivative w.r.t. each angle.
pub fn euler_to_rotation_with_jacobian(angles: &[f64; 3]) -> (Array2<f64>, [Array2<f64>; 3]) {
    let (p, y, r) = (angles[0], angles[1], angles[2]);
    let (rxm, rym, rzm) = (rx(p), ry(y), rz(r));
    let rot = rxm.dot(&rym).dot(&rzm);
    let dp = drx(p).dot(&rym).dot(&rzm);
    let dy = rxm.dot(&dry(y)).dot(&rzm);
    let dr = rxm.dot(&rym).dot(&drz(r));
    (rot, [dp, dy, dr])
}

/// Rigidly transform vertices into the camera frame: `v * R^T + t`.
pub fn transform_points(vertices: &Array2<f64>, pose: &Pose) -> Array2<f64> {
    let rot = euler_to_rotation(&pose.euler_angles);
    let mut out = vertices.dot(&rot.t());
    for mut row in out.rows_mut() {
        row[0] += pose.translation[0];
        row[1] += pose.translation[1];
        row[2] += pose.translation[2];
    }
    out
}

/// Pinhole projection of camera-frame points; returns (N x 2 pixels, N depths).
pub fn project_points(
    cam_points: &Array2<f64>,
    camera: &CameraModel,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let behind = cam_points.rows().into_iter().filter(|r| r[2] <= 0.0).count();
    if behind > 0 {
        return Err(Error::Numeric(format!(
            "{behind} of {} vertices have non-positive depth",
            cam_points.nrows()
        )));
    }
    let (f, (cx, cy)) = (camera.focal_length, camera.principal_point);
    let n = cam_points.nrows();
    let mut pts = Array2::zeros((n, 2));
    let mut depth = Array1::zeros(n);
    for (i, r) in cam_points.rows().into_iter().enumerate() {
        pts[[i, 0]] = f * r[0] / r[2] + cx;
        pts[[i, 1]] = f * r[1] / r[2] + cy;
        depth[i] = r[2];
    }
    Ok((pts, depth))
}

/// Rigid transform followed by pinhole projection.
pub fn transform_and_project(
    vertices: &Array2<f64>,
    pose: &Pose,
    camera: &CameraModel,
) -> Result<(Array2<f64>, Array1<f64>)> {
    project_points(&transform_points(vertices, pose), camera)
}

/// Decode a shape, select its 68 landmarks and project them:
/// returns 68 x 2 pixel positions.
pub fn project_landmarks(
    model: &MorphableModel,
    coeffs: &CoefficientVector,
    camera: &CameraModel,
    z_offset: f64,
) -> Result<Array2<f64>> {
    let verts = model.decode_shape(&coeffs.alpha, &coeffs.beta)?;
    let landmarks = model.select_landmarks(&verts)?;
    let pose = Pose::from_coefficients(coeffs, z_offset);
    let (pts, _depth) = transform_and_project(&landmarks, &pose, camera)?;
    Ok(pts)
}

// ---- graph operations ----

/// Differentiable Euler-to-rotation (graph op): angles [3] -> R [3, 3].
pub fn rotation_op(g: &mut Graph, angles: TensorId) -> TensorId {
    let a = g.value(angles);
    let ang = [a[[0]], a[[1]], a[[2]]];
    let (rot, _) = euler_to_rotation_with_jacobian(&ang);
    g.custom(
        &[angles],
        rot.into_dyn(),
        Box::new(move |graph, grad| {
            let a = graph.value(angles);
            let ang = [a[[0]], a[[1]], a[[2]]];
            let (_, jac) = euler_to_rotation_with_jacobian(&ang);
            let mut da = Array1::<f64>::zeros(3);
            for (k, dk) in jac.iter().enumerate() {
                da[k] = dk
                    .iter()
                    .zip(grad.iter())
                    .map(|(&d, &gv)| d * gv)
                    .sum();
            }
            vec![(angles, da.into_dyn())]
        }),
    )
}

/// Differentiable rigid transform into the camera frame (graph op):
/// vertices [N, 3], angles [3], translation [3] (+ constant z offset).
pub fn rigid_transform_op(
    g: &mut Graph,
    vertices: TensorId,
    angles: TensorId,
    translation: TensorId,
    z_offset: f64,
) -> TensorId {
    let rot = rotation_op(g, angles);
    let rot_t = g.transpose2(rot);
    let rotated = g.matmul(vertices, rot_t);
    let offset = g.constant(ndarray::array![0.0, 0.0, z_offset].into_dyn());
    let t_eff = g.add(translation, offset);
    let t_row = g.reshape(t_eff, &[1, 3]);
    g.add_bcast(rotated, t_row)
}

/// Differentiable pinhole projection (graph op): camera-frame points
/// [N, 3] -> [N, 3] rows of (u, v, depth). Errors if any depth <= 0.
pub fn pinhole_op(g: &mut Graph, cam_points: TensorId, camera: &CameraModel) -> Result<TensorId> {
    let v = g.value(cam_points);
    let n = v.shape()[0];
    let behind = (0..n).filter(|&i| v[[i, 2]] <= 0.0).count();
    if behind > 0 {
        return Err(Error::Numeric(format!(
            "{behind} of {n} vertices have non-positive depth"
        )));
    }
    let (f, (cx, cy)) = (camera.focal_length, camera.principal_point);
    let mut out = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        let (x, y, z) = (v[[i, 0]], v[[i, 1]], v[[i, 2]]);
        out[[i, 0]] = f * x / z + cx;
        out[[i, 1]] = f * y / z + cy;
        out[[i, 2]] = z;
    }
    Ok(g.custom(
        &[cam_points],
        out.into_dyn(),
        Box::new(move |graph, grad| {
            let v = graph.value(cam_points);
            let mut dv = Array2::<f64>::zeros((n, 3));
            for i in 0..n {
                let (x, y, z) = (v[[i, 0]], v[[i, 1]], v[[i, 2]]);
                let (gu, gv, gz) = (grad[[i, 0]], grad[[i, 1]], grad[[i, 2]]);
                dv[[i, 0]] = gu * f / z;
                dv[[i, 1]] = gv * f / z;
                dv[[i, 2]] = -f * (gu * x + gv * y) / (z * z) + gz;
            }
            vec![(cam_points, dv.into_dyn())]
        }),
    ))
}
