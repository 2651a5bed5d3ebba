//! The 257-dimensional regression target and its fixed layout.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ID: usize = 80;
pub const N_EXP: usize = 64;
pub const N_TEX: usize = 80;
pub const N_ROT: usize = 3;
pub const N_TRANS: usize = 3;
pub const N_LIGHT: usize = 27;
pub const N_TOTAL: usize = 257;

/// Cumulative split offsets of the flat layout:
/// identity | expression | texture | rotation | translation | lighting.
pub const SPLIT_OFFSETS: [usize; 6] = [
    N_ID,
    N_ID + N_EXP,
    N_ID + N_EXP + N_TEX,
    N_ID + N_EXP + N_TEX + N_ROT,
    N_ID + N_EXP + N_TEX + N_ROT + N_TRANS,
    N_TOTAL,
];

/// Regressed coefficients: identity/expression/texture PCA weights, pose
/// (Euler angles in radians + translation in model units) and 27
/// spherical-harmonics lighting weights (9 per RGB channel, channel-major).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CoefficientVector {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub gamma: Array1<f64>,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub lighting: Array1<f64>,
}

impl CoefficientVector {
    pub fn zeros() -> Self {
        Self {
            alpha: Array1::zeros(N_ID),
            beta: Array1::zeros(N_EXP),
            gamma: Array1::zeros(N_TEX),
            rotation: [0.0; 3],
            translation: [0.0; 3],
            lighting: Array1::zeros(N_LIGHT),
        }
    }

    /// Split a flat 257-vector into its components.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != N_TOTAL {
            return Err(Error::shape("coefficient vector", N_TOTAL, flat.len()));
        }
        Ok(Self {
            alpha: Array1::from_vec(flat[..SPLIT_OFFSETS[0]].to_vec()),
            beta: Array1::from_vec(flat[SPLIT_OFFSETS[0]..SPLIT_OFFSETS[1]].to_vec()),
            gamma: Array1::from_vec(flat[SPLIT_OFFSETS[1]..SPLIT_OFFSETS[2]].to_vec()),
            rotation: [
                flat[SPLIT_OFFSETS[2]],
                flat[SPLIT_OFFSETS[2] + 1],
                flat[SPLIT_OFFSETS[2] + 2],
            ],
            translation: [
                flat[SPLIT_OFFSETS[3]],
                flat[SPLIT_OFFSETS[3] + 1],
                flat[SPLIT_OFFSETS[3] + 2],
            ],
            lighting: Array1::from_vec(flat[SPLIT_OFFSETS[4]..].to_vec()),
        })
    }

    /// Concatenate the components back into the flat 257 layout.
    pub fn to_flat(&self) -> Array1<f64> {
        let mut flat = Vec::with_capacity(N_TOTAL);
        flat.extend(self.alpha.iter());
        flat.extend(self.beta.iter());
        flat.extend(self.gamma.iter());
        flat.extend(self.rotation.iter());
        flat.extend(self.translation.iter());
        flat.extend(self.lighting.iter());
        Array1::from_vec(flat)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != N_ID {
            return Err(Error::shape("identity coefficients", N_ID, self.alpha.len()));
        }
        if self.beta.len() != N_EXP {
            return Err(Error::shape("expression coefficients", N_EXP, self.beta.len()));
        }
        if self.gamma.len() != N_TEX {
            return Err(Error::shape("texture coefficients", N_TEX, self.gamma.len()));
        }
        if self.lighting.len() != N_LIGHT {
            return Err(Error::shape("lighting coefficients", N_LIGHT, self.lighting.len()));
        }
        Ok(())
    }
}
