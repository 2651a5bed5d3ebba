//! The five-term training objective: photometric, perceptual, landmark
//! reprojection, coefficient regularization and reflectance terms, with a
//! weighted total.
//!
//! Every term exists twice: a plain-array version (used by evaluation and
//! reporting) and a graph version (used by training). The graph versions
//! are built from the same primitive operations so the two always agree.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

/// Balance weights of the objective, with the published defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub photometric: f64,
    pub perceptual: f64,
    pub landmark: f64,
    pub regularization: f64,
    pub reflectance: f64,
    pub reg_alpha: f64,
    pub reg_beta: f64,
    pub reg_gamma: f64,
    /// Landmark weight applied to the inner-mouth points.
    pub inner_mouth_weight: f64,
    /// Inner-mouth landmark indices (of the 68-point annotation).
    pub inner_mouth_indices: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photometric: 1.9,
            perceptual: 0.2,
            landmark: 1.6e-3,
            regularization: 3e-4,
            reflectance: 4.5,
            reg_alpha: 1.0,
            reg_beta: 0.8,
            reg_gamma: 1.7e-2,
            inner_mouth_weight: 20.0,
            inner_mouth_indices: (60..68).collect(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.photometric,
            self.perceptual,
            self.landmark,
            self.regularization,
            self.reflectance,
            self.reg_alpha,
            self.reg_beta,
            self.reg_gamma,
            self.inner_mouth_weight,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Per-landmark weights for `n` landmarks.
    pub fn landmark_weights(&self, n: usize) -> Array1<f64> {
        let mut w = Array1::ones(n);
        for &i in &self.inner_mouth_indices {
            if i < n {
                w[i] = self.inner_mouth_weight;
            }
        }
        w
    }
}

/// Unweighted per-term values plus the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub pho: f64,
    pub per: f64,
    pub lmk: f64,
    pub reg3dmm: f64,
    pub refl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the five terms, in the fixed combination order.
    pub fn weighted_total(w: &LossWeights, pho: f64, per: f64, lmk: f64, reg3dmm: f64, refl: f64) -> f64 {
        w.photometric * pho
            + w.perceptual * per
            + w.landmark * lmk
            + w.regularization * reg3dmm
            + w.reflectance * refl
    }

    pub fn new(w: &LossWeights, pho: f64, per: f64, lmk: f64, reg3dmm: f64, refl: f64) -> Self {
        LossBreakdown {
            pho,
            per,
            lmk,
            reg3dmm,
            refl,
            total: Self::weighted_total(w, pho, per, lmk, reg3dmm, refl),
        }
    }
}

/// Photometric term value plus a flag raised when the face region is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    pub zero_coverage: bool,
}

/// Mask-weighted mean of per-pixel RGB L2 norms:
/// `sum_{i in M} A_i * ||I_i - Ir_i||_2 / sum_{i in M} A_i`.
pub fn photometric_loss(
    image: &ndarray::Array3<f64>,
    rendered: &ndarray::Array3<f64>,
    render_mask: &Array2<f64>,
    skin_mask: &Array2<f64>,
) -> Result<PhotometricLoss> {
    if image.dim() != rendered.dim() {
        return Err(Error::shape(
            "photometric images",
            format!("{:?}", image.dim()),
            format!("{:?}", rendered.dim()),
        ));
    }
    let (h, w, _) = image.dim();
    if render_mask.dim() != (h, w) || skin_mask.dim() != (h, w) {
        return Err(Error::shape("photometric masks", format!("{h}x{w}"), "mismatched"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            if render_mask[[y, x]] == 0.0 {
                continue;
            }
            let a = skin_mask[[y, x]];
            den += a;
            if a == 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for c in 0..3 {
                let d = image[[y, x, c]] - rendered[[y, x, c]];
                sq += d * d;
            }
            num += a * sq.sqrt();
        }
    }
    if den == 0.0 {
        return Ok(PhotometricLoss {
            value: 0.0,
            zero_coverage: true,
        });
    }
    Ok(PhotometricLoss {
        value: num / den,
        zero_coverage: false,
    })
}

/// One minus the cosine similarity of two embeddings.
pub fn perceptual_loss(emb_a: &Array1<f64>, emb_b: &Array1<f64>) -> Result<f64> {
    if emb_a.len() != emb_b.len() {
        return Err(Error::shape("embeddings", emb_a.len(), emb_b.len()));
    }
    let na = emb_a.dot(emb_a).sqrt();
    let nb = emb_b.dot(emb_b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm embedding in perceptual loss".into()));
    }
    Ok(1.0 - emb_a.dot(emb_b) / (na * nb))
}

/// Weighted mean squared landmark reprojection error:
/// `(1/N) * sum_n w_n * ||p_n - p'_n||^2`.
pub fn landmark_loss(pred: &Array2<f64>, target: &Array2<f64>, weights: &Array1<f64>) -> Result<f64> {
    if pred.dim() != target.dim() || pred.nrows() != weights.len() {
        return Err(Error::shape(
            "landmark arrays",
            format!("{} x 2", weights.len()),
            format!("{:?} vs {:?}", pred.dim(), target.dim()),
        ));
    }
    let n = pred.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let dx = pred[[i, 0]] - target[[i, 0]];
        let dy = pred[[i, 1]] - target[[i, 1]];
        acc += weights[i] * (dx * dx + dy * dy);
    }
    Ok(acc / n as f64)
}

/// Prior toward the mean face: `la*||a||^2 + lb*||b||^2 + lg*||g||^2`.
pub fn coefficient_regularization(
    alpha: &Array1<f64>,
    beta: &Array1<f64>,
    gamma: &Array1<f64>,
    w: &LossWeights,
) -> f64 {
    w.reg_alpha * alpha.dot(alpha) + w.reg_beta * beta.dot(beta) + w.reg_gamma * gamma.dot(gamma)
}

/// Constant-albedo prior: masked variance of the decoded texture around its
/// masked per-channel mean, `sum (M o (T - mean))^2 / sum M`.
pub fn reflectance_loss(texture: &Array2<f64>, vertex_mask: &Array1<f64>) -> Result<f64> {
    if texture.nrows() != vertex_mask.len() {
        return Err(Error::shape("vertex mask", texture.nrows(), vertex_mask.len()));
    }
    let mask_sum: f64 = vertex_mask.sum();
    if mask_sum == 0.0 {
        return Err(Error::Numeric("empty vertex mask in reflectance loss".into()));
    }
    let mut mean = [0.0f64; 3];
    for (i, row) in texture.rows().into_iter().enumerate() {
        for c in 0..3 {
            mean[c] += vertex_mask[i] * row[c];
        }
    }
    for m in mean.iter_mut() {
        *m /= mask_sum;
    }
    let mut acc = 0.0;
    for (i, row) in texture.rows().into_iter().enumerate() {
        for c in 0..3 {
            let d = vertex_mask[i] * (row[c] - mean[c]);
            acc += d * d;
        }
    }
    Ok(acc / mask_sum)
}

// ---- graph versions ----

/// Graph photometric term. `pixel_weights` must already be `M o A`.
/// Returns the scalar node and the zero-coverage flag.
pub fn photometric_op(
    g: &mut Graph,
    rendered: TensorId,
    target: &ndarray::Array3<f64>,
    pixel_weights: &Array2<f64>,
) -> (TensorId, bool) {
    let weight_sum: f64 = pixel_weights.sum();
    if weight_sum == 0.0 {
        return (g.constant(ArrayD::zeros(IxDyn(&[]))), true);
    }
    let tgt = g.constant(target.clone().into_dyn());
    let diff = g.sub(rendered, tgt);
    let sq = g.mul(diff, diff);
    let per_pixel = g.sum_axis(sq, 2); // H x W
    let norm = g.sqrt(per_pixel);
    let w = g.constant(pixel_weights.clone().into_dyn());
    let weighted = g.mul(norm, w);
    let total = g.sum(weighted);
    (g.scale(total, 1.0 / weight_sum), false)
}

/// Graph perceptual term between a differentiable embedding and a constant.
pub fn perceptual_op(g: &mut Graph, emb: TensorId, target: &Array1<f64>) -> TensorId {
    let t = g.constant(target.clone().into_dyn());
    let dot_n = g.mul(emb, t);
    let dot = g.sum(dot_n);
    let sq_a = g.mul(emb, emb);
    let na2 = g.sum(sq_a);
    let na = g.sqrt(na2);
    let nb = target.dot(target).sqrt();
    let denom = g.scale(na, nb);
    let cos = g.div(dot, denom);
    let one = g.constant(ArrayD::ones(IxDyn(&[])));
    g.sub(one, cos)
}

/// Graph landmark term against constant targets and weights.
pub fn landmark_op(
    g: &mut Graph,
    pred: TensorId,
    target: &Array2<f64>,
    weights: &Array1<f64>,
) -> TensorId {
    let n = target.nrows();
    let t = g.constant(target.clone().into_dyn());
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    let per_lm = g.sum_axis(sq, 1); // [n]
    let w = g.constant(weights.clone().into_dyn());
    let weighted = g.mul(per_lm, w);
    let s = g.sum(weighted);
    g.scale(s, 1.0 / n as f64)
}

/// Graph coefficient regularization.
pub fn regularization_op(
    g: &mut Graph,
    alpha: TensorId,
    beta: TensorId,
    gamma: TensorId,
    w: &LossWeights,
) -> TensorId {
    let sq_a = g.mul(alpha, alpha);
    let sa = g.sum(sq_a);
    let ta = g.scale(sa, w.reg_alpha);
    let sq_b = g.mul(beta, beta);
    let sb = g.sum(sq_b);
    let tb = g.scale(sb, w.reg_beta);
    let sq_c = g.mul(gamma, gamma);
    let sc = g.sum(sq_c);
    let tc = g.scale(sc, w.reg_gamma);
    let ab = g.add(ta, tb);
    g.add(ab, tc)
}

/// Graph reflectance term with a constant vertex mask.
pub fn reflectance_op(g: &mut Graph, texture: TensorId, vertex_mask: &Array1<f64>) -> Result<TensorId> {
    let n = g.shape(texture)[0];
    if vertex_mask.len() != n {
        return Err(Error::shape("vertex mask", n, vertex_mask.len()));
    }
    let mask_sum: f64 = vertex_mask.sum();
    if mask_sum == 0.0 {
        return Err(Error::Numeric("empty vertex mask in reflectance loss".into()));
    }
    let mask_col = g.constant(
        vertex_mask
            .clone()
            .into_shape((n, 1))
            .unwrap()
            .into_dyn(),
    );
    let masked = g.mul_bcast(texture, mask_col); // N x 3
    let sums = g.sum_axis(masked, 0); // [3]
    let mean = g.scale(sums, 1.0 / mask_sum);
    let mean_row = g.reshape(mean, &[1, 3]);
    let centered = g.sub_bcast(texture, mean_row);
    let masked_dev = g.mul_bcast(centered, mask_col);
    let sq = g.mul(masked_dev, masked_dev);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / mask_sum))
}

/// Weighted total from five scalar term nodes, mirroring
/// [`LossBreakdown::weighted_total`] exactly.
pub fn total_op(
    g: &mut Graph,
    w: &LossWeights,
    pho: TensorId,
    per: TensorId,
    lmk: TensorId,
    reg3dmm: TensorId,
    refl: TensorId,
) -> TensorId {
    let a = g.scale(pho, w.photometric);
    let b = g.scale(per, w.perceptual);
    let c = g.scale(lmk, w.landmark);
    let d = g.scale(reg3dmm, w.regularization);
    let e = g.scale(refl, w.reflectance);
    let ab = g.add(a, b);
    let abc = g.add(ab, c);
    let abcd = g.add(abc, d);
    g.add(abcd, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use ndarray::{array, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>())
    }

    #[test]
    fn default_weights_match_published_values() {
        let w = LossWeights::default();
        assert_eq!(w.photometric, 1.9);
        assert_eq!(w.perceptual, 0.2);
        assert_eq!(w.landmark, 1.6e-3);
        assert_eq!(w.regularization, 3e-4);
        assert_eq!(w.reflectance, 4.5);
        assert_eq!(w.reg_alpha, 1.0);
        assert_eq!(w.reg_beta, 0.8);
        assert_eq!(w.reg_gamma, 1.7e-2);
        assert_eq!(w.inner_mouth_weight, 20.0);
        assert_eq!(w.inner_mouth_indices, (60..68).collect::<Vec<_>>());
    }

    #[test]
    fn photometric_zero_for_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(6, 6, &mut rng);
        let mask = Array2::ones((6, 6));
        let loss = photometric_loss(&img, &img, &mask, &mask).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(!loss.zero_coverage);
    }

    #[test]
    fn photometric_uniform_offset_gives_offset_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_image(5, 4, &mut rng);
        let delta = 0.125;
        let mut shifted = img.clone();
        for v in shifted.slice_mut(ndarray::s![.., .., 0]).iter_mut() {
            *v += delta;
        }
        let mask = Array2::ones((5, 4));
        let loss = photometric_loss(&img, &shifted, &mask, &mask).unwrap();
        assert!((loss.value - delta).abs() < 1e-12);
    }

    #[test]
    fn photometric_respects_skin_mask_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = rand_image(4, 4, &mut rng);
        let mut other = img.clone();
        // large error on the left half, delta on the right half
        for y in 0..4 {
            for x in 0..2 {
                other[[y, x, 0]] += 10.0;
            }
            for x in 2..4 {
                other[[y, x, 1]] += 0.5;
            }
        }
        let render_mask = Array2::ones((4, 4));
        let mut skin = Array2::ones((4, 4));
        for y in 0..4 {
            for x in 0..2 {
                skin[[y, x]] = 0.0;
            }
        }
        let loss = photometric_loss(&img, &other, &render_mask, &skin).unwrap();
        // only the right half counts: every counted pixel contributes 0.5
        assert!((loss.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn photometric_zero_coverage_flagged() {
        let img = Array3::zeros((3, 3, 3));
        let mask = Array2::zeros((3, 3));
        let ones = Array2::ones((3, 3));
        let loss = photometric_loss(&img, &img, &mask, &ones).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.zero_coverage);
    }

    #[test]
    fn photometric_invariant_to_pixels_outside_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = rand_image(6, 6, &mut rng);
        let mut rendered = rand_image(6, 6, &mut rng);
        let mut render_mask = Array2::ones((6, 6));
        render_mask[[0, 0]] = 0.0;
        let mut skin = Array2::ones((6, 6));
        skin[[5, 5]] = 0.0;
        let base = photometric_loss(&img, &rendered, &render_mask, &skin).unwrap();
        // perturb pixels outside M and outside A
        rendered[[0, 0, 1]] += 123.0;
        rendered[[5, 5, 2]] -= 55.0;
        let after = photometric_loss(&img, &rendered, &render_mask, &skin).unwrap();
        assert_eq!(base.value, after.value);
    }

    #[test]
    fn perceptual_hits_reference_values() {
        let a = array![1.0, 0.0, 2.0];
        assert_eq!(perceptual_loss(&a, &a).unwrap(), 0.0);
        let neg = a.mapv(|v| -v);
        assert_eq!(perceptual_loss(&a, &neg).unwrap(), 2.0);
        let ortho = array![0.0, 3.0, 0.0];
        assert_eq!(perceptual_loss(&a, &ortho).unwrap(), 1.0);
        assert!(perceptual_loss(&a, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn landmark_loss_hand_arithmetic() {
        let w = LossWeights::default();
        let weights = w.landmark_weights(68);
        let p = Array2::zeros((68, 2));
        assert_eq!(landmark_loss(&p, &p, &weights).unwrap(), 0.0);

        // one ordinary landmark off by (3, 4): 25 / 68
        let mut q = p.clone();
        q[[5, 0]] = 3.0;
        q[[5, 1]] = 4.0;
        let got = landmark_loss(&q, &p, &weights).unwrap();
        assert!((got - 25.0 / 68.0).abs() < 1e-12);

        // same offset on an inner-mouth landmark: 20 * 25 / 68
        let mut q = p.clone();
        q[[62, 0]] = 3.0;
        q[[62, 1]] = 4.0;
        let got = landmark_loss(&q, &p, &weights).unwrap();
        assert!((got - 500.0 / 68.0).abs() < 1e-12);
    }

    #[test]
    fn regularization_hand_values() {
        let w = LossWeights::default();
        let zero = coefficient_regularization(
            &Array1::zeros(80),
            &Array1::zeros(64),
            &Array1::zeros(80),
            &w,
        );
        assert_eq!(zero, 0.0);

        let mut alpha = Array1::zeros(80);
        alpha[0] = 1.0;
        let got = coefficient_regularization(&alpha, &Array1::zeros(64), &Array1::zeros(80), &w);
        assert_eq!(got, 1.0);

        let mut beta = Array1::zeros(64);
        beta[0] = 1.0;
        let got = coefficient_regularization(&Array1::zeros(80), &beta, &Array1::zeros(80), &w);
        assert_eq!(got, 0.8);
    }

    #[test]
    fn reflectance_constant_texture_is_zero() {
        let tex = Array2::from_elem((10, 3), 0.42);
        let mask = Array1::ones(10);
        assert_eq!(reflectance_loss(&tex, &mask).unwrap(), 0.0);
    }

    #[test]
    fn reflectance_hand_oracle_on_masked_pair() {
        // four vertices, two masked; hand-computed masked variance
        let tex = array![
            [0.2, 0.5, -0.1],
            [0.4, 0.1, 0.3],
            [0.8, 0.5, 0.7],
            [9.0, 9.0, 9.0] // unmasked, must not matter
        ];
        let mask = array![0.0, 1.0, 1.0, 0.0];
        // masked mean per channel: (row1 + row2) / 2
        let mean = [0.6, 0.3, 0.5];
        let mut expected = 0.0;
        for i in [1usize, 2] {
            for c in 0..3 {
                let d = tex[[i, c]] - mean[c];
                expected += d * d;
            }
        }
        expected /= 2.0;
        let got = reflectance_loss(&tex, &mask).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn reflectance_empty_mask_rejected() {
        let tex = Array2::zeros((4, 3));
        assert!(reflectance_loss(&tex, &Array1::zeros(4)).is_err());
    }

    #[test]
    fn breakdown_total_is_exact_weighted_sum() {
        let w = LossWeights::default();
        let b = LossBreakdown::new(&w, 0.3, 0.7, 12.0, 4.0, 0.02);
        let expected = 1.9 * 0.3 + 0.2 * 0.7 + 1.6e-3 * 12.0 + 3e-4 * 4.0 + 4.5 * 0.02;
        assert_eq!(b.total, expected);
        // total == 0 iff all weighted terms are 0
        let z = LossBreakdown::new(&w, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn graph_terms_agree_with_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = rand_image(5, 5, &mut rng);
        let target = rand_image(5, 5, &mut rng);
        let mask = Array2::from_shape_fn((5, 5), |_| if rng.gen::<f64>() > 0.3 { 1.0 } else { 0.0 });

        let mut g = Graph::new();
        let ri = g.constant(img.clone().into_dyn());
        let (pho_id, flag) = photometric_op(&mut g, ri, &target, &mask);
        assert!(!flag);
        let pure = photometric_loss(&target, &img, &mask, &Array2::ones((5, 5))).unwrap();
        assert!((g.scalar(pho_id) - pure.value).abs() < 1e-12);

        let e1 = Array1::from_shape_fn(16, |_| rng.gen::<f64>() - 0.5);
        let e2 = Array1::from_shape_fn(16, |_| rng.gen::<f64>() - 0.5);
        let eid = g.constant(e1.clone().into_dyn());
        let per_id = perceptual_op(&mut g, eid, &e2);
        assert!((g.scalar(per_id) - perceptual_loss(&e1, &e2).unwrap()).abs() < 1e-12);

        let w = LossWeights::default();
        let pred = Array2::from_shape_fn((68, 2), |_| rng.gen::<f64>() * 30.0);
        let gt = Array2::from_shape_fn((68, 2), |_| rng.gen::<f64>() * 30.0);
        let lw = w.landmark_weights(68);
        let pid = g.constant(pred.clone().into_dyn());
        let lmk_id = landmark_op(&mut g, pid, &gt, &lw);
        assert!((g.scalar(lmk_id) - landmark_loss(&pred, &gt, &lw).unwrap()).abs() < 1e-10);

        let tex = Array2::from_shape_fn((12, 3), |_| rng.gen::<f64>());
        let vmask = Array1::from_shape_fn(12, |_| if rng.gen::<f64>() > 0.4 { 1.0 } else { 0.0 });
        let tid = g.constant(tex.clone().into_dyn());
        let refl_id = reflectance_op(&mut g, tid, &vmask).unwrap();
        assert!((g.scalar(refl_id) - reflectance_loss(&tex, &vmask).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = rand_image(4, 4, &mut rng);
        let mask = Array2::ones((4, 4));
        let img0 = rand_image(4, 4, &mut rng).into_dyn();

        // photometric w.r.t. the rendered image
        let mut g = Graph::new();
        let ri = g.leaf(img0.clone());
        let (pho, _) = photometric_op(&mut g, ri, &target, &mask);
        let grads = g.backward(pho);
        let analytic = grads.wrt(ri).clone();
        let fd = central_diff(&img0, 1e-7, |x| {
            let mut g = Graph::new();
            let ri = g.leaf(x.clone());
            let (pho, _) = photometric_op(&mut g, ri, &target, &mask);
            g.scalar(pho)
        });
        assert!(max_rel_error(&analytic, &fd, 1e-7) < 1e-5, "photometric");

        // perceptual w.r.t. the embedding
        let e_target = Array1::from_shape_fn(10, |_| rng.gen::<f64>() - 0.5);
        let e0 = Array1::from_shape_fn(10, |_| rng.gen::<f64>() - 0.5).into_dyn();
        let mut g = Graph::new();
        let e = g.leaf(e0.clone());
        let per = perceptual_op(&mut g, e, &e_target);
        let grads = g.backward(per);
        let analytic = grads.wrt(e).clone();
        let fd = central_diff(&e0, 1e-6, |x| {
            let mut g = Graph::new();
            let e = g.leaf(x.clone());
            g.scalar(perceptual_op(&mut g, e, &e_target))
        });
        assert!(max_rel_error(&analytic, &fd, 1e-8) < 1e-5, "perceptual");

        // landmark w.r.t. predictions
        let w = LossWeights::default();
        let gt = Array2::from_shape_fn((68, 2), |_| rng.gen::<f64>() * 20.0);
        let lw = w.landmark_weights(68);
        let p0 = Array2::from_shape_fn((68, 2), |_| rng.gen::<f64>() * 20.0).into_dyn();
        let mut g = Graph::new();
        let p = g.leaf(p0.clone());
        let lmk = landmark_op(&mut g, p, &gt, &lw);
        let grads = g.backward(lmk);
        let analytic = grads.wrt(p).clone();
        let fd = central_diff(&p0, 1e-5, |x| {
            let mut g = Graph::new();
            let p = g.leaf(x.clone());
            g.scalar(landmark_op(&mut g, p, &gt, &lw))
        });
        assert!(max_rel_error(&analytic, &fd, 1e-7) < 1e-6, "landmark");

        // reflectance w.r.t. the texture (through the masked mean too)
        let vmask = Array1::from_shape_fn(9, |i| if i % 3 == 0 { 0.0 } else { 1.0 });
        let t0 = Array2::from_shape_fn((9, 3), |_| rng.gen::<f64>()).into_dyn();
        let mut g = Graph::new();
        let t = g.leaf(t0.clone());
        let refl = reflectance_op(&mut g, t, &vmask).unwrap();
        let grads = g.backward(refl);
        let analytic = grads.wrt(t).clone();
        let fd = central_diff(&t0, 1e-6, |x| {
            let mut g = Graph::new();
            let t = g.leaf(x.clone());
            g.scalar(reflectance_op(&mut g, t, &vmask).unwrap())
        });
        assert!(max_rel_error(&analytic, &fd, 1e-8) < 1e-5, "reflectance");

        // regularization w.r.t. all three coefficient blocks
        let a0 = Array1::from_shape_fn(80, |_| rng.gen::<f64>() - 0.5).into_dyn();
        let b0 = Array1::from_shape_fn(64, |_| rng.gen::<f64>() - 0.5).into_dyn();
        let c0 = Array1::from_shape_fn(80, |_| rng.gen::<f64>() - 0.5).into_dyn();
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let b = g.leaf(b0.clone());
        let c = g.leaf(c0.clone());
        let reg = regularization_op(&mut g, a, b, c, &w);
        let grads = g.backward(reg);
        let fd_a = central_diff(&a0, 1e-6, |x| {
            let mut g = Graph::new();
            let a = g.leaf(x.clone());
            let b = g.constant(b0.clone());
            let c = g.constant(c0.clone());
            g.scalar(regularization_op(&mut g, a, b, c, &w))
        });
        assert!(max_rel_error(grads.wrt(a), &fd_a, 1e-8) < 1e-6, "regularization");
        assert!(grads.get(b).is_some() && grads.get(c).is_some());
    }

    #[test]
    fn total_op_matches_breakdown() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: f64| g.constant(ArrayD::from_elem(IxDyn(&[]), v));
        let pho = mk(&mut g, 0.31);
        let per = mk(&mut g, 0.72);
        let lmk = mk(&mut g, 14.5);
        let reg = mk(&mut g, 3.3);
        let refl = mk(&mut g, 0.004);
        let total = total_op(&mut g, &w, pho, per, lmk, reg, refl);
        let b = LossBreakdown::new(&w, 0.31, 0.72, 14.5, 3.3, 0.004);
        assert_eq!(g.scalar(total), b.total);
    }
}
