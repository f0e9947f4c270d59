//! Training losses on depth maps with analytic gradients.
//!
//! Every loss averages over the pixels that actually contribute (valid ground
//! truth, mutually valid normals, in-bounds reprojections) so its magnitude does
//! not depend on mask density.

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec2, Vec3};
use crate::maps::{pool_taps, DepthMap, NormalMap};

pub use crate::maps::{DepthMap as Depth, NormalMap as Normals};

/// Number of supervised output scales.
pub const SCALES: usize = 4;

/// Scalar loss and its gradient with respect to the prediction's pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Predictions at `SCALES` resolutions, each half the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleDepth {
    pub scales: Vec<DepthMap>,
}

impl MultiScaleDepth {
    /// Lower scales by repeated 2x average pooling of a full-resolution prediction.
    pub fn from_full(pred: &DepthMap) -> Self {
        let mut scales = vec![pred.clone()];
        for _ in 1..SCALES {
            let next = scales.last().unwrap().avg_pool2();
            scales.push(next);
        }
        Self { scales }
    }

    /// Map per-scale gradients back to the full-resolution prediction that
    /// [`MultiScaleDepth::from_full`] pooled from.
    pub fn backprop_to_full(&self, grads: &[Vec<f64>]) -> Vec<f64> {
        let mut acc = grads[SCALES - 1].clone();
        for s in (0..SCALES - 1).rev() {
            let mut g = grads[s].clone();
            pool_adjoint(&self.scales[s], &self.scales[s + 1], &acc, &mut g);
            acc = g;
        }
        acc
    }
}

/// Adds the adjoint of one 2x pooling step: spreads `g_coarse` to `g_fine`.
fn pool_adjoint(fine: &DepthMap, coarse: &DepthMap, g_coarse: &[f64], g_fine: &mut [f64]) {
    for v in 0..coarse.height {
        for u in 0..coarse.width {
            let g = g_coarse[v * coarse.width + u];
            if g == 0.0 {
                continue;
            }
            let taps: Vec<_> = pool_taps(fine.width, fine.height, u, v).collect();
            let share = g / taps.len() as f64;
            for (fu, fv) in taps {
                g_fine[fv * fine.width + fu] += share;
            }
        }
    }
}

/// Multi-scale absolute log-depth error with nearest-neighbor upsampling of
/// each scale to the ground-truth resolution and weights `1/s^2`.
/// Returns the value and one gradient per scale.
pub fn depth_loss(pred: &MultiScaleDepth, gt: &DepthMap) -> Result<(f64, Vec<Vec<f64>>)> {
    if pred.scales.len() != SCALES {
        return Err(Error::contract(format!("expected {SCALES} prediction scales")));
    }
    let count = gt.valid_count();
    let mut grads: Vec<Vec<f64>> = pred.scales.iter().map(|p| vec![0.0; p.len()]).collect();
    if count == 0 {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for (s, (p, g)) in pred.scales.iter().zip(grads.iter_mut()).enumerate() {
        let weight = 1.0 / ((s + 1) * (s + 1)) as f64;
        for v in 0..gt.height {
            let pv = v * p.height / gt.height;
            for u in 0..gt.width {
                let Some(d_gt) = gt.get(u, v) else { continue };
                let pu = u * p.width / gt.width;
                let pi = pv * p.width + pu;
                let d = p.depth[pi];
                if !(d > 0.0) || !p.valid[pi] {
                    return Err(Error::domain(format!(
                        "predicted depth {d} at scale {} pixel ({pu}, {pv}) is not positive",
                        s + 1
                    )));
                }
                if !(d_gt > 0.0) {
                    return Err(Error::domain(format!("ground-truth depth {d_gt} is not positive")));
                }
                let r = d.ln() - d_gt.ln();
                total += weight * r.abs();
                g[pi] += weight * r.signum() * f64::from(r != 0.0) / d;
            }
        }
    }
    let n = count as f64;
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((total / n, grads))
}

/// Pooled difference maps `pred - gt` for scales 1..=SCALES.
fn pooled_differences(pred: &DepthMap, gt: &DepthMap) -> Vec<DepthMap> {
    let mut e = DepthMap::empty(pred.width, pred.height);
    for i in 0..pred.len() {
        if pred.valid[i] && gt.valid[i] {
            e.depth[i] = pred.depth[i] - gt.depth[i];
            e.valid[i] = true;
        }
    }
    let mut out = vec![e];
    for _ in 1..SCALES {
        let next = out.last().unwrap().avg_pool2();
        out.push(next);
    }
    out
}

/// Multi-scale gradient-matching loss: forward differences in x and y of the
/// 2x-average-pooled prediction and ground truth.
pub fn grad_loss(pred: &DepthMap, gt: &DepthMap) -> Result<LossValue> {
    if !pred.same_shape(gt) {
        return Err(Error::contract("grad_loss: prediction and ground truth sizes differ"));
    }
    let count = gt.valid_count();
    if count == 0 {
        return Ok(LossValue {
            value: 0.0,
            grad: vec![0.0; pred.len()],
        });
    }
    let pyramid = pooled_differences(pred, gt);
    let mut value = 0.0;
    let mut scale_grads: Vec<Vec<f64>> = pyramid.iter().map(|m| vec![0.0; m.len()]).collect();
    for (e, g) in pyramid.iter().zip(scale_grads.iter_mut()) {
        for v in 0..e.height {
            for u in 0..e.width {
                let i = e.index(u, v);
                if !e.valid[i] {
                    continue;
                }
                for (nu, nv) in [(u + 1, v), (u, v + 1)] {
                    if nu >= e.width || nv >= e.height {
                        continue;
                    }
                    let j = e.index(nu, nv);
                    if !e.valid[j] {
                        continue;
                    }
                    let diff = e.depth[j] - e.depth[i];
                    value += diff.abs();
                    let s = diff.signum() * f64::from(diff != 0.0);
                    g[j] += s;
                    g[i] -= s;
                }
            }
        }
    }
    // back through the pooling pyramid
    let mut acc = scale_grads[SCALES - 1].clone();
    for s in (0..SCALES - 1).rev() {
        let mut g = scale_grads[s].clone();
        pool_adjoint(&pyramid[s], &pyramid[s + 1], &acc, &mut g);
        acc = g;
    }
    let n = count as f64;
    Ok(LossValue {
        value: value / n,
        grad: acc.into_iter().map(|g| g / n).collect(),
    })
}

/// Camera-frame normals from a depth map: the normalized cross product of the
/// vertical and horizontal neighbor differences, which faces the camera for
/// visible surfaces. Pixels on the last row/column, next to invalid depth, or
/// with a degenerate cross product are invalid.
pub fn normals_from_depth(d: &DepthMap, k: &Intrinsics) -> NormalMap {
    let mut out = NormalMap::empty(d.width, d.height);
    for v in 0..d.height.saturating_sub(1) {
        for u in 0..d.width.saturating_sub(1) {
            if let Some((c, _, _)) = normal_cross(d, k, u, v) {
                let n = c.norm();
                if n > 1e-12 {
                    let i = out.index(u, v);
                    out.normals[i] = c / n;
                    out.valid[i] = true;
                }
            }
        }
    }
    out
}

/// Un-normalized normal at `(u, v)` with its two tangents `(a, b)`.
fn normal_cross(d: &DepthMap, k: &Intrinsics, u: usize, v: usize) -> Option<(Vec3, Vec3, Vec3)> {
    let p = |u: usize, v: usize| -> Option<Vec3> {
        let z = d.get(u, v)?;
        Some(k.unproject_dir(&Vec2::new(u as f64, v as f64)) * z)
    };
    let p00 = p(u, v)?;
    let a = p(u + 1, v)? - p00;
    let b = p(u, v + 1)? - p00;
    Some((b.cross(&a), a, b))
}

/// Gradient of `sum_i g_n[i] · n[i]` with respect to the depth map.
pub fn normals_from_depth_backward(d: &DepthMap, k: &Intrinsics, normals: &NormalMap, g_n: &[Vec3]) -> Vec<f64> {
    let mut grad = vec![0.0; d.len()];
    let ray = |u: usize, v: usize| k.unproject_dir(&Vec2::new(u as f64, v as f64));
    for v in 0..d.height.saturating_sub(1) {
        for u in 0..d.width.saturating_sub(1) {
            let i = normals.index(u, v);
            if !normals.valid[i] || g_n[i] == Vec3::zeros() {
                continue;
            }
            let (c, a, b) = normal_cross(d, k, u, v).expect("valid normal has valid neighbors");
            let n = normals.normals[i];
            let g = g_n[i];
            let g_c = (g - n * n.dot(&g)) / c.norm();
            let g_a = g_c.cross(&b);
            let g_b = a.cross(&g_c);
            grad[d.index(u + 1, v)] += g_a.dot(&ray(u + 1, v));
            grad[d.index(u, v + 1)] += g_b.dot(&ray(u, v + 1));
            grad[d.index(u, v)] -= (g_a + g_b).dot(&ray(u, v));
        }
    }
    grad
}

/// `(1 - n̂·n) / 2` averaged over mutually valid pixels; gradient is with respect
/// to the predicted normals.
pub fn normal_loss(pred: &NormalMap, gt: &NormalMap) -> Result<(f64, Vec<Vec3>)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::contract("normal_loss: map sizes differ"));
    }
    let mut grad = vec![Vec3::zeros(); pred.normals.len()];
    let idx: Vec<usize> = (0..pred.normals.len())
        .filter(|&i| pred.valid[i] && gt.valid[i])
        .collect();
    if idx.is_empty() {
        return Ok((0.0, grad));
    }
    let n = idx.len() as f64;
    let mut value = 0.0;
    for &i in &idx {
        value += 1.0 - pred.normals[i].dot(&gt.normals[i]);
        grad[i] = -gt.normals[i] / (2.0 * n);
    }
    Ok((value / (2.0 * n), grad))
}

/// A source camera with ground-truth depth used by [`mv_loss`].
#[derive(Debug, Clone, Copy)]
pub struct MvSource<'a> {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub gt: &'a DepthMap,
}

/// Absolute log-depth error of the prediction reprojected into each source,
/// compared at the nearest source pixel. Points behind a source, outside its
/// image or landing on invalid source depth are skipped.
pub fn mv_loss(pred: &DepthMap, ref_pose: &Pose, k_ref: &Intrinsics, sources: &[MvSource<'_>]) -> Result<LossValue> {
    let mut grad = vec![0.0; pred.len()];
    let mut value = 0.0;
    let mut count = 0usize;
    for src in sources {
        let rel = src.pose.inverse().compose(ref_pose);
        for v in 0..pred.height {
            for u in 0..pred.width {
                let i = pred.index(u, v);
                if !pred.valid[i] {
                    continue;
                }
                let d = pred.depth[i];
                if !(d > 0.0) {
                    return Err(Error::domain(format!("predicted depth {d} at ({u}, {v}) is not positive")));
                }
                let dir = rel.rotation * k_ref.unproject_dir(&Vec2::new(u as f64, v as f64));
                let x = dir * d + rel.translation;
                let proj = crate::geometry::project(&x, &src.intrinsics);
                if !proj.in_front {
                    continue;
                }
                let su = proj.pixel.x.round();
                let sv = proj.pixel.y.round();
                if su < 0.0 || sv < 0.0 || su >= src.gt.width as f64 || sv >= src.gt.height as f64 {
                    continue;
                }
                let Some(d_gt) = src.gt.get(su as usize, sv as usize) else { continue };
                let r = proj.depth.ln() - d_gt.ln();
                value += r.abs();
                count += 1;
                // d/dd log(z) with z = dir_z * d + t_z
                grad[i] += r.signum() * f64::from(r != 0.0) * dir.z / proj.depth;
            }
        }
    }
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let n = count as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossValue { value: value / n, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub grad: f64,
    pub normals: f64,
    pub mv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            grad: 1.0,
            normals: 1.0,
            mv: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub depth: f64,
    pub grad: f64,
    pub normals: f64,
    pub mv: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.depth, self.grad, self.normals, self.mv]
    }
}

/// Weighted sum of the four components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.depth * c.depth + w.grad * c.grad + w.normals * c.normals + w.mv * c.mv
}

/// All four losses on one full-resolution prediction, with the gradient of the
/// weighted total with respect to that prediction.
pub fn evaluate_total(
    pred: &DepthMap,
    gt: &DepthMap,
    k: &Intrinsics,
    ref_pose: &Pose,
    sources: &[MvSource<'_>],
    weights: &LossWeights,
) -> Result<(f64, LossComponents, Vec<f64>)> {
    let multi = MultiScaleDepth::from_full(pred);
    let (l_depth, g_scales) = depth_loss(&multi, gt)?;
    let g_depth = multi.backprop_to_full(&g_scales);

    let l_grad = grad_loss(pred, gt)?;

    let n_pred = normals_from_depth(pred, k);
    let n_gt = normals_from_depth(gt, k);
    let (l_normals, g_n) = normal_loss(&n_pred, &n_gt)?;
    let g_normals = normals_from_depth_backward(pred, k, &n_pred, &g_n);

    let l_mv = mv_loss(pred, ref_pose, k, sources)?;

    let comps = LossComponents {
        depth: l_depth,
        grad: l_grad.value,
        normals: l_normals,
        mv: l_mv.value,
    };
    let grad = (0..pred.len())
        .map(|i| {
            weights.depth * g_depth[i]
                + weights.grad * l_grad.grad[i]
                + weights.normals * g_normals[i]
                + weights.mv * l_mv.grad[i]
        })
        .collect();
    Ok((total_loss(&comps, weights), comps, grad))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{E, FRAC_1_SQRT_2};

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tinynet::grad_check;

    fn random_map(w: usize, h: usize, seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::dense(w, h, (0..w * h).map(|_| rng.gen_range(0.5..4.0)).collect()).unwrap()
    }

    fn k86() -> Intrinsics {
        Intrinsics::new(6.0, 6.0, 3.5, 2.5, 8, 6).unwrap()
    }

    fn with_depth(m: &DepthMap, d: &[f64]) -> DepthMap {
        DepthMap {
            depth: d.to_vec(),
            ..m.clone()
        }
    }

    #[test]
    fn depth_loss_examples() {
        let gt = random_map(8, 6, 0);
        let (l, _) = depth_loss(&MultiScaleDepth::from_full(&gt), &gt).unwrap();
        // pooled gt is not gt, so only scale 1 is exactly zero: build exact scales instead
        assert!(l >= 0.0);
        let exact = MultiScaleDepth {
            scales: vec![DepthMap::dense(1, 1, vec![2.0]).unwrap(); 4],
        };
        let gt1 = DepthMap::dense(1, 1, vec![2.0]).unwrap();
        assert_eq!(depth_loss(&exact, &gt1).unwrap().0, 0.0);

        let scaled = MultiScaleDepth {
            scales: vec![DepthMap::dense(1, 1, vec![2.0 * E]).unwrap(); 4],
        };
        let (l, _) = depth_loss(&scaled, &gt1).unwrap();
        assert_abs_diff_eq!(l, 1.0 + 0.25 + 1.0 / 9.0 + 1.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.423611, epsilon = 1e-6);
    }

    #[test]
    fn depth_loss_rejects_non_positive_prediction() {
        let gt = DepthMap::dense(1, 1, vec![2.0]).unwrap();
        let bad = MultiScaleDepth {
            scales: vec![DepthMap::dense(1, 1, vec![0.0]).unwrap(); 4],
        };
        assert!(depth_loss(&bad, &gt).is_err());
    }

    #[test]
    fn depth_loss_skips_invalid_gt() {
        let mut gt = DepthMap::dense(2, 1, vec![1.0, 1.0]).unwrap();
        gt.valid[1] = false;
        let p = MultiScaleDepth {
            scales: vec![DepthMap::dense(2, 1, vec![E, 100.0]).unwrap(); 4],
        };
        let (l, _) = depth_loss(&p, &gt).unwrap();
        assert_abs_diff_eq!(l, 1.423611, epsilon = 1e-6);
    }

    #[test]
    fn depth_loss_gradient() {
        let gt = random_map(8, 6, 1);
        let pred = random_map(8, 6, 2);
        let multi = MultiScaleDepth::from_full(&pred);
        let (_, g) = depth_loss(&multi, &gt).unwrap();
        let analytic = multi.backprop_to_full(&g);
        let err = grad_check(
            |d| depth_loss(&MultiScaleDepth::from_full(&with_depth(&pred, d)), &gt).unwrap().0,
            &pred.depth,
            &analytic,
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_loss_vanishes_for_constants_and_offsets() {
        let a = DepthMap::dense(4, 4, vec![1.5; 16]).unwrap();
        let b = DepthMap::dense(4, 4, vec![3.0; 16]).unwrap();
        assert_eq!(grad_loss(&a, &b).unwrap().value, 0.0);
        let gt = random_map(8, 6, 3);
        let shifted = with_depth(&gt, &gt.depth.iter().map(|d| d + 0.75).collect::<Vec<_>>());
        assert_abs_diff_eq!(grad_loss(&shifted, &gt).unwrap().value, 0.0, epsilon = 1e-12);
    }

    /// Independent direct summation: builds each pooled level by explicit 2x2
    /// block means and sums absolute forward-difference mismatches.
    fn grad_loss_reference(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
        fn pool(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let h = (m.len() / 2).max(1);
            let w = (m[0].len() / 2).max(1);
            (0..h)
                .map(|r| {
                    (0..w)
                        .map(|c| {
                            let rows: Vec<usize> = if m.len() >= 2 { vec![2 * r, 2 * r + 1] } else { vec![r] };
                            let cols: Vec<usize> = if m[0].len() >= 2 { vec![2 * c, 2 * c + 1] } else { vec![c] };
                            let mut s = 0.0;
                            for &rr in &rows {
                                for &cc in &cols {
                                    s += m[rr][cc];
                                }
                            }
                            s / (rows.len() * cols.len()) as f64
                        })
                        .collect()
                })
                .collect()
        }
        let mut p = pred.to_vec();
        let mut g = gt.to_vec();
        let mut total = 0.0;
        for _ in 0..4 {
            for r in 0..p.len() {
                for c in 0..p[0].len() {
                    if c + 1 < p[0].len() {
                        total += ((p[r][c + 1] - p[r][c]) - (g[r][c + 1] - g[r][c])).abs();
                    }
                    if r + 1 < p.len() {
                        total += ((p[r + 1][c] - p[r][c]) - (g[r + 1][c] - g[r][c])).abs();
                    }
                }
            }
            p = pool(&p);
            g = pool(&g);
        }
        total / (pred.len() * pred[0].len()) as f64
    }

    #[test]
    fn grad_loss_ramp_matches_reference() {
        let (a, b) = (0.3, 0.1);
        let pred: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|c| 1.0 + a * c as f64).collect()).collect();
        let gt: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|c| 2.0 + b * c as f64).collect()).collect();
        let expected = grad_loss_reference(&pred, &gt);
        let pm = DepthMap::dense(4, 4, pred.concat()).unwrap();
        let gm = DepthMap::dense(4, 4, gt.concat()).unwrap();
        assert_abs_diff_eq!(grad_loss(&pm, &gm).unwrap().value, expected, epsilon = 1e-12);
        // per level: 4x4 has 12 x-differences of |a-b|, 2x2 has 2 of 2|a-b|, 1x1 none
        assert_abs_diff_eq!(expected, (12.0 * (a - b) + 2.0 * 2.0 * (a - b)) / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_loss_gradient() {
        let gt = random_map(8, 6, 4);
        let pred = random_map(8, 6, 5);
        let l = grad_loss(&pred, &gt).unwrap();
        let err = grad_check(|d| grad_loss(&with_depth(&pred, d), &gt).unwrap().value, &pred.depth, &l.grad, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fronto_parallel_normals() {
        let k = k86();
        let d = DepthMap::dense(8, 6, vec![2.0; 48]).unwrap();
        let n = normals_from_depth(&d, &k);
        for v in 0..5 {
            for u in 0..7 {
                assert_abs_diff_eq!(n.get(u, v).unwrap(), Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
            }
        }
        assert!(n.get(7, 0).is_none() && n.get(0, 5).is_none());
    }

    #[test]
    fn tilted_plane_normals() {
        // plane through (0,0,2) with normal (0, -sin45, -cos45): -y/√2 - (z-2)/√2 = 0 -> z = 2 - y
        let k = Intrinsics::new(40.0, 40.0, 20.0, 15.0, 41, 31).unwrap();
        let d = DepthMap::from_fn(41, 31, |u, v| {
            let r = k.unproject_dir(&Vec2::new(u as f64, v as f64));
            Some(2.0 / (r.y + 1.0))
        });
        let n = normals_from_depth(&d, &k);
        let expect = Vec3::new(0.0, -FRAC_1_SQRT_2, -FRAC_1_SQRT_2);
        for v in 0..30 {
            for u in 0..40 {
                let got = n.get(u, v).unwrap();
                assert!((got - expect).norm() < 1e-3);
                assert_abs_diff_eq!(got.norm(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normal_loss_examples() {
        let mut a = NormalMap::empty(2, 2);
        a.valid = vec![true; 4];
        a.normals = vec![Vec3::new(0.0, 0.0, -1.0); 4];
        assert_eq!(normal_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        b.normals = vec![Vec3::new(0.0, 0.0, 1.0); 4];
        assert_eq!(normal_loss(&a, &b).unwrap().0, 1.0);
        b.normals = vec![Vec3::new(1.0, 0.0, 0.0); 4];
        assert_eq!(normal_loss(&a, &b).unwrap().0, 0.5);
    }

    #[test]
    fn normal_loss_gradient_through_depth() {
        let k = k86();
        let gt = random_map(8, 6, 6);
        let pred = random_map(8, 6, 7);
        let n_gt = normals_from_depth(&gt, &k);
        let loss = |d: &[f64]| {
            let p = with_depth(&pred, d);
            normal_loss(&normals_from_depth(&p, &k), &n_gt).unwrap().0
        };
        let n_pred = normals_from_depth(&pred, &k);
        let (_, g_n) = normal_loss(&n_pred, &n_gt).unwrap();
        let analytic = normals_from_depth_backward(&pred, &k, &n_pred, &g_n);
        let err = grad_check(loss, &pred.depth, &analytic, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mv_loss_identity_source_reduces_to_log_error() {
        let k = k86();
        let pose = Pose::from_translation(Vec3::new(0.1, 0.2, 0.3));
        let gt = random_map(8, 6, 8);
        let pred = random_map(8, 6, 9);
        let l = mv_loss(&pred, &pose, &k, &[MvSource { pose, intrinsics: k, gt: &gt }]).unwrap();
        let direct: f64 = pred
            .depth
            .iter()
            .zip(&gt.depth)
            .map(|(p, g)| (p.ln() - g.ln()).abs())
            .sum::<f64>()
            / 48.0;
        assert_abs_diff_eq!(l.value, direct, epsilon = 1e-12);

        let plane = DepthMap::dense(8, 6, vec![2.0; 48]).unwrap();
        let scaled = DepthMap::dense(8, 6, vec![2.0 * E; 48]).unwrap();
        let l = mv_loss(&scaled, &pose, &k, &[MvSource { pose, intrinsics: k, gt: &plane }]).unwrap();
        assert_abs_diff_eq!(l.value, 1.0, epsilon = 1e-12);
        let l = mv_loss(&plane, &pose, &k, &[MvSource { pose, intrinsics: k, gt: &plane }]).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn mv_loss_gradient() {
        let k = k86();
        let ref_pose = Pose::identity();
        let src_pose = Pose::from_translation(Vec3::new(0.05, -0.02, 0.0));
        let gt = random_map(8, 6, 10);
        let pred = random_map(8, 6, 11);
        let srcs = [MvSource {
            pose: src_pose,
            intrinsics: k,
            gt: &gt,
        }];
        let l = mv_loss(&pred, &ref_pose, &k, &srcs).unwrap();
        let err = grad_check(
            |d| mv_loss(&with_depth(&pred, d), &ref_pose, &k, &srcs).unwrap().value,
            &pred.depth,
            &l.grad,
            1e-7,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
        let ones = LossComponents {
            depth: 1.0,
            grad: 1.0,
            normals: 1.0,
            mv: 1.0,
        };
        assert_abs_diff_eq!(total_loss(&ones, &w), 3.2, epsilon = 1e-15);
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        let k = k86();
        let gt = random_map(8, 6, 12);
        let pred = random_map(8, 6, 13);
        let pose = Pose::identity();
        let src = Pose::from_translation(Vec3::new(0.03, 0.0, 0.01));
        let srcs = [MvSource { pose: src, intrinsics: k, gt: &gt }];
        let w = LossWeights::default();
        let (_, _, g) = evaluate_total(&pred, &gt, &k, &pose, &srcs, &w).unwrap();
        let err = grad_check(
            |d| evaluate_total(&with_depth(&pred, d), &gt, &k, &pose, &srcs, &w).unwrap().0,
            &pred.depth,
            &g,
            1e-7,
        );
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_invariant(seed in any::<u64>(), c in 0.1f64..5.0, off in -0.4f64..2.0) {
            let gt = random_map(8, 6, seed);
            let pred = random_map(8, 6, seed.wrapping_add(1));
            let multi = MultiScaleDepth::from_full(&pred);
            let (l, _) = depth_loss(&multi, &gt).unwrap();
            prop_assert!(l >= 0.0);
            let scale = |m: &DepthMap| with_depth(m, &m.depth.iter().map(|d| d * c).collect::<Vec<_>>());
            let (l2, _) = depth_loss(&MultiScaleDepth::from_full(&scale(&pred)), &scale(&gt)).unwrap();
            prop_assert!((l - l2).abs() < 1e-9);

            let g = grad_loss(&pred, &gt).unwrap().value;
            let shift = |m: &DepthMap| with_depth(m, &m.depth.iter().map(|d| d + off).collect::<Vec<_>>());
            prop_assert!(g >= 0.0);
            prop_assert!((g - grad_loss(&shift(&pred), &shift(&gt)).unwrap().value).abs() < 1e-9);

            let k = k86();
            let (nl, _) = normal_loss(&normals_from_depth(&pred, &k), &normals_from_depth(&gt, &k)).unwrap();
            prop_assert!((0.0..=1.0).contains(&nl));
        }
    }
}
