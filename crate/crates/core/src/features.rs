//! Per-view matching features: an exact oracle read from the scene texture and
//! a photometric patch descriptor, both producing the same [`FeatureMap`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec2};
use crate::maps::GrayImage;
use crate::synth::Scene;

/// H x W x F feature array, channel-innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
    /// Whether valid feature vectors are L2-normalized.
    pub normalized: bool,
    pub view_id: usize,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize, view_id: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            valid: vec![false; width * height],
            normalized: true,
            view_id,
        }
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    /// Bilinear sample at a sub-pixel location; `pixel` must lie in `[0, W-1] x [0, H-1]`.
    pub fn sample_bilinear(&self, pixel: &Vec2, out: &mut [f64]) {
        let x = pixel.x.clamp(0.0, (self.width - 1) as f64);
        let y = pixel.y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let w00 = (1.0 - ax) * (1.0 - ay);
        let w10 = ax * (1.0 - ay);
        let w01 = (1.0 - ax) * ay;
        let w11 = ax * ay;
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        for c in 0..self.channels {
            out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
        }
    }
}

/// Inner product of two equal-length feature vectors.
pub fn feature_dot(f0: &[f64], fn_: &[f64]) -> Result<f64> {
    if f0.len() != fn_.len() {
        return Err(Error::contract(format!(
            "feature_dot: channel counts {} and {} differ",
            f0.len(),
            fn_.len()
        )));
    }
    Ok(f0.iter().zip(fn_).map(|(a, b)| a * b).sum())
}

/// Features read directly off the scene texture at each pixel's ray hit.
pub fn extract_oracle_features(
    scene: &Scene,
    pose: &Pose,
    k: &Intrinsics,
    channels: usize,
    view_id: usize,
) -> Result<FeatureMap> {
    if channels < 2 {
        return Err(Error::domain("oracle features need at least 2 channels"));
    }
    let banks: Vec<_> = (0..scene.primitives.len())
        .map(|i| scene.texture.bank(i, channels))
        .collect();
    let mut map = FeatureMap::zeros(k.width, k.height, channels, view_id);
    let w = k.width;
    map.data
        .par_chunks_mut(w * channels)
        .zip(map.valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (row, valid))| {
            for u in 0..w {
                if let Some(hit) = scene.raycast_pixel(pose, k, u as f64, v as f64) {
                    banks[hit.primitive].eval(&hit.point, &mut row[u * channels..(u + 1) * channels]);
                    valid[u] = true;
                }
            }
        });
    Ok(map)
}

/// Zero-mean, unit-norm `patch x patch` intensity descriptors with clamped borders.
/// Textureless patches get the zero vector and are marked invalid.
pub fn extract_patch_features(image: &GrayImage, patch: usize, view_id: usize) -> Result<FeatureMap> {
    if patch < 3 || patch % 2 == 0 {
        return Err(Error::domain(format!("patch size must be odd and >= 3, got {patch}")));
    }
    let channels = patch * patch;
    let r = (patch / 2) as isize;
    let mut map = FeatureMap::zeros(image.width, image.height, channels, view_id);
    let w = image.width;
    map.data
        .par_chunks_mut(w * channels)
        .zip(map.valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (row, valid))| {
            for u in 0..w {
                let out = &mut row[u * channels..(u + 1) * channels];
                let mut c = 0;
                for dv in -r..=r {
                    for du in -r..=r {
                        out[c] = image.get_clamped(u as isize + du, v as isize + dv);
                        c += 1;
                    }
                }
                let mean = out.iter().sum::<f64>() / channels as f64;
                out.iter_mut().for_each(|x| *x -= mean);
                let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    out.iter_mut().for_each(|x| *x /= norm);
                    valid[u] = true;
                } else {
                    out.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        });
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    Oracle,
    Patch,
}

impl std::str::FromStr for Extractor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Extractor::Oracle),
            "patch" => Ok(Extractor::Patch),
            _ => Err(Error::domain(format!("unknown feature extractor '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Vec3;
    use crate::synth::{generate_scene, SceneConfig, Shape, Texture};

    #[test]
    fn feature_dot_examples() {
        assert_abs_diff_eq!(feature_dot(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(feature_dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(feature_dot(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(feature_dot(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn oracle_features_are_view_invariant() {
        let scene = generate_scene(&SceneConfig {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let k = Intrinsics::from_fov(40, 30, 1.0).unwrap();
        let a = Pose::look_at(Vec3::new(2.5, 2.0, 1.4), Vec3::new(2.5, 5.0, 1.0), Vec3::z()).unwrap();
        let b = Pose::look_at(Vec3::new(2.8, 2.1, 1.3), Vec3::new(2.6, 5.0, 1.1), Vec3::z()).unwrap();
        let fa = extract_oracle_features(&scene, &a, &k, 16, 0).unwrap();
        let fb = extract_oracle_features(&scene, &b, &k, 16, 1).unwrap();
        let mut checked = 0;
        for v in 0..k.height {
            for u in 0..k.width {
                let Some(hit) = scene.raycast_pixel(&a, &k, u as f64, v as f64) else { continue };
                // pick b pixels that see exactly this point: use integer pixels only
                let pc = b.inverse_transform_point(&hit.point);
                let px = crate::geometry::project(&pc, &k);
                if !px.in_front || !k.contains(&px.pixel) {
                    continue;
                }
                let mut f = vec![0.0; 16];
                scene.texture.bank(hit.primitive, 16).eval(&hit.point, &mut f);
                assert_abs_diff_eq!(feature_dot(fa.pixel(u, v), &f).unwrap(), 1.0, epsilon = 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
        assert_eq!(fb.view_id, 1);
    }

    #[test]
    fn oracle_miss_is_zero_and_invalid() {
        let scene = Scene::new(
            vec![Shape::Plane {
                normal: Vec3::z(),
                offset: 2.0,
            }],
            Texture::new(0, 0.2),
        );
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0, 5, 5).unwrap();
        let away = Pose::from_axis_angle(Vec3::y(), std::f64::consts::PI);
        let f = extract_oracle_features(&scene, &away, &k, 4, 0).unwrap();
        assert!(f.valid.iter().all(|v| !v));
        assert!(f.data.iter().all(|&x| x == 0.0));
        assert!(extract_oracle_features(&scene, &away, &k, 1, 0).is_err());
    }

    #[test]
    fn oracle_texture_is_discriminative() {
        // Monte Carlo over point pairs at least one correlation length apart.
        let l = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 10_000;
        let mut below = 0;
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        for i in 0..trials {
            let bank = Texture::new(i as u64 / 100, l).bank(0, 16);
            let p = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let q = p + dir * l * rng.gen_range(1.0..4.0);
            bank.eval(&p, &mut a);
            bank.eval(&q, &mut b);
            if feature_dot(&a, &b).unwrap() < 0.9 {
                below += 1;
            }
        }
        let frac = below as f64 / trials as f64;
        assert!(frac >= 0.95, "only {frac} of distant pairs are distinguishable");
    }

    fn ramp(w: usize, h: usize, shift: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |u, _| 0.1 * (u as f64 + shift))
    }

    #[test]
    fn constant_image_has_no_features() {
        let img = GrayImage::from_fn(6, 5, |_, _| 0.4);
        let f = extract_patch_features(&img, 3, 0).unwrap();
        assert!(f.valid.iter().all(|v| !v));
        assert!(f.data.iter().all(|&x| x == 0.0));
        assert!(extract_patch_features(&img, 4, 0).is_err());
        assert!(extract_patch_features(&img, 1, 0).is_err());
    }

    #[test]
    fn image_matches_itself() {
        let img = GrayImage::from_fn(9, 7, |u, v| ((u * 7 + v * 13) % 11) as f64 / 11.0);
        let f = extract_patch_features(&img, 3, 0).unwrap();
        for v in 0..7 {
            for u in 0..9 {
                if f.is_valid(u, v) {
                    assert_abs_diff_eq!(feature_dot(f.pixel(u, v), f.pixel(u, v)).unwrap(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn shifted_ramp_matches_closed_form() {
        // On a linear ramp the zero-mean patch is independent of position away from
        // the borders, so a 1 px shift leaves interior descriptors unchanged. Next to
        // the clamped left border the patch columns read (0, 0, 1) * slope instead of
        // (-1, 0, 1) * slope.
        let a = extract_patch_features(&ramp(5, 5, 0.0), 3, 0).unwrap();
        let b = extract_patch_features(&ramp(5, 5, 1.0), 3, 0).unwrap();
        assert_abs_diff_eq!(feature_dot(a.pixel(2, 2), b.pixel(2, 2)).unwrap(), 1.0, epsilon = 1e-12);

        // hand evaluation: border column pattern (0,0,1) -> zero-mean (-1/3,-1/3,2/3),
        // interior pattern (-1,0,1). Rows identical, so dot = cosine of the column patterns.
        let border = [-1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0];
        let interior = [-1.0, 0.0, 1.0];
        let expect = border.iter().zip(interior).map(|(x, y)| x * y).sum::<f64>()
            / (border.iter().map(|x| x * x).sum::<f64>().sqrt() * 2f64.sqrt());
        assert_abs_diff_eq!(feature_dot(a.pixel(0, 2), a.pixel(1, 2)).unwrap(), expect, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn patch_features_invariant_to_affine_intensity(a in 0.1f64..5.0, b in -2.0f64..2.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = GrayImage::from_fn(8, 6, |_, _| rng.gen::<f64>());
            let img2 = GrayImage::from_fn(8, 6, |u, v| a * img.data[v * 8 + u] + b);
            let f1 = extract_patch_features(&img, 3, 0).unwrap();
            let f2 = extract_patch_features(&img2, 3, 0).unwrap();
            for (x, y) in f1.data.iter().zip(&f2.data) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn feature_dot_symmetric_bilinear(x in prop::collection::vec(-1.0f64..1.0, 6), y in prop::collection::vec(-1.0f64..1.0, 6), z in prop::collection::vec(-1.0f64..1.0, 6), s in -3.0f64..3.0) {
            let xy = feature_dot(&x, &y).unwrap();
            prop_assert!((xy - feature_dot(&y, &x).unwrap()).abs() < 1e-12);
            let lhs: Vec<f64> = x.iter().zip(&z).map(|(a, b)| s * a + b).collect();
            let expect = s * xy + feature_dot(&z, &y).unwrap();
            prop_assert!((feature_dot(&lhs, &y).unwrap() - expect).abs() < 1e-9);
        }
    }
}
