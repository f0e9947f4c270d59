//! Pinhole cameras, rigid camera-to-world poses and the per-pixel geometric
//! quantities that feed the plane-sweep volume.
//!
//! Conventions used throughout the crate:
//! - pixel `(u, v)` addresses column `u`, row `v`; integer coordinates are pixel centers;
//! - camera frame is x right, y down, z forward;
//! - a [`Pose`] maps camera coordinates to world coordinates (`X_w = R X_c + t`).

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Symmetric camera with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_rad: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_rad).tan();
        Self::new(
            f,
            f,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Scale focal lengths, principal point and image size by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
        }
    }

    /// Intrinsics of the crop starting at pixel `(u0, v0)`.
    pub fn cropped(&self, u0: usize, v0: usize, width: usize, height: usize) -> Self {
        Self {
            cx: self.cx - u0 as f64,
            cy: self.cy - v0 as f64,
            width,
            height,
            ..*self
        }
    }

    /// Pixel coordinates inside the sampleable image area `[0, W-1] x [0, H-1]`,
    /// allowing `PIXEL_EPS` of round-off at the border.
    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= -PIXEL_EPS
            && pixel.y >= -PIXEL_EPS
            && pixel.x <= (self.width - 1) as f64 + PIXEL_EPS
            && pixel.y <= (self.height - 1) as f64 + PIXEL_EPS
    }

    /// Direction `((u-cx)/fx, (v-cy)/fy, 1)`; scaling it by depth gives the camera-frame point.
    #[inline]
    pub fn unproject_dir(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }
}

const PIXEL_EPS: f64 = 1e-9;

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Rotation about `axis` by `angle`, no translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(r.into_inner(), Vec3::zeros())
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up vector.
    /// The camera's y axis points "down" in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::domain("look_at: eye and target coincide"));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::domain("look_at: viewing direction parallel to up"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Ok(Self::new(rotation, eye))
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Build from a homogeneous matrix; the rotation block must be orthonormal with det +1.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let rotation: Mat3 = m.fixed_view::<3, 3>(0, 0).into();
        let translation: Vec3 = m.fixed_view::<3, 1>(0, 3).into();
        let bottom_ok = m[(3, 0)] == 0.0 && m[(3, 1)] == 0.0 && m[(3, 2)] == 0.0 && m[(3, 3)] == 1.0;
        let ortho_err = (rotation.transpose() * rotation - Mat3::identity()).amax();
        if !bottom_ok || ortho_err > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::domain("matrix is not a rigid transform"));
        }
        Ok(Self::new(rotation, translation))
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Pose of `other` expressed in the frame of `self`: `invert(self) ∘ other`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World point into this camera's frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }
}

/// Pose distance between two cameras, `sqrt(|t| + 2/3 tr(I - R))` of their relative pose.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let rel = a.relative_to(b);
    let trace_term = 3.0 - rel.rotation.trace();
    // tr(I - R) is ≥ 0 analytically; round-off can push it slightly negative.
    (rel.translation.norm() + (2.0 / 3.0) * trace_term.max(0.0)).sqrt()
}

pub fn backproject(pixel: &Vec2, depth: f64, k: &Intrinsics) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("backproject: depth {depth} is not positive")));
    }
    Ok(k.unproject_dir(pixel) * depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Only meaningful when `in_front` is true.
    pub pixel: Vec2,
    pub depth: f64,
    pub in_front: bool,
}

#[inline]
pub fn project(point: &Vec3, k: &Intrinsics) -> Projection {
    let z = point.z;
    if z > 0.0 {
        Projection {
            pixel: Vec2::new(k.fx * point.x / z + k.cx, k.fy * point.y / z + k.cy),
            depth: z,
            in_front: true,
        }
    } else {
        Projection {
            pixel: Vec2::new(f64::NAN, f64::NAN),
            depth: z,
            in_front: false,
        }
    }
}

/// Where a reference pixel swept to a fronto-parallel plane lands in a source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSample {
    pub src_pixel: Vec2,
    /// Signed perpendicular depth of the swept point in the source camera.
    pub src_depth: f64,
    pub valid: bool,
}

pub fn warp_to_plane(
    ref_pixel: &Vec2,
    plane_depth: f64,
    ref_pose: &Pose,
    src_pose: &Pose,
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
) -> Result<WarpSample> {
    let x_ref = backproject(ref_pixel, plane_depth, k_ref)?;
    let x_world = ref_pose.transform_point(&x_ref);
    Ok(warp_world_point(&x_world, src_pose, k_src))
}

/// Project an already-swept world point into a source view.
#[inline]
pub fn warp_world_point(x_world: &Vec3, src_pose: &Pose, k_src: &Intrinsics) -> WarpSample {
    let x_src = src_pose.inverse_transform_point(x_world);
    let proj = project(&x_src, k_src);
    let valid = proj.in_front && k_src.contains(&proj.pixel);
    WarpSample {
        src_pixel: proj.pixel,
        src_depth: proj.depth,
        valid,
    }
}

/// Unit-norm direction in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub direction: Vec3,
}

impl Ray {
    /// Normalized direction from `origin` to `target`.
    pub fn between(origin: &Vec3, target: &Vec3) -> Result<Ray> {
        let d = target - origin;
        let n = d.norm();
        if !(n > 1e-12) {
            return Err(Error::domain("ray: target coincides with origin"));
        }
        Ok(Ray { direction: d / n })
    }
}

/// Direction from the camera center toward the swept point of `pixel` at `plane_depth`.
pub fn ray_direction(pixel: &Vec2, k: &Intrinsics, pose: &Pose, plane_depth: f64) -> Result<Ray> {
    let x = pose.transform_point(&backproject(pixel, plane_depth, k)?);
    Ray::between(&pose.center(), &x)
}

pub fn relative_ray_angle(r0: &Ray, rn: &Ray) -> f64 {
    r0.direction.dot(&rn.direction).clamp(-1.0, 1.0).acos()
}
