//! Pinhole cameras, rays and the scene bounding sphere.
//!
//! Conventions: camera frame is x right, y down, z forward. Pose maps camera
//! to world (`x_world = R x_cam + t`), so `t` is the camera centre. Pixel
//! centres sit at integer + 0.5.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Mat3,
    intrinsics_inv: Mat3,
    rotation: Mat3,
    translation: Vec3,
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: Mat3,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data("camera image size must be positive".into()));
        }
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Data("intrinsics must be upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::Data(
                "intrinsics need positive focal lengths and K[2][2] = 1".into(),
            ));
        }
        let rtr = rotation.transpose() * rotation;
        if (rtr - Mat3::identity()).abs().max() > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6
        {
            return Err(Error::Data("pose rotation is not a proper rotation".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite camera translation".into()));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| Error::Data("singular intrinsics".into()))?;
        Ok(Self {
            intrinsics,
            intrinsics_inv,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction,
    /// which maps to image-up (negative camera y).
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        intrinsics: Mat3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let down = -up + z * up.dot(&z);
        if down.norm() < 1e-12 {
            return Err(Error::Domain("look_at: up is parallel to view direction".into()));
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Self::new(intrinsics, rotation, eye, width, height)
    }

    /// `K = [[f, 0, w/2], [0, f, h/2], [0, 0, 1]]`.
    pub fn centered_intrinsics(focal: f64, width: usize, height: usize) -> Mat3 {
        Mat3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn pixel_center(col: usize, row: usize) -> Vec2 {
        Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Unit world direction through a continuous pixel location.
    pub fn direction_through(&self, pixel: &Vec2) -> Vec3 {
        let d_cam = self.intrinsics_inv * Vec3::new(pixel.x, pixel.y, 1.0);
        (self.rotation * d_cam).normalize()
    }

    /// Ray through `pixel`, clipped to `bounds`. `Ok(None)` when the ray
    /// misses the bounding sphere.
    pub fn generate_ray(&self, pixel: &Vec2, bounds: &SceneBounds) -> Result<Option<Ray>> {
        let inside = pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.width as f64
            && pixel.y <= self.height as f64;
        if !inside || !pixel.x.is_finite() || !pixel.y.is_finite() {
            return Err(Error::Domain(format!(
                "pixel ({}, {}) outside {}x{} image",
                pixel.x, pixel.y, self.width, self.height
            )));
        }
        let origin = self.center();
        let direction = self.direction_through(pixel);
        Ok(bounds
            .intersect(&origin, &direction)
            .map(|(t_near, t_far)| Ray {
                origin,
                direction,
                t_near,
                t_far,
            }))
    }

    /// Pinhole projection; returns the continuous pixel location and the
    /// camera-frame depth.
    pub fn world_to_pixel(&self, point: &Vec3) -> Result<(Vec2, f64)> {
        let p_cam = self.rotation.transpose() * (point - self.translation);
        if p_cam.z <= 0.0 {
            return Err(Error::BehindCamera(p_cam.z));
        }
        let h = self.intrinsics * p_cam;
        Ok((Vec2::new(h.x / h.z, h.y / h.z), p_cam.z))
    }

    pub fn contains_pixel(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// Same camera expressed in coordinates `(x - center) / scale`.
    pub fn normalized(&self, center: &Vec3, scale: f64) -> Self {
        Self {
            translation: (self.translation - center) / scale,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Bounding sphere of the reconstruction volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Default for SceneBounds {
    fn default() -> Self {
        Self::unit()
    }
}

impl SceneBounds {
    pub fn new(center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Data(format!("bounds radius must be positive, got {radius}")));
        }
        Ok(Self {
            center: [center.x, center.y, center.z],
            radius,
        })
    }

    pub fn unit() -> Self {
        Self {
            center: [0.0; 3],
            radius: 1.0,
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    /// Chord of the ray with the sphere, with the entry clamped to `t >= 0`.
    pub fn intersect(&self, origin: &Vec3, direction: &Vec3) -> Option<(f64, f64)> {
        let oc = origin - self.center();
        let b = oc.dot(direction);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let t_far = -b + s;
        let t_near = (-b - s).max(0.0);
        (t_far > t_near).then_some((t_near, t_far))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.center()).norm() <= self.radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let axis = Vec3::new(rng.gen(), rng.gen(), rng.gen()) - Vec3::repeat(0.5);
        let angle = rng.gen_range(-3.0..3.0);
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    #[test]
    fn principal_ray_points_forward() {
        let cam = Camera::new(
            Camera::centered_intrinsics(50.0, 64, 64),
            Mat3::identity(),
            Vec3::zeros(),
            64,
            64,
        )
        .unwrap();
        let d = cam.direction_through(&Vec2::new(32.0, 32.0));
        assert_relative_eq!(d, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn sphere_chord_from_offset_camera() {
        let cam = Camera::new(
            Camera::centered_intrinsics(50.0, 64, 64),
            Mat3::identity(),
            Vec3::new(0.0, 0.0, -3.0),
            64,
            64,
        )
        .unwrap();
        let ray = cam
            .generate_ray(&Vec2::new(32.0, 32.0), &SceneBounds::unit())
            .unwrap()
            .unwrap();
        assert_relative_eq!(ray.t_near, 2.0, epsilon = 1e-12);
        assert_relative_eq!(ray.t_far, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_image_pixel_is_domain_error() {
        let cam = Camera::new(
            Camera::centered_intrinsics(50.0, 8, 8),
            Mat3::identity(),
            Vec3::zeros(),
            8,
            8,
        )
        .unwrap();
        assert!(matches!(
            cam.generate_ray(&Vec2::new(9.0, 1.0), &SceneBounds::unit()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn missing_ray_reports_none() {
        let cam = Camera::new(
            Camera::centered_intrinsics(50.0, 64, 64),
            Mat3::identity(),
            Vec3::new(5.0, 0.0, -3.0),
            64,
            64,
        )
        .unwrap();
        let r = cam.generate_ray(&Vec2::new(32.0, 32.0), &SceneBounds::unit()).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn camera_inside_bounds_clamps_near_to_zero() {
        let b = SceneBounds::unit();
        let (t0, t1) = b.intersect(&Vec3::zeros(), &Vec3::x()).unwrap();
        assert_eq!(t0, 0.0);
        assert_relative_eq!(t1, 1.0);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = Camera::new(
            Camera::centered_intrinsics(50.0, 64, 64),
            Mat3::identity(),
            Vec3::zeros(),
            64,
            64,
        )
        .unwrap();
        assert!(matches!(
            cam.world_to_pixel(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
        let (px, depth) = cam.world_to_pixel(&Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px, Vec2::new(32.0, 32.0));
        assert_relative_eq!(depth, 2.0);
    }

    #[test]
    fn invalid_rotation_is_rejected() {
        let mut r = Mat3::identity();
        r[(0, 0)] = -1.0;
        assert!(Camera::new(Camera::centered_intrinsics(1.0, 4, 4), r, Vec3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn reprojection_roundtrip_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let k = Mat3::new(
                rng.gen_range(20.0..200.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(10.0..50.0),
                0.0,
                rng.gen_range(20.0..200.0),
                rng.gen_range(10.0..50.0),
                0.0,
                0.0,
                1.0,
            );
            let cam = Camera::new(
                k,
                random_rotation(&mut rng),
                Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 4.0,
                64,
                48,
            )
            .unwrap();
            let px = Vec2::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0));
            let d = cam.direction_through(&px);
            let t = rng.gen_range(0.1..10.0);
            let (back, depth) = cam.world_to_pixel(&(cam.center() + d * t)).unwrap();
            assert!((back - px).norm() < 1e-6);
            assert!(depth > 0.0);
            // at t = 1 as well
            let (back1, _) = cam.world_to_pixel(&(cam.center() + d)).unwrap();
            assert!((back1 - px).norm() < 1e-6);
        }
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = random_rotation(&mut rng);
        let t = Vec3::new(0.3, -0.2, 1.5);
        let k = Camera::centered_intrinsics(80.0, 64, 64);
        let cam = Camera::new(k, rot, t, 64, 64).unwrap();
        // Oracle: P = K [R^T | -R^T t] applied to homogeneous points.
        let rt = rot.transpose();
        let mut p34 = nalgebra::Matrix3x4::<f64>::zeros();
        p34.fixed_view_mut::<3, 3>(0, 0).copy_from(&(k * rt));
        p34.set_column(3, &(k * (-rt * t)));
        for _ in 0..200 {
            let x = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 4.0 - Vec3::repeat(2.0);
            let h = p34 * nalgebra::Vector4::new(x.x, x.y, x.z, 1.0);
            match cam.world_to_pixel(&x) {
                Ok((px, depth)) => {
                    assert!(h.z > 0.0);
                    assert_relative_eq!(px.x, h.x / h.z, epsilon = 1e-9, max_relative = 1e-9);
                    assert_relative_eq!(px.y, h.y / h.z, epsilon = 1e-9, max_relative = 1e-9);
                    assert_relative_eq!(depth, h.z, epsilon = 1e-12);
                }
                Err(_) => assert!(h.z <= 0.0),
            }
        }
    }

    #[test]
    fn look_at_identity_case() {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            Camera::centered_intrinsics(10.0, 8, 8),
            8,
            8,
        )
        .unwrap();
        assert_relative_eq!(*cam.rotation(), Mat3::identity(), epsilon = 1e-15);
    }
}
