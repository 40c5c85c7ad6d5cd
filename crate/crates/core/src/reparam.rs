//! Joint re-parameterisation of (reflectance, normal) into radiance triplets
//! simulated under three per-pixel lights, and its exact inverse.
//!
//! Lights are stored as the rows of a 3x3 matrix `L`, so a Lambertian
//! triplet is `v = r L n`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::camera::{Camera, Mat3, Vec3};
use crate::error::{Error, Result};

/// Tilt spacing between the three lights.
pub const TILT_SPACING: f64 = 2.0 * PI / 3.0;

/// Slant of every light with respect to the normal: `acos(1/sqrt(3))`,
/// about 54.7356 degrees. With this value the triplet is orthonormal.
pub fn optimal_slant() -> f64 {
    (1.0 / 3f64.sqrt()).acos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightingTriplet {
    lights: Mat3,
    inverse: Mat3,
}

impl LightingTriplet {
    /// Rows of `lights` are light directions; they must be unit length and
    /// linearly independent.
    pub fn new(lights: Mat3) -> Result<Self> {
        for i in 0..3 {
            let n = lights.row(i).norm();
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("light {i} is not unit length ({n})")));
            }
        }
        let det = lights.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Domain(format!("lighting matrix is singular (det {det:e})")));
        }
        let inverse = lights
            .try_inverse()
            .ok_or_else(|| Error::Domain("lighting matrix is singular".into()))?;
        Ok(Self { lights, inverse })
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.lights
    }

    pub fn inverse(&self) -> &Mat3 {
        &self.inverse
    }

    pub fn light(&self, i: usize) -> Vec3 {
        self.lights.row(i).transpose()
    }

    /// `R L` applied light-wise: each light becomes `R l_i`.
    pub fn rotated(&self, rotation: &Mat3) -> Result<Self> {
        Self::new(self.lights * rotation.transpose())
    }
}

/// Three lights at slant `acos(1/sqrt(3))` around `+z`, tilts 0, 120, 240 deg.
pub fn canonical_triplet() -> LightingTriplet {
    let cos_phi = 1.0 / 3f64.sqrt();
    let sin_phi = (2.0f64 / 3.0).sqrt();
    let mut lights = Mat3::zeros();
    for i in 0..3 {
        let tilt = i as f64 * TILT_SPACING;
        lights[(i, 0)] = sin_phi * tilt.cos();
        lights[(i, 1)] = sin_phi * tilt.sin();
        lights[(i, 2)] = cos_phi;
    }
    LightingTriplet::new(lights).expect("canonical triplet is well conditioned")
}

/// Shortest-arc rotation taking `+z` to the unit vector `n`.
///
/// Written out so that `R e_z = n` holds exactly; the antipode uses a fixed
/// half-turn about `+x`.
pub fn rotation_from_z(n: &Vec3) -> Mat3 {
    let c = n.z;
    if 1.0 + c <= 0.0 || (n.x == 0.0 && n.y == 0.0 && c < 0.0) {
        return Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    }
    let h = 1.0 / (1.0 + c);
    Mat3::new(
        1.0 - h * n.x * n.x,
        -h * n.x * n.y,
        n.x,
        -h * n.x * n.y,
        1.0 - h * n.y * n.y,
        n.y,
        -n.x,
        -n.y,
        c,
    )
}

/// The canonical triplet rotated so its axis coincides with `n`.
pub fn optimal_triplet(n: &Vec3) -> Result<LightingTriplet> {
    let norm = n.norm();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Domain(format!("normal must be non-zero and finite, got {n:?}")));
    }
    let n = n / norm;
    let r = rotation_from_z(&n);
    let canonical = canonical_triplet();
    let lights = canonical.matrix() * r.transpose();
    // L is orthonormal by construction, so its inverse is its transpose.
    Ok(LightingTriplet {
        lights,
        inverse: lights.transpose(),
    })
}

/// Radiances may be negative (self-shadowing); they are never clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceTriplet(pub Vec3);

pub fn simulate_radiance(r: f64, n: &Vec3, lighting: &LightingTriplet) -> RadianceTriplet {
    RadianceTriplet(lighting.matrix() * n * r)
}

/// Recovers `(r, n)` with `r = |L^-1 v|`, `n = L^-1 v / r`.
pub fn invert_radiance(v: &RadianceTriplet, lighting: &LightingTriplet) -> Result<(f64, Vec3)> {
    let m = lighting.inverse() * v.0;
    let r = m.norm();
    if !(r > 1e-12) || !r.is_finite() {
        return Err(Error::DegenerateRadiance(r));
    }
    Ok((r, m / r))
}

/// Chooses the lighting triplet attached to a pixel.
pub trait LightingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn triplet(&self, normal: &Vec3, camera: &Camera) -> Result<LightingTriplet>;
}

/// Per-pixel optimal triplet centred on the input normal.
#[derive(Debug, Default, Clone, Copy)]
pub struct OptimalLighting;

impl LightingStrategy for OptimalLighting {
    fn name(&self) -> &'static str {
        "optimal"
    }

    fn triplet(&self, normal: &Vec3, _camera: &Camera) -> Result<LightingTriplet> {
        optimal_triplet(normal)
    }
}

/// One triplet per view, centred on the direction towards the camera.
#[derive(Debug, Default, Clone, Copy)]
pub struct ViewCanonicalLighting;

impl LightingStrategy for ViewCanonicalLighting {
    fn name(&self) -> &'static str {
        "view-canonical"
    }

    fn triplet(&self, _normal: &Vec3, camera: &Camera) -> Result<LightingTriplet> {
        optimal_triplet(&(-camera.forward()))
    }
}

type LightingCtor = fn() -> Arc<dyn LightingStrategy>;

/// Name-keyed lighting strategies.
pub struct LightingRegistry {
    entries: BTreeMap<&'static str, LightingCtor>,
}

impl Default for LightingRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("optimal", || Arc::new(OptimalLighting));
        r.register("view-canonical", || Arc::new(ViewCanonicalLighting));
        r
    }
}

impl LightingRegistry {
    pub fn register(&mut self, name: &'static str, ctor: LightingCtor) {
        self.entries.insert(name, ctor);
    }

    pub fn create(&self, name: &str) -> Result<Arc<dyn LightingStrategy>> {
        self.entries.get(name).map(|c| c()).ok_or_else(|| {
            Error::Config(format!(
                "unknown lighting strategy {name:?} (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
