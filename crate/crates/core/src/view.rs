//! Per-view photometric-stereo data and the JSON/PFM on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Mat3, SceneBounds, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::image::FloatImage;

/// One usable (or masked-out) pixel of one view.
///
/// `normal` is in world frame and unit length for foreground pixels; it is
/// zero for background pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub view: usize,
    pub col: u32,
    pub row: u32,
    pub reflectance: f64,
    pub normal: Vec3,
    pub uncertainty_deg: f64,
    pub mask: bool,
}

impl PixelSample {
    pub fn pixel(&self) -> Vec2 {
        Camera::pixel_center(self.col as usize, self.row as usize)
    }
}

#[derive(Debug, Clone)]
pub struct ViewData {
    pub camera: Camera,
    /// World-frame normals, 3 channels.
    pub normals: FloatImage,
    pub reflectance: Option<FloatImage>,
    /// Degrees.
    pub uncertainty: Option<FloatImage>,
    pub mask: Option<FloatImage>,
}

impl ViewData {
    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    pub fn is_foreground(&self, col: usize, row: usize) -> bool {
        let n = self.normals.pixel3(col, row);
        let valid_normal = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) > 0.25;
        let in_mask = self.mask.as_ref().map_or(true, |m| m.get(col, row, 0) > 0.5);
        let positive_r = self.reflectance.as_ref().map_or(true, |r| r.get(col, row, 0) > 0.0);
        valid_normal && in_mask && positive_r
    }

    pub fn reflectance_at(&self, col: usize, row: usize) -> f64 {
        self.reflectance
            .as_ref()
            .map_or(1.0, |r| r.get(col, row, 0) as f64)
    }

    pub fn pixel_sample(&self, view: usize, col: usize, row: usize) -> PixelSample {
        let mask = self.is_foreground(col, row);
        let normal = if mask {
            let n = self.normals.pixel3(col, row);
            Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize()
        } else {
            Vec3::zeros()
        };
        PixelSample {
            view,
            col: col as u32,
            row: row as u32,
            reflectance: self.reflectance_at(col, row),
            normal,
            uncertainty_deg: self
                .uncertainty
                .as_ref()
                .map_or(0.0, |u| u.get(col, row, 0) as f64),
            mask,
        }
    }

    pub fn pixel_samples(&self, view: usize) -> Vec<PixelSample> {
        let mut out = Vec::with_capacity(self.width() * self.height());
        for row in 0..self.height() {
            for col in 0..self.width() {
                out.push(self.pixel_sample(view, col, row));
            }
        }
        out
    }

    /// Multiplies the reflectance map by `factor`; no-op without one.
    pub fn scale_reflectance(&mut self, factor: f64) {
        if let Some(r) = self.reflectance.as_mut() {
            let (w, h) = (r.width(), r.height());
            for row in 0..h {
                for col in 0..w {
                    let v = r.get(col, row, 0) as f64 * factor;
                    r.set(col, row, 0, v as f32);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraManifest {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraManifest {
    pub fn from_camera(cam: &Camera) -> Self {
        let mut k = [0.0; 9];
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                k[i * 3 + j] = cam.intrinsics()[(i, j)];
                r[i * 3 + j] = cam.rotation()[(i, j)];
            }
        }
        let c = cam.center();
        Self {
            k,
            r,
            t: [c.x, c.y, c.z],
            width: cam.width(),
            height: cam.height(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            Mat3::from_row_slice(&self.k),
            Mat3::from_row_slice(&self.r),
            Vec3::from(self.t),
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewManifest {
    pub camera: CameraManifest,
    pub normal_map: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectance_map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty_map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub views: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<SceneBounds>,
    /// Reflectance maps share one global scale (calibrated photometric stereo).
    #[serde(default)]
    pub reflectance_calibrated: bool,
    /// Optional neighbouring-view pairs; a ring is assumed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<[usize; 2]>>,
    /// Ground-truth mesh, used by evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mesh: Option<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn load_map(dir: &Path, rel: &str, channels: usize, cam: &Camera) -> Result<FloatImage> {
    let path = dir.join(rel);
    let img = FloatImage::read_pfm(&path)?;
    if img.channels() != channels {
        return Err(Error::format(
            &path,
            format!("expected {channels} channel(s), found {}", img.channels()),
        ));
    }
    let (w, h) = (cam.width(), cam.height());
    if img.width() == w && img.height() == h {
        return Ok(img);
    }
    // Same aspect ratio: resample; anything else is a mismatch.
    if img.width() * h != img.height() * w {
        return Err(Error::format(
            &path,
            format!(
                "dimension mismatch: map is {}x{}, camera is {w}x{h}",
                img.width(),
                img.height()
            ),
        ));
    }
    Ok(img.resize_nearest(w, h))
}

/// Loads one view manifest. Normals are converted from the camera frame to
/// the world frame and renormalised; near-zero normals become zero
/// (background).
pub fn load_view(manifest_path: &Path) -> Result<ViewData> {
    let manifest: ViewManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let camera = manifest
        .camera
        .to_camera()
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let cam_normals = load_map(dir, &manifest.normal_map, 3, &camera)?;
    let rot = *camera.rotation();
    let mut data = Vec::with_capacity(cam_normals.data().len());
    for px in cam_normals.data().chunks_exact(3) {
        let n = Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64);
        let norm = n.norm();
        if norm > 0.5 {
            let w = rot * (n / norm);
            data.extend_from_slice(&[w.x as f32, w.y as f32, w.z as f32]);
        } else {
            data.extend_from_slice(&[0.0; 3]);
        }
    }
    let normals = FloatImage::new(camera.width(), camera.height(), 3, data)?;
    let opt = |name: &Option<String>| -> Result<Option<FloatImage>> {
        name.as_ref()
            .map(|rel| load_map(dir, rel, 1, &camera))
            .transpose()
    };
    Ok(ViewData {
        reflectance: opt(&manifest.reflectance_map)?,
        uncertainty: opt(&manifest.uncertainty_map)?,
        mask: opt(&manifest.mask)?,
        camera,
        normals,
    })
}

/// Writes a view as `<stem>.json` plus PFM maps; normals are stored in the
/// camera frame.
pub fn write_view(dir: &Path, stem: &str, view: &ViewData) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rot_t = view.camera.rotation().transpose();
    let mut data = Vec::with_capacity(view.normals.data().len());
    for px in view.normals.data().chunks_exact(3) {
        let n = Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64);
        let c = if n.norm() > 0.5 { rot_t * n } else { Vec3::zeros() };
        data.extend_from_slice(&[c.x as f32, c.y as f32, c.z as f32]);
    }
    let cam_normals = FloatImage::new(view.width(), view.height(), 3, data)?;
    let normal_name = format!("{stem}_normal.pfm");
    cam_normals.write_pfm(&dir.join(&normal_name))?;
    let write_opt = |img: &Option<FloatImage>, suffix: &str| -> Result<Option<String>> {
        match img {
            Some(img) => {
                let name = format!("{stem}_{suffix}.pfm");
                img.write_pfm(&dir.join(&name))?;
                Ok(Some(name))
            }
            None => Ok(None),
        }
    };
    let manifest = ViewManifest {
        camera: CameraManifest::from_camera(&view.camera),
        normal_map: normal_name,
        reflectance_map: write_opt(&view.reflectance, "reflectance")?,
        uncertainty_map: write_opt(&view.uncertainty, "uncertainty")?,
        mask: write_opt(&view.mask, "mask")?,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loaded scene in normalised coordinates: the bounding sphere is mapped to
/// the unit sphere at the origin.
#[derive(Debug, Clone)]
pub struct Scene {
    pub views: Vec<ViewData>,
    /// Bounds in the original world coordinates.
    pub world_bounds: SceneBounds,
    pub reflectance_calibrated: bool,
    pub adjacency: Option<Vec<[usize; 2]>>,
    pub gt_mesh: Option<PathBuf>,
}

impl Scene {
    /// Builds a scene from world-space views, normalising cameras.
    pub fn from_world_views(views: Vec<ViewData>, world_bounds: SceneBounds) -> Self {
        let c = world_bounds.center();
        let s = world_bounds.radius;
        let views = views
            .into_iter()
            .map(|mut v| {
                v.camera = v.camera.normalized(&c, s);
                v
            })
            .collect();
        Self {
            views,
            world_bounds,
            reflectance_calibrated: false,
            adjacency: None,
            gt_mesh: None,
        }
    }

    pub fn bounds(&self) -> SceneBounds {
        SceneBounds::unit()
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.world_bounds.center() + p * self.world_bounds.radius
    }

    pub fn to_world_distance(&self, d: f64) -> f64 {
        d * self.world_bounds.radius
    }

    /// Cameras in the original world coordinates.
    pub fn world_cameras(&self) -> Vec<Camera> {
        let s = self.world_bounds.radius;
        let c = self.world_bounds.center();
        self.views.iter().map(|v| v.camera.normalized(&(-c / s), 1.0 / s)).collect()
    }

    pub fn has_reflectance(&self) -> bool {
        self.views.iter().any(|v| v.reflectance.is_some())
    }

    pub fn has_masks(&self) -> bool {
        self.views.iter().any(|v| v.mask.is_some())
    }

    /// Neighbouring pairs used for reflectance scaling.
    pub fn view_pairs(&self) -> Vec<[usize; 2]> {
        match &self.adjacency {
            Some(a) => a.clone(),
            None => {
                let n = self.views.len();
                match n {
                    0 | 1 => Vec::new(),
                    2 => vec![[0, 1]],
                    _ => (0..n).map(|i| [i, (i + 1) % n]).collect(),
                }
            }
        }
    }
}

pub fn load_scene(manifest_path: &Path) -> Result<Scene> {
    let manifest: SceneManifest = read_json(manifest_path)?;
    if manifest.views.is_empty() {
        return Err(Error::format(manifest_path, "scene has no views"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let views = manifest
        .views
        .iter()
        .map(|rel| load_view(&dir.join(rel)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(adj) = &manifest.adjacency {
        if adj.iter().flatten().any(|&i| i >= views.len()) {
            return Err(Error::format(manifest_path, "adjacency references a missing view"));
        }
    }
    let bounds = match manifest.bounds {
        Some(b) => SceneBounds::new(b.center(), b.radius)?,
        None => estimate_bounds(&views)?,
    };
    let mut scene = Scene::from_world_views(views, bounds);
    scene.reflectance_calibrated = manifest.reflectance_calibrated;
    scene.adjacency = manifest.adjacency;
    scene.gt_mesh = manifest.gt_mesh.map(|p| dir.join(p));
    Ok(scene)
}

pub fn write_scene_manifest(path: &Path, manifest: &SceneManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Bounding sphere from camera geometry alone.
///
/// Centre: least-squares point closest to all optical axes. Radius: largest
/// distance from that centre to any foreground pixel ray, plus 10%.
pub fn estimate_bounds(views: &[ViewData]) -> Result<SceneBounds> {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for v in views {
        let d = v.camera.forward();
        let p = Mat3::identity() - d * d.transpose();
        a += p;
        b += p * v.camera.center();
    }
    let center = a
        .try_inverse()
        .map(|inv| inv * b)
        .ok_or_else(|| Error::Data("cannot estimate bounds: optical axes are parallel".into()))?;
    let mut radius: f64 = 0.0;
    for v in views {
        let o = v.camera.center();
        for row in 0..v.height() {
            for col in 0..v.width() {
                if !v.is_foreground(col, row) {
                    continue;
                }
                let d = v.camera.direction_through(&Camera::pixel_center(col, row));
                let oc = center - o;
                let perp = oc - d * oc.dot(&d);
                radius = radius.max(perp.norm());
            }
        }
    }
    if radius <= 0.0 {
        return Err(Error::Data("cannot estimate bounds: no foreground pixels".into()));
    }
    SceneBounds::new(center, radius * 1.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn write_map(dir: &Path, name: &str, img: &FloatImage) {
        img.write_pfm(&dir.join(name)).unwrap();
    }

    fn manifest_for(dir: &Path, r: [f64; 9], w: usize, h: usize) -> PathBuf {
        let m = ViewManifest {
            camera: CameraManifest {
                k: [10.0, 0.0, w as f64 / 2.0, 0.0, 10.0, h as f64 / 2.0, 0.0, 0.0, 1.0],
                r,
                t: [0.0, 0.0, -3.0],
                width: w,
                height: h,
            },
            normal_map: "n.pfm".into(),
            reflectance_map: Some("r.pfm".into()),
            uncertainty_map: None,
            mask: None,
        };
        let p = dir.join("view.json");
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        p
    }

    const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

    #[test]
    fn loads_two_by_two_view() {
        let dir = tempfile::tempdir().unwrap();
        let n = FloatImage::new(2, 2, 3, [0.0, 0.0, -1.0].repeat(4)).unwrap();
        write_map(dir.path(), "n.pfm", &n);
        write_map(dir.path(), "r.pfm", &FloatImage::filled(2, 2, 1, 0.5));
        let view = load_view(&manifest_for(dir.path(), IDENTITY, 2, 2)).unwrap();
        let samples = view.pixel_samples(0);
        assert_eq!(samples.len(), 4);
        for s in samples {
            assert!(s.mask);
            assert_relative_eq!(s.normal, Vec3::new(0.0, 0.0, -1.0));
            assert_relative_eq!(s.reflectance, 0.5);
        }
    }

    #[test]
    fn rotated_pose_maps_normals_to_world() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let mut raw = Vec::new();
        let mut expected = Vec::new();
        for _ in 0..12 {
            let n = Vec3::new(rng.gen(), rng.gen(), rng.gen::<f64>() - 2.0).normalize();
            raw.extend_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
            // Independent oracle: explicit row-by-column products on the f32 values.
            let nf = [n.x as f32 as f64, n.y as f32 as f64, n.z as f32 as f64];
            let mut w = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    w[i] += rot[(i, j)] * nf[j];
                }
            }
            expected.push(Vec3::from(w).normalize());
        }
        write_map(dir.path(), "n.pfm", &FloatImage::new(4, 3, 3, raw).unwrap());
        write_map(dir.path(), "r.pfm", &FloatImage::filled(4, 3, 1, 1.0));
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = rot[(i, j)];
            }
        }
        let view = load_view(&manifest_for(dir.path(), r, 4, 3)).unwrap();
        for (s, e) in view.pixel_samples(0).iter().zip(&expected) {
            assert!((s.normal - e).norm() < 1e-6);
            assert!((s.normal.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_dimensions_fail() {
        let dir = tempfile::tempdir().unwrap();
        write_map(dir.path(), "n.pfm", &FloatImage::filled(3, 2, 3, 0.5));
        write_map(dir.path(), "r.pfm", &FloatImage::filled(2, 2, 1, 1.0));
        let err = load_view(&manifest_for(dir.path(), IDENTITY, 2, 2)).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn same_aspect_maps_are_resampled() {
        let dir = tempfile::tempdir().unwrap();
        write_map(dir.path(), "n.pfm", &FloatImage::new(4, 4, 3, [0.0, 0.0, -1.0].repeat(16)).unwrap());
        write_map(dir.path(), "r.pfm", &FloatImage::filled(2, 2, 1, 1.0));
        let view = load_view(&manifest_for(dir.path(), IDENTITY, 4, 4)).unwrap();
        assert_eq!(view.reflectance.as_ref().unwrap().width(), 4);
    }

    #[test]
    fn missing_file_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest_for(dir.path(), IDENTITY, 2, 2);
        let err = load_view(&p).unwrap_err();
        assert!(err.to_string().contains("n.pfm"), "{err}");
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        fs::write(&p, r#"{"views": [], "colour": 1}"#).unwrap();
        assert!(load_scene(&p).is_err());
    }

    #[test]
    fn ring_pairs_close_the_loop() {
        let scene = Scene {
            views: Vec::new(),
            world_bounds: SceneBounds::unit(),
            reflectance_calibrated: false,
            adjacency: None,
            gt_mesh: None,
        };
        assert!(scene.view_pairs().is_empty());
    }

    #[test]
    fn world_cameras_undo_normalisation() {
        let k = Camera::centered_intrinsics(20.0, 8, 8);
        let eye = Vec3::new(3.0, -1.0, 7.0);
        let cam = Camera::look_at(eye, Vec3::new(1.0, 2.0, 3.0), -Vec3::y(), k, 8, 8).unwrap();
        let view = ViewData {
            camera: cam,
            normals: FloatImage::new(8, 8, 3, vec![0.0; 192]).unwrap(),
            reflectance: None,
            uncertainty: None,
            mask: None,
        };
        let scene = Scene::from_world_views(vec![view], SceneBounds::new(Vec3::new(1.0, 2.0, 3.0), 2.5).unwrap());
        assert_relative_eq!(scene.views[0].camera.center(), (eye - Vec3::new(1.0, 2.0, 3.0)) / 2.5, epsilon = 1e-12);
        assert_relative_eq!(scene.world_cameras()[0].center(), eye, epsilon = 1e-12);
    }
}
