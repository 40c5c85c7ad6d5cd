use rayon::prelude::*;

use crate::camera::{Camera, Vec2, Vec3};
use crate::error::{Error, Result};

use super::TriMesh;

/// Per-pixel world-space normals and depths of a rasterised mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    /// Camera-frame depth; infinite where nothing was drawn.
    pub depth: Vec<f64>,
    pub normals: Vec<Vec3>,
}

impl NormalMap {
    pub fn covered(&self, i: usize) -> bool {
        self.depth[i].is_finite()
    }

    pub fn coverage(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Z-buffer rasterisation at pixel centres. Vertex normals (stored, or
/// area-weighted when absent) are interpolated perspective-correctly.
/// Triangles with a vertex behind the camera are skipped.
pub fn rasterize(mesh: &TriMesh, camera: &Camera) -> NormalMap {
    let (w, h) = (camera.width(), camera.height());
    let mut depth = vec![f64::INFINITY; w * h];
    let mut normals = vec![Vec3::zeros(); w * h];
    let computed;
    let vn: &[Vec3] = match &mesh.normals {
        Some(n) if n.len() == mesh.vertices.len() => n,
        _ => {
            computed = mesh.vertex_normals();
            &computed
        }
    };
    let projected: Vec<Option<(Vec2, f64)>> = mesh
        .vertices
        .par_iter()
        .map(|v| camera.world_to_pixel(v).ok())
        .collect();
    for tri in &mesh.triangles {
        let idx = tri.map(|i| i as usize);
        let (Some(p0), Some(p1), Some(p2)) = (projected[idx[0]], projected[idx[1]], projected[idx[2]]) else {
            continue;
        };
        let (a, b, c) = (p0.0, p1.0, p2.0);
        let area = (b - a).perp(&(c - a));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let lo_x = a.x.min(b.x).min(c.x).floor().max(0.0) as usize;
        let lo_y = a.y.min(b.y).min(c.y).floor().max(0.0) as usize;
        let hi_x = (a.x.max(b.x).max(c.x).ceil() as isize).min(w as isize - 1);
        let hi_y = (a.y.max(b.y).max(c.y).ceil() as isize).min(h as isize - 1);
        if hi_x < 0 || hi_y < 0 {
            continue;
        }
        let inv_z = [1.0 / p0.1, 1.0 / p1.1, 1.0 / p2.1];
        for row in lo_y..=hi_y as usize {
            for col in lo_x..=hi_x as usize {
                let p = Camera::pixel_center(col, row);
                let w0 = (b - p).perp(&(c - p)) / area;
                let w1 = (c - p).perp(&(a - p)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let (q0, q1, q2) = (w0 * inv_z[0], w1 * inv_z[1], w2 * inv_z[2]);
                let s = q0 + q1 + q2;
                let z = 1.0 / s;
                let i = row * w + col;
                if z < depth[i] {
                    depth[i] = z;
                    let n = (vn[idx[0]] * q0 + vn[idx[1]] * q1 + vn[idx[2]] * q2) / s;
                    normals[i] = n.try_normalize(0.0).unwrap_or(n);
                }
            }
        }
    }
    NormalMap {
        width: w,
        height: h,
        depth,
        normals,
    }
}

/// Angle between two directions in degrees, accurate near 0 and 180.
pub(crate) fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Sum of angular errors (degrees) and count over pixels covered in both maps.
pub fn mae_normal_maps(estimate: &NormalMap, gt: &NormalMap) -> Result<(f64, usize)> {
    if (estimate.width, estimate.height) != (gt.width, gt.height) {
        return Err(Error::Contract("normal maps differ in size".into()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..gt.depth.len() {
        if estimate.covered(i) && gt.covered(i) {
            sum += angle_deg(&estimate.normals[i], &gt.normals[i]);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean over views of the per-view mean angular error between the rendered
/// normal maps of both meshes.
pub fn mae_image(estimate: &TriMesh, gt: &TriMesh, cameras: &[Camera]) -> Result<f64> {
    let per_view: Vec<Result<(f64, usize)>> = cameras
        .par_iter()
        .map(|cam| mae_normal_maps(&rasterize(estimate, cam), &rasterize(gt, cam)))
        .collect();
    let mut total = 0.0;
    let mut views = 0;
    for r in per_view {
        let (sum, count) = r?;
        if count > 0 {
            total += sum / count as f64;
            views += 1;
        }
    }
    if views == 0 {
        return Err(Error::Data("MAE: the meshes share no covered pixel in any view".into()));
    }
    Ok(total / views as f64)
}

/// Number of cameras that see each vertex: it must project inside the
/// image, face the camera and pass the depth test against the mesh itself.
pub fn visibility_counts(mesh: &TriMesh, cameras: &[Camera]) -> Vec<u32> {
    let normals = match &mesh.normals {
        Some(n) if n.len() == mesh.vertices.len() => n.clone(),
        _ => mesh.vertex_normals(),
    };
    let mut counts = vec![0u32; mesh.vertices.len()];
    for cam in cameras {
        let map = rasterize(mesh, cam);
        let focal = cam.intrinsics()[(0, 0)];
        let center = cam.center();
        let seen: Vec<bool> = mesh
            .vertices
            .par_iter()
            .zip(&normals)
            .map(|(v, n)| {
                if (center - v).dot(n) <= 0.0 {
                    return false;
                }
                let Ok((px, z)) = cam.world_to_pixel(v) else {
                    return false;
                };
                if !cam.contains_pixel(&px) {
                    return false;
                }
                let (col, row) = (px.x as usize, px.y as usize);
                let tol = (1e-3 * z).max(2.0 * z / focal);
                z <= map.depth[row * map.width + col] + tol
            })
            .collect();
        for (c, s) in counts.iter_mut().zip(seen) {
            *c += s as u32;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::marching_cubes;
    use crate::mesh::GridBounds;
    use crate::sdf::{Shape, SignedDistance};

    fn frontal(res: usize) -> Camera {
        let k = Camera::centered_intrinsics(res as f64 * 1.5, res, res);
        Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y(), k, res, res).unwrap()
    }

    #[test]
    fn identical_meshes_have_zero_error() {
        let m = TriMesh::icosphere(Vec3::zeros(), 0.5, 3);
        assert_eq!(mae_image(&m, &m, &[frontal(64)]).unwrap(), 0.0);
    }

    #[test]
    fn rasterised_depth_matches_analytic_sphere() {
        let m = TriMesh::icosphere(Vec3::zeros(), 0.5, 5);
        let cam = frontal(32);
        let map = rasterize(&m, &cam);
        let i = 16 * 32 + 16;
        assert!(map.covered(i));
        assert!((map.depth[i] - 2.5).abs() < 2e-3);
        assert!(map.normals[i].z < -0.99);
        assert!(!map.covered(0));
    }

    #[test]
    fn uniform_in_plane_rotation_gives_its_angle() {
        let n = 8;
        let make = |theta: f64| NormalMap {
            width: n,
            height: n,
            depth: vec![1.0; n * n],
            normals: (0..n * n)
                .map(|i| {
                    let phi = i as f64 * 0.3 + theta;
                    Vec3::new(phi.cos(), phi.sin(), 0.0)
                })
                .collect(),
        };
        let (sum, count) = mae_normal_maps(&make(10f64.to_radians()), &make(0.0)).unwrap();
        assert!((sum / count as f64 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn extracted_sphere_normals_match_the_analytic_ones() {
        let sphere = Shape::sphere(0.5);
        let m = marching_cubes(&sphere, 128, &GridBounds::cube(Vec3::zeros(), 1.0)).unwrap();
        let cam = frontal(96);
        let map = rasterize(&m, &cam);
        let mut sum = 0.0;
        let mut count = 0;
        for row in 0..96 {
            for col in 0..96 {
                let i = row * 96 + col;
                if !map.covered(i) {
                    continue;
                }
                let ray = cam.direction_through(&Camera::pixel_center(col, row));
                let hit = cam.center() + ray * map.depth[i] / ray.dot(&cam.forward());
                let exact = sphere.jet(&hit).gradient.normalize();
                sum += angle_deg(&map.normals[i], &exact);
                count += 1;
            }
        }
        assert!(count > 1000);
        assert!(sum / (count as f64) < 1.0, "mae {}", sum / count as f64);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let a = TriMesh::icosphere(Vec3::new(0.0, 0.0, -10.0), 0.5, 1);
        assert!(mae_image(&a, &a, &[frontal(16)]).is_err());
    }

    #[test]
    fn visibility_from_an_elevated_ring() {
        let m = TriMesh::icosphere(Vec3::zeros(), 0.5, 3);
        let el = 20f64.to_radians();
        let cams: Vec<Camera> = (0..20)
            .map(|k| {
                let az = k as f64 * std::f64::consts::TAU / 20.0;
                let eye = Vec3::new(el.cos() * az.sin(), -el.sin(), -el.cos() * az.cos()) * 3.0;
                let kk = Camera::centered_intrinsics(96.0, 64, 64);
                Camera::look_at(eye, Vec3::zeros(), -Vec3::y(), kk, 64, 64).unwrap()
            })
            .collect();
        let vis = visibility_counts(&m, &cams);
        let top = (0..m.vertices.len()).min_by(|&a, &b| m.vertices[a].y.total_cmp(&m.vertices[b].y)).unwrap();
        assert_eq!(vis[top], 20);
        let bottom = (0..m.vertices.len()).max_by(|&a, &b| m.vertices[a].y.total_cmp(&m.vertices[b].y)).unwrap();
        assert_eq!(vis[bottom], 0);
        let eq = m.vertices.iter().position(|v| v.y.abs() < 1e-9).unwrap();
        assert!((8..=11).contains(&vis[eq]), "{}", vis[eq]);
    }
}
