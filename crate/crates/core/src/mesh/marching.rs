use crate::camera::{SceneBounds, Vec3};
use crate::error::{Error, Result};
use crate::sdf::SignedDistance;

use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::TriMesh;

/// Axis-aligned sampling box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl GridBounds {
    pub fn cube(center: Vec3, half: f64) -> Self {
        Self {
            min: center - Vec3::repeat(half),
            max: center + Vec3::repeat(half),
        }
    }

    pub fn around(bounds: &SceneBounds) -> Self {
        Self::cube(bounds.center(), bounds.radius)
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangulates the zero level set of `sdf` sampled on `resolution` grid
/// points per axis. Vertices are shared between neighbouring cells and the
/// result is oriented with normals pointing toward positive values.
pub fn marching_cubes(sdf: &dyn SignedDistance, resolution: usize, bounds: &GridBounds) -> Result<TriMesh> {
    if resolution < 2 {
        return Err(Error::Config(format!("marching cubes needs >= 2 grid points per axis, got {resolution}")));
    }
    let n = resolution;
    let step = (bounds.max - bounds.min) / (n - 1) as f64;
    let point = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let index = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let mut grid = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                grid.push(point(i, j, k));
            }
        }
    }
    let values = sdf.distances(&grid);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("field returned non-finite values on the extraction grid".into()));
    }

    // Vertex ids per (grid point, axis) edge, plus slot 3 for vertices that
    // land exactly on a grid point.
    let mut slots = vec![u32::MAX; 4 * n * n * n];
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corner_index: [usize; 8] =
                    CORNERS.map(|[di, dj, dk]| index(i + di, j + dj, k + dk));
                let mut case = 0usize;
                for (c, &gi) in corner_index.iter().enumerate() {
                    if values[gi] < 0.0 {
                        case |= 1 << c;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let (ga, gb) = (corner_index[a], corner_index[b]);
                    let (fa, fb) = (values[ga], values[gb]);
                    let t = fa / (fa - fb);
                    let (slot, pos) = if t <= 0.0 {
                        (4 * ga + 3, grid[ga])
                    } else if t >= 1.0 {
                        (4 * gb + 3, grid[gb])
                    } else {
                        let lo = ga.min(gb);
                        let axis = (0..3).find(|&ax| CORNERS[a][ax] != CORNERS[b][ax]).unwrap();
                        (4 * lo + axis, grid[ga] + (grid[gb] - grid[ga]) * t)
                    };
                    if slots[slot] == u32::MAX {
                        slots[slot] = vertices.len() as u32;
                        vertices.push(pos);
                    }
                    edge_vertex[e] = slots[slot];
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    triangles.push([
                        edge_vertex[tri[0] as usize],
                        edge_vertex[tri[1] as usize],
                        edge_vertex[tri[2] as usize],
                    ]);
                }
            }
        }
    }
    let mut mesh = TriMesh {
        vertices,
        triangles,
        ..TriMesh::default()
    };
    mesh.cleanup();
    if mesh.is_empty() {
        log::warn!("marching cubes found no zero crossing at resolution {resolution}");
        return Ok(mesh);
    }
    if orientation_points_inward(&mesh, sdf) {
        mesh.flip_orientation();
    }
    Ok(mesh)
}

/// Compares face normals with the field gradient on a few faces.
fn orientation_points_inward(mesh: &TriMesh, sdf: &dyn SignedDistance) -> bool {
    let stride = (mesh.triangles.len() / 64).max(1);
    let faces: Vec<usize> = (0..mesh.triangles.len()).step_by(stride).collect();
    let centroids: Vec<Vec3> = faces
        .iter()
        .map(|&t| {
            let [a, b, c] = mesh.corners(t);
            (a + b + c) / 3.0
        })
        .collect();
    let jets = sdf.jets(&centroids);
    let agreement: f64 = faces
        .iter()
        .zip(&jets)
        .map(|(&t, j)| mesh.face_cross(t).normalize().dot(&j.gradient).signum())
        .sum();
    agreement < 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::Shape;

    #[test]
    fn sphere_vertices_lie_in_the_level_set_band() {
        let b = GridBounds::cube(Vec3::zeros(), 1.0);
        let m = marching_cubes(&Shape::sphere(0.5), 64, &b).unwrap();
        let cell = 2.0 / 63.0;
        assert!(!m.is_empty());
        for v in &m.vertices {
            assert!((v.norm() - 0.5).abs() < 2.0 * cell);
        }
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn torus_has_genus_one() {
        let torus = Shape::Torus {
            center: [0.0; 3],
            major: 0.5,
            minor: 0.2,
        };
        let m = marching_cubes(&torus, 48, &GridBounds::cube(Vec3::zeros(), 1.0)).unwrap();
        assert_eq!(m.euler_characteristic(), 0);
    }

    #[test]
    fn empty_level_set_gives_an_empty_mesh() {
        let far = Shape::Sphere {
            center: [5.0, 0.0, 0.0],
            radius: 0.5,
        };
        let m = marching_cubes(&far, 8, &GridBounds::cube(Vec3::zeros(), 1.0)).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn rejects_degenerate_resolution() {
        assert!(marching_cubes(&Shape::sphere(0.5), 1, &GridBounds::cube(Vec3::zeros(), 1.0)).is_err());
    }

    #[test]
    fn exact_zeros_on_grid_points_are_welded() {
        // Radius chosen so the sphere passes exactly through grid points.
        let m = marching_cubes(&Shape::sphere(0.5), 5, &GridBounds::cube(Vec3::zeros(), 1.0)).unwrap();
        assert_eq!(m.euler_characteristic(), 2);
    }
}
