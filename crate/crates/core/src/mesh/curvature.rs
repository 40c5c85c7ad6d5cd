use std::collections::HashMap;

use crate::camera::Vec3;

use super::TriMesh;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureEstimate {
    /// Absolute mean curvature per vertex (0 where undefined).
    pub values: Vec<f64>,
    /// Boundary or non-manifold vertices, left at 0.
    pub nonmanifold_vertices: usize,
}

/// Discrete mean curvature from the cotangent Laplacian normalised by the
/// mixed Voronoi area of the one-ring.
pub fn mean_curvature(mesh: &TriMesh) -> CurvatureEstimate {
    let n = mesh.vertices.len();
    let mut edge_faces: HashMap<(u32, u32), u32> = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edge_faces.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut bad = vec![false; n];
    let mut used = vec![false; n];
    for (&(a, b), &count) in &edge_faces {
        if count != 2 {
            bad[a as usize] = true;
            bad[b as usize] = true;
        }
    }

    let mut laplace = vec![Vec3::zeros(); n];
    let mut area = vec![0.0; n];
    for t in &mesh.triangles {
        let idx = t.map(|i| i as usize);
        let p = idx.map(|i| mesh.vertices[i]);
        let cross = (p[1] - p[0]).cross(&(p[2] - p[0]));
        let double_area = cross.norm();
        if double_area == 0.0 {
            continue;
        }
        let tri_area = 0.5 * double_area;
        // Cotangent of the angle at corner k.
        let cot = |k: usize| {
            let (u, v) = (p[(k + 1) % 3] - p[k], p[(k + 2) % 3] - p[k]);
            u.dot(&v) / double_area
        };
        let cots = [cot(0), cot(1), cot(2)];
        let obtuse = (0..3).find(|&k| cots[k] < 0.0);
        for k in 0..3 {
            let (i, j, l) = (k, (k + 1) % 3, (k + 2) % 3);
            used[idx[i]] = true;
            // Edge (i, j) is opposite corner l, edge (i, l) opposite corner j.
            laplace[idx[i]] += (p[i] - p[j]) * cots[l] + (p[i] - p[l]) * cots[j];
            area[idx[i]] += match obtuse {
                None => ((p[i] - p[j]).norm_squared() * cots[l] + (p[i] - p[l]).norm_squared() * cots[j]) / 8.0,
                Some(o) if o == i => tri_area / 2.0,
                Some(_) => tri_area / 4.0,
            };
        }
    }

    let mut values = vec![0.0; n];
    let mut nonmanifold = 0;
    for v in 0..n {
        if !used[v] {
            continue;
        }
        if bad[v] || area[v] <= 0.0 {
            nonmanifold += 1;
            continue;
        }
        // laplace holds sum (cot a + cot b)(x_i - x_j), i.e. 2 A K; |K| = 2|H|.
        values[v] = laplace[v].norm() / (2.0 * area[v]) / 2.0;
    }
    CurvatureEstimate {
        values,
        nonmanifold_vertices: nonmanifold,
    }
}
