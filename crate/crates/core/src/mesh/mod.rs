//! Triangle meshes: extraction, I/O and the evaluation metrics.

mod curvature;
mod io;
mod kdtree;
mod marching;
mod metrics;
mod raster;
mod tables;

use std::collections::HashMap;

pub use curvature::{mean_curvature, CurvatureEstimate};
pub use io::{read_mesh, read_obj, read_ply, write_mesh, write_obj, write_ply};
pub use kdtree::KdTree;
pub use marching::{marching_cubes, GridBounds};
pub use metrics::{
    chamfer, chamfer_segmented, evaluate, fscore, nearest_distances, segment_regions, upsample_to_density,
    ChamferResult, EvalConfig, ExclusionRegions, FScore, MetricReport, SegmentMetric, Segmentation,
};
pub use raster::{mae_image, mae_normal_maps, rasterize, visibility_counts, NormalMap};

use crate::camera::Vec3;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
    pub curvature: Option<Vec<f64>>,
    pub visibility: Option<Vec<u32>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::Data(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Data("mesh has non-finite vertices".into()));
        }
        Ok(Self {
            vertices,
            triangles,
            ..Self::default()
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Unnormalised face normal (twice the area, right-hand winding).
    pub fn face_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| 0.5 * self.face_cross(t).norm()).sum()
    }

    /// Enclosed volume by the divergence theorem (positive when outward-facing).
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.triangles.len() as i64
    }

    pub fn flip_orientation(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
        if let Some(n) = self.normals.as_mut() {
            for v in n {
                *v = -*v;
            }
        }
    }

    /// Drops zero-area triangles and unreferenced vertices; per-vertex
    /// attributes are compacted alongside.
    pub fn cleanup(&mut self) {
        let keep: Vec<[u32; 3]> = (0..self.triangles.len())
            .filter(|&t| {
                let tri = self.triangles[t];
                tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] && self.face_cross(t).norm_squared() > 0.0
            })
            .map(|t| self.triangles[t])
            .collect();
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut order = Vec::new();
        for t in &keep {
            for &i in t {
                if remap[i as usize] == u32::MAX {
                    remap[i as usize] = order.len() as u32;
                    order.push(i as usize);
                }
            }
        }
        self.vertices = order.iter().map(|&i| self.vertices[i]).collect();
        self.triangles = keep.iter().map(|t| t.map(|i| remap[i as usize])).collect();
        if let Some(n) = self.normals.take() {
            self.normals = Some(order.iter().map(|&i| n[i]).collect());
        }
        if let Some(c) = self.curvature.take() {
            self.curvature = Some(order.iter().map(|&i| c[i]).collect());
        }
        if let Some(v) = self.visibility.take() {
            self.visibility = Some(order.iter().map(|&i| v[i]).collect());
        }
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_cross(t);
            for &i in tri {
                acc[i as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    }

    pub fn with_vertex_normals(mut self) -> Self {
        self.normals = Some(self.vertex_normals());
        self
    }

    /// Applies `p -> center + scale * p` to every vertex.
    pub fn transformed(&self, center: &Vec3, scale: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = center + *v * scale;
        }
        out
    }

    /// Geodesic sphere built by subdividing an icosahedron.
    pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut tris: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(tris.len() * 4);
            for [a, b, c] in tris {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        let vertices = verts.into_iter().map(|v| center + v * radius).collect();
        let mut mesh = Self {
            vertices,
            triangles: tris,
            ..Self::default()
        };
        if mesh.signed_volume() < 0.0 {
            mesh.flip_orientation();
        }
        mesh
    }
}
