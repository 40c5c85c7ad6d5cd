use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Vec3};
use crate::error::{Error, Result};

use super::{mae_image, mean_curvature, visibility_counts, KdTree, TriMesh};

/// Distance from every query point to its nearest neighbour in `index`.
pub fn nearest_distances(queries: &[Vec3], index: &KdTree) -> Vec<f64> {
    queries
        .par_iter()
        .map(|q| index.nearest(q).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

/// Mean of the distances not above `cutoff`. A side with nothing under the
/// cutoff counts as `cutoff` so that a wildly wrong surface cannot score 0.
fn cutoff_mean(distances: &[f64], cutoff: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &d in distances {
        if d <= cutoff {
            sum += d;
            n += 1;
        }
    }
    if n == 0 {
        (cutoff, 0)
    } else {
        (sum / n as f64, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferResult {
    pub chamfer: f64,
    /// Mean estimate-to-ground-truth distance.
    pub accuracy: f64,
    /// Mean ground-truth-to-estimate distance.
    pub completeness: f64,
    pub accuracy_inliers: usize,
    pub completeness_inliers: usize,
}

fn nonempty(p: &[Vec3], g: &[Vec3]) -> Result<()> {
    if p.is_empty() || g.is_empty() {
        return Err(Error::Data(format!(
            "metrics need non-empty point sets (got {} and {})",
            p.len(),
            g.len()
        )));
    }
    Ok(())
}

pub fn chamfer(p: &[Vec3], g: &[Vec3], cutoff: f64) -> Result<ChamferResult> {
    nonempty(p, g)?;
    let d_pg = nearest_distances(p, &KdTree::new(g));
    let d_gp = nearest_distances(g, &KdTree::new(p));
    Ok(chamfer_from(&d_pg, &d_gp, cutoff))
}

fn chamfer_from(d_pg: &[f64], d_gp: &[f64], cutoff: f64) -> ChamferResult {
    let (accuracy, accuracy_inliers) = cutoff_mean(d_pg, cutoff);
    let (completeness, completeness_inliers) = cutoff_mean(d_gp, cutoff);
    ChamferResult {
        chamfer: 0.5 * (accuracy + completeness),
        accuracy,
        completeness,
        accuracy_inliers,
        completeness_inliers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub epsilon: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

fn fscore_from(d_pg: &[f64], d_gp: &[f64], epsilon: f64) -> FScore {
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < epsilon).count() as f64 / d.len() as f64;
    let (precision, recall) = (frac(d_pg), frac(d_gp));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    FScore {
        epsilon,
        precision,
        recall,
        fscore,
    }
}

pub fn fscore(p: &[Vec3], g: &[Vec3], epsilon: f64) -> Result<FScore> {
    nonempty(p, g)?;
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("F-score threshold must be positive, got {epsilon}")));
    }
    let d_pg = nearest_distances(p, &KdTree::new(g));
    let d_gp = nearest_distances(g, &KdTree::new(p));
    Ok(fscore_from(&d_pg, &d_gp, epsilon))
}

/// One-sided mean distance from the labelled ground-truth points to the
/// estimate, with the same cutoff rule as [`chamfer`]. `None` when nothing is
/// labelled.
pub fn chamfer_segmented(p: &[Vec3], g: &[Vec3], labels: &[bool], cutoff: f64) -> Result<Option<f64>> {
    if labels.len() != g.len() {
        return Err(Error::Contract(format!("{} labels for {} points", labels.len(), g.len())));
    }
    let selected: Vec<Vec3> = g.iter().zip(labels).filter(|(_, &l)| l).map(|(x, _)| *x).collect();
    if selected.is_empty() {
        return Ok(None);
    }
    if p.is_empty() {
        return Err(Error::Data("segmented Chamfer needs a non-empty estimate".into()));
    }
    let d = nearest_distances(&selected, &KdTree::new(p));
    Ok(Some(cutoff_mean(&d, cutoff).0))
}

/// Uniform area-weighted samples on the surface: `ceil(area * density)`
/// points per triangle plus every original vertex.
pub fn upsample_to_density(mesh: &TriMesh, density: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mesh.vertices.clone();
    if !(density > 0.0) {
        return out;
    }
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        let area = 0.5 * (b - a).cross(&(c - a)).norm();
        let count = (area * density).ceil() as usize;
        for _ in 0..count {
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let su = u.sqrt();
            out.push(a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExclusionSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExclusionBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Regions of the ground truth known to be defective; contained vertices
/// are removed before evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionRegions {
    #[serde(default)]
    pub spheres: Vec<ExclusionSphere>,
    #[serde(default)]
    pub boxes: Vec<ExclusionBox>,
}

impl ExclusionRegions {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.spheres
            .iter()
            .any(|s| (p - Vec3::from(s.center)).norm() <= s.radius)
            || self
                .boxes
                .iter()
                .any(|b| (0..3).all(|k| p[k] >= b.min[k] && p[k] <= b.max[k]))
    }

    /// Drops contained vertices and every triangle touching them.
    pub fn apply(&self, mesh: &TriMesh) -> (TriMesh, usize) {
        let inside: Vec<bool> = mesh.vertices.iter().map(|v| self.contains(v)).collect();
        let dropped = inside.iter().filter(|&&x| x).count();
        if dropped == 0 {
            return (mesh.clone(), 0);
        }
        let mut out = mesh.clone();
        out.triangles.retain(|t| t.iter().all(|&i| !inside[i as usize]));
        out.cleanup();
        (out, dropped)
    }
}

/// Per-vertex labels of the ground-truth mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub curvature: Vec<f64>,
    pub visibility: Vec<u32>,
    pub high_curvature: Vec<bool>,
    pub low_visibility: Vec<bool>,
    pub nonmanifold_vertices: usize,
}

pub fn segment_regions(
    gt: &TriMesh,
    cameras: &[Camera],
    curvature_threshold: f64,
    visibility_threshold: u32,
) -> Segmentation {
    let curv = mean_curvature(gt);
    if curv.nonmanifold_vertices > 0 {
        log::warn!(
            "{} ground-truth vertices are on a boundary or non-manifold; curvature set to 0",
            curv.nonmanifold_vertices
        );
    }
    let visibility = visibility_counts(gt, cameras);
    Segmentation {
        high_curvature: curv.values.iter().map(|&c| c > curvature_threshold).collect(),
        low_visibility: visibility.iter().map(|&v| v < visibility_threshold).collect(),
        curvature: curv.values,
        visibility,
        nonmanifold_vertices: curv.nonmanifold_vertices,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Distances above this are ignored by Chamfer terms.
    pub cutoff: f64,
    pub epsilons: Vec<f64>,
    /// Target spacing of the upsampled point clouds.
    pub spacing: f64,
    pub curvature_threshold: f64,
    pub visibility_threshold: u32,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoff: 0.05,
            epsilons: vec![0.001, 0.0025, 0.005, 0.01, 0.02],
            spacing: 0.005,
            curvature_threshold: 1.6,
            visibility_threshold: 5,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// The stricter threshold used by some of the supplementary tables.
    pub const ALT_CURVATURE_THRESHOLD: f64 = 3.3;

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0) || !(self.spacing > 0.0) {
            return Err(Error::Config("eval cutoff and spacing must be positive".into()));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("F-score thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn density(&self) -> f64 {
        1.0 / (self.spacing * self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetric {
    pub segment: String,
    pub vertices: usize,
    /// Ground-truth-to-estimate mean distance; absent for empty segments.
    pub chamfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer: ChamferResult,
    pub fscores: Vec<FScore>,
    pub mae_deg: Option<f64>,
    pub segments: Vec<SegmentMetric>,
    pub estimate_points: usize,
    pub ground_truth_points: usize,
    pub excluded_gt_vertices: usize,
    pub nonmanifold_gt_vertices: usize,
    pub config: EvalConfig,
}

impl MetricReport {
    pub fn csv(&self) -> String {
        let mut rows = vec!["metric,segment,value".to_string()];
        let mut push = |m: String, s: &str, v: f64| rows.push(format!("{m},{s},{v}"));
        push("chamfer".into(), "all", self.chamfer.chamfer);
        push("accuracy".into(), "all", self.chamfer.accuracy);
        push("completeness".into(), "all", self.chamfer.completeness);
        for f in &self.fscores {
            push(format!("precision@{}", f.epsilon), "all", f.precision);
            push(format!("recall@{}", f.epsilon), "all", f.recall);
            push(format!("fscore@{}", f.epsilon), "all", f.fscore);
        }
        if let Some(m) = self.mae_deg {
            push("mae_deg".into(), "all", m);
        }
        for s in &self.segments {
            if let Some(c) = s.chamfer {
                push("chamfer_gt_to_est".into(), &s.segment, c);
            }
        }
        rows.join("\n") + "\n"
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}

/// Full evaluation of `estimate` against `gt`. Normal-map MAE and the
/// visibility segment need `cameras`; both are skipped without them.
pub fn evaluate(
    estimate: &TriMesh,
    gt: &TriMesh,
    cameras: &[Camera],
    exclusions: Option<&ExclusionRegions>,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    if estimate.is_empty() || gt.is_empty() {
        return Err(Error::Data("cannot evaluate an empty mesh".into()));
    }
    let (gt, excluded) = match exclusions {
        Some(x) => x.apply(gt),
        None => (gt.clone(), 0),
    };
    if gt.is_empty() {
        return Err(Error::Data("exclusion regions removed the whole ground truth".into()));
    }
    // One seed for both sides, so identical meshes give identical clouds.
    let p = upsample_to_density(estimate, config.density(), config.seed);
    let g = upsample_to_density(&gt, config.density(), config.seed);
    let p_index = KdTree::new(&p);
    let d_pg = nearest_distances(&p, &KdTree::new(&g));
    let d_gp = nearest_distances(&g, &p_index);
    let chamfer = chamfer_from(&d_pg, &d_gp, config.cutoff);
    let fscores = config.epsilons.iter().map(|&e| fscore_from(&d_pg, &d_gp, e)).collect();

    let mae_deg = if cameras.is_empty() {
        None
    } else {
        Some(mae_image(estimate, &gt, cameras)?)
    };

    let seg = segment_regions(&gt, cameras, config.curvature_threshold, config.visibility_threshold);
    let vertex_distances = nearest_distances(&gt.vertices, &p_index);
    let segment = |name: &str, labels: &[bool]| {
        let d: Vec<f64> = vertex_distances
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l)
            .map(|(d, _)| *d)
            .collect();
        SegmentMetric {
            segment: name.to_string(),
            vertices: d.len(),
            chamfer: (!d.is_empty()).then(|| cutoff_mean(&d, config.cutoff).0),
        }
    };
    let mut segments = vec![segment("high_curvature", &seg.high_curvature)];
    if !cameras.is_empty() {
        segments.push(segment("low_visibility", &seg.low_visibility));
    }
    Ok(MetricReport {
        chamfer,
        fscores,
        mae_deg,
        segments,
        estimate_points: p.len(),
        ground_truth_points: g.len(),
        excluded_gt_vertices: excluded,
        nonmanifold_gt_vertices: seg.nonmanifold_vertices,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(seed: u64, n: usize, offset: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()) + Vec3::repeat(offset))
            .collect()
    }

    fn brute_nn(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
        a.iter()
            .map(|x| b.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .collect()
    }

    #[test]
    fn identical_clouds_have_zero_chamfer_and_unit_fscore() {
        let p = cloud(1, 200, 0.0);
        assert_eq!(chamfer(&p, &p, 0.05).unwrap().chamfer, 0.0);
        let f = fscore(&p, &p, 1e-3).unwrap();
        assert_eq!((f.precision, f.recall, f.fscore), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_points() {
        let d = 0.01;
        let r = chamfer(&[Vec3::zeros()], &[Vec3::new(d, 0.0, 0.0)], 0.05).unwrap();
        assert!((r.chamfer - d).abs() < 1e-15);
    }

    #[test]
    fn everything_beyond_cutoff_scores_the_cutoff() {
        let r = chamfer(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0)], 0.05).unwrap();
        assert_eq!(r.chamfer, 0.05);
        assert_eq!(r.accuracy_inliers, 0);
    }

    #[test]
    fn fscore_harmonic_mean_construction() {
        // Every estimate point lies on the ground truth, but half of the
        // ground truth is pushed far away.
        let g0 = cloud(2, 100, 0.0);
        let mut g = g0.clone();
        g.extend(g0.iter().map(|x| x + Vec3::new(10.0, 0.0, 0.0)));
        let f = fscore(&g0, &g, 1e-3).unwrap();
        assert_eq!(f.precision, 1.0);
        assert_eq!(f.recall, 0.5);
        assert!((f.fscore - 2.0 / 3.0).abs() < 1e-15);
        let big = fscore(&g0, &g0, 100.0).unwrap();
        assert_eq!(big.fscore, 1.0);
    }

    #[test]
    fn chamfer_and_fscore_match_brute_force_exactly() {
        let p = cloud(3, 500, 0.0);
        let g = cloud(4, 500, 0.02);
        let (dpg, dgp) = (brute_nn(&p, &g), brute_nn(&g, &p));
        let mean = |d: &[f64]| {
            let kept: Vec<f64> = d.iter().copied().filter(|&x| x <= 0.05).collect();
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        let expected = 0.5 * (mean(&dpg) + mean(&dgp));
        assert_eq!(chamfer(&p, &g, 0.05).unwrap().chamfer, expected);
        for eps in [0.01, 0.03, 0.06] {
            let prec = dpg.iter().filter(|&&d| d < eps).count() as f64 / 500.0;
            let rec = dgp.iter().filter(|&&d| d < eps).count() as f64 / 500.0;
            let f = fscore(&p, &g, eps).unwrap();
            assert_eq!((f.precision, f.recall), (prec, rec));
        }
    }

    #[test]
    fn segmented_chamfer_with_all_labels_is_the_one_sided_term() {
        let p = cloud(5, 300, 0.0);
        let g = cloud(6, 250, 0.01);
        let full = chamfer(&p, &g, 0.05).unwrap();
        let seg = chamfer_segmented(&p, &g, &vec![true; g.len()], 0.05).unwrap().unwrap();
        assert_eq!(seg, full.completeness);
        assert_eq!(chamfer_segmented(&p, &g, &vec![false; g.len()], 0.05).unwrap(), None);
        assert_eq!(chamfer_segmented(&g, &g, &vec![true; g.len()], 0.05).unwrap(), Some(0.0));
    }

    #[test]
    fn segmented_chamfer_grows_with_displacement() {
        let g = cloud(7, 200, 0.0);
        let labels: Vec<bool> = (0..g.len()).map(|i| i % 4 == 0).collect();
        let mut last = -1.0;
        for d in [0.0, 0.005, 0.01, 0.02] {
            let p: Vec<Vec3> = g
                .iter()
                .zip(&labels)
                .map(|(x, &l)| if l { x + Vec3::new(0.0, 0.0, d) } else { *x })
                .collect();
            let c = chamfer_segmented(&p, &g, &labels, 0.05).unwrap().unwrap();
            let sel: Vec<Vec3> = g.iter().zip(&labels).filter(|(_, &l)| l).map(|(x, _)| *x).collect();
            let brute = brute_nn(&sel, &p);
            let expected = brute.iter().sum::<f64>() / brute.len() as f64;
            assert!((c - expected).abs() < 1e-15);
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn upsampling_counts_and_uniformity() {
        let tri = TriMesh::new(
            vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(upsample_to_density(&tri, 500.0, 0).len() >= 500);
        assert_eq!(upsample_to_density(&tri, 0.0, 0).len(), 3);

        // Two equal-area triangles side by side should receive equal shares.
        let quad = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let pts = upsample_to_density(&quad, 20000.0, 1);
        let below = pts[4..].iter().filter(|p| p.x > p.y).count() as f64;
        let n = (pts.len() - 4) as f64;
        assert!((below - n / 2.0).abs() < 3.0 * (n * 0.25).sqrt());
        // Uniform within a triangle: the left half of [0,1]^2 holds half the mass.
        let left = pts[4..].iter().filter(|p| p.x < 0.5).count() as f64;
        assert!((left - n / 2.0).abs() < 3.0 * (n * 0.25).sqrt());
    }

    #[test]
    fn exclusion_regions_drop_contained_vertices() {
        let m = TriMesh::icosphere(Vec3::zeros(), 1.0, 2);
        let regions: ExclusionRegions =
            serde_json::from_str(r#"{"spheres":[{"center":[0,0,1],"radius":0.3}],"boxes":[{"min":[-2,-2,-2],"max":[2,2,-0.9]}]}"#)
                .unwrap();
        let expected = m.vertices.iter().filter(|v| regions.contains(v)).count();
        let (out, dropped) = regions.apply(&m);
        assert!(expected > 0);
        assert_eq!(dropped, expected);
        assert!(out.vertices.iter().all(|v| !regions.contains(v)));
        assert!(serde_json::from_str::<ExclusionRegions>(r#"{"cones":[]}"#).is_err());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let m = TriMesh::icosphere(Vec3::zeros(), 0.5, 3);
        let cfg = EvalConfig {
            spacing: 0.02,
            ..EvalConfig::default()
        };
        let r = evaluate(&m, &m, &[], None, &cfg).unwrap();
        // Both sides share the original vertices, so every upsampled point
        // still lies on the same surface.
        assert!(r.chamfer.chamfer < 0.02);
        assert!(r.csv().starts_with("metric,segment,value\nchamfer,all,"));
        let seg = r.segments.iter().find(|s| s.segment == "high_curvature").unwrap();
        assert_eq!(seg.chamfer, Some(0.0));
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric_and_fscore_monotone(
            seed_a in 0u64..1000, seed_b in 0u64..1000, shift in 0.0f64..0.1
        ) {
            let p = cloud(seed_a, 60, 0.0);
            let g = cloud(seed_b, 80, shift);
            prop_assert_eq!(chamfer(&p, &g, 0.05).unwrap().chamfer, chamfer(&g, &p, 0.05).unwrap().chamfer);
            let mut last = 0.0;
            for eps in [0.01, 0.02, 0.05, 0.1, 0.2, 0.5] {
                let f = fscore(&p, &g, eps).unwrap().fscore;
                prop_assert!(f >= last);
                last = f;
            }
        }
    }
}
