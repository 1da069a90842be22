//! Rollout quality metrics.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvh::{closest_point_on_triangle, Bvh};
use crate::collider::ColliderFrame;
use crate::error::{Error, Result};
use crate::geometry::geodesic::dual_dijkstra;
use crate::geometry::{TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub n_geo_pairs: usize,
    pub chamfer_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_geo_pairs: 4096,
            chamfer_samples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub mve_cm: Option<f64>,
    /// Squared distances, m².
    pub chamfer: f64,
    pub geodesic_distortion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenetrationStats {
    pub margin: f64,
    /// Garment vertices deeper than `margin`, summed over frames.
    pub penetrating_vertices: usize,
    pub frames_with_penetration: usize,
    pub max_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    /// Mean vertex error in cm; absent when the topologies differ.
    pub mve_cm: Option<f64>,
    /// Symmetric mean squared closest-point distance, m².
    pub chamfer: f64,
    /// Mean L1 geodesic discrepancy over sampled face pairs, m; absent when
    /// the topologies differ.
    pub geodesic_distortion: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
    pub penetration: Option<PenetrationStats>,
}

impl EvalReport {
    /// `sqrt(chamfer)` in cm, comparable with the vertex error.
    pub fn chamfer_rms_cm(&self) -> f64 {
        self.chamfer.sqrt() * 100.0
    }
}

pub fn mean_vertex_error_cm(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Dimension(format!("{} vs {} vertices", pred.len(), gt.len())));
    }
    Ok(100.0 * pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64)
}

/// Area-uniform samples on the surface.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Vec<Vec3> {
    let dist = WeightedIndex::new(mesh.areas()).expect("mesh has positive area");
    let v = mesh.vertices();
    (0..n)
        .map(|_| {
            let [a, b, c] = mesh.faces()[dist.sample(rng)];
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            v[a] * (1.0 - s) + v[b] * (s * (1.0 - r2)) + v[c] * (s * r2)
        })
        .collect()
}

fn mean_sq_to_surface(points: &[Vec3], mesh: &TriMesh) -> f64 {
    let bvh = Bvh::from_triangles(mesh.vertices(), mesh.faces());
    let v = mesh.vertices();
    let d2: Vec<f64> = points
        .par_iter()
        .map(|p| {
            bvh.nearest(p, |f| {
                let [a, b, c] = mesh.faces()[f];
                (closest_point_on_triangle(p, &v[a], &v[b], &v[c]).0 - p).norm_squared()
            })
            .map_or(0.0, |(_, d2)| d2)
        })
        .collect();
    d2.iter().sum::<f64>() / points.len() as f64
}

/// Symmetric Chamfer distance: samples on each surface, squared distance to
/// the closest point of the other surface, averaged and summed over both
/// directions.
pub fn chamfer<R: Rng + ?Sized>(a: &TriMesh, b: &TriMesh, samples: usize, rng: &mut R) -> f64 {
    let pa = sample_surface(a, samples, rng);
    let pb = sample_surface(b, samples, rng);
    mean_sq_to_surface(&pa, b) + mean_sq_to_surface(&pb, a)
}

/// Mean `|D_pred(i, j) − D_gt(i, j)|` over random face pairs. Sources are
/// shared across pairs so each needs one shortest-path tree per mesh.
pub fn geodesic_distortion<R: Rng + ?Sized>(pred: &TriMesh, gt: &TriMesh, n_pairs: usize, rng: &mut R) -> Result<f64> {
    if pred.faces() != gt.faces() {
        return Err(Error::Dimension("geodesic distortion needs a shared triangulation".into()));
    }
    let nf = pred.face_count();
    if n_pairs == 0 || nf == 0 {
        return Ok(0.0);
    }
    let n_src = ((n_pairs as f64).sqrt().ceil() as usize).min(nf);
    let per = n_pairs.div_ceil(n_src);
    let sources = sample(rng, nf, n_src).into_vec();
    let targets: Vec<Vec<usize>> = sources
        .iter()
        .map(|_| (0..per).map(|_| rng.random_range(0..nf)).collect())
        .collect();
    let sums: Vec<(f64, usize)> = sources
        .par_iter()
        .zip(&targets)
        .map(|(&s, ts)| {
            let dp = dual_dijkstra(pred, s);
            let dg = dual_dijkstra(gt, s);
            let mut acc = (0.0, 0);
            for &t in ts {
                if dp[t].is_finite() && dg[t].is_finite() {
                    acc.0 += (dp[t] - dg[t]).abs();
                    acc.1 += 1;
                }
            }
            acc
        })
        .collect();
    let (sum, count) = sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn penetration_stats(frames: &[TriMesh], colliders: &[Arc<ColliderFrame>], margin: f64) -> Result<PenetrationStats> {
    if frames.len() > colliders.len() {
        return Err(Error::Dimension("fewer collider frames than garment frames".into()));
    }
    let mut stats = PenetrationStats {
        margin,
        penetrating_vertices: 0,
        frames_with_penetration: 0,
        max_depth: 0.0,
    };
    for (m, c) in frames.iter().zip(colliders) {
        let deep: Vec<f64> = crate::refine::detect_collisions(m.vertices(), c)
            .into_iter()
            .map(|col| col.depth)
            .filter(|&d| d > margin)
            .collect();
        if !deep.is_empty() {
            stats.frames_with_penetration += 1;
            stats.penetrating_vertices += deep.len();
            stats.max_depth = deep.iter().fold(stats.max_depth, |a, &b| a.max(b));
        }
    }
    Ok(stats)
}

/// Compares aligned predicted and ground-truth frames. Chamfer tolerates
/// differing triangulations; vertex error and geodesic distortion do not and
/// are omitted in that case.
pub fn evaluate(pred: &[TriMesh], gt: &[TriMesh], opts: &EvalOptions) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predicted frames but {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let same_topology = pred[0].faces() == gt[0].faces() && pred[0].vertex_count() == gt[0].vertex_count();
    let mut per_frame = Vec::with_capacity(pred.len());
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
        let mve_cm = same_topology
            .then(|| mean_vertex_error_cm(p.vertices(), g.vertices()))
            .transpose()?;
        let chamfer = chamfer(p, g, opts.chamfer_samples, &mut rng);
        let geodesic = same_topology
            .then(|| geodesic_distortion(p, g, opts.n_geo_pairs, &mut rng))
            .transpose()?;
        per_frame.push(FrameMetrics {
            mve_cm,
            chamfer,
            geodesic_distortion: geodesic,
        });
    }
    let n = per_frame.len() as f64;
    let mean_of = |f: &dyn Fn(&FrameMetrics) -> Option<f64>| -> Option<f64> {
        per_frame.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    let report = EvalReport {
        frames: per_frame.len(),
        mve_cm: mean_of(&|m| m.mve_cm),
        chamfer: per_frame.iter().map(|m| m.chamfer).sum::<f64>() / n,
        geodesic_distortion: mean_of(&|m| m.geodesic_distortion),
        per_frame,
        penetration: None,
    };
    let finite = |x: f64| x.is_finite() && x >= 0.0;
    if !finite(report.chamfer) || !report.mve_cm.is_none_or(finite) || !report.geodesic_distortion.is_none_or(finite) {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    fn bumpy() -> TriMesh {
        let g = shapes::grid(10, 10, 1.0, 1.0);
        let v = g
            .vertices()
            .iter()
            .map(|p| Vec3::new(p.x, p.y, 0.2 * (3.0 * p.x).sin() * p.y))
            .collect();
        g.with_positions(v).unwrap()
    }

    #[test]
    fn identical_sequences_score_zero() {
        let m = bumpy();
        let r = evaluate(&[m.clone(), m.clone()], &[m.clone(), m], &EvalOptions::default()).unwrap();
        assert_eq!(r.mve_cm, Some(0.0));
        assert!(r.chamfer < 1e-24);
        assert_eq!(r.geodesic_distortion, Some(0.0));
    }

    #[test]
    fn rigid_offset_gives_exact_vertex_error() {
        let m = bumpy();
        let shifted = m
            .with_positions(m.vertices().iter().map(|p| p + Vec3::new(0.0, 0.01, 0.0)).collect())
            .unwrap();
        let r = evaluate(&[shifted], &[m], &EvalOptions::default()).unwrap();
        assert!((r.mve_cm.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.geodesic_distortion.unwrap() < 1e-12);
    }

    #[test]
    fn sampled_distortion_tracks_all_pairs() {
        // 200 faces, anisotropic stretch so distances change non-uniformly
        let gt = shapes::grid(10, 10, 1.0, 1.0);
        let pred = gt
            .with_positions(
                gt.vertices()
                    .iter()
                    .map(|p| Vec3::new(p.x * (1.0 + 0.5 * p.y), p.y, 0.3 * p.x * p.x))
                    .collect(),
            )
            .unwrap();
        let nf = gt.face_count();
        assert_eq!(nf, 200);
        let mut total = 0.0;
        for s in 0..nf {
            let a = dual_dijkstra(&pred, s);
            let b = dual_dijkstra(&gt, s);
            total += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
        let exact = total / (nf * nf) as f64;
        let est = geodesic_distortion(&pred, &gt, 4096, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert!((est - exact).abs() < 0.1 * exact, "{est} vs {exact}");
    }

    #[test]
    fn chamfer_accepts_different_meshings() {
        let m = bumpy();
        let fine = shapes::subdivide(&m).mesh;
        let c = chamfer(&m, &fine, 2000, &mut ChaCha8Rng::seed_from_u64(1));
        // planar subdivision leaves the surface unchanged
        assert!(c < 1e-20, "{c}");
        let r = evaluate(&[m], &[fine], &EvalOptions::default()).unwrap();
        assert!(r.mve_cm.is_none() && r.geodesic_distortion.is_none());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let m = bumpy();
        assert!(evaluate(&[m.clone()], &[m.clone(), m], &EvalOptions::default()).is_err());
    }
}
