//! Per-face network inputs.
//!
//! Every frame contributes 34 numbers per garment face:
//!
//! | range  | content                                                   |
//! |--------|-----------------------------------------------------------|
//! | 0..9   | deformation gradient Φ, row-major                         |
//! | 9..12  | world-space unit normal                                   |
//! | 12..15 | centroid minus the mean centroid of the garment           |
//! | 15..19 | signed distance to the body, then unit direction to it    |
//! | 19..31 | nearest body face motion: relative gradient, velocity     |
//! | 31..34 | singular values of Φ, descending                          |
//!
//! A token stacks `n_hist` frames (oldest first) followed by the
//! `n_hist − 1` most recent global velocities, broadcast to every face.

use std::borrow::Borrow;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collider::{collider_motion_feature, ColliderFrame, SdfQuery};
use crate::error::{Error, Result};
use crate::geometry::{flatten_row_major, DeformationState, TriMesh, Vec3};

pub const FRAME_DIM: usize = 34;
pub const STD_FLOOR: f64 = 1e-6;

pub fn token_dim(n_hist: usize) -> usize {
    FRAME_DIM * n_hist + 3 * (n_hist - 1)
}

/// Features of one garment frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    /// `face_count × 34`
    pub values: Array2<f64>,
    pub mean_centroid: Vec3,
}

impl FrameFeatures {
    pub fn face_count(&self) -> usize {
        self.values.nrows()
    }
}

/// Builds the 34-dim features of every face of `garment` (current
/// positions) given its deformation state and the collider at `t` and `t+1`.
pub fn extract_frame(
    garment: &TriMesh,
    state: &DeformationState,
    collider_t: &ColliderFrame,
    collider_t1: &ColliderFrame,
) -> Result<FrameFeatures> {
    let sdf = face_sdf(garment, collider_t);
    extract_frame_with_sdf(garment, state, &sdf, collider_t, collider_t1)
}

/// Signed-distance queries at every face centroid.
pub fn face_sdf(garment: &TriMesh, collider: &ColliderFrame) -> Vec<SdfQuery> {
    (0..garment.face_count())
        .into_par_iter()
        .map(|f| collider.signed_distance(&garment.centroid(f)))
        .collect()
}

/// [`extract_frame`] with the centroid queries precomputed by [`face_sdf`].
pub fn extract_frame_with_sdf(
    garment: &TriMesh,
    state: &DeformationState,
    sdf: &[SdfQuery],
    collider_t: &ColliderFrame,
    collider_t1: &ColliderFrame,
) -> Result<FrameFeatures> {
    let nf = garment.face_count();
    if state.phi.len() != nf || state.sigma.len() != nf || sdf.len() != nf {
        return Err(Error::Dimension(format!(
            "deformation state has {} faces and {} distance queries, garment has {nf}",
            state.phi.len(),
            sdf.len()
        )));
    }
    let z = garment.mean_centroid();
    let rows: Vec<Result<[f64; FRAME_DIM]>> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let mut row = [0.0; FRAME_DIM];
            row[0..9].copy_from_slice(&flatten_row_major(&state.phi[f]));
            row[9..12].copy_from_slice(garment.normals()[f].as_slice());
            let c = garment.centroid(f);
            row[12..15].copy_from_slice((c - z).as_slice());
            let q = &sdf[f];
            row[15] = q.signed_distance;
            row[16..19].copy_from_slice(q.direction.as_slice());
            row[19..31].copy_from_slice(&collider_motion_feature(collider_t, collider_t1, q.nearest_face)?);
            row[31..34].copy_from_slice(state.sigma[f].as_slice());
            Ok(row)
        })
        .collect();
    let mut values = Array2::zeros((nf, FRAME_DIM));
    for (f, row) in rows.into_iter().enumerate() {
        let row = row?;
        if let Some(k) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {k} of face {f}")));
        }
        values.row_mut(f).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(FrameFeatures {
        values,
        mean_centroid: z,
    })
}

/// `z^t − z^{t−1}` from two centroid sets of the same triangulation.
pub fn global_velocity(centroids_t: &[Vec3], centroids_prev: &[Vec3]) -> Vec3 {
    let mean = |c: &[Vec3]| c.iter().sum::<Vec3>() / c.len().max(1) as f64;
    mean(centroids_t) - mean(centroids_prev)
}

/// Stacks `frames` (oldest first) into one token per face.
pub fn stack_frames(frames: &[&FrameFeatures]) -> Result<Array2<f64>> {
    let n_hist = frames.len();
    if n_hist < 2 {
        return Err(Error::InvalidArgument("a feature stack needs at least two frames".into()));
    }
    let nf = frames[0].face_count();
    if frames.iter().any(|f| f.face_count() != nf) {
        return Err(Error::Dimension("frames disagree on face count".into()));
    }
    let dim = token_dim(n_hist);
    let mut out = Array2::zeros((nf, dim));
    for (k, frame) in frames.iter().enumerate() {
        out.slice_mut(ndarray::s![.., k * FRAME_DIM..(k + 1) * FRAME_DIM])
            .assign(&frame.values);
    }
    let base = FRAME_DIM * n_hist;
    for k in 1..n_hist {
        let q = frames[k].mean_centroid - frames[k - 1].mean_centroid;
        for a in 0..3 {
            out.column_mut(base + 3 * (k - 1) + a).fill(q[a]);
        }
    }
    Ok(out)
}

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation over every row of every stack.
    pub fn fit<I>(stacks: I) -> Result<Self>
    where
        I: IntoIterator + Clone,
        I::Item: Borrow<Array2<f64>>,
    {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        for s in stacks.clone() {
            let s = s.borrow();
            let d = *dim.get_or_insert(s.ncols());
            if d != s.ncols() {
                return Err(Error::Dimension(format!("stack width {} vs {d}", s.ncols())));
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
            }
            for row in s.rows() {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            count += s.nrows();
        }
        let dim = dim.ok_or_else(|| Error::InvalidArgument("no stacks to fit".into()))?;
        if count == 0 {
            return Err(Error::InvalidArgument("no rows to fit".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; dim];
        for s in stacks {
            for row in s.borrow().rows() {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, stack: &Array2<f64>) -> Result<Array2<f64>> {
        if stack.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "stack width {} but statistics cover {} dimensions",
                stack.ncols(),
                self.dim()
            )));
        }
        let mut out = stack.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Adds i.i.d. `N(0, sigma_n)` noise to every entry.
pub fn add_noise<R: Rng + ?Sized>(stack: &mut Array2<f64>, sigma_n: f64, rng: &mut R) -> Result<()> {
    if sigma_n == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma_n)
        .map_err(|e| Error::InvalidArgument(format!("noise level {sigma_n}: {e}")))?;
    for v in stack.iter_mut() {
        *v += normal.sample(rng);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn far_body() -> ColliderFrame {
        let mesh = shapes::icosphere(1, 0.2);
        let moved: Vec<Vec3> = mesh.vertices().iter().map(|v| v + Vec3::new(0.0, 0.0, -3.0)).collect();
        ColliderFrame::new(mesh.with_positions(moved).unwrap()).unwrap()
    }

    #[test]
    fn rest_garment_far_from_body() {
        let g = shapes::grid(4, 3, 1.0, 0.6);
        let body = far_body();
        let state = DeformationState::from_positions(&g, g.vertices()).unwrap();
        let ff = extract_frame(&g, &state, &body, &body).unwrap();
        assert_eq!(ff.values.ncols(), 34);
        let mut centroid_sum = Vec3::zeros();
        for row in ff.values.rows() {
            for (k, id) in [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0].iter().enumerate() {
                assert!((row[k] - id).abs() < 1e-12);
            }
            for k in 31..34 {
                assert!((row[k] - 1.0).abs() < 1e-12);
            }
            centroid_sum += Vec3::new(row[12], row[13], row[14]);
            assert!(row[15] > 2.0);
            let v = Vec3::new(row[16], row[17], row[18]);
            assert!((v.norm() - 1.0).abs() < 1e-12);
            assert!((Vec3::new(row[9], row[10], row[11]).norm() - 1.0).abs() < 1e-12);
        }
        assert!(centroid_sum.norm() < 1e-12);
    }

    #[test]
    fn centered_centroids_translation_invariant() {
        let g = shapes::grid(3, 3, 1.0, 1.0);
        let body = far_body();
        let state = DeformationState::from_positions(&g, g.vertices()).unwrap();
        let a = extract_frame(&g, &state, &body, &body).unwrap();
        let moved = g
            .with_positions(g.vertices().iter().map(|v| v + Vec3::new(0.3, 0.1, 0.2)).collect())
            .unwrap();
        let b = extract_frame(&moved, &state, &body, &body).unwrap();
        for f in 0..g.face_count() {
            for k in 12..15 {
                assert!((a.values[(f, k)] - b.values[(f, k)]).abs() < 1e-12);
            }
            for k in 9..12 {
                assert_eq!(a.values[(f, k)], b.values[(f, k)]);
            }
        }
    }

    #[test]
    fn global_velocity_examples() {
        let c = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(global_velocity(&c, &c), Vec3::zeros());
        let up: Vec<Vec3> = c.iter().map(|v| v + Vec3::new(0.0, 0.05, 0.0)).collect();
        assert!((global_velocity(&up, &c) - Vec3::new(0.0, 0.05, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn stack_layout_and_dimension() {
        assert_eq!(token_dim(10), 367);
        let frames: Vec<FrameFeatures> = (0..3)
            .map(|k| FrameFeatures {
                values: Array2::from_elem((2, FRAME_DIM), k as f64),
                mean_centroid: Vec3::new(k as f64 * 0.5, 0.0, 0.0),
            })
            .collect();
        let refs: Vec<&FrameFeatures> = frames.iter().collect();
        let s = stack_frames(&refs).unwrap();
        assert_eq!(s.ncols(), token_dim(3));
        for k in 0..3 {
            assert!(s.row(1).iter().skip(k * FRAME_DIM).take(FRAME_DIM).all(|&v| v == k as f64));
        }
        assert_eq!(s[(0, 3 * FRAME_DIM)], 0.5);
        assert_eq!(s[(1, 3 * FRAME_DIM + 3)], 0.5);
    }

    #[test]
    fn normalization_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((50, 4), |(i, j)| (i as f64 * 0.37 + j as f64).sin() * 3.0 + j as f64 + rng.random::<f64>());
        let b = Array2::from_shape_fn((30, 4), |(i, j)| (i as f64).cos() + j as f64 * 2.0);
        let stats = NormStats::fit([&a, &b]).unwrap();
        let na = stats.normalize(&a).unwrap();
        let nb = stats.normalize(&b).unwrap();
        for d in 0..4 {
            let vals: Vec<f64> = na.column(d).iter().chain(nb.column(d).iter()).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v.sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(stats.normalize(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn constant_dimension_std_is_clamped() {
        let a = Array2::from_elem((5, 2), 3.0);
        let stats = NormStats::fit([&a]).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn noise_determinism_and_zero_level() {
        let base = Array2::from_elem((10, 5), 0.5);
        let mut a = base.clone();
        add_noise(&mut a, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, base);
        let mut b = base.clone();
        let mut c = base.clone();
        add_noise(&mut b, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        add_noise(&mut c, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(b, c);
        assert_ne!(b, base);
    }

    #[test]
    fn noise_covariance_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut x = Array2::zeros((20000, 3));
        add_noise(&mut x, 0.5, &mut rng).unwrap();
        let n = x.nrows() as f64;
        for a in 0..3 {
            for b in 0..3 {
                let cov = x.column(a).iter().zip(x.column(b)).map(|(p, q)| p * q).sum::<f64>() / n;
                if a == b {
                    assert!((cov - 0.25).abs() < 0.02);
                } else {
                    // sampling error of the covariance is about 0.25 / sqrt(n)
                    assert!(cov.abs() < 0.01);
                }
            }
        }
    }
}
