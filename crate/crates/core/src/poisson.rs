//! Reconstruction of vertex positions from a per-face deformation-gradient
//! field.
//!
//! Each face gains an auxiliary point `v4 = v_j + n` so its local frame
//! `[v_k - v_j, v_l - v_j, v4 - v_j]` is linear in the unknowns. The
//! area-weighted Frobenius objective then separates into three scalar least
//! squares problems (one per world axis) that share the normal matrix
//! `Gᵀ S G`, factored once per garment.
//!
//! The objective is invariant to translation. The factor fixes the gauge by
//! adding `x_0²` (which selects the minimizer with `x_0 = 0` without changing
//! the rest of the solution), and each solve then translates the result so
//! its mean face centroid lands exactly on the requested anchor.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, TriMesh, Vec3};
use crate::sparse::{CholeskyFactor, CsrMatrix};

#[derive(Debug, Clone)]
pub struct PoissonSystem {
    vertex_count: usize,
    face_count: usize,
    /// Rows `3f + c` map unknowns to column `c` of row-`r` entries of `Φ_f(V)`.
    operator: CsrMatrix,
    weights: Vec<f64>,
    factor: CholeskyFactor,
    /// Per-vertex weight of the mean-centroid functional.
    centroid_weights: Vec<f64>,
}

impl PoissonSystem {
    pub fn build(rest: &TriMesh) -> Result<Self> {
        let nv = rest.vertex_count();
        let nf = rest.face_count();
        check_single_component(rest)?;

        let mut triplets = Vec::with_capacity(nf * 12);
        let mut weights = Vec::with_capacity(nf * 3);
        for (f, (&[j, k, l], inv)) in rest.faces().iter().zip(rest.frame_inverses()).enumerate() {
            let aux = nv + f;
            for c in 0..3 {
                let row = 3 * f + c;
                let (mk, ml, ma) = (inv[(0, c)], inv[(1, c)], inv[(2, c)]);
                triplets.push((row, k, mk));
                triplets.push((row, l, ml));
                triplets.push((row, aux, ma));
                triplets.push((row, j, -(mk + ml + ma)));
                weights.push(rest.areas()[f]);
            }
        }
        let n = nv + nf;
        let operator = CsrMatrix::from_triplets(3 * nf, n, triplets);
        let mut lower = operator.weighted_gram_lower(Some(&weights));
        // gauge: pick the minimizer with x_0 = 0
        let gauge = rest.areas().iter().sum::<f64>() / nf as f64;
        lower.push((0, 0, gauge));
        let factor = CholeskyFactor::factor(n, &lower)?;

        let mut centroid_weights = vec![0.0; nv];
        for tri in rest.faces() {
            for &v in tri {
                centroid_weights[v] += 1.0 / (3.0 * nf as f64);
            }
        }

        Ok(PoissonSystem {
            vertex_count: nv,
            face_count: nf,
            operator,
            weights,
            factor,
            centroid_weights,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn face_count(&self) -> usize {
        self.face_count
    }

    /// Vertices plus one auxiliary point per face.
    pub fn unknown_count(&self) -> usize {
        self.vertex_count + self.face_count
    }

    /// Positions whose deformation gradients best match `target` in the
    /// area-weighted Frobenius sense, with mean face centroid at `anchor`.
    pub fn solve(&self, target: &[Mat3], anchor: Vec3) -> Result<Vec<Vec3>> {
        let mut full = self.solve_with_auxiliary(target, anchor)?;
        full.truncate(self.vertex_count);
        Ok(full)
    }

    /// Like [`solve`](Self::solve) but also returns the auxiliary points.
    pub fn solve_with_auxiliary(&self, target: &[Mat3], anchor: Vec3) -> Result<Vec<Vec3>> {
        if target.len() != self.face_count {
            return Err(Error::Dimension(format!(
                "{} target gradients for {} faces",
                target.len(),
                self.face_count
            )));
        }
        if let Some(f) = target.iter().position(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("target gradient of face {f}")));
        }
        if !anchor.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("anchor translation".into()));
        }
        let n = self.unknown_count();
        let mut out = vec![Vec3::zeros(); n];
        for axis in 0..3 {
            let b: Vec<f64> = (0..3 * self.face_count)
                .map(|row| self.weights[row] * target[row / 3][(axis, row % 3)])
                .collect();
            let rhs = self.operator.transpose_mul_vec(&b);
            let x = self.factor.solve(&rhs);
            let mean: f64 = x[..self.vertex_count]
                .iter()
                .zip(&self.centroid_weights)
                .map(|(a, w)| a * w)
                .sum();
            let shift = anchor[axis] - mean;
            for (o, v) in out.iter_mut().zip(&x) {
                o[axis] = v + shift;
            }
        }
        Ok(out)
    }

    /// `Σ s_f ‖Φ_f(x) − target_f‖²_F` for a full unknown vector
    /// (vertices followed by auxiliary points).
    pub fn objective(&self, unknowns: &[Vec3], target: &[Mat3]) -> f64 {
        assert_eq!(unknowns.len(), self.unknown_count());
        let mut total = 0.0;
        for axis in 0..3 {
            let x: Vec<f64> = unknowns.iter().map(|p| p[axis]).collect();
            let y = self.operator.mul_vec(&x);
            for (row, value) in y.iter().enumerate() {
                let r = value - target[row / 3][(axis, row % 3)];
                total += self.weights[row] * r * r;
            }
        }
        total
    }

    pub fn mean_centroid(&self, positions: &[Vec3]) -> Vec3 {
        positions
            .iter()
            .zip(&self.centroid_weights)
            .map(|(p, w)| p * *w)
            .sum()
    }
}

/// The translation gauge is fixed once per mesh, so every vertex must be
/// reachable from vertex 0 through shared faces.
fn check_single_component(mesh: &TriMesh) -> Result<()> {
    let nv = mesh.vertex_count();
    let mut parent: Vec<usize> = (0..nv).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &[a, b, c] in mesh.faces() {
        for (u, v) in [(a, b), (b, c)] {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru.max(rv)] = ru.min(rv);
            }
        }
    }
    let root = find(&mut parent, 0);
    for v in 0..nv {
        if find(&mut parent, v) != root {
            let face = mesh.topology().vertex_faces(v).first().copied();
            return Err(Error::Factorization(format!(
                "rank deficient: vertex {v} (face {face:?}) lies in a component disconnected from vertex 0; \
                 its translation is undetermined"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{deformation_gradients, shapes};
    use nalgebra::Rotation3;

    #[test]
    fn unknown_counts() {
        let tri = TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        assert_eq!(PoissonSystem::build(&tri).unwrap().unknown_count(), 4);
        let square = shapes::grid(1, 1, 1.0, 1.0);
        assert_eq!(PoissonSystem::build(&square).unwrap().unknown_count(), 6);
    }

    #[test]
    fn identity_target_returns_rest() {
        let m = shapes::grid(5, 4, 1.0, 0.8);
        let sys = PoissonSystem::build(&m).unwrap();
        let out = sys.solve(&vec![Mat3::identity(); m.face_count()], m.mean_centroid()).unwrap();
        for (a, b) in out.iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn rotation_target_rotates_about_anchor() {
        let m = shapes::icosphere(1, 0.5);
        let sys = PoissonSystem::build(&m).unwrap();
        let r = Rotation3::from_euler_angles(0.4, 0.1, -0.9).into_inner();
        let z = Vec3::new(1.0, 2.0, 3.0);
        let out = sys.solve(&vec![r; m.face_count()], z).unwrap();
        let c0 = m.mean_centroid();
        for (a, b) in out.iter().zip(m.vertices()) {
            assert!((a - (r * (b - c0) + z)).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_finite_target() {
        let m = shapes::grid(1, 1, 1.0, 1.0);
        let sys = PoissonSystem::build(&m).unwrap();
        let mut target = vec![Mat3::identity(); 2];
        target[1][(0, 0)] = f64::NAN;
        assert!(matches!(sys.solve(&target, Vec3::zeros()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn disconnected_mesh_is_rank_deficient() {
        let m = TriMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::x(),
                Vec3::y(),
                Vec3::new(5.0, 0.0, 0.0),
                Vec3::new(6.0, 0.0, 0.0),
                Vec3::new(5.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let err = PoissonSystem::build(&m).unwrap_err();
        assert!(err.to_string().contains("vertex 3"), "{err}");
    }

    #[test]
    fn round_trip_recovers_bent_grid() {
        let m = shapes::grid(8, 6, 1.0, 0.75);
        let bent: Vec<Vec3> = m
            .vertices()
            .iter()
            .map(|p| Vec3::new(0.8 * (p.x * 1.3).sin(), p.y * 1.1, 0.8 * (1.0 - (p.x * 1.3).cos())))
            .collect();
        let phi = deformation_gradients(&m, &bent).unwrap();
        let sys = PoissonSystem::build(&m).unwrap();
        let target_mean = sys.mean_centroid(&bent);
        let out = sys.solve(&phi, target_mean).unwrap();
        let err = out.iter().zip(&bent).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
        assert!((sys.mean_centroid(&out) - target_mean).norm() < 1e-8);
    }
}
