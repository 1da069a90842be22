//! Collision refinement: a quadratic post-process that moves penetrating
//! garment vertices out of the body while keeping the predicted Laplacian.
//!
//! The energy is
//!
//! ```text
//! E(V) = Σ_{(i,j)∈C} (n_j·(V_i − U_j) − t)² + λ_lap ‖L V − L Ṽ‖² + λ_reg ‖V − Ṽ‖²
//! ```
//!
//! with `t = −ε` ([`CollisionSign::AsPrinted`]) or `t = +ε`
//! ([`CollisionSign::Outward`]). Its minimizer solves one sparse symmetric
//! system in the 3N interleaved coordinates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collider::ColliderFrame;
use crate::error::{Error, Result};
use crate::geometry::{uniform_laplacian, Topology, Vec3};
use crate::sparse::{CholeskyFactor, CsrMatrix};

/// A penetrating garment vertex paired with its nearest body vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub vertex: usize,
    pub body_vertex: usize,
    /// Outward unit normal at the body vertex.
    pub normal: Vec3,
    /// Body vertex position `U_j`.
    pub anchor: Vec3,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionSign {
    /// Residual `ε + n·(V − U)`: drives vertices to `ε` below the tangent plane.
    AsPrinted,
    /// Residual `n·(V − U) − ε`: drives vertices to `ε` above it.
    #[default]
    Outward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lambda_lap: f64,
    pub lambda_reg: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub collision_sign: CollisionSign,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda_lap: 0.5,
            lambda_reg: 1e-3,
            epsilon: 2e-3,
            max_iterations: 3,
            collision_sign: CollisionSign::Outward,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lap > 0.0) || !(self.lambda_reg > 0.0) {
            return Err(Error::Config("refinement weights must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("collision margin must be non-negative".into()));
        }
        Ok(())
    }

    fn target_offset(&self) -> f64 {
        match self.collision_sign {
            CollisionSign::AsPrinted => -self.epsilon,
            CollisionSign::Outward => self.epsilon,
        }
    }
}

/// Every garment vertex inside the body (winding number ≥ ½), in vertex order.
pub fn detect_collisions(positions: &[Vec3], collider: &ColliderFrame) -> Vec<Collision> {
    let (lo, hi) = collider.mesh().bbox();
    let body = collider.mesh().vertices();
    positions
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let outside_box = (0..3).any(|a| p[a] < lo[a] || p[a] > hi[a]);
            if outside_box {
                return None;
            }
            let sdf = collider.signed_distance(p);
            if sdf.signed_distance >= 0.0 {
                return None;
            }
            let (j, _) = collider.nearest_vertex(p);
            Some(Collision {
                vertex: i,
                body_vertex: j,
                normal: collider.vertex_normals()[j],
                anchor: body[j],
                depth: -sdf.signed_distance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub positions: Vec<Vec3>,
    /// Collision set the final solve used (accumulated over iterations).
    pub collisions: Vec<Collision>,
    pub iterations: usize,
    pub energy_before: f64,
    pub energy_after: f64,
    /// Vertices still deeper than ε after the last iteration.
    pub residual_penetrations: Vec<usize>,
    pub max_residual_depth: f64,
    pub converged: bool,
}

/// Per-topology refinement operator with the Laplacian Gram matrix cached.
#[derive(Debug, Clone)]
pub struct Refiner {
    laplacian: CsrMatrix,
    gram_lower: Vec<(usize, usize, f64)>,
    config: RefineConfig,
}

impl Refiner {
    pub fn new(topology: &Topology, config: RefineConfig) -> Result<Self> {
        config.validate()?;
        let laplacian = uniform_laplacian(topology)?;
        let gram_lower = laplacian.weighted_gram_lower(None);
        Ok(Refiner {
            laplacian,
            gram_lower,
            config,
        })
    }

    pub fn config(&self) -> &RefineConfig {
        &self.config
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    pub fn energy(&self, positions: &[Vec3], tilde: &[Vec3], collisions: &[Collision]) -> f64 {
        let t = self.config.target_offset();
        let collision: f64 = collisions
            .iter()
            .map(|c| (c.normal.dot(&(positions[c.vertex] - c.anchor)) - t).powi(2))
            .sum();
        let mut lap = 0.0;
        for a in 0..3 {
            let x: Vec<f64> = positions.iter().map(|p| p[a]).collect();
            let y: Vec<f64> = tilde.iter().map(|p| p[a]).collect();
            let lx = self.laplacian.mul_vec(&x);
            let ly = self.laplacian.mul_vec(&y);
            lap += lx.iter().zip(&ly).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        }
        let reg: f64 = positions.iter().zip(tilde).map(|(p, q)| (p - q).norm_squared()).sum();
        collision + self.config.lambda_lap * lap + self.config.lambda_reg * reg
    }

    /// Minimizer of the energy for a fixed collision set.
    pub fn solve(&self, tilde: &[Vec3], collisions: &[Collision]) -> Result<Vec<Vec3>> {
        let n = tilde.len();
        if n != self.laplacian.rows() {
            return Err(Error::Dimension(format!(
                "{n} positions for a {}-vertex refinement operator",
                self.laplacian.rows()
            )));
        }
        if collisions.is_empty() {
            return Ok(tilde.to_vec());
        }
        let cfg = &self.config;
        let mut lower = Vec::with_capacity(3 * self.gram_lower.len() + 3 * n + 6 * collisions.len());
        for &(r, c, v) in &self.gram_lower {
            for a in 0..3 {
                lower.push((3 * r + a, 3 * c + a, cfg.lambda_lap * v));
            }
        }
        for i in 0..3 * n {
            lower.push((i, i, cfg.lambda_reg));
        }
        let flat = |p: &[Vec3]| -> Vec<f64> { p.iter().flat_map(|v| [v.x, v.y, v.z]).collect() };
        let xt = flat(tilde);
        // (λ_lap LᵀL ⊗ I + λ_reg I) Ṽ
        let mut rhs = vec![0.0; 3 * n];
        for a in 0..3 {
            let y: Vec<f64> = tilde.iter().map(|p| p[a]).collect();
            let ly = self.laplacian.mul_vec(&y);
            let lty = self.laplacian.transpose_mul_vec(&ly);
            for i in 0..n {
                rhs[3 * i + a] = cfg.lambda_lap * lty[i] + cfg.lambda_reg * xt[3 * i + a];
            }
        }
        let t = cfg.target_offset();
        for c in collisions {
            let nrm = c.normal;
            let target = nrm.dot(&c.anchor) + t;
            for a in 0..3 {
                for b in 0..=a {
                    lower.push((3 * c.vertex + a, 3 * c.vertex + b, nrm[a] * nrm[b]));
                }
                rhs[3 * c.vertex + a] += nrm[a] * target;
            }
        }
        let factor = CholeskyFactor::factor(3 * n, &lower)?;
        let x = factor.solve(&rhs);
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("refined coordinate {k}")));
        }
        Ok(x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    /// Detects, solves and re-detects up to `max_iterations` times. Vertices
    /// found penetrating in any pass stay in the set so later passes cannot
    /// release them.
    pub fn refine(&self, tilde: &[Vec3], collider: &ColliderFrame) -> Result<RefineReport> {
        let mut set = detect_collisions(tilde, collider);
        let mut positions = tilde.to_vec();
        let mut iterations = 0;
        let mut converged = set.is_empty();
        while !set.is_empty() && iterations < self.config.max_iterations {
            positions = self.solve(tilde, &set)?;
            iterations += 1;
            let known: std::collections::HashSet<usize> = set.iter().map(|c| c.vertex).collect();
            let fresh: Vec<Collision> = detect_collisions(&positions, collider)
                .into_iter()
                .filter(|c| !known.contains(&c.vertex))
                .collect();
            if fresh.is_empty() {
                converged = true;
                break;
            }
            set.extend(fresh);
            set.sort_by_key(|c| c.vertex);
        }
        let energy_before = self.energy(tilde, tilde, &set);
        let energy_after = self.energy(&positions, tilde, &set);
        let mut residual_penetrations = Vec::new();
        let mut max_residual_depth: f64 = 0.0;
        for c in detect_collisions(&positions, collider) {
            if c.depth > self.config.epsilon {
                residual_penetrations.push(c.vertex);
                max_residual_depth = max_residual_depth.max(c.depth);
            }
        }
        if !residual_penetrations.is_empty() {
            converged = false;
        }
        if !converged {
            log::warn!(
                "collision refinement stopped after {iterations} passes with {} vertices deeper than {} m (max {:.3e} m)",
                residual_penetrations.len(),
                self.config.epsilon,
                max_residual_depth
            );
        }
        Ok(RefineReport {
            positions,
            collisions: set,
            iterations,
            energy_before,
            energy_after,
            residual_penetrations,
            max_residual_depth,
            converged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{shapes, TriMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere() -> ColliderFrame {
        ColliderFrame::new(shapes::icosphere(2, 0.3)).unwrap()
    }

    /// A cloth grid draped over the top of the sphere, hovering 5 mm above it.
    fn draped() -> TriMesh {
        let grid = shapes::grid(20, 20, 0.5, 0.5);
        let verts = grid
            .vertices()
            .iter()
            .map(|v| {
                let (x, y) = (v.x - 0.25, v.y - 0.25);
                let r2 = x * x + y * y;
                let z = if r2 < 0.3 * 0.3 { (0.09 - r2).sqrt() } else { 0.0 };
                Vec3::new(x, y, z + 0.005)
            })
            .collect();
        grid.with_positions(verts).unwrap()
    }

    #[test]
    fn detection_matches_brute_force() {
        let c = sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)))
            .collect();
        let got = detect_collisions(&pts, &c);
        let body = c.mesh().vertices();
        let mut expected = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            if c.winding_number(p) >= 0.5 {
                let j = (0..body.len())
                    .min_by(|&a, &b| (body[a] - p).norm().total_cmp(&(body[b] - p).norm()).then(a.cmp(&b)))
                    .unwrap();
                expected.push((i, j));
            }
        }
        let got_pairs: Vec<(usize, usize)> = got.iter().map(|c| (c.vertex, c.body_vertex)).collect();
        assert_eq!(got_pairs, expected);
        assert!(!expected.is_empty());
    }

    #[test]
    fn outside_garment_has_no_collisions() {
        assert!(detect_collisions(draped().vertices(), &sphere()).is_empty());
    }

    #[test]
    fn center_vertex_pairs_with_nearest_body_vertex() {
        let c = sphere();
        let set = detect_collisions(&[Vec3::new(1.0, 0.0, 0.0), Vec3::zeros()], &c);
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].vertex, 1);
        assert_eq!(set[0].body_vertex, c.nearest_vertex(&Vec3::zeros()).0);
    }

    #[test]
    fn empty_set_returns_input() {
        let m = draped();
        let r = Refiner::new(m.topology(), RefineConfig::default()).unwrap();
        assert_eq!(r.solve(m.vertices(), &[]).unwrap(), m.vertices());
        let rep = r.refine(m.vertices(), &sphere()).unwrap();
        assert_eq!(rep.positions, m.vertices());
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn single_vertex_blend_lies_between() {
        // one isolated triangle; only its first vertex collides
        let m = TriMesh::new(
            vec![Vec3::new(0.0, 0.0, -0.1), Vec3::new(1.0, 0.0, 0.5), Vec3::new(0.0, 1.0, 0.5)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cfg = RefineConfig {
            epsilon: 0.0,
            ..RefineConfig::default()
        };
        let r = Refiner::new(m.topology(), cfg).unwrap();
        let col = Collision {
            vertex: 0,
            body_vertex: 0,
            normal: Vec3::z(),
            anchor: Vec3::zeros(),
            depth: 0.1,
        };
        let out = r.solve(m.vertices(), &[col]).unwrap();
        assert!(out[0].z > -0.1 && out[0].z <= 1e-12, "{}", out[0].z);
        assert!(r.energy(&out, m.vertices(), &[col]) <= r.energy(m.vertices(), m.vertices(), &[col]));
    }

    fn inject(m: &TriMesh, fraction: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = m.vertices().to_vec();
        let count = (fraction * v.len() as f64).round() as usize;
        let candidates: Vec<usize> = (0..v.len()).filter(|&i| v[i].z > 0.05).collect();
        for k in rand::seq::index::sample(&mut rng, candidates.len(), count) {
            let i = candidates[k];
            v[i].z -= rng.random_range(0.01..0.03);
        }
        v
    }

    #[test]
    fn injected_penetrations_are_resolved() {
        let m = draped();
        let c = sphere();
        let tilde = inject(&m, 0.05, 7);
        assert!(!detect_collisions(&tilde, &c).is_empty());
        let r = Refiner::new(m.topology(), RefineConfig::default()).unwrap();
        let rep = r.refine(&tilde, &c).unwrap();
        assert!(rep.residual_penetrations.is_empty(), "{:?}", rep.residual_penetrations);
        assert!(rep.energy_after <= rep.energy_before);
        // idempotent once clean
        let again = r.refine(&rep.positions, &c).unwrap();
        if detect_collisions(&rep.positions, &c).is_empty() {
            assert_eq!(again.positions, rep.positions);
        }
    }

    #[test]
    fn heavy_regularization_keeps_input() {
        let m = draped();
        let c = sphere();
        let tilde = inject(&m, 0.05, 3);
        let cfg = RefineConfig {
            lambda_reg: 1e6,
            ..RefineConfig::default()
        };
        let r = Refiner::new(m.topology(), cfg).unwrap();
        let set = detect_collisions(&tilde, &c);
        let out = r.solve(&tilde, &set).unwrap();
        let scale = m.bbox_diagonal();
        for (a, b) in out.iter().zip(&tilde) {
            assert!((a - b).norm() < 1e-3 * scale);
        }
    }

    #[test]
    fn as_printed_sign_targets_below_plane() {
        let m = TriMesh::new(
            vec![Vec3::new(0.0, 0.0, -0.1), Vec3::new(1.0, 0.0, -0.1), Vec3::new(0.0, 1.0, -0.1)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let set: Vec<Collision> = (0..3)
            .map(|i| Collision {
                vertex: i,
                body_vertex: 0,
                normal: Vec3::z(),
                anchor: Vec3::zeros(),
                depth: 0.1,
            })
            .collect();
        for (sign, expected) in [(CollisionSign::AsPrinted, -0.002), (CollisionSign::Outward, 0.002)] {
            let cfg = RefineConfig {
                lambda_reg: 1e-9,
                collision_sign: sign,
                ..RefineConfig::default()
            };
            let r = Refiner::new(m.topology(), cfg).unwrap();
            let out = r.solve(m.vertices(), &set).unwrap();
            for p in out {
                assert!((p.z - expected).abs() < 1e-6, "{sign:?}: {}", p.z);
            }
        }
    }
}
