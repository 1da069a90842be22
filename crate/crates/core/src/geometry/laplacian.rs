use super::Topology;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Uniform graph Laplacian: `(ΔV)_i = V_i - mean(V_j for j in N(i))`.
pub fn uniform_laplacian(topology: &Topology) -> Result<CsrMatrix> {
    let n = topology.vertex_count();
    let mut triplets = Vec::new();
    for i in 0..n {
        let ring = topology.vertex_neighbors(i);
        if ring.is_empty() {
            return Err(Error::IsolatedVertex(i));
        }
        triplets.push((i, i, 1.0));
        let w = 1.0 / ring.len() as f64;
        for &j in ring {
            triplets.push((i, j, -w));
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{TriMesh, Vec3};

    #[test]
    fn hexagon_center_is_zero() {
        let mut vertices = vec![Vec3::zeros()];
        for k in 0..6 {
            let a = std::f64::consts::TAU * k as f64 / 6.0;
            vertices.push(Vec3::new(a.cos(), a.sin(), 0.0));
        }
        let faces = (0..6).map(|k| [0, 1 + k, 1 + (k + 1) % 6]).collect();
        let m = TriMesh::new(vertices, faces).unwrap();
        let lap = uniform_laplacian(m.topology()).unwrap();
        for axis in 0..3 {
            let x: Vec<f64> = m.vertices().iter().map(|v| v[axis]).collect();
            assert!(lap.mul_vec(&x)[0].abs() < 1e-15);
        }
    }

    #[test]
    fn constant_field_in_null_space() {
        let m = crate::geometry::shapes::grid(3, 3, 1.0, 1.0);
        let lap = uniform_laplacian(m.topology()).unwrap();
        let ones = vec![2.5; m.vertex_count()];
        assert!(lap.mul_vec(&ones).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn isolated_vertex_rejected() {
        let m = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(uniform_laplacian(m.topology()), Err(Error::IsolatedVertex(3))));
    }
}
