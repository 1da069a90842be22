//! Triangle-mesh core: connectivity, per-face local frames, deformation
//! gradients and the differential operators used by reconstruction and
//! refinement.
//!
//! A [`TriMesh`] pairs a shared, validated [`Topology`] with one set of vertex
//! positions. Deformed frames of the same garment reuse the topology through
//! [`TriMesh::with_positions`], so adjacency is computed once per garment.

pub mod geodesic;
pub mod laplacian;
pub mod shapes;

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub use geodesic::GeodesicField;
pub use laplacian::uniform_laplacian;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Faces with area at or below this are rejected.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Below this absolute determinant a deformation gradient is treated as singular.
pub const SINGULAR_DET: f64 = 1e-10;

/// Connectivity shared by every frame of one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    face_adjacency: Vec<Vec<usize>>,
    vertex_neighbors: Vec<Vec<usize>>,
    vertex_faces: Vec<Vec<usize>>,
    face_component: Vec<usize>,
    component_count: usize,
}

impl Topology {
    pub fn new(vertex_count: usize, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (f, tri) in faces.iter().enumerate() {
            for &v in tri {
                if v >= vertex_count {
                    return Err(Error::InvalidIndex {
                        face: f,
                        vertex: v,
                        count: vertex_count,
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::DegenerateFace { face: f, area: 0.0 });
            }
        }

        // Directed half-edges must be unique for a consistently wound manifold.
        let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(faces.len() * 3);
        for (f, tri) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if let Some(&g) = directed.get(&(a, b)) {
                    return Err(Error::InconsistentWinding { a: g, b: f });
                }
                directed.insert((a, b), f);
            }
        }

        let mut edge_faces: HashMap<[usize; 2], Vec<usize>> = HashMap::with_capacity(faces.len() * 2);
        for (f, tri) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edge_faces.entry([a.min(b), a.max(b)]).or_default().push(f);
            }
        }
        let mut edges: Vec<[usize; 2]> = edge_faces.keys().copied().collect();
        edges.sort_unstable();

        let mut face_adjacency = vec![Vec::new(); faces.len()];
        let mut vertex_neighbors = vec![Vec::new(); vertex_count];
        for e in &edges {
            let incident = &edge_faces[e];
            if incident.len() > 2 {
                return Err(Error::NonManifoldEdge(e[0], e[1]));
            }
            if let [f, g] = incident[..] {
                face_adjacency[f].push(g);
                face_adjacency[g].push(f);
            }
            vertex_neighbors[e[0]].push(e[1]);
            vertex_neighbors[e[1]].push(e[0]);
        }
        for list in face_adjacency.iter_mut().chain(vertex_neighbors.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        let mut vertex_faces = vec![Vec::new(); vertex_count];
        for (f, tri) in faces.iter().enumerate() {
            for &v in tri {
                vertex_faces[v].push(f);
            }
        }

        let mut face_component = vec![usize::MAX; faces.len()];
        let mut component_count = 0;
        for seed in 0..faces.len() {
            if face_component[seed] != usize::MAX {
                continue;
            }
            let mut stack = vec![seed];
            face_component[seed] = component_count;
            while let Some(f) = stack.pop() {
                for &g in &face_adjacency[f] {
                    if face_component[g] == usize::MAX {
                        face_component[g] = component_count;
                        stack.push(g);
                    }
                }
            }
            component_count += 1;
        }

        Ok(Topology {
            vertex_count,
            faces,
            edges,
            face_adjacency,
            vertex_neighbors,
            vertex_faces,
            face_component,
            component_count,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Unique undirected edges, sorted.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Faces sharing an edge with `face` (the dual graph), sorted.
    pub fn face_neighbors(&self, face: usize) -> &[usize] {
        &self.face_adjacency[face]
    }

    pub fn vertex_neighbors(&self, vertex: usize) -> &[usize] {
        &self.vertex_neighbors[vertex]
    }

    pub fn vertex_faces(&self, vertex: usize) -> &[usize] {
        &self.vertex_faces[vertex]
    }

    /// Connected component of each face (edge-connectivity).
    pub fn face_components(&self) -> &[usize] {
        &self.face_component
    }

    pub fn component_count(&self) -> usize {
        self.component_count
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertex_count as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Edges used by exactly one face.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for tri in &self.faces {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        let mut out: Vec<_> = count.into_iter().filter(|&(_, c)| c == 1).map(|(e, _)| e).collect();
        out.sort_unstable();
        out
    }

    /// Stable content hash of the connectivity.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.vertex_count as u64).to_le_bytes());
        for tri in &self.faces {
            for &v in tri {
                h.update((v as u32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A triangle mesh: shared topology plus one set of vertex positions with
/// cached per-face areas, unit normals and rest-frame inverses.
#[derive(Debug, Clone)]
pub struct TriMesh {
    topology: Arc<Topology>,
    vertices: Vec<Vec3>,
    areas: Vec<f64>,
    normals: Vec<Vec3>,
    frame_inverses: Vec<Mat3>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let topology = Arc::new(Topology::new(vertices.len(), faces)?);
        Self::from_topology(topology, vertices)
    }

    pub fn from_topology(topology: Arc<Topology>, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != topology.vertex_count() {
            return Err(Error::Dimension(format!(
                "{} positions for a topology with {} vertices",
                vertices.len(),
                topology.vertex_count()
            )));
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("vertex {i}")));
        }
        let face_count = topology.face_count();
        let mut areas = Vec::with_capacity(face_count);
        let mut normals = Vec::with_capacity(face_count);
        let mut frame_inverses = Vec::with_capacity(face_count);
        for f in 0..face_count {
            let q = frame_at(&topology.faces[f], &vertices, f)?;
            let cross = (q.column(0)).cross(&q.column(1));
            areas.push(0.5 * cross.norm());
            normals.push(q.column(2).into_owned());
            let inv = q
                .try_inverse()
                .ok_or(Error::DegenerateFace { face: f, area: 0.5 * cross.norm() })?;
            frame_inverses.push(inv);
        }
        Ok(TriMesh {
            topology,
            vertices,
            areas,
            normals,
            frame_inverses,
        })
    }

    /// Same connectivity, new positions.
    pub fn with_positions(&self, vertices: Vec<Vec3>) -> Result<Self> {
        Self::from_topology(Arc::clone(&self.topology), vertices)
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.topology.faces()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.topology.face_count()
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    /// Inverse of the local frame of each face at these positions.
    pub fn frame_inverses(&self) -> &[Mat3] {
        &self.frame_inverses
    }

    pub fn centroid(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.faces()[face];
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    pub fn centroids(&self) -> Vec<Vec3> {
        (0..self.face_count()).map(|f| self.centroid(f)).collect()
    }

    /// Mean of the face centroids (the garment's reference point `z`).
    pub fn mean_centroid(&self) -> Vec3 {
        mean_centroid(self.faces(), &self.vertices)
    }

    /// Area-weighted vertex normals (unit length).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.vertex_count()];
        for (f, tri) in self.faces().iter().enumerate() {
            for &v in tri {
                out[v] += self.normals[f] * self.areas[f];
            }
        }
        for n in &mut out {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        out
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        bbox(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.topology.edges();
        edges
            .iter()
            .map(|&[a, b]| (self.vertices[a] - self.vertices[b]).norm())
            .sum::<f64>()
            / edges.len().max(1) as f64
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }
}

pub fn mean_centroid(faces: &[[usize; 3]], positions: &[Vec3]) -> Vec3 {
    let mut z = Vec3::zeros();
    for &[a, b, c] in faces {
        z += (positions[a] + positions[b] + positions[c]) / 3.0;
    }
    z / faces.len().max(1) as f64
}

pub fn bbox(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

fn frame_at(tri: &[usize; 3], positions: &[Vec3], face: usize) -> Result<Mat3> {
    let [j, k, l] = *tri;
    let e1 = positions[k] - positions[j];
    let e2 = positions[l] - positions[j];
    let cross = e1.cross(&e2);
    let area = 0.5 * cross.norm();
    if !(area > DEGENERATE_AREA) {
        return Err(Error::DegenerateFace { face, area });
    }
    Ok(Mat3::from_columns(&[e1, e2, cross / (2.0 * area)]))
}

/// Local frame `[v_k - v_j, v_l - v_j, n]` of one face at the given positions.
pub fn local_frame(mesh: &TriMesh, face: usize, positions: &[Vec3]) -> Result<Mat3> {
    if face >= mesh.face_count() {
        return Err(Error::InvalidArgument(format!("face {face} out of range")));
    }
    frame_at(&mesh.faces()[face], positions, face)
}

/// Per-face deformation gradients of `positions` relative to the rest mesh.
pub fn deformation_gradients(rest: &TriMesh, positions: &[Vec3]) -> Result<Vec<Mat3>> {
    if positions.len() != rest.vertex_count() {
        return Err(Error::Dimension(format!(
            "{} positions for a mesh with {} vertices",
            positions.len(),
            rest.vertex_count()
        )));
    }
    rest.faces()
        .iter()
        .zip(rest.frame_inverses())
        .enumerate()
        .map(|(f, (tri, inv))| Ok(frame_at(tri, positions, f)? * inv))
        .collect()
}

/// Per-face `Φ_t Φ_prev⁻¹`.
pub fn relative_gradients(phi_t: &[Mat3], phi_prev: &[Mat3]) -> Result<Vec<Mat3>> {
    if phi_t.len() != phi_prev.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} gradients",
            phi_t.len(),
            phi_prev.len()
        )));
    }
    phi_t
        .iter()
        .zip(phi_prev)
        .enumerate()
        .map(|(f, (cur, prev))| {
            let det = prev.determinant();
            if !(det.abs() >= SINGULAR_DET) {
                return Err(Error::SingularGradient { face: f, det });
            }
            let inv = prev.try_inverse().ok_or(Error::SingularGradient { face: f, det })?;
            Ok(cur * inv)
        })
        .collect()
}

/// Singular values sorted in descending order.
pub fn singular_values_desc(m: &Mat3) -> Vec3 {
    let mut s = m.singular_values();
    let sl = s.as_mut_slice();
    sl.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Per-face absolute deformation gradients and their singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationState {
    pub phi: Vec<Mat3>,
    pub sigma: Vec<Vec3>,
}

impl DeformationState {
    pub fn from_gradients(phi: Vec<Mat3>) -> Self {
        let sigma = phi.iter().map(singular_values_desc).collect();
        DeformationState { phi, sigma }
    }

    pub fn from_positions(rest: &TriMesh, positions: &[Vec3]) -> Result<Self> {
        Ok(Self::from_gradients(deformation_gradients(rest, positions)?))
    }

    pub fn rest(face_count: usize) -> Self {
        DeformationState {
            phi: vec![Mat3::identity(); face_count],
            sigma: vec![Vec3::repeat(1.0); face_count],
        }
    }
}

/// Flattens a 3×3 matrix in row-major order.
pub fn flatten_row_major(m: &Mat3) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

pub fn unflatten_row_major(v: &[f64]) -> Mat3 {
    Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}
