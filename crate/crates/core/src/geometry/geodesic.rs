//! All-pairs geodesic distances between face centroids, approximated by
//! shortest paths on the dual graph (faces as nodes, one edge per shared mesh
//! edge weighted by the centroid-to-centroid distance).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::TriMesh;
use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 8] = b"GFGEODS\0";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicField {
    n: usize,
    dist: Vec<f32>,
    scale: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest dual-graph distances from `source` to every face.
pub fn dual_dijkstra(mesh: &TriMesh, source: usize) -> Vec<f64> {
    let centroids = mesh.centroids();
    dual_dijkstra_with(mesh, &centroids, source)
}

pub(crate) fn dual_dijkstra_with(mesh: &TriMesh, centroids: &[super::Vec3], source: usize) -> Vec<f64> {
    let topo = mesh.topology();
    let mut dist = vec![f64::INFINITY; mesh.face_count()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, f)) = heap.pop() {
        if d > dist[f] {
            continue;
        }
        for &g in topo.face_neighbors(f) {
            let nd = d + (centroids[f] - centroids[g]).norm();
            if nd < dist[g] {
                dist[g] = nd;
                heap.push(Entry(nd, g));
            }
        }
    }
    dist
}

impl GeodesicField {
    /// All-pairs distances, parallel over source faces. Output does not depend
    /// on the thread count.
    pub fn compute(mesh: &TriMesh) -> Self {
        let n = mesh.face_count();
        let centroids = mesh.centroids();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|s| dual_dijkstra_with(mesh, &centroids, s))
            .collect();
        let mut dist = vec![0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = rows[i][j].min(rows[j][i]) as f32;
            }
        }
        GeodesicField { n, dist, scale: 1.0 }
    }

    pub fn from_dense(n: usize, dist: Vec<f32>, scale: f64) -> Result<Self> {
        if dist.len() != n * n {
            return Err(Error::Dimension(format!("{} entries for {n} faces", dist.len())));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("geodesic scale {scale} must be positive")));
        }
        Ok(GeodesicField { n, dist, scale })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        assert!(scale > 0.0, "geodesic scale must be positive");
        self.scale = scale;
        self
    }

    pub fn face_count(&self) -> usize {
        self.n
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Distance in meters; `+inf` across disconnected components.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j] as f64
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.dist[i * self.n..(i + 1) * self.n]
    }

    /// Content hash of positions and faces, used to key the cache file.
    pub fn content_hash(mesh: &TriMesh) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((mesh.vertex_count() as u64).to_le_bytes());
        for v in mesh.vertices() {
            for c in v.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        for tri in mesh.faces() {
            for &v in tri {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn write_cache<W: Write>(&self, mesh: &TriMesh, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_all(&Self::content_hash(mesh))?;
        w.write_u64::<LittleEndian>(self.n as u64)?;
        w.write_f64::<LittleEndian>(self.scale)?;
        for &d in &self.dist {
            w.write_f32::<LittleEndian>(d)?;
        }
        Ok(())
    }

    /// Reads a cache; returns `Ok(None)` when the cache belongs to another mesh.
    pub fn read_cache<R: Read>(mesh: &TriMesh, mut r: R) -> Result<Option<Self>> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a geodesic cache".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported geodesic cache version {version}")));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        if hash != Self::content_hash(mesh) {
            return Ok(None);
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        if n != mesh.face_count() {
            return Err(Error::Format("geodesic cache size does not match mesh".into()));
        }
        let scale = r.read_f64::<LittleEndian>()?;
        let mut dist = vec![0f32; n * n];
        r.read_f32_into::<LittleEndian>(&mut dist)?;
        Ok(Some(GeodesicField::from_dense(n, dist, scale)?))
    }

    /// Loads from `path` when it holds a cache for this mesh, otherwise
    /// computes and (re)writes it.
    pub fn load_or_compute(mesh: &TriMesh, path: &Path) -> Result<Self> {
        if path.exists() {
            let file = std::io::BufReader::new(std::fs::File::open(path)?);
            if let Some(field) = Self::read_cache(mesh, file)? {
                return Ok(field);
            }
        }
        let field = Self::compute(mesh);
        crate::io::write_atomic(path, |w| field.write_cache(mesh, w))?;
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{shapes, Vec3};

    #[test]
    fn two_adjacent_triangles() {
        let m = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let g = GeodesicField::compute(&m);
        let expected = (m.centroid(0) - m.centroid(1)).norm();
        assert!((g.get(0, 1) - expected).abs() < 1e-6);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn disconnected_components_are_infinite() {
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
        let g = GeodesicField::compute(&m);
        assert!(g.get(0, 1).is_infinite());
        assert_eq!(g.get(1, 1), 0.0);
    }

    #[test]
    fn symmetric_zero_diagonal_triangle_inequality() {
        let m = shapes::icosphere(1, 1.0);
        let g = GeodesicField::compute(&m);
        let n = g.face_count();
        for i in 0..n {
            assert_eq!(g.get(i, i), 0.0);
            for j in 0..n {
                assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        for i in (0..n).step_by(3) {
            for j in (0..n).step_by(5) {
                for k in (0..n).step_by(7) {
                    assert!(g.get(i, k) <= g.get(i, j) + g.get(j, k) + 1e-5);
                }
            }
        }
    }

    #[test]
    fn flat_strip_overestimate_bounded() {
        // 4x4 grid: dual-graph distance vs straight-line planar distance
        let m = shapes::grid(4, 4, 1.0, 1.0);
        let g = GeodesicField::compute(&m);
        let (mut total, mut pairs) = (0.0, 0usize);
        for i in 0..m.face_count() {
            for j in 0..m.face_count() {
                if i == j {
                    continue;
                }
                let exact = (m.centroid(i) - m.centroid(j)).norm();
                assert!(g.get(i, j) + 1e-6 >= exact, "underestimate at ({i}, {j})");
                total += g.get(i, j) / exact - 1.0;
                pairs += 1;
            }
        }
        let mean = total / pairs as f64;
        assert!(mean <= 0.30, "mean overestimate {mean}");
    }

    #[test]
    fn cache_round_trip_and_key() {
        let m = shapes::grid(2, 2, 1.0, 1.0);
        let g = GeodesicField::compute(&m).with_scale(0.5);
        let mut buf = Vec::new();
        g.write_cache(&m, &mut buf).unwrap();
        let back = GeodesicField::read_cache(&m, buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, g);
        let other = shapes::grid(2, 2, 1.0, 2.0);
        assert!(GeodesicField::read_cache(&other, buf.as_slice()).unwrap().is_none());
    }
}
