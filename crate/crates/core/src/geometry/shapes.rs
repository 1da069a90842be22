//! Mesh generators: icosphere, planar grids, surfaces of revolution and
//! midpoint subdivision.

use std::collections::HashMap;

use super::{TriMesh, Vec3};

/// Icosahedron refined `level` times by midpoint subdivision and projected to
/// a sphere of `radius` centered at the origin. Faces wind outward.
pub fn icosphere(level: usize, radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
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
    for _ in 0..level {
        let (v, f, _) = midpoint_split(&vertices, &faces);
        vertices = v.into_iter().map(|p| p.normalize()).collect();
        faces = f;
    }
    let vertices = vertices.into_iter().map(|p| p * radius).collect();
    TriMesh::new(vertices, faces).expect("icosphere is a valid closed mesh")
}

/// Flat `nx × ny` quad grid in the xy-plane spanning `[0, width] × [0, height]`,
/// two triangles per cell, normals along +z.
pub fn grid(nx: usize, ny: usize, width: f64, height: f64) -> TriMesh {
    let (vertices, faces) = grid_parts(nx, ny, width, height);
    TriMesh::new(vertices, faces).expect("grid is a valid mesh")
}

pub(crate) fn grid_parts(nx: usize, ny: usize, width: f64, height: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Vec3::new(
                width * i as f64 / nx as f64,
                height * j as f64 / ny as f64,
                0.0,
            ));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut faces = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            // alternate the diagonal to avoid a directional bias
            if (i + j) % 2 == 0 {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }
    (vertices, faces)
}

/// Open surface of revolution about the z-axis. `profile` lists `(radius, z)`
/// rings from top to bottom; each ring has `segments` vertices. Faces wind so
/// normals point away from the axis.
pub fn open_lathe(profile: &[(f64, f64)], segments: usize) -> TriMesh {
    let (vertices, faces) = lathe_parts(profile, segments, None, None);
    TriMesh::new(vertices, faces).expect("lathe surface is a valid mesh")
}

/// Open surface of revolution cut along the given columns. Each cut runs
/// from the last profile ring up to ring `cut_from` (which stays shared), so
/// the surface remains connected through the rings above it.
pub fn slit_lathe(profile: &[(f64, f64)], segments: usize, cuts: &[usize], cut_from: usize) -> TriMesh {
    let (mut vertices, mut faces) = lathe_parts(profile, segments, None, None);
    let rings = profile.len();
    for &col in cuts {
        let col = col % segments;
        let mut dup = std::collections::HashMap::new();
        for j in cut_from + 1..rings {
            dup.insert(j * segments + col, vertices.len());
            vertices.push(vertices[j * segments + col]);
        }
        // the strip ending at the cut column switches to the duplicates
        let strip = (col + segments - 1) % segments;
        for j in 0..rings - 1 {
            for t in 0..2 {
                let f = 2 * (j * segments + strip) + t;
                for v in faces[f].iter_mut() {
                    if let Some(&d) = dup.get(v) {
                        *v = d;
                    }
                }
            }
        }
    }
    TriMesh::new(vertices, faces).expect("slit lathe surface is a valid mesh")
}

/// Closed surface of revolution with a pole above the first ring and below the
/// last ring.
pub fn closed_lathe(top: f64, profile: &[(f64, f64)], bottom: f64, segments: usize) -> TriMesh {
    let (vertices, faces) = lathe_parts(profile, segments, Some(top), Some(bottom));
    TriMesh::new(vertices, faces).expect("closed lathe surface is a valid mesh")
}

fn lathe_parts(
    profile: &[(f64, f64)],
    segments: usize,
    top_pole: Option<f64>,
    bottom_pole: Option<f64>,
) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut vertices = Vec::new();
    for &(r, z) in profile {
        for i in 0..segments {
            let theta = std::f64::consts::TAU * i as f64 / segments as f64;
            vertices.push(Vec3::new(r * theta.cos(), r * theta.sin(), z));
        }
    }
    let ring = |j: usize, i: usize| j * segments + i % segments;
    let mut faces = Vec::new();
    for j in 0..profile.len() - 1 {
        for i in 0..segments {
            let (a, b, c, d) = (ring(j, i), ring(j + 1, i), ring(j, i + 1), ring(j + 1, i + 1));
            faces.push([a, b, c]);
            faces.push([c, b, d]);
        }
    }
    if let Some(z) = top_pole {
        let pole = vertices.len();
        vertices.push(Vec3::new(0.0, 0.0, z));
        for i in 0..segments {
            faces.push([pole, ring(0, i), ring(0, i + 1)]);
        }
    }
    if let Some(z) = bottom_pole {
        let pole = vertices.len();
        let last = profile.len() - 1;
        vertices.push(Vec3::new(0.0, 0.0, z));
        for i in 0..segments {
            faces.push([ring(last, i), pole, ring(last, i + 1)]);
        }
    }
    (vertices, faces)
}

/// Capsule with axis from `(0,0,-half_length)` to `(0,0,half_length)`.
pub fn capsule(half_length: f64, radius: f64, segments: usize, cap_rings: usize) -> TriMesh {
    let mut profile = Vec::new();
    for k in 1..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        profile.push((radius * phi.sin(), half_length + radius * phi.cos()));
    }
    for k in (1..=cap_rings).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        profile.push((radius * phi.sin(), -half_length - radius * phi.cos()));
    }
    closed_lathe(half_length + radius, &profile, -half_length - radius, segments)
}

/// One round of 1-to-4 midpoint subdivision. The new vertex list is the old
/// vertices followed by one midpoint per edge of `edge_pairs`.
#[derive(Debug, Clone)]
pub struct Subdivision {
    pub mesh: TriMesh,
    pub edge_pairs: Vec<[usize; 2]>,
}

impl Subdivision {
    /// Maps positions of the coarse mesh onto the subdivided vertex set.
    pub fn transfer(&self, coarse: &[Vec3]) -> Vec<Vec3> {
        let mut out = coarse.to_vec();
        out.extend(self.edge_pairs.iter().map(|&[a, b]| (coarse[a] + coarse[b]) * 0.5));
        out
    }
}

pub fn subdivide(mesh: &TriMesh) -> Subdivision {
    let (vertices, faces, edge_pairs) = midpoint_split(mesh.vertices(), mesh.faces());
    Subdivision {
        mesh: TriMesh::new(vertices, faces).expect("subdivision of a valid mesh is valid"),
        edge_pairs,
    }
}

fn midpoint_split(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
) -> (Vec<Vec3>, Vec<[usize; 3]>, Vec<[usize; 2]>) {
    let mut out = vertices.to_vec();
    let mut edge_pairs = Vec::new();
    let mut lookup: HashMap<[usize; 2], usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, out: &mut Vec<Vec3>| -> usize {
        let key = [a.min(b), a.max(b)];
        *lookup.entry(key).or_insert_with(|| {
            out.push((vertices[a] + vertices[b]) * 0.5);
            edge_pairs.push(key);
            out.len() - 1
        })
    };
    let mut new_faces = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = mid(a, b, &mut out);
        let bc = mid(b, c, &mut out);
        let ca = mid(c, a, &mut out);
        new_faces.push([a, ab, ca]);
        new_faces.push([ab, b, bc]);
        new_faces.push([ca, bc, c]);
        new_faces.push([ab, bc, ca]);
    }
    (out, new_faces, edge_pairs)
}
