//! Signed-distance and nearest-face queries against a watertight body mesh.
//!
//! Distances come from a BVH over body triangles; the sign comes from the
//! generalized winding number, so any closed triangle mesh works as a
//! collider.

use std::f64::consts::PI;

use crate::bvh::{closest_point_on_triangle, Bvh};
use crate::error::{Error, Result};
use crate::geometry::{flatten_row_major, local_frame, TriMesh, Vec3};

/// One time step of the collider.
#[derive(Debug, Clone)]
pub struct ColliderFrame {
    mesh: TriMesh,
    faces_bvh: Bvh,
    vertex_bvh: Bvh,
    vertex_normals: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfQuery {
    /// Negative inside the body.
    pub signed_distance: f64,
    /// Unit vector from the query point toward `nearest_point`. On the
    /// surface it falls back to the inward face normal.
    pub direction: Vec3,
    pub nearest_face: usize,
    pub nearest_point: Vec3,
    pub winding_number: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestFace {
    pub face: usize,
    pub point: Vec3,
    pub barycentric: [f64; 3],
    pub distance: f64,
}

impl ColliderFrame {
    pub fn new(mesh: TriMesh) -> Result<Self> {
        let boundary = mesh.topology().boundary_edges();
        if let Some(e) = boundary.first() {
            return Err(Error::InvalidArgument(format!(
                "collider mesh is not watertight: boundary edge ({}, {})",
                e[0], e[1]
            )));
        }
        let faces_bvh = Bvh::from_triangles(mesh.vertices(), mesh.faces());
        let vertex_bvh = Bvh::from_points(mesh.vertices());
        let vertex_normals = mesh.vertex_normals();
        Ok(ColliderFrame {
            mesh,
            faces_bvh,
            vertex_bvh,
            vertex_normals,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    /// Area-weighted outward vertex normals.
    pub fn vertex_normals(&self) -> &[Vec3] {
        &self.vertex_normals
    }

    fn triangle(&self, face: usize) -> (Vec3, Vec3, Vec3) {
        let [a, b, c] = self.mesh.faces()[face];
        let v = self.mesh.vertices();
        (v[a], v[b], v[c])
    }

    /// Globally nearest face; ties go to the lowest face index.
    pub fn nearest_face(&self, p: &Vec3) -> NearestFace {
        let (face, d2) = self
            .faces_bvh
            .nearest(p, |f| {
                let (a, b, c) = self.triangle(f);
                (closest_point_on_triangle(p, &a, &b, &c).0 - p).norm_squared()
            })
            .expect("collider has faces");
        let (a, b, c) = self.triangle(face);
        let (point, barycentric) = closest_point_on_triangle(p, &a, &b, &c);
        NearestFace {
            face,
            point,
            barycentric,
            distance: d2.sqrt(),
        }
    }

    /// Nearest body vertex by Euclidean distance; ties to the lowest index.
    pub fn nearest_vertex(&self, p: &Vec3) -> (usize, f64) {
        let verts = self.mesh.vertices();
        let (v, d2) = self
            .vertex_bvh
            .nearest(p, |k| (verts[k] - p).norm_squared())
            .expect("collider has vertices");
        (v, d2.sqrt())
    }

    /// Generalized winding number: ≈1 inside, ≈0 outside.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        let verts = self.mesh.vertices();
        let mut total = 0.0;
        for &[ia, ib, ic] in self.mesh.faces() {
            let a = verts[ia] - p;
            let b = verts[ib] - p;
            let c = verts[ic] - p;
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * PI)
    }

    pub fn signed_distance(&self, p: &Vec3) -> SdfQuery {
        let nearest = self.nearest_face(p);
        let winding = self.winding_number(p);
        let inside = winding >= 0.5;
        let offset = nearest.point - p;
        let direction = if nearest.distance > 0.0 {
            offset / nearest.distance
        } else {
            -self.mesh.normals()[nearest.face]
        };
        SdfQuery {
            signed_distance: if inside { -nearest.distance } else { nearest.distance },
            direction,
            nearest_face: nearest.face,
            nearest_point: nearest.point,
            winding_number: winding,
        }
    }
}

/// Collider deformation feature of one body face between two frames: the
/// row-major relative deformation gradient `Q_{t+1} Q_t⁻¹` followed by the
/// centroid displacement.
pub fn collider_motion_feature(
    current: &ColliderFrame,
    next: &ColliderFrame,
    face: usize,
) -> Result<[f64; 12]> {
    let (m0, m1) = (current.mesh(), next.mesh());
    if m0.faces() != m1.faces() {
        return Err(Error::Dimension("collider frames do not share a triangulation".into()));
    }
    let q0 = local_frame(m0, face, m0.vertices())?;
    let q1 = local_frame(m1, face, m1.vertices())?;
    let inv = q0.try_inverse().ok_or(Error::DegenerateFace {
        face,
        area: m0.areas()[face],
    })?;
    let rel = q1 * inv;
    let vel = m1.centroid(face) - m0.centroid(face);
    let mut out = [0.0; 12];
    out[..9].copy_from_slice(&flatten_row_major(&rel));
    out[9..].copy_from_slice(vel.as_slice());
    Ok(out)
}
