//! Parametric garment generators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{shapes, TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GarmentShape {
    /// Open truncated cone around the z axis, waist ring on top.
    Skirt {
        top_radius: f64,
        bottom_radius: f64,
        top_z: f64,
        length: f64,
        segments: usize,
        rings: usize,
    },
    /// Skirt split into panels by `panels` evenly spaced vertical cuts that
    /// run from the hem up to `1 − cut_fraction` of the length.
    PanelSkirt {
        top_radius: f64,
        bottom_radius: f64,
        top_z: f64,
        length: f64,
        segments: usize,
        rings: usize,
        panels: usize,
        cut_fraction: f64,
    },
    /// Rectangular sheet in the xz plane hanging down from its top edge,
    /// centered on `origin` horizontally.
    Sheet {
        width: f64,
        height: f64,
        nx: usize,
        nz: usize,
        origin: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinMode {
    #[default]
    None,
    /// Top row held at its rest position.
    TopFixed,
    /// Top row rigidly attached to the collider.
    TopAttached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub shape: GarmentShape,
    #[serde(default)]
    pub pins: PinMode,
}

#[derive(Debug, Clone)]
pub struct Garment {
    pub rest: TriMesh,
    /// Vertices of the top row (highest z, within 1e-9).
    pub top_row: Vec<usize>,
    pub pins: PinMode,
}

fn cone_profile(top_radius: f64, bottom_radius: f64, top_z: f64, length: f64, rings: usize) -> Vec<(f64, f64)> {
    (0..=rings)
        .map(|j| {
            let s = j as f64 / rings as f64;
            (top_radius + (bottom_radius - top_radius) * s, top_z - length * s)
        })
        .collect()
}

impl GarmentSpec {
    pub fn build(&self) -> Result<Garment> {
        let rest = match self.shape {
            GarmentShape::Skirt {
                top_radius,
                bottom_radius,
                top_z,
                length,
                segments,
                rings,
            } => {
                check(segments >= 3 && rings >= 1 && top_radius > 0.0 && bottom_radius > 0.0 && length > 0.0)?;
                shapes::open_lathe(&cone_profile(top_radius, bottom_radius, top_z, length, rings), segments)
            }
            GarmentShape::PanelSkirt {
                top_radius,
                bottom_radius,
                top_z,
                length,
                segments,
                rings,
                panels,
                cut_fraction,
            } => {
                check(
                    segments >= 3
                        && rings >= 2
                        && panels >= 1
                        && segments % panels == 0
                        && top_radius > 0.0
                        && bottom_radius > 0.0
                        && length > 0.0
                        && (0.0..1.0).contains(&cut_fraction),
                )?;
                let profile = cone_profile(top_radius, bottom_radius, top_z, length, rings);
                let cuts: Vec<usize> = (0..panels).map(|k| k * segments / panels).collect();
                let from = ((1.0 - cut_fraction) * rings as f64).round() as usize;
                shapes::slit_lathe(&profile, segments, &cuts, from.min(rings - 1))
            }
            GarmentShape::Sheet {
                width,
                height,
                nx,
                nz,
                origin,
            } => {
                check(nx >= 1 && nz >= 1 && width > 0.0 && height > 0.0)?;
                let grid = shapes::grid(nx, nz, width, height);
                let o = Vec3::from(origin);
                // grid (x, y) becomes (x − w/2, 0, −y): y = 0 is the top row
                let verts = grid
                    .vertices()
                    .iter()
                    .map(|p| o + Vec3::new(p.x - width / 2.0, 0.0, -p.y))
                    .collect();
                let faces = grid.faces().iter().map(|&[a, b, c]| [a, c, b]).collect();
                TriMesh::new(verts, faces)?
            }
        };
        let top = rest.vertices().iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
        let top_row = (0..rest.vertex_count())
            .filter(|&i| (rest.vertices()[i].z - top).abs() < 1e-9)
            .collect();
        Ok(Garment {
            rest,
            top_row,
            pins: self.pins,
        })
    }
}

fn check(ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config("invalid garment parameters".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skirt_counts() {
        let g = GarmentSpec {
            shape: GarmentShape::Skirt {
                top_radius: 0.27,
                bottom_radius: 0.33,
                top_z: 0.0,
                length: 0.45,
                segments: 32,
                rings: 16,
            },
            pins: PinMode::TopAttached,
        }
        .build()
        .unwrap();
        assert_eq!(g.rest.face_count(), 1024);
        assert_eq!(g.top_row.len(), 32);
        assert_eq!(g.rest.topology().component_count(), 1);
        // outward normals: the first face points away from the axis
        let c = g.rest.centroid(0);
        assert!(g.rest.normals()[0].dot(&Vec3::new(c.x, c.y, 0.0)) > 0.0);
    }

    #[test]
    fn panel_skirt_is_one_piece_with_cuts() {
        let g = GarmentSpec {
            shape: GarmentShape::PanelSkirt {
                top_radius: 0.27,
                bottom_radius: 0.33,
                top_z: 0.0,
                length: 0.45,
                segments: 32,
                rings: 16,
                panels: 2,
                cut_fraction: 0.75,
            },
            pins: PinMode::TopAttached,
        }
        .build()
        .unwrap();
        assert_eq!(g.rest.topology().component_count(), 1);
        assert_eq!(g.rest.vertex_count(), 32 * 17 + 2 * 12);
    }

    #[test]
    fn sheet_hangs_from_top_row() {
        let g = GarmentSpec {
            shape: GarmentShape::Sheet {
                width: 0.4,
                height: 0.5,
                nx: 8,
                nz: 10,
                origin: [0.0, -0.1, 1.0],
            },
            pins: PinMode::TopFixed,
        }
        .build()
        .unwrap();
        assert_eq!(g.top_row.len(), 9);
        assert!(g.top_row.iter().all(|&i| g.rest.vertices()[i].z == 1.0));
        assert!(g.rest.normals()[0].y.abs() > 0.99);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let spec = GarmentSpec {
            shape: GarmentShape::PanelSkirt {
                top_radius: 0.27,
                bottom_radius: 0.33,
                top_z: 0.0,
                length: 0.45,
                segments: 30,
                rings: 16,
                panels: 4,
                cut_fraction: 0.75,
            },
            pins: PinMode::None,
        };
        assert!(matches!(spec.build(), Err(Error::Config(_))));
    }
}
