//! Rigid analytic colliders with keyframe-free parametric motion.

use nalgebra::{Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{shapes, TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BodyShape {
    Sphere {
        radius: f64,
        /// Icosphere level of the tessellation handed to the learning side.
        subdivisions: usize,
    },
    /// Capsule along the local z axis.
    Capsule {
        half_length: f64,
        radius: f64,
        segments: usize,
        cap_rings: usize,
    },
}

impl BodyShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BodyShape::Sphere { radius, .. } => radius > 0.0,
            BodyShape::Capsule {
                half_length,
                radius,
                segments,
                cap_rings,
            } => half_length >= 0.0 && radius > 0.0 && segments >= 3 && cap_rings >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid body shape {self:?}")))
        }
    }

    /// Signed distance and outward unit gradient in the body frame.
    pub fn sdf_local(&self, p: &Vec3) -> (f64, Vec3) {
        let (offset, radius) = match *self {
            BodyShape::Sphere { radius, .. } => (*p, radius),
            BodyShape::Capsule {
                half_length, radius, ..
            } => (p - Vec3::new(0.0, 0.0, p.z.clamp(-half_length, half_length)), radius),
        };
        let len = offset.norm();
        let dir = if len > 0.0 { offset / len } else { Vec3::z() };
        (len - radius, dir)
    }

    /// Inscribed triangulation (vertices on the analytic surface).
    pub fn tessellate(&self) -> TriMesh {
        match *self {
            BodyShape::Sphere { radius, subdivisions } => shapes::icosphere(subdivisions, radius),
            BodyShape::Capsule {
                half_length,
                radius,
                segments,
                cap_rings,
            } => shapes::capsule(half_length, radius, segments, cap_rings),
        }
    }
}

/// Smooth start: position along a path whose speed ramps linearly from 0 to
/// 1 over `ramp` seconds.
fn ramped_time(t: f64, ramp: f64) -> f64 {
    if ramp <= 0.0 || t >= ramp {
        t - ramp.max(0.0) / 2.0
    } else {
        t * t / (2.0 * ramp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    Translate {
        velocity: [f64; 3],
        ramp: f64,
    },
    /// Horizontal circle through the start position, counter-clockwise.
    Orbit {
        radius: f64,
        period: f64,
        ramp: f64,
    },
    /// Rotation about `axis` through `pivot` by `amplitude·sin(ωt)·(1 − e^{−t/ramp})`.
    Pendulum {
        pivot: [f64; 3],
        axis: [f64; 3],
        amplitude: f64,
        period: f64,
        ramp: f64,
    },
}

/// `world = rotation · local + translation`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse_apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColliderSpec {
    pub shape: BodyShape,
    pub center: [f64; 3],
    pub motion: Motion,
}

impl ColliderSpec {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        match &self.motion {
            Motion::Orbit { period, .. } | Motion::Pendulum { period, .. } if !(*period > 0.0) => {
                Err(Error::Config("motion period must be positive".into()))
            }
            Motion::Pendulum { axis, .. } if Vec3::from(*axis).norm() == 0.0 => {
                Err(Error::Config("pendulum axis must be non-zero".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        let c = Vec3::from(self.center);
        match &self.motion {
            Motion::Static => Pose {
                rotation: Rotation3::identity(),
                translation: c,
            },
            Motion::Translate { velocity, ramp } => Pose {
                rotation: Rotation3::identity(),
                translation: c + Vec3::from(*velocity) * ramped_time(t, *ramp),
            },
            Motion::Orbit { radius, period, ramp } => {
                let theta = std::f64::consts::TAU / period * ramped_time(t, *ramp);
                Pose {
                    rotation: Rotation3::identity(),
                    translation: c + Vec3::new(radius * (theta.cos() - 1.0), radius * theta.sin(), 0.0),
                }
            }
            Motion::Pendulum {
                pivot,
                axis,
                amplitude,
                period,
                ramp,
            } => {
                let envelope = if *ramp > 0.0 { 1.0 - (-t / ramp).exp() } else { 1.0 };
                let angle = amplitude * (std::f64::consts::TAU * t / period).sin() * envelope;
                let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::from(*axis)), angle);
                let pivot = Vec3::from(*pivot);
                Pose {
                    rotation,
                    translation: pivot + rotation * (c - pivot),
                }
            }
        }
    }

    /// Velocity of the body material point currently at world position `p`.
    pub fn point_velocity(&self, p: &Vec3, t: f64) -> Vec3 {
        let h = 1e-5;
        let local = self.pose(t).inverse_apply(p);
        let t0 = (t - h).max(0.0);
        let t1 = t + h;
        (self.pose(t1).apply(&local) - self.pose(t0).apply(&local)) / (t1 - t0)
    }

    /// Signed distance and outward unit normal in world space.
    pub fn sdf(&self, p: &Vec3, t: f64) -> (f64, Vec3) {
        let pose = self.pose(t);
        let (d, n) = self.shape.sdf_local(&pose.inverse_apply(p));
        (d, pose.rotation * n)
    }

    pub fn world_vertices(&self, local: &TriMesh, t: f64) -> Vec<Vec3> {
        let pose = self.pose(t);
        local.vertices().iter().map(|v| pose.apply(v)).collect()
    }
}
